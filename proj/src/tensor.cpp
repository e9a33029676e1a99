#include "pkd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "pkd/error.hpp"

namespace pkd {

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != 0) out << "x";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t extent : shape) n *= extent;
  return n;
}

namespace {

void check_extents(const Shape& shape) {
  for (std::size_t extent : shape) {
    if (extent == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape));
  }
}

}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  check_extents(shape_);
  data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_extents(shape_);
  if (data_.size() != shape_numel(shape_)) {
    throw DimensionError("shape " + shape_string(shape_) + " needs " + std::to_string(shape_numel(shape_)) +
                         " values, got " + std::to_string(data_.size()));
  }
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor(Shape{values.size()}, std::vector<double>(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor(Shape{r, c}, std::move(data));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) throw DimensionError("axis out of range for shape " + shape_string(shape_));
  return shape_[axis];
}

std::size_t Tensor::rows() const { return shape_.empty() ? 1 : shape_.front(); }

std::size_t Tensor::cols() const { return shape_.empty() ? 1 : data_.size() / shape_.front(); }

double Tensor::item() const {
  if (data_.size() != 1) throw ContractError("item() on non-scalar tensor " + shape_string(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

namespace kernels {

namespace {

void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) throw DimensionError(std::string(what) + " expects a matrix, got " + shape_string(t.shape()));
}

// c[m×n] += a[m×k] · b[k×n]; the k loop is outermost per row so every output
// element accumulates its terms in increasing k order.
void gemm_accumulate(const double* __restrict a, const double* __restrict b, double* __restrict c, std::size_t m,
                     std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* __restrict crow = c + i * n;
    const double* __restrict arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = arow[p];
      const double* __restrict brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul inner extents differ: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  Tensor c(Shape{a.dim(0), b.dim(1)});
  gemm_accumulate(a.raw(), b.raw(), c.raw(), a.dim(0), a.dim(1), b.dim(1));
  return c;
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor t(Shape{n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t.raw()[j * m + i] = a.raw()[i * n + j];
  return t;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  if (a.dim(1) != b.dim(1)) {
    throw DimensionError("matmul_nt inner extents differ: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()) + "^T");
  }
  return matmul(a, transpose(b));
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_tn");
  require_matrix(b, "matmul_tn");
  if (a.dim(0) != b.dim(0)) {
    throw DimensionError("matmul_tn inner extents differ: " + shape_string(a.shape()) + "^T x " +
                         shape_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c(Shape{k, n});
  const double* __restrict ap = a.raw();
  const double* __restrict bp = b.raw();
  double* __restrict cp = c.raw();
  for (std::size_t r = 0; r < m; ++r) {
    const double* __restrict brow = bp + r * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double arp = ap[r * k + p];
      double* __restrict crow = cp + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += arp * brow[j];
    }
  }
  return c;
}

// Max-subtraction leaves the result unchanged mathematically and keeps exp()
// in range.
Tensor softmax_rows(const Tensor& x, double temperature) {
  if (!(temperature > 0.0)) throw DomainError("softmax temperature must be positive, got " + std::to_string(temperature));
  Tensor y(x.shape());
  const std::size_t m = x.rows(), c = x.cols();
  for (std::size_t i = 0; i < m; ++i) {
    const double* in = x.raw() + i * c;
    double* out = y.raw() + i * c;
    double mx = in[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, in[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      out[j] = std::exp((in[j] - mx) / temperature);
      sum += out[j];
    }
    for (std::size_t j = 0; j < c; ++j) out[j] /= sum;
  }
  return y;
}

Tensor log_softmax_rows(const Tensor& x, double temperature) {
  if (!(temperature > 0.0)) throw DomainError("softmax temperature must be positive, got " + std::to_string(temperature));
  Tensor y(x.shape());
  const std::size_t m = x.rows(), c = x.cols();
  for (std::size_t i = 0; i < m; ++i) {
    const double* in = x.raw() + i * c;
    double* out = y.raw() + i * c;
    double mx = in[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, in[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) sum += std::exp((in[j] - mx) / temperature);
    const double log_z = std::log(sum);
    for (std::size_t j = 0; j < c; ++j) out[j] = (in[j] - mx) / temperature - log_z;
  }
  return y;
}

// tanh approximation used by BERT:
//   gelu(x) = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
namespace {
constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluCubic = 0.044715;
}  // namespace

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluScale * (x + kGeluCubic * x * x * x))); }

double gelu_derivative(double x) {
  const double u = kGeluScale * (x + kGeluCubic * x * x * x);
  const double t = std::tanh(u);
  const double du = kGeluScale * (1.0 + 3.0 * kGeluCubic * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

}  // namespace kernels

}  // namespace pkd
