#include <bit>
#include <cstdint>
#include <fstream>
#include <sstream>

#include "pkd/encoder.hpp"
#include "pkd/error.hpp"

namespace pkd {

namespace {

constexpr int kFormatVersion = 1;

void put_le(std::string& out, double value) {
  const auto bits = std::bit_cast<std::uint64_t>(value);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

double get_le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace

void save_checkpoint(const EncoderModel& model, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  nlohmann::json manifest;
  manifest["format_version"] = kFormatVersion;
  manifest["config"] = model.config;
  nlohmann::json tensors = nlohmann::json::array();
  std::string blob;
  blob.reserve(model.parameter_count() * 8);
  for (const auto& [name, tensor] : model.parameters()) {
    tensors.push_back({{"name", name}, {"shape", tensor->shape()}, {"byte_offset", blob.size()}});
    for (double v : tensor->data()) put_le(blob, v);
  }
  manifest["tensors"] = std::move(tensors);
  write_file(dir / "manifest.json", manifest.dump(2) + "\n");
  write_file(dir / "params.bin", blob);
}

EncoderModel load_checkpoint(const std::filesystem::path& dir) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("bad manifest in " + dir.string() + ": " + e.what());
  }
  if (manifest.value("format_version", 0) != kFormatVersion) {
    throw ParseError("unsupported checkpoint format version in " + dir.string());
  }
  const EncoderConfig config = manifest.at("config").get<EncoderConfig>();
  EncoderModel model = build_model(config, 0);
  const std::string blob = read_file(dir / "params.bin");
  const auto* bytes = reinterpret_cast<const unsigned char*>(blob.data());

  auto params = model.parameters();
  const auto& entries = manifest.at("tensors");
  if (entries.size() != params.size()) {
    throw ParseError("manifest lists " + std::to_string(entries.size()) + " tensors, config implies " +
                     std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = entries[i];
    const auto name = e.at("name").get<std::string>();
    const auto shape = e.at("shape").get<Shape>();
    const auto offset = e.at("byte_offset").get<std::size_t>();
    Tensor& t = *params[i].tensor;
    if (name != params[i].name || shape != t.shape()) {
      throw ParseError("manifest entry " + std::to_string(i) + " (" + name + " " + shape_string(shape) +
                       ") does not match expected " + params[i].name + " " + shape_string(t.shape()));
    }
    if (offset + t.numel() * 8 > blob.size()) throw ParseError("params.bin truncated at tensor " + name);
    for (std::size_t k = 0; k < t.numel(); ++k) t[k] = get_le(bytes + offset + 8 * k);
  }
  return model;
}

}  // namespace pkd
