#include "xdrec/tensor_io.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <vector>

#include "xdrec/errors.hpp"

namespace xdrec {
namespace fs = std::filesystem;

namespace {

void to_little_endian(std::vector<char>& bytes) {
  if constexpr (std::endian::native == std::endian::big) {
    for (size_t i = 0; i + 4 <= bytes.size(); i += 4) {
      std::swap(bytes[i], bytes[i + 3]);
      std::swap(bytes[i + 1], bytes[i + 2]);
    }
  }
}

}  // namespace

void write_tensor(const fs::path& path, const Mat& m) {
  std::vector<char> bytes(static_cast<size_t>(m.size()) * sizeof(float));
  std::memcpy(bytes.data(), m.data(), bytes.size());
  to_little_endian(bytes);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write tensor file " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Mat read_tensor(const fs::path& path, Index rows, Index cols) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read tensor file " + path.string());
  const size_t expected = static_cast<size_t>(rows * cols) * sizeof(float);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() != expected)
    throw DataError("tensor file " + path.string() + " has " + std::to_string(bytes.size()) + " bytes, expected " +
                    std::to_string(expected));
  to_little_endian(bytes);
  Mat m(rows, cols);
  std::memcpy(m.data(), bytes.data(), expected);
  return m;
}

void save_tensor_dir(const fs::path& dir, const ParamList& tensors, const nlohmann::json& meta) {
  fs::create_directories(dir);
  nlohmann::json manifest = nlohmann::json::object();
  for (const auto& p : tensors) {
    manifest[p.name] = {p.var.rows(), p.var.cols()};
    write_tensor(dir / (p.name + ".bin"), p.var.value());
  }
  write_json_file(dir / "meta.json", meta);
  write_json_file(dir / "manifest.json", manifest);
}

TensorDir load_tensor_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("checkpoint directory not found: " + dir.string());
  TensorDir out;
  out.meta = read_json_file(dir / "meta.json");
  const auto manifest = read_json_file(dir / "manifest.json");
  for (const auto& [name, shape] : manifest.items()) {
    if (!shape.is_array() || shape.size() != 2) throw DataError("bad manifest entry for " + name);
    out.tensors[name] = read_tensor(dir / (name + ".bin"), shape[0].get<Index>(), shape[1].get<Index>());
  }
  return out;
}

void assign_tensors(const TensorDir& src, const ParamList& into, const std::string& prefix) {
  for (const auto& p : into) {
    const std::string key = prefix + p.name;
    auto it = src.tensors.find(key);
    if (it == src.tensors.end()) throw DataError("checkpoint is missing tensor " + key);
    if (it->second.rows() != p.var.rows() || it->second.cols() != p.var.cols())
      throw DataError("checkpoint tensor " + key + " has shape [" + std::to_string(it->second.rows()) + ", " +
                      std::to_string(it->second.cols()) + "], expected [" + std::to_string(p.var.rows()) + ", " +
                      std::to_string(p.var.cols()) + "]");
    auto v = p.var;
    v.mutable_value() = it->second;
  }
}

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("invalid JSON in " + path.string() + ": " + e.what());
  }
}

void write_json_file(const fs::path& path, const nlohmann::json& j, int indent) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(indent) << '\n';
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return os.str();
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return sha256_hex(bytes);
}

}  // namespace xdrec
