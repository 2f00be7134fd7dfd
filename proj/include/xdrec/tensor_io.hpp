#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "json.hpp"
#include "xdrec/autograd.hpp"

namespace xdrec {

// Raw little-endian float32, row-major, no header.
void write_tensor(const std::filesystem::path& path, const Mat& m);
Mat read_tensor(const std::filesystem::path& path, Index rows, Index cols);

// A tensor directory holds meta.json, manifest.json (name -> [rows, cols])
// and one <name>.bin per tensor.
void save_tensor_dir(const std::filesystem::path& dir, const ParamList& tensors, const nlohmann::json& meta);

struct TensorDir {
  nlohmann::json meta;
  std::map<std::string, Mat> tensors;
};
TensorDir load_tensor_dir(const std::filesystem::path& dir);

// Copies every tensor of `into` from `src`, checking presence and shape.
void assign_tensors(const TensorDir& src, const ParamList& into, const std::string& prefix = "");

nlohmann::json read_json_file(const std::filesystem::path& path);
// Sorted keys, trailing newline.
void write_json_file(const std::filesystem::path& path, const nlohmann::json& j, int indent = 2);

std::string sha256_file(const std::filesystem::path& path);
std::string sha256_hex(std::string_view bytes);

}  // namespace xdrec
