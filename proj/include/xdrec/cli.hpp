#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "xdrec/evaluate.hpp"

namespace xdrec {

// Everything a run needs. Every field is reachable through a flat key
// (see RunConfig::keys) both in config files and as --key flags.
struct RunConfig {
  PipelineConfig pipeline;
  std::filesystem::path corpus;  // empty: <output root>/corpus
  std::filesystem::path out;     // empty: <output root>/<command default>
  std::vector<uint64_t> seeds{1};
  Variant variant = Variant::Full;
  std::vector<Variant> variants = all_variants();  // ablate only
  Protocol protocol = Protocol::FullRanking;
  Split split = Split::Test;

  // Flat key names in a fixed order.
  static const std::vector<std::string>& keys();
  // ConfigError for unknown keys and unparsable values.
  void set(std::string_view key, std::string_view value);
  std::string get(std::string_view key) const;

  void validate() const;
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  bool operator==(const RunConfig& o) const { return to_json() == o.to_json(); }
};

// `key = value` lines; blank lines and lines starting with # are skipped.
void apply_config_file(RunConfig& cfg, const std::filesystem::path& path);

// Root for default output locations.
inline constexpr const char* kOutputRootEnv = "XDREC_OUT";

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumerical = 3;

// Exclusive claim on an output directory, released on destruction.
class OutputLock {
 public:
  explicit OutputLock(const std::filesystem::path& dir);  // ConfigError when held
  ~OutputLock();
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

  static constexpr const char* kFileName = ".xdrec.lock";

 private:
  std::filesystem::path path_;
};

// Hash over the relative names and contents of every regular file in
// `dir` except manifests and the lock.
std::string sha256_dir(const std::filesystem::path& dir);

std::string build_id();

// Entry point; args[0] is the program name. Returns the exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace xdrec
