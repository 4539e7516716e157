#pragma once

#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <string>

namespace gliocal {

inline constexpr const char* kToolVersion = "0.1.0";

// Provenance record written once per run directory. `code_path` names the
// algorithm route actually taken so runs that share an implementation can be
// recognized (the homogeneous-prior calibration must fingerprint identically
// to the heterogeneous one).
struct RunManifest {
  std::string tool_version = kToolVersion;
  std::string subcommand;
  std::string code_path;
  std::uint64_t seed = 0;
  std::string timestamp;  // ISO-8601 UTC, stamped when written
  nlohmann::json config_echo = nlohmann::json::object();
  nlohmann::json extra = nlohmann::json::object();       // subcommand details
  std::map<std::string, std::string> input_digests;      // logical name -> hex

  nlohmann::json to_json() const;
};

// Staging directory that becomes `target` only on finalize(); abandoned
// stages are deleted. The target must not already exist.
class RunDir {
public:
  explicit RunDir(const std::string& target);
  RunDir(const RunDir&) = delete;
  RunDir& operator=(const RunDir&) = delete;
  ~RunDir();

  const std::filesystem::path& stage() const { return stage_; }
  std::string file(const std::string& name) const { return (stage_ / name).string(); }

  void write_manifest(RunManifest& m);  // stamps the timestamp
  void finalize();

private:
  std::filesystem::path target_;
  std::filesystem::path stage_;
  bool finalized_ = false;
  bool manifest_written_ = false;
};

std::string file_digest_hex(const std::string& path);
std::string iso_utc_now();
void write_text_file(const std::string& path, const std::string& content);
void write_json_file(const std::string& path, const nlohmann::json& j);
nlohmann::json read_json_file(const std::string& path);

}  // namespace gliocal
