#include "gliocal/rundir.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "gliocal/errors.hpp"
#include "gliocal/forward.hpp"

namespace gliocal {

namespace fs = std::filesystem;
using nlohmann::json;

json RunManifest::to_json() const {
  json j;
  j["tool_version"] = tool_version;
  j["subcommand"] = subcommand;
  j["code_path"] = code_path;
  j["seed"] = seed;
  j["timestamp"] = timestamp;
  j["config"] = config_echo;
  j["inputs"] = json::object();
  for (const auto& [name, digest] : input_digests) j["inputs"][name] = digest;
  j["details"] = extra;
  return j;
}

RunDir::RunDir(const std::string& target) : target_(target) {
  if (target_.empty()) throw ValidationError("run directory path is empty");
  if (fs::exists(target_))
    throw ValidationError(target_.string() + ": run directory already exists");
  const fs::path parent = target_.parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  stage_ = target_;
  stage_ += ".stage";
  std::error_code ec;
  fs::remove_all(stage_, ec);  // leftover from a crashed run
  if (!fs::create_directories(stage_))
    throw ValidationError(stage_.string() + ": cannot create staging directory");
}

RunDir::~RunDir() {
  if (!finalized_) {
    std::error_code ec;
    fs::remove_all(stage_, ec);
  }
}

void RunDir::write_manifest(RunManifest& m) {
  m.timestamp = iso_utc_now();
  write_json_file(file("manifest.json"), m.to_json());
  manifest_written_ = true;
}

void RunDir::finalize() {
  if (finalized_) return;
  if (!manifest_written_)
    throw ValidationError("run directory finalized without a manifest");
  if (fs::exists(target_))
    throw ValidationError(target_.string() + ": run directory appeared during the run");
  fs::rename(stage_, target_);
  finalized_ = true;
}

std::string file_digest_hex(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError(path + ": cannot open for digesting");
  std::uint64_t h = 1469598103934665603ULL;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof(buf));
    const std::streamsize got = in.gcount();
    if (got > 0) h = fnv1a64(buf, static_cast<std::size_t>(got), h);
  }
  char out[17];
  std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(h));
  return out;
}

std::string iso_utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04d-%02d-%02dT%02d:%02d:%02dZ", tm.tm_year + 1900,
                tm.tm_mon + 1, tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec);
  return buf;
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ValidationError(path + ": cannot open for writing");
  os << content;
  if (!os) throw ValidationError(path + ": write failed");
}

void write_json_file(const std::string& path, const json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError(path + ": cannot open");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  return j;
}

}  // namespace gliocal
