#include "mnmt/manifest.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>

#include <json.hpp>

#include "mnmt/common.hpp"

namespace mnmt {

using nlohmann::json;

std::string file_hash_hex(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot hash missing file: " + path);
  uint64_t h = 0xcbf29ce484222325ULL;
  char buf[65536];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
    if (!in) break;
  }
  char hex[24];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
  return hex;
}

std::string now_iso8601() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

RunManifest make_manifest(const std::string& command, const std::string& config_json,
                          const std::map<std::string, std::string>& input_hashes,
                          const std::string& parent_lineage, uint64_t seed) {
  RunManifest m;
  m.command = command;
  m.config_json = config_json;
  m.input_hashes = input_hashes;
  m.seed = seed;
  uint64_t h = fnv1a(command);
  h = hash_combine(h, fnv1a(config_json));
  for (const auto& [path, hash] : input_hashes) {
    h = hash_combine(h, fnv1a(path));
    h = hash_combine(h, fnv1a(hash));
  }
  h = hash_combine(h, seed);
  char hex[24];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
  m.run_id = hex;
  std::snprintf(hex, sizeof(hex), "%016llx",
                static_cast<unsigned long long>(hash_combine(fnv1a(parent_lineage), fnv1a(m.run_id))));
  m.lineage_hash = hex;
  m.started_at = now_iso8601();
  return m;
}

void write_manifest(const std::string& path, const RunManifest& m) {
  json j;
  j["run_id"] = m.run_id;
  j["command"] = m.command;
  j["config"] = json::parse(m.config_json.empty() ? "{}" : m.config_json);
  j["inputs"] = m.input_hashes;
  j["lineage_hash"] = m.lineage_hash;
  j["seed"] = m.seed;
  j["started_at"] = m.started_at;
  j["finished_at"] = m.finished_at;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot write manifest: " + path);
  out << j.dump(2) << '\n';
}

RunManifest read_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot read manifest: " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw data_error(std::string("bad manifest: ") + e.what());
  }
  RunManifest m;
  m.run_id = j.value("run_id", "");
  m.command = j.value("command", "");
  m.config_json = j.contains("config") ? j["config"].dump() : "{}";
  if (j.contains("inputs"))
    m.input_hashes = j["inputs"].get<std::map<std::string, std::string>>();
  m.lineage_hash = j.value("lineage_hash", "");
  m.seed = j.value("seed", uint64_t{0});
  m.started_at = j.value("started_at", "");
  m.finished_at = j.value("finished_at", "");
  return m;
}

}  // namespace mnmt
