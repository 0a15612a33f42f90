#pragma once

#include <cstdint>
#include <map>
#include <string>

namespace mnmt {

// Reproducibility record written next to every command's outputs. run_id is
// content-derived (command, resolved config, input hashes, seed), so a rerun
// with identical inputs gets the same id.
struct RunManifest {
  std::string run_id;
  std::string command;
  std::string config_json;
  std::map<std::string, std::string> input_hashes;  // path -> fnv64 hex
  std::string lineage_hash;  // chained over the input checkpoint's lineage
  uint64_t seed = 0;
  std::string started_at;
  std::string finished_at;
};

std::string file_hash_hex(const std::string& path);  // data_error if unreadable
std::string now_iso8601();

RunManifest make_manifest(const std::string& command, const std::string& config_json,
                          const std::map<std::string, std::string>& input_hashes,
                          const std::string& parent_lineage, uint64_t seed);

void write_manifest(const std::string& path, const RunManifest& m);
RunManifest read_manifest(const std::string& path);

}  // namespace mnmt
