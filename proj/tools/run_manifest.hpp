#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace mmfusion::cli {

/// SHA-1 of "blob <size>\0<contents>", as `git hash-object` prints it.
std::string git_blob_sha1(std::string_view contents);

/// Hash of a file, or of a directory as the blob hash of its sorted
/// "<relative path> <file hash>\n" listing. run_manifest.json is skipped.
std::string content_hash(const std::filesystem::path& path);

/// UTC, second resolution: 2026-01-31T12:00:00Z.
std::string utc_timestamp();

struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  nlohmann::json config = nlohmann::json::object();
  std::uint64_t seed = 0;
  std::string corpus;
  nlohmann::json inputs = nlohmann::json::object();  // name -> {path, sha1}
  std::string started_at;
  std::string finished_at;

  void add_input(const std::string& name, const std::filesystem::path& path);
  nlohmann::json to_json() const;
  /// Stamps finished_at and writes <dir>/run_manifest.json atomically.
  void write(const std::filesystem::path& dir);
};

}  // namespace mmfusion::cli
