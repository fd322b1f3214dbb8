#include "run_manifest.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <ctime>

#include "mmfusion/error.hpp"
#include "mmfusion/io.hpp"

namespace fs = std::filesystem;

namespace mmfusion::cli {

std::string git_blob_sha1(std::string_view contents) {
  const std::string header = "blob " + std::to_string(contents.size()) + '\0';
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  const bool ok = ctx && EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) &&
                  EVP_DigestUpdate(ctx, header.data(), header.size()) &&
                  EVP_DigestUpdate(ctx, contents.data(), contents.size()) && EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  if (!ok) throw std::runtime_error("SHA-1 digest failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    const unsigned char b = digest[i];
    out += kHex[b >> 4];
    out += kHex[b & 15];
  }
  return out;
}

std::string content_hash(const fs::path& path) {
  if (fs::is_regular_file(path)) return git_blob_sha1(io::read_file(path));
  if (!fs::is_directory(path)) throw ValidationError("cannot hash " + path.string() + ": no such file or directory");
  std::vector<std::string> lines;
  for (const auto& entry : fs::recursive_directory_iterator(path)) {
    if (!entry.is_regular_file() || entry.path().filename() == "run_manifest.json") continue;
    lines.push_back(fs::relative(entry.path(), path).generic_string() + " " + git_blob_sha1(io::read_file(entry.path())));
  }
  std::sort(lines.begin(), lines.end());
  std::string listing;
  for (const auto& l : lines) listing += l + "\n";
  return git_blob_sha1(listing);
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void RunManifest::add_input(const std::string& name, const fs::path& path) {
  inputs[name] = {{"path", path.string()}, {"sha1", content_hash(path)}};
}

nlohmann::json RunManifest::to_json() const {
  return {{"command", command}, {"argv", argv},       {"config", config},           {"seed", seed},
          {"corpus", corpus},   {"inputs", inputs},   {"started_at", started_at}, {"finished_at", finished_at}};
}

void RunManifest::write(const fs::path& dir) {
  finished_at = utc_timestamp();
  io::write_file_atomic(dir / "run_manifest.json", to_json().dump(2) + "\n");
}

}  // namespace mmfusion::cli
