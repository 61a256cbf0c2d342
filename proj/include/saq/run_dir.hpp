#pragma once

// Run directories: resolved config, emitted artifacts and a CRC manifest.

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace saq {

/// Raised when a run directory cannot be used (exists without force, unwritable).
class RunDirError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using KeyValues = std::vector<std::pair<std::string, std::string>>;

/// Parses `key=value` lines; '#' starts a comment, blank lines are skipped,
/// whitespace around keys and values is trimmed. Throws std::invalid_argument
/// naming the line on malformed input.
KeyValues parse_key_values(const std::string& text);
KeyValues read_key_value_file(const std::filesystem::path& path);
std::string format_key_values(const KeyValues& kv);

/// Root for default run directories: $SAQ_RUN_ROOT, else "runs".
std::filesystem::path run_root();

class RunDir {
 public:
  /// Creates `path`. A non-empty existing directory is refused unless `force`.
  RunDir(std::filesystem::path path, bool force);

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path file(const std::string& name) const { return path_ / name; }
  /// Records an emitted artifact (relative name) for the manifest.
  void add(const std::string& name);
  void write_config(const KeyValues& kv);
  /// Writes MANIFEST: one "crc32-hex size name" line per recorded artifact, sorted by name.
  void write_manifest() const;

 private:
  std::filesystem::path path_;
  std::vector<std::string> files_;
};

struct ManifestEntry {
  std::string name;
  std::uint32_t crc = 0;
  std::uintmax_t size = 0;
};

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& dir);
/// Names of manifest entries whose file is missing or whose CRC no longer matches.
std::vector<std::string> verify_manifest(const std::filesystem::path& dir);

}  // namespace saq
