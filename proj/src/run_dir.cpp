#include "saq/run_dir.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "saq/binio.hpp"

namespace saq {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::uint32_t file_crc(const std::filesystem::path& p) {
  const std::vector<std::uint8_t> bytes = read_file(p);
  return crc32(bytes);
}

}  // namespace

KeyValues parse_key_values(const std::string& text) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  for (int n = 1; std::getline(in, line); ++n) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos || trim(line.substr(0, eq)).empty()) {
      throw std::invalid_argument("line " + std::to_string(n) + ": expected key=value");
    }
    kv.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return kv;
}

KeyValues read_key_value_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_key_values(ss.str());
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
}

std::string format_key_values(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

std::filesystem::path run_root() {
  const char* env = std::getenv("SAQ_RUN_ROOT");
  return env && *env ? std::filesystem::path(env) : std::filesystem::path("runs");
}

RunDir::RunDir(std::filesystem::path path, bool force) : path_(std::move(path)) {
  std::error_code ec;
  if (std::filesystem::exists(path_, ec)) {
    if (!std::filesystem::is_directory(path_, ec)) throw RunDirError(path_.string() + " exists and is not a directory");
    if (!std::filesystem::is_empty(path_, ec) && !force) {
      throw RunDirError(path_.string() + " is not empty (pass --force to reuse it)");
    }
  }
  std::filesystem::create_directories(path_, ec);
  if (ec) throw RunDirError("cannot create " + path_.string() + ": " + ec.message());
  const auto probe = path_ / ".write-probe";
  {
    std::ofstream out(probe, std::ios::binary);
    if (!out) throw RunDirError(path_.string() + " is not writable");
  }
  std::filesystem::remove(probe, ec);
}

void RunDir::add(const std::string& name) {
  if (std::find(files_.begin(), files_.end(), name) == files_.end()) files_.push_back(name);
}

void RunDir::write_config(const KeyValues& kv) {
  std::ofstream out(file("config.resolved"), std::ios::binary | std::ios::trunc);
  if (!out) throw RunDirError("cannot write config.resolved");
  out << format_key_values(kv);
  out.close();
  add("config.resolved");
}

void RunDir::write_manifest() const {
  std::vector<std::string> names = files_;
  std::sort(names.begin(), names.end());
  std::ofstream out(file("MANIFEST"), std::ios::binary | std::ios::trunc);
  if (!out) throw RunDirError("cannot write MANIFEST");
  for (const auto& n : names) {
    char crc[9];
    std::snprintf(crc, sizeof(crc), "%08x", file_crc(file(n)));
    out << crc << " " << std::filesystem::file_size(file(n)) << " " << n << "\n";
  }
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "MANIFEST", std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + (dir / "MANIFEST").string());
  std::vector<ManifestEntry> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    ManifestEntry e;
    std::string crc;
    ls >> crc >> e.size;
    std::getline(ls >> std::ws, e.name);
    e.crc = static_cast<std::uint32_t>(std::stoul(crc, nullptr, 16));
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<std::string> verify_manifest(const std::filesystem::path& dir) {
  std::vector<std::string> bad;
  for (const auto& e : read_manifest(dir)) {
    const auto p = dir / e.name;
    if (!std::filesystem::exists(p) || file_crc(p) != e.crc) bad.push_back(e.name);
  }
  return bad;
}

}  // namespace saq
