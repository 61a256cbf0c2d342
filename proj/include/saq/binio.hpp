#pragma once

// Little-endian binary containers with a trailing CRC32.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "saq/autodiff.hpp"

namespace saq {

/// Raised for malformed, truncated or corrupted files. The message names the byte offset.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " at offset " + std::to_string(offset)), offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

class BinaryWriter {
 public:
  void put_bytes(std::string_view s);
  void put_u16(std::uint16_t v);
  void put_u32(std::uint32_t v);
  void put_u64(std::uint64_t v);
  void put_f64(double v);
  void put_matrix(const Matrix& m);  // raw values, row-major
  /// Appends CRC32 of everything written so far and returns the buffer.
  std::vector<std::uint8_t> finish();
  const std::vector<std::uint8_t>& bytes() const { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class BinaryReader {
 public:
  /// Verifies the trailing CRC32 before any field is read.
  explicit BinaryReader(std::span<const std::uint8_t> bytes);

  std::string get_bytes(std::size_t n);
  std::uint16_t get_u16();
  std::uint32_t get_u32();
  std::uint64_t get_u64();
  double get_f64();
  Matrix get_matrix(Index rows, Index cols);
  std::uint64_t offset() const { return pos_; }
  std::uint64_t remaining() const { return end_ - pos_; }
  /// Throws unless the payload has been consumed exactly.
  void expect_end() const;

 private:
  void need(std::size_t n) const;
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
  std::size_t end_ = 0;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
/// Writes through a temporary file and renames, so readers never see a partial file.
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

/// Named parameter block inside a model container.
struct NamedBlock {
  std::string name;
  Matrix value;
};

/// Shared model container: magic, u16 version, four u32 dims, u32 block
/// count, then per block (u32 name length, name, u32 rows, u32 cols, f64
/// values), then CRC32.
struct ModelContainer {
  static constexpr std::uint16_t kVersion = 1;
  std::array<char, 4> magic{};
  std::array<std::uint32_t, 4> dims{};
  std::vector<NamedBlock> blocks;

  std::vector<std::uint8_t> encode() const;
  /// Throws FormatError on bad magic, version, truncation or CRC mismatch.
  static ModelContainer decode(std::span<const std::uint8_t> bytes, std::string_view expected_magic);

  const Matrix& block(const std::string& name) const;
  bool has_block(const std::string& name) const;
};

}  // namespace saq
