#include "saq/binio.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <zlib.h>

namespace saq {

static_assert(std::endian::native == std::endian::little, "little-endian host required");

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  uLong c = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  std::size_t done = 0;
  while (done < bytes.size()) {
    const std::size_t chunk = std::min<std::size_t>(bytes.size() - done, 1u << 30);
    c = ::crc32(c, bytes.data() + done, static_cast<uInt>(chunk));
    done += chunk;
  }
  return static_cast<std::uint32_t>(c);
}

namespace {
template <typename T>
void append_raw(std::vector<std::uint8_t>& buf, T v) {
  std::uint8_t raw[sizeof(T)];
  std::memcpy(raw, &v, sizeof(T));
  buf.insert(buf.end(), raw, raw + sizeof(T));
}
}  // namespace

void BinaryWriter::put_bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
void BinaryWriter::put_u16(std::uint16_t v) { append_raw(buf_, v); }
void BinaryWriter::put_u32(std::uint32_t v) { append_raw(buf_, v); }
void BinaryWriter::put_u64(std::uint64_t v) { append_raw(buf_, v); }
void BinaryWriter::put_f64(double v) { append_raw(buf_, v); }

void BinaryWriter::put_matrix(const Matrix& m) {
  for (Index i = 0; i < m.size(); ++i) put_f64(m.data()[i]);
}

std::vector<std::uint8_t> BinaryWriter::finish() {
  const std::uint32_t c = crc32(buf_);
  put_u32(c);
  return std::move(buf_);
}

BinaryReader::BinaryReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {
  if (bytes.size() < 4) throw FormatError("file too short for checksum", bytes.size());
  end_ = bytes.size() - 4;
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + end_, 4);
  const std::uint32_t actual = crc32(bytes.subspan(0, end_));
  if (stored != actual) throw FormatError("CRC32 mismatch", end_);
}

void BinaryReader::need(std::size_t n) const {
  if (pos_ + n > end_) throw FormatError("truncated data (need " + std::to_string(n) + " bytes)", pos_);
}

std::string BinaryReader::get_bytes(std::size_t n) {
  need(n);
  std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
  pos_ += n;
  return s;
}

namespace {
template <typename T>
T read_raw(std::span<const std::uint8_t> b, std::size_t pos) {
  T v;
  std::memcpy(&v, b.data() + pos, sizeof(T));
  return v;
}
}  // namespace

std::uint16_t BinaryReader::get_u16() {
  need(2);
  auto v = read_raw<std::uint16_t>(bytes_, pos_);
  pos_ += 2;
  return v;
}

std::uint32_t BinaryReader::get_u32() {
  need(4);
  auto v = read_raw<std::uint32_t>(bytes_, pos_);
  pos_ += 4;
  return v;
}

std::uint64_t BinaryReader::get_u64() {
  need(8);
  auto v = read_raw<std::uint64_t>(bytes_, pos_);
  pos_ += 8;
  return v;
}

double BinaryReader::get_f64() {
  need(8);
  auto v = read_raw<double>(bytes_, pos_);
  pos_ += 8;
  return v;
}

Matrix BinaryReader::get_matrix(Index rows, Index cols) {
  const std::size_t n = static_cast<std::size_t>(rows * cols);
  need(n * 8);
  Matrix m(rows, cols);
  std::memcpy(m.data(), bytes_.data() + pos_, n * 8);
  pos_ += n * 8;
  return m;
}

void BinaryReader::expect_end() const {
  if (pos_ != end_) throw FormatError("unexpected trailing bytes", pos_);
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

std::vector<std::uint8_t> ModelContainer::encode() const {
  BinaryWriter w;
  w.put_bytes(std::string_view(magic.data(), 4));
  w.put_u16(kVersion);
  for (auto d : dims) w.put_u32(d);
  w.put_u32(static_cast<std::uint32_t>(blocks.size()));
  for (const auto& b : blocks) {
    w.put_u32(static_cast<std::uint32_t>(b.name.size()));
    w.put_bytes(b.name);
    w.put_u32(static_cast<std::uint32_t>(b.value.rows()));
    w.put_u32(static_cast<std::uint32_t>(b.value.cols()));
    w.put_matrix(b.value);
  }
  return w.finish();
}

ModelContainer ModelContainer::decode(std::span<const std::uint8_t> bytes,
                                      std::string_view expected_magic) {
  BinaryReader r(bytes);
  ModelContainer c;
  const std::string magic = r.get_bytes(4);
  if (magic != expected_magic) {
    throw FormatError("bad magic '" + magic + "', expected '" + std::string(expected_magic) + "'", 0);
  }
  std::memcpy(c.magic.data(), magic.data(), 4);
  const auto version_offset = r.offset();
  if (const auto v = r.get_u16(); v != kVersion) {
    throw FormatError("unsupported version " + std::to_string(v), version_offset);
  }
  for (auto& d : c.dims) d = r.get_u32();
  const std::uint32_t n = r.get_u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    NamedBlock b;
    b.name = r.get_bytes(r.get_u32());
    const Index rows = r.get_u32();
    const Index cols = r.get_u32();
    b.value = r.get_matrix(rows, cols);
    c.blocks.push_back(std::move(b));
  }
  r.expect_end();
  return c;
}

const Matrix& ModelContainer::block(const std::string& name) const {
  for (const auto& b : blocks) {
    if (b.name == name) return b.value;
  }
  throw std::out_of_range("model container has no block '" + name + "'");
}

bool ModelContainer::has_block(const std::string& name) const {
  for (const auto& b : blocks) {
    if (b.name == name) return true;
  }
  return false;
}

}  // namespace saq
