#include "saq/metrics.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace saq {

bool MetricTrace::operator==(const MetricTrace& o) const {
  if (columns_ != o.columns_ || rows_.size() != o.rows_.size()) return false;
  for (std::size_t i = 0; i < rows_.size(); ++i) {
    if (rows_[i].size() != o.rows_[i].size()) return false;
    for (std::size_t j = 0; j < rows_[i].size(); ++j) {
      const Scalar a = rows_[i][j], b = o.rows_[i][j];
      if (!(a == b || (std::isnan(a) && std::isnan(b)))) return false;
    }
  }
  return true;
}

std::string format_real(Scalar v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

Scalar parse_real(const std::string& s) {
  if (s == "nan") return std::nan("");
  if (s == "inf") return INFINITY;
  if (s == "-inf") return -INFINITY;
  Scalar v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw std::invalid_argument("not a real number: '" + s + "'");
  }
  return v;
}

MetricTrace::MetricTrace(std::vector<std::string> columns) {
  columns_.push_back("step");
  for (auto& c : columns) columns_.push_back(std::move(c));
}

void MetricTrace::add_row(Index step, const std::vector<Scalar>& values) {
  if (values.size() + 1 != columns_.size()) {
    throw std::invalid_argument("MetricTrace: row has " + std::to_string(values.size()) + " values, expected " +
                                std::to_string(columns_.size() - 1));
  }
  std::vector<Scalar> row;
  row.reserve(columns_.size());
  row.push_back(static_cast<Scalar>(step));
  row.insert(row.end(), values.begin(), values.end());
  rows_.push_back(std::move(row));
}

bool MetricTrace::has_column(const std::string& name) const {
  for (const auto& c : columns_) {
    if (c == name) return true;
  }
  return false;
}

std::vector<Scalar> MetricTrace::column(const std::string& name) const {
  for (std::size_t i = 0; i < columns_.size(); ++i) {
    if (columns_[i] != name) continue;
    std::vector<Scalar> out;
    out.reserve(rows_.size());
    for (const auto& r : rows_) out.push_back(r[i]);
    return out;
  }
  throw std::out_of_range("MetricTrace: no column '" + name + "'");
}

std::string MetricTrace::to_csv() const {
  std::string out;
  for (std::size_t i = 0; i < columns_.size(); ++i) {
    if (i) out += ',';
    out += columns_[i];
  }
  out += '\n';
  for (const auto& r : rows_) {
    for (std::size_t i = 0; i < r.size(); ++i) {
      if (i) out += ',';
      out += format_real(r[i]);
    }
    out += '\n';
  }
  return out;
}

void MetricTrace::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << to_csv();
}

MetricTrace MetricTrace::from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  MetricTrace t;
  if (!std::getline(in, line)) return t;
  {
    std::istringstream hs(line);
    for (std::string cell; std::getline(hs, cell, ',');) t.columns_.push_back(cell);
  }
  if (t.columns_.empty() || t.columns_.front() != "step") {
    throw std::invalid_argument("MetricTrace CSV must start with a 'step' column");
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<Scalar> row;
    std::istringstream rs(line);
    for (std::string cell; std::getline(rs, cell, ',');) row.push_back(parse_real(cell));
    if (row.size() != t.columns_.size()) throw std::invalid_argument("MetricTrace CSV: ragged row");
    t.rows_.push_back(std::move(row));
  }
  return t;
}

MetricTrace MetricTrace::read_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_csv(ss.str());
}

}  // namespace saq
