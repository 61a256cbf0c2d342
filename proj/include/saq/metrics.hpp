#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "saq/autodiff.hpp"

namespace saq {

/// Time-indexed table of scalar series. Column 0 is always "step".
class MetricTrace {
 public:
  MetricTrace() = default;
  explicit MetricTrace(std::vector<std::string> columns);

  /// `values` excludes the step column and must match columns().size() - 1.
  void add_row(Index step, const std::vector<Scalar>& values);

  const std::vector<std::string>& columns() const { return columns_; }
  Index rows() const { return static_cast<Index>(rows_.size()); }
  bool empty() const { return rows_.empty(); }
  const std::vector<Scalar>& row(Index i) const { return rows_[static_cast<std::size_t>(i)]; }
  /// Whole column by name; throws std::out_of_range if missing.
  std::vector<Scalar> column(const std::string& name) const;
  bool has_column(const std::string& name) const;

  /// Header row, then one row per step. Reals use the shortest representation
  /// that reads back to the same double; decimal point is always '.'.
  std::string to_csv() const;
  void write_csv(const std::filesystem::path& path) const;
  static MetricTrace from_csv(const std::string& text);
  static MetricTrace read_csv(const std::filesystem::path& path);

  /// Exact equality; NaN entries compare equal to NaN.
  bool operator==(const MetricTrace& o) const;

 private:
  std::vector<std::string> columns_;
  std::vector<std::vector<Scalar>> rows_;
};

/// Shortest round-trip decimal form of a double (locale independent).
std::string format_real(Scalar v);
/// Locale-independent parse; throws std::invalid_argument on garbage.
Scalar parse_real(const std::string& s);

}  // namespace saq
