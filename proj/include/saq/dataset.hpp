#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "saq/autodiff.hpp"

namespace saq {

struct Transition {
  Vector state;
  Vector action;
  Scalar reward = 0.0;
  Vector next_state;
  bool terminal = false;

  bool operator==(const Transition& o) const;
};

struct DatasetMetadata {
  std::string env;
  Index state_dim = 0;
  Index action_dim = 0;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> attributes;

  bool operator==(const DatasetMetadata&) const = default;
};

/// Flat row-major storage per field; row i of every view is transition i.
class TransitionDataset {
 public:
  TransitionDataset() = default;
  explicit TransitionDataset(DatasetMetadata meta);

  void push_back(const Transition& t);
  Transition at(Index i) const;
  Index size() const { return static_cast<Index>(rewards_.size()); }
  bool empty() const { return size() == 0; }

  const DatasetMetadata& metadata() const { return meta_; }
  DatasetMetadata& metadata() { return meta_; }
  using ConstMap = Eigen::Map<const Matrix>;
  ConstMap states() const { return {states_.data(), size(), meta_.state_dim}; }
  ConstMap actions() const { return {actions_.data(), size(), meta_.action_dim}; }
  Eigen::Map<const Vector> rewards() const { return {rewards_.data(), size()}; }
  ConstMap next_states() const { return {next_states_.data(), size(), meta_.state_dim}; }
  const std::vector<std::uint8_t>& terminals() const { return terminals_; }

  /// Appends all transitions of `other`; dimensions must match.
  void append(const TransitionDataset& other);

  bool operator==(const TransitionDataset& o) const;

 private:
  DatasetMetadata meta_;
  std::vector<Scalar> states_;
  std::vector<Scalar> actions_;
  std::vector<Scalar> rewards_;
  std::vector<Scalar> next_states_;
  std::vector<std::uint8_t> terminals_;
};

/// Transitions whose actions are code indices in [0, codebook_size). The
/// original continuous actions are kept for audit.
struct DiscreteTransitionDataset {
  TransitionDataset source;
  IndexVector codes;
  Index codebook_size = 0;

  Index size() const { return source.size(); }
  bool operator==(const DiscreteTransitionDataset&) const = default;
};

/// Rows selected by `idx`, as a batch for the learners.
struct Batch {
  Matrix states;
  Matrix actions;
  Matrix rewards;      // B x 1
  Matrix next_states;
  Matrix not_done;     // B x 1, 0 at terminal transitions
  IndexVector codes;   // empty for continuous batches
};

Batch make_batch(const TransitionDataset& d, const IndexVector& idx);
Batch make_batch(const DiscreteTransitionDataset& d, const IndexVector& idx);
IndexVector all_indices(Index n);

// File format "SAQD": magic, u16 version, u32 metadata length, UTF-8 JSON
// metadata, u64 record count, fixed-width f64 records
// (state, action, reward, next_state, terminal[, code]), CRC32.
void save_dataset(const TransitionDataset& d, const std::filesystem::path& path);
void save_dataset(const DiscreteTransitionDataset& d, const std::filesystem::path& path);
std::vector<std::uint8_t> encode_dataset(const TransitionDataset& d);
std::vector<std::uint8_t> encode_dataset(const DiscreteTransitionDataset& d);

/// Throws FormatError (naming the offset) on corrupt or truncated input.
TransitionDataset load_dataset(const std::filesystem::path& path);
DiscreteTransitionDataset load_discrete_dataset(const std::filesystem::path& path);
TransitionDataset decode_dataset(std::span<const std::uint8_t> bytes);
DiscreteTransitionDataset decode_discrete_dataset(std::span<const std::uint8_t> bytes);
/// True if the file's metadata marks it as code-indexed.
bool is_discrete_dataset_file(const std::filesystem::path& path);

}  // namespace saq
