#include "saq/dataset.hpp"

#include <cmath>
#include <stdexcept>

#include <json.hpp>

#include "saq/binio.hpp"

namespace saq {

namespace {

constexpr std::uint16_t kDatasetVersion = 1;

bool same_vector(const Vector& a, const Vector& b) {
  return a.size() == b.size() && (a.size() == 0 || a == b);
}

void check_dim(const char* what, Index got, Index expected) {
  if (got != expected) {
    throw std::invalid_argument(std::string(what) + " has dimension " + std::to_string(got) +
                                ", dataset expects " + std::to_string(expected));
  }
}

}  // namespace

bool Transition::operator==(const Transition& o) const {
  return same_vector(state, o.state) && same_vector(action, o.action) && reward == o.reward &&
         same_vector(next_state, o.next_state) && terminal == o.terminal;
}

TransitionDataset::TransitionDataset(DatasetMetadata meta) : meta_(std::move(meta)) {}

void TransitionDataset::push_back(const Transition& t) {
  check_dim("state", t.state.size(), meta_.state_dim);
  check_dim("next_state", t.next_state.size(), meta_.state_dim);
  check_dim("action", t.action.size(), meta_.action_dim);
  states_.insert(states_.end(), t.state.data(), t.state.data() + t.state.size());
  actions_.insert(actions_.end(), t.action.data(), t.action.data() + t.action.size());
  rewards_.push_back(t.reward);
  next_states_.insert(next_states_.end(), t.next_state.data(), t.next_state.data() + t.next_state.size());
  terminals_.push_back(t.terminal ? 1 : 0);
}

Transition TransitionDataset::at(Index i) const {
  if (i < 0 || i >= size()) throw std::out_of_range("transition index " + std::to_string(i));
  Transition t;
  t.state = states().row(i).transpose();
  t.action = actions().row(i).transpose();
  t.reward = rewards_[static_cast<std::size_t>(i)];
  t.next_state = next_states().row(i).transpose();
  t.terminal = terminals_[static_cast<std::size_t>(i)] != 0;
  return t;
}

void TransitionDataset::append(const TransitionDataset& other) {
  check_dim("appended state", other.meta_.state_dim, meta_.state_dim);
  check_dim("appended action", other.meta_.action_dim, meta_.action_dim);
  states_.insert(states_.end(), other.states_.begin(), other.states_.end());
  actions_.insert(actions_.end(), other.actions_.begin(), other.actions_.end());
  rewards_.insert(rewards_.end(), other.rewards_.begin(), other.rewards_.end());
  next_states_.insert(next_states_.end(), other.next_states_.begin(), other.next_states_.end());
  terminals_.insert(terminals_.end(), other.terminals_.begin(), other.terminals_.end());
}

bool TransitionDataset::operator==(const TransitionDataset& o) const {
  return meta_ == o.meta_ && states_ == o.states_ && actions_ == o.actions_ &&
         rewards_ == o.rewards_ && next_states_ == o.next_states_ && terminals_ == o.terminals_;
}

IndexVector all_indices(Index n) {
  IndexVector idx(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  return idx;
}

Batch make_batch(const TransitionDataset& d, const IndexVector& idx) {
  const Index n = static_cast<Index>(idx.size());
  Batch b;
  b.states.resize(n, d.metadata().state_dim);
  b.actions.resize(n, d.metadata().action_dim);
  b.rewards.resize(n, 1);
  b.next_states.resize(n, d.metadata().state_dim);
  b.not_done.resize(n, 1);
  const auto s = d.states();
  const auto a = d.actions();
  const auto ns = d.next_states();
  const auto r = d.rewards();
  for (Index i = 0; i < n; ++i) {
    const Index j = idx[static_cast<std::size_t>(i)];
    b.states.row(i) = s.row(j);
    b.actions.row(i) = a.row(j);
    b.rewards(i, 0) = r(j);
    b.next_states.row(i) = ns.row(j);
    b.not_done(i, 0) = d.terminals()[static_cast<std::size_t>(j)] ? 0.0 : 1.0;
  }
  return b;
}

Batch make_batch(const DiscreteTransitionDataset& d, const IndexVector& idx) {
  Batch b = make_batch(d.source, idx);
  b.codes.reserve(idx.size());
  for (Index j : idx) b.codes.push_back(d.codes[static_cast<std::size_t>(j)]);
  return b;
}

// ------------------------------------------------------------ file format

namespace {

nlohmann::json metadata_json(const DatasetMetadata& m) {
  nlohmann::json j;
  j["env"] = m.env;
  j["state_dim"] = m.state_dim;
  j["action_dim"] = m.action_dim;
  j["seed"] = m.seed;
  j["attributes"] = m.attributes;
  return j;
}

std::vector<std::uint8_t> encode_impl(const TransitionDataset& d, const IndexVector* codes, Index k) {
  nlohmann::json meta = metadata_json(d.metadata());
  meta["discrete"] = codes != nullptr;
  meta["codebook_size"] = k;
  const Index sd = d.metadata().state_dim;
  const Index ad = d.metadata().action_dim;
  meta["record_width"] = 2 * sd + ad + 2 + (codes ? 1 : 0);
  const std::string text = meta.dump();

  BinaryWriter w;
  w.put_bytes("SAQD");
  w.put_u16(kDatasetVersion);
  w.put_u32(static_cast<std::uint32_t>(text.size()));
  w.put_bytes(text);
  w.put_u64(static_cast<std::uint64_t>(d.size()));
  const auto s = d.states();
  const auto a = d.actions();
  const auto ns = d.next_states();
  for (Index i = 0; i < d.size(); ++i) {
    for (Index c = 0; c < sd; ++c) w.put_f64(s(i, c));
    for (Index c = 0; c < ad; ++c) w.put_f64(a(i, c));
    w.put_f64(d.rewards()(i));
    for (Index c = 0; c < sd; ++c) w.put_f64(ns(i, c));
    w.put_f64(d.terminals()[static_cast<std::size_t>(i)] ? 1.0 : 0.0);
    if (codes) w.put_f64(static_cast<double>((*codes)[static_cast<std::size_t>(i)]));
  }
  return w.finish();
}

struct Decoded {
  TransitionDataset data;
  IndexVector codes;
  Index codebook_size = 0;
  bool discrete = false;
};

Decoded decode_impl(std::span<const std::uint8_t> bytes) {
  BinaryReader r(bytes);
  if (const std::string magic = r.get_bytes(4); magic != "SAQD") {
    throw FormatError("bad magic '" + magic + "', expected 'SAQD'", 0);
  }
  const auto version_at = r.offset();
  if (const auto v = r.get_u16(); v != kDatasetVersion) {
    throw FormatError("unsupported dataset version " + std::to_string(v), version_at);
  }
  const std::uint32_t len = r.get_u32();
  const auto meta_at = r.offset();
  const std::string text = r.get_bytes(len);
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed metadata: ") + e.what(), meta_at);
  }
  Decoded out;
  DatasetMetadata m;
  try {
    m.env = meta.at("env").get<std::string>();
    m.state_dim = meta.at("state_dim").get<Index>();
    m.action_dim = meta.at("action_dim").get<Index>();
    m.seed = meta.at("seed").get<std::uint64_t>();
    m.attributes = meta.at("attributes").get<std::map<std::string, std::string>>();
    out.discrete = meta.value("discrete", false);
    out.codebook_size = meta.value("codebook_size", Index{0});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("incomplete metadata: ") + e.what(), meta_at);
  }
  if (m.state_dim <= 0 || m.action_dim <= 0) throw FormatError("non-positive dimensions", meta_at);
  out.data = TransitionDataset(m);
  const std::uint64_t n = r.get_u64();
  const std::uint64_t width = static_cast<std::uint64_t>(2 * m.state_dim + m.action_dim + 2 + (out.discrete ? 1 : 0));
  if (n * width * 8 != r.remaining()) {
    throw FormatError("record section has " + std::to_string(r.remaining()) + " bytes, expected " +
                          std::to_string(n * width * 8),
                      r.offset());
  }
  Transition t;
  t.state.resize(m.state_dim);
  t.action.resize(m.action_dim);
  t.next_state.resize(m.state_dim);
  for (std::uint64_t i = 0; i < n; ++i) {
    for (Index c = 0; c < m.state_dim; ++c) t.state(c) = r.get_f64();
    for (Index c = 0; c < m.action_dim; ++c) t.action(c) = r.get_f64();
    t.reward = r.get_f64();
    for (Index c = 0; c < m.state_dim; ++c) t.next_state(c) = r.get_f64();
    t.terminal = r.get_f64() != 0.0;
    out.data.push_back(t);
    if (out.discrete) {
      const auto at = r.offset();
      const double code = r.get_f64();
      if (!(code >= 0.0 && code < static_cast<double>(out.codebook_size)) || code != std::floor(code)) {
        throw FormatError("invalid code " + std::to_string(code), at);
      }
      out.codes.push_back(static_cast<Index>(code));
    }
  }
  r.expect_end();
  return out;
}

}  // namespace

std::vector<std::uint8_t> encode_dataset(const TransitionDataset& d) { return encode_impl(d, nullptr, 0); }

std::vector<std::uint8_t> encode_dataset(const DiscreteTransitionDataset& d) {
  return encode_impl(d.source, &d.codes, d.codebook_size);
}

void save_dataset(const TransitionDataset& d, const std::filesystem::path& path) {
  write_file(path, encode_dataset(d));
}

void save_dataset(const DiscreteTransitionDataset& d, const std::filesystem::path& path) {
  write_file(path, encode_dataset(d));
}

TransitionDataset decode_dataset(std::span<const std::uint8_t> bytes) {
  return std::move(decode_impl(bytes).data);
}

DiscreteTransitionDataset decode_discrete_dataset(std::span<const std::uint8_t> bytes) {
  Decoded d = decode_impl(bytes);
  if (!d.discrete) throw FormatError("dataset is not code-indexed", 0);
  return {std::move(d.data), std::move(d.codes), d.codebook_size};
}

TransitionDataset load_dataset(const std::filesystem::path& path) { return decode_dataset(read_file(path)); }

DiscreteTransitionDataset load_discrete_dataset(const std::filesystem::path& path) {
  return decode_discrete_dataset(read_file(path));
}

bool is_discrete_dataset_file(const std::filesystem::path& path) {
  return decode_impl(read_file(path)).discrete;
}

}  // namespace saq
