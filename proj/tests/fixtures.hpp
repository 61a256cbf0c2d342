#pragma once

#include <cstdlib>
#include <filesystem>
#include <string>

#include "saq/dataset.hpp"
#include "saq/rng.hpp"

namespace saq::testing {

/// One-step transitions with zero reward, all terminal.
inline TransitionDataset make_dataset(const Matrix& states, const Matrix& actions, std::string env = "synthetic") {
  DatasetMetadata meta;
  meta.env = std::move(env);
  meta.state_dim = states.cols();
  meta.action_dim = actions.cols();
  TransitionDataset d(meta);
  for (Index i = 0; i < states.rows(); ++i) {
    Transition t;
    t.state = states.row(i).transpose();
    t.action = actions.row(i).transpose();
    t.next_state = states.row(i).transpose();
    t.reward = 0.0;
    t.terminal = true;
    d.push_back(t);
  }
  return d;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("saq-test-" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace saq::testing
