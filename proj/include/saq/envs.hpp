#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "saq/dataset.hpp"

namespace saq {

using Vector2 = Eigen::Vector2d;

struct GridCell {
  Index row = 0;
  Index col = 0;
  bool operator==(const GridCell&) const = default;
};

/// Point-mass maze. Cell (row, col) covers x in [col, col+1), y in [row, row+1);
/// anything outside the grid counts as wall. Actions live in [-1, 1]^2.
struct MazeSpec {
  Index height = 0;
  Index width = 0;
  std::vector<std::uint8_t> walls;  // row-major, 1 = wall
  GridCell start;
  GridCell goal;
  Scalar goal_radius = 0.5;
  Scalar dt = 0.1;
  Index max_episode_steps = 300;

  bool is_wall(Index row, Index col) const;
  bool is_wall_at(const Vector2& p) const;
  static Vector2 cell_center(GridCell c) { return {static_cast<Scalar>(c.col) + 0.5, static_cast<Scalar>(c.row) + 0.5}; }
  Vector2 start_position() const { return cell_center(start); }
  Vector2 goal_position() const { return cell_center(goal); }

  /// Throws std::invalid_argument when start/goal are walls, dt not in (0, 1], or radius <= 0.
  void validate() const;

  /// Grid text: '#' wall, '.' free, 'S' start, 'G' goal; one row per line.
  static MazeSpec parse(std::string_view text);
  std::string to_text() const;
  /// 8x8 U-shaped corridor.
  static MazeSpec default_maze();
};

struct StepResult {
  Vector2 next_state;
  Scalar reward = 0.0;
  bool terminal = false;
};

/// Euler step with axis-separated collision resolution: the x then the y
/// displacement is applied, each stopped at the face of a wall it would enter.
StepResult maze_step(const MazeSpec& spec, const Vector2& state, const Vector2& action);

/// Waypoint follower along a breadth-first shortest cell path to the goal.
class ScriptedExpert {
 public:
  /// Throws std::invalid_argument if the goal is unreachable from the start.
  explicit ScriptedExpert(const MazeSpec& spec);

  /// Unit-speed action toward the next cell on the shortest path (or the goal itself).
  Vector2 act(const Vector2& state) const;
  /// BFS distance in cells; -1 when unreachable.
  Index distance(GridCell c) const;

 private:
  MazeSpec spec_;
  std::vector<Index> dist_;
};

/// Concatenated expert rollouts from the start cell with N(0, noise^2) action
/// noise, clipped to the action box. With zero noise every rollout must reach the goal.
TransitionDataset generate_demonstrations(const MazeSpec& spec, Index n_trajectories, Scalar noise_scale,
                                          std::uint64_t seed);

/// s ~ U([-1,1]^2); a = +s or -s with equal probability plus N(0, sigma^2); one-step episodes.
TransitionDataset generate_bimodal_bandit(Index n_samples, Scalar noise_sigma, std::uint64_t seed);

/// Every sample draws a = s + N(0, sigma^2); the single-mode control for the bandit.
TransitionDataset generate_unimodal_bandit(Index n_samples, Scalar noise_sigma, std::uint64_t seed);

/// Dataset attributes carrying the maze layout, so a dataset file is self-describing.
void attach_maze(DatasetMetadata& meta, const MazeSpec& spec);
MazeSpec maze_from_metadata(const DatasetMetadata& meta);

using PolicyFn = std::function<Vector2(const Vector2& state)>;

struct EvalResult {
  Scalar success_rate = 0.0;
  Scalar mean_return = 0.0;
  Scalar mean_length = 0.0;
};

/// Rolls out `policy` for `episodes` episodes. Each episode starts at the start
/// cell center plus a uniform offset in +-start_jitter on each axis.
EvalResult evaluate_maze_policy(const MazeSpec& spec, const PolicyFn& policy, Index episodes,
                                std::uint64_t seed, Scalar start_jitter = 0.1);

}  // namespace saq
