#include "saq/envs.hpp"

#include <cmath>
#include <deque>
#include <sstream>
#include <stdexcept>

#include "saq/rng.hpp"

namespace saq {

namespace {

// Distance kept between a blocked point and the wall face it stopped at.
constexpr Scalar kFaceMargin = 1e-9;

Index floor_index(Scalar v) { return static_cast<Index>(std::floor(v)); }

Vector2 clip_action(const Vector2& a) { return a.cwiseMax(-1.0).cwiseMin(1.0); }

}  // namespace

bool MazeSpec::is_wall(Index row, Index col) const {
  if (row < 0 || col < 0 || row >= height || col >= width) return true;
  return walls[static_cast<std::size_t>(row * width + col)] != 0;
}

bool MazeSpec::is_wall_at(const Vector2& p) const { return is_wall(floor_index(p.y()), floor_index(p.x())); }

void MazeSpec::validate() const {
  if (height <= 0 || width <= 0 || static_cast<Index>(walls.size()) != height * width) {
    throw std::invalid_argument("maze: inconsistent grid size");
  }
  if (is_wall(start.row, start.col)) throw std::invalid_argument("maze: start cell is a wall");
  if (is_wall(goal.row, goal.col)) throw std::invalid_argument("maze: goal cell is a wall");
  if (!(dt > 0.0 && dt <= 1.0)) throw std::invalid_argument("maze: dt must lie in (0, 1]");
  if (!(goal_radius > 0.0)) throw std::invalid_argument("maze: goal radius must be positive");
  if (max_episode_steps <= 0) throw std::invalid_argument("maze: max episode length must be positive");
}

MazeSpec MazeSpec::parse(std::string_view text) {
  std::vector<std::string> lines;
  std::istringstream in{std::string(text)};
  for (std::string line; std::getline(in, line);) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  if (lines.empty()) throw std::invalid_argument("maze: empty layout");
  MazeSpec m;
  m.height = static_cast<Index>(lines.size());
  m.width = static_cast<Index>(lines.front().size());
  m.walls.assign(static_cast<std::size_t>(m.height * m.width), 0);
  bool has_start = false, has_goal = false;
  for (Index r = 0; r < m.height; ++r) {
    const std::string& line = lines[static_cast<std::size_t>(r)];
    if (static_cast<Index>(line.size()) != m.width) {
      throw std::invalid_argument("maze: row " + std::to_string(r) + " has width " +
                                  std::to_string(line.size()) + ", expected " + std::to_string(m.width));
    }
    for (Index c = 0; c < m.width; ++c) {
      const char ch = line[static_cast<std::size_t>(c)];
      switch (ch) {
        case '#':
          m.walls[static_cast<std::size_t>(r * m.width + c)] = 1;
          break;
        case '.':
          break;
        case 'S':
          if (has_start) throw std::invalid_argument("maze: more than one start cell");
          m.start = {r, c};
          has_start = true;
          break;
        case 'G':
          if (has_goal) throw std::invalid_argument("maze: more than one goal cell");
          m.goal = {r, c};
          has_goal = true;
          break;
        default:
          throw std::invalid_argument(std::string("maze: unexpected character '") + ch + "'");
      }
    }
  }
  if (!has_start || !has_goal) throw std::invalid_argument("maze: layout needs one 'S' and one 'G'");
  m.validate();
  return m;
}

std::string MazeSpec::to_text() const {
  std::string out;
  for (Index r = 0; r < height; ++r) {
    for (Index c = 0; c < width; ++c) {
      if (GridCell{r, c} == start) {
        out += 'S';
      } else if (GridCell{r, c} == goal) {
        out += 'G';
      } else {
        out += is_wall(r, c) ? '#' : '.';
      }
    }
    out += '\n';
  }
  return out;
}

MazeSpec MazeSpec::default_maze() {
  return parse(
      "########\n"
      "#S.##.G#\n"
      "#..##..#\n"
      "#..##..#\n"
      "#..##..#\n"
      "#......#\n"
      "#......#\n"
      "########\n");
}

StepResult maze_step(const MazeSpec& spec, const Vector2& state, const Vector2& action) {
  const Vector2 a = clip_action(action);
  Vector2 p = state;

  const Scalar nx = p.x() + spec.dt * a.x();
  if (spec.is_wall(floor_index(p.y()), floor_index(nx))) {
    // Displacement is at most one cell, so the face is the boundary of the current cell.
    p.x() = a.x() > 0.0 ? std::floor(nx) - kFaceMargin : std::floor(p.x());
  } else {
    p.x() = nx;
  }

  const Scalar ny = p.y() + spec.dt * a.y();
  if (spec.is_wall(floor_index(ny), floor_index(p.x()))) {
    p.y() = a.y() > 0.0 ? std::floor(ny) - kFaceMargin : std::floor(p.y());
  } else {
    p.y() = ny;
  }

  StepResult out;
  out.next_state = p;
  if ((p - spec.goal_position()).norm() < spec.goal_radius) {
    out.reward = 1.0;
    out.terminal = true;
  }
  return out;
}

// -------------------------------------------------------------- expert

ScriptedExpert::ScriptedExpert(const MazeSpec& spec) : spec_(spec) {
  spec_.validate();
  dist_.assign(static_cast<std::size_t>(spec_.height * spec_.width), -1);
  std::deque<GridCell> queue{spec_.goal};
  dist_[static_cast<std::size_t>(spec_.goal.row * spec_.width + spec_.goal.col)] = 0;
  constexpr Index dr[4] = {-1, 1, 0, 0};
  constexpr Index dc[4] = {0, 0, -1, 1};
  while (!queue.empty()) {
    const GridCell c = queue.front();
    queue.pop_front();
    const Index d = distance(c);
    for (int k = 0; k < 4; ++k) {
      const GridCell n{c.row + dr[k], c.col + dc[k]};
      if (spec_.is_wall(n.row, n.col) || distance(n) >= 0) continue;
      dist_[static_cast<std::size_t>(n.row * spec_.width + n.col)] = d + 1;
      queue.push_back(n);
    }
  }
  if (distance(spec_.start) < 0) throw std::invalid_argument("maze: goal unreachable from start");
}

Index ScriptedExpert::distance(GridCell c) const {
  if (spec_.is_wall(c.row, c.col)) return -1;
  return dist_[static_cast<std::size_t>(c.row * spec_.width + c.col)];
}

Vector2 ScriptedExpert::act(const Vector2& state) const {
  const GridCell here{floor_index(state.y()), floor_index(state.x())};
  Vector2 target = spec_.goal_position();
  const Index d = distance(here);
  if (d > 0) {
    constexpr Index dr[4] = {-1, 1, 0, 0};
    constexpr Index dc[4] = {0, 0, -1, 1};
    for (int k = 0; k < 4; ++k) {
      const GridCell n{here.row + dr[k], here.col + dc[k]};
      if (distance(n) == d - 1) {
        target = MazeSpec::cell_center(n);
        break;
      }
    }
  }
  Vector2 dir = target - state;
  const Scalar len = dir.norm();
  if (len < 1e-12) return Vector2::Zero();
  return clip_action(dir / len);
}

// ------------------------------------------------------------ datasets

void attach_maze(DatasetMetadata& meta, const MazeSpec& spec) {
  meta.attributes["maze.layout"] = spec.to_text();
  std::ostringstream os;
  os.precision(17);
  os << spec.dt;
  meta.attributes["maze.dt"] = os.str();
  os.str("");
  os << spec.goal_radius;
  meta.attributes["maze.goal_radius"] = os.str();
  meta.attributes["maze.max_episode_steps"] = std::to_string(spec.max_episode_steps);
}

MazeSpec maze_from_metadata(const DatasetMetadata& meta) {
  auto it = meta.attributes.find("maze.layout");
  if (it == meta.attributes.end()) throw std::invalid_argument("dataset carries no maze layout");
  MazeSpec m = MazeSpec::parse(it->second);
  m.dt = std::stod(meta.attributes.at("maze.dt"));
  m.goal_radius = std::stod(meta.attributes.at("maze.goal_radius"));
  m.max_episode_steps = std::stoll(meta.attributes.at("maze.max_episode_steps"));
  m.validate();
  return m;
}

TransitionDataset generate_demonstrations(const MazeSpec& spec, Index n_trajectories, Scalar noise_scale,
                                          std::uint64_t seed) {
  if (n_trajectories < 1) throw std::invalid_argument("generate_demonstrations: need at least one trajectory");
  if (noise_scale < 0.0) throw std::invalid_argument("generate_demonstrations: negative noise scale");
  const ScriptedExpert expert(spec);
  DatasetMetadata meta{"maze", 2, 2, seed, {}};
  attach_maze(meta, spec);
  meta.attributes["demo.trajectories"] = std::to_string(n_trajectories);
  TransitionDataset data(meta);
  for (Index i = 0; i < n_trajectories; ++i) {
    Rng rng(derive_seed(seed, "demonstration", static_cast<std::uint64_t>(i)));
    Vector2 s = spec.start_position();
    bool reached = false;
    for (Index t = 0; t < spec.max_episode_steps && !reached; ++t) {
      Vector2 a = expert.act(s);
      if (noise_scale > 0.0) a += Vector2(rng.normal(0.0, noise_scale), rng.normal(0.0, noise_scale));
      a = clip_action(a);
      const StepResult step = maze_step(spec, s, a);
      data.push_back({s, a, step.reward, step.next_state, step.terminal});
      s = step.next_state;
      reached = step.terminal;
    }
    if (!reached && noise_scale == 0.0) {
      throw std::runtime_error("noise-free expert rollout " + std::to_string(i) + " did not reach the goal");
    }
  }
  return data;
}

namespace {

TransitionDataset bandit(Index n_samples, Scalar noise_sigma, std::uint64_t seed, bool bimodal) {
  if (n_samples < 1) throw std::invalid_argument("bandit: need at least one sample");
  DatasetMetadata meta{bimodal ? "bimodal" : "unimodal", 2, 2, seed, {}};
  meta.attributes["bandit.noise_sigma"] = std::to_string(noise_sigma);
  TransitionDataset data(meta);
  Rng rng(derive_seed(seed, bimodal ? "bimodal-bandit" : "unimodal-bandit"));
  for (Index i = 0; i < n_samples; ++i) {
    const Vector2 s(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0));
    const Scalar sign = (bimodal && rng.bernoulli(0.5)) ? -1.0 : 1.0;
    Vector2 a = sign * s;
    if (noise_sigma > 0.0) a += Vector2(rng.normal(0.0, noise_sigma), rng.normal(0.0, noise_sigma));
    data.push_back({s, a, 1.0, s, true});
  }
  return data;
}

}  // namespace

TransitionDataset generate_bimodal_bandit(Index n_samples, Scalar noise_sigma, std::uint64_t seed) {
  return bandit(n_samples, noise_sigma, seed, true);
}

TransitionDataset generate_unimodal_bandit(Index n_samples, Scalar noise_sigma, std::uint64_t seed) {
  return bandit(n_samples, noise_sigma, seed, false);
}

EvalResult evaluate_maze_policy(const MazeSpec& spec, const PolicyFn& policy, Index episodes,
                                std::uint64_t seed, Scalar start_jitter) {
  EvalResult r;
  if (episodes <= 0) return r;
  Rng rng(derive_seed(seed, "maze-eval"));
  for (Index e = 0; e < episodes; ++e) {
    Vector2 s = spec.start_position() +
                Vector2(rng.uniform(-start_jitter, start_jitter), rng.uniform(-start_jitter, start_jitter));
    Scalar ret = 0.0;
    Index t = 0;
    bool done = false;
    for (; t < spec.max_episode_steps && !done; ++t) {
      const StepResult step = maze_step(spec, s, policy(s));
      ret += step.reward;
      s = step.next_state;
      done = step.terminal;
    }
    r.success_rate += done ? 1.0 : 0.0;
    r.mean_return += ret;
    r.mean_length += static_cast<Scalar>(t);
  }
  const Scalar n = static_cast<Scalar>(episodes);
  r.success_rate /= n;
  r.mean_return /= n;
  r.mean_length /= n;
  return r;
}

}  // namespace saq
