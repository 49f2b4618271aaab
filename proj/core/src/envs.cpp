#include "maesn/envs.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace maesn {

namespace {

double clip(double x, double lim) { return std::clamp(x, -lim, lim); }

double dist2d(double ax, double ay, double bx, double by) {
  return std::hypot(ax - bx, ay - by);
}

uint64_t goal_hash(double x, double y) {
  // quantize at 1e-6 so "same goal" and "same hash bucket" coincide
  auto q = [](double v) { return static_cast<int64_t>(std::llround(v * 1e6)); };
  uint64_t h = 0x9e3779b97f4a7c15ull;
  auto mix = [&h](uint64_t v) {
    h ^= v + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    h *= 0xff51afd7ed558ccdull;
    h ^= h >> 33;
  };
  mix(static_cast<uint64_t>(q(x)));
  mix(static_cast<uint64_t>(q(y)));
  return h;
}

}  // namespace

std::string family_name(Family f) {
  switch (f) {
    case Family::point_nav: return "point_nav";
    case Family::wheeled_nav: return "wheeled_nav";
    case Family::block_push: return "block_push";
    case Family::bandit2d: return "bandit2d";
  }
  return "?";
}

Family family_from_name(const std::string& s) {
  if (s == "point_nav") return Family::point_nav;
  if (s == "wheeled_nav") return Family::wheeled_nav;
  if (s == "block_push") return Family::block_push;
  if (s == "bandit2d") return Family::bandit2d;
  throw std::invalid_argument("unknown family: " + s);
}

long obs_dim(Family f) {
  switch (f) {
    case Family::point_nav: return 2;
    case Family::wheeled_nav: return 4;
    case Family::block_push: return 10;
    case Family::bandit2d: return 2;
  }
  return 0;
}

long action_dim(Family f) {
  switch (f) {
    case Family::point_nav: return 2;
    case Family::wheeled_nav: return 2;
    case Family::block_push: return 3;
    case Family::bandit2d: return 2;
  }
  return 0;
}

int default_horizon(Family f) {
  switch (f) {
    case Family::point_nav: return 50;
    case Family::wheeled_nav: return 50;
    case Family::block_push: return 60;
    case Family::bandit2d: return 1;
  }
  return 50;
}

double reward_from_distance(double dist, Family family, RewardMode mode, const RewardSpec& spec) {
  double d = (family == Family::bandit2d) ? dist * dist : dist;
  if (mode == RewardMode::dense) return spec.dense_offset - d;
  return dist <= spec.sparse_threshold ? spec.dense_offset - d : spec.dense_offset - spec.c_max;
}

Env::Env(TaskSpec task, RewardSpec rspec) : task_(task), rspec_(rspec) { reset(); }

std::vector<double> Env::reset() {
  pos_[0] = pos_[1] = 0;
  heading_ = 0;
  for (int b = 0; b < 3; ++b)
    for (int k = 0; k < 2; ++k) blocks_[b][k] = task_.blocks[b][k];
  t_ = 0;
  return observation();
}

std::vector<double> Env::observation() const {
  switch (task_.family) {
    case Family::point_nav:
      return {pos_[0], pos_[1]};
    case Family::wheeled_nav:
      return {pos_[0], pos_[1], std::cos(heading_), std::sin(heading_)};
    case Family::block_push:
      return {pos_[0],        pos_[1],        blocks_[0][0], blocks_[0][1], blocks_[1][0],
              blocks_[1][1],  blocks_[2][0],  blocks_[2][1], task_.goal[0], task_.goal[1]};
    case Family::bandit2d:
      return {0.0, 0.0};
  }
  return {};
}

std::pair<double, double> Env::reward_position() const {
  if (task_.family == Family::block_push) {
    const double* b = blocks_[task_.relevant_block];
    return {b[0], b[1]};
  }
  return {pos_[0], pos_[1]};
}

double Env::compute_reward() {
  auto [x, y] = reward_position();
  double d = dist2d(x, y, task_.goal[0], task_.goal[1]);
  if (task_.reward_mode == RewardMode::dense)
    ++counters_.dense_evals;
  else
    ++counters_.sparse_evals;
  return reward_from_distance(d, task_.family, task_.reward_mode, rspec_);
}

StepResult Env::step(const std::vector<double>& action) {
  if (static_cast<long>(action.size()) != action_dim(task_.family))
    throw std::invalid_argument("step: action dim " + std::to_string(action.size()) +
                                " for family " + family_name(task_.family));
  for (double a : action)
    if (!std::isfinite(a))
      throw std::invalid_argument("step: non-finite action (task " +
                                  std::to_string(task_.task_id) + ")");

  switch (task_.family) {
    case Family::point_nav:
      pos_[0] += clip(action[0], EnvGeometry::a_max) * EnvGeometry::dt;
      pos_[1] += clip(action[1], EnvGeometry::a_max) * EnvGeometry::dt;
      break;
    case Family::wheeled_nav: {
      double ul = clip(action[0], EnvGeometry::a_max);
      double ur = clip(action[1], EnvGeometry::a_max);
      double v = 0.5 * (ul + ur);
      double omega = (ur - ul) / EnvGeometry::track_width;
      pos_[0] += v * std::cos(heading_) * EnvGeometry::dt;
      pos_[1] += v * std::sin(heading_) * EnvGeometry::dt;
      heading_ += omega * EnvGeometry::dt;
      break;
    }
    case Family::block_push: {
      double dx = clip(action[0], EnvGeometry::a_max) * EnvGeometry::dt;
      double dy = clip(action[1], EnvGeometry::a_max) * EnvGeometry::dt;
      double grab = action[2];
      double oldx = pos_[0], oldy = pos_[1];
      pos_[0] += dx;
      pos_[1] += dy;
      if (grab > 0) {
        // the closest block within grab_radius of the hand moves with it
        int best = -1;
        double best_d = EnvGeometry::grab_radius;
        for (int b = 0; b < 3; ++b) {
          double d = dist2d(oldx, oldy, blocks_[b][0], blocks_[b][1]);
          if (d <= best_d) {
            best_d = d;
            best = b;
          }
        }
        if (best >= 0) {
          blocks_[best][0] += dx;
          blocks_[best][1] += dy;
        }
      }
      break;
    }
    case Family::bandit2d:
      pos_[0] = clip(action[0], EnvGeometry::bandit_a_max);
      pos_[1] = clip(action[1], EnvGeometry::bandit_a_max);
      break;
  }

  ++t_;
  StepResult r;
  r.reward = compute_reward();
  r.done = t_ >= task_.horizon;
  r.obs = observation();
  return r;
}

std::vector<TaskSpec> sample_tasks(Family family, int n, const std::string& split, uint64_t seed,
                                   RewardMode mode, int horizon) {
  if (n < 1) throw std::invalid_argument("sample_tasks: n must be >= 1");
  if (split != "train" && split != "validation")
    throw std::invalid_argument("sample_tasks: split must be train or validation");
  const bool want_train = split == "train";
  RngStream rng(seed, "tasks/" + family_name(family) + "/" + split);

  std::vector<TaskSpec> out;
  out.reserve(static_cast<size_t>(n));
  int guard = 0;
  while (static_cast<int>(out.size()) < n) {
    if (++guard > 100000 * n) throw std::runtime_error("sample_tasks: rejection loop stuck");
    TaskSpec t;
    t.family = family;
    t.reward_mode = mode;
    t.horizon = horizon > 0 ? horizon : default_horizon(family);
    t.task_id = static_cast<int>(out.size());
    switch (family) {
      case Family::point_nav:
      case Family::wheeled_nav: {
        // half-annulus, radius [1.5, 2.5], angles [0, pi]
        double r = rng.uniform(1.5, 2.5);
        double a = rng.uniform(0.0, M_PI);
        t.goal[0] = r * std::cos(a);
        t.goal[1] = r * std::sin(a);
        break;
      }
      case Family::block_push: {
        t.goal[0] = rng.uniform(-1.0, 1.0);
        t.goal[1] = rng.uniform(-0.8, -0.4);
        for (int b = 0; b < 3; ++b) {
          t.blocks[b][0] = rng.uniform(-1.0, 1.0);
          t.blocks[b][1] = rng.uniform(0.4, 0.8);
        }
        t.relevant_block = static_cast<int>(rng.uniform_int(3));
        break;
      }
      case Family::bandit2d: {
        double a = rng.uniform(0.0, 2.0 * M_PI);
        t.goal[0] = std::cos(a);
        t.goal[1] = std::sin(a);
        t.horizon = 1;
        break;
      }
    }
    // split partition by goal hash parity
    if ((goal_hash(t.goal[0], t.goal[1]) & 1ull) != (want_train ? 0ull : 1ull)) continue;
    // no duplicate goals within a split
    bool dup = false;
    for (const TaskSpec& u : out)
      if (std::abs(u.goal[0] - t.goal[0]) < 1e-6 && std::abs(u.goal[1] - t.goal[1]) < 1e-6)
        dup = true;
    if (dup) continue;
    out.push_back(t);
  }
  return out;
}

void save_task_manifest(const std::vector<TaskSpec>& tasks, Family family, uint64_t seed,
                        const std::string& split, const std::string& path) {
  nlohmann::json arr = nlohmann::json::array();
  for (const TaskSpec& t : tasks) {
    arr.push_back({{"task_id", t.task_id},
                   {"goal", {t.goal[0], t.goal[1]}},
                   {"relevant_block", t.relevant_block},
                   {"blocks",
                    {{t.blocks[0][0], t.blocks[0][1]},
                     {t.blocks[1][0], t.blocks[1][1]},
                     {t.blocks[2][0], t.blocks[2][1]}}},
                   {"reward_mode", t.reward_mode == RewardMode::dense ? "dense" : "sparse"},
                   {"horizon", t.horizon}});
  }
  nlohmann::json j{{"format", "maesn-tasks-v1"},
                   {"family", family_name(family)},
                   {"seed", seed},
                   {"split", split},
                   {"tasks", arr}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << j.dump(2) << "\n";
}

std::vector<TaskSpec> load_task_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  nlohmann::json j;
  in >> j;
  if (j.at("format") != "maesn-tasks-v1")
    throw std::runtime_error(path + ": unsupported task manifest format");
  Family family = family_from_name(j.at("family"));
  std::vector<TaskSpec> out;
  for (const auto& tj : j.at("tasks")) {
    TaskSpec t;
    t.family = family;
    t.task_id = tj.at("task_id");
    t.goal[0] = tj.at("goal")[0];
    t.goal[1] = tj.at("goal")[1];
    t.relevant_block = tj.at("relevant_block");
    for (int b = 0; b < 3; ++b)
      for (int k = 0; k < 2; ++k) t.blocks[b][k] = tj.at("blocks")[b][k];
    t.reward_mode = tj.at("reward_mode") == "dense" ? RewardMode::dense : RewardMode::sparse;
    t.horizon = tj.at("horizon");
    out.push_back(t);
  }
  return out;
}

}  // namespace maesn
