#pragma once

#include <string>
#include <vector>

#include "maesn/rng.hpp"

namespace maesn {

enum class Family { point_nav, wheeled_nav, block_push, bandit2d };
enum class RewardMode { dense, sparse };

std::string family_name(Family f);
Family family_from_name(const std::string& s);

/// One task from p(tau). Goals are hidden from the observation for the
/// navigation families; block_push observes blocks, goal and hand.
struct TaskSpec {
  Family family = Family::point_nav;
  double goal[2] = {0, 0};
  int relevant_block = 0;            // block_push only
  double blocks[3][2] = {};          // block_push initial block positions
  RewardMode reward_mode = RewardMode::dense;
  int horizon = 50;
  int task_id = 0;
};

/// Reward constants. c_max is the uninformative sparse penalty; it exceeds
/// any reachable distance in the arena by an order of magnitude.
/// dense_offset is 0 for all families except the optional legged analog (+4).
struct RewardSpec {
  double c_max = 100.0;
  double sparse_threshold = 0.8;  // 0.2 for block_push
  double dense_offset = 0.0;

  static RewardSpec defaults(Family f) {
    RewardSpec r;
    if (f == Family::block_push) r.sparse_threshold = 0.2;
    return r;
  }
};

/// Kinematic constants shared by all families; desk-scale stand-ins for a
/// full physics engine.
struct EnvGeometry {
  static constexpr double dt = 0.1;
  static constexpr double a_max = 1.0;
  static constexpr double track_width = 0.5;
  static constexpr double grab_radius = 0.2;
  static constexpr double bandit_a_max = 5.0;
};

long obs_dim(Family f);
long action_dim(Family f);
int default_horizon(Family f);

struct StepResult {
  std::vector<double> obs;
  double reward = 0;
  bool done = false;
};

/// Single-task environment instance. Not thread-safe; run one instance per
/// concurrent rollout.
class Env {
 public:
  Env(TaskSpec task, RewardSpec rspec);
  explicit Env(TaskSpec task) : Env(task, RewardSpec::defaults(task.family)) {}

  std::vector<double> reset();
  StepResult step(const std::vector<double>& action);

  const TaskSpec& task() const { return task_; }
  const RewardSpec& reward_spec() const { return rspec_; }

  /// 2-D position whose distance to the goal defines the reward
  /// (relevant block for block_push, body position otherwise).
  std::pair<double, double> reward_position() const;
  std::pair<double, double> body_position() const { return {pos_[0], pos_[1]}; }

  // Instrumentation: how many times each reward mode was evaluated.
  struct Counters {
    long dense_evals = 0;
    long sparse_evals = 0;
  };
  const Counters& counters() const { return counters_; }

 private:
  std::vector<double> observation() const;
  double compute_reward();

  TaskSpec task_;
  RewardSpec rspec_;
  double pos_[2] = {0, 0};   // body / hand position
  double heading_ = 0;       // wheeled_nav
  double blocks_[3][2] = {};
  int t_ = 0;
  Counters counters_;
};

/// Reward as a pure function of goal distance (used by Env and by the
/// conformance tests). `dist` is the Euclidean distance of the relevant
/// position from the goal; bandit2d uses squared distance.
double reward_from_distance(double dist, Family family, RewardMode mode, const RewardSpec& spec);

/// n distinct tasks; train and validation splits are disjoint by construction:
/// a candidate goal (quantized at 1e-6) is admitted to exactly one split by
/// hash parity, and duplicates within 1e-6 are rejected inside a split.
std::vector<TaskSpec> sample_tasks(Family family, int n, const std::string& split, uint64_t seed,
                                   RewardMode mode = RewardMode::dense, int horizon = -1);

// Task-set manifest (JSON) for exact experiment replay.
void save_task_manifest(const std::vector<TaskSpec>& tasks, Family family, uint64_t seed,
                        const std::string& split, const std::string& path);
std::vector<TaskSpec> load_task_manifest(const std::string& path);

}  // namespace maesn
