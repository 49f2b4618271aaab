#pragma once

#include <string>
#include <vector>

#include "maesn/baselines.hpp"

namespace maesn {

/// A full experiment: meta-train on dense rewards, then adapt on sparse
/// validation tasks, for every seed in `seeds`. Parsed from JSON; unknown
/// keys are rejected so typos fail loudly.
struct ExperimentConfig {
  Method method = Method::maesn;
  Family family = Family::point_nav;
  int n_train_tasks = 20;
  int n_validation_tasks = 20;
  int iterations = 100;         // meta-training iterations K
  int task_batch_size = 20;
  int episodes_pre = 20;
  int episodes_post = 20;
  int adapt_iterations = 25;    // meta-test adaptation iterations
  int adapt_episodes = 20;      // episodes per adaptation iteration
  long latent_dim = 2;
  long hidden = 100;
  int horizon = -1;             // -1: family default
  double kl_weight = 1.0;
  double alpha_init = 0.1;
  double log_std_init = -0.5;
  double trust_delta = 0.01;
  bool freeze_theta = false;
  std::vector<uint64_t> seeds{0};
  std::string out_dir;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
  static ExperimentConfig from_json_file(const std::string& path);
  void to_json_file(const std::string& path) const;
};

/// Runs the experiment, writing the artifact tree:
///   out_dir/config.json
///   out_dir/seed_<s>/train/metrics.csv + tasks.json + ckpt_final/   (meta methods)
///   out_dir/seed_<s>/metatest/metrics.csv + tasks.json
///   out_dir/seed_<s>/metatest/adapt_task_<id>.csv                   (latent methods)
///   out_dir/seed_<s>/metatest/trajectories.csv   (prior rollouts, first task)
///   out_dir/seed_<s>/metatest/latents.csv        (pre/post latent per task)
///   out_dir/seed_<s>/dispersion.csv              (sampled-z vs fixed-z spread)
/// Training rows are tagged mode=dense, meta-test rows mode=sparse.
/// A mid-run failure leaves the partial tree plus out_dir/error.json.
void run_experiment(const ExperimentConfig& cfg);

/// Derives plot-ready files under dir/plot from the run artifacts:
///   adaptation_curve.csv  (iteration, mean, stderr, method)
///   trajectories.csv      (episode, t, x, y)
///   latent_ellipses.csv   (task_id, tag, mu..., sigma...)
///   dispersion.csv        (seed, setting, dispersion)
/// Throws std::runtime_error naming the first missing input file.
void export_plotdata(const std::string& dir);

/// Re-runs the experiment recorded in dir/config.json into a scratch
/// directory and byte-compares every metrics and adaptation CSV. Returns the
/// list of files that differ (empty means verified).
std::vector<std::string> verify_experiment(const std::string& dir);

/// Adaptation on every task in the manifest from a saved checkpoint; writes
/// adapt_task_<id>.csv plus a metrics.csv into out_dir and returns the final
/// mean return across tasks.
double run_metatest(const std::string& ckpt_dir, const std::string& manifest_path,
                    const std::string& out_dir, int adapt_iterations, int adapt_episodes,
                    uint64_t seed);

}  // namespace maesn
