#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "maesn/inner_adapt.hpp"

namespace maesn {

/// Everything the outer optimizer owns: shared weights, one latent
/// distribution per training task, and the learned inner step sizes.
struct MetaState {
  PolicyParams theta;
  std::map<int, VariationalParams> vp_all;  // task_id -> vp, covers the training set
  StepSizes steps;
  int iteration = 0;
  double kl_weight = 1.0;
};

struct TrustRegionOptions {
  double delta = 0.01;
  int cg_iters = 10;
  double cg_damping = 0.1;
  int max_backtracks = 10;
  double fallback_step = 0.01;  // plain-gradient step size when CG fails
};

struct TrustRegionReport {
  bool accepted = false;
  bool cg_fallback = false;
  double kl = 0;           // measured constraint at the accepted point
  double improvement = 0;  // objective gain at the accepted point
  int backtracks = 0;
};

/// One KL-constrained ascent step on the leaf parameters: natural-gradient
/// direction from conjugate gradient on Fisher-vector products (the Fisher is
/// the Hessian of `kl_mean` at the current point, obtained by differentiating
/// the gradient graph), scaled to the trust-region boundary, then backtracking
/// until kl_mean <= delta and the objective improves. On rejection the leaves
/// are restored exactly. A zero objective gradient is an accepted no-op.
TrustRegionReport trust_region_step(Graph& g, Var objective, Var kl_mean,
                                    const std::vector<Var>& params,
                                    const TrustRegionOptions& opt = {});

struct MetaIterOptions {
  int episodes_pre = 20, episodes_post = 20;
  int inner_steps = 1;  // 0 trains the pre-update objective directly
  bool include_theta = false;
  bool first_order = false;
  /// Exclude log_sigma from the outer update (the bias-transformation
  /// ablations pin sigma near zero so the latent is a learned constant).
  bool freeze_sigma = false;
  /// Exclude theta from the outer update: the latent space and step sizes are
  /// meta-learned against a fixed policy (pure latent-bandit studies).
  bool freeze_theta = false;
  TrustRegionOptions trust;
};

/// The per-iteration computation graph, kept around so tests can probe the
/// meta-objective directly (finite differences through set_value).
struct MetaGraph {
  Graph g;
  PolicyVars pv;
  StepVars sv;
  std::vector<VpVars> vps;         // aligned with the task batch
  std::vector<Var> params;         // flat optimization order
  Var post_sum, kl_sum, total;     // total = post_sum - kl_weight * kl_sum
  Var kl_constraint;               // mean post-update action KL vs the anchor
  double pre_return = 0, post_return = 0;
};

std::unique_ptr<MetaGraph> build_meta_graph(const MetaState& state,
                                            const std::vector<TaskSpec>& batch,
                                            const RewardSpec& rspec, const MetaIterOptions& opt,
                                            uint64_t seed);

struct IterationStats {
  int iteration = 0;
  double pre_return = 0, post_return = 0, kl_sum = 0;
  bool accepted = false;
  bool cg_fallback = false;
};

/// Collect, adapt, and take one trust-region step on (theta, batch vp, alpha).
IterationStats meta_iteration(MetaState& state, const std::vector<TaskSpec>& batch,
                              const RewardSpec& rspec, const MetaIterOptions& opt, uint64_t seed);

struct TrainConfig {
  Family family = Family::point_nav;
  long latent_dim = 2;
  long hidden = 100;
  int n_train_tasks = 20;
  int task_batch_size = 20;
  int iterations = 100;
  int horizon = -1;  // -1: family default
  double kl_weight = 1.0;
  double alpha_init = 0.1;
  double log_std_init = -0.5;
  double vp_log_sigma_init = 0.0;  // prior by default
  uint64_t seed = 0;
  MetaIterOptions iter;
  double dense_offset = 0.0;
  /// Start from these weights instead of a fresh random init.
  std::optional<PolicyParams> init_theta;
  int checkpoint_every = 0;       // 0: final checkpoint only
  std::string out_dir;            // empty: no artifacts written
};

struct TrainResult {
  MetaState state;
  std::vector<IterationStats> history;
  std::vector<TaskSpec> tasks;
  bool aborted = false;  // non-finite failure; state is the last good point
};

/// Meta-training on dense rewards. When out_dir is set, writes
/// out_dir/metrics.csv (iteration, pre_return, post_return, kl_sum, accepted,
/// mode) plus ckpt_<iter>/ directories with policy, vp manifest and step
/// sizes. A non-finite failure aborts and keeps the last good state.
TrainResult meta_train(const TrainConfig& cfg);

void save_checkpoint(const MetaState& state, const std::string& dir);
MetaState load_checkpoint(const std::string& dir);

/// Mean pairwise distance between trajectory endpoints over n episodes with
/// z ~ N(mu, sigma) (sample_prior=true draws from the unit prior; false pins
/// z = 0), used by the structured-exploration spread report.
double endpoint_dispersion(const PolicyParams& theta, const TaskSpec& task,
                           const RewardSpec& rspec, int n_episodes, uint64_t seed,
                           bool sample_prior);

}  // namespace maesn
