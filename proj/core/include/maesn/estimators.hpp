#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "maesn/envs.hpp"
#include "maesn/graph.hpp"
#include "maesn/policy.hpp"

namespace maesn {

/// One episode. Return is the undiscounted sum of rewards unless a discount
/// is requested explicitly in ReturnStats.
struct Trajectory {
  Tensor states;   // [T, obs_dim]
  Tensor actions;  // [T, action_dim]
  std::vector<double> rewards;
  LatentSample z;  // the single per-episode latent draw
  int task_id = 0;
  double ret = 0;
};

struct ReturnStats {
  std::vector<double> returns;                  // per trajectory
  std::vector<double> baseline;                 // per timestep
  std::vector<std::vector<double>> advantages;  // per trajectory, per step
  std::vector<double> traj_advantage;           // per trajectory (for latent terms)
  double eta = 0;                               // mean return
};

/// Per-timestep mean return-to-go across the batch (the default baseline),
/// then advantage normalization to zero mean / unit variance when enabled.
ReturnStats compute_stats(const std::vector<Trajectory>& trajs, bool use_baseline = true,
                          bool normalize = true, double gamma = 1.0);

/// Roll out n episodes of the latent-conditioned policy on one task. Each
/// episode draws one fresh z. Randomness is keyed by (seed, tag, task_id,
/// episode), so results do not depend on scheduling or worker count.
std::vector<Trajectory> collect(const PolicyParams& p, const VariationalParams& vp,
                                const TaskSpec& task, const RewardSpec& rspec, int n_episodes,
                                uint64_t seed, std::string_view tag,
                                Env::Counters* counters = nullptr);

/// How gradients reach the variational parameters through the surrogate.
enum class LatentPath {
  reparam,           // z = mu + exp(log_sigma) .* eps as a graph expression
  likelihood_ratio,  // z constant; adds log q(z) * trajectory advantage
  none,              // z constant, no latent terms (no-latent policies)
};

/// score: mean(sum_t log pi * A) — correct gradient at the build point.
/// is_ratio: mean(sum_t exp(log pi - log pi_old) * A) with pi_old frozen at
/// build time — same gradient at the build point, but meaningful when
/// re-evaluated off-point (trust-region line search).
enum class SurrogateForm { score, is_ratio };

struct SurrogateOptions {
  LatentPath latent = LatentPath::reparam;
  SurrogateForm form = SurrogateForm::score;
};

/// Per-trajectory nodes exposed for downstream constraint construction.
struct SurrogateAux {
  std::vector<Var> means;  // policy mean [T, action_dim] per trajectory
};

/// Differentiable policy-gradient surrogate over a trajectory batch.
/// vp may be null when the policy has no latent pathway.
Var reinforce_surrogate(Graph& g, const std::vector<Trajectory>& trajs, const ReturnStats& stats,
                        const PolicyVars& pv, const VpVars* vp, long latent_dim, long action_dim,
                        SurrogateOptions opt = {}, SurrogateAux* aux = nullptr);

/// Monte-Carlo likelihood-ratio estimate of the latent gradient with
/// baseline-subtracted returns. Returns gradients w.r.t. (mu, log_sigma);
/// the log_sigma component is the sigma gradient expressed in log space.
std::pair<Tensor, Tensor> likelihood_ratio_grad(const std::vector<Trajectory>& trajs,
                                                const ReturnStats& stats,
                                                const VariationalParams& vp);

/// Closed-form KL(N(mu, sigma) || N(0, I)) for a diagonal Gaussian.
double kl_to_prior(const VariationalParams& vp);
Var kl_to_prior_node(Graph& g, VpVars vp);

/// Per-row KL(old || new) between diagonal Gaussians, [T, 1]. `old` is frozen
/// at build time; used as the trust-region constraint.
Var gaussian_kl_rows(Graph& g, const Tensor& old_mean, const Tensor& old_log_std, Var new_mean,
                     Var new_log_std_vec, long action_dim);

/// JSON Lines trajectory dump: one episode per line.
void dump_trajectories(const std::vector<Trajectory>& trajs, const std::string& path);

}  // namespace maesn
