#pragma once

#include <optional>
#include <string>
#include <vector>

#include "maesn/estimators.hpp"

namespace maesn {

/// Graph-side handles to the inner-loop step sizes. alpha_theta follows the
/// PolicyVars::all() order and is empty unless the theta update is enabled.
struct StepVars {
  Var alpha_mu, alpha_sigma;
  std::vector<Var> alpha_theta;
};

StepVars step_leaves(Graph& g, const StepSizes& s);
StepSizes read_step_sizes(Graph& g, const StepVars& sv, const StepSizes& like);

/// Post-adaptation parameters, emitted as graph expressions of the pre-update
/// leaves so outer gradients flow through the update itself.
struct AdaptedParams {
  VpVars vp_post;
  PolicyVars theta_post;  // same handles as the input when the theta update is off
  Var inner_surrogate;    // the objective the inner step ascended
};

struct InnerOptions {
  bool include_theta = false;
  /// Treat the inner gradient as a constant (stop-gradient), dropping the
  /// second-order terms from any outer gradient through the result.
  bool first_order = false;
  SurrogateOptions surrogate{LatentPath::reparam, SurrogateForm::score};
};

/// One gradient-ascent step on the variational parameters (and optionally on
/// theta) with elementwise step sizes: post = pre + alpha .* grad(surrogate).
/// The sigma step acts on log_sigma, keeping sigma positive. Throws
/// std::runtime_error naming the parameter group if any gradient is
/// non-finite.
AdaptedParams inner_update(Graph& g, const std::vector<Trajectory>& trajs,
                           const ReturnStats& stats, const PolicyVars& theta, const VpVars* vp,
                           const StepVars& alpha, long latent_dim, long action_dim,
                           InnerOptions opt = {});

struct AdaptTrace {
  std::vector<VariationalParams> vps;  // length n_iters + 1; vps[0] is the prior
  std::vector<double> mean_returns;    // mean return of the batch collected under vps[i]
};

/// Adaptation on a held-out task: the latent distribution starts at `start`
/// (the unit Gaussian prior by default), theta stays frozen, and each
/// iteration takes the same ascent step on (mu, log_sigma) the meta-training
/// inner loop uses, with baseline-subtracted standardized advantages. Step
/// sizes default to the learned alpha; fixed_step replaces both groups with a
/// scalar when set. The adapted log_sigma is clamped to [-5, 2] as a safety
/// bound.
AdaptTrace metatest_adapt(const PolicyParams& theta, const StepSizes& alpha, const TaskSpec& task,
                          const RewardSpec& rspec, int n_iters, int episodes_per_iter,
                          uint64_t seed, std::optional<double> fixed_step = std::nullopt,
                          Env::Counters* counters = nullptr,
                          std::optional<VariationalParams> start = std::nullopt);

/// CSV: iteration, mean_return, mu..., log_sigma... (one row per iteration).
void write_adapt_trace(const AdaptTrace& trace, const std::string& path);

}  // namespace maesn
