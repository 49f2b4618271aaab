#pragma once

#include <string>
#include <vector>

#include "maesn/meta_opt.hpp"

namespace maesn {

/// Comparison methods sharing the estimator and optimizer stack.
///  - maesn:          latent policy, inner step on (mu, log_sigma), KL to prior
///  - maml:           no latent; inner step adapts all of theta
///  - latent_only:    latent policy trained without any inner update
///  - scratch:        per-task training of a fresh non-latent policy
///  - maml_bias_all:  deterministic latent (sigma pinned tiny, no KL), inner
///                    step adapts theta and the latent bias
///  - maml_bias_only: deterministic latent, inner step adapts the bias alone
enum class Method { maesn, maml, latent_only, scratch, maml_bias_all, maml_bias_only };

std::string method_name(Method m);
Method method_from_name(const std::string& s);

/// Rewrites a shared config into the method's preset (latent dimension, inner
/// update mode, sigma freezing, KL weight). scratch is per-task and does not
/// go through meta-training; passing it here throws.
TrainConfig apply_method(Method m, TrainConfig cfg);

/// Meta-train with the method's preset applied. Not valid for scratch.
TrainResult train_method(Method m, const TrainConfig& cfg);

struct ScratchConfig {
  bool trpo = true;  // false: plain-gradient ascent with step size lr
  int iterations = 100;
  int episodes = 20;
  long hidden = 100;
  double log_std_init = -0.5;
  double lr = 0.01;
  uint64_t seed = 0;
  TrustRegionOptions trust;
};

struct ScratchResult {
  PolicyParams theta;
  std::vector<IterationStats> history;  // pre_return == post_return == batch mean
};

/// Single-task training of a fresh non-latent policy, with the trust-region
/// optimizer or a plain REINFORCE gradient step.
ScratchResult train_scratch(const TaskSpec& task, const RewardSpec& rspec,
                            const ScratchConfig& cfg);

/// Adaptation on a held-out task for the non-latent method: each iteration
/// takes one ascent step on all of theta with the meta-learned per-parameter
/// step sizes, mirroring the training inner loop.
AdaptTrace maml_metatest_adapt(PolicyParams theta, const StepSizes& alpha, const TaskSpec& task,
                               const RewardSpec& rspec, int n_iters, int episodes_per_iter,
                               uint64_t seed, Env::Counters* counters = nullptr);

}  // namespace maesn
