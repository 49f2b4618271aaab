#pragma once

#include <optional>
#include <string>
#include <vector>

#include "maesn/graph.hpp"
#include "maesn/rng.hpp"
#include "maesn/tensor.hpp"

namespace maesn {

/// Shared policy weights for the 2x100 ReLU network plus the state-independent
/// action log-std. The first layer is stored split into a state block and a
/// latent block; concatenating [s; z] at the input is exactly
/// s*w1s + z*w1z + b1. latent_dim may be 0 (no latent pathway).
struct PolicyParams {
  long state_dim = 0, latent_dim = 0, action_dim = 0, hidden = 100;
  Tensor w1s, w1z, b1;  // [s,h], [l,h], [h]
  Tensor w2, b2;        // [h,h], [h]
  Tensor w3, b3;        // [h,a], [a]
  Tensor log_std;       // [a], clamped to [-5, 2]

  static PolicyParams init(long state_dim, long latent_dim, long action_dim, RngStream& rng,
                           double log_std_init = -0.5, long hidden = 100);

  void clamp_log_std();

  /// Named views over every tensor, in a fixed order (used for flattening,
  /// checkpoints and step-size layouts).
  std::vector<std::pair<std::string, Tensor*>> entries();
  std::vector<std::pair<std::string, const Tensor*>> entries() const;
};

/// Per-task latent Gaussian, sigma parameterized in log space.
struct VariationalParams {
  Tensor mu;         // [latent_dim]
  Tensor log_sigma;  // [latent_dim]

  static VariationalParams prior(long latent_dim) {
    return {Tensor::zeros({latent_dim}), Tensor::zeros({latent_dim})};
  }
};

/// Meta-learned elementwise inner-loop step sizes. Stored unconstrained.
/// alpha_sigma acts on log_sigma. alpha_theta, when present, matches the
/// PolicyParams tensor layout.
struct StepSizes {
  Tensor alpha_mu;
  Tensor alpha_sigma;
  std::optional<PolicyParams> alpha_theta;

  static StepSizes init(long latent_dim, double value = 0.1);
};

struct LatentSample {
  Tensor z;        // mu + exp(log_sigma) .* epsilon
  Tensor epsilon;  // the standard-normal draw, kept for reparameterization
};

/// One z per episode (sampled once, then fixed for the whole episode).
LatentSample sample_latent(const VariationalParams& vp, RngStream& rng);

/// mean = MLP([s; z]), std = exp(log_std). z is ignored when latent_dim == 0.
void action_dist(const std::vector<double>& state, const std::vector<double>& z,
                 const PolicyParams& p, std::vector<double>& mean_out,
                 std::vector<double>& std_out);

/// Diagonal-Gaussian log density of `action` under action_dist(state, z, p).
double log_prob(const std::vector<double>& action, const std::vector<double>& state,
                const std::vector<double>& z, const PolicyParams& p);

/// Graph-side handles to one set of policy parameters.
struct PolicyVars {
  Var w1s, w1z, b1, w2, b2, w3, b3, log_std;
  std::vector<Var> all() const { return {w1s, w1z, b1, w2, b2, w3, b3, log_std}; }
};

struct VpVars {
  Var mu, log_sigma;
};

PolicyVars policy_leaves(Graph& g, const PolicyParams& p);
PolicyVars policy_constants(Graph& g, const PolicyParams& p);
VpVars vp_leaves(Graph& g, const VariationalParams& vp);
PolicyParams read_policy(Graph& g, const PolicyVars& pv, const PolicyParams& like);
VariationalParams read_vp(Graph& g, const VpVars& vv);

/// Batched policy mean over a [T, state_dim] state matrix with one latent row
/// vector z of shape [1, latent_dim]; returns [T, action_dim].
Var policy_mean_graph(Graph& g, const PolicyVars& pv, Var states, Var z, long latent_dim);

/// Per-row diagonal-Gaussian log density, [T, 1].
Var gaussian_logprob_rows(Graph& g, Var actions, Var mean, Var log_std_vec, long action_dim);

/// Scalar log N(z | mu, exp(log_sigma)^2) for a latent row vector [1, d].
Var latent_logprob(Graph& g, Var z_row, VpVars vp, long latent_dim);

// Checkpoint I/O (versioned JSON, documented in the README).
void save_policy(const PolicyParams& p, const std::string& path);
PolicyParams load_policy(const std::string& path);
void save_vp_manifest(const std::vector<std::pair<int, VariationalParams>>& vps,
                      const std::string& path);
std::vector<std::pair<int, VariationalParams>> load_vp_manifest(const std::string& path);
void save_step_sizes(const StepSizes& s, const std::string& path);
StepSizes load_step_sizes(const std::string& path);

}  // namespace maesn
