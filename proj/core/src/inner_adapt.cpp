#include "maesn/inner_adapt.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace maesn {

StepVars step_leaves(Graph& g, const StepSizes& s) {
  StepVars sv;
  if (s.alpha_mu.size() > 0) {
    sv.alpha_mu = g.leaf(s.alpha_mu);
    sv.alpha_sigma = g.leaf(s.alpha_sigma);
  }
  if (s.alpha_theta) {
    for (auto& [name, t] : s.alpha_theta->entries()) sv.alpha_theta.push_back(g.leaf(*t));
  }
  return sv;
}

StepSizes read_step_sizes(Graph& g, const StepVars& sv, const StepSizes& like) {
  StepSizes out = like;
  if (sv.alpha_mu.valid()) {
    out.alpha_mu = g.value(sv.alpha_mu);
    out.alpha_sigma = g.value(sv.alpha_sigma);
  }
  if (!sv.alpha_theta.empty()) {
    size_t i = 0;
    for (auto& [name, t] : out.alpha_theta->entries()) *t = g.value(sv.alpha_theta[i++]);
  }
  return out;
}

namespace {

void check_finite(Graph& g, Var grad_node, const std::string& group) {
  if (!g.value(grad_node).all_finite())
    throw std::runtime_error("inner_update: non-finite gradient for parameter group '" + group +
                             "'");
}

}  // namespace

AdaptedParams inner_update(Graph& g, const std::vector<Trajectory>& trajs,
                           const ReturnStats& stats, const PolicyVars& theta, const VpVars* vp,
                           const StepVars& alpha, long latent_dim, long action_dim,
                           InnerOptions opt) {
  if (latent_dim > 0 && (vp == nullptr || !alpha.alpha_mu.valid()))
    throw std::invalid_argument("inner_update: latent policy needs vp and latent step sizes");
  if (opt.include_theta && alpha.alpha_theta.size() != theta.all().size())
    throw std::invalid_argument("inner_update: theta update needs one step-size tensor per group");

  AdaptedParams out;
  out.theta_post = theta;
  out.inner_surrogate =
      reinforce_surrogate(g, trajs, stats, theta, vp, latent_dim, action_dim, opt.surrogate);

  std::vector<Var> wrt;
  std::vector<std::string> names;
  if (latent_dim > 0) {
    wrt.push_back(vp->mu);
    wrt.push_back(vp->log_sigma);
    names.push_back("mu");
    names.push_back("log_sigma");
  }
  std::vector<Var> theta_vars = theta.all();
  static const char* kThetaNames[] = {"w1s", "w1z", "b1", "w2", "b2", "w3", "b3", "log_std"};
  if (opt.include_theta) {
    for (size_t i = 0; i < theta_vars.size(); ++i) {
      wrt.push_back(theta_vars[i]);
      names.push_back(kThetaNames[i]);
    }
  }
  std::vector<Var> grads = g.grad(out.inner_surrogate, wrt);
  for (size_t i = 0; i < grads.size(); ++i) {
    check_finite(g, grads[i], names[i]);
    if (opt.first_order) grads[i] = g.detach(grads[i]);
  }

  size_t gi = 0;
  if (latent_dim > 0) {
    out.vp_post.mu = g.add(vp->mu, g.mul(alpha.alpha_mu, grads[gi++]));
    out.vp_post.log_sigma = g.add(vp->log_sigma, g.mul(alpha.alpha_sigma, grads[gi++]));
  } else if (vp != nullptr) {
    out.vp_post = *vp;
  }
  if (opt.include_theta) {
    std::vector<Var> post;
    for (size_t i = 0; i < theta_vars.size(); ++i)
      post.push_back(g.add(theta_vars[i], g.mul(alpha.alpha_theta[i], grads[gi++])));
    out.theta_post = PolicyVars{post[0], post[1], post[2], post[3],
                                post[4], post[5], post[6], post[7]};
  }
  return out;
}

AdaptTrace metatest_adapt(const PolicyParams& theta, const StepSizes& alpha, const TaskSpec& task,
                          const RewardSpec& rspec, int n_iters, int episodes_per_iter,
                          uint64_t seed, std::optional<double> fixed_step,
                          Env::Counters* counters, std::optional<VariationalParams> start) {
  if (theta.latent_dim <= 0)
    throw std::invalid_argument("metatest_adapt: policy has no latent pathway");
  AdaptTrace trace;
  VariationalParams vp = start ? *start : VariationalParams::prior(theta.latent_dim);
  trace.vps.push_back(vp);
  for (int it = 0; it < n_iters; ++it) {
    std::string tag = "metatest/" + std::to_string(it);
    auto trajs = collect(theta, vp, task, rspec, episodes_per_iter, seed, tag, counters);
    ReturnStats stats = compute_stats(trajs, true, true);
    trace.mean_returns.push_back(stats.eta);

    // The same update rule the meta-training inner loop ascends, with theta
    // frozen as constants (so the learned alpha has the scale it was tuned
    // for). No KL term appears in the adaptation objective.
    Graph g;
    PolicyVars pc = policy_constants(g, theta);
    VpVars vv = vp_leaves(g, vp);
    StepSizes ss = alpha;
    if (fixed_step) {
      ss.alpha_mu = Tensor::full({theta.latent_dim}, *fixed_step);
      ss.alpha_sigma = Tensor::full({theta.latent_dim}, *fixed_step);
    }
    ss.alpha_theta.reset();
    StepVars sv = step_leaves(g, ss);
    AdaptedParams post = inner_update(g, trajs, stats, pc, &vv, sv, theta.latent_dim,
                                      theta.action_dim);
    vp = read_vp(g, post.vp_post);
    for (long k = 0; k < theta.latent_dim; ++k)
      vp.log_sigma.at(k) = std::clamp(vp.log_sigma.at(k), -5.0, 2.0);
    trace.vps.push_back(vp);
  }
  return trace;
}

void write_adapt_trace(const AdaptTrace& trace, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.precision(17);
  long d = trace.vps.empty() ? 0 : trace.vps[0].mu.size();
  out << "iteration,mean_return";
  for (long k = 0; k < d; ++k) out << ",mu" << k;
  for (long k = 0; k < d; ++k) out << ",log_sigma" << k;
  out << "\n";
  for (size_t i = 0; i < trace.mean_returns.size(); ++i) {
    out << i << "," << trace.mean_returns[i];
    for (long k = 0; k < d; ++k) out << "," << trace.vps[i].mu.at(k);
    for (long k = 0; k < d; ++k) out << "," << trace.vps[i].log_sigma.at(k);
    out << "\n";
  }
}

}  // namespace maesn
