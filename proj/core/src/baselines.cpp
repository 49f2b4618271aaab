#include "maesn/baselines.hpp"

#include <cmath>
#include <stdexcept>

namespace maesn {

std::string method_name(Method m) {
  switch (m) {
    case Method::maesn: return "maesn";
    case Method::maml: return "maml";
    case Method::latent_only: return "latent_only";
    case Method::scratch: return "scratch";
    case Method::maml_bias_all: return "maml_bias_all";
    case Method::maml_bias_only: return "maml_bias_only";
  }
  throw std::invalid_argument("method_name: unknown method");
}

Method method_from_name(const std::string& s) {
  for (Method m : {Method::maesn, Method::maml, Method::latent_only, Method::scratch,
                   Method::maml_bias_all, Method::maml_bias_only})
    if (method_name(m) == s) return m;
  throw std::invalid_argument("unknown method '" + s + "'");
}

TrainConfig apply_method(Method m, TrainConfig cfg) {
  switch (m) {
    case Method::maesn:
      break;
    case Method::maml:
      cfg.latent_dim = 0;
      cfg.iter.include_theta = true;
      break;
    case Method::latent_only:
      cfg.iter.inner_steps = 0;
      break;
    case Method::maml_bias_all:
    case Method::maml_bias_only:
      // Deterministic latent input: sigma pinned at a negligible value and
      // excluded from every update; no prior regularization.
      cfg.vp_log_sigma_init = std::log(1e-8);
      cfg.iter.freeze_sigma = true;
      cfg.kl_weight = 0.0;
      cfg.iter.include_theta = (m == Method::maml_bias_all);
      break;
    case Method::scratch:
      throw std::invalid_argument("scratch trains per task; use train_scratch");
  }
  return cfg;
}

TrainResult train_method(Method m, const TrainConfig& cfg) {
  return meta_train(apply_method(m, cfg));
}

ScratchResult train_scratch(const TaskSpec& task, const RewardSpec& rspec,
                            const ScratchConfig& cfg) {
  ScratchResult res;
  RngStream init_rng(cfg.seed, "init");
  res.theta = PolicyParams::init(obs_dim(task.family), 0, action_dim(task.family), init_rng,
                                 cfg.log_std_init, cfg.hidden);
  VariationalParams no_vp{Tensor::zeros({0}), Tensor::zeros({0})};

  for (int k = 0; k < cfg.iterations; ++k) {
    auto trajs = collect(res.theta, no_vp, task, rspec, cfg.episodes, cfg.seed,
                         "scratch/" + std::to_string(k));
    ReturnStats stats = compute_stats(trajs, true, true);

    Graph g;
    PolicyVars pv = policy_leaves(g, res.theta);
    IterationStats st;
    st.iteration = k;
    st.pre_return = st.post_return = stats.eta;

    if (cfg.trpo) {
      SurrogateAux aux;
      Var sur = reinforce_surrogate(g, trajs, stats, pv, nullptr, 0, res.theta.action_dim,
                                    {LatentPath::none, SurrogateForm::is_ratio}, &aux);
      Var kl_rows_sum;
      long rows = 0;
      Tensor old_log_std = g.value(pv.log_std);
      for (Var mean : aux.means) {
        Tensor old_mean = g.value(mean);
        Var r = gaussian_kl_rows(g, old_mean, old_log_std, mean, pv.log_std,
                                 res.theta.action_dim);
        Var rsum = g.sum(r);
        kl_rows_sum = kl_rows_sum.valid() ? g.add(kl_rows_sum, rsum) : rsum;
        rows += old_mean.shape[0];
      }
      Var kl_mean = g.scale(kl_rows_sum, 1.0 / static_cast<double>(rows));
      TrustRegionReport rep = trust_region_step(g, sur, kl_mean, pv.all(), cfg.trust);
      st.accepted = rep.accepted;
      st.cg_fallback = rep.cg_fallback;
      if (rep.accepted) res.theta = read_policy(g, pv, res.theta);
    } else {
      Var sur = reinforce_surrogate(g, trajs, stats, pv, nullptr, 0, res.theta.action_dim,
                                    {LatentPath::none, SurrogateForm::score});
      std::vector<Var> vars = pv.all();
      std::vector<Var> grads = g.grad(sur, vars);
      auto entries = res.theta.entries();
      for (size_t j = 0; j < vars.size(); ++j) {
        const Tensor& gt = g.value(grads[j]);
        if (!gt.all_finite())
          throw std::runtime_error("train_scratch: non-finite gradient at iteration " +
                                   std::to_string(k));
        for (size_t i = 0; i < gt.v.size(); ++i) entries[j].second->v[i] += cfg.lr * gt.v[i];
      }
      st.accepted = true;
    }
    res.theta.clamp_log_std();
    res.history.push_back(st);
  }
  return res;
}

AdaptTrace maml_metatest_adapt(PolicyParams theta, const StepSizes& alpha, const TaskSpec& task,
                               const RewardSpec& rspec, int n_iters, int episodes_per_iter,
                               uint64_t seed, Env::Counters* counters) {
  if (theta.latent_dim != 0)
    throw std::invalid_argument("maml_metatest_adapt: expects a non-latent policy");
  if (!alpha.alpha_theta)
    throw std::invalid_argument("maml_metatest_adapt: needs per-parameter step sizes");
  AdaptTrace trace;
  VariationalParams no_vp{Tensor::zeros({0}), Tensor::zeros({0})};
  for (int it = 0; it < n_iters; ++it) {
    std::string tag = "metatest/" + std::to_string(it);
    auto trajs = collect(theta, no_vp, task, rspec, episodes_per_iter, seed, tag, counters);
    // Same statistics and update rule as the meta-training inner loop, so the
    // learned step sizes keep the scale they were tuned for.
    ReturnStats stats = compute_stats(trajs, true, true);
    trace.mean_returns.push_back(stats.eta);

    Graph g;
    PolicyVars pv = policy_leaves(g, theta);
    StepVars sv = step_leaves(g, alpha);
    InnerOptions opt;
    opt.include_theta = true;
    opt.surrogate = {LatentPath::none, SurrogateForm::score};
    AdaptedParams post = inner_update(g, trajs, stats, pv, nullptr, sv, 0, theta.action_dim,
                                      opt);
    theta = read_policy(g, post.theta_post, theta);
    theta.clamp_log_std();
  }
  return trace;
}

}  // namespace maesn
