#include "maesn/estimators.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"

namespace maesn {

ReturnStats compute_stats(const std::vector<Trajectory>& trajs, bool use_baseline, bool normalize,
                          double gamma) {
  if (trajs.empty()) throw std::invalid_argument("compute_stats: empty trajectory batch");
  ReturnStats s;
  size_t max_t = 0;
  for (const auto& tr : trajs) max_t = std::max(max_t, tr.rewards.size());

  // discounted return-to-go per trajectory
  std::vector<std::vector<double>> rtg(trajs.size());
  for (size_t i = 0; i < trajs.size(); ++i) {
    const auto& r = trajs[i].rewards;
    rtg[i].assign(r.size(), 0.0);
    double acc = 0.0;
    for (size_t t = r.size(); t-- > 0;) {
      acc = r[t] + gamma * acc;
      rtg[i][t] = acc;
    }
    s.returns.push_back(rtg[i].empty() ? 0.0 : rtg[i][0]);
  }
  s.eta = std::accumulate(s.returns.begin(), s.returns.end(), 0.0) /
          static_cast<double>(s.returns.size());

  s.baseline.assign(max_t, 0.0);
  if (use_baseline) {
    std::vector<long> counts(max_t, 0);
    for (const auto& g : rtg)
      for (size_t t = 0; t < g.size(); ++t) {
        s.baseline[t] += g[t];
        ++counts[t];
      }
    for (size_t t = 0; t < max_t; ++t)
      if (counts[t] > 0) s.baseline[t] /= static_cast<double>(counts[t]);
  }

  s.advantages.resize(trajs.size());
  for (size_t i = 0; i < trajs.size(); ++i) {
    s.advantages[i].assign(rtg[i].size(), 0.0);
    for (size_t t = 0; t < rtg[i].size(); ++t) s.advantages[i][t] = rtg[i][t] - s.baseline[t];
  }
  double ret_base = use_baseline ? s.eta : 0.0;
  for (double r : s.returns) s.traj_advantage.push_back(r - ret_base);

  if (normalize) {
    double mean = 0, count = 0;
    for (const auto& a : s.advantages)
      for (double x : a) {
        mean += x;
        ++count;
      }
    mean /= std::max(count, 1.0);
    double var = 0;
    for (const auto& a : s.advantages)
      for (double x : a) var += (x - mean) * (x - mean);
    double sd = std::sqrt(var / std::max(count, 1.0)) + 1e-8;
    for (auto& a : s.advantages)
      for (double& x : a) x = (x - mean) / sd;

    double tmean = std::accumulate(s.traj_advantage.begin(), s.traj_advantage.end(), 0.0) /
                   static_cast<double>(s.traj_advantage.size());
    double tvar = 0;
    for (double x : s.traj_advantage) tvar += (x - tmean) * (x - tmean);
    double tsd = std::sqrt(tvar / static_cast<double>(s.traj_advantage.size())) + 1e-8;
    for (double& x : s.traj_advantage) x = (x - tmean) / tsd;
  }
  return s;
}

std::vector<Trajectory> collect(const PolicyParams& p, const VariationalParams& vp,
                                const TaskSpec& task, const RewardSpec& rspec, int n_episodes,
                                uint64_t seed, std::string_view tag, Env::Counters* counters) {
  if (n_episodes < 1) throw std::invalid_argument("collect: n_episodes must be >= 1");
  std::vector<Trajectory> out;
  out.reserve(static_cast<size_t>(n_episodes));
  std::string base(tag);
  for (int ep = 0; ep < n_episodes; ++ep) {
    RngStream lat_rng(seed, base + "/latent", static_cast<uint64_t>(task.task_id),
                      static_cast<uint64_t>(ep));
    RngStream act_rng(seed, base + "/action", static_cast<uint64_t>(task.task_id),
                      static_cast<uint64_t>(ep));
    Trajectory tr;
    tr.task_id = task.task_id;
    tr.z = p.latent_dim > 0 ? sample_latent(vp, lat_rng)
                            : LatentSample{Tensor::zeros({0}), Tensor::zeros({0})};

    Env env(task, rspec);
    std::vector<double> obs = env.reset();
    std::vector<double> zvec(tr.z.z.v.begin(), tr.z.z.v.end());
    long T = task.horizon;
    tr.states = Tensor::zeros({T, obs_dim(task.family)});
    tr.actions = Tensor::zeros({T, action_dim(task.family)});
    std::vector<double> mean, sd, action(static_cast<size_t>(action_dim(task.family)));
    try {
      for (long t = 0; t < T; ++t) {
        for (long k = 0; k < static_cast<long>(obs.size()); ++k) tr.states.at(t, k) = obs[k];
        action_dist(obs, zvec, p, mean, sd);
        for (size_t k = 0; k < action.size(); ++k) action[k] = mean[k] + sd[k] * act_rng.normal();
        for (long k = 0; k < static_cast<long>(action.size()); ++k) tr.actions.at(t, k) = action[k];
        StepResult r = env.step(action);
        tr.rewards.push_back(r.reward);
        tr.ret += r.reward;
        obs = r.obs;
      }
    } catch (const std::exception& e) {
      throw std::runtime_error("collect: task " + std::to_string(task.task_id) +
                               " episode " + std::to_string(ep) + ": " + e.what());
    }
    if (counters) {
      counters->dense_evals += env.counters().dense_evals;
      counters->sparse_evals += env.counters().sparse_evals;
    }
    out.push_back(std::move(tr));
  }
  return out;
}

Var reinforce_surrogate(Graph& g, const std::vector<Trajectory>& trajs, const ReturnStats& stats,
                        const PolicyVars& pv, const VpVars* vp, long latent_dim, long action_dim,
                        SurrogateOptions opt, SurrogateAux* aux) {
  if (trajs.empty()) throw std::invalid_argument("reinforce_surrogate: empty trajectory batch");
  if ((opt.latent != LatentPath::none) && vp == nullptr)
    throw std::invalid_argument("reinforce_surrogate: latent path requires variational params");

  Var total;
  for (size_t i = 0; i < trajs.size(); ++i) {
    const Trajectory& tr = trajs[i];
    long T = tr.states.shape[0];

    Var z_row;
    if (latent_dim > 0) {
      if (opt.latent == LatentPath::reparam) {
        Var eps = g.constant(Tensor({1, latent_dim}, tr.z.epsilon.v));
        Var mu_row = g.reshape(vp->mu, {1, latent_dim});
        Var sig_row = g.exp_(g.reshape(vp->log_sigma, {1, latent_dim}));
        z_row = g.add(mu_row, g.mul(sig_row, eps));
      } else {
        z_row = g.constant(Tensor({1, latent_dim}, tr.z.z.v));
      }
    }

    Var states = g.constant(tr.states);
    Var actions = g.constant(tr.actions);
    Var mean = policy_mean_graph(g, pv, states, z_row, latent_dim);
    if (aux) aux->means.push_back(mean);
    Var logp = gaussian_logprob_rows(g, actions, mean, pv.log_std, action_dim);

    Tensor adv_col = Tensor::zeros({T, 1});
    for (long t = 0; t < T; ++t) adv_col.at(t, 0) = stats.advantages[i][static_cast<size_t>(t)];
    Var adv = g.constant(adv_col);

    Var term;
    if (opt.form == SurrogateForm::score) {
      term = g.sum(g.mul(logp, adv));
    } else {
      Var logp_old = g.constant(g.value(logp));  // frozen at build point
      term = g.sum(g.mul(g.exp_(g.sub(logp, logp_old)), adv));
    }

    if (latent_dim > 0 && opt.latent == LatentPath::likelihood_ratio) {
      Var z_const = g.constant(Tensor({1, latent_dim}, tr.z.z.v));
      Var lq = latent_logprob(g, z_const, *vp, latent_dim);
      Var zterm;
      if (opt.form == SurrogateForm::score) {
        zterm = g.scale(lq, stats.traj_advantage[i]);
      } else {
        Var lq_old = g.constant(g.value(lq));
        zterm = g.scale(g.exp_(g.sub(lq, lq_old)), stats.traj_advantage[i]);
      }
      term = g.add(term, zterm);
    }

    total = total.valid() ? g.add(total, term) : term;
  }
  return g.scale(total, 1.0 / static_cast<double>(trajs.size()));
}

std::pair<Tensor, Tensor> likelihood_ratio_grad(const std::vector<Trajectory>& trajs,
                                                const ReturnStats& stats,
                                                const VariationalParams& vp) {
  long d = vp.mu.size();
  for (long k = 0; k < d; ++k)
    if (std::exp(vp.log_sigma.at(k)) < 1e-8)
      throw std::invalid_argument("likelihood_ratio_grad: sigma underflow in dim " +
                                  std::to_string(k));
  Tensor gmu = Tensor::zeros({d}), gls = Tensor::zeros({d});
  for (size_t i = 0; i < trajs.size(); ++i) {
    double a = stats.traj_advantage[i];
    for (long k = 0; k < d; ++k) {
      double sig = std::exp(vp.log_sigma.at(k));
      double u = (trajs[i].z.z.at(k) - vp.mu.at(k)) / sig;
      gmu.at(k) += a * u / sig;
      gls.at(k) += a * (u * u - 1.0);
    }
  }
  double inv = 1.0 / static_cast<double>(trajs.size());
  for (long k = 0; k < d; ++k) {
    gmu.at(k) *= inv;
    gls.at(k) *= inv;
  }
  return {gmu, gls};
}

double kl_to_prior(const VariationalParams& vp) {
  double kl = 0.0;
  for (long k = 0; k < vp.mu.size(); ++k) {
    double s2 = std::exp(2.0 * vp.log_sigma.at(k));
    kl += 0.5 * (vp.mu.at(k) * vp.mu.at(k) + s2 - 1.0 - 2.0 * vp.log_sigma.at(k));
  }
  return kl;
}

Var kl_to_prior_node(Graph& g, VpVars vp) {
  Var s2 = g.exp_(g.scale(vp.log_sigma, 2.0));
  Var inner = g.shift(g.sub(g.add(g.square(vp.mu), s2), g.scale(vp.log_sigma, 2.0)), -1.0);
  return g.scale(g.sum(inner), 0.5);
}

Var gaussian_kl_rows(Graph& g, const Tensor& old_mean, const Tensor& old_log_std, Var new_mean,
                     Var new_log_std_vec, long action_dim) {
  long T = old_mean.shape[0];
  Tensor s0sq = Tensor::zeros({action_dim});
  double ls0_sum = 0;
  for (long k = 0; k < action_dim; ++k) {
    s0sq.at(k) = std::exp(2.0 * old_log_std.at(k));
    ls0_sum += old_log_std.at(k);
  }
  Var diff = g.sub(g.constant(old_mean), new_mean);
  Var num = g.add(g.broadcast_row(g.constant(s0sq), T), g.square(diff));
  Var prec = g.broadcast_row(g.exp_(g.scale(new_log_std_vec, -2.0)), T);
  Var ones = g.constant(Tensor::full({action_dim, 1}, 1.0));
  Var quad = g.scale(g.matmul(g.mul(num, prec), ones), 0.5);  // [T,1]
  Var ls_term = g.broadcast_scalar(g.sum(new_log_std_vec), {T, 1});
  Var rows = g.add(quad, ls_term);
  return g.shift(rows, -ls0_sum - 0.5 * static_cast<double>(action_dim));
}

void dump_trajectories(const std::vector<Trajectory>& trajs, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& tr : trajs) {
    nlohmann::json line{{"task_id", tr.task_id},
                        {"z", tr.z.z.v},
                        {"states", tr.states.v},
                        {"state_shape", tr.states.shape},
                        {"actions", tr.actions.v},
                        {"action_shape", tr.actions.shape},
                        {"rewards", tr.rewards}};
    out << line.dump() << "\n";
  }
}

}  // namespace maesn
