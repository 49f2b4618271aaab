#include "maesn/meta_opt.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "json.hpp"
#include "maesn/parallel.hpp"

namespace maesn {

namespace {

std::vector<double> read_flat(Graph& g, const std::vector<Var>& params) {
  std::vector<double> x;
  for (Var p : params) {
    const Tensor& t = g.value(p);
    x.insert(x.end(), t.v.begin(), t.v.end());
  }
  return x;
}

void write_flat(Graph& g, const std::vector<Var>& params, const std::vector<double>& x) {
  size_t off = 0;
  for (Var p : params) {
    Tensor t = g.value(p);  // copy for shape
    for (double& v : t.v) v = x[off++];
    g.set_value(p, t);
  }
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

bool all_finite(const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace

TrustRegionReport trust_region_step(Graph& g, Var objective, Var kl_mean,
                                    const std::vector<Var>& params,
                                    const TrustRegionOptions& opt) {
  TrustRegionReport rep;
  std::vector<double> x0 = read_flat(g, params);
  double obj0 = g.value(objective).item();
  if (!std::isfinite(obj0)) throw std::runtime_error("trust_region_step: non-finite objective");

  std::vector<Var> obj_grads = g.grad(objective, params);
  std::vector<double> b;
  for (Var n : obj_grads) {
    const Tensor& t = g.value(n);
    b.insert(b.end(), t.v.begin(), t.v.end());
  }
  if (!all_finite(b)) throw std::runtime_error("trust_region_step: non-finite gradient");
  double bnorm2 = dot(b, b);
  if (bnorm2 == 0.0) {
    rep.accepted = true;  // exact stationary point: nothing to do
    return rep;
  }

  // Fisher-vector product: differentiate dot(grad(kl), v) once more. The v
  // leaves are re-set each CG iteration; only the second sweep recomputes.
  std::vector<Var> kl_grads = g.grad(kl_mean, params);
  std::vector<Var> v_leaves;
  Var s;
  for (size_t j = 0; j < params.size(); ++j) {
    Var v = g.leaf(Tensor::zeros(g.shape(params[j])));
    v_leaves.push_back(v);
    Var term = g.sum(g.mul(kl_grads[j], v));
    s = s.valid() ? g.add(s, term) : term;
  }
  std::vector<Var> fvp_nodes = g.grad(s, params);
  auto fvp = [&](const std::vector<double>& v) {
    write_flat(g, v_leaves, v);
    std::vector<double> out;
    for (Var n : fvp_nodes) {
      const Tensor& t = g.value(n);
      out.insert(out.end(), t.v.begin(), t.v.end());
    }
    for (size_t i = 0; i < out.size(); ++i) out[i] += opt.cg_damping * v[i];
    return out;
  };

  // Conjugate gradient on F x = b.
  std::vector<double> x(b.size(), 0.0), r = b, p = b;
  double rs = bnorm2;
  bool cg_failed = false;
  for (int it = 0; it < opt.cg_iters && rs > 1e-12 * bnorm2; ++it) {
    std::vector<double> Ap = fvp(p);
    double pAp = dot(p, Ap);
    if (!std::isfinite(pAp) || pAp <= 0.0) {
      cg_failed = (it == 0);  // keep any progress from earlier iterations
      break;
    }
    double a = rs / pAp;
    for (size_t i = 0; i < x.size(); ++i) {
      x[i] += a * p[i];
      r[i] -= a * Ap[i];
    }
    double rs_new = dot(r, r);
    double beta = rs_new / rs;
    for (size_t i = 0; i < p.size(); ++i) p[i] = r[i] + beta * p[i];
    rs = rs_new;
  }
  if (!all_finite(x) || dot(x, x) == 0.0 || rs > bnorm2) cg_failed = true;

  std::vector<double> dir;
  double scale = 0.0;
  if (!cg_failed) {
    std::vector<double> Fx = fvp(x);
    double xFx = dot(x, Fx);
    if (std::isfinite(xFx) && xFx > 0.0) {
      dir = x;
      scale = std::sqrt(2.0 * opt.delta / xFx);
    } else {
      cg_failed = true;
    }
  }
  if (cg_failed) {
    rep.cg_fallback = true;
    dir = b;
    scale = opt.fallback_step;
  }

  // Backtracking line search: accept the first point inside the trust region
  // that improves the surrogate.
  double frac = 1.0;
  for (int bt = 0; bt < opt.max_backtracks; ++bt, frac *= 0.5) {
    std::vector<double> trial = x0;
    for (size_t i = 0; i < trial.size(); ++i) trial[i] += frac * scale * dir[i];
    write_flat(g, params, trial);
    double obj = g.value(objective).item();
    double kl = g.value(kl_mean).item();
    if (std::isfinite(obj) && std::isfinite(kl) && kl <= opt.delta * (1.0 + 1e-9) &&
        obj > obj0) {
      rep.accepted = true;
      rep.kl = kl;
      rep.improvement = obj - obj0;
      rep.backtracks = bt;
      return rep;
    }
  }
  write_flat(g, params, x0);
  g.value(objective);  // restore cached values at the anchor
  return rep;
}

std::unique_ptr<MetaGraph> build_meta_graph(const MetaState& state,
                                            const std::vector<TaskSpec>& batch,
                                            const RewardSpec& rspec, const MetaIterOptions& opt,
                                            uint64_t seed) {
  const long ldim = state.theta.latent_dim;
  const long adim = state.theta.action_dim;
  const int B = static_cast<int>(batch.size());
  if (B == 0) throw std::invalid_argument("build_meta_graph: empty task batch");

  auto mg = std::make_unique<MetaGraph>();
  Graph& g = mg->g;
  mg->pv = policy_leaves(g, state.theta);
  mg->sv = step_leaves(g, state.steps);

  struct TaskSlot {
    VpVars vp_pre;
    VpVars vp_cur;
    PolicyVars theta_cur;
    VariationalParams vp_num;
    PolicyParams theta_num;
    std::vector<Trajectory> trajs;
  };
  std::vector<TaskSlot> slots(static_cast<size_t>(B));
  for (int i = 0; i < B; ++i) {
    TaskSlot& sl = slots[static_cast<size_t>(i)];
    sl.theta_cur = mg->pv;
    sl.theta_num = state.theta;
    if (ldim > 0) {
      auto it = state.vp_all.find(batch[static_cast<size_t>(i)].task_id);
      if (it == state.vp_all.end())
        throw std::invalid_argument("build_meta_graph: missing vp for task " +
                                    std::to_string(batch[static_cast<size_t>(i)].task_id));
      sl.vp_num = it->second;
      sl.vp_pre = sl.vp_cur = vp_leaves(g, sl.vp_num);
      mg->vps.push_back(sl.vp_pre);
    }
  }

  InnerOptions inner_opt;
  inner_opt.include_theta = opt.include_theta;
  inner_opt.first_order = opt.first_order;
  inner_opt.surrogate = {ldim > 0 ? LatentPath::reparam : LatentPath::none,
                         SurrogateForm::score};

  const std::string iter_tag = std::to_string(state.iteration);
  std::vector<double> pre_eta(static_cast<size_t>(B), 0.0);

  for (int step = 0; step < opt.inner_steps; ++step) {
    const std::string tag = "pre/" + iter_tag + "/" + std::to_string(step);
    parallel_for(B, [&](int i) {
      TaskSlot& sl = slots[static_cast<size_t>(i)];
      sl.trajs = collect(sl.theta_num, sl.vp_num, batch[static_cast<size_t>(i)], rspec,
                         opt.episodes_pre, seed, tag);
    });
    for (int i = 0; i < B; ++i) {
      TaskSlot& sl = slots[static_cast<size_t>(i)];
      ReturnStats stats = compute_stats(sl.trajs, true, true);
      if (step == 0) pre_eta[static_cast<size_t>(i)] = stats.eta;
      AdaptedParams post = inner_update(g, sl.trajs, stats, sl.theta_cur,
                                        ldim > 0 ? &sl.vp_cur : nullptr, mg->sv, ldim, adim,
                                        inner_opt);
      sl.vp_cur = post.vp_post;
      sl.theta_cur = post.theta_post;
      if (ldim > 0) sl.vp_num = read_vp(g, sl.vp_cur);
      if (opt.include_theta) sl.theta_num = read_policy(g, sl.theta_cur, state.theta);
    }
  }

  // Post-update (or direct, when inner_steps == 0) objective batch.
  const std::string post_tag = "post/" + iter_tag;
  parallel_for(B, [&](int i) {
    TaskSlot& sl = slots[static_cast<size_t>(i)];
    sl.trajs = collect(sl.theta_num, sl.vp_num, batch[static_cast<size_t>(i)], rspec,
                       opt.episodes_post, seed, post_tag);
  });

  Var kl_rows_sum;
  long kl_row_count = 0;
  std::vector<double> post_eta(static_cast<size_t>(B), 0.0);
  for (int i = 0; i < B; ++i) {
    TaskSlot& sl = slots[static_cast<size_t>(i)];
    // No advantage normalization: each batch must contribute on the scale of
    // its actual returns, or bad post-update draws stop penalizing the step
    // sizes that caused them. The natural-gradient step is scale-invariant.
    ReturnStats stats = compute_stats(sl.trajs, true, false);
    post_eta[static_cast<size_t>(i)] = stats.eta;
    SurrogateAux aux;
    SurrogateOptions sopt{ldim > 0 ? LatentPath::reparam : LatentPath::none,
                          SurrogateForm::is_ratio};
    Var sur = reinforce_surrogate(g, sl.trajs, stats, sl.theta_cur,
                                  ldim > 0 ? &sl.vp_cur : nullptr, ldim, adim, sopt, &aux);
    mg->post_sum = mg->post_sum.valid() ? g.add(mg->post_sum, sur) : sur;

    Var log_std_new = sl.theta_cur.log_std;
    Tensor old_log_std = g.value(log_std_new);
    for (size_t t = 0; t < aux.means.size(); ++t) {
      Tensor old_mean = g.value(aux.means[t]);
      Var rows = gaussian_kl_rows(g, old_mean, old_log_std, aux.means[t], log_std_new, adim);
      Var rsum = g.sum(rows);
      kl_rows_sum = kl_rows_sum.valid() ? g.add(kl_rows_sum, rsum) : rsum;
      kl_row_count += old_mean.shape[0];
    }

    if (ldim > 0) {
      Var kl_i = kl_to_prior_node(g, sl.vp_pre);
      mg->kl_sum = mg->kl_sum.valid() ? g.add(mg->kl_sum, kl_i) : kl_i;
    }
  }
  if (!mg->kl_sum.valid()) mg->kl_sum = g.constant(Tensor::scalar(0.0));
  mg->total = g.sub(mg->post_sum, g.scale(mg->kl_sum, state.kl_weight));
  mg->kl_constraint = g.scale(kl_rows_sum, 1.0 / static_cast<double>(kl_row_count));

  if (!opt.freeze_theta) mg->params = mg->pv.all();
  // Step sizes enter the objective only through the inner update.
  if (opt.inner_steps > 0) {
    if (ldim > 0) {
      mg->params.push_back(mg->sv.alpha_mu);
      if (!opt.freeze_sigma) mg->params.push_back(mg->sv.alpha_sigma);
    }
    for (Var a : mg->sv.alpha_theta) mg->params.push_back(a);
  }
  for (const VpVars& vv : mg->vps) {
    mg->params.push_back(vv.mu);
    if (!opt.freeze_sigma) mg->params.push_back(vv.log_sigma);
  }

  double inv_b = 1.0 / static_cast<double>(B);
  mg->pre_return = std::accumulate(pre_eta.begin(), pre_eta.end(), 0.0) * inv_b;
  mg->post_return = std::accumulate(post_eta.begin(), post_eta.end(), 0.0) * inv_b;
  if (opt.inner_steps == 0) mg->pre_return = mg->post_return;
  return mg;
}

IterationStats meta_iteration(MetaState& state, const std::vector<TaskSpec>& batch,
                              const RewardSpec& rspec, const MetaIterOptions& opt,
                              uint64_t seed) {
  auto mg = build_meta_graph(state, batch, rspec, opt, seed);
  IterationStats st;
  st.iteration = state.iteration;
  st.pre_return = mg->pre_return;
  st.post_return = mg->post_return;
  st.kl_sum = mg->g.value(mg->kl_sum).item();

  TrustRegionReport rep = trust_region_step(mg->g, mg->total, mg->kl_constraint, mg->params,
                                            opt.trust);
  st.accepted = rep.accepted;
  st.cg_fallback = rep.cg_fallback;
  if (rep.accepted) {
    state.theta = read_policy(mg->g, mg->pv, state.theta);
    state.theta.clamp_log_std();
    state.steps = read_step_sizes(mg->g, mg->sv, state.steps);
    for (size_t i = 0; i < mg->vps.size(); ++i)
      state.vp_all[batch[i].task_id] = read_vp(mg->g, mg->vps[i]);
  }
  ++state.iteration;
  return st;
}

void save_checkpoint(const MetaState& state, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  save_policy(state.theta, dir + "/policy.json");
  std::vector<std::pair<int, VariationalParams>> vps(state.vp_all.begin(), state.vp_all.end());
  save_vp_manifest(vps, dir + "/vp.json");
  save_step_sizes(state.steps, dir + "/alpha.json");
  nlohmann::json meta{{"format", "maesn-meta-v1"},
                      {"iteration", state.iteration},
                      {"kl_weight", state.kl_weight}};
  std::ofstream out(dir + "/meta.json");
  if (!out) throw std::runtime_error("cannot write " + dir + "/meta.json");
  out << meta.dump(2) << "\n";
}

MetaState load_checkpoint(const std::string& dir) {
  MetaState state;
  state.theta = load_policy(dir + "/policy.json");
  for (auto& [id, vp] : load_vp_manifest(dir + "/vp.json")) state.vp_all[id] = vp;
  state.steps = load_step_sizes(dir + "/alpha.json");
  std::ifstream in(dir + "/meta.json");
  if (!in) throw std::runtime_error("cannot read " + dir + "/meta.json");
  nlohmann::json meta = nlohmann::json::parse(in);
  state.iteration = meta.at("iteration");
  state.kl_weight = meta.at("kl_weight");
  return state;
}

TrainResult meta_train(const TrainConfig& cfg) {
  namespace fs = std::filesystem;
  TrainResult res;
  RngStream init_rng(cfg.seed, "init");
  long sdim = obs_dim(cfg.family), adim = action_dim(cfg.family);
  res.state.theta = cfg.init_theta ? *cfg.init_theta
                                   : PolicyParams::init(sdim, cfg.latent_dim, adim, init_rng,
                                                        cfg.log_std_init, cfg.hidden);
  res.state.steps = StepSizes::init(cfg.latent_dim, cfg.alpha_init);
  if (cfg.iter.include_theta) {
    PolicyParams at = res.state.theta;
    for (auto& [name, t] : at.entries())
      for (double& x : t->v) x = cfg.alpha_init;
    res.state.steps.alpha_theta = std::move(at);
  }
  res.state.kl_weight = cfg.kl_weight;
  res.tasks = sample_tasks(cfg.family, cfg.n_train_tasks, "train", cfg.seed, RewardMode::dense,
                           cfg.horizon);
  if (cfg.latent_dim > 0)
    for (const TaskSpec& t : res.tasks)
      res.state.vp_all[t.task_id] = {Tensor::zeros({cfg.latent_dim}),
                                     Tensor::full({cfg.latent_dim}, cfg.vp_log_sigma_init)};

  RewardSpec rspec = RewardSpec::defaults(cfg.family);
  rspec.dense_offset = cfg.dense_offset;

  std::ofstream metrics;
  if (!cfg.out_dir.empty()) {
    fs::create_directories(cfg.out_dir);
    metrics.open(cfg.out_dir + "/metrics.csv");
    if (!metrics) throw std::runtime_error("cannot write " + cfg.out_dir + "/metrics.csv");
    metrics.precision(17);
    metrics << "iteration,pre_return,post_return,kl_sum,accepted,mode\n";
  }

  for (int k = 0; k < cfg.iterations; ++k) {
    std::vector<TaskSpec> batch;
    if (cfg.task_batch_size >= static_cast<int>(res.tasks.size())) {
      batch = res.tasks;
    } else {
      RngStream pick(cfg.seed, "task-batch", static_cast<uint64_t>(k));
      std::vector<int> idx(res.tasks.size());
      std::iota(idx.begin(), idx.end(), 0);
      for (int j = 0; j < cfg.task_batch_size; ++j) {
        int r = j + static_cast<int>(pick.uniform_int(idx.size() - static_cast<size_t>(j)));
        std::swap(idx[static_cast<size_t>(j)], idx[static_cast<size_t>(r)]);
        batch.push_back(res.tasks[static_cast<size_t>(idx[static_cast<size_t>(j)])]);
      }
    }
    IterationStats st;
    try {
      st = meta_iteration(res.state, batch, rspec, cfg.iter, cfg.seed);
    } catch (const std::exception& e) {
      res.aborted = true;
      if (!cfg.out_dir.empty()) {
        std::ofstream err(cfg.out_dir + "/error.txt");
        err << "aborted at iteration " << k << ": " << e.what() << "\n";
      }
      break;
    }
    res.history.push_back(st);
    if (metrics.is_open())
      metrics << st.iteration << "," << st.pre_return << "," << st.post_return << ","
              << st.kl_sum << "," << (st.accepted ? 1 : 0) << ",dense\n";
    if (!cfg.out_dir.empty() && cfg.checkpoint_every > 0 &&
        (k + 1) % cfg.checkpoint_every == 0)
      save_checkpoint(res.state, cfg.out_dir + "/ckpt_" + std::to_string(res.state.iteration));
  }
  if (!cfg.out_dir.empty())
    save_checkpoint(res.state, cfg.out_dir + "/ckpt_" + std::to_string(res.state.iteration));
  return res;
}

double endpoint_dispersion(const PolicyParams& theta, const TaskSpec& task,
                           const RewardSpec& rspec, int n_episodes, uint64_t seed,
                           bool sample_prior) {
  std::vector<std::pair<double, double>> ends;
  std::vector<double> mean, sd;
  for (int ep = 0; ep < n_episodes; ++ep) {
    RngStream lat(seed, "dispersion/latent", static_cast<uint64_t>(task.task_id),
                  static_cast<uint64_t>(ep));
    RngStream act(seed, "dispersion/action", static_cast<uint64_t>(task.task_id),
                  static_cast<uint64_t>(ep));
    std::vector<double> z(static_cast<size_t>(theta.latent_dim), 0.0);
    if (sample_prior)
      for (double& v : z) v = lat.normal();
    Env env(task, rspec);
    std::vector<double> obs = env.reset();
    std::vector<double> action(static_cast<size_t>(theta.action_dim));
    for (int t = 0; t < task.horizon; ++t) {
      action_dist(obs, z, theta, mean, sd);
      for (size_t k = 0; k < action.size(); ++k) action[k] = mean[k] + sd[k] * act.normal();
      obs = env.step(action).obs;
    }
    ends.push_back(env.body_position());
  }
  double total = 0;
  long pairs = 0;
  for (size_t i = 0; i < ends.size(); ++i)
    for (size_t j = i + 1; j < ends.size(); ++j) {
      total += std::hypot(ends[i].first - ends[j].first, ends[i].second - ends[j].second);
      ++pairs;
    }
  return pairs > 0 ? total / static_cast<double>(pairs) : 0.0;
}

}  // namespace maesn
