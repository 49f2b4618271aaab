#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fd_oracle.hpp"
#include "maesn/inner_adapt.hpp"

using namespace maesn;
using namespace maesn::testing;

namespace {

// Latent bandit with a fabricated reward R(z) = -||z - c||^2; actions ignored.
std::vector<Trajectory> latent_bandit_batch(const PolicyParams& p, const VariationalParams& vp,
                                            const double c[2], int n, uint64_t seed) {
  std::vector<Trajectory> out;
  RngStream lat(seed, "lb/latent"), act(seed, "lb/action");
  std::vector<double> mean, sd;
  for (int i = 0; i < n; ++i) {
    Trajectory tr;
    tr.z = sample_latent(vp, lat);
    tr.states = Tensor::zeros({1, p.state_dim});
    std::vector<double> s(static_cast<size_t>(p.state_dim), 0.0);
    std::vector<double> z(tr.z.z.v.begin(), tr.z.z.v.end());
    action_dist(s, z, p, mean, sd);
    tr.actions = Tensor::zeros({1, p.action_dim});
    for (long k = 0; k < p.action_dim; ++k)
      tr.actions.at(0, k) = mean[static_cast<size_t>(k)] + sd[static_cast<size_t>(k)] * act.normal();
    double d0 = tr.z.z.at(0) - c[0], d1 = tr.z.z.at(1) - c[1];
    tr.rewards = {-(d0 * d0 + d1 * d1)};
    tr.ret = tr.rewards[0];
    out.push_back(std::move(tr));
  }
  return out;
}

// Policy whose action mean equals z exactly: relu-split identity through both
// hidden layers (a_k = relu(z_k) - relu(-z_k)).
PolicyParams passthrough_policy(double log_std) {
  RngStream rng(0, "pp");
  PolicyParams p = PolicyParams::init(2, 2, 2, rng, log_std, 4);
  for (auto& [name, t] : p.entries())
    if (name != "log_std")
      for (double& x : t->v) x = 0.0;
  p.w1z.at(0, 0) = 1.0;
  p.w1z.at(0, 2) = -1.0;
  p.w1z.at(1, 1) = 1.0;
  p.w1z.at(1, 3) = -1.0;
  for (long k = 0; k < 4; ++k) p.w2.at(k, k) = 1.0;
  p.w3.at(0, 0) = 1.0;
  p.w3.at(1, 1) = 1.0;
  p.w3.at(2, 0) = -1.0;
  p.w3.at(3, 1) = -1.0;
  return p;
}

}  // namespace

TEST_CASE("inner_update: zero step sizes leave vp bitwise unchanged") {
  RngStream rng(1, "init");
  PolicyParams p = PolicyParams::init(2, 2, 2, rng);
  VariationalParams vp{Tensor::vector({0.3, -0.7}), Tensor::vector({0.1, -0.2})};
  auto tasks = sample_tasks(Family::point_nav, 1, "train", 3);
  auto trajs = collect(p, vp, tasks[0], RewardSpec::defaults(Family::point_nav), 4, 5, "pre");
  ReturnStats stats = compute_stats(trajs);

  Graph g;
  PolicyVars pv = policy_leaves(g, p);
  VpVars vv = vp_leaves(g, vp);
  StepVars sv = step_leaves(g, StepSizes::init(2, 0.0));
  AdaptedParams post = inner_update(g, trajs, stats, pv, &vv, sv, 2, 2);
  VariationalParams vp_post = read_vp(g, post.vp_post);
  for (long k = 0; k < 2; ++k) {
    CHECK(vp_post.mu.at(k) == vp.mu.at(k));
    CHECK(vp_post.log_sigma.at(k) == vp.log_sigma.at(k));
  }
}

TEST_CASE("inner_update: zero advantages give an exact no-op") {
  RngStream rng(2, "init");
  PolicyParams p = PolicyParams::init(2, 2, 2, rng);
  VariationalParams vp{Tensor::vector({0.5, 0.0}), Tensor::vector({0.0, 0.3})};
  auto tasks = sample_tasks(Family::point_nav, 1, "train", 3);
  auto trajs = collect(p, vp, tasks[0], RewardSpec::defaults(Family::point_nav), 4, 5, "pre");
  ReturnStats stats = compute_stats(trajs, true, false);
  for (auto& adv : stats.advantages)
    for (double& a : adv) a = 0.0;
  for (double& a : stats.traj_advantage) a = 0.0;

  Graph g;
  PolicyVars pv = policy_leaves(g, p);
  VpVars vv = vp_leaves(g, vp);
  StepVars sv = step_leaves(g, StepSizes::init(2, 0.1));
  AdaptedParams post = inner_update(g, trajs, stats, pv, &vv, sv, 2, 2);
  VariationalParams vp_post = read_vp(g, post.vp_post);
  for (long k = 0; k < 2; ++k) {
    CHECK(vp_post.mu.at(k) == vp.mu.at(k));
    CHECK(vp_post.log_sigma.at(k) == vp.log_sigma.at(k));
  }
}

TEST_CASE("inner_update: theta untouched by default, adapted when enabled") {
  RngStream rng(3, "init");
  PolicyParams p = PolicyParams::init(2, 2, 2, rng);
  VariationalParams vp = VariationalParams::prior(2);
  auto tasks = sample_tasks(Family::point_nav, 1, "train", 8);
  auto trajs = collect(p, vp, tasks[0], RewardSpec::defaults(Family::point_nav), 6, 5, "pre");
  ReturnStats stats = compute_stats(trajs);

  Graph g;
  PolicyVars pv = policy_leaves(g, p);
  VpVars vv = vp_leaves(g, vp);
  StepSizes ss = StepSizes::init(2, 0.1);
  StepVars sv = step_leaves(g, ss);
  AdaptedParams post = inner_update(g, trajs, stats, pv, &vv, sv, 2, 2);
  PolicyParams theta_post = read_policy(g, post.theta_post, p);
  CHECK(post.theta_post.w3.id == pv.w3.id);  // same nodes, not a copy
  for (long i = 0; i < p.w3.size(); ++i) CHECK(theta_post.w3.v[i] == p.w3.v[i]);

  Graph g2;
  PolicyVars pv2 = policy_leaves(g2, p);
  VpVars vv2 = vp_leaves(g2, vp);
  StepSizes ss2 = ss;
  ss2.alpha_theta = p;  // reuse the layout
  for (auto& [name, t] : ss2.alpha_theta->entries())
    for (double& x : t->v) x = 0.05;
  StepVars sv2 = step_leaves(g2, ss2);
  InnerOptions opt;
  opt.include_theta = true;
  AdaptedParams post2 = inner_update(g2, trajs, stats, pv2, &vv2, sv2, 2, 2, opt);
  PolicyParams theta_post2 = read_policy(g2, post2.theta_post, p);
  double moved = 0;
  for (long i = 0; i < p.w3.size(); ++i) moved += std::abs(theta_post2.w3.v[i] - p.w3.v[i]);
  CHECK(moved > 0.0);
}

TEST_CASE("inner_update quadratic latent bandit: step matches the analytic gradient") {
  // R(z) = -||z - c||^2 reaches the likelihood-ratio path only; the analytic
  // gradient at vp is dE[R]/dmu = -2 (mu - c) and dE[R]/dlog_sigma = -2 sigma^2.
  PolicyParams p = passthrough_policy(-1.0);
  VariationalParams vp{Tensor::vector({0.2, -0.4}), Tensor::vector({0.0, 0.0})};
  const double c[2] = {1.0, -1.5};
  auto trajs = latent_bandit_batch(p, vp, c, 20000, 11);
  ReturnStats stats = compute_stats(trajs, true, false);

  Graph g;
  PolicyVars pv = policy_leaves(g, p);
  VpVars vv = vp_leaves(g, vp);
  StepVars sv = step_leaves(g, StepSizes::init(2, 0.1));
  InnerOptions opt;
  opt.surrogate = {LatentPath::likelihood_ratio, SurrogateForm::score};
  AdaptedParams post = inner_update(g, trajs, stats, pv, &vv, sv, 2, 2, opt);
  VariationalParams vp_post = read_vp(g, post.vp_post);

  double dot = 0;
  for (long k = 0; k < 2; ++k) dot += (vp_post.mu.at(k) - vp.mu.at(k)) * (c[k] - vp.mu.at(k));
  CHECK(dot > 0.0);  // moved strictly toward c
  for (long k = 0; k < 2; ++k) {
    double analytic_mu = vp.mu.at(k) + 0.1 * (-2.0 * (vp.mu.at(k) - c[k]));
    CHECK(vp_post.mu.at(k) == doctest::Approx(analytic_mu).epsilon(0.15));
    double sig2 = std::exp(2.0 * vp.log_sigma.at(k));
    double analytic_ls = vp.log_sigma.at(k) + 0.1 * (-2.0 * sig2);
    CHECK(vp_post.log_sigma.at(k) == doctest::Approx(analytic_ls).epsilon(0.25));
  }
}

TEST_CASE("inner_update differentiability: adapted vp derivatives match finite differences") {
  // Tiny setting: 2-dim state, horizon 3, two episodes, frozen in the graph.
  RngStream rng(7, "init");
  PolicyParams p = PolicyParams::init(2, 2, 2, rng, -0.5, 4);
  VariationalParams vp{Tensor::vector({0.2, -0.1}), Tensor::vector({-0.1, 0.2})};
  auto tasks = sample_tasks(Family::point_nav, 1, "train", 9, RewardMode::dense, 3);
  auto trajs = collect(p, vp, tasks[0], RewardSpec::defaults(Family::point_nav), 2, 13, "pre");
  ReturnStats stats = compute_stats(trajs, true, false);

  for (bool include_theta : {false, true}) {
    Graph g;
    PolicyVars pv = policy_leaves(g, p);
    VpVars vv = vp_leaves(g, vp);
    StepSizes ss = StepSizes::init(2, 0.1);
    if (include_theta) {
      ss.alpha_theta = p;
      for (auto& [name, t] : ss.alpha_theta->entries())
        for (double& x : t->v) x = 0.03;
    }
    StepVars sv = step_leaves(g, ss);
    InnerOptions opt;
    opt.include_theta = include_theta;
    AdaptedParams post = inner_update(g, trajs, stats, pv, &vv, sv, 2, 2, opt);

    // Scalar probe: fixed random projection of (mu', log_sigma').
    RngStream wr(21, "probe");
    Tensor w = Tensor::zeros({2});
    for (long k = 0; k < 2; ++k) w.at(k) = wr.uniform(-1, 1);
    Var probe = g.add(g.sum(g.mul(post.vp_post.mu, g.constant(w))),
                      g.sum(g.mul(post.vp_post.log_sigma, g.constant(w))));

    std::vector<std::pair<const char*, Var>> leaves = {
        {"mu", vv.mu},       {"log_sigma", vv.log_sigma}, {"alpha_mu", sv.alpha_mu},
        {"alpha_sigma", sv.alpha_sigma}, {"w3", pv.w3},   {"b1", pv.b1},
        {"log_std", pv.log_std}};
    for (auto [name, leaf] : leaves) {
      auto gr = g.grad(probe, std::vector<Var>{leaf});
      Tensor ad = g.value(gr[0]);
      Tensor fd = fd_grad(g, probe, leaf, 1e-5);
      INFO("leaf ", name, " include_theta ", include_theta);
      CHECK(max_rel_diff(ad, fd, 1e-6) < 1e-4);
    }
  }
}

TEST_CASE("inner_update: first-order mode zeroes second-order pathways only") {
  RngStream rng(8, "init");
  PolicyParams p = PolicyParams::init(2, 2, 2, rng, -0.5, 4);
  VariationalParams vp{Tensor::vector({0.1, 0.2}), Tensor::vector({0.0, -0.1})};
  auto tasks = sample_tasks(Family::point_nav, 1, "train", 9, RewardMode::dense, 3);
  auto trajs = collect(p, vp, tasks[0], RewardSpec::defaults(Family::point_nav), 3, 13, "pre");
  ReturnStats stats = compute_stats(trajs, true, false);

  double post_vals[2], d_dmu[2];
  for (int mode = 0; mode < 2; ++mode) {
    Graph g;
    PolicyVars pv = policy_leaves(g, p);
    VpVars vv = vp_leaves(g, vp);
    StepVars sv = step_leaves(g, StepSizes::init(2, 0.1));
    InnerOptions opt;
    opt.first_order = (mode == 1);
    AdaptedParams post = inner_update(g, trajs, stats, pv, &vv, sv, 2, 2, opt);
    Var probe = g.sum(post.vp_post.mu);
    post_vals[mode] = g.value(probe).item();
    auto gr = g.grad(probe, std::vector<Var>{vv.mu});
    d_dmu[mode] = g.value(gr[0]).at(0);
  }
  CHECK(post_vals[0] == post_vals[1]);  // same forward value
  // First-order: d(mu + alpha*g)/dmu = identity exactly when g is detached.
  CHECK(d_dmu[1] == doctest::Approx(1.0));
  CHECK(d_dmu[0] != doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("inner_update: non-finite gradient rejected with the group named") {
  RngStream rng(9, "init");
  PolicyParams p = PolicyParams::init(2, 2, 2, rng);
  VariationalParams vp{Tensor::vector({0.0, 0.0}), Tensor::vector({400.0, 0.0})};  // exp overflows
  auto tasks = sample_tasks(Family::point_nav, 1, "train", 3);
  VariationalParams sane = VariationalParams::prior(2);
  auto trajs = collect(p, sane, tasks[0], RewardSpec::defaults(Family::point_nav), 2, 5, "pre");
  ReturnStats stats = compute_stats(trajs);

  Graph g;
  PolicyVars pv = policy_leaves(g, p);
  VpVars vv = vp_leaves(g, vp);
  StepVars sv = step_leaves(g, StepSizes::init(2, 0.1));
  try {
    (void)inner_update(g, trajs, stats, pv, &vv, sv, 2, 2);
    FAIL("expected non-finite gradient rejection");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("parameter group") != std::string::npos);
  }
}

TEST_CASE("metatest_adapt: zero iterations yield the prior exactly") {
  PolicyParams p = passthrough_policy(-1.0);
  StepSizes ss = StepSizes::init(2, 0.1);
  auto tasks = sample_tasks(Family::bandit2d, 1, "validation", 4, RewardMode::sparse);
  auto trace = metatest_adapt(p, ss, tasks[0], RewardSpec::defaults(Family::bandit2d), 0, 10, 3);
  REQUIRE(trace.vps.size() == 1);
  CHECK(trace.mean_returns.empty());
  for (long k = 0; k < 2; ++k) {
    CHECK(trace.vps[0].mu.at(k) == 0.0);
    CHECK(trace.vps[0].log_sigma.at(k) == 0.0);
  }
}

TEST_CASE("metatest_adapt: sparse tasks never evaluate the dense reward") {
  PolicyParams p = passthrough_policy(-1.0);
  StepSizes ss = StepSizes::init(2, 0.05);
  auto tasks = sample_tasks(Family::point_nav, 1, "validation", 4, RewardMode::sparse);
  Env::Counters counters;
  auto trace = metatest_adapt(p, ss, tasks[0], RewardSpec::defaults(Family::point_nav), 3, 5, 3,
                              std::nullopt, &counters);
  CHECK(counters.dense_evals == 0);
  CHECK(counters.sparse_evals == 3 * 5 * tasks[0].horizon);
  CHECK(trace.mean_returns.size() == 3);
}

TEST_CASE("metatest_adapt: identical seed and checkpoint give identical traces") {
  PolicyParams p = passthrough_policy(-1.0);
  StepSizes ss = StepSizes::init(2, 0.1);
  auto tasks = sample_tasks(Family::bandit2d, 1, "validation", 6, RewardMode::sparse);
  auto a = metatest_adapt(p, ss, tasks[0], RewardSpec::defaults(Family::bandit2d), 10, 10, 42);
  auto b = metatest_adapt(p, ss, tasks[0], RewardSpec::defaults(Family::bandit2d), 10, 10, 42);
  REQUIRE(a.mean_returns.size() == b.mean_returns.size());
  for (size_t i = 0; i < a.mean_returns.size(); ++i)
    CHECK(a.mean_returns[i] == b.mean_returns[i]);
}

TEST_CASE("metatest_adapt converges on the dense latent bandit") {
  // Passthrough policy: action mean == z, so the dense bandit reward is
  // -||z + noise - goal||^2, maximized at mu = goal.
  // Moderate action noise: the per-action score factor scales like 1/sigma_a,
  // so a very tight action distribution would drown the latent signal.
  PolicyParams p = passthrough_policy(-1.0);
  StepSizes ss = StepSizes::init(2, 0.1);
  auto tasks = sample_tasks(Family::bandit2d, 1, "validation", 8, RewardMode::dense);
  auto trace =
      metatest_adapt(p, ss, tasks[0], RewardSpec::defaults(Family::bandit2d), 200, 100, 17);
  const VariationalParams& last = trace.vps.back();
  double d = std::hypot(last.mu.at(0) - tasks[0].goal[0], last.mu.at(1) - tasks[0].goal[1]);
  CHECK(d < 0.1);
}

TEST_CASE("adaptation trace CSV schema") {
  PolicyParams p = passthrough_policy(-1.0);
  StepSizes ss = StepSizes::init(2, 0.1);
  auto tasks = sample_tasks(Family::bandit2d, 1, "validation", 6, RewardMode::sparse);
  auto trace = metatest_adapt(p, ss, tasks[0], RewardSpec::defaults(Family::bandit2d), 5, 4, 42);
  auto path = std::filesystem::temp_directory_path() / "maesn_adapt_trace.csv";
  write_adapt_trace(trace, path.string());
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "iteration,mean_return,mu0,mu1,log_sigma0,log_sigma1");
  int rows = 0;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 5);
  std::filesystem::remove(path);
}
