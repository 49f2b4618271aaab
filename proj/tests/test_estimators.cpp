#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "fd_oracle.hpp"
#include "maesn/estimators.hpp"
#include "stat_util.hpp"

using namespace maesn;
using namespace maesn::testing;

namespace {

PolicyParams zeroed_policy(long sdim, long ldim, long adim, double log_std = 0.0) {
  RngStream rng(0, "zero");
  PolicyParams p = PolicyParams::init(sdim, ldim, adim, rng, log_std);
  for (auto& [name, t] : p.entries())
    if (name != "log_std")
      for (double& x : t->v) x = 0.0;
  return p;
}

// Fabricated 1-step trajectories for the bandit oracles (no environment).
std::vector<Trajectory> bandit_batch(const PolicyParams& p, const VariationalParams& vp,
                                     int n, uint64_t seed,
                                     double (*reward)(double a, double z0)) {
  std::vector<Trajectory> out;
  RngStream lat(seed, "bandit/latent"), act(seed, "bandit/action");
  std::vector<double> mean, sd;
  for (int i = 0; i < n; ++i) {
    Trajectory tr;
    tr.z = p.latent_dim > 0 ? sample_latent(vp, lat)
                            : LatentSample{Tensor::zeros({0}), Tensor::zeros({0})};
    tr.states = Tensor::zeros({1, p.state_dim});
    std::vector<double> s(static_cast<size_t>(p.state_dim), 0.0);
    std::vector<double> z(tr.z.z.v.begin(), tr.z.z.v.end());
    action_dist(s, z, p, mean, sd);
    double a = mean[0] + sd[0] * act.normal();
    tr.actions = Tensor::matrix(1, 1, {a});
    double r = reward(a, p.latent_dim > 0 ? tr.z.z.at(0) : 0.0);
    tr.rewards = {r};
    tr.ret = r;
    out.push_back(std::move(tr));
  }
  return out;
}

}  // namespace

TEST_CASE("collect: episode count, distinct z draws, determinism") {
  RngStream rng(1, "init");
  PolicyParams p = PolicyParams::init(2, 2, 2, rng);
  VariationalParams vp = VariationalParams::prior(2);
  auto tasks = sample_tasks(Family::point_nav, 1, "train", 3);
  auto trajs = collect(p, vp, tasks[0], RewardSpec::defaults(Family::point_nav), 20, 7, "pre");
  CHECK(trajs.size() == 20);
  std::set<double> zs;
  for (const auto& t : trajs) zs.insert(t.z.z.at(0));
  CHECK(zs.size() == 20);

  auto again = collect(p, vp, tasks[0], RewardSpec::defaults(Family::point_nav), 20, 7, "pre");
  for (size_t i = 0; i < trajs.size(); ++i) CHECK(trajs[i].ret == again[i].ret);  // bit-identical
}

TEST_CASE("collect: degenerate latent keeps z at mu") {
  RngStream rng(2, "init");
  PolicyParams p = PolicyParams::init(2, 2, 2, rng);
  VariationalParams vp{Tensor::vector({0.4, -0.2}), Tensor::full({2}, std::log(1e-8))};
  auto tasks = sample_tasks(Family::point_nav, 1, "train", 3);
  auto trajs = collect(p, vp, tasks[0], RewardSpec::defaults(Family::point_nav), 10, 7, "pre");
  for (const auto& t : trajs) {
    CHECK(std::abs(t.z.z.at(0) - 0.4) < 1e-6);
    CHECK(std::abs(t.z.z.at(1) + 0.2) < 1e-6);
  }
}

TEST_CASE("baseline: identical trajectories give zero advantages") {
  Trajectory tr;
  tr.states = Tensor::zeros({3, 2});
  tr.actions = Tensor::zeros({3, 2});
  tr.rewards = {1.0, 2.0, 3.0};
  tr.ret = 6.0;
  std::vector<Trajectory> batch{tr, tr, tr};
  ReturnStats s = compute_stats(batch, true, false);
  for (const auto& adv : s.advantages)
    for (double a : adv) CHECK(a == 0.0);
}

TEST_CASE("baseline: single-timestep batch baseline equals batch mean return") {
  std::vector<Trajectory> batch;
  for (double r : {1.0, 3.0}) {
    Trajectory tr;
    tr.states = Tensor::zeros({1, 1});
    tr.actions = Tensor::zeros({1, 1});
    tr.rewards = {r};
    tr.ret = r;
    batch.push_back(tr);
  }
  ReturnStats s = compute_stats(batch, true, false);
  CHECK(s.baseline[0] == 2.0);
  CHECK(s.advantages[0][0] == -1.0);
  CHECK(s.advantages[1][0] == 1.0);
}

TEST_CASE("advantage normalization yields near-zero mean") {
  RngStream rng(3, "init");
  PolicyParams p = PolicyParams::init(2, 2, 2, rng);
  VariationalParams vp = VariationalParams::prior(2);
  auto tasks = sample_tasks(Family::point_nav, 1, "train", 4);
  auto trajs = collect(p, vp, tasks[0], RewardSpec::defaults(Family::point_nav), 8, 5, "pre");
  ReturnStats s = compute_stats(trajs, true, true);
  double mean = 0;
  long n = 0;
  for (const auto& adv : s.advantages)
    for (double a : adv) {
      mean += a;
      ++n;
    }
  CHECK(std::abs(mean / n) < 1e-10);
}

TEST_CASE("surrogate: zero advantages give exactly zero gradients everywhere") {
  RngStream rng(5, "init");
  PolicyParams p = PolicyParams::init(2, 2, 2, rng);
  VariationalParams vp = VariationalParams::prior(2);
  auto tasks = sample_tasks(Family::point_nav, 1, "train", 6);
  auto trajs = collect(p, vp, tasks[0], RewardSpec::defaults(Family::point_nav), 4, 5, "pre");
  ReturnStats s = compute_stats(trajs, true, false);
  for (auto& adv : s.advantages)
    for (double& a : adv) a = 0.0;
  for (double& a : s.traj_advantage) a = 0.0;

  for (LatentPath lp : {LatentPath::reparam, LatentPath::likelihood_ratio}) {
    Graph g;
    PolicyVars pv = policy_leaves(g, p);
    VpVars vv = vp_leaves(g, vp);
    Var sur = reinforce_surrogate(g, trajs, s, pv, &vv, 2, 2, {lp, SurrogateForm::score});
    std::vector<Var> wrt = pv.all();
    wrt.push_back(vv.mu);
    wrt.push_back(vv.log_sigma);
    auto grads = g.grad(sur, wrt);
    for (Var gr : grads)
      for (double x : g.value(gr).v) CHECK(x == 0.0);
  }
}

TEST_CASE("surrogate: empty batch rejected") {
  Graph g;
  RngStream rng(5, "init");
  PolicyParams p = PolicyParams::init(2, 2, 2, rng);
  PolicyVars pv = policy_leaves(g, p);
  ReturnStats s;
  CHECK_THROWS_AS(
      (void)reinforce_surrogate(g, {}, s, pv, nullptr, 0, 2, {LatentPath::none}),
      std::invalid_argument);
}

TEST_CASE("bandit oracle: surrogate gradient wrt action mean matches analytic REINFORCE") {
  // 1-D bandit: mean = b3 bias (zero network), R(a) = -(a - c)^2.
  // Analytic: d/dm E[R] = -2 (m - c).
  PolicyParams p = zeroed_policy(1, 0, 1, 0.0);
  p.b3.at(0) = 0.3;
  const double c = 1.1;
  VariationalParams vp = VariationalParams::prior(0);
  auto trajs = bandit_batch(p, vp, 10000, 99, [](double a, double) {
    double d = a - 1.1;
    return -d * d;
  });
  ReturnStats s = compute_stats(trajs, false, false);

  Graph g;
  PolicyVars pv = policy_leaves(g, p);
  Var sur = reinforce_surrogate(g, trajs, s, pv, nullptr, 0, 1, {LatentPath::none});
  auto gr = g.grad(sur, std::vector<Var>{pv.b3});
  double est = g.value(gr[0]).at(0);

  // standard error of the per-episode score-function terms
  double m = 0, m2 = 0;
  for (const auto& tr : trajs) {
    double term = tr.rewards[0] * (tr.actions.at(0, 0) - p.b3.at(0));  // sigma = 1
    m += term;
    m2 += term * term;
  }
  double n = static_cast<double>(trajs.size());
  m /= n;
  double se = std::sqrt((m2 / n - m * m) / n);
  double analytic = -2.0 * (p.b3.at(0) - c);
  CHECK(std::abs(est - analytic) < 2.0 * se);
}

TEST_CASE("baseline subtraction leaves the bandit estimator unbiased") {
  PolicyParams p = zeroed_policy(1, 0, 1, 0.0);
  p.b3.at(0) = 0.2;
  VariationalParams vp = VariationalParams::prior(0);
  auto reward = [](double a, double) {
    double d = a - 0.9;
    return -d * d;
  };
  double with_b = 0, without_b = 0, var_acc = 0;
  const int resamples = 200, batch = 64;
  std::vector<double> diffs;
  for (int r = 0; r < resamples; ++r) {
    auto trajs = bandit_batch(p, vp, batch, 1000 + static_cast<uint64_t>(r), reward);
    for (bool use_b : {true, false}) {
      ReturnStats s = compute_stats(trajs, use_b, false);
      Graph g;
      PolicyVars pv = policy_leaves(g, p);
      Var sur = reinforce_surrogate(g, trajs, s, pv, nullptr, 0, 1, {LatentPath::none});
      auto gr = g.grad(sur, std::vector<Var>{pv.b3});
      (use_b ? with_b : without_b) += g.value(gr[0]).at(0);
    }
  }
  with_b /= resamples;
  without_b /= resamples;
  // per-resample spread for the SE of the difference of means
  for (int r = 0; r < 20; ++r) {
    auto trajs = bandit_batch(p, vp, batch, 5000 + static_cast<uint64_t>(r), reward);
    ReturnStats s = compute_stats(trajs, false, false);
    Graph g;
    PolicyVars pv = policy_leaves(g, p);
    Var sur = reinforce_surrogate(g, trajs, s, pv, nullptr, 0, 1, {LatentPath::none});
    auto gr = g.grad(sur, std::vector<Var>{pv.b3});
    double v = g.value(gr[0]).at(0);
    var_acc += v * v;
    diffs.push_back(v);
  }
  double mean_est = 0;
  for (double d : diffs) mean_est += d;
  mean_est /= diffs.size();
  double var = 0;
  for (double d : diffs) var += (d - mean_est) * (d - mean_est);
  var /= diffs.size();
  double se_diff = std::sqrt(2.0 * var / resamples);
  CHECK(std::abs(with_b - without_b) < 3.0 * se_diff);
}

TEST_CASE("likelihood_ratio_grad: hand case and constant-return zero") {
  VariationalParams vp = VariationalParams::prior(2);
  std::vector<Trajectory> trajs(2);
  trajs[0].z = {Tensor::vector({1, 0}), Tensor::vector({1, 0})};
  trajs[0].rewards = {1.0};
  trajs[0].ret = 1.0;
  trajs[0].states = Tensor::zeros({1, 1});
  trajs[0].actions = Tensor::zeros({1, 1});
  trajs[1] = trajs[0];
  trajs[1].z = {Tensor::vector({-1, 0}), Tensor::vector({-1, 0})};
  trajs[1].rewards = {0.0};
  trajs[1].ret = 0.0;

  // no baseline: grad_mu = mean(z * R) = (0.5, 0)
  ReturnStats s = compute_stats(trajs, false, false);
  auto [gmu, gls] = likelihood_ratio_grad(trajs, s, vp);
  CHECK(gmu.at(0) == doctest::Approx(0.5));
  CHECK(gmu.at(1) == doctest::Approx(0.0));

  // constant returns with baseline: gradient exactly zero
  trajs[1].rewards = {1.0};
  trajs[1].ret = 1.0;
  ReturnStats s2 = compute_stats(trajs, true, false);
  auto [gmu2, gls2] = likelihood_ratio_grad(trajs, s2, vp);
  CHECK(gmu2.at(0) == 0.0);
  CHECK(gls2.at(0) == 0.0);
}

TEST_CASE("likelihood_ratio_grad: sigma underflow rejected") {
  VariationalParams vp{Tensor::vector({0, 0}), Tensor::full({2}, std::log(1e-9))};
  std::vector<Trajectory> trajs(2);
  for (auto& t : trajs) {
    t.z = {Tensor::vector({0, 0}), Tensor::vector({0, 0})};
    t.rewards = {1.0};
    t.states = Tensor::zeros({1, 1});
    t.actions = Tensor::zeros({1, 1});
  }
  ReturnStats s = compute_stats(trajs, false, false);
  CHECK_THROWS_AS((void)likelihood_ratio_grad(trajs, s, vp), std::invalid_argument);
}

TEST_CASE("surrogate in LR mode reproduces likelihood_ratio_grad exactly") {
  RngStream rng(7, "init");
  PolicyParams p = PolicyParams::init(2, 2, 2, rng);
  VariationalParams vp{Tensor::vector({0.2, -0.1}), Tensor::vector({0.1, -0.2})};
  auto tasks = sample_tasks(Family::point_nav, 1, "train", 8);
  auto trajs = collect(p, vp, tasks[0], RewardSpec::defaults(Family::point_nav), 16, 9, "pre");
  ReturnStats s = compute_stats(trajs, true, true);

  Graph g;
  PolicyVars pv = policy_constants(g, p);
  VpVars vv = vp_leaves(g, vp);
  Var sur =
      reinforce_surrogate(g, trajs, s, pv, &vv, 2, 2, {LatentPath::likelihood_ratio});
  auto grads = g.grad(sur, std::vector<Var>{vv.mu, vv.log_sigma});
  auto [gmu, gls] = likelihood_ratio_grad(trajs, s, vp);
  CHECK(max_abs_diff(g.value(grads[0]), gmu) < 1e-10);
  CHECK(max_abs_diff(g.value(grads[1]), gls) < 1e-10);
}

TEST_CASE("LR and reparameterized latent gradients agree on the quadratic latent bandit") {
  // R(z) = -||z - c||^2; analytic grad wrt mu is -2 (mu - c),
  // wrt log_sigma is -2 sigma^2 (per dim).
  const double cx = 0.7, cy = -0.4;
  VariationalParams vp{Tensor::vector({0.1, 0.2}), Tensor::vector({-0.2, 0.1})};
  const int n = 20000;
  RngStream rng(11, "latent");
  std::vector<Trajectory> trajs(n);
  for (auto& t : trajs) {
    t.z = sample_latent(vp, rng);
    double dx = t.z.z.at(0) - cx, dy = t.z.z.at(1) - cy;
    t.rewards = {-(dx * dx + dy * dy)};
    t.ret = t.rewards[0];
    t.states = Tensor::zeros({1, 1});
    t.actions = Tensor::zeros({1, 1});
  }
  ReturnStats s = compute_stats(trajs, true, false);
  auto [lr_mu, lr_ls] = likelihood_ratio_grad(trajs, s, vp);

  // reparameterized: build R directly on z(mu, log_sigma) with the same eps
  Graph g;
  VpVars vv = vp_leaves(g, vp);
  Var total;
  for (int i = 0; i < n; i += 1) {
    Var eps = g.constant(Tensor({1, 2}, trajs[static_cast<size_t>(i)].z.epsilon.v));
    Var z = g.add(g.reshape(vv.mu, {1, 2}), g.mul(g.exp_(g.reshape(vv.log_sigma, {1, 2})), eps));
    Var d = g.sub(z, g.constant(Tensor::matrix(1, 2, {cx, cy})));
    Var r = g.neg(g.sum(g.square(d)));
    total = total.valid() ? g.add(total, r) : r;
  }
  Var obj = g.scale(total, 1.0 / n);
  auto grads = g.grad(obj, std::vector<Var>{vv.mu, vv.log_sigma});

  double analytic_mu[2] = {-2 * (0.1 - cx), -2 * (0.2 - cy)};
  double analytic_ls[2] = {-2 * std::exp(2 * -0.2), -2 * std::exp(2 * 0.1)};
  // generous 3-sigma style bands from the LR estimator spread
  for (long k = 0; k < 2; ++k) {
    CHECK(std::abs(g.value(grads[0]).at(k) - analytic_mu[k]) < 0.1);
    CHECK(std::abs(lr_mu.at(k) - analytic_mu[k]) < 0.15);
    CHECK(std::abs(g.value(grads[1]).at(k) - analytic_ls[k]) < 0.1);
    CHECK(std::abs(lr_ls.at(k) - analytic_ls[k]) < 0.3);
  }
}

TEST_CASE("kl_to_prior: closed form, zero at prior, positivity, MC agreement") {
  CHECK(kl_to_prior(VariationalParams::prior(3)) == 0.0);
  VariationalParams vp{Tensor::vector({1, 0}), Tensor::vector({0, 0})};
  CHECK(kl_to_prior(vp) == doctest::Approx(0.5));

  RngStream rng(13, "kl");
  for (int rep = 0; rep < 10; ++rep) {
    VariationalParams r{Tensor::vector({rng.uniform(-2, 2), rng.uniform(-2, 2)}),
                        Tensor::vector({std::log(rng.uniform(0.3, 3.0)),
                                        std::log(rng.uniform(0.3, 3.0))})};
    double kl = kl_to_prior(r);
    CHECK(kl > 0.0);
    RngStream s(100 + static_cast<uint64_t>(rep), "kl-mc");
    double mc = mc_kl_to_prior(r, 100000, s);
    CHECK(std::abs(kl - mc) < 1e-2);
  }

  // graph node agrees with the closed form and differentiates
  Graph g;
  VpVars vv = vp_leaves(g, vp);
  Var node = kl_to_prior_node(g, vv);
  CHECK(g.value(node).item() == doctest::Approx(0.5));
  auto gr = g.grad(node, std::vector<Var>{vv.mu});
  CHECK(g.value(gr[0]).at(0) == doctest::Approx(1.0));  // d/dmu = mu
}

TEST_CASE("gaussian_kl_rows: zero for identical dists, matches hand value") {
  Graph g;
  Tensor old_mean = Tensor::matrix(2, 1, {0.3, -0.4});
  Tensor old_ls = Tensor::vector({0.1});
  Var nm = g.leaf(old_mean);
  Var nls = g.leaf(old_ls);
  Var kl = gaussian_kl_rows(g, old_mean, old_ls, nm, nls, 1);
  CHECK(g.value(kl).at(0, 0) == doctest::Approx(0.0).epsilon(1e-12));

  g.set_value(nm, Tensor::matrix(2, 1, {0.8, -0.4}));
  // KL for mean shift 0.5, same sigma: 0.5 * (0.5/sigma)^2
  double sig = std::exp(0.1);
  CHECK(g.value(kl).at(0, 0) == doctest::Approx(0.5 * 0.25 / (sig * sig)));
  CHECK(g.value(kl).at(1, 0) == doctest::Approx(0.0));
}

TEST_CASE("trajectory dump writes one JSON line per episode") {
  RngStream rng(17, "init");
  PolicyParams p = PolicyParams::init(2, 2, 2, rng);
  VariationalParams vp = VariationalParams::prior(2);
  auto tasks = sample_tasks(Family::point_nav, 1, "train", 8);
  auto trajs = collect(p, vp, tasks[0], RewardSpec::defaults(Family::point_nav), 5, 9, "pre");
  auto path = std::filesystem::temp_directory_path() / "maesn_test_trajs.jsonl";
  dump_trajectories(trajs, path.string());
  std::ifstream in(path);
  std::string line;
  int count = 0;
  while (std::getline(in, line))
    if (!line.empty()) ++count;
  CHECK(count == 5);
  std::filesystem::remove(path);
}
