// Microbenchmarks for the hot paths: graph construction/evaluation/gradients,
// environment stepping, episode collection, and one full meta-iteration.

#include <benchmark/benchmark.h>

#include "maesn/meta_opt.hpp"

using namespace maesn;

namespace {

PolicyParams bench_policy(long hidden) {
  RngStream rng(0, "bench-init");
  return PolicyParams::init(obs_dim(Family::point_nav), 2, action_dim(Family::point_nav), rng,
                            -0.5, hidden);
}

std::vector<Trajectory> bench_batch(const PolicyParams& p, int episodes) {
  auto tasks = sample_tasks(Family::point_nav, 1, "train", 1, RewardMode::dense, 25);
  return collect(p, VariationalParams::prior(2), tasks[0],
                 RewardSpec::defaults(Family::point_nav), episodes, 2, "bench");
}

void BM_graph_policy_forward(benchmark::State& state) {
  PolicyParams p = bench_policy(state.range(0));
  Tensor states = Tensor::zeros({25, p.state_dim});
  Tensor zt = Tensor::zeros({1, 2});
  Graph g;
  PolicyVars pv = policy_leaves(g, p);
  Var s = g.constant(states);
  Var z = g.leaf(zt);
  Var mean = policy_mean_graph(g, pv, s, z, 2);
  Var out = g.sum(mean);
  for (auto _ : state) {
    g.set_value(z, zt);  // dirty the graph so evaluation reruns
    benchmark::DoNotOptimize(g.value(out).item());
  }
}
BENCHMARK(BM_graph_policy_forward)->Arg(16)->Arg(100);

void BM_graph_surrogate_grad(benchmark::State& state) {
  PolicyParams p = bench_policy(16);
  auto trajs = bench_batch(p, static_cast<int>(state.range(0)));
  ReturnStats stats = compute_stats(trajs);
  VariationalParams vp = VariationalParams::prior(2);
  for (auto _ : state) {
    Graph g;
    PolicyVars pv = policy_leaves(g, p);
    VpVars vv = vp_leaves(g, vp);
    Var sur = reinforce_surrogate(g, trajs, stats, pv, &vv, 2, p.action_dim);
    auto grads = g.grad(sur, std::vector<Var>{vv.mu, vv.log_sigma});
    benchmark::DoNotOptimize(g.value(grads[0]).at(0));
  }
}
BENCHMARK(BM_graph_surrogate_grad)->Arg(5)->Arg(20);

void BM_env_step(benchmark::State& state) {
  auto tasks = sample_tasks(Family::point_nav, 1, "train", 1, RewardMode::dense, 25);
  Env env(tasks[0]);
  env.reset();
  std::vector<double> a{0.3, -0.2};
  for (auto _ : state) {
    benchmark::DoNotOptimize(env.step(a).reward);
  }
}
BENCHMARK(BM_env_step);

void BM_collect_episodes(benchmark::State& state) {
  PolicyParams p = bench_policy(16);
  auto tasks = sample_tasks(Family::point_nav, 1, "train", 1, RewardMode::dense, 25);
  RewardSpec rs = RewardSpec::defaults(Family::point_nav);
  VariationalParams vp = VariationalParams::prior(2);
  for (auto _ : state) {
    auto trajs = collect(p, vp, tasks[0], rs, 10, 3, "bench");
    benchmark::DoNotOptimize(trajs.back().ret);
  }
}
BENCHMARK(BM_collect_episodes);

void BM_meta_iteration(benchmark::State& state) {
  auto tasks = sample_tasks(Family::point_nav, 4, "train", 1, RewardMode::dense, 25);
  MetaState st;
  st.theta = bench_policy(16);
  st.steps = StepSizes::init(2, 0.1);
  for (const TaskSpec& t : tasks) st.vp_all[t.task_id] = VariationalParams::prior(2);
  MetaIterOptions opt;
  opt.episodes_pre = opt.episodes_post = 5;
  RewardSpec rs = RewardSpec::defaults(Family::point_nav);
  for (auto _ : state) {
    MetaState copy = st;
    benchmark::DoNotOptimize(meta_iteration(copy, tasks, rs, opt, 4).accepted);
  }
}
BENCHMARK(BM_meta_iteration);

}  // namespace

BENCHMARK_MAIN();
