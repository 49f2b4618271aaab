#include "maesn/policy.hpp"

#include <fstream>

#include "json.hpp"

namespace maesn {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

Tensor uniform_fanin(long rows, long cols, double gain, RngStream& rng) {
  // scaled-uniform fan-in: U(-s, s) with s = gain * sqrt(3 / fan_in)
  double s = gain * std::sqrt(3.0 / static_cast<double>(std::max<long>(rows, 1)));
  Tensor t = Tensor::zeros({rows, cols});
  for (long i = 0; i < t.size(); ++i) t.v[i] = rng.uniform(-s, s);
  return t;
}

}  // namespace

PolicyParams PolicyParams::init(long state_dim, long latent_dim, long action_dim, RngStream& rng,
                                double log_std_init, long hidden) {
  PolicyParams p;
  p.state_dim = state_dim;
  p.latent_dim = latent_dim;
  p.action_dim = action_dim;
  p.hidden = hidden;
  p.w1s = uniform_fanin(state_dim, hidden, 1.0, rng);
  p.w1z = uniform_fanin(latent_dim, hidden, 1.0, rng);
  p.b1 = Tensor::zeros({hidden});
  p.w2 = uniform_fanin(hidden, hidden, 1.0, rng);
  p.b2 = Tensor::zeros({hidden});
  p.w3 = uniform_fanin(hidden, action_dim, 0.01, rng);
  p.b3 = Tensor::zeros({action_dim});
  p.log_std = Tensor::full({action_dim}, log_std_init);
  return p;
}

void PolicyParams::clamp_log_std() {
  for (double& x : log_std.v) x = std::clamp(x, -5.0, 2.0);
}

std::vector<std::pair<std::string, Tensor*>> PolicyParams::entries() {
  return {{"w1s", &w1s}, {"w1z", &w1z}, {"b1", &b1}, {"w2", &w2},
          {"b2", &b2},   {"w3", &w3},   {"b3", &b3}, {"log_std", &log_std}};
}

std::vector<std::pair<std::string, const Tensor*>> PolicyParams::entries() const {
  return {{"w1s", &w1s}, {"w1z", &w1z}, {"b1", &b1}, {"w2", &w2},
          {"b2", &b2},   {"w3", &w3},   {"b3", &b3}, {"log_std", &log_std}};
}

StepSizes StepSizes::init(long latent_dim, double value) {
  return {Tensor::full({latent_dim}, value), Tensor::full({latent_dim}, value), std::nullopt};
}

LatentSample sample_latent(const VariationalParams& vp, RngStream& rng) {
  long d = vp.mu.size();
  LatentSample s{Tensor::zeros({d}), Tensor::zeros({d})};
  for (long i = 0; i < d; ++i) {
    s.epsilon.v[i] = rng.normal();
    s.z.v[i] = vp.mu.v[i] + std::exp(vp.log_sigma.v[i]) * s.epsilon.v[i];
  }
  return s;
}

void action_dist(const std::vector<double>& state, const std::vector<double>& z,
                 const PolicyParams& p, std::vector<double>& mean_out,
                 std::vector<double>& std_out) {
  if (static_cast<long>(state.size()) != p.state_dim ||
      static_cast<long>(z.size()) != p.latent_dim)
    throw std::invalid_argument("action_dist: dimension mismatch (state " +
                                std::to_string(state.size()) + "/" + std::to_string(p.state_dim) +
                                ", z " + std::to_string(z.size()) + "/" +
                                std::to_string(p.latent_dim) + ")");
  long h = p.hidden;
  std::vector<double> h1(h), h2(h);
  for (long j = 0; j < h; ++j) {
    double acc = p.b1.at(j);
    for (long i = 0; i < p.state_dim; ++i) acc += state[i] * p.w1s.at(i, j);
    for (long i = 0; i < p.latent_dim; ++i) acc += z[i] * p.w1z.at(i, j);
    h1[j] = acc > 0 ? acc : 0.0;
  }
  for (long j = 0; j < h; ++j) {
    double acc = p.b2.at(j);
    for (long i = 0; i < h; ++i) acc += h1[i] * p.w2.at(i, j);
    h2[j] = acc > 0 ? acc : 0.0;
  }
  mean_out.assign(p.action_dim, 0.0);
  std_out.assign(p.action_dim, 0.0);
  for (long j = 0; j < p.action_dim; ++j) {
    double acc = p.b3.at(j);
    for (long i = 0; i < h; ++i) acc += h2[i] * p.w3.at(i, j);
    mean_out[j] = acc;
    std_out[j] = std::exp(p.log_std.at(j));
  }
}

double log_prob(const std::vector<double>& action, const std::vector<double>& state,
                const std::vector<double>& z, const PolicyParams& p) {
  for (double a : action)
    if (!std::isfinite(a)) throw std::invalid_argument("log_prob: non-finite action");
  for (double s : state)
    if (!std::isfinite(s)) throw std::invalid_argument("log_prob: non-finite state");
  std::vector<double> mean, stddev;
  action_dist(state, z, p, mean, stddev);
  double lp = 0.0;
  for (long i = 0; i < p.action_dim; ++i) {
    double d = (action[i] - mean[i]) / stddev[i];
    lp += -0.5 * d * d - p.log_std.at(i) - 0.5 * kLog2Pi;
  }
  return lp;
}

PolicyVars policy_leaves(Graph& g, const PolicyParams& p) {
  return {g.leaf(p.w1s), g.leaf(p.w1z), g.leaf(p.b1),      g.leaf(p.w2),
          g.leaf(p.b2),  g.leaf(p.w3),  g.leaf(p.b3),      g.leaf(p.log_std)};
}

PolicyVars policy_constants(Graph& g, const PolicyParams& p) {
  return {g.constant(p.w1s), g.constant(p.w1z), g.constant(p.b1), g.constant(p.w2),
          g.constant(p.b2),  g.constant(p.w3),  g.constant(p.b3), g.constant(p.log_std)};
}

VpVars vp_leaves(Graph& g, const VariationalParams& vp) {
  return {g.leaf(vp.mu), g.leaf(vp.log_sigma)};
}

PolicyParams read_policy(Graph& g, const PolicyVars& pv, const PolicyParams& like) {
  PolicyParams p = like;
  p.w1s = g.value(pv.w1s);
  p.w1z = g.value(pv.w1z);
  p.b1 = g.value(pv.b1);
  p.w2 = g.value(pv.w2);
  p.b2 = g.value(pv.b2);
  p.w3 = g.value(pv.w3);
  p.b3 = g.value(pv.b3);
  p.log_std = g.value(pv.log_std);
  return p;
}

VariationalParams read_vp(Graph& g, const VpVars& vv) {
  return {g.value(vv.mu), g.value(vv.log_sigma)};
}

Var policy_mean_graph(Graph& g, const PolicyVars& pv, Var states, Var z, long latent_dim) {
  long rows = g.shape(states)[0];
  Var pre1 = g.matmul(states, pv.w1s);
  if (latent_dim > 0) {
    Var zrow = g.matmul(z, pv.w1z);  // [1, h]
    long h = g.shape(zrow)[1];
    pre1 = g.add(pre1, g.broadcast_row(g.reshape(zrow, {h}), rows));
  }
  Var h1 = g.relu(g.add(pre1, g.broadcast_row(pv.b1, rows)));
  Var h2 = g.relu(g.add(g.matmul(h1, pv.w2), g.broadcast_row(pv.b2, rows)));
  return g.add(g.matmul(h2, pv.w3), g.broadcast_row(pv.b3, rows));
}

Var gaussian_logprob_rows(Graph& g, Var actions, Var mean, Var log_std_vec, long action_dim) {
  long rows = g.shape(actions)[0];
  Var diff = g.sub(actions, mean);
  Var prec = g.broadcast_row(g.exp_(g.scale(log_std_vec, -2.0)), rows);  // 1/sigma^2 per dim
  Var weighted = g.mul(g.square(diff), prec);                            // [T, a]
  Var ones = g.constant(Tensor::full({action_dim, 1}, 1.0));
  Var quad = g.matmul(weighted, ones);  // [T, 1] row sums
  Var base = g.scale(quad, -0.5);
  Var lsum = g.broadcast_scalar(g.neg(g.sum(log_std_vec)), {rows, 1});
  return g.shift(g.add(base, lsum), -0.5 * kLog2Pi * static_cast<double>(action_dim));
}

Var latent_logprob(Graph& g, Var z_row, VpVars vp, long latent_dim) {
  Var mu_row = g.reshape(vp.mu, {1, latent_dim});
  Var lp = gaussian_logprob_rows(g, z_row, mu_row, vp.log_sigma, latent_dim);
  return g.sum(lp);
}

// ---------------------------------------------------------------------------
// Checkpoint I/O

namespace {

using nlohmann::json;

json tensor_to_json(const Tensor& t) {
  return json{{"shape", t.shape}, {"values", t.v}};
}

Tensor tensor_from_json(const json& j) {
  return Tensor(j.at("shape").get<std::vector<long>>(), j.at("values").get<std::vector<double>>());
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  json j;
  in >> j;
  return j;
}

void write_json_file(const json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << j.dump(2) << "\n";
}

}  // namespace

void save_policy(const PolicyParams& p, const std::string& path) {
  json params;
  for (const auto& [name, t] : p.entries()) params[name] = tensor_to_json(*t);
  write_json_file(json{{"format", "maesn-policy-v1"},
                       {"state_dim", p.state_dim},
                       {"latent_dim", p.latent_dim},
                       {"action_dim", p.action_dim},
                       {"hidden", p.hidden},
                       {"params", params}},
                  path);
}

PolicyParams load_policy(const std::string& path) {
  json j = read_json_file(path);
  if (j.at("format") != "maesn-policy-v1")
    throw std::runtime_error(path + ": unsupported policy format");
  PolicyParams p;
  p.state_dim = j.at("state_dim");
  p.latent_dim = j.at("latent_dim");
  p.action_dim = j.at("action_dim");
  p.hidden = j.at("hidden");
  const json& params = j.at("params");
  for (auto& [name, t] : p.entries()) *t = tensor_from_json(params.at(name));
  return p;
}

void save_vp_manifest(const std::vector<std::pair<int, VariationalParams>>& vps,
                      const std::string& path) {
  json tasks = json::array();
  for (const auto& [id, vp] : vps)
    tasks.push_back({{"task_id", id}, {"mu", vp.mu.v}, {"log_sigma", vp.log_sigma.v}});
  write_json_file(json{{"format", "maesn-vp-v1"}, {"tasks", tasks}}, path);
}

std::vector<std::pair<int, VariationalParams>> load_vp_manifest(const std::string& path) {
  json j = read_json_file(path);
  if (j.at("format") != "maesn-vp-v1") throw std::runtime_error(path + ": unsupported vp format");
  std::vector<std::pair<int, VariationalParams>> out;
  for (const auto& t : j.at("tasks")) {
    VariationalParams vp{Tensor::vector(t.at("mu").get<std::vector<double>>()),
                         Tensor::vector(t.at("log_sigma").get<std::vector<double>>())};
    out.emplace_back(t.at("task_id").get<int>(), std::move(vp));
  }
  return out;
}

void save_step_sizes(const StepSizes& s, const std::string& path) {
  json j{{"format", "maesn-alpha-v1"},
         {"alpha_mu", tensor_to_json(s.alpha_mu)},
         {"alpha_sigma", tensor_to_json(s.alpha_sigma)}};
  if (s.alpha_theta) {
    json th;
    for (const auto& [name, t] : s.alpha_theta->entries()) th[name] = tensor_to_json(*t);
    j["alpha_theta"] = th;
    j["alpha_theta_dims"] = {{"state_dim", s.alpha_theta->state_dim},
                             {"latent_dim", s.alpha_theta->latent_dim},
                             {"action_dim", s.alpha_theta->action_dim},
                             {"hidden", s.alpha_theta->hidden}};
  }
  write_json_file(j, path);
}

StepSizes load_step_sizes(const std::string& path) {
  json j = read_json_file(path);
  if (j.at("format") != "maesn-alpha-v1")
    throw std::runtime_error(path + ": unsupported step-size format");
  StepSizes s{tensor_from_json(j.at("alpha_mu")), tensor_from_json(j.at("alpha_sigma")),
              std::nullopt};
  if (j.contains("alpha_theta")) {
    PolicyParams th;
    const json& d = j.at("alpha_theta_dims");
    th.state_dim = d.at("state_dim");
    th.latent_dim = d.at("latent_dim");
    th.action_dim = d.at("action_dim");
    th.hidden = d.at("hidden");
    for (auto& [name, t] : th.entries()) *t = tensor_from_json(j.at("alpha_theta").at(name));
    s.alpha_theta = std::move(th);
  }
  return s;
}

}  // namespace maesn
