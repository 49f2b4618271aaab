#include "maesn/experiment.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace maesn {

namespace {

void require(bool ok, const std::string& field, const std::string& why) {
  if (!ok) throw std::invalid_argument("config field '" + field + "': " + why);
}

std::ofstream open_csv(const fs::path& path) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  return out;
}

bool is_latent(Method m) {
  return m == Method::maesn || m == Method::latent_only || m == Method::maml_bias_all ||
         m == Method::maml_bias_only;
}

VariationalParams adapt_start(Method m, long latent_dim, double vp_log_sigma_init) {
  VariationalParams vp = VariationalParams::prior(latent_dim);
  if (m == Method::maml_bias_all || m == Method::maml_bias_only)
    vp.log_sigma = Tensor::full({latent_dim}, vp_log_sigma_init);
  return vp;
}

void dump_prior_trajectories(const PolicyParams& theta, const TaskSpec& task,
                             const RewardSpec& rspec, int episodes, uint64_t seed,
                             const fs::path& path) {
  std::ofstream out = open_csv(path);
  out << "episode,t,x,y\n";
  VariationalParams vp = VariationalParams::prior(theta.latent_dim);
  std::vector<double> mean, sd;
  for (int ep = 0; ep < episodes; ++ep) {
    RngStream lat(seed, "figure/latent", static_cast<uint64_t>(task.task_id),
                  static_cast<uint64_t>(ep));
    RngStream act(seed, "figure/action", static_cast<uint64_t>(task.task_id),
                  static_cast<uint64_t>(ep));
    std::vector<double> z(static_cast<size_t>(theta.latent_dim));
    for (double& v : z) v = lat.normal();
    Env env(task, rspec);
    std::vector<double> obs = env.reset();
    std::vector<double> action(static_cast<size_t>(theta.action_dim));
    for (int t = 0; t < task.horizon; ++t) {
      action_dist(obs, z, theta, mean, sd);
      for (size_t k = 0; k < action.size(); ++k) action[k] = mean[k] + sd[k] * act.normal();
      obs = env.step(action).obs;
      auto p = env.body_position();
      out << ep << "," << t << "," << p.first << "," << p.second << "\n";
    }
  }
}

void write_dispersion(const PolicyParams& theta, const TaskSpec& task, const RewardSpec& rspec,
                      uint64_t seed, const fs::path& path) {
  std::ofstream out = open_csv(path);
  out << "setting,dispersion\n";
  out << "sampled," << endpoint_dispersion(theta, task, rspec, 100, seed, true) << "\n";
  out << "fixed," << endpoint_dispersion(theta, task, rspec, 100, seed, false) << "\n";
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

void ExperimentConfig::validate() const {
  require(!seeds.empty(), "seeds", "must be non-empty");
  require(n_validation_tasks >= 1, "n_validation_tasks", "must be >= 1");
  require(method == Method::scratch || n_train_tasks >= 1, "n_train_tasks", "must be >= 1");
  require(iterations >= 0, "iterations", "must be >= 0");
  require(task_batch_size >= 1, "task_batch_size", "must be >= 1");
  require(episodes_pre >= 1, "episodes_pre", "must be >= 1");
  require(episodes_post >= 1, "episodes_post", "must be >= 1");
  require(adapt_iterations >= 0, "adapt_iterations", "must be >= 0");
  require(adapt_episodes >= 1, "adapt_episodes", "must be >= 1");
  require(hidden >= 1, "hidden", "must be >= 1");
  require(latent_dim >= 0, "latent_dim", "must be >= 0");
  require(method == Method::maml || method == Method::scratch || latent_dim >= 1, "latent_dim",
          "latent methods need latent_dim >= 1");
  require(horizon == -1 || horizon >= 1, "horizon", "must be -1 (family default) or >= 1");
  require(trust_delta > 0, "trust_delta", "must be > 0");
  require(!out_dir.empty(), "out_dir", "must be set");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  require(!ec, "out_dir", "not creatable: " + ec.message());
}

ExperimentConfig ExperimentConfig::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot read config file " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const std::exception& e) {
    throw std::invalid_argument("config parse error: " + std::string(e.what()));
  }
  ExperimentConfig c;
  try {
    for (auto& [key, val] : j.items()) {
      if (key == "method") c.method = method_from_name(val.get<std::string>());
      else if (key == "family") c.family = family_from_name(val.get<std::string>());
      else if (key == "n_train_tasks") c.n_train_tasks = val.get<int>();
      else if (key == "n_validation_tasks") c.n_validation_tasks = val.get<int>();
      else if (key == "iterations") c.iterations = val.get<int>();
      else if (key == "task_batch_size") c.task_batch_size = val.get<int>();
      else if (key == "episodes_pre") c.episodes_pre = val.get<int>();
      else if (key == "episodes_post") c.episodes_post = val.get<int>();
      else if (key == "adapt_iterations") c.adapt_iterations = val.get<int>();
      else if (key == "adapt_episodes") c.adapt_episodes = val.get<int>();
      else if (key == "latent_dim") c.latent_dim = val.get<long>();
      else if (key == "hidden") c.hidden = val.get<long>();
      else if (key == "horizon") c.horizon = val.get<int>();
      else if (key == "kl_weight") c.kl_weight = val.get<double>();
      else if (key == "alpha_init") c.alpha_init = val.get<double>();
      else if (key == "log_std_init") c.log_std_init = val.get<double>();
      else if (key == "trust_delta") c.trust_delta = val.get<double>();
      else if (key == "freeze_theta") c.freeze_theta = val.get<bool>();
      else if (key == "seeds") c.seeds = val.get<std::vector<uint64_t>>();
      else if (key == "out_dir") c.out_dir = val.get<std::string>();
      else throw std::invalid_argument("unknown config field '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw std::invalid_argument("config field error: " + std::string(e.what()));
  }
  return c;
}

void ExperimentConfig::to_json_file(const std::string& path) const {
  json j{{"method", method_name(method)},
         {"family", family_name(family)},
         {"n_train_tasks", n_train_tasks},
         {"n_validation_tasks", n_validation_tasks},
         {"iterations", iterations},
         {"task_batch_size", task_batch_size},
         {"episodes_pre", episodes_pre},
         {"episodes_post", episodes_post},
         {"adapt_iterations", adapt_iterations},
         {"adapt_episodes", adapt_episodes},
         {"latent_dim", latent_dim},
         {"hidden", hidden},
         {"horizon", horizon},
         {"kl_weight", kl_weight},
         {"alpha_init", alpha_init},
         {"log_std_init", log_std_init},
         {"trust_delta", trust_delta},
         {"freeze_theta", freeze_theta},
         {"seeds", seeds},
         {"out_dir", out_dir}};
  fs::create_directories(fs::path(path).parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << j.dump(2) << "\n";
}

void run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  fs::create_directories(cfg.out_dir);
  cfg.to_json_file(cfg.out_dir + "/config.json");
  RewardSpec rspec = RewardSpec::defaults(cfg.family);

  try {
    for (uint64_t seed : cfg.seeds) {
      fs::path sdir = fs::path(cfg.out_dir) / ("seed_" + std::to_string(seed));

      // --- meta-training on dense rewards ---
      MetaState state;
      double vp_ls_init = 0.0;
      if (cfg.method != Method::scratch) {
        TrainConfig tc;
        tc.family = cfg.family;
        tc.latent_dim = cfg.latent_dim;
        tc.hidden = cfg.hidden;
        tc.n_train_tasks = cfg.n_train_tasks;
        tc.task_batch_size = cfg.task_batch_size;
        tc.iterations = cfg.iterations;
        tc.horizon = cfg.horizon;
        tc.kl_weight = cfg.kl_weight;
        tc.alpha_init = cfg.alpha_init;
        tc.log_std_init = cfg.log_std_init;
        tc.seed = seed;
        tc.iter.episodes_pre = cfg.episodes_pre;
        tc.iter.episodes_post = cfg.episodes_post;
        tc.iter.trust.delta = cfg.trust_delta;
        tc.iter.freeze_theta = cfg.freeze_theta;
        tc.out_dir = (sdir / "train").string();
        tc = apply_method(cfg.method, tc);
        vp_ls_init = tc.vp_log_sigma_init;
        TrainResult res = meta_train(tc);
        save_task_manifest(res.tasks, cfg.family, seed, "train",
                           (sdir / "train" / "tasks.json").string());
        if (res.aborted)
          throw std::runtime_error("meta-training aborted for seed " + std::to_string(seed) +
                                   " (see " + tc.out_dir + "/error.txt)");
        save_checkpoint(res.state, (sdir / "train" / "ckpt_final").string());
        state = std::move(res.state);
      }

      // --- meta-test on sparse validation tasks ---
      int horizon = cfg.horizon == -1 ? default_horizon(cfg.family) : cfg.horizon;
      auto val = sample_tasks(cfg.family, cfg.n_validation_tasks, "validation", seed,
                              RewardMode::sparse, horizon);
      fs::create_directories(sdir / "metatest");
      save_task_manifest(val, cfg.family, seed, "validation",
                         (sdir / "metatest" / "tasks.json").string());

      std::ofstream metrics = open_csv(sdir / "metatest" / "metrics.csv");
      metrics << "task_id,iteration,mean_return,mode\n";
      std::ofstream latents;
      if (is_latent(cfg.method)) {
        latents = open_csv(sdir / "metatest" / "latents.csv");
        latents << "task_id,tag";
        for (long k = 0; k < cfg.latent_dim; ++k) latents << ",mu" << k;
        for (long k = 0; k < cfg.latent_dim; ++k) latents << ",log_sigma" << k;
        latents << "\n";
      }
      auto latent_row = [&](int task_id, const char* tag, const VariationalParams& vp) {
        latents << task_id << "," << tag;
        for (long k = 0; k < cfg.latent_dim; ++k) latents << "," << vp.mu.at(k);
        for (long k = 0; k < cfg.latent_dim; ++k) latents << "," << vp.log_sigma.at(k);
        latents << "\n";
      };

      for (const TaskSpec& task : val) {
        if (task.reward_mode != RewardMode::sparse)
          throw std::runtime_error("meta-test task " + std::to_string(task.task_id) +
                                   " is not sparse-mode");
        std::vector<double> curve;
        if (is_latent(cfg.method)) {
          VariationalParams start = adapt_start(cfg.method, cfg.latent_dim, vp_ls_init);
          AdaptTrace tr = metatest_adapt(state.theta, state.steps, task, rspec,
                                         cfg.adapt_iterations, cfg.adapt_episodes, seed,
                                         std::nullopt, nullptr, start);
          write_adapt_trace(tr, (sdir / "metatest" /
                                 ("adapt_task_" + std::to_string(task.task_id) + ".csv"))
                                    .string());
          curve = tr.mean_returns;
          latent_row(task.task_id, "pre", tr.vps.front());
          latent_row(task.task_id, "post", tr.vps.back());
        } else if (cfg.method == Method::maml) {
          AdaptTrace tr = maml_metatest_adapt(state.theta, state.steps, task, rspec,
                                              cfg.adapt_iterations, cfg.adapt_episodes, seed);
          curve = tr.mean_returns;
        } else {  // scratch: its training on the sparse task is the adaptation
          ScratchConfig sc;
          sc.iterations = cfg.adapt_iterations;
          sc.episodes = cfg.adapt_episodes;
          sc.hidden = cfg.hidden;
          sc.log_std_init = cfg.log_std_init;
          sc.seed = seed;
          sc.trust.delta = cfg.trust_delta;
          ScratchResult sr = train_scratch(task, rspec, sc);
          for (const IterationStats& h : sr.history) curve.push_back(h.pre_return);
        }
        for (size_t i = 0; i < curve.size(); ++i)
          metrics << task.task_id << "," << i << "," << curve[i] << ",sparse\n";
      }

      // --- exploration snapshots (meta methods; scratch has no shared policy) ---
      if (cfg.method != Method::scratch && !val.empty()) {
        dump_prior_trajectories(state.theta, val[0], rspec, 10, seed,
                                sdir / "metatest" / "trajectories.csv");
        write_dispersion(state.theta, val[0], rspec, seed, sdir / "dispersion.csv");
      }
    }
  } catch (const std::exception& e) {
    json err{{"error", e.what()}};
    std::ofstream out(cfg.out_dir + "/error.json");
    out << err.dump(2) << "\n";
    throw;
  }
}

void export_plotdata(const std::string& dir) {
  ExperimentConfig cfg = ExperimentConfig::from_json_file(dir + "/config.json");
  fs::path plot = fs::path(dir) / "plot";
  fs::create_directories(plot);

  // adaptation curve: mean +- stderr across (task, seed) per iteration
  std::map<int, std::vector<double>> by_iter;
  for (uint64_t seed : cfg.seeds) {
    fs::path m = fs::path(dir) / ("seed_" + std::to_string(seed)) / "metatest" / "metrics.csv";
    std::ifstream in(m);
    if (!in) throw std::runtime_error("missing input " + m.string());
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::istringstream row(line);
      std::string task_id, iter, ret;
      std::getline(row, task_id, ',');
      std::getline(row, iter, ',');
      std::getline(row, ret, ',');
      by_iter[std::stoi(iter)].push_back(std::stod(ret));
    }
  }
  {
    std::ofstream out = open_csv(plot / "adaptation_curve.csv");
    out << "iteration,mean,stderr,method\n";
    for (auto& [it, vals] : by_iter) {
      double mean = 0;
      for (double v : vals) mean += v;
      mean /= static_cast<double>(vals.size());
      double var = 0;
      for (double v : vals) var += (v - mean) * (v - mean);
      double se = vals.size() > 1 ? std::sqrt(var / static_cast<double>(vals.size() - 1)) /
                                        std::sqrt(static_cast<double>(vals.size()))
                                  : 0.0;
      out << it << "," << mean << "," << se << "," << method_name(cfg.method) << "\n";
    }
  }

  fs::path first = fs::path(dir) / ("seed_" + std::to_string(cfg.seeds.front()));
  if (cfg.method != Method::scratch) {
    fs::path traj = first / "metatest" / "trajectories.csv";
    if (!fs::exists(traj)) throw std::runtime_error("missing input " + traj.string());
    fs::copy_file(traj, plot / "trajectories.csv", fs::copy_options::overwrite_existing);
  }

  if (is_latent(cfg.method)) {
    fs::path lat = first / "metatest" / "latents.csv";
    std::ifstream in(lat);
    if (!in) throw std::runtime_error("missing input " + lat.string());
    std::ofstream out = open_csv(plot / "latent_ellipses.csv");
    out << "task_id,tag";
    for (long k = 0; k < cfg.latent_dim; ++k) out << ",mu" << k;
    for (long k = 0; k < cfg.latent_dim; ++k) out << ",sigma" << k;
    out << "\n";
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::istringstream row(line);
      std::string cell;
      std::getline(row, cell, ',');
      out << cell;
      std::getline(row, cell, ',');
      out << "," << cell;
      for (long k = 0; k < cfg.latent_dim; ++k) {
        std::getline(row, cell, ',');
        out << "," << cell;  // mu as stored
      }
      for (long k = 0; k < cfg.latent_dim; ++k) {
        std::getline(row, cell, ',');
        out << "," << std::exp(std::stod(cell));  // sigma from log_sigma
      }
      out << "\n";
    }
  }

  if (cfg.method != Method::scratch) {
    std::ofstream out = open_csv(plot / "dispersion.csv");
    out << "seed,setting,dispersion\n";
    for (uint64_t seed : cfg.seeds) {
      fs::path d = fs::path(dir) / ("seed_" + std::to_string(seed)) / "dispersion.csv";
      std::ifstream in(d);
      if (!in) throw std::runtime_error("missing input " + d.string());
      std::string line;
      std::getline(in, line);  // header
      while (std::getline(in, line))
        if (!line.empty()) out << seed << "," << line << "\n";
    }
  }
}

std::vector<std::string> verify_experiment(const std::string& dir) {
  ExperimentConfig cfg = ExperimentConfig::from_json_file(dir + "/config.json");
  fs::path scratch_dir =
      fs::temp_directory_path() / ("maesn_verify_" + std::to_string(fs::hash_value(dir)));
  fs::remove_all(scratch_dir);
  ExperimentConfig rerun = cfg;
  rerun.out_dir = scratch_dir.string();
  run_experiment(rerun);

  std::vector<std::string> mismatched;
  for (uint64_t seed : cfg.seeds) {
    std::string sd = "seed_" + std::to_string(seed);
    std::vector<std::string> rels{sd + "/metatest/metrics.csv", sd + "/metatest/tasks.json"};
    if (cfg.method != Method::scratch) {
      rels.push_back(sd + "/train/metrics.csv");
      rels.push_back(sd + "/metatest/trajectories.csv");
      rels.push_back(sd + "/dispersion.csv");
    }
    if (is_latent(cfg.method)) rels.push_back(sd + "/metatest/latents.csv");
    for (const fs::path& p : fs::directory_iterator(fs::path(dir) / sd / "metatest"))
      if (p.filename().string().rfind("adapt_task_", 0) == 0)
        rels.push_back(sd + "/metatest/" + p.filename().string());
    for (const std::string& rel : rels) {
      fs::path a = fs::path(dir) / rel, b = scratch_dir / rel;
      if (!fs::exists(a) || !fs::exists(b) || slurp(a) != slurp(b)) mismatched.push_back(rel);
    }
  }
  fs::remove_all(scratch_dir);
  return mismatched;
}

double run_metatest(const std::string& ckpt_dir, const std::string& manifest_path,
                    const std::string& out_dir, int adapt_iterations, int adapt_episodes,
                    uint64_t seed) {
  MetaState state = load_checkpoint(ckpt_dir);
  auto tasks = load_task_manifest(manifest_path);
  if (tasks.empty()) throw std::runtime_error("empty task manifest " + manifest_path);
  RewardSpec rspec = RewardSpec::defaults(tasks[0].family);
  std::ofstream metrics = open_csv(fs::path(out_dir) / "metrics.csv");
  metrics << "task_id,iteration,mean_return,mode\n";
  double final_sum = 0;
  for (const TaskSpec& task : tasks) {
    AdaptTrace tr;
    if (state.theta.latent_dim > 0) {
      tr = metatest_adapt(state.theta, state.steps, task, rspec, adapt_iterations,
                          adapt_episodes, seed);
      write_adapt_trace(tr, (fs::path(out_dir) /
                             ("adapt_task_" + std::to_string(task.task_id) + ".csv"))
                                .string());
    } else {
      tr = maml_metatest_adapt(state.theta, state.steps, task, rspec, adapt_iterations,
                               adapt_episodes, seed);
    }
    const char* mode = task.reward_mode == RewardMode::sparse ? "sparse" : "dense";
    for (size_t i = 0; i < tr.mean_returns.size(); ++i)
      metrics << task.task_id << "," << i << "," << tr.mean_returns[i] << "," << mode << "\n";
    final_sum += tr.mean_returns.empty() ? 0.0 : tr.mean_returns.back();
  }
  return final_sum / static_cast<double>(tasks.size());
}

}  // namespace maesn
