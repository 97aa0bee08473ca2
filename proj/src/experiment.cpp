#include "cacom/experiment.hpp"

#include <algorithm>
#include <boost/math/distributions/students_t.hpp>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>

#include "cacom/checkpoint.hpp"
#include "json.hpp"

namespace cacom {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string num(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  (void)ec;
  return std::string(buf, ptr);
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  auto out = open_out(path);
  out << text;
}

json eval_json(const EvalPoint& p) {
  return {{"step", p.step}, {"mean_return", p.mean_return}, {"occupied_ratio", p.occupied_ratio}, {"prune_ratio", p.prune_ratio}};
}

json record_json(const RunRecord& r) {
  json evals = json::array();
  for (const auto& p : r.evals) evals.push_back(eval_json(p));
  return {{"config_hash", r.config_hash},
          {"seed", r.seed},
          {"random_return", r.random_return},
          {"final_return", r.final_return},
          {"final_occupied_ratio", r.final_occupied_ratio},
          {"final_prune_ratio", r.final_prune_ratio},
          {"evals", evals}};
}

std::uint64_t eval_seed_for(std::uint64_t seed) { return train::derive_seed(seed, train::kEvalStream); }

void write_trajectories(const ExperimentConfig& cfg, const train::Trainer& trainer, const nets::CacomNetwork& net,
                        std::uint64_t seed, const fs::path& path) {
  auto out = open_out(path);
  const auto eval_seed = eval_seed_for(seed);
  std::mt19937_64 unused(0);
  for (int k = 0; k < cfg.trajectory_episodes; ++k) {
    proto::LinkLedger ledger(cfg.env.n_agents, cfg.budget_bits());
    auto ep = train::rollout(cfg.env, net, train::gate_policy_for(trainer.config()), 0.0,
                             train::derive_seed(eval_seed, train::kEvalStream, static_cast<std::uint64_t>(k)), unused, ledger);
    for (std::size_t t = 0; t < ep.length(); ++t) {
      const auto& tr = ep.steps[t];
      json positions = json::array();
      for (std::size_t e = 0; e + 3 < tr.state.size(); e += 4) positions.push_back({tr.state[e], tr.state[e + 1]});
      json line = {{"episode", k}, {"t", t}, {"positions", positions}, {"actions", tr.actions}, {"reward", tr.reward},
                   {"bits", ledger.per_timestep_bits()[t]}};
      out << line.dump() << '\n';
    }
  }
}

}  // namespace

SeriesStats mean_ci95(const std::vector<double>& values) {
  SeriesStats s;
  s.n = values.size();
  if (values.empty()) return s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(s.n);
  s.ci_low = s.ci_high = s.mean;
  if (s.n < 2) return s;
  double ss = 0.0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  const double sd = std::sqrt(ss / static_cast<double>(s.n - 1));
  boost::math::students_t dist(static_cast<double>(s.n - 1));
  const double half = boost::math::quantile(boost::math::complement(dist, 0.025)) * sd / std::sqrt(static_cast<double>(s.n));
  s.ci_low = s.mean - half;
  s.ci_high = s.mean + half;
  return s;
}

nets::CacomNetwork network_from_checkpoint(const ExperimentConfig& cfg, const fs::path& checkpoint) {
  nets::CacomNetwork net(cfg.net_config(), 0);
  net.load(ad::load_checkpoint(checkpoint));
  return net;
}

RunRecord train_run(const ExperimentConfig& cfg, std::uint64_t seed, const fs::path& run_dir) {
  cfg.validate();
  fs::create_directories(run_dir);
  write_text(run_dir / "config.txt", serialize_config(cfg));
  const auto tc = cfg.train_config();
  const auto gates = train::gate_policy_for(tc);
  train::Trainer trainer(cfg.env, cfg.net_config(), tc, cfg.budget_bits(), seed, cfg.total_steps);
  auto metrics = open_out(run_dir / "metrics.jsonl");
  auto evals = open_out(run_dir / "eval.jsonl");

  RunRecord rec;
  rec.config_hash = cfg.hash();
  rec.seed = seed;
  const auto eval_seed = eval_seed_for(seed);
  rec.random_return =
      train::evaluate(cfg.env, trainer.online(), gates, cfg.budget_bits(), cfg.eval_episodes, eval_seed, 1.0).mean_return;

  auto evaluate_now = [&] {
    auto s = train::evaluate(cfg.env, trainer.online(), gates, cfg.budget_bits(), cfg.eval_episodes, eval_seed);
    EvalPoint p{trainer.steps(), s.mean_return, s.occupied_ratio, s.prune_ratio};
    rec.evals.push_back(p);
    evals << eval_json(p).dump() << '\n';
    evals.flush();
  };
  auto on_update = [&](const train::UpdateMetrics& m) {
    json line = {{"step", m.step},
                 {"td_loss", m.td_loss},
                 {"aux_loss", m.aux_loss},
                 {"gate_loss", m.gate_loss},
                 {"gate_updated", m.gate_updated},
                 {"epsilon", m.epsilon},
                 {"mean_return", m.mean_return},
                 {"occupied_ratio", m.occupied_ratio},
                 {"prune_ratio", m.prune_ratio}};
    metrics << line.dump() << '\n';
  };

  std::uint64_t next_eval = cfg.eval_interval;
  std::uint64_t next_ckpt = cfg.checkpoint_interval;
  fs::path last_checkpoint;
  try {
    while (trainer.advance(on_update)) {
      if (trainer.steps() >= next_eval) {
        evaluate_now();
        while (next_eval <= trainer.steps()) next_eval += cfg.eval_interval;
      }
      if (cfg.checkpoint_interval > 0 && trainer.steps() >= next_ckpt) {
        last_checkpoint = run_dir / ("ckpt_" + std::to_string(trainer.steps()) + ".bin");
        ad::save_checkpoint(last_checkpoint, trainer.online().named_tensors());
        while (next_ckpt <= trainer.steps()) next_ckpt += cfg.checkpoint_interval;
      }
    }
  } catch (const NumericalAbort& e) {
    metrics.flush();
    json abort = {{"step", trainer.steps()}, {"error", e.what()}, {"last_checkpoint", last_checkpoint.string()}};
    write_text(run_dir / "abort.json", abort.dump(2) + "\n");
    throw;
  }
  if (rec.evals.empty() || rec.evals.back().step != trainer.steps()) evaluate_now();
  ad::save_checkpoint(run_dir / "final.bin", trainer.online().named_tensors());
  write_trajectories(cfg, trainer, trainer.online(), seed, run_dir / "trajectories.jsonl");

  rec.final_return = rec.evals.back().mean_return;
  rec.final_occupied_ratio = rec.evals.back().occupied_ratio;
  rec.final_prune_ratio = rec.evals.back().prune_ratio;
  write_text(run_dir / "record.json", record_json(rec).dump(2) + "\n");
  return rec;
}

void write_aggregate_csv(const std::vector<RunRecord>& records, const fs::path& path) {
  auto out = open_out(path);
  out << "step,mean_return,ci95_low,ci95_high,n\n";
  if (records.empty()) return;
  for (std::size_t k = 0; k < records.front().evals.size(); ++k) {
    std::vector<double> v;
    for (const auto& r : records)
      if (k < r.evals.size()) v.push_back(r.evals[k].mean_return);
    const auto s = mean_ci95(v);
    out << records.front().evals[k].step << ',' << num(s.mean) << ',' << num(s.ci_low) << ',' << num(s.ci_high) << ','
        << s.n << '\n';
  }
}

std::vector<RunRecord> train_all(const ExperimentConfig& cfg, std::ostream& log) {
  std::vector<RunRecord> records;
  const fs::path root(cfg.output_dir);
  fs::create_directories(root);
  for (auto seed : cfg.seeds) {
    log << "seed " << seed << ": training " << cfg.total_steps << " steps\n" << std::flush;
    records.push_back(train_run(cfg, seed, root / ("seed_" + std::to_string(seed))));
    const auto& r = records.back();
    log << "seed " << seed << ": final return " << num(r.final_return) << " (random " << num(r.random_return)
        << "), occupied " << num(r.final_occupied_ratio) << ", pruned " << num(r.final_prune_ratio) << "\n";
  }
  write_aggregate_csv(records, root / "aggregate.csv");
  return records;
}

train::EvalSummary evaluate_checkpoint(const ExperimentConfig& cfg, const fs::path& checkpoint, int episodes,
                                       std::uint64_t seed) {
  auto net = network_from_checkpoint(cfg, checkpoint);
  return train::evaluate(cfg.env, net, train::gate_policy_for(cfg.train_config()), cfg.budget_bits(), episodes,
                         eval_seed_for(seed));
}

SweepAxis parse_sweep_axis(const std::string& name) {
  if (name == "context") return SweepAxis::Context;
  if (name == "personalized") return SweepAxis::Personalized;
  throw ConfigError("--axis: '" + name + "' is not context or personalized");
}

ExperimentConfig sweep_variant(const ExperimentConfig& base, SweepAxis axis, int bits) {
  if (base.ablation.bc || base.ablation.no_comm) throw ConfigError("sweep: needs the two-stage protocol");
  ExperimentConfig v = base;
  const bool personalized = axis == SweepAxis::Personalized;
  const int width = personalized ? base.protocol.message_bits : base.protocol.context_bits;
  if (bits < 0 || bits % width != 0) {
    throw ConfigError("sweep: " + std::to_string(bits) + " bits is not a multiple of the " + std::to_string(width) +
                      "-bit element width");
  }
  if (personalized) {
    v.protocol.message_dim = bits / width;
  } else {
    v.protocol.context_dim = bits / width;
  }
  v.protocol.budget = v.protocol.context_cost() + v.protocol.message_cost();
  v.output_dir = (fs::path(base.output_dir) / ((personalized ? "sweep_personalized_" : "sweep_context_") + std::to_string(bits))).string();
  v.validate();
  return v;
}

std::vector<SweepRow> run_sweep(const ExperimentConfig& base, SweepAxis axis, std::vector<int> values, std::ostream& log) {
  std::sort(values.begin(), values.end());
  values.erase(std::unique(values.begin(), values.end()), values.end());
  const std::string axis_name = axis == SweepAxis::Personalized ? "personalized" : "context";
  const fs::path root(base.output_dir);
  fs::create_directories(root);
  std::vector<SweepRow> rows;
  for (int bits : values) {
    ExperimentConfig v;
    try {
      v = sweep_variant(base, axis, bits);
    } catch (const ConfigError& e) {
      log << "warning: skipping " << axis_name << "=" << bits << ": " << e.what() << "\n";
      continue;
    }
    for (auto seed : base.seeds) {
      log << axis_name << "=" << bits << " seed " << seed << "\n" << std::flush;
      auto rec = train_run(v, seed, fs::path(v.output_dir) / ("seed_" + std::to_string(seed)));
      rows.push_back({bits, seed, rec.final_return, rec.final_occupied_ratio, rec.final_prune_ratio});
    }
  }
  auto out = open_out(root / "sweep.csv");
  out << "axis,bits,seed,mean_return,occupied_ratio,prune_ratio\n";
  for (const auto& r : rows) {
    out << axis_name << ',' << r.bits << ',' << r.seed << ',' << num(r.mean_return) << ',' << num(r.occupied_ratio) << ','
        << num(r.prune_ratio) << '\n';
  }
  auto summary = open_out(root / "sweep_summary.csv");
  summary << "bits,mean_return,ci95_low,ci95_high,n\n";
  for (std::size_t k = 0; k < rows.size();) {
    std::vector<double> v;
    const int bits = rows[k].bits;
    for (; k < rows.size() && rows[k].bits == bits; ++k) v.push_back(rows[k].mean_return);
    const auto s = mean_ci95(v);
    summary << bits << ',' << num(s.mean) << ',' << num(s.ci_low) << ',' << num(s.ci_high) << ',' << s.n << '\n';
  }
  return rows;
}

}  // namespace cacom
