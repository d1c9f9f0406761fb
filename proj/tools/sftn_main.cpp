// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end for the two-stage training pipeline:
//   sftn train-teacher --config cfg.json
//   sftn distill       --config cfg.json
//   sftn sweep         --config cfg.json --axis lambda_kl --values 1,3,6,10
//   sftn report        --out dir run_dir...
//   sftn eval          --config cfg.json --ckpt model.ckpt
//   sftn probe         --config cfg.json --ckpt student.ckpt --epochs 20

#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "sftn/commands.hpp"
#include "sftn/kernels.hpp"

namespace {

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  for (size_t at = 0; at < s.size();) {
    size_t end = s.find(',', at);
    if (end == std::string::npos) end = s.size();
    if (end > at) out.push_back(s.substr(at, end - at));
    at = end + 1;
  }
  return out;
}

sftn::ExperimentConfig load_with_overrides(const std::string& config_path, int64_t seed,
                                           const std::string& out, int threads) {
  auto cfg = sftn::load_config(config_path);
  if (seed >= 0) cfg.seeds = {uint64_t(seed)};
  if (!out.empty()) cfg.out_dir = out;
  if (threads > 0) cfg.threads = threads;
  sftn::set_num_threads(cfg.threads);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"student-friendly teacher training and knowledge distillation"};
  app.require_subcommand(1);

  std::string config_path, out, ckpt, axis, values_csv;
  int64_t seed = -1;
  int threads = 0, probe_epochs = 20;
  std::vector<std::string> run_dirs;

  auto add_common = [&](CLI::App* cmd, bool need_config) {
    auto* opt = cmd->add_option("--config", config_path, "experiment config JSON");
    if (need_config) opt->required();
    cmd->add_option("--seed", seed, "override the config's seed list with one seed");
    cmd->add_option("--out", out, "override the config's output directory");
    cmd->add_option("--threads", threads, "intra-op thread count");
  };

  auto* t = app.add_subcommand("train-teacher", "stage 1: train a teacher (standard/sftn/sftn-ft)");
  add_common(t, true);
  auto* d = app.add_subcommand("distill", "stage 2: distill a frozen teacher into a student");
  add_common(d, true);
  auto* s = app.add_subcommand("sweep", "hyperparameter sweep: teacher train + KD per value");
  add_common(s, true);
  s->add_option("--axis", axis, "tau_tilde|lambda_kl|lambda_ce|lambda_t|branches")->required();
  s->add_option("--values", values_csv, "comma-separated axis values")->required();
  auto* r = app.add_subcommand("report", "pair standard/SFTN runs and emit comparison tables");
  r->add_option("--out", out, "output directory for compare.csv/similarity.csv")->required();
  r->add_option("dirs", run_dirs, "run directories containing report.json")->required();
  auto* e = app.add_subcommand("eval", "evaluate a checkpoint on the configured dataset");
  add_common(e, true);
  e->add_option("--ckpt", ckpt, "checkpoint path")->required();
  auto* p = app.add_subcommand("probe", "linear-probe transfer of frozen student features");
  add_common(p, true);
  p->add_option("--ckpt", ckpt, "student checkpoint path")->required();
  p->add_option("--epochs", probe_epochs, "probe training epochs");

  CLI11_PARSE(app, argc, argv);

  try {
    if (t->parsed()) {
      auto cfg = load_with_overrides(config_path, seed, out, threads);
      auto rep = sftn::cmd_train_teacher(cfg);
      std::cout << "teacher " << rep.teacher_mode << " mean acc "
                << sftn::fmt_double(rep.mean_final_acc()) << " over "
                << rep.seeds.size() << " seed(s); report in "
                << sftn::resolve_out_dir(cfg.out_dir) << "\n";
    } else if (d->parsed()) {
      auto cfg = load_with_overrides(config_path, seed, out, threads);
      auto rep = sftn::cmd_distill(cfg);
      std::cout << "student " << rep.method << " (" << rep.teacher_mode << " teacher) mean acc "
                << sftn::fmt_double(rep.mean_final_acc()) << " +- "
                << sftn::fmt_double(rep.std_final_acc()) << " over " << rep.seeds.size()
                << " seed(s)\n";
    } else if (s->parsed()) {
      auto cfg = load_with_overrides(config_path, seed, out, threads);
      auto res = sftn::cmd_sweep(cfg, axis, split_csv(values_csv));
      std::cout << "sweep " << axis << ": " << res.rows.size() - size_t(res.failures)
                << " rows in " << res.csv_path << "\n";
      if (res.failures > 0) {
        std::cerr << res.failures << " sweep point(s) aborted\n";
        return 1;
      }
    } else if (r->parsed()) {
      auto rows = sftn::cmd_report(run_dirs, out);
      for (const auto& row : rows) {
        std::cout << row.method << " / " << row.student_arch << ": ";
        if (row.has_standard && row.has_sftn)
          std::cout << "standard " << sftn::fmt_double(row.standard_acc) << "  sftn "
                    << sftn::fmt_double(row.sftn_acc) << "  delta "
                    << sftn::fmt_double(row.delta) << "\n";
        else
          std::cout << "unpaired (" << (row.has_standard ? "standard" : "sftn")
                    << " arm only)\n";
      }
    } else if (e->parsed()) {
      auto cfg = load_with_overrides(config_path, seed, out, threads);
      auto res = sftn::cmd_eval(cfg, ckpt);
      nlohmann::json j = {{"accuracy", res.accuracy},
                          {"entropy", res.entropy},
                          {"checkpoint_hash", sftn::hash_hex(res.checkpoint_hash)}};
      std::cout << j.dump(2) << "\n";
    } else if (p->parsed()) {
      auto cfg = load_with_overrides(config_path, seed, out, threads);
      auto res = sftn::cmd_probe(cfg, ckpt, probe_epochs);
      nlohmann::json j = {{"probe_accuracy", res.accuracy},
                          {"extractor_hash", sftn::hash_hex(res.extractor_hash)}};
      std::cout << j.dump(2) << "\n";
    }
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 1;
  }
  return 0;
}
