// SPDX-License-Identifier: Apache-2.0
#include "sftn/commands.hpp"

#include <fstream>
#include <iostream>
#include <map>

#include "sftn/checkpoint.hpp"
#include "sftn/kernels.hpp"

namespace sftn {

namespace {

std::string teacher_dir(const ExperimentConfig& cfg) {
  return resolve_out_dir(cfg.out_dir) + "/teacher_" + teacher_mode_name(cfg.teacher_mode);
}

std::string teacher_ckpt_path(const ExperimentConfig& cfg, uint64_t seed) {
  return teacher_dir(cfg) + "/teacher_seed" + std::to_string(seed) + ".ckpt";
}

RunReport base_report(const ExperimentConfig& cfg, const Dataset& ds, const char* kind) {
  RunReport rep;
  rep.kind = kind;
  rep.experiment = cfg.name;
  rep.teacher_mode = teacher_mode_name(cfg.teacher_mode);
  rep.method = distill_method_name(cfg.distill.method);
  rep.teacher_arch = cfg.teacher_arch;
  rep.student_arch = cfg.student_arch;
  rep.dataset_id = ds.id;
  rep.dataset_hash = ds.content_hash;
  rep.config_hash = cfg.config_hash;
  rep.kernel_backend = kern::backend_name();
  rep.threads = num_threads();
  return rep;
}

// Stage-1 run for one seed; returns the trained trunk's test accuracy.
SeedRecord run_teacher_seed(const ExperimentConfig& cfg, const Dataset& ds, uint64_t seed) {
  SeedRecord rec;
  rec.seed = seed;
  TrainResult tr;

  if (cfg.teacher_mode == TeacherMode::Standard) {
    if (cfg.loss.lambda_r_kl != 0 || cfg.loss.lambda_r_ce != 0)
      std::cerr << "warning: teacher_mode=standard ignores lambda_r_kl/lambda_r_ce\n";
    BlockNet<float> net(make_arch(cfg.teacher_arch, ds.dims, ds.classes));
    net.init_params(seed);
    tr = train_standard_teacher(net, ds, cfg.sgd, seed);
    rec.final_acc = accuracy(net, ds, ds.test_idx);
    rec.checkpoint_path = teacher_ckpt_path(cfg, seed);
    save_blocknet(net, rec.checkpoint_path);
  } else {
    SftnModel<float> model(make_arch(cfg.teacher_arch, ds.dims, ds.classes),
                           make_arch(cfg.student_arch, ds.dims, ds.classes));
    if (cfg.teacher_mode == TeacherMode::Sftn) {
      model.init_params(seed);
      tr = train_sftn(model, ds, cfg.sgd, cfg.loss, seed);
    } else {  // sftn-ft: fine-tune a pretrained trunk
      std::string pre = cfg.teacher_ckpt;
      if (pre.empty()) {
        // No pretrained teacher given: produce one with the standard
        // objective under the same settings.
        ExperimentConfig std_cfg = cfg;
        std_cfg.teacher_mode = TeacherMode::Standard;
        pre = teacher_ckpt_path(std_cfg, seed);
        std::ifstream probe(pre);
        if (!probe) {
          BlockNet<float> pretrained(make_arch(cfg.teacher_arch, ds.dims, ds.classes));
          pretrained.init_params(seed);
          train_standard_teacher(pretrained, ds, cfg.sgd, seed);
          ensure_dir(teacher_dir(std_cfg));
          save_blocknet(pretrained, pre);
        }
      }
      BlockNet<float> pretrained = load_blocknet(pre);
      if (pretrained.arch().id != cfg.teacher_arch)
        throw ConfigError("sftn-ft: pretrained checkpoint arch '" + pretrained.arch().id +
                          "' != configured teacher_arch '" + cfg.teacher_arch + "'");
      model.init_params(seed);
      // adopt the pretrained trunk
      auto src = pretrained.state();
      auto dst = model.teacher().state();
      for (size_t i = 0; i < src.size(); ++i) *dst[i].values = *src[i].values;
      tr = finetune_sftn(model, ds, cfg.sgd, cfg.loss, cfg.finetune.epochs_branch_only,
                         cfg.finetune.epochs_joint, seed);
    }
    rec.final_acc = accuracy(model.teacher(), ds, ds.test_idx);
    rec.checkpoint_path = teacher_ckpt_path(cfg, seed);
    save_blocknet(model.teacher(), rec.checkpoint_path);
  }

  rec.teacher_acc = rec.final_acc;
  rec.checkpoint_hash = file_hash(rec.checkpoint_path);
  rec.epochs = tr.epochs;
  rec.wall_seconds = tr.wall_seconds;
  write_teacher_sidecar(rec.checkpoint_path + ".json", cfg.loss,
                        teacher_mode_name(cfg.teacher_mode), seed, cfg.sgd.epochs, ds.id,
                        cfg.config_hash);
  return rec;
}

}  // namespace

RunReport cmd_train_teacher(const ExperimentConfig& cfg) {
  const Dataset ds = cfg.dataset.build();
  ensure_dir(teacher_dir(cfg));
  RunReport rep = base_report(cfg, ds, "train-teacher");
  rep.method = "";
  for (uint64_t seed : cfg.seeds) rep.seeds.push_back(run_teacher_seed(cfg, ds, seed));
  write_report(rep, teacher_dir(cfg));
  return rep;
}

RunReport cmd_distill(const ExperimentConfig& cfg) {
  const Dataset ds = cfg.dataset.build();
  const std::string dir = resolve_out_dir(cfg.out_dir) + "/distill_" +
                          distill_method_name(cfg.distill.method) + "_" +
                          teacher_mode_name(cfg.teacher_mode) + "_" + cfg.student_arch;
  ensure_dir(dir);
  RunReport rep = base_report(cfg, ds, "distill");

  for (uint64_t seed : cfg.seeds) {
    const std::string tpath =
        cfg.teacher_ckpt.empty() ? teacher_ckpt_path(cfg, seed) : cfg.teacher_ckpt;
    std::ifstream probe(tpath);
    if (!probe)
      throw IoError("distill: teacher checkpoint not found: " + tpath +
                    " (train the teacher first or set teacher_ckpt)");
    probe.close();

    BlockNet<float> teacher = load_blocknet(tpath);
    BlockNet<float> student(make_arch(cfg.student_arch, ds.dims, ds.classes));
    student.init_params(derive_seed(seed, 0x57D));

    SeedRecord rec;
    rec.seed = seed;
    rec.teacher_checkpoint_hash = file_hash(tpath);
    auto tr = distill_train(student, teacher, ds, cfg.distill, cfg.distill_sgd, seed);
    rec.epochs = tr.epochs;
    rec.wall_seconds = tr.wall_seconds;
    rec.final_acc = accuracy(student, ds, ds.test_idx);
    rec.teacher_acc = accuracy(teacher, ds, ds.test_idx);
    rec.checkpoint_path = dir + "/student_seed" + std::to_string(seed) + ".ckpt";
    save_blocknet(student, rec.checkpoint_path);
    rec.checkpoint_hash = file_hash(rec.checkpoint_path);
    rec.similarity = similarity_report(teacher, student, ds, ds.test_idx);
    rep.seeds.push_back(std::move(rec));
  }
  write_report(rep, dir);
  return rep;
}

SweepResult cmd_sweep(const ExperimentConfig& cfg, const std::string& axis,
                      const std::vector<std::string>& values) {
  if (values.empty()) throw ConfigError("sweep: empty value list");
  const Dataset ds = cfg.dataset.build();
  const std::string dir = resolve_out_dir(cfg.out_dir) + "/sweep_" + axis;
  ensure_dir(dir);

  SweepResult result;
  result.csv_path = dir + "/sweep.csv";
  std::ofstream csv(result.csv_path, std::ios::trunc);
  if (!csv) throw IoError("cannot write " + result.csv_path);
  csv << "axis,value,seed,teacher_acc,student_acc\n";
  csv.flush();

  for (const std::string& value : values) {
    ExperimentConfig point = cfg;
    point.teacher_mode = TeacherMode::Sftn;
    point.distill.method = DistillMethod::KD;
    if (axis == "tau_tilde") {
      point.loss.tau_tilde = std::stod(value);
    } else if (axis == "lambda_kl") {
      point.loss.lambda_r_kl = std::stod(value);
    } else if (axis == "lambda_ce") {
      point.loss.lambda_r_ce = std::stod(value);
    } else if (axis == "lambda_t") {
      point.loss.lambda_t = std::stod(value);
    } else if (axis == "branches") {
      // values like "1", "2", "1+2"
      point.loss.branches.clear();
      for (size_t at = 0; at < value.size();) {
        size_t end = value.find('+', at);
        if (end == std::string::npos) end = value.size();
        point.loss.branches.push_back(std::stoi(value.substr(at, end - at)));
        at = end + 1;
      }
    } else {
      throw ConfigError("sweep: unknown axis '" + axis +
                        "' (expected tau_tilde|lambda_kl|lambda_ce|lambda_t|branches)");
    }
    point.out_dir = cfg.out_dir + "/sweep_" + axis + "/point_" + value;

    for (uint64_t seed : cfg.seeds) {
      SweepRow row;
      row.value = value;
      row.seed = seed;
      try {
        ExperimentConfig one = point;
        one.seeds = {seed};
        RunReport trep = cmd_train_teacher(one);
        one.teacher_ckpt.clear();
        RunReport drep = cmd_distill(one);
        row.teacher_acc = trep.seeds[0].final_acc;
        row.student_acc = drep.seeds[0].final_acc;
        row.ok = true;
      } catch (const std::exception& e) {
        row.ok = false;
        row.error = e.what();
        ++result.failures;
        std::cerr << "sweep point " << axis << "=" << value << " seed " << seed
                  << " aborted: " << e.what() << "\n";
      }
      if (row.ok) {
        csv << axis << "," << row.value << "," << row.seed << ","
            << fmt_double(row.teacher_acc) << "," << fmt_double(row.student_acc) << "\n";
        csv.flush();  // partial sweeps keep completed rows
      }
      result.rows.push_back(std::move(row));
    }
  }
  return result;
}

std::vector<ComparisonRow> cmd_report(const std::vector<std::string>& run_dirs,
                                      const std::string& out_dir) {
  struct Arm {
    bool present = false;
    double mean = 0, stdev = 0;
    std::optional<SimilarityReport> sim;
  };
  struct Pair {
    Arm standard, sftn;
  };
  std::map<std::string, Pair> pairs;  // key: dataset_hash|student_arch|method

  for (const auto& dir : run_dirs) {
    RunReport r = read_report(dir);
    if (r.kind != "distill") continue;
    const std::string key =
        hash_hex(r.dataset_hash) + "|" + r.student_arch + "|" + r.method;
    Arm arm;
    arm.present = true;
    arm.mean = r.mean_final_acc();
    arm.stdev = r.std_final_acc();
    // mean similarity over seeds
    SimilarityReport acc;
    int n = 0;
    for (const auto& s : r.seeds) {
      if (!s.similarity) continue;
      acc.mean_kl += s.similarity->mean_kl;
      acc.cka += s.similarity->cka;
      acc.top1_agreement += s.similarity->top1_agreement;
      acc.teacher_entropy += s.similarity->teacher_entropy;
      acc.student_entropy += s.similarity->student_entropy;
      ++n;
    }
    if (n > 0) {
      acc.mean_kl /= n;
      acc.cka /= n;
      acc.top1_agreement /= n;
      acc.teacher_entropy /= n;
      acc.student_entropy /= n;
      arm.sim = acc;
    }
    auto& p = pairs[key + "|" + r.dataset_id];
    if (r.teacher_mode == "standard")
      p.standard = arm;
    else
      p.sftn = arm;
  }

  std::vector<ComparisonRow> rows;
  for (const auto& [key, p] : pairs) {
    // key: hash|student|method|dataset_id
    const size_t a = key.find('|');
    const size_t b = key.find('|', a + 1);
    const size_t c = key.find('|', b + 1);
    ComparisonRow row;
    row.student_arch = key.substr(a + 1, b - a - 1);
    row.method = key.substr(b + 1, c - b - 1);
    row.dataset_id = key.substr(c + 1);
    row.has_standard = p.standard.present;
    row.has_sftn = p.sftn.present;
    row.standard_acc = p.standard.mean;
    row.standard_std = p.standard.stdev;
    row.sftn_acc = p.sftn.mean;
    row.sftn_std = p.sftn.stdev;
    row.standard_sim = p.standard.sim;
    row.sftn_sim = p.sftn.sim;
    if (row.has_standard && row.has_sftn) row.delta = row.sftn_acc - row.standard_acc;
    rows.push_back(std::move(row));
  }

  if (!out_dir.empty()) {
    ensure_dir(out_dir);
    std::ofstream cs(out_dir + "/compare.csv");
    cs << "method,student_arch,dataset_id,standard_acc,standard_std,sftn_acc,sftn_std,"
          "delta\n";
    for (const auto& r : rows) {
      cs << r.method << "," << r.student_arch << "," << r.dataset_id << ","
         << (r.has_standard ? fmt_double(r.standard_acc) : "") << ","
         << (r.has_standard ? fmt_double(r.standard_std) : "") << ","
         << (r.has_sftn ? fmt_double(r.sftn_acc) : "") << ","
         << (r.has_sftn ? fmt_double(r.sftn_std) : "") << ","
         << (r.has_standard && r.has_sftn ? fmt_double(r.delta) : "") << "\n";
    }
    std::ofstream ss(out_dir + "/similarity.csv");
    ss << "method,student_arch,arm,mean_kl,cka,top1_agreement,teacher_entropy,"
          "student_entropy\n";
    for (const auto& r : rows) {
      auto emit = [&](const char* arm, const std::optional<SimilarityReport>& s) {
        if (!s) return;
        ss << r.method << "," << r.student_arch << "," << arm << "," << fmt_double(s->mean_kl)
           << "," << fmt_double(s->cka) << "," << fmt_double(s->top1_agreement) << ","
           << fmt_double(s->teacher_entropy) << "," << fmt_double(s->student_entropy) << "\n";
      };
      emit("standard", r.standard_sim);
      emit("sftn", r.sftn_sim);
    }
  }
  return rows;
}

EvalResult cmd_eval(const ExperimentConfig& cfg, const std::string& ckpt_path) {
  const Dataset ds = cfg.dataset.build();
  BlockNet<float> net = load_blocknet(ckpt_path);
  EvalResult res;
  res.accuracy = accuracy(net, ds, ds.test_idx);
  res.entropy = prediction_entropy(net, ds, ds.test_idx);
  res.checkpoint_hash = file_hash(ckpt_path);
  return res;
}

ProbeResult cmd_probe(const ExperimentConfig& cfg, const std::string& ckpt_path,
                      int probe_epochs) {
  const Dataset target = cfg.dataset.build();
  BlockNet<float> net = load_blocknet(ckpt_path);
  return linear_probe_transfer(net, target, probe_epochs, cfg.seeds.front());
}

}  // namespace sftn
