// SPDX-License-Identifier: Apache-2.0
#include "sftn/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>

#include <json.hpp>

namespace sftn {

namespace {

using nlohmann::json;

// Wraps an object node and tracks which keys a parser consumed; anything
// left over is a config error naming the full field path.
struct Obj {
  const json& j;
  std::string path;
  std::set<std::string> seen;

  Obj(const json& node, std::string p) : j(node), path(std::move(p)) {
    if (!j.is_object()) throw ConfigError("config: " + path + " must be an object");
  }
  ~Obj() = default;

  bool has(const std::string& key) {
    seen.insert(key);
    return j.contains(key);
  }
  const json& at(const std::string& key) { return j.at(key); }

  template <class T>
  void get(const std::string& key, T& out) {
    if (!has(key)) return;
    try {
      out = j.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError("config: " + path + "." + key + " has the wrong type");
    }
  }

  void check_unknown() {
    for (auto it = j.begin(); it != j.end(); ++it)
      if (!seen.count(it.key()))
        throw ConfigError("config: unknown key '" + path + "." + it.key() + "'");
  }
};

void parse_dataset(const json& j, const std::string& path, DatasetSpec& out) {
  Obj o(j, path);
  o.get("kind", out.kind);
  o.get("task", out.task);
  o.get("n", out.n);
  o.get("seed", out.seed);
  o.get("path", out.path);
  o.get("labels_path", out.labels_path);
  o.check_unknown();
  if (out.kind != "synth-vision" && out.kind != "sfds" && out.kind != "idx")
    throw ConfigError("config: " + path + ".kind must be synth-vision|sfds|idx");
  if (out.kind == "synth-vision" && out.task != "primary" && out.task != "transfer")
    throw ConfigError("config: " + path + ".task must be primary|transfer");
  if (out.kind != "synth-vision" && out.path.empty())
    throw ConfigError("config: " + path + ".path required for kind " + out.kind);
  if (out.kind == "idx" && out.labels_path.empty())
    throw ConfigError("config: " + path + ".labels_path required for kind idx");
}

void parse_loss(const json& j, const std::string& path, LossConfig& out) {
  Obj o(j, path);
  o.get("lambda_t", out.lambda_t);
  o.get("lambda_r_kl", out.lambda_r_kl);
  o.get("lambda_r_ce", out.lambda_r_ce);
  o.get("tau_tilde", out.tau_tilde);
  o.get("tau_kd", out.tau_kd);
  o.get("lambda_kd", out.lambda_kd);
  o.get("branches", out.branches);
  o.check_unknown();
}

void parse_distill(const json& j, const std::string& path, DistillConfig& out,
                   const LossConfig& loss) {
  Obj o(j, path);
  std::string method = distill_method_name(out.method);
  o.get("method", method);
  out.method = parse_distill_method(method);
  out.tau_kd = loss.tau_kd;      // stage-2 temperature and KL weight live in
  out.lambda_kd = loss.lambda_kd;  // the loss section; distill adds the rest
  o.get("lambda_hint", out.lambda_hint);
  o.get("hint_blocks", out.hint_blocks);
  o.check_unknown();
}

void parse_sgd(const json& j, const std::string& path, SgdConfig& out) {
  Obj o(j, path);
  o.get("lr", out.lr);
  o.get("momentum", out.momentum);
  o.get("weight_decay", out.weight_decay);
  o.get("epochs", out.epochs);
  o.get("milestones", out.milestones);
  o.get("decay_factor", out.decay_factor);
  o.get("batch_size", out.batch_size);
  o.check_unknown();
  try {
    out.validate();
  } catch (const ConfigError& e) {
    throw ConfigError("config: " + path + ": " + e.what());
  }
}

void parse_finetune(const json& j, const std::string& path, FinetuneConfig& out) {
  Obj o(j, path);
  o.get("epochs_branch_only", out.epochs_branch_only);
  o.get("epochs_joint", out.epochs_joint);
  o.check_unknown();
  if (out.epochs_branch_only < 0 || out.epochs_joint < 0)
    throw ConfigError("config: " + path + ": epoch counts must be >= 0");
}

}  // namespace

Dataset DatasetSpec::build() const {
  if (kind == "synth-vision")
    return gen_synth_vision(task == "primary" ? SynthTask::Primary : SynthTask::Transfer, n,
                            seed);
  if (kind == "sfds") return load_sfds(path);
  return load_idx(path, labels_path);
}

std::string DatasetSpec::describe() const {
  if (kind == "synth-vision")
    return "synth-vision/" + task + "/n" + std::to_string(n) + "/seed" + std::to_string(seed);
  if (kind == "sfds") return "sfds:" + path;
  return "idx:" + path;
}

void ExperimentConfig::validate() const {
  if (seeds.empty()) throw ConfigError("config: seeds must be nonempty");
  sgd.validate();
  distill_sgd.validate();
  distill.validate();
  // Branch-count checks need the arch; done when the model is built.
  if (loss.lambda_t < 0 || loss.lambda_r_kl < 0 || loss.lambda_r_ce < 0)
    throw ConfigError("config: loss weights must be nonnegative");
  if (loss.tau_tilde <= 0 || loss.tau_kd <= 0)
    throw ConfigError("config: temperatures must be positive");
}

ExperimentConfig parse_config_text(const std::string& json_text, const std::string& origin) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError("config: " + origin + " is not valid JSON: " + e.what());
  }
  ExperimentConfig cfg;
  Obj o(j, origin);
  o.get("name", cfg.name);
  o.get("teacher_arch", cfg.teacher_arch);
  o.get("student_arch", cfg.student_arch);
  if (o.has("teacher_mode"))
    cfg.teacher_mode = parse_teacher_mode(o.at("teacher_mode").get<std::string>());
  if (o.has("dataset")) parse_dataset(o.at("dataset"), origin + ".dataset", cfg.dataset);
  if (o.has("loss")) parse_loss(o.at("loss"), origin + ".loss", cfg.loss);
  if (o.has("sgd")) parse_sgd(o.at("sgd"), origin + ".sgd", cfg.sgd);
  cfg.distill_sgd = cfg.sgd;
  if (o.has("distill_sgd")) parse_sgd(o.at("distill_sgd"), origin + ".distill_sgd", cfg.distill_sgd);
  if (o.has("distill")) parse_distill(o.at("distill"), origin + ".distill", cfg.distill, cfg.loss);
  else {
    cfg.distill.tau_kd = cfg.loss.tau_kd;
    cfg.distill.lambda_kd = cfg.loss.lambda_kd;
  }
  if (o.has("finetune")) parse_finetune(o.at("finetune"), origin + ".finetune", cfg.finetune);
  o.get("seeds", cfg.seeds);
  o.get("out_dir", cfg.out_dir);
  o.get("teacher_ckpt", cfg.teacher_ckpt);
  o.get("threads", cfg.threads);
  o.check_unknown();
  cfg.validate();
  cfg.config_hash = fnv1a64_str(j.dump());
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config: " + path);
  std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return parse_config_text(text, path);
}

std::string resolve_out_dir(const std::string& out_dir) {
  if (!out_dir.empty() && out_dir[0] == '/') return out_dir;
  if (const char* root = std::getenv("SFTN_OUT_ROOT"))
    return std::string(root) + "/" + out_dir;
  return out_dir;
}

}  // namespace sftn
