// SPDX-License-Identifier: Apache-2.0
#include "sftn/report.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace sftn {

namespace {

using nlohmann::json;

json epochs_to_json(const std::vector<EpochLog>& epochs) {
  json arr = json::array();
  for (const auto& e : epochs) {
    arr.push_back({{"epoch", e.epoch},
                   {"lr", e.lr},
                   {"loss", e.loss},
                   {"teacher_ce", e.teacher_ce},
                   {"branch_kl", e.branch_kl},
                   {"branch_ce", e.branch_ce},
                   {"hint", e.hint},
                   {"test_acc", e.test_acc}});
  }
  return arr;
}

std::vector<EpochLog> epochs_from_json(const json& arr) {
  std::vector<EpochLog> out;
  for (const auto& e : arr) {
    EpochLog l;
    l.epoch = e.at("epoch").get<int>();
    l.lr = e.at("lr").get<double>();
    l.loss = e.at("loss").get<double>();
    l.teacher_ce = e.at("teacher_ce").get<double>();
    l.branch_kl = e.at("branch_kl").get<double>();
    l.branch_ce = e.at("branch_ce").get<double>();
    l.hint = e.at("hint").get<double>();
    l.test_acc = e.at("test_acc").get<double>();
    out.push_back(l);
  }
  return out;
}

json sim_to_json(const SimilarityReport& s) {
  return {{"mean_kl", s.mean_kl},
          {"kl_convention", "mean-per-sample, nats"},
          {"cka", s.cka},
          {"top1_agreement", s.top1_agreement},
          {"teacher_entropy", s.teacher_entropy},
          {"student_entropy", s.student_entropy}};
}

// Core document: everything that must reproduce bit-for-bit across reruns.
json core_json(const RunReport& r) {
  json seeds = json::array();
  for (const auto& s : r.seeds) {
    json rec = {{"seed", s.seed},
                {"final_acc", s.final_acc},
                {"teacher_acc", s.teacher_acc},
                {"checkpoint_hash", hash_hex(s.checkpoint_hash)},
                {"checkpoint_path", s.checkpoint_path},
                {"teacher_checkpoint_hash", hash_hex(s.teacher_checkpoint_hash)},
                {"epochs", epochs_to_json(s.epochs)}};
    if (s.similarity) rec["similarity"] = sim_to_json(*s.similarity);
    seeds.push_back(rec);
  }
  return {{"schema_version", r.schema_version},
          {"kind", r.kind},
          {"experiment", r.experiment},
          {"teacher_mode", r.teacher_mode},
          {"method", r.method},
          {"teacher_arch", r.teacher_arch},
          {"student_arch", r.student_arch},
          {"dataset_id", r.dataset_id},
          {"dataset_hash", hash_hex(r.dataset_hash)},
          {"config_hash", hash_hex(r.config_hash)},
          {"kernel_backend", r.kernel_backend},
          {"threads", r.threads},
          {"mean_final_acc", r.mean_final_acc()},
          {"std_final_acc", r.std_final_acc()},
          {"seeds", seeds}};
}

}  // namespace

double RunReport::mean_final_acc() const {
  if (seeds.empty()) return 0;
  double s = 0;
  for (const auto& r : seeds) s += r.final_acc;
  return s / double(seeds.size());
}

double RunReport::std_final_acc() const {
  if (seeds.size() < 2) return 0;
  const double m = mean_final_acc();
  double s = 0;
  for (const auto& r : seeds) s += (r.final_acc - m) * (r.final_acc - m);
  return std::sqrt(s / double(seeds.size() - 1));
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void ensure_dir(const std::string& dir) { std::filesystem::create_directories(dir); }

uint64_t report_hash(const RunReport& rep) { return fnv1a64_str(core_json(rep).dump()); }

uint64_t write_report(const RunReport& rep, const std::string& dir) {
  ensure_dir(dir);
  json doc = core_json(rep);
  const uint64_t h = fnv1a64_str(doc.dump());
  doc["report_hash"] = hash_hex(h);
  // volatile provenance, excluded from the hash
  double wall = 0;
  for (const auto& s : rep.seeds) wall += s.wall_seconds;
  doc["wall_seconds"] = wall;

  std::ofstream js(dir + "/report.json");
  if (!js) throw IoError("cannot write " + dir + "/report.json");
  js << doc.dump(2) << "\n";

  std::ofstream cs(dir + "/report.csv");
  if (!cs) throw IoError("cannot write " + dir + "/report.csv");
  cs << "seed,final_acc,teacher_acc,checkpoint_hash,teacher_checkpoint_hash\n";
  for (const auto& s : rep.seeds)
    cs << s.seed << "," << fmt_double(s.final_acc) << "," << fmt_double(s.teacher_acc) << ","
       << hash_hex(s.checkpoint_hash) << "," << hash_hex(s.teacher_checkpoint_hash) << "\n";

  for (const auto& s : rep.seeds) {
    std::ofstream es(dir + "/epochs_seed" + std::to_string(s.seed) + ".csv");
    es << "epoch,lr,loss,teacher_ce,branch_kl,branch_ce,hint,test_acc\n";
    for (const auto& e : s.epochs)
      es << e.epoch << "," << fmt_double(e.lr) << "," << fmt_double(e.loss) << ","
         << fmt_double(e.teacher_ce) << "," << fmt_double(e.branch_kl) << ","
         << fmt_double(e.branch_ce) << "," << fmt_double(e.hint) << ","
         << fmt_double(e.test_acc) << "\n";
  }
  return h;
}

RunReport read_report(const std::string& dir) {
  std::ifstream is(dir + "/report.json");
  if (!is) throw IoError("cannot open " + dir + "/report.json");
  json doc;
  try {
    is >> doc;
  } catch (const json::exception& e) {
    throw IoError(dir + "/report.json is not valid JSON: " + e.what());
  }
  RunReport r;
  r.schema_version = doc.at("schema_version").get<int>();
  if (r.schema_version != kReportSchemaVersion)
    throw IoError(dir + ": unsupported report schema version " +
                  std::to_string(r.schema_version));
  r.kind = doc.at("kind").get<std::string>();
  r.experiment = doc.at("experiment").get<std::string>();
  r.teacher_mode = doc.at("teacher_mode").get<std::string>();
  r.method = doc.at("method").get<std::string>();
  r.teacher_arch = doc.at("teacher_arch").get<std::string>();
  r.student_arch = doc.at("student_arch").get<std::string>();
  r.dataset_id = doc.at("dataset_id").get<std::string>();
  r.dataset_hash = std::stoull(doc.at("dataset_hash").get<std::string>(), nullptr, 16);
  r.config_hash = std::stoull(doc.at("config_hash").get<std::string>(), nullptr, 16);
  r.kernel_backend = doc.at("kernel_backend").get<std::string>();
  r.threads = doc.at("threads").get<int>();
  for (const auto& s : doc.at("seeds")) {
    SeedRecord rec;
    rec.seed = s.at("seed").get<uint64_t>();
    rec.final_acc = s.at("final_acc").get<double>();
    rec.teacher_acc = s.at("teacher_acc").get<double>();
    rec.checkpoint_hash = std::stoull(s.at("checkpoint_hash").get<std::string>(), nullptr, 16);
    rec.checkpoint_path = s.at("checkpoint_path").get<std::string>();
    rec.teacher_checkpoint_hash =
        std::stoull(s.at("teacher_checkpoint_hash").get<std::string>(), nullptr, 16);
    rec.epochs = epochs_from_json(s.at("epochs"));
    if (s.contains("similarity")) {
      SimilarityReport sim;
      const auto& sj = s.at("similarity");
      sim.mean_kl = sj.at("mean_kl").get<double>();
      sim.cka = sj.at("cka").get<double>();
      sim.top1_agreement = sj.at("top1_agreement").get<double>();
      sim.teacher_entropy = sj.at("teacher_entropy").get<double>();
      sim.student_entropy = sj.at("student_entropy").get<double>();
      rec.similarity = sim;
    }
    r.seeds.push_back(std::move(rec));
  }
  return r;
}

void write_teacher_sidecar(const std::string& path, const LossConfig& loss,
                           const std::string& teacher_mode, uint64_t seed, int epochs,
                           const std::string& dataset_id, uint64_t config_hash) {
  json doc = {{"teacher_mode", teacher_mode},
              {"seed", seed},
              {"epochs", epochs},
              {"dataset_id", dataset_id},
              {"config_hash", hash_hex(config_hash)},
              {"loss",
               {{"lambda_t", loss.lambda_t},
                {"lambda_r_kl", loss.lambda_r_kl},
                {"lambda_r_ce", loss.lambda_r_ce},
                {"tau_tilde", loss.tau_tilde},
                {"tau_kd", loss.tau_kd},
                {"lambda_kd", loss.lambda_kd},
                {"branches", loss.branches}}}};
  std::ofstream os(path);
  if (!os) throw IoError("cannot write sidecar: " + path);
  os << doc.dump(2) << "\n";
}

}  // namespace sftn
