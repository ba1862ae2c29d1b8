#include "whisperer/harness.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "whisperer/core/digest.hpp"
#include "whisperer/filters.hpp"

namespace fs = std::filesystem;

namespace whisperer {

nlohmann::json RunConfig::to_json() const {
  return nlohmann::json{{"corpus", corpus.to_json()},
                        {"frozen", frozen.to_json()},
                        {"encoder", encoder.to_json()},
                        {"curriculum", curriculum.to_json()},
                        {"eval_split", eval_split},
                        {"out_dir", out_dir},
                        {"seed", seed}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  static const std::vector<std::string> known = {"corpus",     "frozen",  "encoder",
                                                 "curriculum", "eval_split", "out_dir",
                                                 "seed"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(known.begin(), known.end(), it.key()) == known.end()) {
      throw std::invalid_argument("RunConfig: unknown key '" + it.key() + "'");
    }
  }
  RunConfig c;
  if (j.contains("corpus")) c.corpus = CorpusConfig::from_json(j["corpus"]);
  if (j.contains("frozen")) c.frozen = CrnnConfig::from_json(j["frozen"]);
  if (j.contains("encoder")) c.encoder = EncoderConfig::from_json(j["encoder"]);
  if (j.contains("curriculum")) c.curriculum = CurriculumConfig::from_json(j["curriculum"]);
  c.eval_split = j.value("eval_split", c.eval_split);
  c.out_dir = j.value("out_dir", c.out_dir);
  c.seed = j.value("seed", c.seed);
  return c;
}

void RunConfig::normalize() {
  Rng master(seed);
  corpus.seed = master.child("corpus").seed();
  frozen.seed = master.child("frozen").seed();
  encoder.seed = master.child("encoder").seed();
  curriculum.seed = master.child("curriculum").seed();
  if (corpus.out_dir.empty()) corpus.out_dir = (fs::path(out_dir) / "corpus").string();
  frozen.height = corpus.height;
  frozen.width = corpus.width;
  frozen.charset = corpus.charset;
  encoder.height = corpus.height;
  encoder.width = corpus.width;
  curriculum.policy.global_dim = encoder.bottleneck_channels;
  curriculum.policy.token_channels = encoder.bottleneck_channels;
  curriculum.stage1.stage = 1;
  curriculum.stage2.stage = 2;
  curriculum.stage3.stage = 3;
  curriculum.stage4.stage = 4;
  curriculum.stage1.validate();
  curriculum.stage2.validate();
  curriculum.stage3.validate();
  curriculum.stage4.validate();
  curriculum.policy.validate();
}

namespace {

void apply_override(nlohmann::json& j, const std::string& kv) {
  const size_t eq = kv.find('=');
  if (eq == std::string::npos) {
    throw std::invalid_argument("override must be key.path=value: " + kv);
  }
  const std::string path = kv.substr(0, eq);
  const std::string value = kv.substr(eq + 1);
  nlohmann::json* node = &j;
  size_t start = 0;
  while (true) {
    const size_t dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
    if (key.empty()) throw std::invalid_argument("override has empty key segment: " + kv);
    if (dot == std::string::npos) {
      nlohmann::json parsed;
      try {
        parsed = nlohmann::json::parse(value);
      } catch (...) {
        parsed = value;  // plain string
      }
      (*node)[key] = parsed;
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

}  // namespace

RunConfig load_run_config(const std::string& config_path,
                          const std::vector<std::string>& overrides, uint64_t seed,
                          const std::string& out_dir) {
  nlohmann::json j = nlohmann::json::object();
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw std::runtime_error("load_run_config: cannot open " + config_path);
    j = nlohmann::json::parse(in);
  }
  for (const auto& kv : overrides) apply_override(j, kv);
  RunConfig cfg = RunConfig::from_json(j);
  cfg.seed = seed;
  if (!out_dir.empty()) cfg.out_dir = out_dir;
  if (cfg.out_dir.empty()) throw std::invalid_argument("load_run_config: out_dir required");
  cfg.normalize();
  return cfg;
}

std::string config_hash(const RunConfig& cfg) {
  const std::string s = cfg.to_json().dump();
  return sha256_hex(s.data(), s.size());
}

nlohmann::json ComparisonReport::to_json() const {
  nlohmann::json rows_json = nlohmann::json::array();
  for (const auto& r : rows) {
    rows_json.push_back({{"method_name", r.method_name},
                         {"mean_cer", r.mean_cer},
                         {"mean_confidence", r.mean_confidence},
                         {"mean_reward", r.mean_reward},
                         {"delta_vs_original", r.delta_vs_original},
                         {"delta_rel_pct", r.delta_rel_pct}});
  }
  nlohmann::json j{{"schema", schema},
                   {"rows", rows_json},
                   {"constraint_stats",
                    {{"mean_final_linf", mean_final_linf},
                     {"ssim_violation_rate", ssim_violation_rate}}},
                   {"pac", pac}};
  if (has_t_tests) {
    j["t_test"] = {{"vs_original", {{"t", t_vs_original.t}, {"p", t_vs_original.p}}},
                   {"vs_best_filter", {{"t", t_vs_best_filter.t}, {"p", t_vs_best_filter.p}}}};
  }
  return j;
}

ComparisonReport ComparisonReport::from_json(const nlohmann::json& j) {
  ComparisonReport r;
  r.schema = j.value("schema", 1);
  for (const auto& row : j.at("rows")) {
    ReportRow rr;
    rr.method_name = row.at("method_name").get<std::string>();
    rr.mean_cer = row.at("mean_cer").get<double>();
    rr.mean_confidence = row.at("mean_confidence").get<double>();
    rr.mean_reward = row.at("mean_reward").get<double>();
    rr.delta_vs_original = row.at("delta_vs_original").get<double>();
    rr.delta_rel_pct = row.at("delta_rel_pct").get<double>();
    r.rows.push_back(rr);
  }
  if (j.contains("t_test")) {
    r.has_t_tests = true;
    r.t_vs_original.t = j["t_test"]["vs_original"]["t"].get<double>();
    r.t_vs_original.p = j["t_test"]["vs_original"]["p"].get<double>();
    r.t_vs_best_filter.t = j["t_test"]["vs_best_filter"]["t"].get<double>();
    r.t_vs_best_filter.p = j["t_test"]["vs_best_filter"]["p"].get<double>();
  }
  if (j.contains("constraint_stats")) {
    r.mean_final_linf = j["constraint_stats"].value("mean_final_linf", 0.0);
    r.ssim_violation_rate = j["constraint_stats"].value("ssim_violation_rate", 0.0);
  }
  r.pac = j.value("pac", 0.0);
  return r;
}

namespace {

ReportRow make_row(const std::string& name, const EvalSummary& s, double original_cer) {
  ReportRow r;
  r.method_name = name;
  r.mean_cer = s.mean_cer;
  r.mean_confidence = s.mean_confidence;
  r.mean_reward = s.mean_reward;
  r.delta_vs_original = (s.mean_cer - original_cer) * 100.0;
  r.delta_rel_pct = original_cer > 0.0 ? (s.mean_cer - original_cer) / original_cer * 100.0 : 0.0;
  return r;
}

}  // namespace

ComparisonReport run_baselines(const FrozenModelHandle& frozen, const Manifest& manifest,
                               const std::string& split_name,
                               std::map<std::string, std::vector<RewardRecord>>* per_sample) {
  ComparisonReport report;
  std::map<std::string, EvalSummary> summaries;
  for (const auto& f : filter_catalog()) {
    EvalSummary s = evaluate(frozen, manifest, split_name,
                             [&f](const Image& img) { return apply_filter(img, f); });
    if (per_sample) (*per_sample)[f.name] = s.per_sample;
    summaries[f.name] = std::move(s);
    std::cerr << "[baselines] " << f.name << " mean_cer=" << summaries[f.name].mean_cer
              << " mean_reward=" << summaries[f.name].mean_reward << "\n";
  }
  const double original_cer = summaries.at("original").mean_cer;
  for (const auto& [name, s] : summaries) {
    report.rows.push_back(make_row(name, s, original_cer));
    report.pac = std::max(report.pac, s.mean_reward);
  }
  std::sort(report.rows.begin(), report.rows.end(), [](const ReportRow& a, const ReportRow& b) {
    if (a.mean_cer != b.mean_cer) return a.mean_cer < b.mean_cer;
    return a.method_name < b.method_name;
  });
  return report;
}

Manifest ensure_corpus(const RunConfig& cfg) {
  const fs::path manifest_path = fs::path(cfg.corpus.out_dir) / "manifest.jsonl";
  if (fs::exists(manifest_path)) {
    std::cerr << "[corpus] loading existing manifest " << manifest_path << "\n";
    return load_manifest(manifest_path.string());
  }
  std::cerr << "[corpus] generating corpus under " << cfg.corpus.out_dir << "\n";
  return build_corpus(cfg.corpus);
}

FrozenModelHandle ensure_frozen(const RunConfig& cfg, const Manifest& manifest) {
  const fs::path path = fs::path(cfg.out_dir) / "frozen" / "crnn.ckpt";
  if (fs::exists(path)) {
    std::cerr << "[frozen] loading " << path << "\n";
    return load_frozen_model(path.string());
  }
  fs::create_directories(path.parent_path());
  FrozenTrainReport rep;
  FrozenModelHandle handle = train_frozen_ocr(manifest, cfg.frozen, &rep);
  save_frozen_model(handle, path.string());
  nlohmann::json meta{{"clean_val_cer", rep.clean_val_cer},
                      {"epochs_run", rep.epochs_run},
                      {"frozen_hash", handle->frozen_hash()}};
  std::ofstream mo(path.parent_path() / "train_report.json", std::ios::trunc);
  mo << meta.dump(2) << "\n";
  return handle;
}

EncoderHandlePtr ensure_encoder(const RunConfig& cfg, const Manifest& manifest) {
  const fs::path path = fs::path(cfg.out_dir) / "encoder" / "pe.ckpt";
  if (fs::exists(path)) {
    std::cerr << "[encoder] loading " << path << "\n";
    return load_encoder(path.string());
  }
  fs::create_directories(path.parent_path());
  EncoderTrainReport rep;
  EncoderHandlePtr handle = train_encoder(manifest, cfg.encoder, &rep);
  save_encoder(handle, path.string());
  nlohmann::json meta{{"val_ssim", rep.val_ssim},
                      {"epochs_run", rep.epochs_run},
                      {"frozen_hash", handle->frozen_hash()}};
  std::ofstream mo(path.parent_path() / "train_report.json", std::ios::trunc);
  mo << meta.dump(2) << "\n";
  return handle;
}

ComparisonReport run_full_experiment(const RunConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  {
    // Config snapshot; guards against drift during long runs.
    std::ofstream out(fs::path(cfg.out_dir) / "config.json", std::ios::trunc);
    out << cfg.to_json().dump(2) << "\n";
    std::ofstream hash_out(fs::path(cfg.out_dir) / "config.hash", std::ios::trunc);
    hash_out << config_hash(cfg) << "\n";
  }

  const Manifest manifest = ensure_corpus(cfg);
  const FrozenModelHandle frozen = ensure_frozen(cfg, manifest);
  const EncoderHandlePtr encoder = ensure_encoder(cfg, manifest);
  const std::string frozen_hash_start = frozen->frozen_hash();

  const CurriculumResult cur =
      run_curriculum(manifest, frozen, *encoder, cfg.curriculum, cfg.out_dir);

  // Baseline table over the eval split.
  std::map<std::string, std::vector<RewardRecord>> per_sample;
  const ComparisonReport baselines =
      run_baselines(frozen, manifest, cfg.eval_split, &per_sample);
  const fs::path report_dir = fs::path(cfg.out_dir) / "report";
  fs::create_directories(report_dir);
  {
    std::ofstream out(report_dir / "baselines.json", std::ios::trunc);
    out << baselines.to_json().dump(2) << "\n";
  }

  // Best non-identity filter by mean CER.
  const ReportRow* best_filter = nullptr;
  for (const auto& row : baselines.rows) {
    if (row.method_name == "original") continue;
    if (!best_filter || row.mean_cer < best_filter->mean_cer) best_filter = &row;
  }
  if (!best_filter) throw std::runtime_error("run_full_experiment: no filter rows");

  const PolicyEvalResult whisper_eval =
      evaluate_policy(frozen, manifest, cfg.eval_split, *cur.final_checkpoint.net, *encoder,
                      cfg.curriculum.refine_steps, cfg.curriculum.policy.epsilon);

  const auto& orig_records = per_sample.at("original");
  const auto& best_records = per_sample.at(best_filter->method_name);
  const auto& whisper_records = whisper_eval.summary.per_sample;
  if (orig_records.size() != whisper_records.size()) {
    throw std::runtime_error("run_full_experiment: per-sample record count mismatch");
  }
  std::vector<double> diff_orig(orig_records.size()), diff_best(orig_records.size());
  for (size_t i = 0; i < orig_records.size(); ++i) {
    diff_orig[i] = whisper_records[i].cer - orig_records[i].cer;
    diff_best[i] = whisper_records[i].cer - best_records[i].cer;
  }

  ComparisonReport report;
  const double original_cer =
      summarize(std::vector<RewardRecord>(orig_records)).mean_cer;
  report.rows.push_back(
      make_row("original", summarize(std::vector<RewardRecord>(orig_records)), original_cer));
  report.rows.push_back(make_row(best_filter->method_name + " (best filter)",
                                 summarize(std::vector<RewardRecord>(best_records)),
                                 original_cer));
  report.rows.push_back(make_row("whisperer", whisper_eval.summary, original_cer));
  report.has_t_tests = true;
  report.t_vs_original = paired_t_test(diff_orig);
  report.t_vs_best_filter = paired_t_test(diff_best);
  report.mean_final_linf = whisper_eval.mean_final_linf;
  report.ssim_violation_rate = whisper_eval.ssim_violation_rate;
  report.pac = baselines.pac;

  emit_report(report, report_dir.string());
  {
    // Per-sample records per method beside the report.
    std::ofstream out(report_dir / "per_sample.jsonl", std::ios::trunc);
    auto dump_records = [&](const std::string& method, const std::vector<RewardRecord>& recs) {
      for (size_t i = 0; i < recs.size(); ++i) {
        out << nlohmann::json{{"method", method},
                              {"index", i},
                              {"cer", recs[i].cer},
                              {"cer_raw", recs[i].cer_raw},
                              {"confidence", recs[i].confidence},
                              {"reward", recs[i].reward}}
                   .dump()
            << "\n";
      }
    };
    dump_records("original", orig_records);
    dump_records(best_filter->method_name, best_records);
    dump_records("whisperer", whisper_records);
  }

  if (frozen->frozen_hash() != frozen_hash_start) {
    throw std::runtime_error("run_full_experiment: frozen model hash changed");
  }
  return report;
}

std::string format_delta_pp(double delta_pp) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%+.1f%%", delta_pp);
  return std::string(buf);
}

std::string report_markdown(const ComparisonReport& report) {
  std::string md;
  md += "| Method | Mean CER | Confidence | Δ vs Original |\n";
  md += "|---|---|---|---|\n";
  char buf[128];
  for (const auto& r : report.rows) {
    const std::string delta =
        r.method_name == "original" ? "—" : format_delta_pp(r.delta_vs_original);
    std::snprintf(buf, sizeof(buf), "| %s | %.4f | %.2f | %s |\n", r.method_name.c_str(),
                  r.mean_cer, r.mean_confidence, delta.c_str());
    md += buf;
  }
  if (report.has_t_tests) {
    std::snprintf(buf, sizeof(buf),
                  "\npaired t vs original: t=%.3f p=%.3g; vs best filter: t=%.3f p=%.3g\n",
                  report.t_vs_original.t, report.t_vs_original.p, report.t_vs_best_filter.t,
                  report.t_vs_best_filter.p);
    md += buf;
  }
  std::snprintf(buf, sizeof(buf),
                "\nPAC (best catalog reward): %.4f | mean final Linf: %.4f | SSIM "
                "violation rate: %.3f\n",
                report.pac, report.mean_final_linf, report.ssim_violation_rate);
  md += buf;
  return md;
}

void emit_report(const ComparisonReport& report, const std::string& dir) {
  fs::create_directories(dir);
  {
    std::ofstream out(fs::path(dir) / "report.json", std::ios::trunc);
    out << report.to_json().dump(2) << "\n";
  }
  {
    std::ofstream out(fs::path(dir) / "report.md", std::ios::trunc);
    out << report_markdown(report);
  }
}

}  // namespace whisperer
