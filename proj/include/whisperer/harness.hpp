#pragma once

#include <nlohmann/json.hpp>

#include <string>
#include <vector>

#include "whisperer/curriculum.hpp"

namespace whisperer {

struct RunConfig {
  CorpusConfig corpus;
  CrnnConfig frozen;
  EncoderConfig encoder;
  CurriculumConfig curriculum;
  std::string eval_split = "test";
  std::string out_dir;
  uint64_t seed = 0;

  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  // Derives per-component seeds/dirs from the master seed and output dir and
  // keeps encoder/policy dims consistent.
  void normalize();
};

// Parses a config file (JSON), applies dotted-path overrides
// ("corpus.train_count=100"), injects seed and out_dir, validates, normalizes.
RunConfig load_run_config(const std::string& config_path,
                          const std::vector<std::string>& overrides, uint64_t seed,
                          const std::string& out_dir);

std::string config_hash(const RunConfig& cfg);

struct ReportRow {
  std::string method_name;
  double mean_cer = 0.0;
  double mean_confidence = 0.0;
  double mean_reward = 0.0;
  double delta_vs_original = 0.0;  // CER percentage points vs the original row
  double delta_rel_pct = 0.0;      // relative percent vs the original row
};

struct ComparisonReport {
  int schema = 1;
  std::vector<ReportRow> rows;
  TTestResult t_vs_original;
  TTestResult t_vs_best_filter;
  bool has_t_tests = false;
  double mean_final_linf = 0.0;
  double ssim_violation_rate = 0.0;
  double pac = 0.0;  // best filter reward over the catalog

  nlohmann::json to_json() const;
  static ComparisonReport from_json(const nlohmann::json& j);
  bool operator==(const ComparisonReport&) const = default;
};

// Evaluates every catalog filter over the given split; rows sorted by mean
// CER ascending (method name as tiebreak); PAC = max mean reward over rows.
// Per-sample CERs for each method are returned through `per_sample` when
// non-null (keyed by method name, in split order).
ComparisonReport run_baselines(const FrozenModelHandle& frozen, const Manifest& manifest,
                               const std::string& split_name,
                               std::map<std::string, std::vector<RewardRecord>>* per_sample = nullptr);

// Corpus -> frozen model -> encoder -> curriculum -> three-method comparison
// (original, best filter, learned preprocessor) with paired t-tests and
// constraint statistics. Every phase persists under cfg.out_dir and resumes
// from existing artifacts.
ComparisonReport run_full_experiment(const RunConfig& cfg);

// Writes report.json (schema-versioned source of truth) and report.md.
void emit_report(const ComparisonReport& report, const std::string& dir);

// Markdown rendering (exposed for tests).
std::string report_markdown(const ComparisonReport& report);
std::string format_delta_pp(double delta_pp);

// Build-or-load helpers shared by the CLI subcommands.
Manifest ensure_corpus(const RunConfig& cfg);
FrozenModelHandle ensure_frozen(const RunConfig& cfg, const Manifest& manifest);
EncoderHandlePtr ensure_encoder(const RunConfig& cfg, const Manifest& manifest);

}  // namespace whisperer
