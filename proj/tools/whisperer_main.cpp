#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "whisperer/filters.hpp"
#include "whisperer/harness.hpp"

namespace fs = std::filesystem;
using namespace whisperer;

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  uint64_t seed = 0;
  std::string out_dir;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "Run config file (JSON)");
  cmd->add_option("--override", args.overrides,
                  "Dotted-path config override, e.g. corpus.train_count=100");
  cmd->add_option("--seed", args.seed, "Master seed")->required();
  cmd->add_option("--out", args.out_dir, "Run directory")->required();
}

RunConfig build_config(const CommonArgs& args) {
  return load_run_config(args.config_path, args.overrides, args.seed, args.out_dir);
}

void print_summary(const std::string& name, const EvalSummary& s) {
  std::cout << name << ": mean_cer=" << s.mean_cer << " mean_confidence=" << s.mean_confidence
            << " mean_reward=" << s.mean_reward << " n=" << s.n << "\n";
}

int run_stage(const CommonArgs& args, int stage) {
  RunConfig cfg = build_config(args);
  Manifest manifest = ensure_corpus(cfg);
  FrozenModelHandle frozen = ensure_frozen(cfg, manifest);
  EncoderHandlePtr encoder = ensure_encoder(cfg, manifest);
  const fs::path dir = fs::path(cfg.out_dir) / ("stage" + std::to_string(stage));
  fs::create_directories(dir);

  PolicyCheckpoint prev;
  if (stage > 1) {
    const fs::path prev_path =
        fs::path(cfg.out_dir) / ("stage" + std::to_string(stage - 1)) / "policy.ckpt";
    if (!fs::exists(prev_path)) {
      std::cerr << "stage " << stage << " requires " << prev_path << "\n";
      return 1;
    }
    prev = load_policy(prev_path.string());
  }
  PolicyCheckpoint out;
  switch (stage) {
    case 1:
      out = stage1_train(manifest, cfg.curriculum);
      break;
    case 2:
      out = stage2_train(manifest, prev, *encoder, cfg.curriculum);
      break;
    case 3: {
      auto [ds, ckpt] = stage3_bootstrap(manifest, prev, frozen, *encoder, cfg.curriculum,
                                         (dir / "bootstrap").string());
      std::cout << "bootstrap pairs: " << ds.pairs.size()
                << " selection_rate: " << ds.selection_rate << "\n";
      out = ckpt;
      break;
    }
    case 4:
      out = stage4_refine(manifest, prev, frozen, *encoder, cfg.curriculum);
      break;
  }
  save_policy(out, (dir / "policy.ckpt").string());
  const PolicyEvalResult ev =
      evaluate_policy(frozen, manifest, "heldout", *out.net, *encoder,
                      cfg.curriculum.refine_steps, cfg.curriculum.policy.epsilon);
  print_summary("stage" + std::to_string(stage) + " heldout", ev.summary);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Learned pixel-space preprocessing for a frozen OCR model"};
  app.require_subcommand(1);

  CommonArgs args;
  std::string filter_name = "original";
  std::string policy_path;
  std::string image_path;
  bool dump_trace = false;

  CLI::App* gen = app.add_subcommand("gen-data", "Generate the synthetic corpus");
  add_common(gen, args);
  CLI::App* train_frozen = app.add_subcommand("train-frozen", "Train and freeze the recognizer");
  add_common(train_frozen, args);
  CLI::App* train_enc = app.add_subcommand("train-encoder", "Train and freeze the perceptual encoder");
  add_common(train_enc, args);
  std::vector<CLI::App*> stage_cmds;
  for (int s = 1; s <= 4; ++s) {
    CLI::App* c = app.add_subcommand("stage" + std::to_string(s),
                                     "Run curriculum stage " + std::to_string(s));
    add_common(c, args);
    stage_cmds.push_back(c);
  }
  CLI::App* run_all = app.add_subcommand("run-all", "Full experiment end to end");
  add_common(run_all, args);
  CLI::App* baselines = app.add_subcommand("baselines", "Evaluate the 17-filter catalog");
  add_common(baselines, args);
  CLI::App* eval_cmd = app.add_subcommand("eval", "Evaluate one preprocessor on the eval split");
  add_common(eval_cmd, args);
  eval_cmd->add_option("--filter", filter_name, "Catalog filter key (e.g. clahe_4)");
  eval_cmd->add_option("--policy", policy_path, "Policy checkpoint (overrides --filter)");
  CLI::App* report_cmd = app.add_subcommand("report", "Re-render report.md from report.json");
  add_common(report_cmd, args);
  CLI::App* refine_cmd = app.add_subcommand("refine", "Refine one PNG with a trained policy");
  add_common(refine_cmd, args);
  refine_cmd->add_option("--image", image_path, "Input PNG")->required();
  refine_cmd->add_option("--policy", policy_path, "Policy checkpoint")->required();
  refine_cmd->add_flag("--dump-trace", dump_trace, "Store every intermediate as PNG");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      RunConfig cfg = build_config(args);
      Manifest m = build_corpus(cfg.corpus);
      std::cout << "corpus: " << m.entries.size() << " entries under " << cfg.corpus.out_dir
                << "\n";
      return 0;
    }
    if (train_frozen->parsed()) {
      RunConfig cfg = build_config(args);
      Manifest m = ensure_corpus(cfg);
      FrozenModelHandle f = ensure_frozen(cfg, m);
      std::cout << "frozen model hash: " << f->frozen_hash() << "\n";
      return 0;
    }
    if (train_enc->parsed()) {
      RunConfig cfg = build_config(args);
      Manifest m = ensure_corpus(cfg);
      EncoderHandlePtr e = ensure_encoder(cfg, m);
      std::cout << "encoder hash: " << e->frozen_hash() << "\n";
      return 0;
    }
    for (int s = 1; s <= 4; ++s) {
      if (stage_cmds[static_cast<size_t>(s - 1)]->parsed()) return run_stage(args, s);
    }
    if (run_all->parsed()) {
      RunConfig cfg = build_config(args);
      ComparisonReport report = run_full_experiment(cfg);
      std::cout << report_markdown(report);
      return 0;
    }
    if (baselines->parsed()) {
      RunConfig cfg = build_config(args);
      Manifest m = ensure_corpus(cfg);
      FrozenModelHandle f = ensure_frozen(cfg, m);
      ComparisonReport report = run_baselines(f, m, cfg.eval_split);
      const fs::path dir = fs::path(cfg.out_dir) / "report";
      fs::create_directories(dir);
      std::ofstream out(dir / "baselines.json", std::ios::trunc);
      out << report.to_json().dump(2) << "\n";
      std::cout << report_markdown(report);
      return 0;
    }
    if (eval_cmd->parsed()) {
      RunConfig cfg = build_config(args);
      Manifest m = ensure_corpus(cfg);
      FrozenModelHandle f = ensure_frozen(cfg, m);
      if (!policy_path.empty()) {
        EncoderHandlePtr e = ensure_encoder(cfg, m);
        PolicyCheckpoint ckpt = load_policy(policy_path);
        const PolicyEvalResult ev =
            evaluate_policy(f, m, cfg.eval_split, *ckpt.net, *e, cfg.curriculum.refine_steps,
                            cfg.curriculum.policy.epsilon);
        print_summary("policy", ev.summary);
        std::cout << "mean_final_linf=" << ev.mean_final_linf
                  << " ssim_violation_rate=" << ev.ssim_violation_rate << "\n";
      } else {
        EvalSummary s = evaluate(f, m, cfg.eval_split, [&](const Image& img) {
          return apply_filter(img, filter_name);
        });
        print_summary(filter_name, s);
      }
      return 0;
    }
    if (report_cmd->parsed()) {
      RunConfig cfg = build_config(args);
      const fs::path json_path = fs::path(cfg.out_dir) / "report" / "report.json";
      std::ifstream in(json_path);
      if (!in) throw std::runtime_error("report: cannot open " + json_path.string());
      ComparisonReport report = ComparisonReport::from_json(nlohmann::json::parse(in));
      emit_report(report, (fs::path(cfg.out_dir) / "report").string());
      std::cout << report_markdown(report);
      return 0;
    }
    if (refine_cmd->parsed()) {
      RunConfig cfg = build_config(args);
      Manifest m = ensure_corpus(cfg);
      EncoderHandlePtr e = ensure_encoder(cfg, m);
      PolicyCheckpoint ckpt = load_policy(policy_path);
      const Image x0 = load_png(image_path);
      RefineOptions opts;
      opts.steps = cfg.curriculum.refine_steps;
      opts.epsilon = cfg.curriculum.policy.epsilon;
      const RefineTrace trace = refine(x0, *ckpt.net, *e, opts);
      const fs::path dir = fs::path(cfg.out_dir) / "refined";
      fs::create_directories(dir);
      save_png(trace.output(), (dir / "refined.png").string(), 8);
      if (dump_trace) {
        for (size_t i = 0; i < trace.steps.size(); ++i) {
          save_png(trace.steps[i].x_after,
                   (dir / ("step_" + std::to_string(i) + ".png")).string(), 8);
        }
      }
      std::cout << "final_linf=" << trace.final_linf << " final_ssim=" << trace.final_ssim
                << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
