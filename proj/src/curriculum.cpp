#include "whisperer/curriculum.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "whisperer/nn/checkpoint.hpp"

namespace fs = std::filesystem;

namespace whisperer {

using namespace nn;

void StageConfig::validate() const {
  if (stage < 1 || stage > 4) throw std::invalid_argument("StageConfig: stage out of range");
  if (learning_rate <= 0.0) throw std::invalid_argument("StageConfig: learning_rate <= 0");
  if (epochs < 0) throw std::invalid_argument("StageConfig: negative epochs");
  if (batch_size < 1) throw std::invalid_argument("StageConfig: batch_size < 1");
  if (stage == 3 && seeds_per_image < 1) {
    throw std::invalid_argument("StageConfig: seeds_per_image < 1");
  }
  if (stage == 4 && reward_baseline_mode != "none" && reward_baseline_mode != "original") {
    throw std::invalid_argument("StageConfig: bad reward_baseline_mode");
  }
}

nlohmann::json StageConfig::to_json() const {
  nlohmann::json j{{"stage", stage},
                   {"epochs", epochs},
                   {"learning_rate", learning_rate},
                   {"batch_size", batch_size}};
  if (stage == 3) {
    j["seeds_per_image"] = seeds_per_image;
    j["noise_scale"] = noise_scale;
    j["retain_all"] = retain_all;
  }
  if (stage == 4) j["reward_baseline_mode"] = reward_baseline_mode;
  return j;
}

StageConfig StageConfig::from_json(const nlohmann::json& j) {
  StageConfig c;
  c.stage = j.value("stage", c.stage);
  c.epochs = j.value("epochs", c.epochs);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seeds_per_image = j.value("seeds_per_image", c.seeds_per_image);
  c.noise_scale = j.value("noise_scale", c.noise_scale);
  c.retain_all = j.value("retain_all", c.retain_all);
  c.reward_baseline_mode = j.value("reward_baseline_mode", c.reward_baseline_mode);
  return c;
}

nlohmann::json CurriculumConfig::to_json() const {
  return nlohmann::json{{"policy", policy.to_json()},
                        {"stage1", stage1.to_json()},
                        {"stage2", stage2.to_json()},
                        {"stage3", stage3.to_json()},
                        {"stage4", stage4.to_json()},
                        {"refine_steps", refine_steps},
                        {"trainable_pe", trainable_pe},
                        {"seed", seed}};
}

CurriculumConfig CurriculumConfig::from_json(const nlohmann::json& j) {
  CurriculumConfig c;
  if (j.contains("policy")) c.policy = PolicyConfig::from_json(j["policy"]);
  if (j.contains("stage1")) c.stage1 = StageConfig::from_json(j["stage1"]);
  if (j.contains("stage2")) c.stage2 = StageConfig::from_json(j["stage2"]);
  if (j.contains("stage3")) c.stage3 = StageConfig::from_json(j["stage3"]);
  if (j.contains("stage4")) c.stage4 = StageConfig::from_json(j["stage4"]);
  c.refine_steps = j.value("refine_steps", c.refine_steps);
  c.trainable_pe = j.value("trainable_pe", c.trainable_pe);
  c.seed = j.value("seed", c.seed);
  c.stage1.stage = 1;
  c.stage2.stage = 2;
  c.stage3.stage = 3;
  c.stage4.stage = 4;
  return c;
}

namespace {

Tensor image_tensor(const Image& img) {
  Tensor t({1, img.h, img.w});
  std::copy(img.px.begin(), img.px.end(), t.data.data());
  return t;
}

Image tensor_image(const Tensor& t) {
  Image img(t.dim(1), t.dim(2));
  std::copy(t.data.data(), t.data.data() + t.numel(), img.px.begin());
  return img;
}

Var zero_tokens(int d) { return constant(Tensor::zeros({d, 1})); }

Var tokens_var(const PEFeatures& pe) {
  return constant(Tensor({pe.spatial_grid.dim(0), pe.spatial_grid.dim(1) * pe.spatial_grid.dim(2)},
                         pe.spatial_grid.data));
}

void shuffle_indices(std::vector<size_t>& idx, Rng& rng) {
  for (size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.uniform_int(i)]);
}

double score_image(const FrozenModelHandle& frozen, const Image& img, const std::string& label) {
  const OcrResult r = frozen->recognize(img);
  return reward(cer(r.text, label), r.confidence);
}

struct DiffusionBatchTrainer {
  std::vector<Var> vars;
  Adam opt;
  int batch_size;
  int in_batch = 0;

  DiffusionBatchTrainer(const ParamList& params, double lr, int batch)
      : opt(collect_vars(params), lr, 0.9, 0.999), batch_size(batch) {
    vars = opt.params();
  }

  static std::vector<Var> collect_vars(const ParamList& params) {
    std::vector<Var> v;
    v.reserve(params.size());
    for (const auto& p : params) v.push_back(p.var);
    return v;
  }

  // Returns true when an optimizer step was applied.
  bool accumulate(const Var& loss, bool flush) {
    backward(loss);
    if (++in_batch == batch_size || flush) {
      for (auto& v : vars) {
        if (v->grad.numel()) v->grad.data /= static_cast<double>(in_batch);
      }
      opt.step();
      zero_grad(vars);
      in_batch = 0;
      return true;
    }
    return false;
  }
};

}  // namespace

PolicyCheckpoint stage1_train(const Manifest& manifest, const CurriculumConfig& cfg,
                              StageTrainLog* log) {
  StageConfig sc = cfg.stage1;
  sc.stage = 1;
  sc.validate();
  Rng rng = Rng(cfg.seed).child("stage1");
  auto net = std::make_shared<PolicyNet>(cfg.policy, rng.child("init"));
  DiffusionBatchTrainer trainer(net->params(), sc.learning_rate, sc.batch_size);

  const int T = cfg.policy.diffusion_timesteps;
  const std::vector<double> ab = cosine_schedule(T);
  const auto split = manifest.split("train");
  std::vector<Tensor> cleans;
  cleans.reserve(split.size());
  for (const auto* e : split) cleans.push_back(image_tensor(manifest.load_clean(*e)));

  Var zero_glob = constant(Tensor::zeros({cfg.policy.global_dim}));
  Var zero_tok = zero_tokens(cfg.policy.token_channels);

  StageTrainLog local_log;
  Rng order_rng = rng.child("order");
  Rng noise_rng = rng.child("noise");
  for (int epoch = 0; epoch < sc.epochs; ++epoch) {
    std::vector<size_t> idx(cleans.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    shuffle_indices(idx, order_rng);
    double epoch_loss = 0.0;
    for (size_t s = 0; s < idx.size(); ++s) {
      const Tensor& x0 = cleans[idx[s]];
      const int t = static_cast<int>(noise_rng.uniform_int(static_cast<uint64_t>(T)));
      Tensor eps(x0.shape);
      for (int64_t i = 0; i < eps.numel(); ++i) eps.data[i] = noise_rng.normal();
      Tensor x_t(x0.shape);
      const double a = std::sqrt(ab[static_cast<size_t>(t)]);
      const double b = std::sqrt(1.0 - ab[static_cast<size_t>(t)]);
      x_t.data = a * x0.data + b * eps.data;

      // Stage 1 is unconditional: zero conditioning channel and zero PE.
      Var pred = net->forward(constant(x_t), constant(Tensor::zeros(x0.shape)), t,
                              zero_glob, zero_tok);
      Var loss = mse(pred, constant(eps));
      if (!std::isfinite(loss->val.data[0])) {
        throw std::runtime_error("stage1_train: non-finite loss");
      }
      epoch_loss += loss->val.data[0];
      local_log.step_loss.push_back(loss->val.data[0]);
      trainer.accumulate(loss, s + 1 == idx.size());
    }
    epoch_loss /= static_cast<double>(idx.size());
    local_log.epoch_loss.push_back(epoch_loss);
    std::cerr << "[stage1] epoch " << epoch + 1 << "/" << sc.epochs << " loss=" << epoch_loss
              << "\n";
  }
  if (log) *log = local_log;
  PolicyCheckpoint out;
  out.net = net;
  out.config = cfg.policy;
  out.stage = 1;
  out.seed = cfg.seed;
  return out;
}

PolicyCheckpoint stage2_train(const Manifest& manifest, const PolicyCheckpoint& stage1,
                              const EncoderHandle& encoder, const CurriculumConfig& cfg,
                              StageTrainLog* log) {
  if (stage1.stage != 1) {
    throw std::invalid_argument("stage2_train: expected a stage-1 checkpoint, got stage " +
                                std::to_string(stage1.stage));
  }
  StageConfig sc = cfg.stage2;
  sc.stage = 2;
  sc.validate();
  Rng rng = Rng(cfg.seed).child("stage2");
  auto net = stage1.net;  // warm start: continue training the same parameters

  ParamList params = net->params();
  if (cfg.trainable_pe) {
    // Ablation switch: the PE participates in optimization.
    ParamList pe_params = encoder.params();
    params.insert(params.end(), pe_params.begin(), pe_params.end());
  }
  DiffusionBatchTrainer trainer(params, sc.learning_rate, sc.batch_size);

  const int T = cfg.policy.diffusion_timesteps;
  const std::vector<double> ab = cosine_schedule(T);
  const auto split = manifest.split("train");
  std::vector<Tensor> cleans, degradeds;
  std::vector<PEFeatures> pes;
  cleans.reserve(split.size());
  degradeds.reserve(split.size());
  for (const auto* e : split) {
    const Sample s = manifest.load_sample(*e);
    cleans.push_back(image_tensor(s.clean.image));
    degradeds.push_back(image_tensor(s.degraded));
    if (!cfg.trainable_pe) pes.push_back(encoder.encode(s.degraded));
  }

  StageTrainLog local_log;
  Rng order_rng = rng.child("order");
  Rng noise_rng = rng.child("noise");
  for (int epoch = 0; epoch < sc.epochs; ++epoch) {
    std::vector<size_t> idx(cleans.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    shuffle_indices(idx, order_rng);
    double epoch_loss = 0.0;
    for (size_t s = 0; s < idx.size(); ++s) {
      const size_t k = idx[s];
      const Tensor& x0 = cleans[k];
      const int t = static_cast<int>(noise_rng.uniform_int(static_cast<uint64_t>(T)));
      Tensor eps(x0.shape);
      for (int64_t i = 0; i < eps.numel(); ++i) eps.data[i] = noise_rng.normal();
      Tensor x_t(x0.shape);
      x_t.data = std::sqrt(ab[static_cast<size_t>(t)]) * x0.data +
                 std::sqrt(1.0 - ab[static_cast<size_t>(t)]) * eps.data;

      Var cond = constant(degradeds[k]);
      Var glob, tok;
      if (cfg.trainable_pe) {
        auto [g, z] = encoder.encode_graph(cond);
        glob = g;
        tok = reshape(z, {z->val.dim(0), z->val.dim(1) * z->val.dim(2)});
      } else {
        glob = constant(pes[k].global_vec);
        tok = tokens_var(pes[k]);
      }
      Var pred = net->forward(constant(x_t), cond, t, glob, tok);
      Var loss = mse(pred, constant(eps));
      if (!std::isfinite(loss->val.data[0])) {
        throw std::runtime_error("stage2_train: non-finite loss");
      }
      epoch_loss += loss->val.data[0];
      local_log.step_loss.push_back(loss->val.data[0]);
      trainer.accumulate(loss, s + 1 == idx.size());
    }
    epoch_loss /= static_cast<double>(idx.size());
    local_log.epoch_loss.push_back(epoch_loss);
    std::cerr << "[stage2] epoch " << epoch + 1 << "/" << sc.epochs << " loss=" << epoch_loss
              << "\n";
  }
  if (log) *log = local_log;
  PolicyCheckpoint out;
  out.net = net;
  out.config = cfg.policy;
  out.stage = 2;
  out.seed = cfg.seed;
  return out;
}

std::pair<BootstrapDataset, PolicyCheckpoint> stage3_bootstrap(
    const Manifest& manifest, const PolicyCheckpoint& stage2,
    const FrozenModelHandle& frozen, const EncoderHandle& encoder,
    const CurriculumConfig& cfg, const std::string& archive_dir, StageTrainLog* log) {
  if (stage2.stage != 2) {
    throw std::invalid_argument("stage3_bootstrap: expected a stage-2 checkpoint, got stage " +
                                std::to_string(stage2.stage));
  }
  StageConfig sc = cfg.stage3;
  sc.stage = 3;
  sc.validate();
  auto net = stage2.net;
  const auto heldout = manifest.split("heldout");
  if (heldout.empty()) throw std::runtime_error("stage3_bootstrap: empty heldout split");

  BootstrapDataset ds;
  ds.frozen_model_hash = frozen->frozen_hash();
  ds.policy_hash = params_digest(net->params());
  ds.images_explored = static_cast<int>(heldout.size());

  Rng rng = Rng(cfg.seed).child("stage3");
  std::vector<double> reward_deltas;  // diagnostics for the empty-dataset error

  int retained_images = 0;
  for (size_t i = 0; i < heldout.size(); ++i) {
    const auto* e = heldout[i];
    const Image x0 = manifest.load_degraded(*e);
    const double r_orig = score_image(frozen, x0, e->label);

    std::optional<BootstrapPair> best;
    std::vector<BootstrapPair> improving;
    for (int seed_idx = 0; seed_idx < sc.seeds_per_image; ++seed_idx) {
      RefineOptions opts;
      opts.steps = cfg.refine_steps;
      opts.epsilon = cfg.policy.epsilon;
      opts.noise_scale = sc.noise_scale;
      opts.seed = rng.child(e->id).child(static_cast<uint64_t>(seed_idx)).seed();
      const RefineTrace trace = refine(x0, *net, encoder, opts);
      for (size_t step = 0; step < trace.steps.size(); ++step) {
        // Candidates are scored on the 16-bit grid they will be stored on, so
        // re-scoring after a round trip reproduces the reward exactly.
        const Image candidate = quantize(trace.steps[step].x_after, 16);
        const double r = score_image(frozen, candidate, e->label);
        reward_deltas.push_back(r - r_orig);
        if (r > r_orig) {
          BootstrapPair pair;
          pair.degraded = x0;
          pair.improved_target = candidate;
          pair.r_orig = r_orig;
          pair.r_improved = r;
          pair.image_id = e->id;
          pair.source_seed = seed_idx;
          pair.source_step = static_cast<int>(step);
          if (sc.retain_all) {
            improving.push_back(std::move(pair));
          } else if (!best || r > best->r_improved) {
            best = std::move(pair);
          }
        }
      }
    }
    if (sc.retain_all) {
      if (!improving.empty()) ++retained_images;
      for (auto& p : improving) ds.pairs.push_back(std::move(p));
    } else if (best) {
      ++retained_images;
      ds.pairs.push_back(std::move(*best));
    }
    if ((i + 1) % 50 == 0) {
      std::cerr << "[stage3] explored " << i + 1 << "/" << heldout.size() << " images, "
                << ds.pairs.size() << " pairs\n";
    }
  }
  ds.selection_rate = static_cast<double>(retained_images) / static_cast<double>(heldout.size());

  if (ds.pairs.empty()) {
    // Histogram of reward deltas plus a concrete knob to turn.
    std::array<int, 7> bins{};  // (-inf,-.2,-.1,-.01,0,.01,.1,inf)
    const double edges[6] = {-0.2, -0.1, -0.01, 0.0, 0.01, 0.1};
    for (double d : reward_deltas) {
      size_t b = 0;
      while (b < 6 && d >= edges[b]) ++b;
      ++bins[b];
    }
    std::ostringstream msg;
    msg << "stage3_bootstrap: no improving intermediate found over "
        << heldout.size() << " images x " << sc.seeds_per_image << " seeds. "
        << "Reward-delta histogram (<-0.2,-0.1,-0.01,<0,<0.01,<0.1,>=0.1): ";
    for (int b : bins) msg << b << " ";
    msg << ". Try raising stage3.noise_scale (currently " << sc.noise_scale << ").";
    throw BootstrapEmptyError(msg.str());
  }

  std::cerr << "[stage3] retained " << ds.pairs.size() << " pairs from "
            << heldout.size() << " images (selection rate " << ds.selection_rate << ")\n";

  if (!archive_dir.empty()) save_bootstrap(ds, archive_dir);

  // Re-verify the selection predicate before cloning (catches drift bugs).
  for (const auto& p : ds.pairs) {
    const double r = score_image(frozen, p.improved_target, manifest.by_id(p.image_id).label);
    if (!(r > p.r_orig)) {
      throw std::runtime_error("stage3_bootstrap: pair failed re-scoring at fine-tune time: " +
                               p.image_id);
    }
  }

  // Behavioral cloning: L2 between the deterministic K-step refinement output
  // and the retained target.
  DiffusionBatchTrainer trainer(net->params(), sc.learning_rate, sc.batch_size);
  StageTrainLog local_log;
  Rng order_rng = rng.child("clone_order");
  for (int epoch = 0; epoch < sc.epochs; ++epoch) {
    std::vector<size_t> idx(ds.pairs.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    shuffle_indices(idx, order_rng);
    double epoch_loss = 0.0;
    for (size_t s = 0; s < idx.size(); ++s) {
      const BootstrapPair& pair = ds.pairs[idx[s]];
      const PEFeatures pe = encoder.encode(pair.degraded);
      Var x0v = constant(image_tensor(pair.degraded));
      RefineGraph rg = refine_graph(*net, x0v, constant(pe.global_vec), tokens_var(pe),
                                    cfg.refine_steps, cfg.policy.epsilon,
                                    cfg.policy.diffusion_timesteps);
      Var loss = mse(rg.output, constant(image_tensor(pair.improved_target)));
      if (!std::isfinite(loss->val.data[0])) {
        throw std::runtime_error("stage3_bootstrap: non-finite cloning loss");
      }
      epoch_loss += loss->val.data[0];
      local_log.step_loss.push_back(loss->val.data[0]);
      trainer.accumulate(loss, s + 1 == idx.size());
    }
    epoch_loss /= static_cast<double>(ds.pairs.size());
    local_log.epoch_loss.push_back(epoch_loss);
    std::cerr << "[stage3] clone epoch " << epoch + 1 << "/" << sc.epochs
              << " loss=" << epoch_loss << "\n";
  }
  if (log) *log = local_log;

  PolicyCheckpoint out;
  out.net = net;
  out.config = cfg.policy;
  out.stage = 3;
  out.seed = cfg.seed;
  return {std::move(ds), out};
}

PolicyCheckpoint stage4_refine(const Manifest& manifest, const PolicyCheckpoint& stage3,
                               const FrozenModelHandle& frozen, const EncoderHandle& encoder,
                               const CurriculumConfig& cfg, StageTrainLog* log) {
  if (stage3.stage != 3) {
    throw std::invalid_argument("stage4_refine: expected a stage-3 checkpoint, got stage " +
                                std::to_string(stage3.stage));
  }
  StageConfig sc = cfg.stage4;
  sc.stage = 4;
  sc.validate();
  if (sc.learning_rate > 1e-5) {
    throw std::invalid_argument("stage4_refine: learning rate must be <= 1e-5");
  }
  auto net = stage3.net;
  const auto train = manifest.split("train");
  const std::string frozen_hash_before = frozen->frozen_hash();

  // Cache degraded inputs, PE features, labels and baseline rewards.
  std::vector<Image> images;
  std::vector<PEFeatures> pes;
  std::vector<double> r_orig(train.size());
  images.reserve(train.size());
  for (size_t i = 0; i < train.size(); ++i) {
    images.push_back(manifest.load_degraded(*train[i]));
    pes.push_back(encoder.encode(images.back()));
    r_orig[i] = score_image(frozen, images.back(), train[i]->label);
  }

  auto heldout_reward = [&] {
    return evaluate_policy(frozen, manifest, "heldout", *net, encoder, cfg.refine_steps,
                           cfg.policy.epsilon)
        .summary.mean_reward;
  };

  const double initial_reward = heldout_reward();
  double best_reward = initial_reward;
  auto best_params = snapshot(net->params());
  std::cerr << "[stage4] initial heldout mean reward " << initial_reward << "\n";

  DiffusionBatchTrainer trainer(net->params(), sc.learning_rate, sc.batch_size);
  StageTrainLog local_log;
  Rng order_rng = Rng(cfg.seed).child("stage4_order");
  bool collapsed = false;
  for (int epoch = 0; epoch < sc.epochs && !collapsed; ++epoch) {
    std::vector<size_t> idx(train.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    shuffle_indices(idx, order_rng);
    double epoch_loss = 0.0;
    for (size_t s = 0; s < idx.size(); ++s) {
      const size_t k = idx[s];
      Var x0v = constant(image_tensor(images[k]));
      RefineGraph rg = refine_graph(*net, x0v, constant(pes[k].global_vec), tokens_var(pes[k]),
                                    cfg.refine_steps, cfg.policy.epsilon,
                                    cfg.policy.diffusion_timesteps);
      // The frozen model is a black box: R enters only as a scalar weight.
      const double r = score_image(frozen, tensor_image(rg.output->val), train[k]->label);
      const double w = sc.reward_baseline_mode == "original" ? r - r_orig[k] : r;
      Var action_norm = sum_squares(rg.deltas[0]);
      for (size_t d = 1; d < rg.deltas.size(); ++d) {
        action_norm = add(action_norm, sum_squares(rg.deltas[d]));
      }
      Var loss = scale(action_norm, -w);
      if (!std::isfinite(loss->val.data[0])) {
        throw std::runtime_error("stage4_refine: non-finite loss");
      }
      epoch_loss += loss->val.data[0];
      local_log.step_loss.push_back(loss->val.data[0]);
      trainer.accumulate(loss, s + 1 == idx.size());
    }
    epoch_loss /= static_cast<double>(train.size());
    local_log.epoch_loss.push_back(epoch_loss);
    const double hr = heldout_reward();
    std::cerr << "[stage4] epoch " << epoch + 1 << "/" << sc.epochs << " loss=" << epoch_loss
              << " heldout_reward=" << hr << "\n";
    if (hr > best_reward) {
      best_reward = hr;
      best_params = snapshot(net->params());
    }
    if (hr < 0.5 * initial_reward) {
      std::cerr << "[stage4] reward collapse guard tripped (" << hr << " < 0.5*"
                << initial_reward << "), stopping early\n";
      collapsed = true;
    }
  }
  // Keep the best heldout-reward weights seen (including the stage-3 start).
  Checkpoint best;
  best.tensors = best_params;
  load_into(best, net->params());
  if (log) *log = local_log;
  if (frozen->frozen_hash() != frozen_hash_before) {
    throw std::runtime_error("stage4_refine: frozen model hash changed during training");
  }

  PolicyCheckpoint out;
  out.net = net;
  out.config = cfg.policy;
  out.stage = 4;
  out.seed = cfg.seed;
  return out;
}

PolicyEvalResult evaluate_policy(const FrozenModelHandle& frozen, const Manifest& manifest,
                                 const std::string& split_name, const PolicyNet& policy,
                                 const EncoderHandle& encoder, int steps, double epsilon) {
  PolicyEvalResult res;
  std::vector<RewardRecord> records;
  double linf_sum = 0.0;
  int violations = 0;
  const auto split = manifest.split(split_name);
  for (const auto* e : split) {
    const Image degraded = manifest.load_degraded(*e);
    RefineOptions opts;
    opts.steps = steps;
    opts.epsilon = epsilon;
    const RefineTrace trace = refine(degraded, policy, encoder, opts);
    const OcrResult ocr = frozen->recognize(trace.output());
    records.push_back(make_reward_record(ocr.text, e->label, ocr.confidence));
    linf_sum += trace.final_linf;
    if (trace.ssim_violation) ++violations;
  }
  res.summary = summarize(std::move(records));
  if (!split.empty()) {
    res.mean_final_linf = linf_sum / static_cast<double>(split.size());
    res.ssim_violation_rate = static_cast<double>(violations) / static_cast<double>(split.size());
  }
  return res;
}

// ---------------- bootstrap archive ----------------

void save_bootstrap(const BootstrapDataset& ds, const std::string& dir) {
  fs::create_directories(dir);
  std::ofstream index(fs::path(dir) / "index.jsonl", std::ios::trunc);
  if (!index) throw std::runtime_error("save_bootstrap: cannot open index");
  for (size_t i = 0; i < ds.pairs.size(); ++i) {
    const auto& p = ds.pairs[i];
    std::ostringstream stem;
    stem << "pair_" << std::setw(6) << std::setfill('0') << i;
    const std::string deg = stem.str() + "_degraded.png";
    const std::string imp = stem.str() + "_improved.png";
    save_png(p.degraded, (fs::path(dir) / deg).string(), 8);
    save_png(p.improved_target, (fs::path(dir) / imp).string(), 16);
    index << nlohmann::json{{"image_id", p.image_id},
                            {"degraded", deg},
                            {"improved", imp},
                            {"r_orig", p.r_orig},
                            {"r_improved", p.r_improved},
                            {"source_seed", p.source_seed},
                            {"source_step", p.source_step}}
                 .dump()
          << "\n";
  }
  nlohmann::json meta{{"run_id", ds.run_id},
                      {"frozen_model_hash", ds.frozen_model_hash},
                      {"policy_hash", ds.policy_hash},
                      {"images_explored", ds.images_explored},
                      {"selection_rate", ds.selection_rate}};
  std::ofstream mo(fs::path(dir) / "meta.json", std::ios::trunc);
  mo << meta.dump(2) << "\n";
}

BootstrapDataset load_bootstrap(const std::string& dir) {
  BootstrapDataset ds;
  std::ifstream mi(fs::path(dir) / "meta.json");
  if (mi) {
    nlohmann::json meta = nlohmann::json::parse(mi);
    ds.run_id = meta.value("run_id", "");
    ds.frozen_model_hash = meta.value("frozen_model_hash", "");
    ds.policy_hash = meta.value("policy_hash", "");
    ds.images_explored = meta.value("images_explored", 0);
    ds.selection_rate = meta.value("selection_rate", 0.0);
  }
  std::ifstream index(fs::path(dir) / "index.jsonl");
  if (!index) throw std::runtime_error("load_bootstrap: cannot open index in " + dir);
  std::string line;
  while (std::getline(index, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    BootstrapPair p;
    p.image_id = j.at("image_id").get<std::string>();
    p.degraded = load_png((fs::path(dir) / j.at("degraded").get<std::string>()).string());
    p.improved_target = load_png((fs::path(dir) / j.at("improved").get<std::string>()).string());
    p.r_orig = j.at("r_orig").get<double>();
    p.r_improved = j.at("r_improved").get<double>();
    p.source_seed = j.at("source_seed").get<int>();
    p.source_step = j.at("source_step").get<int>();
    if (!(p.r_improved > p.r_orig)) {
      throw std::runtime_error("load_bootstrap: pair violates r_improved > r_orig");
    }
    ds.pairs.push_back(std::move(p));
  }
  return ds;
}

// ---------------- orchestration ----------------

namespace {

void write_eval_json(const EvalSummary& s, const std::string& path) {
  nlohmann::json j{{"mean_cer", s.mean_cer},
                   {"mean_cer_raw", s.mean_cer_raw},
                   {"mean_confidence", s.mean_confidence},
                   {"mean_reward", s.mean_reward},
                   {"n", s.n}};
  std::ofstream out(path, std::ios::trunc);
  out << j.dump(2) << "\n";
}

void write_stage_log(const StageTrainLog& log, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  out << "epoch,mean_loss\n";
  for (size_t i = 0; i < log.epoch_loss.size(); ++i) {
    out << i + 1 << "," << log.epoch_loss[i] << "\n";
  }
}

}  // namespace

CurriculumResult run_curriculum(const Manifest& manifest, const FrozenModelHandle& frozen,
                                const EncoderHandle& encoder, const CurriculumConfig& cfg,
                                const std::string& run_dir) {
  // Data hygiene: split ids must be disjoint.
  {
    std::vector<std::string> ids;
    for (const auto& e : manifest.entries) ids.push_back(e.id);
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) {
      throw std::runtime_error("run_curriculum: split ids are not disjoint");
    }
  }
  const std::string frozen_hash_before = frozen->frozen_hash();
  const std::string encoder_hash_before = encoder.frozen_hash();

  fs::create_directories(run_dir);
  {
    std::ofstream cfg_out(fs::path(run_dir) / "curriculum_config.json", std::ios::trunc);
    cfg_out << cfg.to_json().dump(2) << "\n";
  }

  CurriculumResult result;
  auto stage_dir = [&](int n) {
    const fs::path d = fs::path(run_dir) / ("stage" + std::to_string(n));
    fs::create_directories(d);
    return d;
  };
  auto load_eval = [](const fs::path& path) {
    std::ifstream in(path);
    nlohmann::json j = nlohmann::json::parse(in);
    EvalSummary s;
    s.mean_cer = j.value("mean_cer", 0.0);
    s.mean_cer_raw = j.value("mean_cer_raw", 0.0);
    s.mean_confidence = j.value("mean_confidence", 0.0);
    s.mean_reward = j.value("mean_reward", 0.0);
    s.n = j.value("n", 0);
    return s;
  };

  PolicyCheckpoint ckpt;
  for (int stage = 1; stage <= 4; ++stage) {
    const fs::path dir = stage_dir(stage);
    const fs::path ckpt_path = dir / "policy.ckpt";
    if (fs::exists(ckpt_path)) {
      ckpt = load_policy(ckpt_path.string());
      if (ckpt.stage != stage) {
        throw std::runtime_error("run_curriculum: checkpoint in " + dir.string() +
                                 " has stage tag " + std::to_string(ckpt.stage));
      }
      std::cerr << "[curriculum] stage " << stage << " checkpoint found, skipping training\n";
    } else {
      StageTrainLog log;
      switch (stage) {
        case 1:
          ckpt = stage1_train(manifest, cfg, &log);
          break;
        case 2:
          ckpt = stage2_train(manifest, ckpt, encoder, cfg, &log);
          break;
        case 3: {
          auto [ds, c3] = stage3_bootstrap(manifest, ckpt, frozen, encoder, cfg,
                                           (dir / "bootstrap").string(), &log);
          ckpt = c3;
          break;
        }
        case 4:
          ckpt = stage4_refine(manifest, ckpt, frozen, encoder, cfg, &log);
          break;
      }
      write_stage_log(log, (dir / "train_log.csv").string());
      ckpt.training_log_ref = (dir / "train_log.csv").string();
      save_policy(ckpt, ckpt_path.string());
    }
    const fs::path eval_path = dir / "eval.json";
    if (fs::exists(eval_path)) {
      result.stage_evals.push_back(load_eval(eval_path));
    } else {
      const PolicyEvalResult ev = evaluate_policy(frozen, manifest, "heldout", *ckpt.net,
                                                  encoder, cfg.refine_steps, cfg.policy.epsilon);
      write_eval_json(ev.summary, eval_path.string());
      result.stage_evals.push_back(ev.summary);
      std::cerr << "[curriculum] stage " << stage << " heldout mean_cer=" << ev.summary.mean_cer
                << " mean_reward=" << ev.summary.mean_reward << "\n";
    }
  }

  if (frozen->frozen_hash() != frozen_hash_before) {
    throw std::runtime_error("run_curriculum: frozen model mutated");
  }
  if (!cfg.trainable_pe && encoder.current_digest() != encoder_hash_before) {
    throw std::runtime_error("run_curriculum: frozen encoder mutated");
  }
  result.final_checkpoint = ckpt;
  return result;
}

}  // namespace whisperer
