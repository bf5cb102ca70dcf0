#pragma once

// Probe training: AdamW + per-step cosine schedule over one random clip per
// training video per epoch.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fusionprobe/clip.hpp"
#include "fusionprobe/evaluator.hpp"
#include "fusionprobe/manifest.hpp"
#include "fusionprobe/metrics.hpp"
#include "fusionprobe/model.hpp"
#include "fusionprobe/optim.hpp"

namespace fprobe {

struct TrainConfig {
  double lr0 = 1e-3;
  double weight_decay = 0.02;
  std::size_t epochs = 60;
  std::size_t batch_size = 32;
  std::size_t frames_per_clip = 16;
  double eta_min = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;
  bool shuffle = true;
  FrameLayout layout = FrameLayout::kContiguous;
  /// Training view; empty means the manifest's trained_view, or every view if that is unset too.
  std::string trained_view;
  /// Clips averaged per video when scoring the validation split.
  std::size_t eval_clips = 3;
  /// Validation (and best-model selection) runs every val_every epochs and after the last one.
  std::size_t val_every = 1;

  void validate() const {
    require(lr0 > 0 && weight_decay >= 0 && eta_min >= 0 && eps > 0, ErrorCode::kInvalidArgument,
            "lr0, eps must be positive; weight_decay, eta_min non-negative");
    require(epochs >= 1 && batch_size >= 1 && frames_per_clip >= 1 && eval_clips >= 1 && val_every >= 1, ErrorCode::kInvalidArgument,
            "epochs, batch_size, frames_per_clip, eval_clips and val_every must be >= 1");
    require(beta1 > 0 && beta1 < 1 && beta2 > 0 && beta2 < 1, ErrorCode::kInvalidArgument, "betas must be in (0, 1)");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr0", c.lr0},
          {"weight_decay", c.weight_decay},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"frames_per_clip", c.frames_per_clip},
          {"eta_min", c.eta_min},
          {"betas", {c.beta1, c.beta2}},
          {"eps", c.eps},
          {"seed", c.seed},
          {"shuffle", c.shuffle},
          {"layout", std::string(to_string(c.layout))},
          {"trained_view", c.trained_view},
          {"eval_clips", c.eval_clips},
          {"val_every", c.val_every}};
}

/// Missing keys keep the values already in `base`.
inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {}) {
  try {
    base.lr0 = j.value("lr0", base.lr0);
    base.weight_decay = j.value("weight_decay", base.weight_decay);
    base.epochs = j.value("epochs", base.epochs);
    base.batch_size = j.value("batch_size", base.batch_size);
    base.frames_per_clip = j.value("frames_per_clip", base.frames_per_clip);
    base.eta_min = j.value("eta_min", base.eta_min);
    if (j.contains("betas")) {
      base.beta1 = j.at("betas").at(0).get<double>();
      base.beta2 = j.at("betas").at(1).get<double>();
    }
    base.eps = j.value("eps", base.eps);
    base.seed = j.value("seed", base.seed);
    base.shuffle = j.value("shuffle", base.shuffle);
    if (j.contains("layout")) base.layout = parse_frame_layout(j.at("layout").get<std::string>());
    base.trained_view = j.value("trained_view", base.trained_view);
    base.eval_clips = j.value("eval_clips", base.eval_clips);
    base.val_every = j.value("val_every", base.val_every);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kBadFormat, std::string("train config: ") + e.what());
  }
  return base;
}

struct EpochRecord {
  std::size_t epoch = 0;
  /// Optimizer steps taken by the end of the epoch.
  std::size_t step = 0;
  /// Learning rate of the epoch's last step.
  double lr = 0.0;
  double loss = 0.0;
  double train_acc = 0.0;
  std::optional<double> val_balanced_acc;

  nlohmann::json to_json() const {
    nlohmann::json j{{"epoch", epoch}, {"step", step}, {"lr", lr}, {"loss", loss}, {"train_acc", train_acc}};
    j["val_balanced_acc"] = val_balanced_acc ? nlohmann::json(*val_balanced_acc) : nlohmann::json(nullptr);
    return j;
  }
};

struct TrainResult {
  Model<float> final_model;
  Model<float> best_model;
  std::size_t best_epoch = 0;
  std::optional<double> best_val_balanced_acc;
  std::vector<EpochRecord> log;
  /// Learning rate used at every optimizer step.
  std::vector<double> lr_trace;
  std::string trained_view;

  /// One JSON object per line.
  std::string log_jsonl() const {
    std::string out;
    for (const auto& r : log) out += r.to_json().dump() + "\n";
    return out;
  }
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Training view actually used: the config's, else the manifest's, else "" (all views).
inline std::string resolve_trained_view(const DatasetManifest& manifest, const TrainConfig& cfg) {
  if (!cfg.trained_view.empty()) return cfg.trained_view;
  return manifest.trained_view.value_or("");
}

inline ModelConfig model_config_for(const DatasetManifest& manifest, FusionHeadConfig head) {
  head.model_dim = manifest.dim;
  ModelConfig mc{head, manifest.classes, manifest.is_clip_level};
  if (!mc.clip_level) head.validate();
  return mc;
}

inline TrainResult train(const DatasetManifest& manifest, const FusionHeadConfig& head_cfg, const TrainConfig& cfg,
                         const EpochCallback& on_epoch = {}) {
  cfg.validate();
  const std::string view = resolve_trained_view(manifest, cfg);
  if (!view.empty())
    require(std::find(manifest.views.begin(), manifest.views.end(), view) != manifest.views.end(),
            ErrorCode::kUnknownView, "trained view '" + view + "' not in manifest views");
  const auto train_records = manifest.select(Split::kTrain, view);
  const auto val_records = manifest.select(Split::kVal, view);
  if (train_records.empty())
    throw Error(ErrorCode::kEmptySplit, "no records in split 'train'" + (view.empty() ? "" : " for view '" + view + "'"));

  ModelConfig mc = model_config_for(manifest, head_cfg);
  if (!mc.clip_level && is_attention(mc.head.kind) && mc.head.use_positions)
    require(mc.head.max_frames >= cfg.frames_per_clip, ErrorCode::kInvalidArgument,
            "max_frames " + std::to_string(mc.head.max_frames) + " < frames_per_clip " +
                std::to_string(cfg.frames_per_clip));
  Model<float> model(mc);

  std::vector<EmbeddingFile> train_files, val_files;
  for (const auto* r : train_records) train_files.push_back(read_embedding(manifest.resolve(*r)));
  for (const auto* r : val_records) val_files.push_back(read_embedding(manifest.resolve(*r)));

  AdamW<float> opt(model.params(), {cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps});
  const std::size_t n = train_records.size();
  const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = cfg.epochs * steps_per_epoch;
  const EvalOptions eval_opts{cfg.eval_clips, cfg.frames_per_clip, cfg.layout};

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainResult result{model, model, 0, std::nullopt, {}, {}, view};
  result.lr_trace.reserve(total_steps);
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.shuffle) std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    double lr = 0.0;
    for (std::size_t b = 0; b < steps_per_epoch; ++b) {
      const std::size_t begin = b * cfg.batch_size;
      const std::size_t end = std::min(n, begin + cfg.batch_size);
      std::vector<std::vector<double>> acc;
      for (const auto& p : model.params()) acc.emplace_back(p.value.size(), 0.0);
      for (std::size_t i = begin; i < end; ++i) {
        const std::size_t k = order[i];
        auto clip = sample_clips(train_files[k], *train_records[k], 1, cfg.frames_per_clip, SampleMode::kTrainRandom,
                                 rng, cfg.layout, mc.clip_level)
                        .front();
        auto out = model.loss_and_grad(clip);
        loss_sum += out.loss;
        if (argmax(out.logits.data()) == clip.class_id) ++correct;
        for (std::size_t p = 0; p < acc.size(); ++p) {
          auto g = out.grads[p].data();
          for (std::size_t j = 0; j < g.size(); ++j) acc[p][j] += g[j];
        }
      }
      const double inv = 1.0 / static_cast<double>(end - begin);
      std::vector<Tensor<float>> grads;
      grads.reserve(acc.size());
      for (std::size_t p = 0; p < acc.size(); ++p) {
        std::vector<float> g(acc[p].size());
        for (std::size_t j = 0; j < g.size(); ++j) g[j] = static_cast<float>(acc[p][j] * inv);
        grads.emplace_back(model.params()[p].value.shape(), std::move(g));
      }
      lr = cosine_lr(step, total_steps, cfg.lr0, cfg.eta_min);
      result.lr_trace.push_back(lr);
      opt.step(model.params(), grads, lr);
      ++step;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.step = step;
    rec.lr = lr;
    rec.loss = loss_sum / static_cast<double>(n);
    rec.train_acc = static_cast<double>(correct) / static_cast<double>(n);
    const bool validate_now = (epoch + 1) % cfg.val_every == 0 || epoch + 1 == cfg.epochs;
    if (!val_records.empty() && validate_now) {
      std::vector<std::vector<float>> z;
      std::vector<std::size_t> y;
      for (std::size_t i = 0; i < val_records.size(); ++i) {
        z.push_back(predict_video(model, val_files[i], *val_records[i], eval_opts));
        y.push_back(val_records[i]->class_id);
      }
      rec.val_balanced_acc = balanced_accuracy(confusion_from(z, y, mc.class_count()));
      if (!result.best_val_balanced_acc || *rec.val_balanced_acc > *result.best_val_balanced_acc) {
        result.best_val_balanced_acc = rec.val_balanced_acc;
        result.best_epoch = epoch;
        result.best_model = model;
      }
    }
    result.log.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  result.final_model = model;
  if (val_records.empty()) {
    result.best_model = model;
    result.best_epoch = cfg.epochs - 1;
  }
  return result;
}

}  // namespace fprobe
