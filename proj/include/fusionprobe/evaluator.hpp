#pragma once

// Evaluation protocol: 3-clip logit averaging, balanced / top-1 / top-5
// accuracy per view, mean over novel views, and a common/rare class split.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fusionprobe/clip.hpp"
#include "fusionprobe/manifest.hpp"
#include "fusionprobe/metrics.hpp"
#include "fusionprobe/model.hpp"

namespace fprobe {

struct EvalOptions {
  std::size_t num_clips = 3;
  std::size_t frames_per_clip = 16;
  FrameLayout layout = FrameLayout::kContiguous;
};

/// Mean of the logits of `opts.num_clips` equidistant clips.
inline std::vector<float> predict_video(const Model<float>& model, const EmbeddingFile& file, const VideoRecord& record,
                                        const EvalOptions& opts = {}) {
  std::mt19937_64 unused(0);
  const bool clip_level = model.config().clip_level;
  auto clips = sample_clips(file, record, opts.num_clips, opts.frames_per_clip, SampleMode::kEvalEquidistant, unused,
                            opts.layout, clip_level);
  std::vector<double> acc(model.config().class_count(), 0.0);
  for (const auto& clip : clips) {
    auto z = model.logits(clip);
    for (std::size_t c = 0; c < acc.size(); ++c) acc[c] += z[c];
  }
  std::vector<float> out(acc.size());
  for (std::size_t c = 0; c < acc.size(); ++c) out[c] = static_cast<float>(acc[c] / static_cast<double>(clips.size()));
  return out;
}

inline std::vector<float> predict_video(const Model<float>& model, const DatasetManifest& manifest,
                                        const VideoRecord& record, const EvalOptions& opts = {}) {
  return predict_video(model, read_embedding(manifest.resolve(record)), record, opts);
}

struct MetricSet {
  double balanced_acc = 0.0;
  double top1 = 0.0;
  double top5 = 0.0;
  std::size_t samples = 0;

  nlohmann::json to_json() const {
    return {{"balanced_acc", balanced_acc}, {"top1", top1}, {"top5", top5}, {"samples", samples}};
  }
};

/// top-5 falls back to top-C when there are fewer than five classes.
inline std::size_t top5_k(std::size_t classes) { return std::min<std::size_t>(5, classes); }

/// Metrics over the samples whose true class is in `keep` (all samples when
/// `keep` is empty). nullopt when no sample qualifies.
inline std::optional<MetricSet> compute_metrics(const std::vector<std::vector<float>>& logits,
                                                const std::vector<std::size_t>& labels, std::size_t classes,
                                                const std::vector<std::size_t>& keep = {}) {
  std::vector<std::vector<float>> z;
  std::vector<std::size_t> y;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!keep.empty() && std::find(keep.begin(), keep.end(), labels[i]) == keep.end()) continue;
    z.push_back(logits[i]);
    y.push_back(labels[i]);
  }
  if (y.empty()) return std::nullopt;
  MetricSet m;
  m.samples = y.size();
  m.balanced_acc = balanced_accuracy(confusion_from(z, y, classes));
  m.top1 = topk_accuracy(z, y, 1);
  m.top5 = topk_accuracy(z, y, top5_k(classes));
  return m;
}

struct CommonRareSplit {
  std::vector<std::size_t> common;
  std::vector<std::size_t> rare;
  std::vector<std::size_t> train_counts;
};

/// Classes sorted by descending train-split frequency (ties by class id);
/// the first ceil(C/2) are common, the rest rare.
inline CommonRareSplit split_common_rare(const DatasetManifest& manifest) {
  const std::size_t C = manifest.class_count();
  CommonRareSplit s;
  s.train_counts.assign(C, 0);
  for (const auto& r : manifest.records)
    if (r.split == Split::kTrain && r.class_id < C) ++s.train_counts[r.class_id];
  std::vector<std::size_t> order(C);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return s.train_counts[a] > s.train_counts[b]; });
  const std::size_t n_common = (C + 1) / 2;
  s.common.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_common));
  s.rare.assign(order.begin() + static_cast<std::ptrdiff_t>(n_common), order.end());
  return s;
}

struct ViewReport {
  std::string view;
  bool trained = false;
  ConfusionMatrix confusion;
  MetricSet metrics;
  std::optional<MetricSet> common;
  std::optional<MetricSet> rare;
};

struct EvalReport {
  std::string trained_view;
  std::vector<std::string> classes;
  std::vector<ViewReport> views;
  /// Unweighted mean over novel views; empty when there are none.
  std::optional<MetricSet> cross_view;
  std::optional<MetricSet> cross_view_common;
  std::optional<MetricSet> cross_view_rare;
  /// All test videos pooled across views.
  MetricSet overall;
  CommonRareSplit class_split;
  std::vector<std::string> warnings;

  const ViewReport* find(const std::string& view) const {
    for (const auto& v : views)
      if (v.view == view) return &v;
    return nullptr;
  }

  nlohmann::json to_json() const {
    using nlohmann::json;
    auto opt = [](const std::optional<MetricSet>& m) { return m ? m->to_json() : json(nullptr); };
    json views_json = json::array();
    for (const auto& v : views) {
      json confusion = json::array();
      for (std::size_t t = 0; t < v.confusion.classes(); ++t) {
        json row = json::array();
        for (std::size_t p = 0; p < v.confusion.classes(); ++p) row.push_back(v.confusion.at(t, p));
        confusion.push_back(row);
      }
      views_json.push_back({{"view", v.view},
                            {"role", v.trained ? "trained" : "novel"},
                            {"metrics", v.metrics.to_json()},
                            {"common", opt(v.common)},
                            {"rare", opt(v.rare)},
                            {"confusion", confusion}});
    }
    return {{"trained_view", trained_view},
            {"classes", classes},
            {"views", views_json},
            {"cross_view", opt(cross_view)},
            {"cross_view_common", opt(cross_view_common)},
            {"cross_view_rare", opt(cross_view_rare)},
            {"overall", overall.to_json()},
            {"common_classes", class_split.common},
            {"rare_classes", class_split.rare},
            {"top5_k", top5_k(classes.size())},
            {"warnings", warnings}};
  }

  /// One row per view, then the novel-view mean and the pooled row.
  std::string to_csv() const {
    std::ostringstream os;
    os << std::setprecision(6) << std::fixed;
    auto num = [&](const std::optional<MetricSet>& m) -> std::string {
      if (!m) return "";
      std::ostringstream s;
      s << std::setprecision(6) << std::fixed << m->balanced_acc;
      return s.str();
    };
    os << "view,role,samples,balanced_acc,top1,top5,common_balanced_acc,rare_balanced_acc\n";
    for (const auto& v : views)
      os << v.view << ',' << (v.trained ? "trained" : "novel") << ',' << v.metrics.samples << ','
         << v.metrics.balanced_acc << ',' << v.metrics.top1 << ',' << v.metrics.top5 << ',' << num(v.common) << ','
         << num(v.rare) << '\n';
    if (cross_view)
      os << "novel_mean,aggregate," << cross_view->samples << ',' << cross_view->balanced_acc << ',' << cross_view->top1
         << ',' << cross_view->top5 << ',' << num(cross_view_common) << ',' << num(cross_view_rare) << '\n';
    os << "all_views,aggregate," << overall.samples << ',' << overall.balanced_acc << ',' << overall.top1 << ','
       << overall.top5 << ",,\n";
    return os.str();
  }
};

namespace detail {

inline MetricSet mean_of(const std::vector<MetricSet>& sets) {
  MetricSet m;
  for (const auto& s : sets) {
    m.balanced_acc += s.balanced_acc;
    m.top1 += s.top1;
    m.top5 += s.top5;
    m.samples += s.samples;
  }
  const double n = static_cast<double>(sets.size());
  m.balanced_acc /= n;
  m.top1 /= n;
  m.top5 /= n;
  return m;
}

}  // namespace detail

/// Predictions for every test record, in manifest order.
struct Predictions {
  std::vector<const VideoRecord*> records;
  std::vector<std::vector<float>> logits;
};

inline Predictions predict_split(const Model<float>& model, const DatasetManifest& manifest, Split split,
                                 const EvalOptions& opts = {}) {
  Predictions out;
  for (const auto& r : manifest.records) {
    if (r.split != split) continue;
    out.records.push_back(&r);
    out.logits.push_back(predict_video(model, manifest, r, opts));
  }
  return out;
}

/// Builds the report from already-computed predictions.
inline EvalReport build_report(const DatasetManifest& manifest, const Predictions& preds, const std::string& trained_view) {
  const std::size_t C = manifest.class_count();
  EvalReport report;
  report.trained_view = trained_view;
  report.classes = manifest.classes;
  report.class_split = split_common_rare(manifest);

  std::vector<std::size_t> all_labels;
  for (const auto* r : preds.records) all_labels.push_back(r->class_id);
  report.overall = *compute_metrics(preds.logits, all_labels, C);

  std::vector<MetricSet> novel, novel_common, novel_rare;
  bool trained_present = false;
  for (const auto& view : manifest.views) {
    std::vector<std::vector<float>> z;
    std::vector<std::size_t> y;
    for (std::size_t i = 0; i < preds.records.size(); ++i)
      if (preds.records[i]->view == view) {
        z.push_back(preds.logits[i]);
        y.push_back(preds.records[i]->class_id);
      }
    if (y.empty()) continue;
    ViewReport v;
    v.view = view;
    v.trained = view == trained_view;
    v.confusion = confusion_from(z, y, C);
    v.metrics = *compute_metrics(z, y, C);
    v.common = compute_metrics(z, y, C, report.class_split.common);
    v.rare = compute_metrics(z, y, C, report.class_split.rare);
    for (std::size_t c = 0; c < C; ++c)
      if (std::find(y.begin(), y.end(), c) == y.end())
        report.warnings.push_back("class '" + manifest.classes[c] + "' absent from view '" + view +
                                  "' test split; excluded from its balanced accuracy");
    if (v.trained) {
      trained_present = true;
    } else {
      novel.push_back(v.metrics);
      if (v.common) novel_common.push_back(*v.common);
      if (v.rare) novel_rare.push_back(*v.rare);
    }
    report.views.push_back(std::move(v));
  }
  if (!trained_present) report.warnings.push_back("trained view '" + trained_view + "' has no test records");
  if (novel.empty()) {
    report.warnings.push_back("no novel views in the test split; cross-view metrics are empty");
  } else {
    report.cross_view = detail::mean_of(novel);
    if (!novel_common.empty()) report.cross_view_common = detail::mean_of(novel_common);
    if (!novel_rare.empty()) report.cross_view_rare = detail::mean_of(novel_rare);
  }
  return report;
}

inline EvalReport evaluate(const Model<float>& model, const DatasetManifest& manifest, const std::string& trained_view,
                           const EvalOptions& opts = {}) {
  if (!manifest.has_split(Split::kTest))
    throw Error(ErrorCode::kEmptySplit, "manifest '" + manifest.dataset + "' has no records in split 'test'");
  return build_report(manifest, predict_split(model, manifest, Split::kTest, opts), trained_view);
}

/// One exported row per test video.
struct EmbeddingRow {
  std::vector<float> feature;
  std::string view;
  std::size_t class_id = 0;
  std::size_t prediction = 0;
};

/// Fused feature of a video: mean of the fused features of its eval clips.
inline std::vector<float> video_feature(const Model<float>& model, const EmbeddingFile& file, const VideoRecord& record,
                                        const EvalOptions& opts = {}) {
  std::mt19937_64 unused(0);
  auto clips = sample_clips(file, record, opts.num_clips, opts.frames_per_clip, SampleMode::kEvalEquidistant, unused,
                            opts.layout, model.config().clip_level);
  std::vector<double> acc(model.config().feature_dim(), 0.0);
  for (const auto& clip : clips) {
    auto f = model.feature(clip);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += f[i];
  }
  std::vector<float> out(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(acc[i] / static_cast<double>(clips.size()));
  return out;
}

inline std::vector<EmbeddingRow> export_embeddings(const Model<float>& model, const DatasetManifest& manifest,
                                                   const EvalOptions& opts = {}) {
  if (!manifest.has_split(Split::kTest))
    throw Error(ErrorCode::kEmptySplit, "manifest '" + manifest.dataset + "' has no records in split 'test'");
  std::vector<EmbeddingRow> rows;
  for (const auto& r : manifest.records) {
    if (r.split != Split::kTest) continue;
    const auto file = read_embedding(manifest.resolve(r));
    EmbeddingRow row;
    row.feature = video_feature(model, file, r, opts);
    row.view = r.view;
    row.class_id = r.class_id;
    row.prediction = argmax(predict_video(model, file, r, opts));
    rows.push_back(std::move(row));
  }
  return rows;
}

/// CSV with columns f0..f{D-1}, view, class_id, prediction.
inline std::string embeddings_csv(const std::vector<EmbeddingRow>& rows) {
  std::ostringstream os;
  os << std::setprecision(9);
  const std::size_t D = rows.empty() ? 0 : rows.front().feature.size();
  for (std::size_t i = 0; i < D; ++i) os << 'f' << i << ',';
  os << "view,class_id,prediction\n";
  for (const auto& r : rows) {
    for (float v : r.feature) os << v << ',';
    os << r.view << ',' << r.class_id << ',' << r.prediction << '\n';
  }
  return os.str();
}

/// Uniform-random logits against uniform-random labels; the chance-level
/// reference every trained probe should beat.
struct RandomBaseline {
  double top1 = 0.0;
  double balanced_acc = 0.0;
};

inline RandomBaseline random_baseline(std::size_t classes, std::size_t samples, std::uint64_t seed) {
  require(classes >= 1 && samples >= 1, ErrorCode::kInvalidArgument, "random baseline needs classes and samples");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> logit(0.0f, 1.0f);
  std::uniform_int_distribution<std::size_t> label(0, classes - 1);
  std::vector<std::vector<float>> z(samples, std::vector<float>(classes));
  std::vector<std::size_t> y(samples);
  for (std::size_t i = 0; i < samples; ++i) {
    for (auto& v : z[i]) v = logit(rng);
    y[i] = label(rng);
  }
  return {topk_accuracy(z, y, 1), balanced_accuracy(confusion_from(z, y, classes))};
}

}  // namespace fprobe
