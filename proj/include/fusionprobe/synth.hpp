#pragma once

// Synthetic token-embedding benchmarks.
//
// Order task: every class cycles through the same P frame prototypes, one
// prototype per `segment` frames, in a class-specific cyclic order with a
// random phase per video. Any window of P * segment frames holds each
// prototype equally often, so frame-pooled features carry no class signal.
//
// Shift task: class-mean prototypes plus noise. Novel views apply an
// orthogonal rotation, a translation and extra noise to every token.

#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fusionprobe/embedding_file.hpp"
#include "fusionprobe/error.hpp"
#include "fusionprobe/fusion.hpp"
#include "fusionprobe/manifest.hpp"

namespace fprobe {

struct ViewShift {
  /// Angle applied in each of the D/2 rotation planes, radians.
  double rotation = 0.0;
  /// Std of the per-view translation added to every coordinate.
  double translation = 0.0;
  /// Extra per-coordinate noise std on novel views.
  double noise = 0.0;
};

struct SynthConfig {
  std::string name = "custom";
  std::size_t class_count = 4;
  std::size_t view_count = 3;
  /// Index of the trained view in [0, view_count).
  std::size_t trained_view = 0;
  std::size_t videos_per_class_per_view = 25;
  std::size_t frames = 48;
  std::size_t tokens = 5;
  std::size_t dim = 32;
  bool order_task = true;
  std::size_t prototypes = 4;
  std::size_t segment = 1;
  /// Per-coordinate noise std on every token.
  double noise = 0.3;
  /// Std of the fixed per-token-position offsets (token 0, the CLS slot, has none).
  double token_offset = 0.5;
  /// Std of class means around zero (shift task).
  double class_scale = 1.0;
  ViewShift view_shift;
  /// Trained-view videos per class in train and val; the rest are test.
  std::size_t train_per_class = 15;
  std::size_t val_per_class = 5;
  std::uint64_t seed = 0;

  std::string view_name(std::size_t v) const { return "view" + std::to_string(v); }
  std::string class_name(std::size_t c) const { return "class" + std::to_string(c); }

  void validate() const {
    require(class_count >= 2 && view_count >= 2, ErrorCode::kInvalidArgument, "synth needs C >= 2 and V >= 2");
    require(trained_view < view_count, ErrorCode::kInvalidArgument, "trained_view out of range");
    require(videos_per_class_per_view > 0 && frames > 0 && tokens > 0 && dim > 0 && segment > 0,
            ErrorCode::kInvalidArgument, "synth sizes must be positive");
    require(train_per_class + val_per_class < videos_per_class_per_view, ErrorCode::kInvalidArgument,
            "train + val per class must leave test videos");
    require(noise >= 0 && token_offset >= 0 && view_shift.translation >= 0 && view_shift.noise >= 0,
            ErrorCode::kInvalidArgument, "noise scales must be non-negative");
    if (order_task) {
      require(prototypes >= 2, ErrorCode::kInvalidArgument, "order task needs >= 2 prototypes");
      std::size_t orders = 1;
      for (std::size_t k = 2; k < prototypes && orders < class_count; ++k) orders *= k;
      require(orders >= class_count, ErrorCode::kInvalidArgument,
              std::to_string(prototypes) + " prototypes give fewer than " + std::to_string(class_count) +
                  " distinct cyclic orders");
    }
  }
};

inline nlohmann::json to_json(const SynthConfig& c) {
  return {{"name", c.name},
          {"class_count", c.class_count},
          {"view_count", c.view_count},
          {"trained_view", c.trained_view},
          {"videos_per_class_per_view", c.videos_per_class_per_view},
          {"frames", c.frames},
          {"tokens", c.tokens},
          {"dim", c.dim},
          {"order_task", c.order_task},
          {"prototypes", c.prototypes},
          {"segment", c.segment},
          {"noise", c.noise},
          {"token_offset", c.token_offset},
          {"class_scale", c.class_scale},
          {"view_shift",
           {{"rotation", c.view_shift.rotation},
            {"translation", c.view_shift.translation},
            {"noise", c.view_shift.noise}}},
          {"train_per_class", c.train_per_class},
          {"val_per_class", c.val_per_class},
          {"seed", c.seed}};
}

inline SynthConfig synth_config_from_json(const nlohmann::json& j, SynthConfig c = {}) {
  try {
    c.name = j.value("name", c.name);
    c.class_count = j.value("class_count", c.class_count);
    c.view_count = j.value("view_count", c.view_count);
    c.trained_view = j.value("trained_view", c.trained_view);
    c.videos_per_class_per_view = j.value("videos_per_class_per_view", c.videos_per_class_per_view);
    c.frames = j.value("frames", c.frames);
    c.tokens = j.value("tokens", c.tokens);
    c.dim = j.value("dim", c.dim);
    c.order_task = j.value("order_task", c.order_task);
    c.prototypes = j.value("prototypes", c.prototypes);
    c.segment = j.value("segment", c.segment);
    c.noise = j.value("noise", c.noise);
    c.token_offset = j.value("token_offset", c.token_offset);
    c.class_scale = j.value("class_scale", c.class_scale);
    if (j.contains("view_shift")) {
      const auto& s = j.at("view_shift");
      c.view_shift.rotation = s.value("rotation", c.view_shift.rotation);
      c.view_shift.translation = s.value("translation", c.view_shift.translation);
      c.view_shift.noise = s.value("noise", c.view_shift.noise);
    }
    c.train_per_class = j.value("train_per_class", c.train_per_class);
    c.val_per_class = j.value("val_per_class", c.val_per_class);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kBadFormat, std::string("synth config: ") + e.what());
  }
  return c;
}

/// Temporal-order benchmark: pooling is at chance, order-aware heads separate it.
inline SynthConfig order_bench(std::uint64_t seed = 7) {
  SynthConfig c;
  c.name = "order";
  c.order_task = true;
  c.seed = seed;
  return c;
}

/// View-shift benchmark: separable classes, rotated and translated novel views.
inline SynthConfig shift_bench(std::uint64_t seed = 11) {
  SynthConfig c;
  c.name = "shift";
  c.order_task = false;
  c.noise = 1.0;
  c.view_shift = {1.3, 0.5, 0.5};
  c.seed = seed;
  return c;
}

/// The P-cycle visiting order of each class: prototype 0 first, then the
/// class_count lexicographically smallest arrangements of 1..P-1.
inline std::vector<std::vector<std::size_t>> class_orders(std::size_t class_count, std::size_t prototypes) {
  std::vector<std::size_t> tail(prototypes - 1);
  std::iota(tail.begin(), tail.end(), std::size_t{1});
  std::vector<std::vector<std::size_t>> out;
  do {
    std::vector<std::size_t> order{0};
    order.insert(order.end(), tail.begin(), tail.end());
    out.push_back(std::move(order));
  } while (out.size() < class_count && std::next_permutation(tail.begin(), tail.end()));
  require(out.size() == class_count, ErrorCode::kInvalidArgument, "not enough distinct class orders");
  return out;
}

/// Row-major D x D orthogonal matrix Q * blockdiag(R(angle)) * Q^T with Q
/// drawn from Gram-Schmidt on a Gaussian matrix. An odd D leaves one axis fixed.
inline std::vector<double> random_rotation(std::size_t dim, double angle, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> q(dim, std::vector<double>(dim));
  for (auto& row : q)
    for (auto& v : row) v = normal(rng);
  for (std::size_t i = 0; i < dim; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < dim; ++k) dot += q[i][k] * q[j][k];
      for (std::size_t k = 0; k < dim; ++k) q[i][k] -= dot * q[j][k];
    }
    double norm = 0.0;
    for (double v : q[i]) norm += v * v;
    norm = std::sqrt(norm);
    for (double& v : q[i]) v /= norm;
  }
  // Rows of q are an orthonormal basis u_0..u_{D-1}; rotate within (u_2i, u_2i+1).
  const double c = std::cos(angle), s = std::sin(angle);
  std::vector<double> r(dim * dim, 0.0);
  for (std::size_t i = 0; i < dim; ++i) r[i * dim + i] = 1.0;
  for (std::size_t p = 0; p + 1 < dim; p += 2) {
    const auto& a = q[p];
    const auto& b = q[p + 1];
    for (std::size_t i = 0; i < dim; ++i)
      for (std::size_t j = 0; j < dim; ++j)
        r[i * dim + j] += (c - 1.0) * (a[i] * a[j] + b[i] * b[j]) + s * (b[i] * a[j] - a[i] * b[j]);
  }
  return r;
}

struct SynthDataset {
  DatasetManifest manifest;
  /// Parallel to manifest.records.
  std::vector<EmbeddingFile> files;
  /// Frame prototypes (order task) or class means (shift task), before any view transform.
  std::vector<std::vector<double>> prototypes;
  /// Order task: prototype cycle of each class.
  std::vector<std::vector<std::size_t>> orders;
};

namespace detail {

inline std::mt19937_64 stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0,
                              std::uint64_t d = 0) {
  std::seed_seq seq{seed & 0xffffffffu, seed >> 32, a, b, c, d};
  return std::mt19937_64(seq);
}

}  // namespace detail

/// Builds the benchmark in memory. Record paths are "<view>/<video_id>.fpeb".
inline SynthDataset synthesize(const SynthConfig& cfg) {
  cfg.validate();
  const std::size_t C = cfg.class_count, D = cfg.dim, N = cfg.tokens, F = cfg.frames;
  std::normal_distribution<double> normal(0.0, 1.0);

  auto shared = detail::stream(cfg.seed, 1);
  const std::size_t P = cfg.order_task ? cfg.prototypes : C;
  const double proto_scale = cfg.order_task ? 1.0 : cfg.class_scale;
  std::vector<std::vector<double>> protos(P, std::vector<double>(D));
  for (auto& p : protos)
    for (auto& v : p) v = proto_scale * normal(shared);
  std::vector<std::vector<double>> offsets(N, std::vector<double>(D, 0.0));
  for (std::size_t n = 1; n < N; ++n)
    for (auto& v : offsets[n]) v = cfg.token_offset * normal(shared);
  const auto orders = cfg.order_task ? class_orders(C, P) : std::vector<std::vector<std::size_t>>{};

  SynthDataset out;
  out.prototypes = protos;
  out.orders = orders;
  auto& m = out.manifest;
  m.dataset = "synth-" + cfg.name;
  for (std::size_t c = 0; c < C; ++c) m.classes.push_back(cfg.class_name(c));
  for (std::size_t v = 0; v < cfg.view_count; ++v) m.views.push_back(cfg.view_name(v));
  m.trained_view = cfg.view_name(cfg.trained_view);
  m.tokens_per_frame = static_cast<std::uint32_t>(N);
  m.dim = static_cast<std::uint32_t>(D);

  for (std::size_t v = 0; v < cfg.view_count; ++v) {
    const bool trained = v == cfg.trained_view;
    auto view_rng = detail::stream(cfg.seed, 2, v);
    std::vector<double> rot, shift(D, 0.0);
    if (!trained) {
      rot = random_rotation(D, cfg.view_shift.rotation, view_rng);
      for (auto& s : shift) s = cfg.view_shift.translation * normal(view_rng);
    }
    const double extra = trained ? 0.0 : cfg.view_shift.noise;
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t i = 0; i < cfg.videos_per_class_per_view; ++i) {
        auto rng = detail::stream(cfg.seed, 3, v, c, i);
        const std::size_t phase =
            cfg.order_task ? std::uniform_int_distribution<std::size_t>(0, P * cfg.segment - 1)(rng) : 0;
        EmbeddingFile file;
        file.header.frames = static_cast<std::uint32_t>(F);
        file.header.tokens = static_cast<std::uint32_t>(N);
        file.header.dim = static_cast<std::uint32_t>(D);
        file.header.cls_index = 0;
        file.payload.reserve(F * N * D);
        std::vector<double> x(D), y(D);
        for (std::size_t f = 0; f < F; ++f) {
          const auto& mean = cfg.order_task ? protos[orders[c][((f + phase) / cfg.segment) % P]] : protos[c];
          for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t d = 0; d < D; ++d) x[d] = mean[d] + offsets[n][d] + cfg.noise * normal(rng);
            if (!trained) {
              for (std::size_t a = 0; a < D; ++a) {
                double s = 0.0;
                for (std::size_t b = 0; b < D; ++b) s += rot[a * D + b] * x[b];
                y[a] = s + shift[a] + extra * normal(rng);
              }
              x.swap(y);
            }
            for (double val : x) file.payload.push_back(static_cast<float>(val));
          }
        }
        VideoRecord rec;
        rec.view = cfg.view_name(v);
        rec.class_id = c;
        rec.video_id = rec.view + "_c" + std::to_string(c) + "_" + std::to_string(i);
        rec.path = rec.view + "/" + rec.video_id + ".fpeb";
        rec.frames = static_cast<std::uint32_t>(F);
        if (!trained || i >= cfg.train_per_class + cfg.val_per_class)
          rec.split = Split::kTest;
        else
          rec.split = i < cfg.train_per_class ? Split::kTrain : Split::kVal;
        m.records.push_back(std::move(rec));
        out.files.push_back(std::move(file));
      }
    }
  }
  return out;
}

/// Writes <out_dir>/manifest.json plus one FPEB file per video and returns the manifest.
inline DatasetManifest generate(const SynthConfig& cfg, const std::filesystem::path& out_dir) {
  auto data = synthesize(cfg);
  for (std::size_t i = 0; i < data.files.size(); ++i)
    write_embedding(out_dir / data.manifest.records[i].path, data.files[i]);
  save_manifest(data.manifest, out_dir / "manifest.json");
  data.manifest.base_dir = out_dir;
  return data.manifest;
}

/// Expected outcome of one head on one canonical bench.
struct AccuracyBand {
  /// Balanced-accuracy band on the bench's primary measurement.
  double lo = 0.0;
  double hi = 1.0;
  /// Shift bench: trained-view accuracy must be >= novel-view accuracy.
  bool trained_ge_novel = false;
  /// Shift bench: minimum trained minus novel gap.
  double min_gap = 0.0;
};

/// Acceptance band for (bench, head). Order bench: pooling within
/// [chance - 5, chance + 10] points, self_attn_all_avg and lstm >= 90%.
inline AccuracyBand oracle_accuracy(const SynthConfig& bench, FusionKind kind) {
  if (bench.name == "order") {
    const double chance = 1.0 / static_cast<double>(bench.class_count);
    if (kind == FusionKind::kAvgPool || kind == FusionKind::kMaxPool) return {chance - 0.05, chance + 0.10};
    if (kind == FusionKind::kSelfAttnAllAvg || kind == FusionKind::kLstm) return {0.90, 1.0};
    return {0.0, 1.0};
  }
  if (bench.name == "shift") return {0.0, 1.0, true, is_pooling(kind) ? 0.15 : 0.0};
  throw Error(ErrorCode::kInvalidArgument, "no acceptance band for bench '" + bench.name + "'");
}

}  // namespace fprobe
