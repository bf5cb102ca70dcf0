#pragma once

// Temporal fusion heads: each maps the token embeddings of one clip,
// [T, N, D], to a single clip-level feature vector.

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fusionprobe/autodiff.hpp"
#include "fusionprobe/error.hpp"
#include "fusionprobe/params.hpp"

namespace fprobe {

enum class FusionKind {
  kAvgPool,
  kMaxPool,
  kAvgPoolRelu,
  kMaxPoolRelu,
  kSelfAttnAllAvg,
  kSelfAttnAllMax,
  kSelfAttnClsAvg,
  kSelfAttnClsMax,
  kWeightedSelfAttn,
  kCrossAttnAll,
  kCrossAttnCls,
  kLstm,
  kTcn,
};

inline constexpr std::array<FusionKind, 13> kAllFusionKinds{
    FusionKind::kAvgPool,        FusionKind::kMaxPool,        FusionKind::kAvgPoolRelu,
    FusionKind::kMaxPoolRelu,    FusionKind::kSelfAttnAllAvg, FusionKind::kSelfAttnAllMax,
    FusionKind::kSelfAttnClsAvg, FusionKind::kSelfAttnClsMax, FusionKind::kWeightedSelfAttn,
    FusionKind::kCrossAttnAll,   FusionKind::kCrossAttnCls,   FusionKind::kLstm,
    FusionKind::kTcn,
};

inline std::string_view to_string(FusionKind kind) {
  switch (kind) {
    case FusionKind::kAvgPool: return "avg_pool";
    case FusionKind::kMaxPool: return "max_pool";
    case FusionKind::kAvgPoolRelu: return "avg_pool_relu";
    case FusionKind::kMaxPoolRelu: return "max_pool_relu";
    case FusionKind::kSelfAttnAllAvg: return "self_attn_all_avg";
    case FusionKind::kSelfAttnAllMax: return "self_attn_all_max";
    case FusionKind::kSelfAttnClsAvg: return "self_attn_cls_avg";
    case FusionKind::kSelfAttnClsMax: return "self_attn_cls_max";
    case FusionKind::kWeightedSelfAttn: return "weighted_self_attn";
    case FusionKind::kCrossAttnAll: return "cross_attn_all";
    case FusionKind::kCrossAttnCls: return "cross_attn_cls";
    case FusionKind::kLstm: return "lstm";
    case FusionKind::kTcn: return "tcn";
  }
  return "?";
}

inline FusionKind parse_fusion_kind(const std::string& name) {
  for (FusionKind k : kAllFusionKinds)
    if (to_string(k) == name) return k;
  throw Error(ErrorCode::kInvalidArgument, "unknown fusion head '" + name + "'");
}

inline bool is_pooling(FusionKind k) {
  return k == FusionKind::kAvgPool || k == FusionKind::kMaxPool || k == FusionKind::kAvgPoolRelu ||
         k == FusionKind::kMaxPoolRelu;
}

inline bool is_self_attention(FusionKind k) {
  return k == FusionKind::kSelfAttnAllAvg || k == FusionKind::kSelfAttnAllMax || k == FusionKind::kSelfAttnClsAvg ||
         k == FusionKind::kSelfAttnClsMax || k == FusionKind::kWeightedSelfAttn;
}

inline bool is_cross_attention(FusionKind k) {
  return k == FusionKind::kCrossAttnAll || k == FusionKind::kCrossAttnCls;
}

inline bool is_attention(FusionKind k) { return is_self_attention(k) || is_cross_attention(k); }

/// The *_relu kinds put a hidden ReLU layer in the probe; the fusion itself is plain pooling.
inline bool uses_relu_probe(FusionKind k) { return k == FusionKind::kAvgPoolRelu || k == FusionKind::kMaxPoolRelu; }

/// Heads whose output does not depend on frame order when positions are off.
inline bool is_order_invariant(FusionKind k) { return k != FusionKind::kLstm && k != FusionKind::kTcn; }

struct FusionHeadConfig {
  FusionKind kind = FusionKind::kAvgPool;
  std::size_t num_heads = 8;
  /// Input embedding dim D; 0 means "take it from the data".
  std::size_t model_dim = 0;
  /// LSTM/TCN width; 0 means D.
  std::size_t hidden_dim = 0;
  std::size_t tcn_levels = 3;
  std::size_t tcn_kernel = 3;
  bool use_positions = true;
  /// Length of the learnable position table.
  std::size_t max_frames = 16;
  std::size_t ff_mult = 4;
  std::size_t depth = 1;
  /// self_attn_all_*: pool only the CLS outputs of each frame instead of all tokens.
  bool pool_cls_outputs = false;
  double position_init_std = 1.0;
  std::uint64_t seed = 0;

  std::size_t resolved_hidden() const { return hidden_dim ? hidden_dim : model_dim; }

  std::size_t output_dim() const {
    return (kind == FusionKind::kLstm || kind == FusionKind::kTcn) ? resolved_hidden() : model_dim;
  }

  void validate() const {
    require(model_dim > 0, ErrorCode::kInvalidArgument, "fusion head model_dim must be positive");
    if (is_attention(kind)) {
      require(num_heads > 0 && model_dim % num_heads == 0, ErrorCode::kInvalidArgument,
              [&] { return "model_dim " + std::to_string(model_dim) + " not divisible by num_heads " + std::to_string(num_heads); });
      require(depth >= 1 && ff_mult >= 1, ErrorCode::kInvalidArgument, "depth and ff_mult must be >= 1");
      if (use_positions) require(max_frames >= 1, ErrorCode::kInvalidArgument, "max_frames must be >= 1");
    }
    if (kind == FusionKind::kTcn)
      require(tcn_levels >= 1 && tcn_kernel >= 1, ErrorCode::kInvalidArgument, "tcn levels/kernel must be >= 1");
  }
};

inline nlohmann::json to_json(const FusionHeadConfig& c) {
  return {{"kind", std::string(to_string(c.kind))},
          {"num_heads", c.num_heads},
          {"model_dim", c.model_dim},
          {"hidden_dim", c.hidden_dim},
          {"tcn_levels", c.tcn_levels},
          {"tcn_kernel", c.tcn_kernel},
          {"use_positions", c.use_positions},
          {"max_frames", c.max_frames},
          {"ff_mult", c.ff_mult},
          {"depth", c.depth},
          {"pool_cls_outputs", c.pool_cls_outputs},
          {"position_init_std", c.position_init_std},
          {"seed", c.seed}};
}

/// Missing keys keep the values already in `base`.
inline FusionHeadConfig head_config_from_json(const nlohmann::json& j, FusionHeadConfig base = {}) {
  try {
    if (j.contains("kind")) base.kind = parse_fusion_kind(j.at("kind").get<std::string>());
    base.num_heads = j.value("num_heads", base.num_heads);
    base.model_dim = j.value("model_dim", base.model_dim);
    base.hidden_dim = j.value("hidden_dim", base.hidden_dim);
    base.tcn_levels = j.value("tcn_levels", base.tcn_levels);
    base.tcn_kernel = j.value("tcn_kernel", base.tcn_kernel);
    base.use_positions = j.value("use_positions", base.use_positions);
    base.max_frames = j.value("max_frames", base.max_frames);
    base.ff_mult = j.value("ff_mult", base.ff_mult);
    base.depth = j.value("depth", base.depth);
    base.pool_cls_outputs = j.value("pool_cls_outputs", base.pool_cls_outputs);
    base.position_init_std = j.value("position_init_std", base.position_init_std);
    base.seed = j.value("seed", base.seed);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kBadFormat, std::string("head config: ") + e.what());
  }
  return base;
}

/// Intermediate values exposed for inspection in tests.
template <typename Scalar>
struct FusionTrace {
  /// Attention probabilities of every block, [heads, queries, keys].
  std::vector<Var<Scalar>> attention;
  /// weighted_self_attn only: importance of each token, [L].
  std::optional<Var<Scalar>> token_weights;
};

template <typename Scalar>
Var<Scalar> linear(Var<Scalar> x, Var<Scalar> weight, Var<Scalar> bias) {
  return add(matmul(x, weight), bias);
}

template <typename Scalar>
class FusionHead {
 public:
  using V = Var<Scalar>;

  /// Registers the head's parameters in `store` (names prefixed "head.").
  FusionHead(const FusionHeadConfig& cfg, ParameterStore<Scalar>& store, std::mt19937_64& rng) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t D = cfg_.model_dim;
    if (is_attention(cfg_.kind)) {
      if (cfg_.use_positions)
        pos_ = store.add("head.pos", normal_tensor<Scalar>({cfg_.max_frames, D}, cfg_.position_init_std, rng), false);
      if (is_cross_attention(cfg_.kind)) query_ = store.add("head.query", normal_tensor<Scalar>({1, D}, 1.0, rng), true);
      const std::size_t blocks = is_cross_attention(cfg_.kind) ? 1 : cfg_.depth;
      for (std::size_t b = 0; b < blocks; ++b)
        blocks_.push_back(add_block(store, "head.block" + std::to_string(b) + ".", D, rng));
    } else if (cfg_.kind == FusionKind::kLstm) {
      add_lstm(store, rng);
    } else if (cfg_.kind == FusionKind::kTcn) {
      add_tcn(store, rng);
    }
  }

  const FusionHeadConfig& config() const { return cfg_; }
  std::size_t output_dim() const { return cfg_.output_dim(); }

  /// `p` are the store's parameters bound on the same graph as `tokens`.
  V forward(const std::vector<V>& p, V tokens, std::optional<std::size_t> cls, FusionTrace<Scalar>* trace = nullptr) const {
    require(tokens.rank() == 3, ErrorCode::kDimension, [&] { return "fusion input must be [T, N, D], got " + shape_string(tokens.shape()); });
    require(tokens.dim(2) == cfg_.model_dim, ErrorCode::kDimension,
            [&] { return "fusion input dim " + std::to_string(tokens.dim(2)) + " != model_dim " + std::to_string(cfg_.model_dim); });
    switch (cfg_.kind) {
      case FusionKind::kAvgPool:
      case FusionKind::kAvgPoolRelu: return mean(descriptor(tokens, cls), 0);
      case FusionKind::kMaxPool:
      case FusionKind::kMaxPoolRelu: return max(descriptor(tokens, cls), 0);
      case FusionKind::kSelfAttnAllAvg: return self_attention(p, tokens, cls, false, false, trace);
      case FusionKind::kSelfAttnAllMax: return self_attention(p, tokens, cls, false, true, trace);
      case FusionKind::kSelfAttnClsAvg: return self_attention(p, tokens, cls, true, false, trace);
      case FusionKind::kSelfAttnClsMax: return self_attention(p, tokens, cls, true, true, trace);
      case FusionKind::kWeightedSelfAttn: return weighted_self_attention(p, tokens, cls, trace);
      case FusionKind::kCrossAttnAll: return cross_attention(p, tokens, cls, false, trace);
      case FusionKind::kCrossAttnCls: return cross_attention(p, tokens, cls, true, trace);
      case FusionKind::kLstm: return lstm(p, descriptor(tokens, cls));
      case FusionKind::kTcn: return tcn(p, descriptor(tokens, cls));
    }
    throw Error(ErrorCode::kInvalidArgument, "unhandled fusion kind");
  }

  /// Per-frame descriptor [T, D]: the CLS token when there is one, else the
  /// mean over the frame's tokens.
  static V descriptor(V tokens, std::optional<std::size_t> cls) {
    const std::size_t T = tokens.dim(0), D = tokens.dim(2);
    if (cls) return reshape(slice(tokens, 1, *cls, 1), {T, D});
    return mean(tokens, 1);
  }

 private:
  struct Block {
    std::size_t ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };

  Block add_block(ParameterStore<Scalar>& store, const std::string& prefix, std::size_t D, std::mt19937_64& rng) {
    const std::size_t F = cfg_.ff_mult * D;
    auto ones = [](std::size_t n) { return Tensor<Scalar>::filled({n}, Scalar{1}); };
    auto zeros = [](Shape s) { return Tensor<Scalar>(std::move(s)); };
    Block b;
    b.ln1_g = store.add(prefix + "ln1.gain", ones(D), false);
    b.ln1_b = store.add(prefix + "ln1.bias", zeros({D}), false);
    b.wq = store.add(prefix + "wq", fan_in_uniform<Scalar>({D, D}, D, rng), true);
    b.bq = store.add(prefix + "bq", zeros({D}), false);
    b.wk = store.add(prefix + "wk", fan_in_uniform<Scalar>({D, D}, D, rng), true);
    b.bk = store.add(prefix + "bk", zeros({D}), false);
    b.wv = store.add(prefix + "wv", fan_in_uniform<Scalar>({D, D}, D, rng), true);
    b.bv = store.add(prefix + "bv", zeros({D}), false);
    // Zero output projections make the block an exact identity at init.
    b.wo = store.add(prefix + "wo", zeros({D, D}), true);
    b.bo = store.add(prefix + "bo", zeros({D}), false);
    b.ln2_g = store.add(prefix + "ln2.gain", ones(D), false);
    b.ln2_b = store.add(prefix + "ln2.bias", zeros({D}), false);
    b.w1 = store.add(prefix + "ff.w1", fan_in_uniform<Scalar>({D, F}, D, rng), true);
    b.b1 = store.add(prefix + "ff.b1", zeros({F}), false);
    b.w2 = store.add(prefix + "ff.w2", zeros({F, D}), true);
    b.b2 = store.add(prefix + "ff.b2", zeros({D}), false);
    return b;
  }

  void add_lstm(ParameterStore<Scalar>& store, std::mt19937_64& rng) {
    const std::size_t D = cfg_.model_dim, H = cfg_.resolved_hidden();
    for (const char* gate : {"i", "f", "g", "o"}) {
      const std::string g(gate);
      lstm_w_.push_back(store.add("head.lstm.w_" + g, fan_in_uniform<Scalar>({D, H}, H, rng), true));
      lstm_u_.push_back(store.add("head.lstm.u_" + g, fan_in_uniform<Scalar>({H, H}, H, rng), true));
      lstm_b_.push_back(store.add("head.lstm.b_" + g, Tensor<Scalar>({H}), false));
    }
  }

  void add_tcn(ParameterStore<Scalar>& store, std::mt19937_64& rng) {
    const std::size_t D = cfg_.model_dim, H = cfg_.resolved_hidden(), k = cfg_.tcn_kernel;
    for (std::size_t level = 0; level < cfg_.tcn_levels; ++level) {
      const std::size_t in = level == 0 ? D : H;
      const std::string prefix = "head.tcn" + std::to_string(level) + ".";
      TcnLevel l;
      l.w1 = store.add(prefix + "conv1.w", fan_in_uniform<Scalar>({k, in, H}, k * in, rng), true);
      l.b1 = store.add(prefix + "conv1.b", Tensor<Scalar>({H}), false);
      l.w2 = store.add(prefix + "conv2.w", fan_in_uniform<Scalar>({k, H, H}, k * H, rng), true);
      l.b2 = store.add(prefix + "conv2.b", Tensor<Scalar>({H}), false);
      if (level == 0) {
        l.skip_w = store.add(prefix + "skip.w", fan_in_uniform<Scalar>({in, H}, in, rng), true);
        l.skip_b = store.add(prefix + "skip.b", Tensor<Scalar>({H}), false);
      }
      tcn_.push_back(l);
    }
  }

  /// Adds the learnable per-frame position embedding to every token of that
  /// frame. `x` is [T, N, D]; returns [T*N, D].
  V with_positions(const std::vector<V>& p, V x) const {
    const std::size_t T = x.dim(0), N = x.dim(1), D = x.dim(2);
    V flat = reshape(x, {T * N, D});
    if (!cfg_.use_positions) return flat;
    require(T <= cfg_.max_frames, ErrorCode::kInvalidArgument,
            [&] { return "clip has " + std::to_string(T) + " frames but position table holds " + std::to_string(cfg_.max_frames); });
    Tensor<Scalar> selector({T * N, T});
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t n = 0; n < N; ++n) selector[(t * N + n) * T + t] = Scalar{1};
    V per_token = matmul(x.graph->constant(std::move(selector)), slice(p[*pos_], 0, 0, T));
    return add(flat, per_token);
  }

  /// Multi-head scaled dot-product attention; returns the merged context
  /// [Lq, D] before the output projection.
  V attend(const std::vector<V>& p, const Block& b, V queries, V keys, FusionTrace<Scalar>* trace) const {
    const std::size_t D = cfg_.model_dim, H = cfg_.num_heads, dh = D / H;
    const std::size_t Lq = queries.dim(0), Lk = keys.dim(0);
    V q = permute(reshape(linear(queries, p[b.wq], p[b.bq]), {Lq, H, dh}), {1, 0, 2});
    V k = permute(reshape(linear(keys, p[b.wk], p[b.bk]), {Lk, H, dh}), {1, 2, 0});
    V v = permute(reshape(linear(keys, p[b.wv], p[b.bv]), {Lk, H, dh}), {1, 0, 2});
    V scores = scale(matmul(q, k), static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(dh))));
    V attn = softmax(scores, 2);
    if (trace) trace->attention.push_back(attn);
    return reshape(permute(matmul(attn, v), {1, 0, 2}), {Lq, D});
  }

  V feed_forward(const std::vector<V>& p, const Block& b, V x) const {
    V h = layer_norm(x, p[b.ln2_g], p[b.ln2_b]);
    return linear(relu(linear(h, p[b.w1], p[b.b1])), p[b.w2], p[b.b2]);
  }

  /// Pre-norm transformer encoder block over a token sequence [L, D].
  V self_block(const std::vector<V>& p, const Block& b, V x, FusionTrace<Scalar>* trace) const {
    V h = layer_norm(x, p[b.ln1_g], p[b.ln1_b]);
    V x1 = add(x, linear(attend(p, b, h, h, trace), p[b.wo], p[b.bo]));
    return add(x1, feed_forward(p, b, x1));
  }

  V pool(V x, std::size_t axis, bool use_max) const { return use_max ? max(x, axis) : mean(x, axis); }

  V self_attention(const std::vector<V>& p, V tokens, std::optional<std::size_t> cls, bool cls_only, bool use_max,
                   FusionTrace<Scalar>* trace) const {
    if (cls_only && !cls) throw Error(ErrorCode::kNoCls, "CLS self-attention needs a CLS token");
    V seq = cls_only ? slice(tokens, 1, *cls, 1) : tokens;
    const std::size_t T = seq.dim(0), N = seq.dim(1), D = seq.dim(2);
    V x = with_positions(p, seq);
    for (const auto& b : blocks_) x = self_block(p, b, x, trace);
    if (N == 1) return pool(x, 0, use_max);
    V frames = reshape(x, {T, N, D});
    if (cfg_.pool_cls_outputs && cls) return pool(reshape(slice(frames, 1, *cls, 1), {T, D}), 0, use_max);
    return pool(pool(frames, 1, use_max), 0, use_max);
  }

  /// Self-attention over the frame descriptors whose outputs are averaged
  /// with weights w_t = attention received by token t (mean over heads and
  /// queries of the last block), so sum(w) == 1.
  V weighted_self_attention(const std::vector<V>& p, V tokens, std::optional<std::size_t> cls,
                            FusionTrace<Scalar>* trace) const {
    V desc = descriptor(tokens, cls);
    const std::size_t T = desc.dim(0), D = desc.dim(1);
    FusionTrace<Scalar> local;
    FusionTrace<Scalar>* t = trace ? trace : &local;
    V x = with_positions(p, reshape(desc, {T, 1, D}));
    for (const auto& b : blocks_) x = self_block(p, b, x, t);
    V w = mean(mean(t->attention.back(), 0), 0);
    t->token_weights = w;
    return reshape(matmul(reshape(w, {1, T}), x), {D});
  }

  /// Attentive pooling: one learnable query attends over the selected tokens.
  V cross_attention(const std::vector<V>& p, V tokens, std::optional<std::size_t> cls, bool cls_only,
                    FusionTrace<Scalar>* trace) const {
    if (cls_only && !cls) throw Error(ErrorCode::kNoCls, "CLS cross-attention needs a CLS token");
    V seq = cls_only ? slice(tokens, 1, *cls, 1) : tokens;
    const Block& b = blocks_.front();
    V keys = layer_norm(with_positions(p, seq), p[b.ln1_g], p[b.ln1_b]);
    V q = p[*query_];
    V y1 = add(q, linear(attend(p, b, q, keys, trace), p[b.wo], p[b.bo]));
    V y2 = add(y1, feed_forward(p, b, y1));
    return reshape(y2, {cfg_.model_dim});
  }

  /// Single-layer LSTM with h_0 = c_0 = 0; returns h_T.
  V lstm(const std::vector<V>& p, V seq) const {
    const std::size_t T = seq.dim(0), H = cfg_.resolved_hidden();
    Graph<Scalar>& g = *seq.graph;
    std::array<V, 4> projected;
    for (std::size_t k = 0; k < 4; ++k) projected[k] = linear(seq, p[lstm_w_[k]], p[lstm_b_[k]]);
    V h = g.constant(Tensor<Scalar>({1, H}));
    V c = g.constant(Tensor<Scalar>({1, H}));
    for (std::size_t t = 0; t < T; ++t) {
      auto gate = [&](std::size_t k) { return add(slice(projected[k], 0, t, 1), matmul(h, p[lstm_u_[k]])); };
      V i = sigmoid(gate(0));
      V f = sigmoid(gate(1));
      V cand = tanh(gate(2));
      V o = sigmoid(gate(3));
      c = add(mul(f, c), mul(i, cand));
      h = mul(o, tanh(c));
    }
    return reshape(h, {H});
  }

  struct TcnLevel {
    std::size_t w1, b1, w2, b2;
    std::optional<std::size_t> skip_w, skip_b;
  };

  /// Causal dilated convolution: out[t] = b + sum_j x[t - (k-1-j)*d] W_j.
  V causal_conv(const std::vector<V>& p, V x, std::size_t w, std::size_t b, std::size_t dilation) const {
    const std::size_t T = x.dim(0), k = cfg_.tcn_kernel;
    const Shape& ws = p[w].shape();
    std::optional<V> acc;
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t delay = (k - 1 - j) * dilation;
      if (delay >= T) continue;
      V tap = reshape(slice(p[w], 0, j, 1), {ws[1], ws[2]});
      V term = matmul(delay ? causal_shift(x, delay) : x, tap);
      acc = acc ? add(*acc, term) : term;
    }
    return add(*acc, p[b]);
  }

  /// Residual blocks of two causal convolutions each; level l uses dilation
  /// 2^l. Returns the last time step of the final level.
  V tcn(const std::vector<V>& p, V seq) const {
    const std::size_t T = seq.dim(0);
    require(T >= 1, ErrorCode::kInvalidArgument, "TCN needs at least one frame");
    V x = seq;
    for (std::size_t level = 0; level < tcn_.size(); ++level) {
      const TcnLevel& l = tcn_[level];
      const std::size_t dilation = std::size_t{1} << level;
      V h1 = relu(causal_conv(p, x, l.w1, l.b1, dilation));
      V h2 = relu(causal_conv(p, h1, l.w2, l.b2, dilation));
      V residual = l.skip_w ? linear(x, p[*l.skip_w], p[*l.skip_b]) : x;
      x = relu(add(h2, residual));
    }
    return reshape(slice(x, 0, T - 1, 1), {cfg_.resolved_hidden()});
  }

  FusionHeadConfig cfg_;
  std::optional<std::size_t> pos_;
  std::optional<std::size_t> query_;
  std::vector<Block> blocks_;
  std::vector<std::size_t> lstm_w_, lstm_u_, lstm_b_;
  std::vector<TcnLevel> tcn_;
};

}  // namespace fprobe
