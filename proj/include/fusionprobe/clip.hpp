#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "fusionprobe/embedding_file.hpp"
#include "fusionprobe/error.hpp"
#include "fusionprobe/manifest.hpp"
#include "fusionprobe/tensor.hpp"

namespace fprobe {

/// Token embeddings of one sampled clip, [T, N, D].
struct TokenClip {
  Tensor<float> tokens;
  std::optional<std::size_t> cls_index;
  std::string video_id;
  std::string view;
  std::size_t class_id = 0;
  /// Produced by a video backbone: T == 1 and fusion is bypassed.
  bool clip_level = false;

  std::size_t frames() const { return tokens.dim(0); }
  std::size_t tokens_per_frame() const { return tokens.dim(1); }
  std::size_t dim() const { return tokens.dim(2); }
};

enum class SampleMode { kTrainRandom, kEvalEquidistant };

/// How the frames of one clip are laid out inside the video.
enum class FrameLayout {
  kContiguous,  ///< consecutive frames (stride 1)
  kStrided,     ///< stride floor(F / frames_per_clip), spreading the clip over the video
};

inline std::string_view to_string(FrameLayout layout) {
  return layout == FrameLayout::kContiguous ? "contiguous" : "strided";
}

inline FrameLayout parse_frame_layout(const std::string& s) {
  if (s == "contiguous") return FrameLayout::kContiguous;
  if (s == "strided") return FrameLayout::kStrided;
  throw Error(ErrorCode::kInvalidArgument, "unknown frame layout '" + s + "'");
}

/// Frame indices for each of `num_clips` clips. Train mode draws each start
/// uniformly; eval mode spaces the starts evenly over [0, F - span]. Videos
/// shorter than a clip are loop-padded (indices taken modulo F).
inline std::vector<std::vector<std::size_t>> clip_frame_indices(std::size_t total_frames, std::size_t num_clips,
                                                                std::size_t frames_per_clip, SampleMode mode,
                                                                std::mt19937_64& rng,
                                                                FrameLayout layout = FrameLayout::kContiguous) {
  require(total_frames > 0, ErrorCode::kInvalidArgument, "video has zero frames");
  require(frames_per_clip >= 1, ErrorCode::kInvalidArgument, "frames_per_clip must be >= 1");
  require(num_clips >= 1, ErrorCode::kInvalidArgument, "num_clips must be >= 1");
  const std::size_t stride =
      layout == FrameLayout::kStrided ? std::max<std::size_t>(1, total_frames / frames_per_clip) : 1;
  const std::size_t span = stride * (frames_per_clip - 1) + 1;
  const std::size_t last_start = total_frames > span ? total_frames - span : 0;

  std::vector<std::vector<std::size_t>> clips;
  clips.reserve(num_clips);
  for (std::size_t c = 0; c < num_clips; ++c) {
    std::size_t start = 0;
    if (mode == SampleMode::kTrainRandom) {
      start = std::uniform_int_distribution<std::size_t>(0, last_start)(rng);
    } else if (num_clips == 1) {
      start = last_start / 2;
    } else {
      start = c * last_start / (num_clips - 1);
    }
    std::vector<std::size_t> idx(frames_per_clip);
    for (std::size_t j = 0; j < frames_per_clip; ++j) idx[j] = (start + j * stride) % total_frames;
    clips.push_back(std::move(idx));
  }
  return clips;
}

inline TokenClip make_clip(const EmbeddingFile& file, const VideoRecord& record, const std::vector<std::size_t>& frames,
                           bool clip_level = false) {
  const std::size_t stride = file.frame_stride();
  std::vector<float> data;
  data.reserve(frames.size() * stride);
  for (std::size_t f : frames) {
    require(f < file.header.frames, ErrorCode::kInvalidArgument, "frame index out of range");
    auto src = file.frame(f);
    data.insert(data.end(), src.begin(), src.end());
  }
  TokenClip clip;
  clip.tokens = Tensor<float>({frames.size(), file.header.tokens, file.header.dim}, std::move(data));
  clip.cls_index = file.header.cls();
  clip.video_id = record.video_id;
  clip.view = record.view;
  clip.class_id = record.class_id;
  clip.clip_level = clip_level;
  return clip;
}

/// Samples clips from one video. For clip-level embeddings every stored entry
/// is already a whole clip, so each sampled clip has T == 1.
inline std::vector<TokenClip> sample_clips(const EmbeddingFile& file, const VideoRecord& record, std::size_t num_clips,
                                           std::size_t frames_per_clip, SampleMode mode, std::mt19937_64& rng,
                                           FrameLayout layout = FrameLayout::kContiguous, bool clip_level = false) {
  const std::size_t per_clip = clip_level ? 1 : frames_per_clip;
  auto indices = clip_frame_indices(file.header.frames, num_clips, per_clip, mode, rng, layout);
  std::vector<TokenClip> clips;
  clips.reserve(indices.size());
  for (const auto& idx : indices) clips.push_back(make_clip(file, record, idx, clip_level));
  return clips;
}

inline std::vector<TokenClip> sample_clips(const EmbeddingFile& file, const VideoRecord& record, std::size_t num_clips,
                                           std::size_t frames_per_clip, SampleMode mode, std::uint64_t seed,
                                           FrameLayout layout = FrameLayout::kContiguous, bool clip_level = false) {
  std::mt19937_64 rng(seed);
  return sample_clips(file, record, num_clips, frames_per_clip, mode, rng, layout, clip_level);
}

enum class TokenMode { kAll, kCls };

/// kAll returns the clip's tokens unchanged; kCls keeps only the CLS token of
/// each frame, [T, 1, D].
inline Tensor<float> select_tokens(const TokenClip& clip, TokenMode mode) {
  if (mode == TokenMode::kAll) return clip.tokens;
  if (!clip.cls_index) throw Error(ErrorCode::kNoCls, "clip " + clip.video_id + " has no CLS token");
  const std::size_t T = clip.frames(), N = clip.tokens_per_frame(), D = clip.dim();
  std::vector<float> out;
  out.reserve(T * D);
  auto src = clip.tokens.data();
  for (std::size_t t = 0; t < T; ++t) {
    const auto* row = src.data() + (t * N + *clip.cls_index) * D;
    out.insert(out.end(), row, row + D);
  }
  return Tensor<float>({T, 1, D}, std::move(out));
}

}  // namespace fprobe
