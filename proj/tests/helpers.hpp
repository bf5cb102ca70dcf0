#pragma once

#include <unistd.h>

#include <atomic>
#include <filesystem>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "fusionprobe/clip.hpp"
#include "fusionprobe/error.hpp"
#include "fusionprobe/params.hpp"
#include "fusionprobe/synth.hpp"

namespace fprobe {

/// Readable parameter names in gtest output.
inline void PrintTo(FusionKind kind, std::ostream* os) { *os << to_string(kind); }

}  // namespace fprobe

namespace testutil {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("fprobe_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline fprobe::TokenClip clip_of(const fprobe::Tensor<float>& tokens, std::optional<std::size_t> cls,
                                 std::size_t class_id = 0) {
  fprobe::TokenClip c;
  c.tokens = tokens;
  c.cls_index = cls;
  c.class_id = class_id;
  c.video_id = "clip";
  return c;
}

inline fprobe::Tensor<double> randn(fprobe::Shape shape, std::uint64_t seed, double stddev = 1.0) {
  std::mt19937_64 rng(seed);
  return fprobe::normal_tensor<double>(std::move(shape), stddev, rng);
}

inline fprobe::Tensor<float> randnf(fprobe::Shape shape, std::uint64_t seed, double stddev = 1.0) {
  std::mt19937_64 rng(seed);
  return fprobe::normal_tensor<float>(std::move(shape), stddev, rng);
}

template <typename F>
fprobe::ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const fprobe::Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an fprobe::Error";
  return fprobe::ErrorCode::kIo;
}

/// Two well-separated classes, two unshifted views, short videos.
inline fprobe::SynthConfig separable_synth(std::uint64_t seed = 1) {
  fprobe::SynthConfig c;
  c.name = "separable";
  c.order_task = false;
  c.class_count = 2;
  c.view_count = 2;
  c.videos_per_class_per_view = 16;
  c.train_per_class = 8;
  c.val_per_class = 2;
  c.frames = 12;
  c.tokens = 3;
  c.dim = 8;
  c.noise = 0.3;
  c.class_scale = 1.0;
  c.seed = seed;
  return c;
}

}  // namespace testutil
