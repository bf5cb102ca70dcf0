#include <cstring>
#include <fstream>

#include <gtest/gtest.h>

#include "fusionprobe/clip.hpp"
#include "fusionprobe/embedding_file.hpp"
#include "fusionprobe/manifest.hpp"
#include "helpers.hpp"

using namespace fprobe;
using testutil::code_of;
using testutil::TempDir;

namespace {

EmbeddingFile make_file(std::uint32_t F, std::uint32_t N, std::uint32_t D, std::uint16_t cls = 0) {
  EmbeddingFile f;
  f.header.frames = F;
  f.header.tokens = N;
  f.header.dim = D;
  f.header.cls_index = cls;
  f.payload.resize(std::size_t{F} * N * D);
  for (std::size_t i = 0; i < f.payload.size(); ++i) f.payload[i] = static_cast<float>(i) * 0.5f - 3.0f;
  return f;
}

/// Two views x two classes, one train + one test video each.
DatasetManifest write_dataset(const std::filesystem::path& dir) {
  DatasetManifest m;
  m.dataset = "tiny";
  m.classes = {"a", "b"};
  m.views = {"front", "side"};
  m.trained_view = "front";
  m.tokens_per_frame = 3;
  m.dim = 4;
  for (const std::string view : {"front", "side"})
    for (std::size_t c = 0; c < 2; ++c)
      for (const auto split : {Split::kTrain, Split::kTest}) {
        VideoRecord r;
        r.view = view;
        r.class_id = c;
        r.split = split;
        r.video_id = view + std::to_string(c) + std::string(to_string(split));
        r.path = "emb/" + r.video_id + ".fpeb";
        r.frames = 20;
        write_embedding(dir / r.path, make_file(20, 3, 4));
        m.records.push_back(r);
      }
  save_manifest(m, dir / "manifest.json");
  m.base_dir = dir;
  return m;
}

}  // namespace

TEST(EmbeddingFile, RoundTrip) {
  TempDir dir;
  const auto f = make_file(5, 3, 4, 1);
  write_embedding(dir / "a.fpeb", f);
  const auto g = read_embedding(dir / "a.fpeb");
  EXPECT_EQ(g.header, f.header);
  EXPECT_EQ(g.payload, f.payload);
  EXPECT_EQ(read_embedding_header(dir / "a.fpeb"), f.header);
  EXPECT_EQ(std::filesystem::file_size(dir / "a.fpeb"), 24u + 5 * 3 * 4 * 4);
}

TEST(EmbeddingFile, ByteLayout) {
  auto f = make_file(2, 3, 4, kNoCls);
  const std::string bytes = encode_embedding(f);
  ASSERT_EQ(bytes.size(), 24u + 2 * 3 * 4 * 4);
  EXPECT_EQ(bytes.substr(0, 4), "FPEB");
  auto u16 = [&](std::size_t off) {
    return static_cast<unsigned>(static_cast<unsigned char>(bytes[off])) |
           static_cast<unsigned>(static_cast<unsigned char>(bytes[off + 1])) << 8;
  };
  auto u32 = [&](std::size_t off) { return u16(off) | u16(off + 2) << 16; };
  EXPECT_EQ(u16(4), 1u);
  EXPECT_EQ(u16(6), 0u);
  EXPECT_EQ(u32(8), 2u);
  EXPECT_EQ(u32(12), 3u);
  EXPECT_EQ(u32(16), 4u);
  EXPECT_EQ(u16(20), 0xFFFFu);
  EXPECT_EQ(u16(22), 0u);
  float first;
  std::memcpy(&first, bytes.data() + 24, 4);
  EXPECT_EQ(first, f.payload[0]);
  EXPECT_FALSE(decode_embedding(bytes).header.cls().has_value());
}

TEST(EmbeddingFile, RejectsMalformedBytes) {
  const std::string good = encode_embedding(make_file(2, 2, 2));
  auto bad = [&](auto mutate) {
    std::string b = good;
    mutate(b);
    return code_of([&] { decode_embedding(b); });
  };
  EXPECT_EQ(bad([](std::string& b) { b[0] = 'X'; }), ErrorCode::kBadFormat);
  EXPECT_EQ(bad([](std::string& b) { b.resize(10); }), ErrorCode::kBadFormat);
  EXPECT_EQ(bad([](std::string& b) { b.pop_back(); }), ErrorCode::kBadFormat);
  EXPECT_EQ(bad([](std::string& b) { b += "xxxx"; }), ErrorCode::kBadFormat);
  EXPECT_EQ(bad([](std::string& b) { b[4] = 2; }), ErrorCode::kBadFormat);
  EXPECT_EQ(bad([](std::string& b) { b[6] = 1; }), ErrorCode::kBadFormat);
  EXPECT_EQ(bad([](std::string& b) { b[20] = 5; }), ErrorCode::kBadFormat);
  EXPECT_EQ(code_of([] { read_embedding("/nonexistent/file.fpeb"); }), ErrorCode::kMissingFile);
}

TEST(Manifest, JsonRoundTrip) {
  TempDir dir;
  const auto m = write_dataset(dir.path());
  const auto back = load_manifest(dir / "manifest.json");
  EXPECT_EQ(back.dataset, m.dataset);
  EXPECT_EQ(back.classes, m.classes);
  EXPECT_EQ(back.views, m.views);
  EXPECT_EQ(back.trained_view, m.trained_view);
  ASSERT_EQ(back.records.size(), m.records.size());
  EXPECT_EQ(back.records[3].path, m.records[3].path);
  EXPECT_EQ(back.base_dir, dir.path());
  EXPECT_EQ(back.select(Split::kTrain, "side").size(), 2u);
  EXPECT_EQ(back.select(Split::kTest).size(), 4u);
}

TEST(Manifest, ValidateCounts) {
  TempDir dir;
  const auto m = write_dataset(dir.path());
  const auto report = validate_manifest(m);
  EXPECT_EQ(report.record_count, 8u);
  EXPECT_EQ(report.per_view.at("front").at("train"), 2u);
  EXPECT_EQ(report.per_view.at("side").at("test"), 2u);
  EXPECT_EQ(report.per_class.at("a"), 4u);
  EXPECT_EQ(report.files_with_cls, 8u);
}

TEST(Manifest, ValidateErrors) {
  TempDir dir;
  const auto base = write_dataset(dir.path());
  auto check = [&](auto mutate) {
    DatasetManifest m = base;
    mutate(m);
    return code_of([&] { validate_manifest(m); });
  };
  EXPECT_EQ(check([](DatasetManifest& m) { m.records[0].view = "top"; }), ErrorCode::kUnknownView);
  EXPECT_EQ(check([](DatasetManifest& m) { m.trained_view = "top"; }), ErrorCode::kUnknownView);
  EXPECT_EQ(check([](DatasetManifest& m) { m.records[0].class_id = 2; }), ErrorCode::kUnknownClass);
  EXPECT_EQ(check([](DatasetManifest& m) {
              m.records[1].video_id = m.records[0].video_id;
            }),
            ErrorCode::kOverlappingSplits);
  EXPECT_EQ(check([](DatasetManifest& m) { m.records.push_back(m.records[0]); }), ErrorCode::kBadFormat);
  EXPECT_EQ(check([](DatasetManifest& m) { m.records[0].path = "emb/missing.fpeb"; }), ErrorCode::kMissingFile);
  EXPECT_EQ(check([](DatasetManifest& m) { m.records[0].frames = 21; }), ErrorCode::kHeaderMismatch);
  EXPECT_EQ(check([](DatasetManifest& m) { m.dim = 5; }), ErrorCode::kHeaderMismatch);
  EXPECT_EQ(check([](DatasetManifest& m) { m.tokens_per_frame = 2; }), ErrorCode::kHeaderMismatch);
  EXPECT_EQ(check([](DatasetManifest& m) { m.classes.clear(); }), ErrorCode::kBadFormat);

  {
    std::ofstream trunc(dir / "emb/front0train.fpeb", std::ios::binary | std::ios::app);
    trunc << "junk";
  }
  EXPECT_EQ(code_of([&] { validate_manifest(base); }), ErrorCode::kHeaderMismatch);
}

TEST(Manifest, MalformedJson) {
  TempDir dir;
  write_file_bytes(dir / "m.json", "{\"dataset\": 3");
  EXPECT_EQ(code_of([&] { load_manifest(dir / "m.json"); }), ErrorCode::kBadFormat);
  write_file_bytes(dir / "m.json", "{\"dataset\": \"x\"}");
  EXPECT_EQ(code_of([&] { load_manifest(dir / "m.json"); }), ErrorCode::kBadFormat);
  EXPECT_EQ(code_of([&] { load_manifest(dir / "none.json"); }), ErrorCode::kMissingFile);
}

TEST(ClipSampling, EquidistantStarts) {
  std::mt19937_64 rng(0);
  const auto clips = clip_frame_indices(48, 3, 16, SampleMode::kEvalEquidistant, rng);
  ASSERT_EQ(clips.size(), 3u);
  EXPECT_EQ(clips[0].front(), 0u);
  EXPECT_EQ(clips[1].front(), 16u);
  EXPECT_EQ(clips[2].front(), 32u);
  EXPECT_EQ(clips[2].back(), 47u);
  for (const auto& c : clips)
    for (std::size_t j = 1; j < c.size(); ++j) EXPECT_EQ(c[j], c[j - 1] + 1);
  EXPECT_EQ(clip_frame_indices(48, 1, 16, SampleMode::kEvalEquidistant, rng)[0].front(), 16u);
}

TEST(ClipSampling, LoopPaddingForShortVideos) {
  std::mt19937_64 rng(0);
  const auto clips = clip_frame_indices(10, 2, 16, SampleMode::kEvalEquidistant, rng);
  for (const auto& c : clips) {
    ASSERT_EQ(c.size(), 16u);
    for (std::size_t j = 0; j < 16; ++j) EXPECT_EQ(c[j], j % 10);
  }
}

TEST(ClipSampling, StridedLayout) {
  std::mt19937_64 rng(0);
  const auto clips = clip_frame_indices(48, 2, 16, SampleMode::kEvalEquidistant, rng, FrameLayout::kStrided);
  EXPECT_EQ(clips[0].front(), 0u);
  EXPECT_EQ(clips[0][1], 3u);
  EXPECT_EQ(clips[1].front(), 2u);
  EXPECT_EQ(clips[1].back(), 47u);
}

TEST(ClipSampling, TrainStartsCoverRange) {
  std::mt19937_64 rng(5);
  std::set<std::size_t> starts;
  for (int i = 0; i < 2000; ++i) {
    const auto c = clip_frame_indices(20, 1, 16, SampleMode::kTrainRandom, rng)[0];
    EXPECT_LE(c.back(), 19u);
    starts.insert(c.front());
  }
  EXPECT_EQ(starts, (std::set<std::size_t>{0, 1, 2, 3, 4}));
  std::mt19937_64 a(9), b(9);
  EXPECT_EQ(clip_frame_indices(100, 4, 16, SampleMode::kTrainRandom, a),
            clip_frame_indices(100, 4, 16, SampleMode::kTrainRandom, b));
}

TEST(ClipSampling, InvalidArguments) {
  std::mt19937_64 rng(0);
  EXPECT_EQ(code_of([&] { clip_frame_indices(0, 1, 16, SampleMode::kTrainRandom, rng); }),
            ErrorCode::kInvalidArgument);
  EXPECT_EQ(code_of([&] { clip_frame_indices(10, 0, 16, SampleMode::kTrainRandom, rng); }),
            ErrorCode::kInvalidArgument);
  EXPECT_EQ(code_of([&] { clip_frame_indices(10, 1, 0, SampleMode::kTrainRandom, rng); }),
            ErrorCode::kInvalidArgument);
}

TEST(ClipSampling, ClipContents) {
  const auto f = make_file(6, 2, 3, 1);
  VideoRecord r{"v", "front", 1, Split::kTest, "v.fpeb", 6};
  const auto clip = make_clip(f, r, {4, 1});
  EXPECT_EQ(clip.tokens.shape(), (Shape{2, 2, 3}));
  EXPECT_EQ(clip.tokens[0], f.payload[4 * 6]);
  EXPECT_EQ(clip.tokens[6], f.payload[1 * 6]);
  EXPECT_EQ(clip.class_id, 1u);
  EXPECT_EQ(clip.cls_index, std::optional<std::size_t>(1));

  const auto cls = select_tokens(clip, TokenMode::kCls);
  EXPECT_EQ(cls.shape(), (Shape{2, 1, 3}));
  EXPECT_EQ(cls[0], f.payload[4 * 6 + 3]);
  EXPECT_EQ(cls[3], f.payload[1 * 6 + 3]);
  EXPECT_EQ(select_tokens(clip, TokenMode::kAll), clip.tokens);

  const auto no_cls = make_clip(make_file(6, 2, 3, kNoCls), r, {0});
  EXPECT_EQ(code_of([&] { select_tokens(no_cls, TokenMode::kCls); }), ErrorCode::kNoCls);
}

TEST(ClipSampling, ClipLevelEntriesAreSingleFrames) {
  const auto f = make_file(5, 1, 4, kNoCls);
  VideoRecord r{"v", "front", 0, Split::kTest, "v.fpeb", 5};
  const auto clips = sample_clips(f, r, 3, 16, SampleMode::kEvalEquidistant, std::uint64_t{0},
                                  FrameLayout::kContiguous, true);
  ASSERT_EQ(clips.size(), 3u);
  for (const auto& c : clips) {
    EXPECT_EQ(c.frames(), 1u);
    EXPECT_TRUE(c.clip_level);
  }
  EXPECT_EQ(clips[1].tokens[0], f.payload[2 * 4]);
}
