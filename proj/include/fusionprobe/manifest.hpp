#pragma once

// Dataset manifest: a JSON document describing every video of a dataset.
//
// {
//   "dataset": "drive-and-act-clip",
//   "classes": ["open_door", "close_door", ...],     // order defines class ids
//   "views": ["front_top", "right_top", ...],
//   "trained_view": "front_top",                     // optional
//   "is_clip_level": false,
//   "tokens_per_frame": 257,
//   "dim": 768,
//   "records": [
//     {"video_id": "vp1_0001", "view": "front_top", "class_id": 3,
//      "split": "train", "path": "emb/vp1_0001.fpeb", "frames": 48},
//     ...
//   ]
// }
//
// Record paths are relative to the manifest's directory.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fusionprobe/embedding_file.hpp"
#include "fusionprobe/error.hpp"

namespace fprobe {

using json = nlohmann::json;

enum class Split { kTrain, kVal, kTest };

inline std::string_view to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw Error(ErrorCode::kBadFormat, "unknown split '" + s + "'");
}

struct VideoRecord {
  std::string video_id;
  std::string view;
  std::size_t class_id = 0;
  Split split = Split::kTrain;
  std::string path;
  std::uint32_t frames = 0;
};

struct DatasetManifest {
  std::string dataset;
  std::vector<std::string> classes;
  std::vector<std::string> views;
  std::optional<std::string> trained_view;
  bool is_clip_level = false;
  std::uint32_t tokens_per_frame = 0;
  std::uint32_t dim = 0;
  std::vector<VideoRecord> records;
  /// Directory that record paths are resolved against; not serialised.
  std::filesystem::path base_dir;

  std::size_t class_count() const { return classes.size(); }

  std::filesystem::path resolve(const VideoRecord& record) const { return base_dir / record.path; }

  std::vector<const VideoRecord*> select(Split split, const std::string& view = {}) const {
    std::vector<const VideoRecord*> out;
    for (const auto& r : records)
      if (r.split == split && (view.empty() || r.view == view)) out.push_back(&r);
    return out;
  }

  bool has_split(Split split) const {
    for (const auto& r : records)
      if (r.split == split) return true;
    return false;
  }
};

inline json to_json(const DatasetManifest& m) {
  json records = json::array();
  for (const auto& r : m.records) {
    records.push_back({{"video_id", r.video_id},
                       {"view", r.view},
                       {"class_id", r.class_id},
                       {"split", std::string(to_string(r.split))},
                       {"path", r.path},
                       {"frames", r.frames}});
  }
  json j = {{"dataset", m.dataset},
            {"classes", m.classes},
            {"views", m.views},
            {"is_clip_level", m.is_clip_level},
            {"tokens_per_frame", m.tokens_per_frame},
            {"dim", m.dim},
            {"records", records}};
  if (m.trained_view) j["trained_view"] = *m.trained_view;
  return j;
}

inline DatasetManifest manifest_from_json(const json& j) {
  DatasetManifest m;
  try {
    m.dataset = j.at("dataset").get<std::string>();
    m.classes = j.at("classes").get<std::vector<std::string>>();
    m.views = j.at("views").get<std::vector<std::string>>();
    if (j.contains("trained_view") && !j.at("trained_view").is_null())
      m.trained_view = j.at("trained_view").get<std::string>();
    m.is_clip_level = j.value("is_clip_level", false);
    m.tokens_per_frame = j.at("tokens_per_frame").get<std::uint32_t>();
    m.dim = j.at("dim").get<std::uint32_t>();
    for (const auto& r : j.at("records")) {
      VideoRecord rec;
      rec.video_id = r.at("video_id").get<std::string>();
      rec.view = r.at("view").get<std::string>();
      rec.class_id = r.at("class_id").get<std::size_t>();
      rec.split = parse_split(r.at("split").get<std::string>());
      rec.path = r.at("path").get<std::string>();
      rec.frames = r.at("frames").get<std::uint32_t>();
      m.records.push_back(std::move(rec));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kBadFormat, std::string("manifest: ") + e.what());
  }
  return m;
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  const std::string text = read_file_bytes(path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kBadFormat, path.string() + ": " + e.what());
  }
  DatasetManifest m = manifest_from_json(j);
  m.base_dir = path.parent_path();
  return m;
}

inline void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  write_file_bytes(path, to_json(m).dump(2) + "\n");
}

struct ValidationReport {
  std::size_t record_count = 0;
  /// view -> split -> count
  std::map<std::string, std::map<std::string, std::size_t>> per_view;
  /// class name -> count over all splits
  std::map<std::string, std::size_t> per_class;
  /// Number of files that carry a CLS token.
  std::size_t files_with_cls = 0;

  json to_json() const {
    return {{"records", record_count},
            {"per_view", per_view},
            {"per_class", per_class},
            {"files_with_cls", files_with_cls}};
  }
};

/// Checks every manifest invariant; throws on the first violation with a
/// code specific to the kind of problem.
inline ValidationReport validate_manifest(const DatasetManifest& m) {
  require(!m.classes.empty(), ErrorCode::kBadFormat, "manifest has no classes");
  require(!m.views.empty(), ErrorCode::kBadFormat, "manifest has no views");
  require(m.tokens_per_frame > 0 && m.dim > 0, ErrorCode::kBadFormat, "tokens_per_frame and dim must be positive");
  const std::set<std::string> views(m.views.begin(), m.views.end());
  if (m.trained_view)
    require(views.count(*m.trained_view) == 1, ErrorCode::kUnknownView,
            "trained_view '" + *m.trained_view + "' is not in the view list");

  std::map<std::string, Split> split_of;
  for (const auto& r : m.records) {
    require(views.count(r.view) == 1, ErrorCode::kUnknownView,
            "record " + r.video_id + " has unknown view '" + r.view + "'");
    require(r.class_id < m.classes.size(), ErrorCode::kUnknownClass,
            "record " + r.video_id + " has class_id " + std::to_string(r.class_id));
    auto [it, inserted] = split_of.emplace(r.video_id, r.split);
    if (!inserted) {
      require(it->second == r.split, ErrorCode::kOverlappingSplits,
              "video " + r.video_id + " appears in both " + std::string(to_string(it->second)) + " and " +
                  std::string(to_string(r.split)));
      throw Error(ErrorCode::kBadFormat, "duplicate record for video " + r.video_id);
    }
  }

  ValidationReport report;
  report.record_count = m.records.size();
  for (const auto& v : m.views) report.per_view[v];
  for (const auto& c : m.classes) report.per_class[c] = 0;
  for (const auto& r : m.records) {
    const auto path = m.resolve(r);
    if (!std::filesystem::exists(path))
      throw Error(ErrorCode::kMissingFile, "record " + r.video_id + ": " + path.string() + " does not exist");
    EmbeddingHeader h;
    try {
      h = read_embedding_header(path);
    } catch (const Error& e) {
      throw Error(ErrorCode::kHeaderMismatch, "record " + r.video_id + ": " + e.what());
    }
    auto mismatch = [&](const char* field, std::uint32_t file_value, std::uint32_t manifest_value) {
      if (file_value != manifest_value)
        throw Error(ErrorCode::kHeaderMismatch, "record " + r.video_id + ": header " + field + "=" +
                                                    std::to_string(file_value) + " but manifest says " +
                                                    std::to_string(manifest_value));
    };
    mismatch("frames", h.frames, r.frames);
    mismatch("tokens", h.tokens, m.tokens_per_frame);
    mismatch("dim", h.dim, m.dim);
    const auto expected_bytes = kEmbeddingHeaderBytes + std::uintmax_t{h.frames} * h.tokens * h.dim * 4;
    if (std::filesystem::file_size(path) != expected_bytes)
      throw Error(ErrorCode::kHeaderMismatch, "record " + r.video_id + ": payload size does not match header");
    if (h.cls()) ++report.files_with_cls;
    ++report.per_view[r.view][std::string(to_string(r.split))];
    ++report.per_class[m.classes[r.class_id]];
  }
  return report;
}

}  // namespace fprobe
