#pragma once

// Annotated samples, their JSON schema, the dataset manifest and the
// train/val/test partition.
//
// Annotation JSON:
//   { "image": "images/head_0000.png", "section": "head",
//     "structures": [ { "class": "CSP", "box": [x_min,y_min,x_max,y_max], "flag": 1 }, ... ],
//     "plane_label": "standard" | "non-standard", "seed": 123 }
//
// Manifest JSON:
//   { "version": 1, "seed": 42, "image_size": 128,
//     "samples": [ { "image": ..., "annotation": ..., "section": ..., "split": "train"|"val"|"test",
//                    "plane_label": ... }, ... ] }

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sonoqa/classifier.hpp"
#include "sonoqa/detector.hpp"
#include "sonoqa/image.hpp"
#include "sonoqa/random.hpp"

namespace sonoqa {

enum class PlaneLabel { kStandard, kNonStandard };

inline std::string to_string(PlaneLabel p) { return p == PlaneLabel::kStandard ? "standard" : "non-standard"; }

inline PlaneLabel parse_plane_label(std::string_view s) {
  if (s == "standard") return PlaneLabel::kStandard;
  if (s == "non-standard") return PlaneLabel::kNonStandard;
  throw InputError("unknown plane label '" + std::string(s) + "'");
}

struct Annotation {
  Box box;
  std::size_t structure = 0;  // id within the section registry
  int flag = 1;               // 1: meets the quality requirement

  friend bool operator==(const Annotation&, const Annotation&) = default;
};

struct PhantomSample {
  GrayImage image;
  Section section = Section::kHead;
  std::vector<Annotation> annotations;
  PlaneLabel plane_label = PlaneLabel::kStandard;
  std::uint64_t seed = 0;
  std::vector<Box> distractors;  // confusable look-alikes, not ground truth
};

// Standard iff every essential structure is annotated with flag 1.
inline PlaneLabel derive_plane_label(Section section, const std::vector<Annotation>& anns) {
  std::vector<int> ok(structure_count(section), 0);
  for (const auto& a : anns)
    if (a.structure < ok.size() && a.flag == 1) ok[a.structure] = 1;
  return std::all_of(ok.begin(), ok.end(), [](int v) { return v == 1; }) ? PlaneLabel::kStandard
                                                                         : PlaneLabel::kNonStandard;
}

inline nlohmann::json annotation_to_json(const PhantomSample& s, const std::string& image_path) {
  nlohmann::json structs = nlohmann::json::array();
  for (const auto& a : s.annotations)
    structs.push_back({{"class", structures(s.section).at(a.structure).code}, {"box", a.box}, {"flag", a.flag}});
  return {{"image", image_path},
          {"section", to_string(s.section)},
          {"structures", structs},
          {"plane_label", to_string(s.plane_label)},
          {"seed", s.seed}};
}

// Fills everything except the image pixels.
inline PhantomSample annotation_from_json(const nlohmann::json& j) {
  PhantomSample s;
  try {
    s.section = parse_section(j.at("section").get<std::string>());
    for (const auto& e : j.at("structures")) {
      Annotation a;
      a.structure = structure_id(s.section, e.at("class").get<std::string>());
      a.box = e.at("box").get<Box>();
      a.flag = e.at("flag").get<int>();
      if (a.flag != 0 && a.flag != 1) throw InputError("structure flag must be 0 or 1");
      s.annotations.push_back(a);
    }
    s.plane_label = parse_plane_label(j.at("plane_label").get<std::string>());
    s.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed annotation: ") + e.what());
  }
  return s;
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
  if (!os) throw IoError("failed writing " + path.string());
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  write_text(path, j.dump(2) + "\n");
}

// ------------------------------------------------------------------ splitting

enum class Split { kTrain, kVal, kTest };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw ConfigError("unknown split '" + std::string(s) + "'");
}

// Fixed 3:1:1 ratio; the seed drives the shuffle.
struct SplitSpec {
  static constexpr std::array<int, 3> kRatio{3, 1, 1};
  std::uint64_t seed = 0;
};

template <typename Item>
struct Partition {
  std::vector<Item> train, val, test;
};

// Deterministic shuffled partition with sizes floor(3n/5), floor(n/5), rest.
template <typename Item>
Partition<Item> split_dataset(std::vector<Item> items, const SplitSpec& split) {
  const std::size_t n = items.size();
  if (n < 5) throw InputError("need at least 5 samples to split 3:1:1, got " + std::to_string(n));
  Rng rng = Rng::derive(split.seed, 0x5317);
  rng.shuffle(items);
  const std::size_t n_train = 3 * n / 5, n_val = n / 5;
  Partition<Item> p;
  p.train.assign(items.begin(), items.begin() + static_cast<std::ptrdiff_t>(n_train));
  p.val.assign(items.begin() + static_cast<std::ptrdiff_t>(n_train),
               items.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  p.test.assign(items.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), items.end());
  return p;
}

// ------------------------------------------------------------------ manifest

struct ManifestEntry {
  std::string image;
  std::string annotation;
  Section section = Section::kHead;
  Split split = Split::kTrain;
  PlaneLabel plane_label = PlaneLabel::kStandard;
};

struct Manifest {
  std::filesystem::path root;
  std::uint64_t seed = 0;
  std::size_t image_size = 128;
  std::vector<ManifestEntry> samples;

  std::vector<ManifestEntry> select(Section section, Split split) const {
    std::vector<ManifestEntry> out;
    for (const auto& e : samples)
      if (e.section == section && e.split == split) out.push_back(e);
    return out;
  }
};

inline nlohmann::json manifest_to_json(const Manifest& m) {
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& e : m.samples)
    samples.push_back({{"image", e.image},
                       {"annotation", e.annotation},
                       {"section", to_string(e.section)},
                       {"split", to_string(e.split)},
                       {"plane_label", to_string(e.plane_label)}});
  return {{"version", 1}, {"seed", m.seed}, {"image_size", m.image_size}, {"samples", samples}};
}

inline Manifest read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  if (!std::filesystem::exists(path)) throw IoError("no manifest.json in " + dir.string());
  const auto j = read_json(path);
  Manifest m;
  m.root = dir;
  try {
    m.seed = j.at("seed").get<std::uint64_t>();
    m.image_size = j.at("image_size").get<std::size_t>();
    for (const auto& e : j.at("samples"))
      m.samples.push_back({e.at("image").get<std::string>(), e.at("annotation").get<std::string>(),
                           parse_section(e.at("section").get<std::string>()),
                           parse_split(e.at("split").get<std::string>()),
                           parse_plane_label(e.at("plane_label").get<std::string>())});
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed manifest " + path.string() + ": " + e.what());
  }
  return m;
}

inline PhantomSample load_sample(const Manifest& m, const ManifestEntry& e) {
  PhantomSample s = annotation_from_json(read_json(m.root / e.annotation));
  s.image = read_image(m.root / e.image);
  return s;
}

}  // namespace sonoqa
