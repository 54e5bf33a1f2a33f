#pragma once

// The five tool subcommands as library calls. Each takes fully resolved
// options, writes its files, and prints a human summary to `out`.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sonoqa/dataset.hpp"
#include "sonoqa/phantom.hpp"
#include "sonoqa/report.hpp"
#include "sonoqa/selfcheck.hpp"
#include "sonoqa/trainer.hpp"

namespace sonoqa {

// ------------------------------------------------------------------ run config

// A run config file holds one object per subcommand family; all are optional.
inline constexpr std::array<const char*, 4> kRunConfigSections{"dataset", "train", "eval", "assess"};

inline nlohmann::json read_run_config(const std::filesystem::path& path) {
  const nlohmann::json j = read_json(path);
  if (!j.is_object()) throw ConfigError("config file " + path.string() + " must hold a JSON object");
  for (const auto& [key, v] : j.items()) {
    if (std::find_if(kRunConfigSections.begin(), kRunConfigSections.end(), [&](const char* s) { return key == s; }) ==
        kRunConfigSections.end())
      throw ConfigError("unknown config section '" + key + "' in " + path.string() +
                        " (expected dataset, train, eval or assess)");
    if (!v.is_object()) throw ConfigError("config section '" + key + "' must be an object");
  }
  return j;
}

inline void from_json(const nlohmann::json& j, AssessOptions& o) {
  if (!j.is_object()) throw ConfigError("assess options must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "detect_threshold") o.detect_threshold = v.get<double>();
      else if (key == "quality_cutoff") o.quality_cutoff = v.get<double>();
      else throw ConfigError("unknown assess option '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("bad value for assess option '" + key + "': " + e.what());
    }
  }
  if (!(o.detect_threshold >= 0.0 && o.detect_threshold <= 1.0) || !(o.quality_cutoff >= 0.0 && o.quality_cutoff <= 1.0))
    throw ConfigError("detect_threshold and quality_cutoff must lie in [0,1]");
}

inline void to_json(nlohmann::json& j, const AssessOptions& o) {
  j = {{"detect_threshold", o.detect_threshold}, {"quality_cutoff", o.quality_cutoff}};
}

// ------------------------------------------------------------------ generate

struct GenerateOptions {
  DatasetConfig dataset;
  std::filesystem::path out;
};

inline nlohmann::json resolved_json(const GenerateOptions& o) {
  return {{"dataset", o.dataset}, {"out", o.out.string()}};
}

inline Manifest cmd_generate(const GenerateOptions& o, std::ostream& log) {
  if (o.out.empty()) throw ConfigError("generate needs an output directory");
  const Manifest m = generate_dataset(o.dataset, o.out);
  for (const auto& [section, n] : o.dataset.counts) {
    if (n == 0) continue;
    std::size_t standard = 0;
    std::map<Split, std::size_t> per_split;
    for (const auto& e : m.samples)
      if (e.section == section) {
        ++per_split[e.split];
        standard += e.plane_label == PlaneLabel::kStandard ? 1 : 0;
      }
    log << to_string(section) << ": " << n << " samples (" << standard << " standard), train/val/test "
        << per_split[Split::kTrain] << "/" << per_split[Split::kVal] << "/" << per_split[Split::kTest] << "\n";
  }
  log << "wrote " << (o.out / "manifest.json").string() << "\n";
  return m;
}

// ------------------------------------------------------------------ train

struct TrainOptions {
  TrainConfig config;
  std::filesystem::path data;    // directory holding manifest.json
  std::filesystem::path out;     // receives checkpoint.json and metrics.csv
  std::optional<std::filesystem::path> resume;
};

inline nlohmann::json resolved_json(const TrainOptions& o) {
  return {{"train", o.config},
          {"data", o.data.string()},
          {"out", o.out.string()},
          {"resume", o.resume ? nlohmann::json(o.resume->string()) : nlohmann::json(nullptr)}};
}

inline std::vector<PhantomSample> load_split(const Manifest& m, Section section, Split split) {
  std::vector<PhantomSample> out;
  for (const auto& e : m.select(section, split)) out.push_back(load_sample(m, e));
  return out;
}

inline std::filesystem::path checkpoint_path(const std::filesystem::path& dir) { return dir / "checkpoint.json"; }
inline std::filesystem::path metrics_csv_path(const std::filesystem::path& dir) { return dir / "metrics.csv"; }

inline TrainState cmd_train(const TrainOptions& o, std::ostream& log) {
  if (o.data.empty() || o.out.empty()) throw ConfigError("train needs a dataset directory and an output directory");
  o.config.validate();
  TrainState state = initial_state(o.config);
  std::vector<std::string> rows;
  if (o.resume) {
    LoadedCheckpoint ck = load_train_checkpoint(*o.resume);
    if (nlohmann::json(ck.config.model) != nlohmann::json(o.config.model))
      throw ConfigError("--resume: model config differs from the checkpoint's");
    state = std::move(ck.state);
    // keep the log rows of the epochs the checkpoint already covers
    std::ifstream is(metrics_csv_path(o.out));
    std::string line;
    if (is && std::getline(is, line))
      while (std::getline(is, line))
        if (!line.empty() && std::stoul(line.substr(0, line.find(','))) <= state.epoch) rows.push_back(line);
    log << "resuming from " << o.resume->string() << " after epoch " << state.epoch << "\n";
  }
  const Manifest m = read_manifest(o.data);
  const Section section = o.config.model.section;
  const auto train_set = load_split(m, section, Split::kTrain);
  const auto val_set = load_split(m, section, Split::kVal);
  if (train_set.empty()) throw InputError("manifest has no " + to_string(section) + " training samples");
  log << "training " << to_string(section) << " on " << train_set.size() << " images (" << val_set.size()
      << " validation), " << o.config.epochs << " epochs\n";

  std::error_code ec;
  std::filesystem::create_directories(o.out, ec);
  if (ec) throw IoError("cannot create " + o.out.string() + ": " + ec.message());
  auto write_csv = [&] {
    std::string text = epoch_csv_header() + "\n";
    for (const auto& r : rows) text += r + "\n";
    write_text(metrics_csv_path(o.out), text);
  };
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochLog& e) {
    rows.push_back(epoch_csv_row(e));
    log << "epoch " << e.epoch << "  lr " << e.lr << "  loss " << std::fixed << std::setprecision(4) << e.loss.total
        << " (obj " << e.loss.objectness << ", box " << e.loss.box << ", cls " << e.loss.cls << ", quality "
        << e.loss.quality << ")";
    if (e.val_map) log << "  val mAP " << *e.val_map;
    if (e.val_acc) log << "  val acc " << *e.val_acc;
    log << std::defaultfloat << std::setprecision(6) << "\n";
  };
  hooks.on_checkpoint = [&](const TrainState& s) {
    save_train_checkpoint(checkpoint_path(o.out), o.config, s);
    write_csv();
  };
  state = train(o.config, train_set, val_set, std::move(state), hooks);
  save_train_checkpoint(checkpoint_path(o.out), o.config, state);
  write_csv();
  log << "wrote " << checkpoint_path(o.out).string() << " and " << metrics_csv_path(o.out).string() << "\n";
  return state;
}

// ------------------------------------------------------------------ eval

struct EvalOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path data;
  Split split = Split::kTest;
  AssessOptions assess;
  double iou_threshold = 0.5;
  std::filesystem::path out;
};

inline nlohmann::json resolved_json(const EvalOptions& o) {
  return {{"checkpoint", o.checkpoint.string()}, {"data", o.data.string()},          {"split", to_string(o.split)},
          {"assess", o.assess},                  {"iou_threshold", o.iou_threshold}, {"out", o.out.string()}};
}

inline std::filesystem::path eval_json_path(const std::filesystem::path& dir, Section s, Split split) {
  return dir / ("eval_" + to_string(s) + "_" + to_string(split) + ".json");
}

inline void print_eval(const EvalSummary& s, std::ostream& log) {
  auto num = [](const std::optional<double>& v) {
    std::ostringstream os;
    if (v) os << std::fixed << std::setprecision(4) << *v;
    else os << "n/a";
    return os.str();
  };
  log << "section " << to_string(s.section) << ", " << s.images << " images\n";
  log << "  structure  AP@0.5\n";
  for (std::size_t c = 0; c < s.ap.per_class.size(); ++c)
    log << "  " << std::left << std::setw(9) << structures(s.section)[c].code << std::right << "  "
        << num(s.ap.per_class[c]) << "\n";
  log << "  mAP        " << num(s.ap.map) << "\n";
  if (s.iou)
    log << "  IoU min/q1/median/q3/max  " << num(s.iou->min) << " " << num(s.iou->q1) << " " << num(s.iou->median)
        << " " << num(s.iou->q3) << " " << num(s.iou->max) << "\n";
  log << "  plane  acc " << num(accuracy(s.plane)) << "  spec " << num(specificity(s.plane)) << "  sen "
      << num(sensitivity(s.plane)) << "  prec " << num(precision(s.plane)) << "  f1 " << num(f1(s.plane)) << "  auc "
      << num(s.auc) << "\n";
  for (const auto& w : s.warnings) log << "  warning: " << w << "\n";
}

inline EvalSummary cmd_eval(const EvalOptions& o, std::ostream& log) {
  if (o.checkpoint.empty() || o.data.empty() || o.out.empty())
    throw ConfigError("eval needs a checkpoint, a dataset directory and an output directory");
  if (!(o.iou_threshold > 0.0 && o.iou_threshold < 1.0)) throw ConfigError("iou_threshold must lie in (0,1)");
  const Model model = load_model(o.checkpoint);
  const Section section = model.config().section;
  const auto samples = load_split(read_manifest(o.data), section, o.split);
  if (samples.empty())
    throw InputError("split " + to_string(o.split) + " has no " + to_string(section) + " samples");
  const EvalSummary s = evaluate(model, samples, o.assess, o.iou_threshold);
  std::error_code ec;
  std::filesystem::create_directories(o.out, ec);
  if (ec) throw IoError("cannot create " + o.out.string() + ": " + ec.message());
  nlohmann::json j = eval_to_json(s);
  j["split"] = to_string(o.split);
  j["iou_threshold"] = o.iou_threshold;
  write_json(eval_json_path(o.out, section, o.split), j);
  print_eval(s, log);
  log << "wrote " << eval_json_path(o.out, section, o.split).string() << "\n";
  return s;
}

// ------------------------------------------------------------------ assess

struct AssessCommandOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path image;
  std::optional<Section> section;  // defaults to the checkpoint's section
  AssessOptions assess;
  std::filesystem::path out;
};

inline nlohmann::json resolved_json(const AssessCommandOptions& o) {
  return {{"checkpoint", o.checkpoint.string()},
          {"image", o.image.string()},
          {"section", o.section ? nlohmann::json(to_string(*o.section)) : nlohmann::json(nullptr)},
          {"assess", o.assess},
          {"out", o.out.string()}};
}

struct AssessResult {
  QualityReport report;
  double total_s = 0.0;  // checkpoint load through written outputs
  std::filesystem::path report_path, annotated_path;
};

inline AssessResult cmd_assess(const AssessCommandOptions& o, std::ostream& log) {
  if (o.checkpoint.empty() || o.image.empty() || o.out.empty())
    throw ConfigError("assess needs a checkpoint, an image and an output directory");
  const auto t0 = std::chrono::steady_clock::now();
  const Model model = load_model(o.checkpoint);
  const GrayImage image = read_image(o.image);
  const Section section = o.section.value_or(model.config().section);
  AssessResult r;
  r.report = assess(model, image, section, o.assess);
  std::error_code ec;
  std::filesystem::create_directories(o.out, ec);
  if (ec) throw IoError("cannot create " + o.out.string() + ": " + ec.message());
  const std::string stem = o.image.stem().string();
  r.report_path = o.out / (stem + "_report.json");
  r.annotated_path = o.out / (stem + "_annotated.png");
  write_json(r.report_path, report_to_json(r.report));
  write_png(annotate(image, r.report), r.annotated_path);
  r.total_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  log << to_string(section) << " plane: " << to_string(r.report.verdict) << "\n";
  for (const auto& a : r.report.structures) {
    log << "  " << std::left << std::setw(4) << structures(section)[a.id].code << std::right << " flag " << a.flag;
    if (a.detected) log << "  confidence " << std::fixed << std::setprecision(3) << a.confidence << "  quality " << a.quality;
    else log << "  not detected";
    log << std::defaultfloat << std::setprecision(6) << "\n";
  }
  log << "inference " << std::fixed << std::setprecision(3) << r.report.timing_s << " s, total " << r.total_s << " s"
      << std::defaultfloat << std::setprecision(6) << "\n";
  log << "wrote " << r.report_path.string() << " and " << r.annotated_path.string() << "\n";
  return r;
}

// ------------------------------------------------------------------ selfcheck

inline bool cmd_selfcheck(const SelfcheckOptions& o, std::ostream& log) {
  bool ok = true;
  for (const auto& r : run_selfcheck(o)) {
    ok = ok && r.passed;
    log << (r.passed ? "PASS " : "FAIL ") << std::left << std::setw(24) << r.name << std::right << " " << r.detail
        << "  [" << std::fixed << std::setprecision(2) << r.seconds << " s]" << std::defaultfloat << "\n";
  }
  log << (ok ? "all checks passed" : "self-check FAILED") << "\n";
  return ok;
}

}  // namespace sonoqa
