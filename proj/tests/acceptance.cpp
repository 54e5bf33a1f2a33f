// Acceptance run: one PASS/FAIL line per criterion.
//
//   1 gradients of every differentiable op within 1e-4 (central differences)
//   2 relation weights are column distributions on 1000 random ROI sets
//   3 focal loss with gamma = 0 equals cross-entropy; decreasing in p_t
//   4 IoU and anchor-count fixtures
//   5 AP / AUC against brute-force oracles
//   6 SPP output length independent of input size
//   7 per section, 300 phantoms (seed 42): test mAP@0.5 >= 0.5 and plane
//     accuracy >= 0.8, train + eval of all sections within 30 minutes
//   8 single-image assessment of a 128x128 image within 1.0 s
//   9 repeating 7 and 8 gives byte-identical evaluation JSON

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "sonoqa/commands.hpp"

namespace fs = std::filesystem;
using namespace sonoqa;

namespace {

constexpr double kMinMap = 0.5;
constexpr double kMinAccuracy = 0.8;
constexpr double kTrainBudgetS = 30.0 * 60.0;
constexpr double kAssessBudgetS = 1.0;
constexpr std::size_t kPerSection = 300;
constexpr std::uint64_t kDataSeed = 42;

int failures = 0;

void line(int id, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  std::printf("criterion %d: %s  %s\n", id, pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

struct Run {
  bool quality = true;
  double train_eval_s = 0;
  double assess_s = 0;
  std::string detail;
  std::vector<std::string> eval_json;  // file bytes, one per section
  std::string report_json;             // without timing
};

Run full_run(const fs::path& dir, std::ostream& log) {
  Run r;
  fs::remove_all(dir);
  GenerateOptions g;
  g.dataset.seed = kDataSeed;
  for (Section s : kAllSections) g.dataset.counts[s] = kPerSection;
  g.out = dir / "data";
  cmd_generate(g, log);

  const auto t0 = std::chrono::steady_clock::now();
  std::ostringstream detail;
  for (Section s : kAllSections) {
    TrainOptions t;
    t.config.model.section = s;
    t.data = g.out;
    t.out = dir / ("model_" + to_string(s));
    cmd_train(t, log);
    EvalOptions e;
    e.checkpoint = checkpoint_path(t.out);
    e.data = g.out;
    e.out = dir / "eval";
    const EvalSummary ev = cmd_eval(e, log);
    const double map = ev.ap.map.value_or(0.0), acc = ev.verdict_accuracy().value_or(0.0);
    if (!(map >= kMinMap && acc >= kMinAccuracy)) r.quality = false;
    detail << to_string(s) << " mAP=" << fmt(map) << " acc=" << fmt(acc) << "; ";
    r.eval_json.push_back(slurp(eval_json_path(e.out, s, Split::kTest)));
  }
  r.train_eval_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  r.detail = detail.str();

  // a fresh 128x128 phantom, not part of the dataset
  const fs::path image = dir / "probe.png";
  write_image(generate_sample(Section::kHead, true, sample_degradation(g.dataset, 1234567), 1234567, 128).image, image);
  AssessCommandOptions a;
  a.checkpoint = checkpoint_path(dir / "model_head");
  a.image = image;
  a.out = dir / "assess";
  const AssessResult res = cmd_assess(a, log);
  r.assess_s = res.total_s;
  auto rep = report_to_json(res.report);
  rep.erase("timing_s");
  r.report_json = rep.dump();
  return r;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string work = (fs::temp_directory_path() / "sonoqa_acceptance").string();
  bool quick = false;
  app.add_option("--work", work, "scratch directory for datasets and checkpoints");
  app.add_flag("--skip-training", quick, "only run criteria 1-6");
  CLI11_PARSE(app, argc, argv);

  try {
    const auto checks = run_selfcheck(SelfcheckOptions{});
    for (std::size_t i = 0; i < checks.size(); ++i)
      line(static_cast<int>(i) + 1, checks[i].passed, checks[i].name + " " + checks[i].detail);
    if (quick) return failures == 0 ? 0 : 1;

    std::ostream& log = std::cerr;
    const Run a = full_run(fs::path(work) / "run_a", log);
    line(7, a.quality && a.train_eval_s <= kTrainBudgetS,
         a.detail + "time=" + fmt(a.train_eval_s) + "s (limit " + fmt(kTrainBudgetS) + "s)");
    line(8, a.assess_s <= kAssessBudgetS, "assess " + fmt(a.assess_s) + "s (limit " + fmt(kAssessBudgetS) + "s)");

    const Run b = full_run(fs::path(work) / "run_b", log);
    const bool same = a.eval_json == b.eval_json && a.report_json == b.report_json;
    line(9, same, same ? "evaluation JSON and report identical across runs" : "runs differ");
  } catch (const std::exception& e) {
    std::printf("acceptance aborted: %s\n", e.what());
    return 1;
  }
  return failures == 0 ? 0 : 1;
}
