// sonoqa: generate phantoms, train, evaluate, assess single images, self-check.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sonoqa/commands.hpp"

namespace fs = std::filesystem;
using namespace sonoqa;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool with_seed, bool out_required) {
  cmd->add_option("--config", c.config, "JSON run config (sections: dataset, train, eval, assess)")
      ->check(CLI::ExistingFile);
  if (with_seed) cmd->add_option("--seed", c.seed, "seed for every random draw of the run");
  auto* out = cmd->add_option("--out", c.out, "output directory");
  if (out_required) out->required();
}

nlohmann::json config_section(const Common& c, const char* name) {
  if (c.config.empty()) return nlohmann::json::object();
  const auto j = read_run_config(c.config);
  return j.contains(name) ? j.at(name) : nlohmann::json::object();
}

void log_resolved(const char* cmd, const nlohmann::json& j) {
  std::cerr << "[" << cmd << "] resolved config: " << j.dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fetal ultrasound standard-plane quality assessment on synthetic phantoms"};
  app.require_subcommand(1);

  // generate
  Common gen_c;
  std::vector<std::string> gen_sections;
  std::optional<std::size_t> gen_count, gen_size;
  std::optional<double> gen_ratio;
  std::optional<std::string> gen_format;
  auto* gen = app.add_subcommand("generate", "render an annotated phantom dataset with a manifest");
  add_common(gen, gen_c, true, true);
  gen->add_option("--sections", gen_sections, "sections to render (head, abdominal, heart)")->delimiter(',');
  gen->add_option("--count", gen_count, "samples per section");
  gen->add_option("--standard-ratio", gen_ratio, "fraction of standard planes");
  gen->add_option("--image-size", gen_size, "image side in pixels (multiple of 32)");
  gen->add_option("--format", gen_format, "png or pgm");

  // train
  Common tr_c;
  std::string tr_data, tr_section;
  std::optional<std::string> tr_resume;
  std::optional<std::size_t> tr_epochs, tr_batch;
  std::optional<double> tr_lr, tr_scale;
  auto* tr = app.add_subcommand("train", "train one section's model on a generated dataset");
  add_common(tr, tr_c, true, true);
  tr->add_option("--data", tr_data, "dataset directory (holds manifest.json)")->required();
  tr->add_option("--section", tr_section, "section to train");
  tr->add_option("--resume", tr_resume, "continue from this checkpoint")->check(CLI::ExistingFile);
  tr->add_option("--epochs", tr_epochs, "total epochs");
  tr->add_option("--batch-size", tr_batch, "images per SGD step");
  tr->add_option("--learning-rate", tr_lr, "initial learning rate");
  tr->add_option("--channel-scale", tr_scale, "divisor of the backbone stage widths");

  // eval
  Common ev_c;
  std::string ev_ckpt, ev_data, ev_split = "test";
  std::optional<double> ev_iou, ev_detect, ev_quality;
  auto* ev = app.add_subcommand("eval", "score a checkpoint on a dataset split");
  add_common(ev, ev_c, false, true);
  ev->add_option("--checkpoint", ev_ckpt, "trained checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", ev_data, "dataset directory (holds manifest.json)")->required();
  ev->add_option("--split", ev_split, "train, val or test")->capture_default_str();
  ev->add_option("--iou-threshold", ev_iou, "IoU needed for a true positive");
  ev->add_option("--detect-threshold", ev_detect, "class probability needed to call a structure detected");
  ev->add_option("--quality-cutoff", ev_quality, "quality probability needed for flag 1");

  // assess
  Common as_c;
  std::string as_ckpt, as_image;
  std::optional<std::string> as_section;
  std::optional<double> as_detect, as_quality;
  auto* as = app.add_subcommand("assess", "assess one image: per-structure flags and plane verdict");
  add_common(as, as_c, false, true);
  as->add_option("--checkpoint", as_ckpt, "trained checkpoint")->required()->check(CLI::ExistingFile);
  as->add_option("--image", as_image, "PNG or PGM image")->required();
  as->add_option("--section", as_section, "section of the image (defaults to the checkpoint's)");
  as->add_option("--detect-threshold", as_detect, "class probability needed to call a structure detected");
  as->add_option("--quality-cutoff", as_quality, "quality probability needed for flag 1");

  // selfcheck
  Common sc_c;
  std::string sc_fault;
  auto* sc = app.add_subcommand("selfcheck", "gradient, normalization, metric-oracle and pooling checks");
  add_common(sc, sc_c, true, false);
  sc->add_option("--inject-fault", sc_fault, "deliberately break a component")
      ->check(CLI::IsMember({"ap-interpolation"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*gen) {
      GenerateOptions o;
      from_json(config_section(gen_c, "dataset"), o.dataset);
      if (!gen_sections.empty()) {
        const std::size_t n = gen_count.value_or(o.dataset.counts.empty() ? 300 : o.dataset.counts.begin()->second);
        o.dataset.counts.clear();
        for (const auto& s : gen_sections) o.dataset.counts[parse_section(s)] = n;
      } else if (gen_count) {
        for (auto& [s, n] : o.dataset.counts) n = *gen_count;
      }
      if (gen_c.seed) o.dataset.seed = *gen_c.seed;
      if (gen_ratio) o.dataset.standard_ratio = *gen_ratio;
      if (gen_size) o.dataset.image_size = *gen_size;
      if (gen_format) o.dataset.format = *gen_format;
      o.out = gen_c.out;
      o.dataset.validate();
      log_resolved("generate", resolved_json(o));
      cmd_generate(o, std::cout);
    } else if (*tr) {
      TrainOptions o;
      if (tr_resume) {
        o.resume = fs::path(*tr_resume);
        o.config = load_train_checkpoint(*o.resume).config;
      }
      const auto file = config_section(tr_c, "train");
      from_json(file, o.config);
      // the input size follows the dataset unless set explicitly
      const bool explicit_size = o.resume || (file.contains("model") && file.at("model").contains("image_size"));
      if (!explicit_size) o.config.model.image_size = read_manifest(tr_data).image_size;
      if (!tr_section.empty()) o.config.model.section = parse_section(tr_section);
      if (tr_c.seed) o.config.seed = *tr_c.seed;
      if (tr_epochs) o.config.epochs = *tr_epochs;
      if (tr_batch) o.config.batch_size = *tr_batch;
      if (tr_lr) o.config.learning_rate = *tr_lr;
      if (tr_scale) o.config.model.fen.channel_scale = *tr_scale;
      o.data = tr_data;
      o.out = tr_c.out;
      o.config.validate();
      log_resolved("train", resolved_json(o));
      cmd_train(o, std::cout);
    } else if (*ev) {
      EvalOptions o;
      const auto file = config_section(ev_c, "eval");
      for (const auto& [key, v] : file.items()) {
        if (key == "iou_threshold") o.iou_threshold = v.get<double>();
        else if (key == "assess") from_json(v, o.assess);
        else throw ConfigError("unknown eval option '" + key + "'");
      }
      if (ev_iou) o.iou_threshold = *ev_iou;
      if (ev_detect) o.assess.detect_threshold = *ev_detect;
      if (ev_quality) o.assess.quality_cutoff = *ev_quality;
      from_json(nlohmann::json(o.assess), o.assess);  // range check
      o.checkpoint = ev_ckpt;
      o.data = ev_data;
      o.split = parse_split(ev_split);
      o.out = ev_c.out;
      log_resolved("eval", resolved_json(o));
      cmd_eval(o, std::cout);
    } else if (*as) {
      AssessCommandOptions o;
      from_json(config_section(as_c, "assess"), o.assess);
      if (as_detect) o.assess.detect_threshold = *as_detect;
      if (as_quality) o.assess.quality_cutoff = *as_quality;
      from_json(nlohmann::json(o.assess), o.assess);
      if (as_section) o.section = parse_section(*as_section);
      o.checkpoint = as_ckpt;
      o.image = as_image;
      o.out = as_c.out;
      log_resolved("assess", resolved_json(o));
      cmd_assess(o, std::cout);
    } else if (*sc) {
      SelfcheckOptions o;
      if (sc_c.seed) o.seed = *sc_c.seed;
      if (sc_fault == "ap-interpolation") o.ap_interpolation = ApInterpolation::kElevenPoint;
      log_resolved("selfcheck", {{"seed", o.seed}, {"inject_fault", sc_fault}});
      if (!cmd_selfcheck(o, std::cout)) return exit_code(ErrorKind::kNumerical);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: bad config value: " << e.what() << "\n";
    return exit_code(ErrorKind::kUsage);
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(ErrorKind::kData);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(ErrorKind::kNumerical);
  }
  return 0;
}
