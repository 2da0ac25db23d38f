#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "famseg/checkpoint.hpp"
#include "famseg/config.hpp"
#include "famseg/dataset.hpp"
#include "famseg/gradcheck_suites.hpp"
#include "famseg/image_io.hpp"
#include "famseg/metrics.hpp"
#include "famseg/rng.hpp"
#include "famseg/train.hpp"

namespace fs = std::filesystem;
using namespace famseg;

namespace {

// Exit codes.
constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kConfig = 2;
constexpr int kData = 3;
constexpr int kNumeric = 4;
constexpr int kIncompatible = 5;

ExperimentConfig config_or_default(const std::string& path) {
  if (path.empty()) return parse_config("");
  return load_config(path);
}

int cmd_gen(const std::string& spec_path, const std::string& out, int n, long long seed) {
  ExperimentConfig cfg = config_or_default(spec_path);
  if (n > 0) cfg.data.n = n;
  if (seed >= 0) cfg.data.seed = static_cast<std::uint64_t>(seed);
  const auto samples = generate(cfg.phantom, cfg.data.n, cfg.data.seed);
  const auto idx = data_split(cfg.data);
  write_dataset(out, samples, idx);
  const auto counts = class_pixel_counts(samples);
  std::uint64_t total = 0;
  for (auto c : counts) total += c;
  std::cout << "wrote " << samples.size() << " pairs to " << out << " (train " << idx.train.size() << ", val "
            << idx.val.size() << ", test " << idx.test.size() << ")\n";
  const auto names = class_names(3);
  for (int c = 0; c < 3; ++c) {
    std::cout << std::left << std::setw(4) << names[c] << std::right << std::setw(10) << counts[c] << "  "
              << std::fixed << std::setprecision(3) << 100.0 * static_cast<double>(counts[c]) / total << "%\n";
  }
  return kOk;
}

int cmd_train(const std::string& config_path, const std::string& data_dir, const std::string& out,
              const std::string& resume_path, int epochs) {
  const ExperimentConfig cfg = config_or_default(config_path);
  const Dataset data = load_dataset(data_dir, 256);
  const SplitSamples s = split_samples(data);
  TrainOptions opt;
  opt.out_dir = out;
  opt.config_text = cfg.text;
  opt.stop_after = epochs;
  opt.progress = &std::cout;
  Checkpoint resume;
  if (!resume_path.empty()) {
    resume = load_checkpoint(resume_path);
    opt.resume = &resume;
  }
  const TrainResult r = train(cfg.train, s.train, s.val, opt);
  std::cout << "best val mIoU " << std::fixed << std::setprecision(4) << r.best_val_miou << " at epoch "
            << r.best_epoch << "; checkpoints in " << out << "\n";
  return kOk;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_dir, const std::string& split_name,
             bool json) {
  const Checkpoint ck = load_checkpoint(ckpt_path);
  const auto model = restore_model(ck);
  const Dataset data = load_dataset(data_dir, 256);
  const auto samples = split_name == "all" ? data.samples : data.subset(split_name);
  if (samples.empty()) throw DataError("split '" + split_name + "' is empty in " + data_dir);
  const EvalResult r = evaluate(*model, samples);
  std::cout << format_iou_table(r.report, split_name);
  if (json) {
    nlohmann::json j{{"split", split_name}, {"mIoU", r.report.miou}, {"pixels", r.cm.total()}};
    const auto names = class_names(r.cm.num_classes());
    for (std::size_t c = 0; c < names.size(); ++c) {
      j[names[c]] = r.report.present[c] ? nlohmann::json(r.report.per_class[c]) : nlohmann::json(nullptr);
    }
    std::cout << j.dump() << "\n";
  }
  return kOk;
}

int cmd_infer(const std::string& ckpt_path, const std::string& image_path, const std::string& out, bool palette) {
  const Checkpoint ck = load_checkpoint(ckpt_path);
  const auto model = restore_model(ck);
  const Tensor image = load_image_png(image_path);
  const Mask mask = infer(*model, image);
  save_mask_png(out, mask);
  std::cout << "wrote " << out;
  if (palette) {
    fs::path p(out);
    p.replace_extension(".palette.png");
    save_palette_png(p.string(), mask);
    std::cout << " and " << p.string();
  }
  std::cout << "\n";
  return kOk;
}

int cmd_gradcheck(const std::string& module, double tol, std::size_t max_per_tensor) {
  std::vector<std::string> modules;
  if (module == "all") {
    modules = gradcheck_modules();
  } else {
    modules = {module};
  }
  GradcheckOptions opt;
  opt.tol = tol;
  opt.max_per_tensor = max_per_tensor;
  bool ok = true;
  for (const auto& m : modules) {
    const SuiteResult r = run_gradcheck_suite(m, opt);
    std::cout << std::left << std::setw(10) << m << " max_rel_error " << std::scientific << std::setprecision(3)
              << r.report.max_rel_error << "  checked " << r.report.checked << "  worst " << r.report.worst
              << "  " << std::fixed << std::setprecision(1) << r.seconds << "s  "
              << (r.report.passed ? "PASS" : "FAIL") << "\n";
    ok = ok && r.report.passed;
  }
  return ok ? kOk : kNumeric;
}

int cmd_cost(const std::string& config_path, int image_size) {
  const ExperimentConfig cfg = config_or_default(config_path);
  const int size = image_size > 0 ? image_size : cfg.phantom.image_size;
  std::cout << format_cost_report(cost_report(cfg.train.model, size));
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"famseg: strip-convolution segmentation with feature-aware upsampling"};
  app.require_subcommand(1);

  std::string spec_path, out_dir;
  int gen_n = 0;
  long long gen_seed = -1;
  auto* gen = app.add_subcommand("gen", "Generate a synthetic phantom dataset");
  gen->add_option("--spec", spec_path, "Config file with [phantom] and [data] sections")->check(CLI::ExistingFile);
  gen->add_option("--out", out_dir, "Output directory")->required();
  gen->add_option("--n", gen_n, "Number of image/mask pairs (default: data.n = 200)");
  gen->add_option("--seed", gen_seed, "Master seed (default: data.seed = 7)");

  std::string config_path, data_dir, resume_path;
  int epochs = 0;
  auto* tr = app.add_subcommand("train", "Train a model on a dataset directory");
  tr->add_option("--config", config_path, "Experiment config (defaults apply when omitted)");
  tr->add_option("--data", data_dir, "Dataset directory with a manifest")->required();
  tr->add_option("--out", out_dir, "Directory for log.jsonl, last.ckpt and best.ckpt")->required();
  tr->add_option("--resume", resume_path, "Continue from a last.ckpt");
  tr->add_option("--epochs", epochs, "Stop after this many schedule epochs (default: all)")->default_val(0);

  std::string ckpt_path, split_name = "val";
  bool json = false;
  auto* ev = app.add_subcommand("eval", "Report IoU and mIoU of a checkpoint");
  ev->add_option("--ckpt", ckpt_path, "Checkpoint file")->required();
  ev->add_option("--data", data_dir, "Dataset directory with a manifest")->required();
  ev->add_option("--split", split_name, "train, val, test or all")->default_val("val");
  ev->add_flag("--json", json, "Also print a JSON record");

  std::string image_path, out_png;
  bool palette = false;
  auto* inf = app.add_subcommand("infer", "Segment one image");
  inf->add_option("--ckpt", ckpt_path, "Checkpoint file")->required();
  inf->add_option("--image", image_path, "Input PNG")->required();
  inf->add_option("--out", out_png, "Output index mask PNG")->required();
  inf->add_flag("--palette", palette, "Also write <out>.palette.png (FL red, FB green)");

  std::string module = "all";
  double tol = 1e-4;
  std::size_t max_per_tensor = 0;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gc->add_option("--module", module, "all, strip, mamba, fam, hamburger or full")
      ->default_val("all")
      ->check(CLI::IsMember({"all", "strip", "mamba", "fam", "hamburger", "full"}));
  gc->add_option("--tol", tol, "Maximum relative error")->default_val(1e-4);
  gc->add_option("--max-per-tensor", max_per_tensor, "Elements probed per tensor, 0 for all")->default_val(0);

  int image_size = 0;
  auto* cost = app.add_subcommand("cost", "Strip-block cost accounting and parameter count");
  cost->add_option("--config", config_path, "Experiment config (defaults apply when omitted)");
  cost->add_option("--image-size", image_size, "Input side length (default: phantom.image_size)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gen) return cmd_gen(spec_path, out_dir, gen_n, gen_seed);
    if (*tr) return cmd_train(config_path, data_dir, out_dir, resume_path, epochs);
    if (*ev) return cmd_eval(ckpt_path, data_dir, split_name, json);
    if (*inf) return cmd_infer(ckpt_path, image_path, out_png, palette);
    if (*gc) return cmd_gradcheck(module, tol, max_per_tensor);
    if (*cost) return cmd_cost(config_path, image_size);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const IncompatibleError& e) {
    std::cerr << "incompatible: " << e.what() << "\n";
    return kIncompatible;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}
