#include "hvm/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <ostream>
#include <sstream>

#include "hvm/config.hpp"
#include "hvm/gradcheck.hpp"
#include "hvm/train.hpp"

namespace hvm {

namespace fs = std::filesystem;

namespace {

// Raised for problems the user can fix by changing arguments or config.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::vector<std::pair<std::string, std::string>> parse_overrides(const std::vector<std::string>& extras) {
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const auto& a = extras[i];
    if (a.rfind("--", 0) != 0 || a.find('.') == std::string::npos) {
      throw UsageError("unexpected argument '" + a + "' (overrides look like --section.key VALUE)");
    }
    const auto eq = a.find('=');
    if (eq != std::string::npos) {
      out.emplace_back(a.substr(2, eq - 2), a.substr(eq + 1));
    } else {
      if (i + 1 >= extras.size()) throw UsageError("override '" + a + "' needs a value");
      out.emplace_back(a.substr(2), extras[++i]);
    }
  }
  return out;
}

struct CommonArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

RunConfig resolve_config(const CommonArgs& args, const std::vector<std::string>& extras, bool require_file) {
  if (require_file && args.config.empty()) throw UsageError("--config is required");
  RunConfig cfg = args.config.empty() ? RunConfig{} : load_config(args.config);
  if (args.config.empty()) cfg.data.source = "synthetic";
  apply_overrides(cfg, parse_overrides(extras));
  if (args.seed) cfg.train.seed = *args.seed;
  cfg.validate();
  return cfg;
}

std::vector<SegmentationSample> load_samples(const RunConfig& cfg, std::ostream& err) {
  const std::size_t h = cfg.data.target_size ? cfg.data.target_size : cfg.model.input_height;
  const std::size_t w = cfg.data.target_size ? cfg.data.target_size : cfg.model.input_width;
  if (cfg.data.source == "synthetic") {
    if (h != w) throw UsageError("synthetic data needs a square input size");
    return make_circles(cfg.data.synthetic_count, h, cfg.data.split_seed);
  }
  for (const auto* dir : {&cfg.data.images_dir, &cfg.data.masks_dir}) {
    if (!fs::is_directory(*dir)) throw UsageError("data directory '" + *dir + "' does not exist");
  }
  return load_dataset(cfg.data.images_dir, cfg.data.masks_dir, h, w,
                      [&](const std::string& msg) { err << "warning: " << msg << "\n"; });
}

struct Splits {
  std::vector<SegmentationSample> train, val, test;
};

Splits split_samples(const RunConfig& cfg, const std::vector<SegmentationSample>& all) {
  const auto idx = split(all.size(), {cfg.data.train_fraction, cfg.data.val_fraction, cfg.data.test_fraction,
                                      cfg.data.split_seed});
  return {select(all, idx.train), select(all, idx.val), select(all, idx.test)};
}

std::string timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
  return buf;
}

fs::path make_run_dir(const fs::path& root, const std::string& name) {
  const auto base = timestamp() + "-" + name;
  fs::path dir = root / base;
  for (int i = 1; fs::exists(dir); ++i) dir = root / (base + "-" + std::to_string(i));
  fs::create_directories(dir);
  return dir;
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

void print_metrics(std::ostream& out, const ConfusionCounts& c) {
  const auto m = metrics(c);
  out << "DSC " << fixed(m.dsc) << "  SE " << fixed(m.se) << "  SP " << fixed(m.sp) << "  ACC " << fixed(m.acc)
      << "  (TP " << c.tp << " TN " << c.tn << " FP " << c.fp << " FN " << c.fn << ")\n";
}

void write_metrics_csv(const fs::path& path, const std::string& label, const ConfusionCounts& c) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write '" + path.string() + "'");
  const auto m = metrics(c);
  f << "split,tp,tn,fp,fn,dsc,se,sp,acc\n"
    << label << "," << c.tp << "," << c.tn << "," << c.fp << "," << c.fn << "," << std::setprecision(17) << m.dsc
    << "," << m.se << "," << m.sp << "," << m.acc << "\n";
}

std::unique_ptr<HVMUNet<float>> load_model(const RunConfig& cfg, const std::string& checkpoint) {
  if (checkpoint.empty()) throw UsageError("--checkpoint is required");
  auto model = std::make_unique<HVMUNet<float>>(cfg.model, cfg.train.seed);
  load_into(*model, load_checkpoint(checkpoint));
  return model;
}

int cmd_train(const CommonArgs& args, const std::string& name, const std::vector<std::string>& extras,
              std::ostream& out, std::ostream& err) {
  auto cfg = resolve_config(args, extras, true);
  if (!name.empty()) cfg.name = name;
  const auto samples = load_samples(cfg, err);
  if (samples.empty()) throw UsageError("dataset is empty");
  const auto parts = split_samples(cfg, samples);

  const auto dir = make_run_dir(args.out.empty() ? "runs" : args.out, cfg.name);
  {
    std::ofstream snap(dir / "config.snapshot");
    snap << snapshot(cfg);
  }
  out << "run dir: " << dir.string() << "\n";
  out << "model " << hash_hex(cfg.model.hash()) << ": " << cfg.model.canonical() << "\n";
  out << "samples: train " << parts.train.size() << ", val " << parts.val.size() << ", test " << parts.test.size()
      << "\n";

  HVMUNet<float> model(cfg.model, cfg.train.seed);
  out << "parameters: " << model.parameter_count() << "\n";
  TrainOutputs outputs{dir / "log.csv", dir / "best.ckpt", [&](const EpochRecord& r) {
                         out << "epoch " << r.epoch << "  lr " << std::setprecision(6) << r.lr << "  loss "
                             << fixed(r.train_loss) << "  val DSC " << fixed(r.val.dsc) << "\n";
                         out.flush();
                       }};
  const auto result = train(model, parts.train, parts.val, cfg, outputs);
  out << "best val DSC " << fixed(result.best_val_dsc) << " at epoch " << result.best_epoch << "\n";
  return kExitOk;
}

std::vector<std::uint8_t> read_mask(const fs::path& p, std::size_t& h, std::size_t& w) {
  const auto img = read_image(p, 1);
  h = img.height;
  w = img.width;
  std::vector<std::uint8_t> m(img.pixels.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = img.pixels[i] > 127 ? 1 : 0;
  return m;
}

int cmd_eval_masks(const std::string& pred_dir, const std::string& truth_dir, const std::string& out_path,
                   std::ostream& out) {
  for (const auto* d : {&pred_dir, &truth_dir}) {
    if (!fs::is_directory(*d)) throw UsageError("directory '" + *d + "' does not exist");
  }
  std::map<std::string, fs::path> preds;
  for (const auto& e : fs::directory_iterator(pred_dir)) {
    if (e.is_regular_file() && is_image_path(e.path())) preds.emplace(e.path().stem().string(), e.path());
  }
  ConfusionCounts total;
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(truth_dir)) {
    if (!e.is_regular_file() || !is_image_path(e.path())) continue;
    const auto stem = e.path().stem().string();
    auto it = preds.find(stem);
    if (it == preds.end()) throw UsageError("no prediction for truth mask '" + stem + "'");
    std::size_t th, tw, ph, pw;
    const auto truth = read_mask(e.path(), th, tw);
    const auto pred = read_mask(it->second, ph, pw);
    if (th != ph || tw != pw) throw UsageError("prediction '" + stem + "' size differs from its truth mask");
    total += count_confusion(pred, truth);
    ++n;
  }
  out << "images: " << n << "\n";
  print_metrics(out, total);
  if (!out_path.empty()) write_metrics_csv(out_path, "masks", total);
  return kExitOk;
}

int cmd_eval(const CommonArgs& args, const std::string& checkpoint, const std::string& which,
             const std::vector<std::string>& extras, std::ostream& out, std::ostream& err) {
  const auto cfg = resolve_config(args, extras, true);
  auto model = load_model(cfg, checkpoint);
  const auto samples = load_samples(cfg, err);
  std::vector<SegmentationSample> chosen;
  if (which == "all") {
    chosen = samples;
  } else {
    const auto parts = split_samples(cfg, samples);
    chosen = which == "train" ? parts.train : which == "val" ? parts.val : parts.test;
  }
  if (chosen.empty()) throw UsageError("split '" + which + "' is empty");
  const auto res = evaluate(*model, chosen, cfg.train.batch_size, cfg.train);
  out << "split " << which << ": " << chosen.size() << " images, loss " << fixed(res.loss) << "\n";
  print_metrics(out, res.counts);
  if (!args.out.empty()) write_metrics_csv(args.out, which, res.counts);
  return kExitOk;
}

int cmd_predict(const CommonArgs& args, const std::string& checkpoint, const std::string& images_dir,
                const std::vector<std::string>& extras, std::ostream& out, std::ostream& err) {
  const auto cfg = resolve_config(args, extras, true);
  if (images_dir.empty()) throw UsageError("--images is required");
  if (!fs::is_directory(images_dir)) throw UsageError("images directory '" + images_dir + "' does not exist");
  if (args.out.empty()) throw UsageError("--out is required");
  auto model = load_model(cfg, checkpoint);
  fs::create_directories(args.out);
  const std::size_t H = cfg.model.input_height, W = cfg.model.input_width;

  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(images_dir)) {
    if (!e.is_regular_file()) continue;
    if (is_image_path(e.path())) {
      files.push_back(e.path());
    } else {
      err << "warning: skipping non-image file '" << e.path().string() << "'\n";
    }
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    const auto img = read_image(f, 3);
    std::vector<float> rgb(img.pixels.size());
    for (std::size_t i = 0; i < rgb.size(); ++i) rgb[i] = static_cast<float>(img.pixels[i]) / 255.0f;
    const auto resized = resize_bilinear(rgb, img.height, img.width, 3, H, W);
    std::vector<float> chw(3 * H * W);
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t p = 0; p < H * W; ++p) chw[c * H * W + p] = resized[p * 3 + c];
    }
    const auto prob_small = predict(*model, Tensor<float>({1, 3, H, W}, std::move(chw)));
    const auto prob = resize_bilinear(prob_small.values(), H, W, 1, img.height, img.width);

    Image prob_img{img.height, img.width, 1, std::vector<std::uint8_t>(prob.size())};
    Image mask_img = prob_img;
    Image overlay = img;
    for (std::size_t i = 0; i < prob.size(); ++i) {
      prob_img.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(prob[i], 0.0f, 1.0f) * 255.0f));
      const bool fg = prob[i] >= cfg.train.threshold;
      mask_img.pixels[i] = fg ? 255 : 0;
      if (fg) {
        overlay.pixels[i * 3] = static_cast<std::uint8_t>((overlay.pixels[i * 3] + 255) / 2);
        overlay.pixels[i * 3 + 1] = static_cast<std::uint8_t>(overlay.pixels[i * 3 + 1] / 2);
        overlay.pixels[i * 3 + 2] = static_cast<std::uint8_t>(overlay.pixels[i * 3 + 2] / 2);
      }
    }
    const auto stem = f.stem().string();
    write_png(fs::path(args.out) / (stem + "_prob.png"), prob_img);
    write_png(fs::path(args.out) / (stem + "_mask.png"), mask_img);
    write_png(fs::path(args.out) / (stem + "_overlay.png"), overlay);
  }
  out << "predicted " << files.size() << " images into " << args.out << "\n";
  return kExitOk;
}

int cmd_gradcheck(const CommonArgs& args, const std::vector<std::string>& only, std::size_t samples,
                  std::size_t directions, bool list, std::ostream& out) {
  if (list) {
    for (const auto& s : gradcheck_suites()) out << s << "\n";
    return kExitOk;
  }
  for (const auto& f : only) {
    const bool prefix = !f.empty() && f.back() == '*';
    const auto stem = prefix ? f.substr(0, f.size() - 1) : f;
    bool hit = false;
    for (const auto& s : gradcheck_suites()) hit = hit || (prefix ? s.starts_with(stem) : s == f);
    if (!hit) throw UsageError("--only '" + f + "' matches no suite (see --list)");
  }
  GradcheckOptions opt;
  if (args.seed) opt.seed = *args.seed;
  opt.e2e_coordinates = samples;
  opt.e2e_directions = directions;
  std::ofstream csv;
  if (!args.out.empty()) {
    csv.open(args.out, std::ios::trunc);
    if (!csv) throw std::runtime_error("cannot write '" + args.out + "'");
    csv << "suite,max_rel_error,tolerance,probes,seconds,passed,worst\n";
  }
  out << std::left << std::setw(34) << "suite" << std::setw(14) << "max rel err" << std::setw(10) << "tol"
      << std::setw(9) << "probes" << "result\n";
  bool ok = true;
  const auto reports = run_gradcheck(opt, only, [&](const GradcheckReport& r) {
    ok = ok && r.passed();
    std::ostringstream err_s, tol_s;
    err_s << std::scientific << std::setprecision(3) << r.max_rel_error;
    tol_s << std::scientific << std::setprecision(0) << r.tolerance;
    out << std::left << std::setw(34) << r.name << std::setw(14) << err_s.str() << std::setw(10) << tol_s.str()
        << std::setw(9) << r.coordinates << (r.passed() ? "PASS" : "FAIL") << "  (" << fixed(r.seconds, 2) << "s, worst "
        << r.worst << ")\n";
    out.flush();
    if (csv) {
      csv << r.name << "," << std::setprecision(6) << r.max_rel_error << "," << r.tolerance << "," << r.coordinates
          << "," << r.seconds << "," << (r.passed() ? 1 : 0) << "," << r.worst << "\n";
    }
  });
  if (reports.empty()) throw UsageError("no gradcheck suite matches the --only filter");
  out << (ok ? "all suites passed" : "gradient check FAILED") << "\n";
  return ok ? kExitOk : kExitVerification;
}

int cmd_summary(const CommonArgs& args, const std::vector<std::string>& extras, std::ostream& out) {
  const auto cfg = resolve_config(args, extras, false);
  HVMUNet<float> model(cfg.model, cfg.train.seed);
  out << "model " << hash_hex(cfg.model.hash()) << ": " << cfg.model.canonical() << "\n";
  out << std::left << std::setw(20) << "module" << std::right << std::setw(12) << "parameters" << "  output\n";
  std::size_t total = 0;
  std::ofstream csv;
  if (!args.out.empty()) {
    csv.open(args.out, std::ios::trunc);
    if (!csv) throw std::runtime_error("cannot write '" + args.out + "'");
    csv << "module,parameters,output\n";
  }
  for (const auto& r : model.summary()) {
    out << std::left << std::setw(20) << r.module << std::right << std::setw(12) << r.parameters << "  "
        << shape_str(r.output) << "\n";
    if (csv) csv << r.module << "," << r.parameters << ",\"" << shape_str(r.output) << "\"\n";
    total += r.parameters;
  }
  out << std::left << std::setw(20) << "total" << std::right << std::setw(12) << total << "\n";
  if (csv) csv << "total," << total << ",\n";
  return kExitOk;
}

int cmd_synth(const CommonArgs& args, std::size_t count, std::size_t size, std::ostream& out) {
  if (args.out.empty()) throw UsageError("--out is required");
  if (count == 0 || size == 0) throw UsageError("--count and --size must be positive");
  const auto samples = make_circles(count, size, args.seed.value_or(0));
  write_dataset(samples, fs::path(args.out) / "images", fs::path(args.out) / "masks");
  out << "wrote " << samples.size() << " image/mask pairs to " << args.out << "\n";
  return kExitOk;
}

void add_common(CLI::App* cmd, CommonArgs& args, bool config) {
  if (config) cmd->add_option("--config", args.config, "configuration file");
  cmd->add_option("--seed", args.seed, "random seed (overrides train.seed)");
  cmd->add_option("--out", args.out, "output path");
  cmd->allow_extras();
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"hvmunet: high-order vision state-space UNet for binary segmentation"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  CommonArgs common;
  std::string checkpoint, run_name, split_name = "all", images_dir, pred_dir, truth_dir;
  std::vector<std::string> only;
  std::size_t e2e_samples = GradcheckOptions{}.e2e_coordinates, e2e_dirs = GradcheckOptions{}.e2e_directions;
  std::size_t synth_count = 8, synth_size = 64;
  bool list = false;

  auto* train_cmd = app.add_subcommand("train", "train a model; writes a run directory");
  add_common(train_cmd, common, true);
  train_cmd->add_option("--name", run_name, "run name (overrides the config)");

  auto* eval_cmd = app.add_subcommand("eval", "score a checkpoint, or prediction masks against truth masks");
  add_common(eval_cmd, common, true);
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint file");
  eval_cmd->add_option("--split", split_name, "all | train | val | test")
      ->check(CLI::IsMember({"all", "train", "val", "test"}));
  eval_cmd->add_option("--pred-dir", pred_dir, "directory of predicted mask PNGs");
  eval_cmd->add_option("--truth-dir", truth_dir, "directory of ground-truth mask PNGs");

  auto* predict_cmd = app.add_subcommand("predict", "write probability maps, masks and overlays");
  add_common(predict_cmd, common, true);
  predict_cmd->add_option("--checkpoint", checkpoint, "checkpoint file");
  predict_cmd->add_option("--images", images_dir, "directory of input images");

  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient verification (float64)");
  add_common(grad_cmd, common, true);
  grad_cmd->add_option("--only", only, "suite names; a trailing * matches a prefix");
  grad_cmd->add_option("--e2e-samples", e2e_samples, "sampled coordinates for the end-to-end check");
  grad_cmd->add_option("--e2e-directions", e2e_dirs, "random directional checks for the end-to-end check");
  grad_cmd->add_flag("--list", list, "list suites and exit");

  auto* summary_cmd = app.add_subcommand("summary", "parameter counts and output shapes per module");
  add_common(summary_cmd, common, true);

  auto* synth_cmd = app.add_subcommand("synth", "write a synthetic random-circles dataset");
  add_common(synth_cmd, common, false);
  synth_cmd->add_option("--count", synth_count, "number of images");
  synth_cmd->add_option("--size", synth_size, "image side length");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    std::ostringstream o, r;
    const int code = app.exit(e, o, r);
    out << o.str();
    err << r.str();
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(common, run_name, train_cmd->remaining(), out, err);
    if (eval_cmd->parsed()) {
      if (!pred_dir.empty() || !truth_dir.empty()) {
        if (pred_dir.empty() || truth_dir.empty()) throw UsageError("--pred-dir and --truth-dir go together");
        if (!eval_cmd->remaining().empty()) throw UsageError("overrides are not used with --pred-dir");
        return cmd_eval_masks(pred_dir, truth_dir, common.out, out);
      }
      return cmd_eval(common, checkpoint, split_name, eval_cmd->remaining(), out, err);
    }
    if (predict_cmd->parsed()) return cmd_predict(common, checkpoint, images_dir, predict_cmd->remaining(), out, err);
    if (grad_cmd->parsed()) {
      if (!grad_cmd->remaining().empty()) throw UsageError("gradcheck takes no overrides");
      return cmd_gradcheck(common, only, e2e_samples, e2e_dirs, list, out);
    }
    if (summary_cmd->parsed()) return cmd_summary(common, summary_cmd->remaining(), out);
    if (synth_cmd->parsed()) {
      if (!synth_cmd->remaining().empty()) throw UsageError("synth takes no overrides");
      return cmd_synth(common, synth_count, synth_size, out);
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NonFiniteError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace hvm
