#pragma once

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Core>

#include "olivine/augment.hpp"
#include "olivine/checkpoint.hpp"
#include "olivine/config.hpp"
#include "olivine/dataset.hpp"
#include "olivine/error.hpp"
#include "olivine/metrics.hpp"
#include "olivine/model.hpp"
#include "olivine/preprocess.hpp"
#include "olivine/train.hpp"

namespace olivine::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

// OLIVINE_THREADS: unset or 0 means serial.
inline std::size_t thread_cap() {
  const char* env = std::getenv("OLIVINE_THREADS");
  if (!env || !*env) return 0;
  std::size_t n = 0;
  if (!config_detail::parse_number(config_detail::trim(env), n)) {
    throw UsageError(std::string("OLIVINE_THREADS must be a non-negative integer, got '") + env + "'");
  }
  return n;
}

// ---------------------------------------------------------------------------
// key = value sidecar files

using KeyValues = std::map<std::string, std::string>;

inline std::string render_key_values(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

inline KeyValues read_key_values(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("missing " + path.string());
  const auto bytes = read_file(path);
  std::istringstream in(std::string(bytes.begin(), bytes.end()));
  KeyValues kv;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto body = config_detail::trim(line);
    if (body.empty() || body.front() == '#') continue;
    const auto eq = body.find('=');
    if (eq == std::string_view::npos) throw DataError(path.string() + ": line " + std::to_string(n) + " is not key = value");
    kv[std::string(config_detail::trim(body.substr(0, eq)))] = std::string(config_detail::trim(body.substr(eq + 1)));
  }
  return kv;
}

inline const std::string& require_key(const KeyValues& kv, const std::string& key, const fs::path& from) {
  const auto it = kv.find(key);
  if (it == kv.end()) throw DataError(from.string() + ": missing key '" + key + "'");
  return it->second;
}

template <typename N>
N number_of(const KeyValues& kv, const std::string& key, const fs::path& from) {
  N v{};
  if (!config_detail::parse_number(require_key(kv, key, from), v)) {
    throw DataError(from.string() + ": bad value for '" + key + "'");
  }
  return v;
}

inline fs::path meta_path(const fs::path& ckpt) { return fs::path(ckpt.string() + ".meta"); }
inline fs::path curves_path(const fs::path& ckpt) { return fs::path(ckpt.string() + ".curves.csv"); }
inline constexpr const char* kPreprocessMeta = "preprocess.meta";

inline KeyValues preprocess_meta(const PreprocessOptions& o) {
  return {{"preprocess.applied", "1"},
          {"preprocess.sigma", config_detail::format_double(o.sigma)},
          {"preprocess.crop_margin", config_detail::format_double(o.crop_margin)},
          {"preprocess.otsu_source", otsu_source_name(o.otsu_source)},
          {"preprocess.use_depth", o.use_depth ? "1" : "0"},
          {"preprocess.depth_near_mm", std::to_string(o.depth_near_mm)},
          {"preprocess.depth_far_mm", std::to_string(o.depth_far_mm)},
          {"preprocess.image_size", std::to_string(o.out_size)}};
}

inline PreprocessOptions preprocess_from_meta(const KeyValues& kv, const fs::path& from) {
  PreprocessOptions o;
  o.sigma = number_of<double>(kv, "preprocess.sigma", from);
  o.crop_margin = number_of<double>(kv, "preprocess.crop_margin", from);
  o.otsu_source = parse_otsu_source(require_key(kv, "preprocess.otsu_source", from));
  o.use_depth = require_key(kv, "preprocess.use_depth", from) == "1";
  o.depth_near_mm = number_of<std::uint16_t>(kv, "preprocess.depth_near_mm", from);
  o.depth_far_mm = number_of<std::uint16_t>(kv, "preprocess.depth_far_mm", from);
  o.out_size = number_of<std::size_t>(kv, "preprocess.image_size", from);
  return o;
}

// Everything needed to rebuild and feed a trained network.
struct ModelMeta {
  std::string model;
  std::vector<std::string> classes;
  std::size_t image_size = 224;
  std::size_t in_channels = 3;
  BatchNormOptions bn;
  std::optional<PreprocessOptions> preprocess;
};

inline void save_model_meta(const fs::path& path, const ModelMeta& m) {
  KeyValues kv;
  kv["model"] = m.model;
  std::string classes;
  for (const auto& c : m.classes) classes += (classes.empty() ? "" : ",") + c;
  kv["classes"] = classes;
  kv["image_size"] = std::to_string(m.image_size);
  kv["in_channels"] = std::to_string(m.in_channels);
  kv["bn_momentum"] = config_detail::format_double(m.bn.momentum);
  kv["bn_epsilon"] = config_detail::format_double(m.bn.epsilon);
  if (m.preprocess) {
    kv.merge(preprocess_meta(*m.preprocess));
  } else {
    kv["preprocess.applied"] = "0";
  }
  write_text_file(path, render_key_values(kv));
}

inline ModelMeta load_model_meta(const fs::path& path) {
  const auto kv = read_key_values(path);
  ModelMeta m;
  m.model = require_key(kv, "model", path);
  std::stringstream classes(require_key(kv, "classes", path));
  for (std::string c; std::getline(classes, c, ',');) m.classes.push_back(c);
  m.image_size = number_of<std::size_t>(kv, "image_size", path);
  m.in_channels = number_of<std::size_t>(kv, "in_channels", path);
  m.bn.momentum = number_of<double>(kv, "bn_momentum", path);
  m.bn.epsilon = number_of<double>(kv, "bn_epsilon", path);
  if (kv.contains("preprocess.applied") && kv.at("preprocess.applied") == "1") m.preprocess = preprocess_from_meta(kv, path);
  return m;
}

// ---------------------------------------------------------------------------
// helpers shared by train / evaluate / predict

// Brings an image to the network's input size and channel count.
inline Image fit_to_network(Image img, std::size_t size, std::size_t channels) {
  if (img.width != size || img.height != size) img = resize_bilinear(img, size, size);
  if (channels == 1 && img.channels == 3) return to_gray(img);
  if (channels == 3 && img.channels == 1) {
    Image rgb(img.width, img.height, 3);
    for (std::size_t i = 0; i < img.width * img.height; ++i) {
      for (std::size_t c = 0; c < 3; ++c) rgb.pixels[i * 3 + c] = img.pixels[i];
    }
    return rgb;
  }
  return img;
}

// Decodes each manifest image once and keeps it at network size.
class ImageCache {
 public:
  ImageCache(std::size_t size, std::size_t channels) : size_(size), channels_(channels) {}
  Image operator()(const ManifestRecord& r) {
    auto it = cache_.find(r.path);
    if (it == cache_.end()) it = cache_.emplace(r.path, fit_to_network(load_image(r.path), size_, channels_)).first;
    return it->second;
  }

 private:
  std::size_t size_, channels_;
  std::map<std::string, Image> cache_;
};

inline BatchStream split_stream(const Manifest& records, Split split, std::size_t batch_size, ImageCache& cache,
                                std::function<std::vector<SampleHook>(std::size_t epoch)> hooks = {},
                                std::uint64_t seed = 0) {
  return [&records, split, batch_size, &cache, hooks, seed](std::size_t epoch, const std::function<void(const Batch&)>& sink) {
    BatchIterator it(records, split, batch_size, Rng::derive({seed, 0x5EED, epoch}).next_u64(),
                     hooks ? hooks(epoch) : std::vector<SampleHook>{}, [&cache](const ManifestRecord& r) { return cache(r); });
    while (auto b = it.next()) sink(*b);
  };
}

inline Network<float> network_from_checkpoint(const fs::path& ckpt_path, ModelMeta& meta, Checkpoint* out = nullptr) {
  meta = load_model_meta(meta_path(ckpt_path));
  const auto ckpt = read_checkpoint_file(ckpt_path);
  auto spec = spec_from_checkpoint(ckpt, meta.bn);
  spec.input_size = meta.image_size;
  if (spec.num_classes != meta.classes.size()) {
    throw DataError(ckpt_path.string() + ": classifier has " + std::to_string(spec.num_classes) + " outputs but " +
                    std::to_string(meta.classes.size()) + " class names");
  }
  Network<float> net(spec);
  apply_checkpoint(ckpt, net);
  if (out) *out = ckpt;
  return net;
}

// ---------------------------------------------------------------------------
// subcommands

struct SynthArgs {
  std::string out;
  std::size_t per_class = 100;
  std::uint64_t seed = 7;
  std::size_t size = 224;
  bool with_depth = false;
};

inline int run_synth(const SynthArgs& a) {
  const auto records = generate_synthetic(a.out, a.per_class, a.size, a.seed, a.with_depth);
  std::cout << "wrote " << records.size() << " images to " << a.out << "\n";
  return kOk;
}

inline int run_ingest(const std::string& root, const std::string& manifest) {
  const auto records = scan_directory(root);
  save_manifest(manifest, records);
  std::cout << records.size() << " images, " << class_names(records).size() << " classes\n";
  return kOk;
}

inline SplitSpec parse_fractions(const std::string& text) {
  SplitSpec s;
  std::vector<double> v;
  std::stringstream in(text);
  for (std::string part; std::getline(in, part, ',');) {
    double x = 0;
    if (!config_detail::parse_number(config_detail::trim(part), x)) throw UsageError("bad --fractions value '" + text + "'");
    v.push_back(x);
  }
  if (v.size() != 3) throw UsageError("--fractions needs three comma-separated values");
  s.f_train = v[0];
  s.f_val = v[1];
  s.f_test = v[2];
  s.validate();
  return s;
}

inline int run_split(const std::string& manifest, std::uint64_t seed, const std::optional<std::string>& fractions) {
  const auto records = load_manifest(manifest);
  const auto split = stratified_split(records, fractions ? parse_fractions(*fractions) : SplitSpec{}, seed);
  save_manifest(manifest, split);
  std::cout << "train " << count_split(split, Split::Train) << ", val " << count_split(split, Split::Val) << ", test "
            << count_split(split, Split::Test) << "\n";
  return kOk;
}

struct PreprocessArgs {
  std::string manifest, out, config;
  bool use_depth = false;
  std::optional<double> sigma;
  std::optional<std::size_t> size;
};

inline int run_preprocess(const PreprocessArgs& a) {
  Config cfg = a.config.empty() ? Config{} : load_config(a.config);
  if (a.use_depth) cfg.preprocess.use_depth = true;
  if (a.sigma) cfg.preprocess.sigma = *a.sigma;
  if (a.size) cfg.preprocess.out_size = *a.size;
  cfg.validate();
  const auto records = load_manifest(a.manifest);
  Manifest out;
  std::size_t fallbacks = 0;
  for (const auto& r : records) {
    const Image img = load_image(r.path);
    std::optional<DepthMap> depth;
    if (cfg.preprocess.use_depth) {
      const auto dp = depth_path_for(r.path);
      try {
        depth = read_depth(read_file(dp));
      } catch (const DataError& e) {
        throw DataError(dp.string() + ": " + e.what());
      }
    }
    const auto res = preprocess_image(img, cfg.preprocess, depth ? &*depth : nullptr);
    fallbacks += !res.segmented;
    const fs::path dst = fs::path(a.out) / r.class_name / fs::path(r.path).filename();
    fs::create_directories(dst.parent_path());
    save_image(dst, res.image);
    out.push_back({dst.generic_string(), r.class_name, r.class_index, r.split});
  }
  save_manifest(fs::path(a.out) / "manifest.csv", out);
  write_text_file(fs::path(a.out) / kPreprocessMeta, render_key_values(preprocess_meta(cfg.preprocess)));
  std::cout << out.size() << " images written to " << a.out;
  if (fallbacks) std::cout << " (" << fallbacks << " without segmentation)";
  std::cout << "\n";
  return kOk;
}

struct TrainArgs {
  std::string manifest, model, config, out, init;
  bool freeze = false;
  bool quiet = false;
};

inline int run_train(const TrainArgs& a) {
  const auto started = std::chrono::steady_clock::now();
  const Config cfg = a.config.empty() ? Config{} : load_config(a.config);
  const auto records = load_manifest(a.manifest);
  const auto names = class_names(records);
  auto spec = build_preset(a.model, names.size(), cfg.in_channels, cfg.bn);
  spec.input_size = cfg.image_size();

  Network<float> net(spec);
  Rng init_rng = Rng::derive({cfg.train.seed, 0x1417});
  net.initialize(init_rng);
  if (!a.init.empty()) {
    const bool head = apply_backbone(read_checkpoint_file(a.init), net);
    if (!a.quiet) std::cout << "initialized from " << a.init << (head ? "" : " (fresh classifier)") << "\n";
  }
  if (a.freeze) net.freeze_backbone(cfg.unfreeze_last_block);

  ImageCache cache(cfg.image_size(), cfg.in_channels);
  std::function<std::vector<SampleHook>(std::size_t)> hooks;
  if (cfg.augment) {
    hooks = [&cfg](std::size_t epoch) {
      return std::vector<SampleHook>{[&cfg, epoch](Image img, const ManifestRecord&, std::size_t pos) {
        Rng rng = Rng::derive({cfg.train.seed, 0xA06, epoch, pos});
        return augment_sample(img, cfg.aug, rng);
      }};
    };
  }
  const auto train = split_stream(records, Split::Train, cfg.train.batch_size, cache, hooks, cfg.train.seed);
  const auto val = split_stream(records, Split::Val, cfg.train.batch_size, cache);
  const auto result = train_loop(net, train, val, cfg.train, [&](const EpochRecord& r) {
    if (a.quiet) return;
    char line[200];
    std::snprintf(line, sizeof(line), "epoch %zu/%zu  loss %.4f  acc %.4f  val_loss %.4f  val_acc %.4f\n", r.epoch,
                  cfg.train.max_epochs, r.train_loss, r.train_acc, r.val_loss, r.val_acc);
    std::cout << line << std::flush;
  });

  const fs::path out(a.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_file(out, encode_checkpoint(result.best));
  write_text_file(curves_path(out), log_curves(result.history));
  ModelMeta meta{std::string(a.model), names, cfg.image_size(), cfg.in_channels, cfg.bn, std::nullopt};
  const auto pre = fs::path(a.manifest).parent_path() / kPreprocessMeta;
  if (fs::exists(pre)) meta.preprocess = preprocess_from_meta(read_key_values(pre), pre);
  save_model_meta(meta_path(out), meta);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  if (!a.quiet) {
    std::cout << "best epoch " << result.best_epoch << " of " << result.history.size() << ", val_acc "
              << result.history[result.best_epoch - 1].val_acc << "\n";
  }
  std::cerr << "train: " << secs << " s\n";
  return kOk;
}

struct EvaluateArgs {
  std::string manifest, ckpt, split = "test", report, metrics;
  bool compare_paper = false;
};

inline int run_evaluate(const EvaluateArgs& a) {
  ModelMeta meta;
  auto net = network_from_checkpoint(a.ckpt, meta);
  const auto records = load_manifest(a.manifest);
  if (class_names(records) != meta.classes) throw DataError(a.manifest + ": classes differ from the checkpoint's");
  ImageCache cache(meta.image_size, meta.in_channels);
  const auto summary = evaluate_batches(net, split_stream(records, parse_split(a.split), 32, cache));
  const auto m = derive_metrics(confusion(summary.predictions, summary.labels, meta.classes.size()), meta.classes);
  std::vector<PaperReference> refs;
  if (a.compare_paper) refs = {kPaperEfficientNetB0, kPaperMobileNetV2};
  const auto report = render_report(m, refs, meta.model + " on split '" + a.split + "'");
  std::cout << report;
  if (!a.report.empty()) write_text_file(a.report, report);
  if (!a.metrics.empty()) write_text_file(a.metrics, render_metrics_kv(m));
  return kOk;
}

inline int run_predict(const std::string& ckpt, const std::string& image_path) {
  ModelMeta meta;
  auto net = network_from_checkpoint(ckpt, meta);
  Image img = load_image(image_path);
  if (meta.preprocess) {
    auto opt = *meta.preprocess;
    opt.use_depth = false;
    img = preprocess_image(img, opt).image;
  }
  img = fit_to_network(std::move(img), meta.image_size, meta.in_channels);
  const auto probs = net.forward(normalize_to_tensor<float>(img).reshaped({1, img.channels, img.height, img.width}), Mode::Infer);
  const std::size_t best = argmax(probs);
  std::cout << meta.classes[best] << "\n";
  char buf[32];
  for (std::size_t k = 0; k < probs.size(); ++k) {
    std::snprintf(buf, sizeof(buf), "%.6f", static_cast<double>(probs[k]));
    std::cout << (k ? " " : "") << buf;
  }
  std::cout << "\n";
  return kOk;
}

inline int run_gradcheck(const std::string& model, std::size_t size, std::uint64_t seed) {
  const auto r = gradient_check_preset(model, size, seed);
  std::printf("%s at %zux%zu: max relative error %.3e over %zu entries (worst %s)\n", model.c_str(), size, size,
              r.max_rel_error, r.checked, r.worst_entry.c_str());
  if (r.max_rel_error > 1e-4) {
    std::fprintf(stderr, "gradcheck: error exceeds 1e-4\n");
    return kNumeric;
  }
  return kOk;
}

// ---------------------------------------------------------------------------

inline int dispatch(int argc, const char* const* argv) {
  CLI::App app{"olivine: olive-variety image classification pipeline"};
  app.require_subcommand(1);
  app.footer(config_help() +
             "\nExit codes: 0 ok, 1 usage, 2 data, 3 numeric. OLIVINE_THREADS caps worker threads (0 = serial).");

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth", "generate the synthetic five-class benchmark");
  c_synth->add_option("--out", synth.out, "output directory")->required();
  c_synth->add_option("--per-class", synth.per_class, "images per class")->capture_default_str();
  c_synth->add_option("--seed", synth.seed, "generator seed")->capture_default_str();
  c_synth->add_option("--size", synth.size, "image side in pixels")->capture_default_str();
  c_synth->add_flag("--with-depth", synth.with_depth, "also write <name>.depth.pgm depth maps");

  std::string root, manifest;
  auto* c_ingest = app.add_subcommand("ingest", "scan root/<class>/*.ppm|pgm into a manifest");
  c_ingest->add_option("--root", root, "dataset root")->required();
  c_ingest->add_option("--manifest", manifest, "manifest to write")->required();

  std::uint64_t split_seed = 0;
  std::optional<std::string> fractions;
  auto* c_split = app.add_subcommand("split", "assign train/val/test per class, in place");
  c_split->add_option("--manifest", manifest, "manifest to update")->required();
  c_split->add_option("--seed", split_seed, "split seed")->required();
  c_split->add_option("--fractions", fractions, "train,val,test fractions (default 0.8,0.1,0.1)");

  PreprocessArgs pre;
  auto* c_pre = app.add_subcommand("preprocess", "blur, segment, crop and resize every image");
  c_pre->add_option("--manifest", pre.manifest, "input manifest")->required();
  c_pre->add_option("--out", pre.out, "output directory (gets manifest.csv)")->required();
  c_pre->add_option("--config", pre.config, "config file");
  c_pre->add_flag("--use-depth", pre.use_depth, "AND the Otsu mask with the depth band");
  c_pre->add_option("--sigma", pre.sigma, "blur sigma (overrides data.sigma)");
  c_pre->add_option("--size", pre.size, "output size (overrides data.image_size)");

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "train a preset on the manifest's train split");
  c_train->add_option("--manifest", tr.manifest, "split manifest")->required();
  c_train->add_option("--model", tr.model, "mini-mobilenetv2 | mini-efficientnetb0")->required();
  c_train->add_option("--config", tr.config, "config file (defaults when omitted)");
  c_train->add_option("--out", tr.out, "checkpoint path; also writes .curves.csv and .meta")->required();
  c_train->add_option("--init", tr.init, "initialize from this checkpoint");
  c_train->add_flag("--freeze", tr.freeze, "train only the classifier (see model.unfreeze_last_block)");
  c_train->add_flag("--quiet", tr.quiet, "no per-epoch output");

  EvaluateArgs ev;
  auto* c_eval = app.add_subcommand("evaluate", "confusion matrix and metrics on one split");
  c_eval->add_option("--manifest", ev.manifest, "split manifest")->required();
  c_eval->add_option("--ckpt", ev.ckpt, "checkpoint")->required();
  c_eval->add_option("--split", ev.split, "train | val | test")->capture_default_str();
  c_eval->add_flag("--compare-paper", ev.compare_paper, "append the published reference rows");
  c_eval->add_option("--report", ev.report, "also write the report here");
  c_eval->add_option("--metrics", ev.metrics, "write key = value metrics here");

  std::string ckpt, image;
  auto* c_predict = app.add_subcommand("predict", "classify one image");
  c_predict->add_option("--ckpt", ckpt, "checkpoint")->required();
  c_predict->add_option("--image", image, "image file")->required();

  std::string gc_model;
  std::size_t gc_size = 16;
  std::uint64_t gc_seed = 7;
  auto* c_grad = app.add_subcommand("gradcheck", "finite-difference check of a preset (64-bit)");
  c_grad->add_option("--model", gc_model, "preset name")->required();
  c_grad->add_option("--size", gc_size, "input size")->capture_default_str();
  c_grad->add_option("--seed", gc_seed, "seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    const std::size_t threads = thread_cap();
    Eigen::setNbThreads(threads == 0 ? 1 : static_cast<int>(threads));
    if (*c_synth) return run_synth(synth);
    if (*c_ingest) return run_ingest(root, manifest);
    if (*c_split) return run_split(manifest, split_seed, fractions);
    if (*c_pre) return run_preprocess(pre);
    if (*c_train) return run_train(tr);
    if (*c_eval) return run_evaluate(ev);
    if (*c_predict) return run_predict(ckpt, image);
    if (*c_grad) return run_gradcheck(gc_model, gc_size, gc_seed);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}

}  // namespace olivine::cli
