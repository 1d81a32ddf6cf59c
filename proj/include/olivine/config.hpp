#pragma once

#include <charconv>
#include <cstdint>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "olivine/augment.hpp"
#include "olivine/dataset.hpp"
#include "olivine/error.hpp"
#include "olivine/model.hpp"
#include "olivine/preprocess.hpp"
#include "olivine/train.hpp"

namespace olivine {

struct Config {
  PreprocessOptions preprocess;
  std::size_t in_channels = 3;
  SplitSpec split;
  bool augment = true;
  AugmentConfig aug;
  TrainConfig train;
  BatchNormOptions bn;
  bool unfreeze_last_block = false;

  std::size_t image_size() const { return preprocess.out_size; }

  void validate() const {
    if (preprocess.out_size < 16) throw UsageError("data.image_size must be >= 16");
    if (in_channels != 1 && in_channels != 3) throw UsageError("data.in_channels must be 1 or 3");
    if (!(preprocess.sigma > 0.0)) throw UsageError("data.sigma must be > 0");
    if (!(preprocess.crop_margin >= 0.0 && preprocess.crop_margin < 0.5)) {
      throw UsageError("data.crop_margin must lie in [0, 0.5)");
    }
    if (preprocess.depth_near_mm > preprocess.depth_far_mm) {
      throw UsageError("data.depth_near_mm must not exceed data.depth_far_mm");
    }
    split.validate();
    aug.validate();
    train.validate();
    if (!(bn.momentum >= 0.0 && bn.momentum < 1.0)) throw UsageError("model.bn_momentum must lie in [0, 1)");
    if (!(bn.epsilon > 0.0)) throw UsageError("model.bn_epsilon must be > 0");
  }
};

namespace config_detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename N>
bool parse_number(std::string_view text, N& out) {
  const char* first = text.data();
  const char* last = text.data() + text.size();
  if (first != last && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last && first != last;
}

inline bool parse_bool(std::string_view text, bool& out) {
  if (text == "true" || text == "1" || text == "yes" || text == "on") return out = true, true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return out = false, true;
  return false;
}

inline std::string format_double(double v) {
  std::ostringstream s;
  s << v;
  return s.str();
}

}  // namespace config_detail

inline std::string otsu_source_name(OtsuSource s) {
  switch (s) {
    case OtsuSource::Gray: return "gray";
    case OtsuSource::Red: return "red";
    case OtsuSource::Green: return "green";
    case OtsuSource::Blue: return "blue";
  }
  return "gray";
}

inline OtsuSource parse_otsu_source(std::string_view s) {
  if (s == "gray") return OtsuSource::Gray;
  if (s == "red") return OtsuSource::Red;
  if (s == "green") return OtsuSource::Green;
  if (s == "blue") return OtsuSource::Blue;
  throw UsageError("otsu source must be gray, red, green or blue");
}

struct ConfigKey {
  std::string key;
  std::string help;
  std::function<bool(Config&, std::string_view)> set;  // false: unparseable
  std::function<std::string(const Config&)> get;
};

inline const std::vector<ConfigKey>& config_keys() {
  using namespace config_detail;
  auto real = [](std::string key, std::string help, auto member) {
    return ConfigKey{std::move(key), std::move(help),
                     [member](Config& c, std::string_view v) { return parse_number(v, member(c)); },
                     [member](const Config& c) { return format_double(member(const_cast<Config&>(c))); }};
  };
  auto integer = [](std::string key, std::string help, auto member) {
    return ConfigKey{std::move(key), std::move(help),
                     [member](Config& c, std::string_view v) { return parse_number(v, member(c)); },
                     [member](const Config& c) { return std::to_string(member(const_cast<Config&>(c))); }};
  };
  auto boolean = [](std::string key, std::string help, auto member) {
    return ConfigKey{std::move(key), std::move(help),
                     [member](Config& c, std::string_view v) { return parse_bool(v, member(c)); },
                     [member](const Config& c) { return std::string(member(const_cast<Config&>(c)) ? "true" : "false"); }};
  };
  static const std::vector<ConfigKey> keys = {
      integer("data.image_size", "square network input size in pixels",
              [](Config& c) -> std::size_t& { return c.preprocess.out_size; }),
      integer("data.in_channels", "3 = color, 1 = grayscale network input",
              [](Config& c) -> std::size_t& { return c.in_channels; }),
      real("data.sigma", "Gaussian blur sigma before segmentation",
           [](Config& c) -> double& { return c.preprocess.sigma; }),
      real("data.crop_margin", "bounding-box margin as a fraction of its size",
           [](Config& c) -> double& { return c.preprocess.crop_margin; }),
      ConfigKey{"data.otsu_source", "channel thresholded by Otsu: gray, red, green or blue",
                [](Config& c, std::string_view v) {
                  try {
                    c.preprocess.otsu_source = parse_otsu_source(v);
                    return true;
                  } catch (const UsageError&) {
                    return false;
                  }
                },
                [](const Config& c) { return otsu_source_name(c.preprocess.otsu_source); }},
      boolean("data.use_depth", "AND the Otsu mask with the depth band mask",
              [](Config& c) -> bool& { return c.preprocess.use_depth; }),
      integer("data.depth_near_mm", "nearest depth kept as foreground (mm)",
              [](Config& c) -> std::uint16_t& { return c.preprocess.depth_near_mm; }),
      integer("data.depth_far_mm", "farthest depth kept as foreground (mm)",
              [](Config& c) -> std::uint16_t& { return c.preprocess.depth_far_mm; }),
      real("data.f_train", "train fraction per class", [](Config& c) -> double& { return c.split.f_train; }),
      real("data.f_val", "validation fraction per class", [](Config& c) -> double& { return c.split.f_val; }),
      real("data.f_test", "test fraction per class", [](Config& c) -> double& { return c.split.f_test; }),
      boolean("aug.enabled", "apply on-the-fly augmentation to training batches",
              [](Config& c) -> bool& { return c.augment; }),
      real("aug.rotation_max_deg", "rotation drawn from [-max, +max] degrees",
           [](Config& c) -> double& { return c.aug.rotation_max_deg; }),
      real("aug.p_flip_h", "probability of a horizontal flip",
           [](Config& c) -> double& { return c.aug.p_flip_h; }),
      real("aug.p_flip_v", "probability of a vertical flip",
           [](Config& c) -> double& { return c.aug.p_flip_v; }),
      integer("aug.brightness_max_delta", "brightness offset drawn from [-max, +max]",
              [](Config& c) -> int& { return c.aug.brightness_max_delta; }),
      real("train.learning_rate", "Adam learning rate",
           [](Config& c) -> double& { return c.train.learning_rate; }),
      integer("train.max_epochs", "epoch cap", [](Config& c) -> std::size_t& { return c.train.max_epochs; }),
      integer("train.batch_size", "mini-batch size", [](Config& c) -> std::size_t& { return c.train.batch_size; }),
      integer("train.early_stop_patience", "epochs without validation improvement before stopping",
              [](Config& c) -> std::size_t& { return c.train.early_stop_patience; }),
      integer("train.seed", "seed for initialization, shuffling and augmentation",
              [](Config& c) -> std::uint64_t& { return c.train.seed; }),
      real("model.bn_momentum", "running-statistics momentum",
           [](Config& c) -> double& { return c.bn.momentum; }),
      real("model.bn_epsilon", "batch-norm variance epsilon",
           [](Config& c) -> double& { return c.bn.epsilon; }),
      boolean("model.unfreeze_last_block", "with --freeze, also train block5 and the head convolution",
              [](Config& c) -> bool& { return c.unfreeze_last_block; }),
  };
  return keys;
}

// Flat `key = value` text with # comments. Unknown keys and bad values are
// errors naming the line; a repeated key wins and is reported on `warnings`.
inline Config parse_config(std::string_view text, std::ostream* warnings = &std::cerr) {
  Config cfg;
  std::map<std::string, std::size_t> seen;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = "config line " + std::to_string(line_no);
    if (eq == std::string_view::npos) throw UsageError(where + ": expected 'key = value'");
    const std::string key(config_detail::trim(line.substr(0, eq)));
    const auto value = config_detail::trim(line.substr(eq + 1));
    const auto& keys = config_keys();
    const auto it = std::find_if(keys.begin(), keys.end(), [&](const ConfigKey& k) { return k.key == key; });
    if (it == keys.end()) throw UsageError(where + ": unknown key '" + key + "'");
    if (!it->set(cfg, value)) throw UsageError(where + ": cannot parse value '" + std::string(value) + "' for " + key);
    if (auto [prev, fresh] = seen.try_emplace(key, line_no); !fresh) {
      if (warnings) {
        *warnings << "warning: " << where << ": '" << key << "' repeats line " << prev->second << "; last value wins\n";
      }
      prev->second = line_no;
    }
  }
  cfg.validate();
  return cfg;
}

inline Config load_config(const std::filesystem::path& path, std::ostream* warnings = &std::cerr) {
  const auto bytes = read_file(path);
  try {
    return parse_config(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()), warnings);
  } catch (const UsageError& e) {
    throw UsageError(path.string() + ": " + e.what());
  }
}

inline std::string render_config(const Config& cfg) {
  std::string out;
  for (const auto& k : config_keys()) out += k.key + " = " + k.get(cfg) + "\n";
  return out;
}

// One line per key: name, default, description.
inline std::string config_help() {
  const Config defaults;
  std::string out = "Config keys (file given with --config; defaults shown):\n";
  for (const auto& k : config_keys()) {
    std::string line = "  " + k.key + " = " + k.get(defaults);
    if (line.size() < 40) line.append(40 - line.size(), ' ');
    out += line + "  " + k.help + "\n";
  }
  return out;
}

}  // namespace olivine
