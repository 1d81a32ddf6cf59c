#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "olivine/error.hpp"
#include "olivine/image.hpp"
#include "olivine/pnm.hpp"
#include "olivine/preprocess.hpp"
#include "olivine/rng.hpp"
#include "olivine/tensor.hpp"

namespace olivine {

enum class Split { Unset, Train, Val, Test };

inline std::string_view split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
    case Split::Unset: break;
  }
  return "";
}

inline Split parse_split(std::string_view s) {
  if (s.empty()) return Split::Unset;
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw DataError("unknown split tag '" + std::string(s) + "'");
}

struct ManifestRecord {
  std::string path;
  std::string class_name;
  std::size_t class_index = 0;
  Split split = Split::Unset;

  bool operator==(const ManifestRecord&) const = default;
};

using Manifest = std::vector<ManifestRecord>;

// Class names ordered by class index.
inline std::vector<std::string> class_names(const Manifest& records) {
  std::map<std::size_t, std::string> by_index;
  for (const auto& r : records) by_index.emplace(r.class_index, r.class_name);
  std::vector<std::string> names;
  for (auto& [i, n] : by_index) names.push_back(n);
  return names;
}

inline std::size_t count_split(const Manifest& records, Split split) {
  return static_cast<std::size_t>(
      std::count_if(records.begin(), records.end(), [&](const auto& r) { return r.split == split; }));
}

inline bool is_image_file(const std::filesystem::path& p) {
  const auto name = p.filename().string();
  if (name.ends_with(".depth.pgm")) return false;
  const auto ext = p.extension().string();
  return ext == ".ppm" || ext == ".pgm" || ext == ".pnm";
}

// Companion depth map path for an image: foo.ppm -> foo.depth.pgm
inline std::filesystem::path depth_path_for(const std::filesystem::path& image) {
  auto p = image;
  p.replace_extension(".depth.pgm");
  return p;
}

// One record per image under root/<class>/; classes in lexicographic order.
inline Manifest scan_directory(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw DataError("dataset root is not a directory: " + root.string());
  std::vector<std::string> classes;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory()) classes.push_back(e.path().filename().string());
  }
  std::sort(classes.begin(), classes.end());
  if (classes.size() < 2) throw DataError("need >= 2 classes under " + root.string());
  Manifest records;
  for (std::size_t ci = 0; ci < classes.size(); ++ci) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(root / classes[ci])) {
      if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw DataError("class '" + classes[ci] + "' has no images");
    for (const auto& f : files) {
      (void)load_image(f);
      records.push_back({f.generic_string(), classes[ci], ci, Split::Unset});
    }
  }
  return records;
}

struct SplitSpec {
  double f_train = 0.8;
  double f_val = 0.1;
  double f_test = 0.1;

  void validate() const {
    if (f_train < 0 || f_val < 0 || f_test < 0) throw UsageError("split fractions must be >= 0");
    if (std::abs(f_train + f_val + f_test - 1.0) > 1e-9) throw UsageError("split fractions must sum to 1");
  }
};

struct SplitCounts {
  std::size_t train = 0, val = 0, test = 0;
  bool operator==(const SplitCounts&) const = default;
};

// floor-based counts, then one record moved from train into an empty val or
// test split.
inline SplitCounts split_counts(std::size_t n, const SplitSpec& spec) {
  auto portion = [&](double f) {
    return static_cast<std::size_t>(std::floor(static_cast<double>(n) * f + 1e-9));
  };
  SplitCounts c;
  c.train = std::min(portion(spec.f_train), n);
  c.val = std::min(portion(spec.f_val), n - c.train);
  c.test = n - c.train - c.val;
  if (c.val == 0 && c.train > 0) {
    --c.train;
    ++c.val;
  }
  if (c.test == 0 && c.train > 0) {
    --c.train;
    ++c.test;
  }
  return c;
}

// Per class: order by path, shuffle with an Rng derived from (seed, class),
// and assign train/val/test by split_counts. Independent of input order.
inline Manifest stratified_split(Manifest records, const SplitSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::map<std::size_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < records.size(); ++i) by_class[records[i].class_index].push_back(i);
  for (auto& [cls, idx] : by_class) {
    if (idx.size() < 3) {
      throw DataError("class '" + records[idx.front()].class_name + "' has fewer than 3 records");
    }
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return records[a].path < records[b].path; });
    Rng rng = Rng::derive({seed, cls});
    rng.shuffle(std::span(idx));
    const auto c = split_counts(idx.size(), spec);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      records[idx[k]].split = k < c.train ? Split::Train : (k < c.train + c.val ? Split::Val : Split::Test);
    }
  }
  return records;
}

inline constexpr std::string_view kManifestHeader = "path,class_name,class_index,split";

inline std::string write_manifest(const Manifest& records) {
  std::string out(kManifestHeader);
  out += '\n';
  for (const auto& r : records) {
    for (const auto* field : {&r.path, &r.class_name}) {
      if (field->find_first_of(",\n\r") != std::string::npos) {
        throw DataError("manifest field contains a comma or newline: " + *field);
      }
    }
    out += r.path + ',' + r.class_name + ',' + std::to_string(r.class_index) + ',' +
           std::string(split_name(r.split)) + '\n';
  }
  return out;
}

inline Manifest read_manifest(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    lines.push_back(text.substr(pos, end - pos));
    pos = end + 1;
  }
  if (lines.empty() || lines.front() != kManifestHeader) throw DataError("manifest: missing header");
  Manifest records;
  for (std::size_t ln = 1; ln < lines.size(); ++ln) {
    const auto line = lines[ln];
    if (line.empty()) continue;
    std::vector<std::string_view> fields;
    std::size_t start = 0;
    for (;;) {
      const auto comma = line.find(',', start);
      fields.push_back(line.substr(start, comma == std::string_view::npos ? line.npos : comma - start));
      if (comma == std::string_view::npos) break;
      start = comma + 1;
    }
    const std::string where = "manifest line " + std::to_string(ln + 1);
    if (fields.size() != 4) throw DataError(where + ": expected 4 fields");
    ManifestRecord r;
    r.path = std::string(fields[0]);
    r.class_name = std::string(fields[1]);
    if (r.path.empty() || r.class_name.empty()) throw DataError(where + ": empty path or class name");
    if (fields[2].empty() || fields[2].find_first_not_of("0123456789") != std::string_view::npos) {
      throw DataError(where + ": malformed class index");
    }
    r.class_index = std::stoul(std::string(fields[2]));
    try {
      r.split = parse_split(fields[3]);
    } catch (const DataError& e) {
      throw DataError(where + ": " + e.what());
    }
    records.push_back(std::move(r));
  }
  // Indices must be contiguous and agree with the sorted class-name order.
  std::map<std::size_t, std::string> by_index;
  for (const auto& r : records) {
    auto [it, inserted] = by_index.emplace(r.class_index, r.class_name);
    if (!inserted && it->second != r.class_name) {
      throw DataError("manifest: class index " + std::to_string(r.class_index) + " used for two names");
    }
  }
  std::set<std::string> names;
  for (const auto& [i, n] : by_index) names.insert(n);
  if (names.size() != by_index.size()) throw DataError("manifest: class name mapped to two indices");
  std::size_t expect = 0;
  auto name_it = names.begin();
  for (const auto& [i, n] : by_index) {
    if (i != expect++) throw DataError("manifest: non-contiguous class indices");
    if (n != *name_it++) throw DataError("manifest: class indices do not follow sorted class names");
  }
  return records;
}

inline Manifest load_manifest(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return read_manifest(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

inline void save_manifest(const std::filesystem::path& path, const Manifest& records) {
  write_text_file(path, write_manifest(records));
}

struct Batch {
  Tensor<float> inputs;                  // [B x C x H x W]
  std::vector<std::size_t> labels;       // class indices
  std::vector<std::size_t> record_ids;   // positions in the source manifest
};

using ImageLoader = std::function<Image(const ManifestRecord&)>;
// (image, record, position in this epoch's order) -> transformed image
using SampleHook = std::function<Image(Image, const ManifestRecord&, std::size_t)>;

inline Image load_record_image(const ManifestRecord& r) { return load_image(r.path); }

// Walks one split in batches. The train split is shuffled with epoch_seed;
// val and test keep manifest order. The last batch may be partial.
class BatchIterator {
 public:
  BatchIterator(const Manifest& records, Split split, std::size_t batch_size, std::uint64_t epoch_seed,
                std::vector<SampleHook> hooks = {}, ImageLoader loader = load_record_image)
      : records_(&records), batch_size_(batch_size), hooks_(std::move(hooks)), loader_(std::move(loader)) {
    if (batch_size == 0) throw UsageError("batch size must be >= 1");
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (records[i].split == split) order_.push_back(i);
    }
    if (order_.empty()) throw DataError("split '" + std::string(split_name(split)) + "' is empty");
    if (split == Split::Train) {
      Rng rng(epoch_seed);
      rng.shuffle(std::span(order_));
    }
  }

  std::size_t batch_count() const { return (order_.size() + batch_size_ - 1) / batch_size_; }
  std::span<const std::size_t> order() const { return order_; }

  std::optional<Batch> next() {
    if (cursor_ >= order_.size()) return std::nullopt;
    const std::size_t end = std::min(order_.size(), cursor_ + batch_size_);
    Batch batch;
    std::size_t plane = 0;
    for (std::size_t pos = cursor_; pos < end; ++pos) {
      const auto& rec = (*records_)[order_[pos]];
      Image img = loader_(rec);
      for (const auto& hook : hooks_) img = hook(std::move(img), rec, pos);
      if (pos == cursor_) {
        batch.inputs = Tensor<float>({end - cursor_, img.channels, img.height, img.width});
        plane = img.channels * img.height * img.width;
      } else if (img.channels != batch.inputs.dim(1) || img.height != batch.inputs.dim(2) ||
                 img.width != batch.inputs.dim(3)) {
        throw DataError(rec.path + ": image size differs from the rest of its batch");
      }
      normalize_into(img, batch.inputs.data() + (pos - cursor_) * plane);
      batch.labels.push_back(rec.class_index);
      batch.record_ids.push_back(order_[pos]);
    }
    cursor_ = end;
    return batch;
  }

 private:
  const Manifest* records_;
  std::size_t batch_size_;
  std::vector<SampleHook> hooks_;
  ImageLoader loader_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

// ---------------------------------------------------------------------------
// Synthetic five-class benchmark.

inline const std::array<std::string, 5>& synthetic_classes() {
  static const std::array<std::string, 5> names{"cross", "ellipse", "rectangle", "ring", "triangle"};
  return names;
}

namespace detail {

inline double gray_of(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

// Is (dx, dy), relative to the shape centre, inside the shape?
inline bool shape_contains(const std::string& shape, double dx, double dy, double rx, double ry) {
  const double u = dx / rx, v = dy / ry;
  if (shape == "ellipse") return u * u + v * v <= 1.0;
  if (shape == "ring") {
    const double d = u * u + v * v;
    return d <= 1.0 && d >= 0.55 * 0.55;
  }
  if (shape == "rectangle") return std::abs(u) <= 0.85 && std::abs(v) <= 0.85;
  if (shape == "cross") {
    return (std::abs(u) <= 1.0 && std::abs(v) <= 0.3) || (std::abs(v) <= 1.0 && std::abs(u) <= 0.3);
  }
  if (shape == "triangle") {
    // Apex up at v = -1, base at v = 0.8 spanning u in [-0.95, 0.95].
    if (v < -1.0 || v > 0.8) return false;
    const double half = 0.95 * (v + 1.0) / 1.8;
    return std::abs(u) <= half;
  }
  throw UsageError("unknown synthetic shape " + shape);
}

}  // namespace detail

struct SyntheticSample {
  Image image;
  DepthMap depth;
};

// Renders one sample: a coloured shape on a lighter plain background with
// jittered position (+-10%), scale (+-20%), colours and Gaussian pixel noise
// (sigma 8, clipped at 3 sigma).
inline SyntheticSample render_synthetic(std::size_t class_index, std::size_t size, Rng& rng) {
  const auto& shape = synthetic_classes().at(class_index);
  const double s = static_cast<double>(size);
  const double bg_level = rng.uniform(170.0, 230.0);
  std::array<double, 3> bg{};
  for (auto& v : bg) v = std::clamp(bg_level + rng.uniform(-10.0, 10.0), 0.0, 255.0);
  const double bg_gray = detail::gray_of(bg[0], bg[1], bg[2]);
  std::array<double, 3> fg{};
  do {
    for (auto& v : fg) v = rng.uniform(0.0, 255.0);
  } while (detail::gray_of(fg[0], fg[1], fg[2]) > bg_gray - 90.0);
  const double cx = s / 2.0 + rng.uniform(-0.1, 0.1) * s;
  const double cy = s / 2.0 + rng.uniform(-0.1, 0.1) * s;
  const double base = 0.3 * s;
  const double rx = base * rng.uniform(0.8, 1.2);
  const double ry = base * rng.uniform(0.8, 1.2);

  SyntheticSample out{Image(size, size, 3), DepthMap(size, size, 600)};
  Mask inside(size, size);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const bool in = detail::shape_contains(shape, static_cast<double>(x) + 0.5 - cx,
                                             static_cast<double>(y) + 0.5 - cy, rx, ry);
      inside.set(x, y, in);
      const auto& base_color = in ? fg : bg;
      for (std::size_t c = 0; c < 3; ++c) {
        const double noise = std::clamp(8.0 * rng.normal(), -24.0, 24.0);
        out.image.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::floor(base_color[c] + noise + 0.5), 0.0, 255.0));
      }
      if (in) out.depth.depths[y * size + x] = 350;
    }
  }

  // Segmentability: every shape pixel is >= 30 gray levels from the background mean.
  const Image gray = to_gray(out.image);
  double bg_sum = 0.0;
  std::size_t bg_n = 0;
  for (std::size_t i = 0; i < size * size; ++i) {
    if (!inside.bits[i]) {
      bg_sum += gray.pixels[i];
      ++bg_n;
    }
  }
  const double bg_mean = bg_n ? bg_sum / static_cast<double>(bg_n) : bg_gray;
  for (std::size_t i = 0; i < size * size; ++i) {
    if (inside.bits[i] && std::abs(gray.pixels[i] - bg_mean) < 30.0) {
      throw NumericError("synthetic generator produced an unsegmentable pixel");
    }
  }
  return out;
}

// Writes root/<class>/<class>_NNNN.ppm (plus .depth.pgm companions when
// with_depth) and root/manifest.csv with unset splits.
inline Manifest generate_synthetic(const std::filesystem::path& root, std::size_t n_per_class,
                                   std::size_t image_size, std::uint64_t seed, bool with_depth = false) {
  namespace fs = std::filesystem;
  if (n_per_class < 3) throw UsageError("synthetic: need at least 3 images per class");
  if (image_size < 16) throw UsageError("synthetic: image size must be >= 16");
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec || !fs::is_directory(root)) throw DataError("cannot create dataset root " + root.string());
  Manifest records;
  const auto& names = synthetic_classes();
  for (std::size_t ci = 0; ci < names.size(); ++ci) {
    const fs::path dir = root / names[ci];
    fs::create_directories(dir, ec);
    if (ec) throw DataError("cannot create " + dir.string());
    for (std::size_t i = 0; i < n_per_class; ++i) {
      Rng rng = Rng::derive({seed, ci, i});
      const auto sample = render_synthetic(ci, image_size, rng);
      char name[64];
      std::snprintf(name, sizeof(name), "%s_%04zu.ppm", names[ci].c_str(), i);
      const fs::path file = dir / name;
      save_image(file, sample.image);
      if (with_depth) write_file(depth_path_for(file), write_depth(sample.depth));
      records.push_back({file.generic_string(), names[ci], ci, Split::Unset});
    }
  }
  save_manifest(root / "manifest.csv", records);
  return records;
}

}  // namespace olivine
