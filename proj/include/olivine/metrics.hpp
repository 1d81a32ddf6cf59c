#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "olivine/error.hpp"
#include "olivine/train.hpp"

namespace olivine {

// Rows are true classes, columns are predictions.
struct ConfusionMatrix {
  std::size_t k = 0;
  std::vector<std::uint64_t> counts;

  explicit ConfusionMatrix(std::size_t classes = 2) : k(classes), counts(classes * classes, 0) {
    if (classes < 2) throw UsageError("confusion matrix needs K >= 2");
  }

  std::uint64_t& at(std::size_t truth, std::size_t pred) { return counts[truth * k + pred]; }
  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts[truth * k + pred]; }

  std::uint64_t total() const {
    std::uint64_t s = 0;
    for (auto c : counts) s += c;
    return s;
  }
  std::uint64_t trace() const {
    std::uint64_t s = 0;
    for (std::size_t i = 0; i < k; ++i) s += at(i, i);
    return s;
  }
  std::uint64_t row_sum(std::size_t r) const {
    std::uint64_t s = 0;
    for (std::size_t j = 0; j < k; ++j) s += at(r, j);
    return s;
  }
  std::uint64_t col_sum(std::size_t c) const {
    std::uint64_t s = 0;
    for (std::size_t i = 0; i < k; ++i) s += at(i, c);
    return s;
  }

  static ConfusionMatrix from_rows(const std::vector<std::vector<std::uint64_t>>& rows) {
    ConfusionMatrix m(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != rows.size()) throw ShapeError("confusion matrix must be square");
      for (std::size_t j = 0; j < rows.size(); ++j) m.at(i, j) = rows[i][j];
    }
    return m;
  }

  bool operator==(const ConfusionMatrix&) const = default;
};

inline ConfusionMatrix confusion(std::span<const std::size_t> predictions, std::span<const std::size_t> labels,
                                 std::size_t k) {
  if (predictions.size() != labels.size()) {
    throw UsageError("confusion: " + std::to_string(predictions.size()) + " predictions vs " +
                     std::to_string(labels.size()) + " labels");
  }
  ConfusionMatrix m(k);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= k || predictions[i] >= k) throw UsageError("confusion: class index out of range");
    ++m.at(labels[i], predictions[i]);
  }
  return m;
}

struct MetricsReport {
  ConfusionMatrix matrix;
  std::vector<std::string> class_names;
  std::uint64_t samples = 0;
  double accuracy = 0.0;
  std::vector<double> precision, recall, f1;
  double macro_precision = 0.0, macro_recall = 0.0, macro_f1 = 0.0;
};

namespace detail {
inline double safe_ratio(double num, double den) { return den == 0.0 ? 0.0 : num / den; }
}  // namespace detail

inline MetricsReport derive_metrics(const ConfusionMatrix& m, std::vector<std::string> class_names = {}) {
  const auto total = m.total();
  if (total == 0) throw DataError("metrics: confusion matrix is empty");
  if (class_names.empty()) {
    for (std::size_t i = 0; i < m.k; ++i) class_names.push_back("class" + std::to_string(i));
  }
  if (class_names.size() != m.k) throw UsageError("metrics: class name count does not match K");
  MetricsReport r;
  r.matrix = m;
  r.class_names = std::move(class_names);
  r.samples = total;
  r.accuracy = static_cast<double>(m.trace()) / static_cast<double>(total);
  for (std::size_t c = 0; c < m.k; ++c) {
    const double tp = static_cast<double>(m.at(c, c));
    const double p = detail::safe_ratio(tp, static_cast<double>(m.col_sum(c)));
    const double rc = detail::safe_ratio(tp, static_cast<double>(m.row_sum(c)));
    r.precision.push_back(p);
    r.recall.push_back(rc);
    r.f1.push_back(detail::safe_ratio(2.0 * p * rc, p + rc));
  }
  auto mean = [&](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  r.macro_precision = mean(r.precision);
  r.macro_recall = mean(r.recall);
  r.macro_f1 = mean(r.f1);
  return r;
}

inline constexpr const char* kCurvesHeader = "epoch,train_loss,train_acc,val_loss,val_acc";

inline std::string log_curves(std::span<const EpochRecord> history) {
  std::string out = std::string(kCurvesHeader) + "\n";
  char line[160];
  for (const auto& r : history) {
    std::snprintf(line, sizeof(line), "%zu,%.6f,%.6f,%.6f,%.6f\n", r.epoch, r.train_loss, r.train_acc, r.val_loss,
                  r.val_acc);
    out += line;
  }
  return out;
}

inline std::vector<EpochRecord> parse_curves(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  if (!std::getline(in, line) || line != kCurvesHeader) throw DataError("curves: missing header");
  std::vector<EpochRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    EpochRecord r;
    if (std::sscanf(line.c_str(), "%zu,%lf,%lf,%lf,%lf", &r.epoch, &r.train_loss, &r.train_acc, &r.val_loss,
                    &r.val_acc) != 5) {
      throw DataError("curves: malformed row '" + line + "'");
    }
    out.push_back(r);
  }
  return out;
}

// Published figures for display next to local results. Accuracy is a
// percentage, the rest are fractions.
struct PaperReference {
  const char* model;
  double accuracy_pct;
  double precision;
  double recall;
  double f1;
};

inline constexpr PaperReference kPaperMobileNetV2{"MobileNetV2", 92.8, 0.91, 0.93, 0.92};
inline constexpr PaperReference kPaperEfficientNetB0{"EfficientNetB0", 94.5, 0.94, 0.95, 0.94};
inline constexpr const char* kPaperRowLabel = "paper (private dataset — not comparable)";

inline std::string render_report(const MetricsReport& m, std::span<const PaperReference> reference = {},
                                 const std::string& title = "") {
  std::ostringstream out;
  char buf[256];
  if (!title.empty()) out << title << "\n";
  out << "samples: " << m.samples << "\n";
  out << "averaging: macro (unweighted mean over classes)\n\n";
  std::size_t w = 9;
  for (const auto& n : m.class_names) w = std::max(w, n.size());
  const int iw = static_cast<int>(w);

  std::snprintf(buf, sizeof(buf), "%-*s %9s %9s %9s %9s\n", iw, "class", "precision", "recall", "f1", "support");
  out << buf;
  for (std::size_t c = 0; c < m.matrix.k; ++c) {
    std::snprintf(buf, sizeof(buf), "%-*s %9.4f %9.4f %9.4f %9llu\n", iw, m.class_names[c].c_str(), m.precision[c],
                  m.recall[c], m.f1[c], static_cast<unsigned long long>(m.matrix.row_sum(c)));
    out << buf;
  }
  std::snprintf(buf, sizeof(buf), "%-*s %9.4f %9.4f %9.4f %9llu\n", iw, "macro", m.macro_precision, m.macro_recall,
                m.macro_f1, static_cast<unsigned long long>(m.samples));
  out << buf;

  out << "\nconfusion matrix (rows = true, columns = predicted)\n";
  std::snprintf(buf, sizeof(buf), "%-*s", iw, "");
  out << buf;
  for (const auto& n : m.class_names) {
    std::snprintf(buf, sizeof(buf), " %*s", iw, n.c_str());
    out << buf;
  }
  out << "\n";
  for (std::size_t r = 0; r < m.matrix.k; ++r) {
    std::snprintf(buf, sizeof(buf), "%-*s", iw, m.class_names[r].c_str());
    out << buf;
    for (std::size_t c = 0; c < m.matrix.k; ++c) {
      std::snprintf(buf, sizeof(buf), " %*llu", iw, static_cast<unsigned long long>(m.matrix.at(r, c)));
      out << buf;
    }
    out << "\n";
  }

  out << "\n";
  const char* row_fmt = "%-56s %10s %9s %9s %9s\n";
  std::snprintf(buf, sizeof(buf), row_fmt, "", "accuracy%", "precision", "recall", "f1");
  out << buf;
  char a[32], p[32], rc[32], f[32];
  std::snprintf(a, sizeof(a), "%.1f", 100.0 * m.accuracy);
  std::snprintf(p, sizeof(p), "%.2f", m.macro_precision);
  std::snprintf(rc, sizeof(rc), "%.2f", m.macro_recall);
  std::snprintf(f, sizeof(f), "%.2f", m.macro_f1);
  std::snprintf(buf, sizeof(buf), row_fmt, "this run", a, p, rc, f);
  out << buf;
  for (const auto& ref : reference) {
    std::snprintf(a, sizeof(a), "%.1f", ref.accuracy_pct);
    std::snprintf(p, sizeof(p), "%.2f", ref.precision);
    std::snprintf(rc, sizeof(rc), "%.2f", ref.recall);
    std::snprintf(f, sizeof(f), "%.2f", ref.f1);
    const std::string label = std::string(ref.model) + " " + kPaperRowLabel;
    // Pad by code points; the label holds one multi-byte dash.
    std::string padded = label;
    const std::size_t visible = label.size() - 2;
    if (visible < 56) padded.append(56 - visible, ' ');
    std::snprintf(buf, sizeof(buf), "%s %10s %9s %9s %9s\n", padded.c_str(), a, p, rc, f);
    out << buf;
  }
  if (!reference.empty()) {
    out << "\nReference figures come from a private olive corpus; whether their precision/recall\n"
           "were macro or weighted averages is not stated.\n";
  }
  return out.str();
}

// Flat key = value rendering for scripts.
inline std::string render_metrics_kv(const MetricsReport& m) {
  std::ostringstream out;
  char buf[128];
  auto put = [&](const std::string& key, double v) {
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    out << key << " = " << buf << "\n";
  };
  out << "samples = " << m.samples << "\n";
  put("accuracy", m.accuracy);
  put("macro_precision", m.macro_precision);
  put("macro_recall", m.macro_recall);
  put("macro_f1", m.macro_f1);
  for (std::size_t c = 0; c < m.matrix.k; ++c) {
    put("precision." + m.class_names[c], m.precision[c]);
    put("recall." + m.class_names[c], m.recall[c]);
    put("f1." + m.class_names[c], m.f1[c]);
  }
  for (std::size_t r = 0; r < m.matrix.k; ++r) {
    out << "confusion." << m.class_names[r] << " =";
    for (std::size_t c = 0; c < m.matrix.k; ++c) out << " " << m.matrix.at(r, c);
    out << "\n";
  }
  return out.str();
}

}  // namespace olivine
