#pragma once

// Two-class confusion matrix and the per-class report derived from it.

#include <array>
#include <cstdint>
#include <cstdio>
#include <string>

#include <json.hpp>

#include "invigil/error.hpp"

namespace invigil {

inline constexpr int kNumClasses = 2;
inline constexpr std::array<const char*, kNumClasses> kClassNames = {"normal", "abnormal"};

struct ConfusionMatrix {
  // counts[actual][predicted]
  std::array<std::array<std::uint64_t, kNumClasses>, kNumClasses> counts{};

  void add(int actual, int predicted) {
    if (actual < 0 || actual >= kNumClasses || predicted < 0 || predicted >= kNumClasses) {
      throw ConfigError("confusion matrix: class out of range");
    }
    ++counts[static_cast<std::size_t>(actual)][static_cast<std::size_t>(predicted)];
  }
  std::uint64_t total() const {
    std::uint64_t n = 0;
    for (const auto& row : counts) {
      for (auto c : row) n += c;
    }
    return n;
  }
  std::uint64_t trace() const {
    std::uint64_t n = 0;
    for (std::size_t c = 0; c < kNumClasses; ++c) n += counts[c][c];
    return n;
  }
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

/// A rate that came out 0/0 is reported as 0 with its flag set.
struct Rate {
  double value = 0.0;
  bool degenerate = false;

  friend bool operator==(const Rate&, const Rate&) = default;
};

struct ClassMetrics {
  Rate precision;
  Rate sensitivity;
  Rate f1;
  std::uint64_t support = 0;

  friend bool operator==(const ClassMetrics&, const ClassMetrics&) = default;
};

struct Metrics {
  std::array<ClassMetrics, kNumClasses> classes;
  ClassMetrics weighted;  // support-weighted averages; support is the total
  Rate accuracy;

  friend bool operator==(const Metrics&, const Metrics&) = default;
};

namespace detail {

inline Rate ratio(double num, double den) {
  if (den == 0.0) return {0.0, true};
  return {num / den, false};
}

} // namespace detail

inline Metrics compute_metrics(const ConfusionMatrix& cm) {
  Metrics m;
  const auto total = cm.total();
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    const double tp = static_cast<double>(cm.counts[c][c]);
    double predicted = 0, actual = 0;
    for (std::size_t k = 0; k < kNumClasses; ++k) {
      predicted += static_cast<double>(cm.counts[k][c]);
      actual += static_cast<double>(cm.counts[c][k]);
    }
    auto& out = m.classes[c];
    out.precision = detail::ratio(tp, predicted);
    out.sensitivity = detail::ratio(tp, actual);
    out.f1 = detail::ratio(2.0 * out.precision.value * out.sensitivity.value,
                           out.precision.value + out.sensitivity.value);
    out.f1.degenerate |= out.precision.degenerate || out.sensitivity.degenerate;
    out.support = static_cast<std::uint64_t>(actual);
  }
  m.weighted.support = total;
  if (total == 0) {
    m.weighted.precision = m.weighted.sensitivity = m.weighted.f1 = {0.0, true};
    m.accuracy = {0.0, true};
    return m;
  }
  const double n = static_cast<double>(total);
  for (const auto& c : m.classes) {
    const double w = static_cast<double>(c.support) / n;
    m.weighted.precision.value += w * c.precision.value;
    m.weighted.sensitivity.value += w * c.sensitivity.value;
    m.weighted.f1.value += w * c.f1.value;
  }
  m.accuracy = detail::ratio(static_cast<double>(cm.trace()), n);
  return m;
}

/// Three rows (class 0, class 1, avg / total) of precision, sensitivity,
/// F1 and support, followed by the overall accuracy.
inline std::string format_metrics_table(const Metrics& m, int digits = 2) {
  std::string out;
  char line[160];
  std::snprintf(line, sizeof line, "%-14s%12s%12s%12s%10s\n", "", "precision", "sensitivity",
                "f1-score", "images");
  out += line;
  auto row = [&](const std::string& label, const ClassMetrics& c) {
    std::snprintf(line, sizeof line, "%-14s%12.*f%12.*f%12.*f%10llu\n", label.c_str(), digits,
                  c.precision.value, digits, c.sensitivity.value, digits, c.f1.value,
                  static_cast<unsigned long long>(c.support));
    out += line;
  };
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    row(std::to_string(c) + "(" + kClassNames[c] + ")", m.classes[c]);
  }
  row("avg / total", m.weighted);
  std::snprintf(line, sizeof line, "accuracy %.4f\n", m.accuracy.value);
  out += line;
  return out;
}

inline std::string format_confusion(const ConfusionMatrix& cm) {
  std::string out;
  char line[128];
  std::snprintf(line, sizeof line, "%-16s%12s%12s\n", "actual\\predicted", "0", "1");
  out += line;
  for (std::size_t a = 0; a < kNumClasses; ++a) {
    std::snprintf(line, sizeof line, "%-16s%12llu%12llu\n", (std::to_string(a) + "(" + kClassNames[a] + ")").c_str(),
                  static_cast<unsigned long long>(cm.counts[a][0]),
                  static_cast<unsigned long long>(cm.counts[a][1]));
    out += line;
  }
  return out;
}

inline nlohmann::json rate_json(const Rate& r) { return {{"value", r.value}, {"degenerate", r.degenerate}}; }

inline nlohmann::json class_json(const ClassMetrics& c) {
  return {{"precision", rate_json(c.precision)},
          {"sensitivity", rate_json(c.sensitivity)},
          {"f1", rate_json(c.f1)},
          {"support", c.support}};
}

inline nlohmann::json metrics_json(const ConfusionMatrix& cm, const Metrics& m) {
  nlohmann::json doc;
  doc["confusion"] = {{cm.counts[0][0], cm.counts[0][1]}, {cm.counts[1][0], cm.counts[1][1]}};
  doc["classes"] = nlohmann::json::array();
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    auto entry = class_json(m.classes[c]);
    entry["class"] = c;
    entry["name"] = kClassNames[c];
    doc["classes"].push_back(entry);
  }
  doc["weighted"] = class_json(m.weighted);
  doc["accuracy"] = rate_json(m.accuracy);
  doc["total"] = cm.total();
  return doc;
}

} // namespace invigil
