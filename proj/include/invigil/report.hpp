#pragma once

// Per-frame summary of model predictions for a human reviewer.

#include <algorithm>
#include <cstdio>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "invigil/manifest.hpp"
#include "invigil/training.hpp"

namespace invigil {

inline constexpr double kDefaultFlagThreshold = 0.5;

struct FrameReport {
  std::string frame_id;
  std::map<int, std::size_t> abnormal_by_person;  // persons with >= 1 abnormal patch
  std::size_t patch_count = 0;
  std::size_t abnormal_patches = 0;
  double max_abnormal_probability = 0.0;
  bool flagged = false;
};

/// One row per distinct frame, sorted by max abnormal probability
/// (descending, ties by frame id); flagged iff that maximum >= threshold.
/// `predictions` is aligned with `records`.
inline std::vector<FrameReport> build_report(std::span<const ManifestRecord> records,
                                             std::span<const Prediction> predictions,
                                             double threshold = kDefaultFlagThreshold) {
  if (records.size() != predictions.size()) {
    throw ShapeError("build_report: " + std::to_string(records.size()) + " records but " +
                     std::to_string(predictions.size()) + " predictions");
  }
  std::map<std::string, FrameReport> frames;
  for (std::size_t i = 0; i < records.size(); ++i) {
    auto& row = frames[records[i].frame_id];
    row.frame_id = records[i].frame_id;
    ++row.patch_count;
    const double p = predictions[i].probabilities[1];
    row.max_abnormal_probability = std::max(row.max_abnormal_probability, p);
    if (predictions[i].label == 1) {
      ++row.abnormal_patches;
      ++row.abnormal_by_person[records[i].person];
    }
  }
  std::vector<FrameReport> rows;
  for (auto& [id, row] : frames) {
    row.flagged = row.max_abnormal_probability >= threshold;
    rows.push_back(std::move(row));
  }
  std::stable_sort(rows.begin(), rows.end(), [](const FrameReport& a, const FrameReport& b) {
    return a.max_abnormal_probability > b.max_abnormal_probability;
  });
  return rows;
}

inline std::string format_report(const std::vector<FrameReport>& rows, double threshold) {
  std::size_t flagged = 0, abnormal = 0;
  for (const auto& r : rows) {
    flagged += r.flagged;
    abnormal += r.abnormal_patches;
  }
  std::string out;
  char line[256];
  std::snprintf(line, sizeof line, "frames %zu  flagged %zu  abnormal patches %zu  threshold %.3f\n",
                rows.size(), flagged, abnormal, threshold);
  out += line;
  std::snprintf(line, sizeof line, "%-24s %-7s %9s %8s %9s  %s\n", "frame", "flagged", "max_p", "patches",
                "abnormal", "abnormal by person");
  out += line;
  for (const auto& r : rows) {
    std::string persons;
    for (const auto& [person, n] : r.abnormal_by_person) {
      persons += (persons.empty() ? "" : " ") + std::to_string(person) + ":" + std::to_string(n);
    }
    std::snprintf(line, sizeof line, "%-24s %-7s %9.4f %8zu %9zu  %s\n", r.frame_id.c_str(),
                  r.flagged ? "yes" : "no", r.max_abnormal_probability, r.patch_count, r.abnormal_patches,
                  persons.empty() ? "-" : persons.c_str());
    out += line;
  }
  return out;
}

inline nlohmann::json report_row_json(const FrameReport& r) {
  nlohmann::json persons = nlohmann::json::object();
  for (const auto& [person, n] : r.abnormal_by_person) persons[std::to_string(person)] = n;
  return {{"frame_id", r.frame_id},
          {"flagged", r.flagged},
          {"max_abnormal_probability", r.max_abnormal_probability},
          {"patch_count", r.patch_count},
          {"abnormal_patches", r.abnormal_patches},
          {"abnormal_by_person", persons}};
}

} // namespace invigil
