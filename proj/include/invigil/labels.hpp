#pragma once

// In-memory label state for an annotation session. Every change is a
// LabelEvent with a sequence number assigned under a lock; the latest
// sequence number for a patch wins.

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "invigil/manifest.hpp"

namespace invigil {

struct LabelEvent {
  std::uint64_t sequence = 0;
  std::string patch_id;
  std::optional<int> label;  // nullopt clears
  std::string annotator;
  std::string timestamp;     // UTC, ISO 8601

  friend bool operator==(const LabelEvent&, const LabelEvent&) = default;
};

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900, tm.tm_mon + 1,
                tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<int>(ms));
  return buf;
}

inline nlohmann::json label_json(const std::optional<int>& label) {
  return label ? nlohmann::json(*label) : nlohmann::json(nullptr);
}

inline nlohmann::json event_json(const LabelEvent& e) {
  return {{"sequence", e.sequence},
          {"patch_id", e.patch_id},
          {"label", label_json(e.label)},
          {"annotator", e.annotator},
          {"timestamp", e.timestamp}};
}

inline LabelEvent event_from_json(const nlohmann::json& j) {
  LabelEvent e;
  e.sequence = j.at("sequence").get<std::uint64_t>();
  e.patch_id = j.at("patch_id").get<std::string>();
  if (!j.at("label").is_null()) e.label = j.at("label").get<int>();
  e.annotator = j.value("annotator", "");
  e.timestamp = j.value("timestamp", "");
  return e;
}

class LabelStore {
public:
  /// Starts from the manifest's labels; only its patch ids are accepted.
  explicit LabelStore(const DatasetManifest& manifest, std::filesystem::path event_log = {})
      : log_path_(std::move(event_log)) {
    for (const auto& r : manifest.records) {
      labels_[r.patch_id()] = r.label;
      exported_[r.patch_id()] = r.label;
    }
  }

  bool contains(const std::string& patch_id) const {
    std::lock_guard lock(mutex_);
    return labels_.count(patch_id) != 0;
  }

  /// Records a decision; throws std::out_of_range for unknown ids.
  LabelEvent apply(const std::string& patch_id, std::optional<int> label, std::string annotator) {
    if (label && *label != 0 && *label != 1) throw ConfigError("label must be 0, 1 or clear");
    std::lock_guard lock(mutex_);
    auto it = labels_.find(patch_id);
    if (it == labels_.end()) throw std::out_of_range("unknown patch id " + patch_id);
    LabelEvent e{++sequence_, patch_id, label, std::move(annotator), utc_timestamp()};
    it->second = label;
    last_sequence_[patch_id] = e.sequence;
    events_.push_back(e);
    if (!log_path_.empty()) {
      std::ofstream log(log_path_, std::ios::app);
      log << event_json(e).dump() << '\n';
    }
    return e;
  }

  std::optional<int> label(const std::string& patch_id) const {
    std::lock_guard lock(mutex_);
    return labels_.at(patch_id);
  }

  /// Sequence number of the decision currently in force, 0 if none.
  std::uint64_t sequence_of(const std::string& patch_id) const {
    std::lock_guard lock(mutex_);
    auto it = last_sequence_.find(patch_id);
    return it == last_sequence_.end() ? 0 : it->second;
  }

  std::vector<LabelEvent> events() const {
    std::lock_guard lock(mutex_);
    return events_;
  }

  std::map<std::string, std::optional<int>> snapshot() const {
    std::lock_guard lock(mutex_);
    return labels_;
  }

  /// The manifest with the current labels written in.
  DatasetManifest merged(DatasetManifest manifest) const {
    std::lock_guard lock(mutex_);
    for (auto& r : manifest.records) {
      auto it = labels_.find(r.patch_id());
      if (it != labels_.end()) r.label = it->second;
    }
    return manifest;
  }

  /// Patches whose label differs from the last export.
  std::size_t pending() const {
    std::lock_guard lock(mutex_);
    std::size_t n = 0;
    for (const auto& [id, label] : labels_) n += exported_.at(id) != label;
    return n;
  }

  void mark_exported() {
    std::lock_guard lock(mutex_);
    exported_ = labels_;
  }

private:
  mutable std::mutex mutex_;
  std::map<std::string, std::optional<int>> labels_;
  std::map<std::string, std::optional<int>> exported_;
  std::map<std::string, std::uint64_t> last_sequence_;
  std::vector<LabelEvent> events_;
  std::uint64_t sequence_ = 0;
  std::filesystem::path log_path_;
};

/// Applies events in sequence order onto `labels`; later sequence wins.
inline void replay(std::map<std::string, std::optional<int>>& labels, std::vector<LabelEvent> events) {
  std::sort(events.begin(), events.end(),
            [](const LabelEvent& a, const LabelEvent& b) { return a.sequence < b.sequence; });
  for (const auto& e : events) labels[e.patch_id] = e.label;
}

inline std::vector<LabelEvent> read_event_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ManifestError("cannot open event log " + path.string());
  std::vector<LabelEvent> events;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      events.push_back(event_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw ManifestError(path.string() + ": line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return events;
}

} // namespace invigil
