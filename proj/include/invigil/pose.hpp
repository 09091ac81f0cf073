#pragma once

// Body keypoints in the 18-joint COCO layout written by the external pose
// tool: one JSON file per frame holding a "people" array, each person a flat
// list of 18 (x, y, confidence) triples.

#include <array>
#include <cmath>
#include <initializer_list>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "invigil/error.hpp"

namespace invigil {

inline constexpr int kJointCount = 18;
inline constexpr std::size_t kKeypointValues = kJointCount * 3;

struct Joint {
  enum : int {
    nose = 0,
    neck = 1,
    right_shoulder = 2,
    right_elbow = 3,
    right_wrist = 4,
    left_shoulder = 5,
    left_elbow = 6,
    left_wrist = 7,
    right_hip = 8,
    right_knee = 9,
    right_ankle = 10,
    left_hip = 11,
    left_knee = 12,
    left_ankle = 13,
    right_eye = 14,
    left_eye = 15,
    right_ear = 16,
    left_ear = 17,
  };
};

inline constexpr std::array<std::string_view, kJointCount> kJointNames = {
    "nose",      "neck",       "right_shoulder", "right_elbow", "right_wrist", "left_shoulder",
    "left_elbow", "left_wrist", "right_hip",      "right_knee",  "right_ankle", "left_hip",
    "left_knee", "left_ankle", "right_eye",      "left_eye",    "right_ear",   "left_ear"};

inline std::string_view joint_name(int joint) {
  if (joint < 0 || joint >= kJointCount) throw ConfigError("joint id out of range: " + std::to_string(joint));
  return kJointNames[static_cast<std::size_t>(joint)];
}

struct Keypoint {
  double x = 0.0;
  double y = 0.0;
  double confidence = 0.0;  // 0 means not detected

  bool missing() const noexcept { return confidence == 0.0; }
  friend bool operator==(const Keypoint&, const Keypoint&) = default;
};

struct Skeleton {
  int person_index = 0;
  std::array<Keypoint, kJointCount> keypoints{};

  friend bool operator==(const Skeleton&, const Skeleton&) = default;
};

/// Newer tool versions name the list "pose_keypoints_2d", older ones
/// "pose_keypoints"; both are accepted.
inline std::vector<Skeleton> parse_keypoints(std::string_view content) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(content.begin(), content.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw KeypointParseError(std::string("keypoint file is not valid JSON: ") + e.what());
  }
  if (!doc.is_object() || !doc.contains("people") || !doc["people"].is_array()) {
    throw KeypointParseError("keypoint file has no \"people\" array");
  }
  std::vector<Skeleton> people;
  const auto& list = doc["people"];
  for (std::size_t i = 0; i < list.size(); ++i) {
    const auto where = "person " + std::to_string(i);
    const auto& person = list[i];
    if (!person.is_object()) throw KeypointParseError(where + ": entry is not an object");
    const nlohmann::json* flat = nullptr;
    for (const char* key : {"pose_keypoints_2d", "pose_keypoints"}) {
      if (person.contains(key)) {
        flat = &person[key];
        break;
      }
    }
    if (!flat) throw KeypointParseError(where + ": missing pose_keypoints_2d");
    if (!flat->is_array()) throw KeypointParseError(where + ": keypoint list is not an array");
    if (flat->size() != kKeypointValues) {
      throw KeypointParseError(where + ": expected " + std::to_string(kKeypointValues) +
                               " numbers, got " + std::to_string(flat->size()));
    }
    Skeleton skeleton;
    skeleton.person_index = static_cast<int>(i);
    for (std::size_t j = 0; j < static_cast<std::size_t>(kJointCount); ++j) {
      double v[3];
      for (std::size_t k = 0; k < 3; ++k) {
        const auto& item = (*flat)[j * 3 + k];
        if (!item.is_number()) {
          throw KeypointParseError(where + ": value " + std::to_string(j * 3 + k) + " is not a number");
        }
        v[k] = item.get<double>();
        if (!std::isfinite(v[k])) {
          throw KeypointParseError(where + ": value " + std::to_string(j * 3 + k) + " is not finite");
        }
      }
      if (v[2] < 0.0 || v[2] > 1.0) {
        throw KeypointParseError(where + ": confidence of joint " + std::to_string(j) +
                                 " outside [0, 1]");
      }
      skeleton.keypoints[j] = {v[0], v[1], v[2]};
    }
    people.push_back(skeleton);
  }
  return people;
}

/// The inverse of parse_keypoints, in the tool's current layout.
inline std::string format_keypoints(const std::vector<Skeleton>& people) {
  nlohmann::json doc;
  doc["version"] = 1.3;
  doc["people"] = nlohmann::json::array();
  for (const auto& s : people) {
    nlohmann::json flat = nlohmann::json::array();
    for (const auto& k : s.keypoints) {
      flat.push_back(k.x);
      flat.push_back(k.y);
      flat.push_back(k.confidence);
    }
    doc["people"].push_back({{"pose_keypoints_2d", flat}});
  }
  return doc.dump();
}

/// A set of joint ids, iterated in increasing id order.
class JointSet {
public:
  JointSet() = default;
  JointSet(std::initializer_list<int> joints) {
    for (int j : joints) insert(j);
  }

  static JointSet face() { return {Joint::nose}; }
  static JointSet five() {
    return {Joint::nose, Joint::right_elbow, Joint::right_wrist, Joint::left_elbow, Joint::left_wrist};
  }

  /// "face" or "five".
  static JointSet parse(std::string_view name) {
    if (name == "face") return face();
    if (name == "five") return five();
    throw ConfigError("unknown joint set '" + std::string(name) + "' (expected face or five)");
  }

  void insert(int joint) {
    joint_name(joint);
    bits_[static_cast<std::size_t>(joint)] = true;
  }
  bool contains(int joint) const {
    return joint >= 0 && joint < kJointCount && bits_[static_cast<std::size_t>(joint)];
  }
  bool empty() const {
    for (bool b : bits_) {
      if (b) return false;
    }
    return true;
  }
  std::size_t size() const {
    std::size_t n = 0;
    for (bool b : bits_) n += b;
    return n;
  }
  std::vector<int> ids() const {
    std::vector<int> out;
    for (int j = 0; j < kJointCount; ++j) {
      if (bits_[static_cast<std::size_t>(j)]) out.push_back(j);
    }
    return out;
  }

private:
  std::array<bool, kJointCount> bits_{};
};

struct Anchor {
  int joint = 0;
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Anchor&, const Anchor&) = default;
};

inline constexpr double kDefaultMinConfidence = 0.1;

/// Requested joints whose confidence reaches min_confidence, in id order.
inline std::vector<Anchor> select_anchor_joints(const Skeleton& skeleton, const JointSet& joints,
                                                double min_confidence = kDefaultMinConfidence) {
  if (joints.empty()) throw ConfigError("select_anchor_joints: joint set is empty");
  std::vector<Anchor> anchors;
  for (int j : joints.ids()) {
    const auto& k = skeleton.keypoints[static_cast<std::size_t>(j)];
    if (!k.missing() && k.confidence >= min_confidence) anchors.push_back({j, k.x, k.y});
  }
  return anchors;
}

} // namespace invigil
