#pragma once

// Synthetic exam-hall corpus: frames with seated persons in a row, one
// keypoint file per frame, and per-person labels. An abnormal person has a
// bright square beside the face; a normal one does not.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "invigil/image.hpp"
#include "invigil/pose.hpp"

namespace invigil {

struct CorpusOptions {
  int frames = 4;
  int persons = 2;
  std::uint64_t seed = 0;
  double abnormal_fraction = 0.5;
  double confidence = 0.9;  // for every joint
};

struct Corpus {
  std::filesystem::path frames_dir;
  std::filesystem::path keypoints_dir;
  std::filesystem::path labels_file;
  std::size_t frames = 0;
  std::size_t persons = 0;
  std::size_t abnormal = 0;  // person-frames labelled 1
};

inline constexpr int kSeatSpacing = 80;
inline constexpr int kFrameHeight = 112;

inline std::string frame_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%04d", index);
  return buf;
}

/// A seated upright pose with the nose at (cx, 28).
inline Skeleton seated_pose(int person, double cx, double confidence) {
  Skeleton s;
  s.person_index = person;
  auto set = [&](int j, double dx, double y) { s.keypoints[static_cast<std::size_t>(j)] = {cx + dx, y, confidence}; };
  set(Joint::nose, 0, 28);
  set(Joint::neck, 0, 44);
  set(Joint::right_shoulder, -14, 46);
  set(Joint::left_shoulder, 14, 46);
  set(Joint::right_elbow, -20, 64);
  set(Joint::left_elbow, 20, 64);
  set(Joint::right_wrist, -12, 80);
  set(Joint::left_wrist, 12, 80);
  set(Joint::right_hip, -8, 90);
  set(Joint::left_hip, 8, 90);
  set(Joint::right_knee, -9, 104);
  set(Joint::left_knee, 9, 104);
  set(Joint::right_ankle, -9, 110);
  set(Joint::left_ankle, 9, 110);
  set(Joint::right_eye, -4, 25);
  set(Joint::left_eye, 4, 25);
  set(Joint::right_ear, -8, 27);
  set(Joint::left_ear, 8, 27);
  return s;
}

inline Corpus generate_corpus(const std::filesystem::path& dir, const CorpusOptions& opt) {
  if (opt.frames < 1 || opt.persons < 1) throw ConfigError("corpus needs at least one frame and person");
  Corpus c;
  c.frames_dir = dir / "frames";
  c.keypoints_dir = dir / "keypoints";
  c.labels_file = dir / "labels.tsv";
  std::filesystem::create_directories(c.frames_dir);
  std::filesystem::create_directories(c.keypoints_dir);
  std::ofstream labels(c.labels_file, std::ios::trunc);
  if (!labels) throw ImageError("cannot write " + c.labels_file.string());
  labels << "# frame_id\tperson\tlabel\n";

  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::bernoulli_distribution abnormal(opt.abnormal_fraction);
  const int width = opt.persons * kSeatSpacing;
  for (int f = 0; f < opt.frames; ++f) {
    const std::string id = frame_name(f);
    Image frame(static_cast<std::size_t>(width), kFrameHeight);
    double base[3], gx[3], gy[3];
    for (int ch = 0; ch < 3; ++ch) {
      base[ch] = 60 + 80 * unit(rng);
      gx[ch] = (unit(rng) - 0.5) * 60;
      gy[ch] = (unit(rng) - 0.5) * 60;
    }
    for (std::size_t y = 0; y < frame.height; ++y) {
      for (std::size_t x = 0; x < frame.width; ++x) {
        for (int ch = 0; ch < 3; ++ch) {
          const double v = base[ch] + gx[ch] * static_cast<double>(x) / width +
                           gy[ch] * static_cast<double>(y) / kFrameHeight;
          frame.at(x, y, static_cast<std::size_t>(ch)) = static_cast<std::uint8_t>(std::lround(v));
        }
      }
    }
    std::vector<Skeleton> people;
    for (int p = 0; p < opt.persons; ++p) {
      const double cx = kSeatSpacing / 2.0 + p * kSeatSpacing + std::floor((unit(rng) - 0.5) * 8);
      people.push_back(seated_pose(p, cx, opt.confidence));
      const bool bad = abnormal(rng);
      labels << id << '\t' << p << '\t' << (bad ? 1 : 0) << '\n';
      c.abnormal += bad;
      if (bad) {
        // 8x8 square in one of the face patch's corners.
        const int side = 8;
        const int sx = unit(rng) < 0.5 ? -14 : 6;
        const int sy = unit(rng) < 0.5 ? -14 : 6;
        const int x0 = static_cast<int>(cx) + sx, y0 = 28 + sy;
        for (int y = y0; y < y0 + side; ++y) {
          for (int x = x0; x < x0 + side; ++x) {
            if (x < 0 || y < 0 || x >= width || y >= kFrameHeight) continue;
            for (std::size_t ch = 0; ch < 3; ++ch) frame.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), ch) = 250;
          }
        }
      }
    }
    write_image(c.frames_dir / (id + ".png"), frame);
    std::ofstream kp(c.keypoints_dir / (id + "_keypoints.json"), std::ios::trunc);
    kp << format_keypoints(people);
    if (!kp) throw ImageError("cannot write keypoints for " + id);
  }
  c.frames = static_cast<std::size_t>(opt.frames);
  c.persons = static_cast<std::size_t>(opt.persons);
  return c;
}

} // namespace invigil
