#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "invigil/manifest.hpp"

using namespace invigil;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "invigil_manifest_test" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

ManifestRecord record(const std::string& frame, int person, int joint, std::optional<int> label) {
  ManifestRecord r;
  r.patch_file = patch_file_name(frame, person, joint);
  r.frame_id = frame;
  r.person = person;
  r.joint = joint;
  r.anchor_x = 16.5 + person;
  r.anchor_y = 20.0 + joint * 0.5;
  r.label = label;
  return r;
}

/// `frames` frames of `persons` persons each; every person carries a random label.
DatasetManifest random_manifest(std::size_t frames, int persons, std::uint64_t seed, double p_abnormal = 0.3) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution abnormal(p_abnormal);
  DatasetManifest m;
  m.root = "/data";
  for (std::size_t f = 0; f < frames; ++f) {
    const auto id = "f" + std::to_string(1000 + f);
    for (int p = 0; p < persons; ++p) {
      const int label = abnormal(rng) ? 1 : 0;
      for (int j : {0, 4}) m.records.push_back(record(id, p, j, label));
    }
  }
  return m;
}

std::string header() {
  return std::string(kManifestMagic) + "\n" + std::string(kManifestColumns) + "\n";
}

void expect_error_at(const std::string& body, const std::string& where) {
  try {
    parse_manifest(header() + body, "/data");
    FAIL() << "accepted: " << body;
  } catch (const ManifestError& e) {
    EXPECT_NE(std::string(e.what()).find(where), std::string::npos) << e.what();
  }
}

}  // namespace

TEST(Manifest, TextRoundTripIsExact) {
  auto m = random_manifest(5, 3, 1);
  m.records[2].label.reset();
  m.records[3].split = Split::test;
  m.records[4].anchor_x = 0.1 + 0.2;  // shortest round-trip formatting
  EXPECT_EQ(parse_manifest(format_manifest(m), m.root), m);
}

TEST(Manifest, FileRoundTripUsesDirectoryAsRoot) {
  const auto dir = temp_dir("roundtrip");
  auto m = random_manifest(3, 2, 2);
  write_manifest(m, dir / "manifest.tsv");
  const auto back = read_manifest(dir / "manifest.tsv");
  EXPECT_EQ(back.root, dir);
  EXPECT_EQ(back.records, m.records);
  EXPECT_FALSE(std::filesystem::exists(dir / "manifest.tsv.tmp"));
}

TEST(Manifest, RecordLayout) {
  const auto r = record("frame_0003", 2, 7, 1);
  EXPECT_EQ(r.patch_file, "patches/frame_0003_p2_j7.png");
  EXPECT_EQ(r.patch_id(), "frame_0003_p2_j7");
  EXPECT_EQ(format_record(r), "patches/frame_0003_p2_j7.png\tframe_0003\t2\t7\t18.5\t23.5\t1\tnone");
}

TEST(Manifest, ErrorsCiteLineNumbers) {
  expect_error_at("a.png\tf\t0\t0\t1\t2\t0\n", "line 3: expected 8 fields");
  expect_error_at("\n# note\na.png\tf\tx\t0\t1\t2\t0\tnone\n", "line 5: bad person");
  expect_error_at("a.png\tf\t0\t0\tnan?\t2\t0\tnone\n", "line 3: bad anchor");
  expect_error_at("a.png\tf\t0\t0\t1\t2\t2\tnone\n", "line 3: bad label");
  expect_error_at("a.png\tf\t0\t0\t1\t2\t1\tval\n", "line 3: bad split");
  expect_error_at("a.png\tf\t0\t0\t1\t2\t1\ttest\nb/a.png\tg\t0\t0\t1\t2\t1\ttest\n", "line 4: duplicate patch id a");
  EXPECT_THROW(parse_manifest("patch_file\tframe_id\n", "/"), ManifestError);
}

TEST(Manifest, FormatRejectsDuplicateIds) {
  auto m = random_manifest(1, 1, 3);
  m.records.push_back(m.records.front());
  EXPECT_THROW(format_manifest(m), ManifestError);
}

TEST(Manifest, FailedWriteLeavesNoFile) {
  const auto dir = temp_dir("nowrite");
  const auto target = dir / "missing_subdir" / "manifest.tsv";
  EXPECT_THROW(write_manifest(random_manifest(2, 1, 4), target), ManifestError);
  EXPECT_FALSE(std::filesystem::exists(target));
}

TEST(Manifest, SummaryCounts) {
  DatasetManifest m;
  m.records = {record("a", 0, 0, 0), record("a", 1, 0, 1), record("b", 0, 0, std::nullopt), record("b", 1, 0, 1)};
  m.records[1].split = Split::test;
  const auto s = m.summary();
  EXPECT_EQ(s.total(), 4u);
  EXPECT_EQ(s.by_class(1), 2u);
  EXPECT_EQ(s.by_class(2), 1u);
  EXPECT_EQ(s.by_split(Split::test), 1u);
  EXPECT_EQ(s.counts[1][2], 1u);
  EXPECT_EQ(m.frame_ids(), (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(first_unlabeled(m)->patch_id(), "b_p0_j0");
}

// splitting

TEST(Split, FramesNeverStraddleSplits) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto m = split_dataset(random_manifest(30, 3, seed), 0.2, seed);
    std::map<std::string, std::set<Split>> sides;
    for (const auto& r : m.records) {
      ASSERT_NE(r.split, Split::none);
      sides[r.frame_id].insert(r.split);
    }
    for (const auto& [frame, s] : sides) ASSERT_EQ(s.size(), 1u) << frame;
  }
}

TEST(Split, TestShareIsRoundedFraction) {
  for (std::size_t frames : {2u, 3u, 7u, 10u, 31u}) {
    for (double frac : {0.1, 0.25, 0.5, 0.9}) {
      const auto m = split_dataset(random_manifest(frames, 2, frames), frac, 9);
      std::set<std::string> test;
      for (const auto* r : records_in(m, Split::test)) test.insert(r->frame_id);
      const double expected = std::clamp(std::round(static_cast<double>(frames) * frac), 1.0,
                                         static_cast<double>(frames - 1));
      EXPECT_EQ(test.size(), static_cast<std::size_t>(expected)) << frames << " frames, fraction " << frac;
    }
  }
}

TEST(Split, EachClassOnBothSidesWhenPossible) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    // Rare abnormal class: only a few frames carry it.
    const auto m = split_dataset(random_manifest(12, 1, seed, 0.2), 0.25, seed);
    for (int label : {0, 1}) {
      std::set<std::string> carriers;
      std::set<Split> sides;
      for (const auto& r : m.records) {
        if (r.label == label) {
          carriers.insert(r.frame_id);
          sides.insert(r.split);
        }
      }
      if (carriers.size() >= 2) {
        EXPECT_EQ(sides.size(), 2u) << "seed " << seed << " class " << label;
      }
    }
  }
}

TEST(Split, DeterministicForSeedAndOrderIndependent) {
  const auto m = random_manifest(40, 2, 5);
  const auto a = split_dataset(m, 0.3, 17);
  EXPECT_EQ(a, split_dataset(m, 0.3, 17));
  auto reversed = m;
  std::reverse(reversed.records.begin(), reversed.records.end());
  const auto b = split_dataset(reversed, 0.3, 17);
  std::map<std::string, Split> sa, sb;
  for (const auto& r : a.records) sa[r.patch_id()] = r.split;
  for (const auto& r : b.records) sb[r.patch_id()] = r.split;
  EXPECT_EQ(sa, sb);
  EXPECT_NE(a, split_dataset(m, 0.3, 18));
}

TEST(Split, RejectsBadInput) {
  EXPECT_THROW(split_dataset(random_manifest(5, 1, 1), 0.0, 0), ConfigError);
  EXPECT_THROW(split_dataset(random_manifest(5, 1, 1), 1.0, 0), ConfigError);
  EXPECT_THROW(split_dataset(random_manifest(1, 3, 1), 0.5, 0), ManifestError);
  auto m = random_manifest(5, 1, 1);
  m.records[3].label.reset();
  try {
    split_dataset(m, 0.5, 0);
    FAIL();
  } catch (const ManifestError& e) {
    EXPECT_NE(std::string(e.what()).find(m.records[3].patch_id()), std::string::npos);
  }
}
