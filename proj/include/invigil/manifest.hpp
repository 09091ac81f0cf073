#pragma once

// Dataset manifest: one tab-separated record per patch.
//
//   # invigil manifest v1
//   # patch_file frame_id person joint anchor_x anchor_y label split
//   patches/f0001_p0_j0.png	f0001	0	0	120.5	64	1	train
//
// label is 0, 1 or "-" (unlabeled); split is train, test or none. Patch
// files are relative to the manifest's directory.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "invigil/error.hpp"
#include "invigil/image.hpp"
#include "invigil/patch.hpp"

namespace invigil {

enum class Split { none, train, test };

inline std::string_view split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::test: return "test";
    default: return "none";
  }
}

inline std::optional<Split> parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  if (s == "none") return Split::none;
  return std::nullopt;
}

struct ManifestRecord {
  std::string patch_file;
  std::string frame_id;
  int person = 0;
  int joint = 0;
  double anchor_x = 0.0;
  double anchor_y = 0.0;
  std::optional<int> label;
  Split split = Split::none;

  /// The patch file's stem, unique within a manifest.
  std::string patch_id() const { return std::filesystem::path(patch_file).stem().string(); }

  friend bool operator==(const ManifestRecord&, const ManifestRecord&) = default;
};

inline std::string patch_file_name(std::string_view frame_id, int person, int joint) {
  return "patches/" + std::string(frame_id) + "_p" + std::to_string(person) + "_j" +
         std::to_string(joint) + ".png";
}

/// Counts per class (0, 1, unlabeled) and split.
struct ManifestSummary {
  // [class 0 | class 1 | unlabeled][none | train | test]
  std::array<std::array<std::size_t, 3>, 3> counts{};

  static std::size_t class_row(const std::optional<int>& label) { return label ? static_cast<std::size_t>(*label) : 2; }

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& row : counts) n = std::accumulate(row.begin(), row.end(), n);
    return n;
  }
  std::size_t by_class(std::size_t row) const {
    return std::accumulate(counts[row].begin(), counts[row].end(), std::size_t{0});
  }
  std::size_t by_split(Split s) const {
    std::size_t n = 0;
    for (const auto& row : counts) n += row[static_cast<std::size_t>(s)];
    return n;
  }
  friend bool operator==(const ManifestSummary&, const ManifestSummary&) = default;
};

struct DatasetManifest {
  std::filesystem::path root;  // directory that patch_file paths are relative to
  std::vector<ManifestRecord> records;

  ManifestSummary summary() const {
    ManifestSummary s;
    for (const auto& r : records) {
      ++s.counts[ManifestSummary::class_row(r.label)][static_cast<std::size_t>(r.split)];
    }
    return s;
  }

  std::filesystem::path patch_path(const ManifestRecord& r) const { return root / r.patch_file; }

  const ManifestRecord* find(std::string_view patch_id) const {
    for (const auto& r : records) {
      if (r.patch_id() == patch_id) return &r;
    }
    return nullptr;
  }

  /// Distinct frame ids in first-appearance order.
  std::vector<std::string> frame_ids() const {
    std::vector<std::string> out;
    std::set<std::string> seen;
    for (const auto& r : records) {
      if (seen.insert(r.frame_id).second) out.push_back(r.frame_id);
    }
    return out;
  }

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

inline constexpr std::string_view kManifestMagic = "# invigil manifest v1";
inline constexpr std::string_view kManifestColumns =
    "# patch_file\tframe_id\tperson\tjoint\tanchor_x\tanchor_y\tlabel\tsplit";

namespace detail {

/// Shortest decimal form that reads back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline bool has_separator(std::string_view s) {
  return s.find_first_of("\t\r\n") != std::string_view::npos;
}

template <typename N>
bool parse_number(std::string_view s, N& out) {
  if (s.empty()) return false;
  auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc{} && res.ptr == s.data() + s.size();
}

} // namespace detail

inline std::string format_record(const ManifestRecord& r) {
  std::string line = r.patch_file + '\t' + r.frame_id + '\t' + std::to_string(r.person) + '\t' +
                     std::to_string(r.joint) + '\t' + detail::format_double(r.anchor_x) + '\t' +
                     detail::format_double(r.anchor_y) + '\t' +
                     (r.label ? std::to_string(*r.label) : std::string("-")) + '\t' +
                     std::string(split_name(r.split));
  return line;
}

/// Field checks that do not touch the file system.
inline void check_record(const ManifestRecord& r, const std::string& where) {
  if (r.patch_file.empty() || r.frame_id.empty()) throw ManifestError(where + ": empty patch file or frame id");
  if (detail::has_separator(r.patch_file) || detail::has_separator(r.frame_id)) {
    throw ManifestError(where + ": tab or newline inside a field");
  }
  if (r.person < 0) throw ManifestError(where + ": negative person index");
  if (r.joint < 0 || r.joint >= 18) throw ManifestError(where + ": joint id out of range");
  if (!std::isfinite(r.anchor_x) || !std::isfinite(r.anchor_y)) throw ManifestError(where + ": non-finite anchor");
  if (r.label && *r.label != 0 && *r.label != 1) throw ManifestError(where + ": label must be 0, 1 or -");
}

inline std::string format_manifest(const DatasetManifest& m) {
  std::string out = std::string(kManifestMagic) + '\n' + std::string(kManifestColumns) + '\n';
  std::set<std::string> ids;
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    const auto& r = m.records[i];
    check_record(r, "record " + std::to_string(i));
    if (!ids.insert(r.patch_id()).second) throw ManifestError("duplicate patch id " + r.patch_id());
    out += format_record(r);
    out += '\n';
  }
  return out;
}

inline DatasetManifest parse_manifest(std::string_view text, std::filesystem::path root) {
  DatasetManifest m;
  m.root = std::move(root);
  std::set<std::string> ids;
  std::size_t line_no = 0, pos = 0;
  bool saw_magic = false;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    const std::string where = "line " + std::to_string(line_no);
    if (line_no == 1) {
      if (line != kManifestMagic) throw ManifestError(where + ": missing manifest header");
      saw_magic = true;
      continue;
    }
    if (line.empty() || line.front() == '#') continue;

    std::vector<std::string_view> fields;
    std::size_t start = 0;
    while (true) {
      const std::size_t tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab == std::string_view::npos ? std::string_view::npos : tab - start));
      if (tab == std::string_view::npos) break;
      start = tab + 1;
    }
    if (fields.size() != 8) {
      throw ManifestError(where + ": expected 8 fields, got " + std::to_string(fields.size()));
    }
    ManifestRecord r;
    r.patch_file = std::string(fields[0]);
    r.frame_id = std::string(fields[1]);
    if (!detail::parse_number(fields[2], r.person)) throw ManifestError(where + ": bad person index");
    if (!detail::parse_number(fields[3], r.joint)) throw ManifestError(where + ": bad joint id");
    if (!detail::parse_number(fields[4], r.anchor_x) || !detail::parse_number(fields[5], r.anchor_y)) {
      throw ManifestError(where + ": bad anchor coordinate");
    }
    if (fields[6] == "0" || fields[6] == "1") {
      r.label = fields[6][0] - '0';
    } else if (fields[6] != "-") {
      throw ManifestError(where + ": bad label '" + std::string(fields[6]) + "'");
    }
    auto split = parse_split(fields[7]);
    if (!split) throw ManifestError(where + ": bad split '" + std::string(fields[7]) + "'");
    r.split = *split;
    check_record(r, where);
    if (!ids.insert(r.patch_id()).second) throw ManifestError(where + ": duplicate patch id " + r.patch_id());
    m.records.push_back(std::move(r));
  }
  if (!saw_magic) throw ManifestError("line 1: missing manifest header");
  return m;
}

/// Written to a sibling temporary first, then renamed over the target, so a
/// failed write never leaves a partial manifest.
inline void write_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  const std::string text = format_manifest(m);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ManifestError("cannot write " + tmp.string());
    out << text;
    out.flush();
    if (!out) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw ManifestError("write failed for " + tmp.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw ManifestError("cannot replace " + path.string());
  }
}

inline DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ManifestError("cannot open manifest " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  try {
    return parse_manifest(text.str(), path.parent_path());
  } catch (const ManifestError& e) {
    throw ManifestError(path.string() + ": " + e.what());
  }
}

inline std::vector<float> load_patch(const DatasetManifest& m, const ManifestRecord& r) {
  return patch_pixels(read_image(m.patch_path(r)));
}

/// Every patch file exists and decodes to 32x32 RGB.
inline void validate_manifest(const DatasetManifest& m) {
  for (const auto& r : m.records) {
    const auto path = m.patch_path(r);
    if (!std::filesystem::exists(path)) {
      throw ManifestError("patch " + r.patch_id() + ": missing file " + path.string());
    }
    try {
      load_patch(m, r);
    } catch (const Error& e) {
      throw ManifestError("patch " + r.patch_id() + ": " + e.what());
    }
  }
}

inline const ManifestRecord* first_unlabeled(const DatasetManifest& m) {
  for (const auto& r : m.records) {
    if (!r.label) return &r;
  }
  return nullptr;
}

/// Partition frames (never individual patches) into train and test.
///
/// Frames are grouped by the set of classes they contain; each group gives
/// the test side its proportional share, with largest remainders rounding
/// the total to round(F * test_fraction). Frames within a group are taken in
/// a seeded shuffle of their sorted ids, so the result depends only on the
/// frame set, the labels and the seed. A repair pass then swaps frames so
/// that every class spanning at least two frames appears on both sides; only
/// when no swap can achieve that does the test share move off its target.
inline DatasetManifest split_dataset(DatasetManifest m, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw ConfigError("test_fraction must lie in (0, 1)");
  }
  if (const auto* r = first_unlabeled(m)) {
    throw ManifestError("cannot split: patch " + r->patch_id() + " is unlabeled");
  }
  std::map<std::string, unsigned> classes;  // frame -> bitmask of labels
  for (const auto& r : m.records) classes[r.frame_id] |= 1u << *r.label;
  const std::size_t frames = classes.size();
  if (frames < 2) throw ManifestError("cannot split fewer than 2 frames");

  const auto n_test = static_cast<std::size_t>(std::clamp<double>(
      std::round(static_cast<double>(frames) * test_fraction), 1.0, static_cast<double>(frames - 1)));

  std::map<unsigned, std::vector<std::string>> groups;
  for (const auto& [frame, mask] : classes) groups[mask].push_back(frame);  // sorted ids
  std::mt19937_64 rng(seed);
  struct Share {
    unsigned mask;
    std::size_t quota;
    double remainder;
  };
  std::vector<Share> shares;
  std::size_t assigned = 0;
  for (auto& [mask, ids] : groups) {
    std::shuffle(ids.begin(), ids.end(), rng);
    const double exact = static_cast<double>(ids.size()) * static_cast<double>(n_test) /
                         static_cast<double>(frames);
    const auto quota = static_cast<std::size_t>(std::floor(exact));
    shares.push_back({mask, quota, exact - static_cast<double>(quota)});
    assigned += quota;
  }
  std::vector<std::size_t> order(shares.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return shares[a].remainder > shares[b].remainder; });
  for (std::size_t i = 0; assigned < n_test; i = (i + 1) % order.size()) {
    auto& s = shares[order[i]];
    if (s.quota < groups[s.mask].size()) {
      ++s.quota;
      ++assigned;
    }
  }

  // Frames in test, plus the ordered candidate lists used by the repair.
  std::set<std::string> test;
  std::vector<std::string> shuffled;
  for (const auto& s : shares) {
    const auto& ids = groups[s.mask];
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i < s.quota) test.insert(ids[i]);
      shuffled.push_back(ids[i]);
    }
  }

  // cnt[label][in_test]: frames carrying the label on each side.
  std::size_t cnt[2][2] = {};
  std::size_t span[2] = {};
  for (const auto& [frame, mask] : classes) {
    for (unsigned label = 0; label < 2; ++label) {
      if (mask >> label & 1u) {
        ++span[label];
        ++cnt[label][test.count(frame)];
      }
    }
  }
  auto move = [&](const std::string& f, bool to_test) {
    to_test ? (void)test.insert(f) : (void)test.erase(f);
    for (unsigned label = 0; label < 2; ++label) {
      if (classes[f] >> label & 1u) {
        --cnt[label][!to_test];
        ++cnt[label][to_test];
      }
    }
  };
  auto violations = [&] {
    std::size_t v = 0;
    for (unsigned label = 0; label < 2; ++label) {
      if (span[label] >= 2) v += (cnt[label][0] == 0) + (cnt[label][1] == 0);
    }
    return v;
  };
  // Swap one frame each way while that reduces the number of uncovered
  // (class, side) pairs; if no swap helps, move a single carrier instead.
  for (std::size_t before = violations(); before > 0; before = violations()) {
    bool improved = false;
    for (const auto& in : shuffled) {
      if (test.count(in)) continue;
      for (const auto& out : shuffled) {
        if (!test.count(out)) continue;
        move(out, false);
        move(in, true);
        if (violations() < before) {
          improved = true;
          break;
        }
        move(in, false);
        move(out, true);
      }
      if (improved) break;
    }
    if (improved) continue;
    for (const auto& f : shuffled) {
      const bool in_test = test.count(f) != 0;
      move(f, !in_test);
      if (violations() < before) {
        improved = true;
        break;
      }
      move(f, in_test);
    }
    if (!improved) break;
  }

  for (auto& r : m.records) r.split = test.count(r.frame_id) ? Split::test : Split::train;
  return m;
}

/// Records of one split, in manifest order.
inline std::vector<const ManifestRecord*> records_in(const DatasetManifest& m, Split split) {
  std::vector<const ManifestRecord*> out;
  for (const auto& r : m.records) {
    if (r.split == split) out.push_back(&r);
  }
  return out;
}

} // namespace invigil
