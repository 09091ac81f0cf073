#pragma once

// The pipeline steps behind each CLI subcommand. Each throws on failure and
// reports progress to `log`; the CLI maps exceptions to exit codes.

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "invigil/checkpoint.hpp"
#include "invigil/manifest.hpp"
#include "invigil/metrics.hpp"
#include "invigil/patch.hpp"
#include "invigil/pose.hpp"
#include "invigil/report.hpp"
#include "invigil/synthetic.hpp"
#include "invigil/training.hpp"

namespace invigil {

inline constexpr const char* kDataRootEnv = "INVIGIL_DATA_ROOT";
inline constexpr const char* kManifestFileName = "manifest.tsv";

/// The directory named by INVIGIL_DATA_ROOT, if set and non-empty.
inline std::optional<std::filesystem::path> data_root() {
  const char* v = std::getenv(kDataRootEnv);
  if (!v || !*v) return std::nullopt;
  return std::filesystem::path(v);
}

/// `given` if non-empty, else <data root>/manifest.tsv.
inline std::filesystem::path resolve_manifest(const std::filesystem::path& given) {
  if (!given.empty()) return given;
  if (auto root = data_root()) return *root / kManifestFileName;
  throw ConfigError(std::string("no manifest given and ") + kDataRootEnv + " is not set");
}

// ---------------------------------------------------------------------------
// extract

/// Per-person labels: "frame_id<TAB>person<TAB>label" lines, '#' comments.
using PersonLabels = std::map<std::pair<std::string, int>, int>;

inline PersonLabels read_person_labels(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ManifestError("cannot open labels file " + path.string());
  PersonLabels labels;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    std::istringstream fields(line);
    std::string frame;
    int person = -1, label = -1;
    if (!std::getline(fields, frame, '\t') || !(fields >> person >> label) || person < 0 ||
        (label != 0 && label != 1)) {
      throw ManifestError(path.string() + ": line " + std::to_string(line_no) +
                          ": expected frame_id, person, label (0 or 1)");
    }
    labels[{frame, person}] = label;
  }
  return labels;
}

struct ExtractOptions {
  std::filesystem::path frames_dir;
  std::filesystem::path keypoints_dir;
  std::filesystem::path out_dir;
  JointSet joints = JointSet::face();
  double min_confidence = kDefaultMinConfidence;
  std::filesystem::path labels_file;  // optional
};

struct ExtractResult {
  DatasetManifest manifest;
  std::filesystem::path manifest_path;
  std::size_t frames_processed = 0;
  std::vector<std::string> skipped;  // frame ids
};

/// The keypoint file for a frame stem: <stem>.json or <stem>_keypoints.json.
inline std::optional<std::filesystem::path> keypoint_file_for(const std::filesystem::path& dir,
                                                              const std::string& stem) {
  for (const auto& name : {stem + "_keypoints.json", stem + ".json"}) {
    if (std::filesystem::is_regular_file(dir / name)) return dir / name;
  }
  return std::nullopt;
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

/// parse -> select anchors -> crop; patches are stored unnormalized and
/// standardized when read for the model. Frames and keypoint files are only
/// read.
inline ExtractResult run_extract(const ExtractOptions& opt, std::ostream& log) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(opt.frames_dir)) throw ConfigError("frames directory not found: " + opt.frames_dir.string());
  if (!fs::is_directory(opt.keypoints_dir)) {
    throw ConfigError("keypoints directory not found: " + opt.keypoints_dir.string());
  }
  if (opt.joints.empty()) throw ConfigError("joint set is empty");
  PersonLabels labels;
  if (!opt.labels_file.empty()) labels = read_person_labels(opt.labels_file);

  std::vector<fs::path> frames;
  for (const auto& entry : fs::directory_iterator(opt.frames_dir)) {
    if (entry.is_regular_file() && is_image_path(entry.path())) frames.push_back(entry.path());
  }
  std::sort(frames.begin(), frames.end());

  ExtractResult result;
  result.manifest.root = opt.out_dir;
  fs::create_directories(opt.out_dir / "patches");
  for (const auto& frame_path : frames) {
    const std::string id = frame_path.stem().string();
    const auto kp = keypoint_file_for(opt.keypoints_dir, id);
    if (!kp) {
      log << "warning: no keypoint file for frame " << id << "; skipped\n";
      result.skipped.push_back(id);
      continue;
    }
    std::vector<Skeleton> people;
    Image frame;
    try {
      people = parse_keypoints(read_text(*kp));
      frame = read_image(frame_path);
    } catch (const Error& e) {
      log << "warning: frame " << id << ": " << e.what() << "; skipped\n";
      result.skipped.push_back(id);
      continue;
    }
    for (const auto& person : people) {
      for (const auto& anchor : select_anchor_joints(person, opt.joints, opt.min_confidence)) {
        auto patch = extract_patch(frame, anchor.x, anchor.y);
        ManifestRecord r;
        r.patch_file = patch_file_name(id, person.person_index, anchor.joint);
        r.frame_id = id;
        r.person = person.person_index;
        r.joint = anchor.joint;
        r.anchor_x = patch.window.center_x;
        r.anchor_y = patch.window.center_y;
        if (auto it = labels.find({id, person.person_index}); it != labels.end()) r.label = it->second;
        write_image(opt.out_dir / r.patch_file, patch.image);
        result.manifest.records.push_back(std::move(r));
      }
    }
    ++result.frames_processed;
  }
  if (result.frames_processed == 0) {
    throw ConfigError("no frames processed (" + std::to_string(result.skipped.size()) + " skipped)");
  }
  result.manifest_path = opt.out_dir / kManifestFileName;
  write_manifest(result.manifest, result.manifest_path);

  const auto s = result.manifest.summary();
  log << "frames " << result.frames_processed << " processed, " << result.skipped.size() << " skipped\n";
  log << "patches " << result.manifest.records.size() << " (normal " << s.by_class(0) << ", abnormal "
      << s.by_class(1) << ", unlabeled " << s.by_class(2) << ")\n";
  std::map<int, std::size_t> per_joint;
  for (const auto& r : result.manifest.records) ++per_joint[r.joint];
  for (const auto& [joint, n] : per_joint) log << "  " << joint_name(joint) << " " << n << "\n";
  log << "manifest " << result.manifest_path.string() << "\n";
  return result;
}

// ---------------------------------------------------------------------------
// split

inline DatasetManifest run_split(const std::filesystem::path& manifest_path, double test_fraction,
                                 std::uint64_t seed, std::ostream& log,
                                 const std::filesystem::path& out_path = {}) {
  auto m = split_dataset(read_manifest(manifest_path), test_fraction, seed);
  const auto target = out_path.empty() ? manifest_path : out_path;
  write_manifest(m, target);
  const auto s = m.summary();
  log << "train " << s.by_split(Split::train) << " patches, test " << s.by_split(Split::test) << " patches\n";
  for (std::size_t c = 0; c < 2; ++c) {
    log << "  class " << c << ": train " << s.counts[c][1] << ", test " << s.counts[c][2] << "\n";
  }
  return m;
}

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
  std::filesystem::path manifest;
  std::filesystem::path checkpoint;
  std::filesystem::path history;  // default: <checkpoint>.history.tsv
  Hyper hyper;
  ModelConfig config;
};

inline std::filesystem::path history_path_for(const TrainOptions& opt) {
  if (!opt.history.empty()) return opt.history;
  auto p = opt.checkpoint;
  p += ".history.tsv";
  return p;
}

struct TrainResult {
  TrainHistory history;
  std::size_t checkpoint_bytes = 0;
};

inline TrainResult run_train(const TrainOptions& opt, std::ostream& log) {
  const auto m = read_manifest(opt.manifest);
  const auto train_records = records_in(m, Split::train);
  for (const auto* r : train_records) {
    if (!r->label) throw ManifestError("cannot train: patch " + r->patch_id() + " is unlabeled");
  }
  if (train_records.empty()) {
    if (const auto* r = first_unlabeled(m)) {
      throw ManifestError("cannot train: patch " + r->patch_id() + " is unlabeled");
    }
    throw ManifestError("cannot train: the train split is empty");
  }
  const auto data = load_dataset(m, Split::train);
  auto model = Model<float>::build(opt.config, opt.hyper.seed);
  log << "training on " << data.size() << " patches, " << model.parameter_count() << " parameters\n";

  std::ofstream history(history_path_for(opt), std::ios::trunc);
  if (!history) throw Error("cannot write " + history_path_for(opt).string());
  TrainResult result;
  result.history = train(model, data, opt.hyper, [&](const EpochStats& s) {
    history << s.epoch << '\t' << detail::format_double(s.mean_loss) << '\t'
            << detail::format_double(s.accuracy) << '\n';
    history.flush();
    char line[96];
    std::snprintf(line, sizeof line, "epoch %3d  loss %.4f  accuracy %.4f\n", s.epoch, s.mean_loss, s.accuracy);
    log << line << std::flush;
  });
  result.checkpoint_bytes = save_checkpoint(
      model, TrainingMetadata{opt.hyper.epochs, opt.hyper.seed, result.history.final_loss()}, opt.checkpoint);
  log << "checkpoint " << opt.checkpoint.string() << " (" << result.checkpoint_bytes << " bytes)\n";
  return result;
}

// ---------------------------------------------------------------------------
// eval

inline void check_patch_model(const ModelConfig& c) {
  if (c.input_size != static_cast<int>(kPatchSize) || c.input_channels != static_cast<int>(kPatchChannels) ||
      c.num_classes != kNumClasses) {
    throw CheckpointError("checkpoint expects " + std::to_string(c.input_channels) + "x" +
                          std::to_string(c.input_size) + "x" + std::to_string(c.input_size) + " inputs with " +
                          std::to_string(c.num_classes) + " classes; patches are 3x32x32 with 2 classes");
  }
}

struct EvalResult {
  ConfusionMatrix confusion;
  Metrics metrics;
  std::string table;  // what was printed
};

inline std::filesystem::path metrics_path_for(const std::filesystem::path& checkpoint) {
  auto p = checkpoint;
  p += ".metrics.json";
  return p;
}

inline EvalResult run_eval(const std::filesystem::path& manifest_path, const std::filesystem::path& checkpoint,
                           std::ostream& log, std::filesystem::path metrics_out = {}) {
  const auto m = read_manifest(manifest_path);
  const auto ckpt = load_checkpoint(checkpoint);
  check_patch_model(ckpt.model.config());
  if (records_in(m, Split::test).empty()) throw ManifestError("cannot evaluate: the test split is empty");
  const auto data = load_dataset(m, Split::test);
  EvalResult r;
  r.confusion = evaluate(ckpt.model, data);
  r.metrics = compute_metrics(r.confusion);
  r.table = format_confusion(r.confusion) + "\n" + format_metrics_table(r.metrics);
  log << r.table;
  if (metrics_out.empty()) metrics_out = metrics_path_for(checkpoint);
  std::ofstream out(metrics_out, std::ios::trunc);
  out << metrics_json(r.confusion, r.metrics).dump(2) << '\n';
  if (!out) throw Error("cannot write " + metrics_out.string());
  return r;
}

// ---------------------------------------------------------------------------
// report

inline std::vector<Prediction> predict_manifest(const Model<float>& model, const DatasetManifest& m) {
  check_patch_model(model.config());
  std::vector<std::vector<float>> patches;
  patches.reserve(m.records.size());
  for (const auto& r : m.records) patches.push_back(normalize_patch(load_patch(m, r)));
  return infer(model, patches);
}

inline std::vector<FrameReport> run_report(const std::filesystem::path& manifest_path,
                                           const std::filesystem::path& checkpoint, double threshold,
                                           std::ostream& log, const std::filesystem::path& json_out = {}) {
  const auto m = read_manifest(manifest_path);
  const auto ckpt = load_checkpoint(checkpoint);
  const auto predictions = predict_manifest(ckpt.model, m);
  auto rows = build_report(m.records, predictions, threshold);
  log << format_report(rows, threshold);
  if (!json_out.empty()) {
    nlohmann::json doc = nlohmann::json::array();
    for (const auto& r : rows) doc.push_back(report_row_json(r));
    std::ofstream out(json_out, std::ios::trunc);
    out << doc.dump(2) << '\n';
    if (!out) throw Error("cannot write " + json_out.string());
  }
  return rows;
}

} // namespace invigil
