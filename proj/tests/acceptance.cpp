// One PASS/FAIL line per acceptance criterion. Exit status is the number of
// failures. Arguments, if any, select criteria by name.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "gradient_suite.hpp"
#include "invigil/commands.hpp"
#include "oracles.hpp"

using namespace invigil;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances and limits.
constexpr int kGradientSeeds = 20;
constexpr double kGradientTolerance = 1e-4;
constexpr double kGradientSeconds = 120.0;
constexpr double kOracleTolerance = 1e-6;
constexpr int kOracleTrials = 200;
constexpr int kMetricsVectors = 1000;
constexpr int kFeatureWidth = 216;
constexpr std::size_t kGoldenParameters = 202154;
constexpr std::size_t kEchoPatches = 200;
constexpr double kEchoAccuracy = 0.96;
constexpr double kEchoLoss = 0.13;
constexpr double kEchoSeconds = 600.0;

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "invigil_acceptance" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// ---------------------------------------------------------------------------

Outcome gradient_suite_check() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string worst_op;
  std::size_t checks = 0;
  for (const auto& check : gradient_suite::all_checks()) {
    for (int seed = 1; seed <= kGradientSeeds; ++seed) {
      const double err = check.run(static_cast<std::uint64_t>(seed));
      ++checks;
      if (!(err <= worst)) {
        worst = err;
        worst_op = check.name;
      }
    }
  }
  const double secs = seconds_since(t0);
  const bool ok = worst < kGradientTolerance && secs < kGradientSeconds;
  return {ok, fmt("%zu checks (%d seeds per op), max relative error %.3g (%s) < %.0e, %.1f s < %.0f s", checks,
                  kGradientSeeds, worst, worst_op.c_str(), kGradientTolerance, secs, kGradientSeconds)};
}

Outcome oracle_suite_check() {
  std::mt19937_64 rng(20240601);
  auto pick = [&](int lo, int hi) { return static_cast<std::size_t>(lo + static_cast<int>(rng() % (hi - lo + 1))); };
  double conv = 0, fc = 0, gap = 0;
  for (int t = 0; t < kOracleTrials; ++t) {
    const std::size_t k = std::array<std::size_t, 3>{1, 3, 5}[rng() % 3];
    const int stride = t % 2 ? 1 : static_cast<int>(pick(1, 2));
    const int pad = static_cast<int>(pick(0, static_cast<int>(k / 2)));
    const std::size_t h = pick(static_cast<int>(k), 9), w = pick(static_cast<int>(k), 9);
    const auto x = oracle::random_tensor({pick(1, 3), pick(1, 5), h, w}, rng);
    const auto kern = oracle::random_tensor({pick(1, 5), x.dim(1), k, k}, rng);
    const auto bias = oracle::random_tensor({kern.dim(0)}, rng);
    const bool with_bias = t % 3 != 0;
    conv = std::max(conv, max_abs_diff(kernels::conv2d_forward(x, kern, with_bias ? &bias : nullptr, stride, pad),
                                       oracle::conv2d(x, kern, with_bias ? &bias : nullptr, stride, pad)));
    const auto a = oracle::random_tensor({pick(1, 9), pick(1, 40)}, rng);
    const auto wt = oracle::random_tensor({a.dim(1), pick(1, 6)}, rng);
    const auto b = oracle::random_tensor({wt.dim(1)}, rng);
    fc = std::max(fc, max_abs_diff(kernels::fully_connected(a, wt, b), oracle::matmul_bias(a, wt, b)));
    const auto g = oracle::random_tensor({pick(1, 4), pick(1, 6), pick(1, 8), pick(1, 8)}, rng);
    gap = std::max(gap, max_abs_diff(kernels::global_avg_pool(g), oracle::global_avg_pool(g)));
  }
  int metric_mismatches = 0;
  std::vector<int> labels, predicted;
  for (int t = 0; t < kMetricsVectors; ++t) {
    oracle::random_predictions(rng, labels, predicted);
    ConfusionMatrix cm;
    for (std::size_t i = 0; i < labels.size(); ++i) cm.add(labels[i], predicted[i]);
    metric_mismatches += !(compute_metrics(cm) == oracle::recount_metrics(labels, predicted));
  }
  const bool ok = conv <= kOracleTolerance && fc <= kOracleTolerance && gap <= kOracleTolerance &&
                  metric_mismatches == 0;
  return {ok, fmt("max |diff| conv2d %.2g, fully_connected %.2g, global_avg_pool %.2g (<= %.0e, %d shapes); "
                  "metrics recount mismatches %d / %d",
                  conv, fc, gap, kOracleTolerance, kOracleTrials, metric_mismatches, kMetricsVectors)};
}

Outcome architecture_check() {
  const ModelConfig c;
  // Counted from the layer list: stem conv, per dense layer BN (2 per input
  // channel) and 3x3 conv to K channels, head BN, fully connected.
  std::size_t expected = static_cast<std::size_t>(c.initial_channels * c.input_channels * 9);
  for (int l = 0; l < c.dense_layers; ++l) {
    const auto in = static_cast<std::size_t>(c.layer_input_channels(l));
    expected += 2 * in + static_cast<std::size_t>(c.growth_rate) * in * 9;
  }
  const auto width = static_cast<std::size_t>(c.feature_width());
  expected += 2 * width + width * static_cast<std::size_t>(c.num_classes) + static_cast<std::size_t>(c.num_classes);

  const auto a = Model<float>::build(c, 1), b = Model<float>::build(c, 99);
  const bool ok = c.feature_width() == kFeatureWidth && c.initial_channels + c.dense_layers * c.growth_rate == kFeatureWidth &&
                  a.parameter_count() == kGoldenParameters && b.parameter_count() == kGoldenParameters &&
                  expected == kGoldenParameters;
  return {ok, fmt("width %d = %d + %d*%d (want %d); parameters %zu (layer count %zu, golden %zu)", c.feature_width(),
                  c.initial_channels, c.dense_layers, c.growth_rate, kFeatureWidth, a.parameter_count(), expected,
                  kGoldenParameters)};
}

Outcome training_echo_check() {
  const auto data = synthetic_dataset(kEchoPatches, 2024);
  const Hyper hyper;  // defaults: 40 epochs, batch 64, Adam lr 1e-3, wd 1e-4
  auto model = Model<float>::build(ModelConfig{}, hyper.seed);
  const auto t0 = Clock::now();
  const auto history = train(model, data, hyper);
  const double secs = seconds_since(t0);
  const auto& last = history.epochs.back();
  const bool ok = last.accuracy >= kEchoAccuracy && last.mean_loss <= kEchoLoss && secs < kEchoSeconds;
  return {ok, fmt("%zu patches, %d epochs: accuracy %.4f >= %.2f, loss %.4f <= %.2f, %.0f s < %.0f s on %u core(s)",
                  kEchoPatches, hyper.epochs, last.accuracy, kEchoAccuracy, last.mean_loss, kEchoLoss, secs,
                  kEchoSeconds, std::max(1u, std::thread::hardware_concurrency()))};
}

struct PipelineRun {
  std::vector<unsigned char> checkpoint;
  std::string metrics_json;
  std::string eval_text;
  fs::path manifest;
  fs::path checkpoint_path;
};

PipelineRun run_pipeline(const fs::path& dir) {
  CorpusOptions co;
  co.frames = 8;
  co.persons = 3;
  co.seed = 11;
  const auto corpus = generate_corpus(dir / "corpus", co);
  ExtractOptions ex;
  ex.frames_dir = corpus.frames_dir;
  ex.keypoints_dir = corpus.keypoints_dir;
  ex.labels_file = corpus.labels_file;
  ex.out_dir = dir / "data";
  std::ostringstream log;
  const auto manifest = run_extract(ex, log).manifest_path;
  run_split(manifest, 0.25, 5, log);
  TrainOptions tr;
  tr.manifest = manifest;
  tr.checkpoint = dir / "model.ckpt";
  tr.hyper.epochs = 3;
  tr.hyper.seed = 7;
  run_train(tr, log);
  std::ostringstream eval_log;
  run_eval(manifest, tr.checkpoint, eval_log);
  return {read_file_bytes(tr.checkpoint), read_text(metrics_path_for(tr.checkpoint)), eval_log.str(), manifest,
          tr.checkpoint};
}

PipelineRun& pipeline_first() {
  static PipelineRun run = run_pipeline(scratch("pipeline_a"));
  return run;
}

Outcome determinism_check() {
  const auto& a = pipeline_first();
  const auto b = run_pipeline(scratch("pipeline_b"));
  const bool same_ckpt = a.checkpoint == b.checkpoint;
  const bool same_metrics = a.metrics_json == b.metrics_json && a.eval_text == b.eval_text;
  return {same_ckpt && same_metrics && !a.checkpoint.empty(),
          fmt("checkpoints %s (%zu bytes), metrics blocks %s", same_ckpt ? "bit-identical" : "DIFFER",
              a.checkpoint.size(), same_metrics ? "identical" : "DIFFER")};
}

Outcome count_law_check() {
  const auto dir = scratch("count_law");
  CorpusOptions co;
  co.frames = 7;
  co.persons = 3;
  co.seed = 4;
  const auto corpus = generate_corpus(dir / "corpus", co);
  std::ostringstream log;
  auto extract = [&](JointSet joints, const std::string& out) {
    ExtractOptions ex;
    ex.frames_dir = corpus.frames_dir;
    ex.keypoints_dir = corpus.keypoints_dir;
    ex.out_dir = dir / out;
    ex.joints = joints;
    return run_extract(ex, log).manifest;
  };
  const auto five = extract(JointSet::five(), "five");
  const auto face = extract(JointSet::face(), "face");
  const std::size_t fp = corpus.frames * corpus.persons;
  std::map<std::pair<std::string, int>, std::size_t> per_person;
  for (const auto& r : five.records) ++per_person[{r.frame_id, r.person}];
  bool uniform = per_person.size() == fp;
  for (const auto& [key, n] : per_person) uniform = uniform && n == 5;
  const bool ok = five.records.size() == fp * 5 && face.records.size() == fp && uniform;
  return {ok, fmt("F=%zu P=%zu: five-joint records %zu (want %zu), face records %zu (want %zu)", corpus.frames,
                  corpus.persons, five.records.size(), fp * 5, face.records.size(), fp)};
}

/// The eval table: header, then exactly three rows of four numeric columns,
/// the last being the weighted avg / total row.
bool eval_table_shape(const std::string& text, std::string& why) {
  std::istringstream in(text);
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  auto header = std::find_if(lines.begin(), lines.end(),
                             [](const std::string& l) { return l.find("precision") != std::string::npos; });
  if (header == lines.end()) return why = "no header row", false;
  std::vector<std::string> rows;
  for (auto it = header + 1; it != lines.end() && it->rfind("accuracy", 0) != 0; ++it) rows.push_back(*it);
  if (rows.size() != 3) return why = fmt("%zu rows", rows.size()), false;
  const std::array<const char*, 3> names = {"0(normal)", "1(abnormal)", "avg / total"};
  for (std::size_t r = 0; r < 3; ++r) {
    if (rows[r].rfind(names[r], 0) != 0) return why = "row " + std::to_string(r) + " is " + rows[r], false;
    std::istringstream cols(rows[r].substr(14));
    std::vector<double> values;
    for (double v; cols >> v;) values.push_back(v);
    if (values.size() != 4) return why = "row " + std::to_string(r) + " has " + std::to_string(values.size()) + " columns", false;
  }
  return true;
}

Outcome report_format_check() {
  std::string why;
  const auto& run = pipeline_first();
  const bool eval_shape = eval_table_shape(run.eval_text, why);

  const auto reference = format_metrics_table(compute_metrics(oracle::reference_confusion()));
  bool reference_rows = true;
  for (const auto& row : oracle::reference_rows()) reference_rows = reference_rows && reference.find(row + "\n") != std::string::npos;
  reference_rows = reference_rows && reference.find("accuracy 0.9588") != std::string::npos;

  std::ostringstream text;
  const auto rows = run_report(run.manifest, run.checkpoint_path, kDefaultFlagThreshold, text);
  bool descending = !rows.empty();
  for (std::size_t i = 1; i < rows.size(); ++i) {
    descending = descending && rows[i - 1].max_abnormal_probability >= rows[i].max_abnormal_probability;
  }
  // the printed order follows the rows
  std::istringstream lines(text.str());
  std::string line;
  std::getline(lines, line);
  std::getline(lines, line);
  std::vector<double> printed;
  while (std::getline(lines, line)) {
    std::istringstream f(line);
    std::string id, flag;
    double p = 0;
    f >> id >> flag >> p;
    printed.push_back(p);
  }
  const bool printed_desc = printed.size() == rows.size() && std::is_sorted(printed.rbegin(), printed.rend());

  return {eval_shape && reference_rows && descending && printed_desc,
          fmt("eval table 3 rows x 4 columns with avg / total: %s%s; reference matrix reproduces rows: %s; "
              "report of %zu frames descending: %s",
              eval_shape ? "yes" : "no (", eval_shape ? "" : (why + ")").c_str(), reference_rows ? "yes" : "no",
              rows.size(), descending && printed_desc ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient_suite", gradient_suite_check},
      {"oracle_suite", oracle_suite_check},
      {"architecture", architecture_check},
      {"training_echo", training_echo_check},
      {"determinism", determinism_check},
      {"count_law", count_law_check},
      {"report_format", report_format_check},
  };
  int failures = 0;
  for (const auto& [name, check] : criteria) {
    if (argc > 1 && std::find(argv + 1, argv + argc, name) == argv + argc) continue;
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failures;
}
