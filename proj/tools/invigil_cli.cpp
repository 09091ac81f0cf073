#include <atomic>
#include <chrono>
#include <csignal>
#include <iostream>
#include <thread>

#include <CLI11.hpp>

#include "invigil/commands.hpp"
#include "invigil/service.hpp"

namespace {

std::atomic<bool> g_stop{false};

void on_signal(int) { g_stop = true; }

std::filesystem::path default_out_dir() {
  if (auto root = invigil::data_root()) return *root;
  return {};
}

int serve(const invigil::ServiceOptions& opt, const std::string& host, int port) {
  invigil::AnnotationService svc(opt);
  const bool bound = port == 0 ? (port = svc.bind_any(host)) > 0 : svc.bind(host, port);
  if (!bound) {
    std::cerr << "error: cannot bind " << host << ":" << port << "\n";
    return 1;
  }
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::thread watcher([&] {
    while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    svc.stop();
  });
  std::cout << "listening on http://" << host << ":" << port << (svc.has_model() ? " (model loaded)" : "") << "\n"
            << std::flush;
  svc.run();
  g_stop = true;
  watcher.join();
  const auto r = svc.export_manifest();
  std::cout << "exported " << r.records << " records (" << r.labeled << " labeled, " << r.changed << " changed) to "
            << r.path.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"invigil: anomalous behaviour detection on exam-hall frames"};
  app.require_subcommand(1);

  invigil::ExtractOptions ex;
  std::string joints = "face";
  auto* extract = app.add_subcommand("extract", "Crop joint-anchored patches and write a manifest");
  extract->add_option("--frames", ex.frames_dir, "Directory of frame images (.png, .ppm)")->required();
  extract->add_option("--keypoints", ex.keypoints_dir, "Keypoint JSON per frame, named <frame stem>_keypoints.json or <frame stem>.json")->required();
  extract->add_option("--out", ex.out_dir, "Output directory (default: $INVIGIL_DATA_ROOT)");
  extract->add_option("--joints", joints, "Anchor joint set: face or five")->check(CLI::IsMember({"face", "five"}));
  extract->add_option("--min-confidence", ex.min_confidence, "Minimum keypoint confidence")
      ->check(CLI::Range(0.0, 1.0));
  extract->add_option("--labels", ex.labels_file, "TSV of frame_id, person, label");

  std::filesystem::path manifest, split_out;
  double test_fraction = 0.2;
  std::uint64_t split_seed = 0;
  auto* split = app.add_subcommand("split", "Assign frames to train and test splits");
  split->add_option("--manifest", manifest, "Manifest (default: $INVIGIL_DATA_ROOT/manifest.tsv)");
  split->add_option("--test-fraction", test_fraction, "Fraction of frames held out")->check(CLI::Range(0.0, 1.0));
  split->add_option("--seed", split_seed, "Shuffle seed");
  split->add_option("--out", split_out, "Write here instead of in place");

  invigil::TrainOptions tr;
  auto* train = app.add_subcommand("train", "Train a classifier on the train split");
  train->add_option("--manifest", tr.manifest, "Manifest (default: $INVIGIL_DATA_ROOT/manifest.tsv)");
  train->add_option("--checkpoint", tr.checkpoint, "Checkpoint to write")->required();
  train->add_option("--history", tr.history, "Per-epoch TSV (default: <checkpoint>.history.tsv)");
  train->add_option("--epochs", tr.hyper.epochs, "Epochs")->capture_default_str();
  train->add_option("--batch-size", tr.hyper.batch_size, "Mini-batch size")->capture_default_str();
  train->add_option("--lr", tr.hyper.learning_rate, "Adam learning rate")->capture_default_str();
  train->add_option("--weight-decay", tr.hyper.weight_decay, "L2 weight decay")->capture_default_str();
  train->add_option("--seed", tr.hyper.seed, "Initialisation, shuffle and dropout seed");
  train->add_option("--growth-rate", tr.config.growth_rate, "Channels added per dense layer")->capture_default_str();
  train->add_option("--dense-layers", tr.config.dense_layers, "Dense layers")->capture_default_str();
  train->add_option("--dropout", tr.config.dropout, "Dropout rate")->capture_default_str();

  std::filesystem::path checkpoint, metrics_out, report_json;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  eval->add_option("--manifest", manifest, "Manifest (default: $INVIGIL_DATA_ROOT/manifest.tsv)");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint")->required();
  eval->add_option("--metrics", metrics_out, "Metrics JSON (default: <checkpoint>.metrics.json)");

  double threshold = invigil::kDefaultFlagThreshold;
  auto* report = app.add_subcommand("report", "Rank frames by abnormal probability");
  report->add_option("--manifest", manifest, "Manifest (default: $INVIGIL_DATA_ROOT/manifest.tsv)");
  report->add_option("--checkpoint", checkpoint, "Checkpoint")->required();
  report->add_option("--threshold", threshold, "Flag frames at or above this probability");
  report->add_option("--json", report_json, "Also write the rows as JSON");

  invigil::ServiceOptions so;
  std::string host = "127.0.0.1";
  int port = 8080;
  auto* serve_cmd = app.add_subcommand("serve", "Serve the annotation API");
  serve_cmd->add_option("--manifest", manifest, "Manifest (default: $INVIGIL_DATA_ROOT/manifest.tsv)");
  serve_cmd->add_option("--checkpoint", so.checkpoint, "Checkpoint for probabilities and /report");
  serve_cmd->add_option("--frames", so.frames_dir, "Frame images for /frames/{id}/image");
  serve_cmd->add_option("--export", so.export_path, "Export target (default: the manifest)");
  serve_cmd->add_option("--event-log", so.event_log, "Append label events to this JSONL file");
  serve_cmd->add_option("--threshold", so.threshold, "Flag threshold");
  serve_cmd->add_option("--host", host, "Bind address")->capture_default_str();
  serve_cmd->add_option("--port", port, "Port, 0 for any")->capture_default_str();

  invigil::CorpusOptions co;
  std::filesystem::path synth_out;
  auto* synth = app.add_subcommand("synth", "Write a synthetic corpus of frames, keypoints and labels");
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--frames", co.frames, "Frames")->capture_default_str();
  synth->add_option("--persons", co.persons, "Persons per frame")->capture_default_str();
  synth->add_option("--abnormal-fraction", co.abnormal_fraction, "Probability a person is abnormal")
      ->check(CLI::Range(0.0, 1.0));
  synth->add_option("--seed", co.seed, "Seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*extract) {
      if (ex.out_dir.empty()) ex.out_dir = default_out_dir();
      if (ex.out_dir.empty()) throw invigil::ConfigError("no --out given and INVIGIL_DATA_ROOT is not set");
      ex.joints = invigil::JointSet::parse(joints);
      invigil::run_extract(ex, std::cout);
    } else if (*split) {
      invigil::run_split(invigil::resolve_manifest(manifest), test_fraction, split_seed, std::cout, split_out);
    } else if (*train) {
      tr.manifest = invigil::resolve_manifest(tr.manifest);
      tr.config.validate();
      invigil::run_train(tr, std::cout);
    } else if (*eval) {
      invigil::run_eval(invigil::resolve_manifest(manifest), checkpoint, std::cout, metrics_out);
    } else if (*report) {
      invigil::run_report(invigil::resolve_manifest(manifest), checkpoint, threshold, std::cout, report_json);
    } else if (*serve_cmd) {
      so.manifest = invigil::resolve_manifest(manifest);
      return serve(so, host, port);
    } else if (*synth) {
      const auto c = invigil::generate_corpus(synth_out, co);
      std::cout << "wrote " << c.frames << " frames, " << c.frames * c.persons << " persons (" << c.abnormal
                << " abnormal) to " << synth_out.string() << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
