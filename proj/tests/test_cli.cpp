#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "invigil/commands.hpp"
#include "invigil/service.hpp"

using namespace invigil;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;  // stdout and stderr
};

Run run(const std::string& args, const std::string& env = "") {
  static int calls = 0;
  const auto log = fs::temp_directory_path() /
                   ("invigil_cli_" + std::to_string(::getpid()) + "_" + std::to_string(calls++) + ".log");
  const std::string cmd = env + " " + INVIGIL_CLI + std::string(" ") + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  std::ostringstream s;
  s << in.rdbuf();
  r.out = s.str();
  fs::remove(log);
  return r;
}

fs::path fresh_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / "invigil_cli_test" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::size_t count_lines(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string l; std::getline(in, l);) ++n;
  return n;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::map<fs::path, std::string> snapshot_tree(const fs::path& dir) {
  std::map<fs::path, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) out[e.path()] = slurp(e.path());
  }
  return out;
}

std::string value_after(const std::string& text, const std::string& key) {
  const auto at = text.find(key);
  if (at == std::string::npos) return {};
  const auto start = at + key.size();
  return text.substr(start, text.find('\n', start) - start);
}

const std::string kSmallModel = " --dense-layers 2 --growth-rate 4 --batch-size 8";

}  // namespace

TEST(Cli, PipelineEndToEnd) {
  const auto d = fresh_dir("pipeline");
  const auto c = d.string();
  ASSERT_EQ(run("synth --out " + c + "/corpus --frames 6 --persons 2 --seed 3").code, 0);
  const auto inputs_before = snapshot_tree(c + "/corpus");
  auto ex = run("extract --frames " + c + "/corpus/frames --keypoints " + c + "/corpus/keypoints --out " + c +
                "/data --joints five --labels " + c + "/corpus/labels.tsv");
  ASSERT_EQ(ex.code, 0) << ex.out;
  EXPECT_NE(ex.out.find("patches 60"), std::string::npos) << ex.out;
  EXPECT_NE(ex.out.find("left_wrist 12"), std::string::npos) << ex.out;
  EXPECT_EQ(snapshot_tree(c + "/corpus"), inputs_before);
  ASSERT_EQ(run("split --manifest " + c + "/data/manifest.tsv --test-fraction 0.34 --seed 1").code, 0);

  auto tr = run("train --manifest " + c + "/data/manifest.tsv --checkpoint " + c + "/m.ckpt --epochs 3" + kSmallModel);
  ASSERT_EQ(tr.code, 0) << tr.out;
  EXPECT_EQ(count_lines(c + "/m.ckpt.history.tsv"), 3u);
  EXPECT_TRUE(fs::exists(c + "/m.ckpt"));

  auto ev = run("eval --manifest " + c + "/data/manifest.tsv --checkpoint " + c + "/m.ckpt");
  ASSERT_EQ(ev.code, 0) << ev.out;
  EXPECT_NE(ev.out.find("avg / total"), std::string::npos);
  const auto metrics = nlohmann::json::parse(std::ifstream(c + "/m.ckpt.metrics.json"));
  EXPECT_EQ(metrics["total"], 20);  // 2 of 6 frames, 10 patches each
  char acc[32];
  std::snprintf(acc, sizeof acc, "%.4f", metrics["accuracy"]["value"].get<double>());
  EXPECT_EQ(value_after(ev.out, "accuracy "), acc) << ev.out;
  std::istringstream avg(value_after(ev.out, "avg / total"));
  double col = 0;
  for (const char* key : {"precision", "sensitivity", "f1"}) {
    avg >> col;
    EXPECT_NEAR(col, metrics["weighted"][key]["value"].get<double>(), 0.005) << key;
  }
  EXPECT_EQ(run("train --manifest " + c + "/data/manifest.tsv --checkpoint " + c + "/one.ckpt --epochs 1" + kSmallModel)
                .code,
            0);
  EXPECT_EQ(count_lines(c + "/one.ckpt.history.tsv"), 1u);

  auto rep = run("report --manifest " + c + "/data/manifest.tsv --checkpoint " + c + "/m.ckpt --threshold 0 --json " +
                 c + "/report.json");
  ASSERT_EQ(rep.code, 0) << rep.out;
  EXPECT_NE(rep.out.find("frames 6  flagged 6"), std::string::npos) << rep.out;
  EXPECT_EQ(nlohmann::json::parse(std::ifstream(c + "/report.json")).size(), 6u);
  auto none = run("report --manifest " + c + "/data/manifest.tsv --checkpoint " + c + "/m.ckpt --threshold 1.1");
  ASSERT_EQ(none.code, 0) << none.out;
  EXPECT_NE(none.out.find("frames 6  flagged 0"), std::string::npos) << none.out;
}

TEST(Cli, ServeExportsOnSignal) {
  const auto d = fresh_dir("serve");
  const auto c = d.string();
  ASSERT_EQ(run("synth --out " + c + "/corpus --frames 2 --persons 1").code, 0);
  ASSERT_EQ(run("extract --frames " + c + "/corpus/frames --keypoints " + c + "/corpus/keypoints --out " + c + "/data")
                .code,
            0);
  const auto log = d / "serve.log";
  const std::string cmd = std::string(INVIGIL_CLI) + " serve --port 0 --manifest " + c + "/data/manifest.tsv > " +
                          log.string() + " 2>&1 & echo $! > " + c + "/pid";
  ASSERT_EQ(std::system(cmd.c_str()), 0);
  const auto wait_for = [&](const std::string& needle) {
    for (int i = 0; i < 200; ++i) {
      if (slurp(log).find(needle) != std::string::npos) return true;
      std::this_thread::sleep_for(std::chrono::milliseconds(50));
    }
    return false;
  };
  ASSERT_TRUE(wait_for("listening on")) << slurp(log);
  const auto listening = value_after(slurp(log), "listening on http://127.0.0.1:");
  const int port = std::stoi(listening);
  const pid_t pid = std::stoi(slurp(c + "/pid"));

  httplib::Client cli("127.0.0.1", port);
  auto r = cli.Post("/patches/frame_0001_p0_j0/label", R"({"label": 1})", "application/json");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 200);
  ASSERT_EQ(::kill(pid, SIGTERM), 0);
  ASSERT_TRUE(wait_for("exported")) << slurp(log);
  EXPECT_NE(slurp(log).find("1 labeled, 1 changed"), std::string::npos) << slurp(log);
  EXPECT_EQ(read_manifest(c + "/data/manifest.tsv").find("frame_0001_p0_j0")->label, 1);
}

TEST(Cli, DataRootSuppliesDefaults) {
  const auto d = fresh_dir("root");
  const auto c = d.string();
  ASSERT_EQ(run("synth --out " + c + "/corpus --frames 3 --persons 1").code, 0);
  const std::string env = "INVIGIL_DATA_ROOT=" + c + "/data";
  auto ex = run("extract --frames " + c + "/corpus/frames --keypoints " + c + "/corpus/keypoints --labels " + c +
                    "/corpus/labels.tsv",
                env);
  ASSERT_EQ(ex.code, 0) << ex.out;
  EXPECT_TRUE(fs::exists(c + "/data/manifest.tsv"));
  EXPECT_EQ(run("split --test-fraction 0.3", env).code, 0);
  EXPECT_EQ(read_manifest(c + "/data/manifest.tsv").summary().by_split(Split::none), 0u);
  EXPECT_NE(run("split", "INVIGIL_DATA_ROOT=").code, 0);  // no root, no manifest
}

TEST(Cli, MissingKeypointsSkipFrames) {
  const auto d = fresh_dir("skip");
  const auto c = d.string();
  ASSERT_EQ(run("synth --out " + c + "/corpus --frames 3 --persons 2").code, 0);
  fs::remove(c + "/corpus/keypoints/frame_0001_keypoints.json");
  auto ex = run("extract --frames " + c + "/corpus/frames --keypoints " + c + "/corpus/keypoints --out " + c + "/data");
  ASSERT_EQ(ex.code, 0) << ex.out;
  EXPECT_NE(ex.out.find("no keypoint file for frame frame_0001"), std::string::npos) << ex.out;
  EXPECT_EQ(read_manifest(c + "/data/manifest.tsv").records.size(), 4u);

  fs::create_directories(c + "/empty");
  auto none = run("extract --frames " + c + "/corpus/frames --keypoints " + c + "/empty --out " + c + "/data2");
  EXPECT_NE(none.code, 0);
  EXPECT_NE(none.out.find("no frames processed"), std::string::npos) << none.out;
}

TEST(Cli, PlainJsonKeypointNamesPair) {
  const auto d = fresh_dir("plain");
  const auto c = d.string();
  ASSERT_EQ(run("synth --out " + c + "/corpus --frames 2 --persons 1").code, 0);
  fs::rename(c + "/corpus/keypoints/frame_0000_keypoints.json", c + "/corpus/keypoints/frame_0000.json");
  auto ex = run("extract --frames " + c + "/corpus/frames --keypoints " + c + "/corpus/keypoints --out " + c + "/data");
  ASSERT_EQ(ex.code, 0) << ex.out;
  EXPECT_EQ(read_manifest(c + "/data/manifest.tsv").frame_ids().size(), 2u);
}

TEST(Cli, TrainRefusesUnlabeledManifest) {
  const auto d = fresh_dir("unlabeled");
  const auto c = d.string();
  ASSERT_EQ(run("synth --out " + c + "/corpus --frames 2 --persons 1").code, 0);
  ASSERT_EQ(run("extract --frames " + c + "/corpus/frames --keypoints " + c + "/corpus/keypoints --out " + c + "/data")
                .code,
            0);
  auto tr = run("train --manifest " + c + "/data/manifest.tsv --checkpoint " + c + "/m.ckpt --epochs 1");
  EXPECT_NE(tr.code, 0);
  EXPECT_NE(tr.out.find("patch frame_0000_p0_j0 is unlabeled"), std::string::npos) << tr.out;
  EXPECT_FALSE(fs::exists(c + "/m.ckpt"));
  auto split = run("split --manifest " + c + "/data/manifest.tsv");
  EXPECT_NE(split.code, 0);
}

TEST(Cli, EvalRejectsMismatchedCheckpoint) {
  const auto d = fresh_dir("mismatch");
  const auto c = d.string();
  ASSERT_EQ(run("synth --out " + c + "/corpus --frames 4 --persons 1 --abnormal-fraction 0.5").code, 0);
  ASSERT_EQ(run("extract --frames " + c + "/corpus/frames --keypoints " + c + "/corpus/keypoints --out " + c +
                "/data --labels " + c + "/corpus/labels.tsv")
                .code,
            0);
  ASSERT_EQ(run("split --manifest " + c + "/data/manifest.tsv").code, 0);
  ModelConfig wrong;
  wrong.input_size = 16;
  wrong.dense_layers = 1;
  save_checkpoint(Model<float>::build(wrong, 1), {}, d / "wrong.ckpt");
  auto ev = run("eval --manifest " + c + "/data/manifest.tsv --checkpoint " + c + "/wrong.ckpt");
  EXPECT_NE(ev.code, 0);
  EXPECT_NE(ev.out.find("3x16x16"), std::string::npos) << ev.out;
  auto garbage = run("eval --manifest " + c + "/data/manifest.tsv --checkpoint " + c + "/data/manifest.tsv");
  EXPECT_NE(garbage.code, 0);
}

TEST(Cli, UsageErrors) {
  EXPECT_NE(run("").code, 0);
  EXPECT_NE(run("frobnicate").code, 0);
  EXPECT_NE(run("extract --frames /nonexistent --keypoints /nonexistent --out /tmp/x --joints hands").code, 0);
  EXPECT_NE(run("train --checkpoint /tmp/x.ckpt --manifest /nonexistent.tsv").code, 0);
  EXPECT_EQ(run("--help").code, 0);
}
