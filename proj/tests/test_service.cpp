#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>
#include <thread>

#include "invigil/service.hpp"

using namespace invigil;
namespace fs = std::filesystem;

namespace {

struct Corpus {
  fs::path dir;
  fs::path manifest;
  fs::path frames;
  fs::path checkpoint;
};

const Corpus& corpus() {
  static const Corpus c = [] {
    Corpus c;
    c.dir = fs::temp_directory_path() / "invigil_service_test";
    fs::remove_all(c.dir);
    CorpusOptions co;
    co.frames = 3;
    co.persons = 2;
    co.seed = 5;
    const auto made = generate_corpus(c.dir / "corpus", co);
    ExtractOptions ex;
    ex.frames_dir = made.frames_dir;
    ex.keypoints_dir = made.keypoints_dir;
    ex.out_dir = c.dir / "data";
    ex.joints = JointSet::five();
    std::ostringstream log;
    c.manifest = run_extract(ex, log).manifest_path;
    c.frames = made.frames_dir;
    ModelConfig small;
    small.growth_rate = 4;
    small.dense_layers = 2;
    small.initial_channels = 8;
    c.checkpoint = c.dir / "model.ckpt";
    save_checkpoint(Model<float>::build(small, 1), {}, c.checkpoint);
    return c;
  }();
  return c;
}

/// A service on an OS-chosen port for the lifetime of the object.
class Running {
public:
  explicit Running(ServiceOptions opt) : svc_(std::move(opt)) {
    port_ = svc_.bind_any();
    EXPECT_GT(port_, 0);
    thread_ = std::thread([this] { svc_.run(); });
    svc_.server().wait_until_ready();
  }
  ~Running() {
    svc_.stop();
    thread_.join();
  }
  httplib::Client client() const { return httplib::Client("127.0.0.1", port_); }
  AnnotationService& service() { return svc_; }

private:
  AnnotationService svc_;
  int port_ = -1;
  std::thread thread_;
};

ServiceOptions options_with_copy(const std::string& name) {
  // Each test exports into its own manifest copy.
  const auto dir = corpus().dir / name;
  fs::create_directories(dir);
  ServiceOptions opt;
  opt.manifest = corpus().manifest;
  opt.export_path = dir / "manifest.tsv";
  return opt;
}

nlohmann::json body_of(const httplib::Result& r) { return nlohmann::json::parse(r->body); }

httplib::Result post_label(httplib::Client& cli, const std::string& id, const std::string& body) {
  return cli.Post("/patches/" + id + "/label", body, "application/json");
}

}  // namespace

TEST(Service, ListsFramesWithCounts) {
  Running server(options_with_copy("list"));
  auto cli = server.client();
  auto r = cli.Get("/frames");
  ASSERT_TRUE(r);
  ASSERT_EQ(r->status, 200);
  EXPECT_EQ(r->get_header_value("Access-Control-Allow-Origin"), "*");
  const auto frames = body_of(r);
  ASSERT_EQ(frames.size(), 3u);
  EXPECT_EQ(frames[0]["frame_id"], "frame_0000");
  EXPECT_EQ(frames[0]["patch_count"], 2 * 5);
  EXPECT_EQ(frames[0]["labeled"], 0);
  EXPECT_TRUE(frames[0]["flagged"].is_null());
}

TEST(Service, FrameDetailAndUnknownFrame) {
  Running server(options_with_copy("detail"));
  auto cli = server.client();
  auto r = cli.Get("/frames/frame_0001");
  ASSERT_EQ(r->status, 200);
  const auto frame = body_of(r);
  ASSERT_EQ(frame["patches"].size(), 10u);
  const auto& p = frame["patches"][0];
  EXPECT_EQ(p["patch_id"], "frame_0001_p0_j0");
  EXPECT_EQ(p["joint_name"], "nose");
  EXPECT_TRUE(p["anchor"].contains("x"));
  EXPECT_TRUE(p["label"].is_null());
  EXPECT_TRUE(p["abnormal_probability"].is_null());
  EXPECT_EQ(cli.Get("/frames/frame_9999")->status, 404);
}

TEST(Service, PatchMetadataAndImage) {
  Running server(options_with_copy("patch"));
  auto cli = server.client();
  auto meta = cli.Get("/patches/frame_0002_p1_j4");
  ASSERT_EQ(meta->status, 200);
  EXPECT_EQ(body_of(meta)["person"], 1);
  EXPECT_EQ(body_of(meta)["sequence"], 0);
  auto img = cli.Get("/patches/frame_0002_p1_j4/image");
  ASSERT_EQ(img->status, 200);
  EXPECT_EQ(img->get_header_value("Content-Type"), "image/png");
  const auto decoded = decode_image(std::span(reinterpret_cast<const std::uint8_t*>(img->body.data()), img->body.size()));
  EXPECT_EQ(decoded, read_image(corpus().manifest.parent_path() / "patches/frame_0002_p1_j4.png"));
  EXPECT_EQ(cli.Get("/patches/nope")->status, 404);
  EXPECT_EQ(cli.Get("/patches/nope/image")->status, 404);
}

TEST(Service, FrameImageOnlyWithFramesDirectory) {
  {
    Running server(options_with_copy("noframes"));
    auto cli = server.client();
    EXPECT_EQ(cli.Get("/frames/frame_0000/image")->status, 404);
  }
  auto opt = options_with_copy("frames");
  opt.frames_dir = corpus().frames;
  Running server(opt);
  auto cli = server.client();
  auto r = cli.Get("/frames/frame_0000/image");
  ASSERT_EQ(r->status, 200);
  const auto img = decode_image(std::span(reinterpret_cast<const std::uint8_t*>(r->body.data()), r->body.size()));
  EXPECT_EQ(img.width, 2u * kSeatSpacing);
}

TEST(Service, LabelValuesAndErrors) {
  Running server(options_with_copy("label"));
  auto cli = server.client();
  const std::string id = "frame_0000_p0_j0";
  auto r = post_label(cli, id, R"({"label": 1, "annotator": "amy"})");
  ASSERT_EQ(r->status, 200);
  EXPECT_EQ(body_of(r)["label"], 1);
  EXPECT_EQ(body_of(r)["annotator"], "amy");
  EXPECT_EQ(body_of(cli.Get("/patches/" + id))["label"], 1);
  EXPECT_EQ(post_label(cli, id, R"({"label": "clear"})")->status, 200);
  EXPECT_TRUE(body_of(cli.Get("/patches/" + id))["label"].is_null());
  EXPECT_EQ(post_label(cli, id, R"({"label": 0})")->status, 200);
  EXPECT_EQ(post_label(cli, id, R"({"label": null})")->status, 200);

  for (const char* bad : {"", "not json", "[1]", R"({"lable": 1})", R"({"label": 2})", R"({"label": "1"})",
                          R"({"label": 0.5})", R"({"label": true})", R"({"label": 1, "annotator": 7})"}) {
    EXPECT_EQ(post_label(cli, id, bad)->status, 400) << bad;
  }
  EXPECT_EQ(post_label(cli, "nope", R"({"label": 1})")->status, 404);
  EXPECT_EQ(server.service().store().events().size(), 4u);
}

TEST(Service, ConcurrentLabelsAllLand) {
  Running server(options_with_copy("concurrent"));
  const auto ids = [] {
    std::vector<std::string> out;
    for (const auto& r : read_manifest(corpus().manifest).records) out.push_back(r.patch_id());
    return out;
  }();
  std::vector<std::thread> threads;
  std::atomic<int> ok{0};
  for (int t = 0; t < 6; ++t) {
    threads.emplace_back([&, t] {
      auto cli = server.client();
      for (std::size_t i = static_cast<std::size_t>(t); i < ids.size(); i += 6) {
        auto r = post_label(cli, ids[i], nlohmann::json{{"label", static_cast<int>(i % 2)}}.dump());
        if (r && r->status == 200) ++ok;
      }
    });
  }
  for (auto& t : threads) t.join();
  EXPECT_EQ(ok.load(), static_cast<int>(ids.size()));
  auto cli = server.client();
  std::size_t labeled = 0;
  for (const auto& f : body_of(cli.Get("/frames"))) labeled += f["labeled"].get<std::size_t>();
  EXPECT_EQ(labeled, ids.size());
}

TEST(Service, RacingPostsResolveBySequence) {
  Running server(options_with_copy("race"));
  const std::string id = "frame_0002_p0_j0";
  for (int round = 0; round < 20; ++round) {
    std::vector<nlohmann::json> replies(2);
    std::thread a([&] {
      auto cli = server.client();
      replies[0] = body_of(post_label(cli, id, R"({"label": 0})"));
    });
    std::thread b([&] {
      auto cli = server.client();
      replies[1] = body_of(post_label(cli, id, R"({"label": 1})"));
    });
    a.join();
    b.join();
    const auto& last = replies[0]["sequence"] > replies[1]["sequence"] ? replies[0] : replies[1];
    auto cli = server.client();
    const auto now = body_of(cli.Get("/patches/" + id));
    EXPECT_EQ(now["label"], last["label"]);
    EXPECT_EQ(now["sequence"], last["sequence"]);
  }
}

TEST(Service, EventLogReplayMatchesExport) {
  auto opt = options_with_copy("replay");
  opt.event_log = corpus().dir / "replay" / "events.jsonl";
  fs::remove(opt.event_log);
  Running server(opt);
  auto cli = server.client();
  post_label(cli, "frame_0000_p1_j0", R"({"label": 1})");
  post_label(cli, "frame_0001_p0_j4", R"({"label": 0})");
  post_label(cli, "frame_0000_p1_j0", R"({"label": "clear"})");
  post_label(cli, "frame_0002_p1_j6", R"({"label": 1})");
  ASSERT_EQ(cli.Post("/export")->status, 200);
  std::map<std::string, std::optional<int>> replayed;
  replay(replayed, read_event_log(opt.event_log));
  for (const auto& r : read_manifest(opt.export_path).records) {
    auto it = replayed.find(r.patch_id());
    EXPECT_EQ(r.label, it == replayed.end() ? std::nullopt : it->second) << r.patch_id();
  }
}

TEST(Service, ExportWritesLabelsAtomically) {
  auto opt = options_with_copy("export");
  Running server(opt);
  auto cli = server.client();
  post_label(cli, "frame_0001_p1_j3", R"({"label": 1})");
  post_label(cli, "frame_0000_p0_j7", R"({"label": 0})");
  auto r = cli.Post("/export");
  ASSERT_EQ(r->status, 200);
  const auto counts = body_of(r);
  EXPECT_EQ(counts["records"], 30);
  EXPECT_EQ(counts["labeled"], 2);
  EXPECT_EQ(counts["unlabeled"], 28);
  EXPECT_EQ(counts["changed"], 2);
  const auto exported = read_manifest(opt.export_path);
  EXPECT_EQ(exported.find("frame_0001_p1_j3")->label, 1);
  EXPECT_EQ(exported.find("frame_0000_p0_j7")->label, 0);
  EXPECT_FALSE(exported.find("frame_0000_p0_j0")->label);
  EXPECT_EQ(body_of(cli.Post("/export"))["changed"], 0);
  // the source manifest is untouched
  EXPECT_FALSE(first_unlabeled(read_manifest(corpus().manifest)) == nullptr);
}

TEST(Service, ExportFailureReportsAndLeavesNothing) {
  auto opt = options_with_copy("export_fail");
  opt.export_path = corpus().dir / "no_such_dir" / "manifest.tsv";
  Running server(opt);
  auto cli = server.client();
  auto r = cli.Post("/export");
  ASSERT_EQ(r->status, 500);
  EXPECT_NE(body_of(r)["error"].get<std::string>().find("export failed"), std::string::npos);
  EXPECT_FALSE(fs::exists(opt.export_path));
}

TEST(Service, ReportNeedsModelAndValidThreshold) {
  {
    Running server(options_with_copy("report_nomodel"));
    EXPECT_EQ(server.client().Get("/report")->status, 409);
  }
  auto opt = options_with_copy("report");
  opt.checkpoint = corpus().checkpoint;
  Running server(opt);
  auto cli = server.client();
  auto all = body_of(cli.Get("/report?threshold=0"));
  ASSERT_EQ(all["frames"].size(), 3u);
  for (const auto& f : all["frames"]) EXPECT_TRUE(f["flagged"].get<bool>());
  for (const auto& f : body_of(cli.Get("/report?threshold=1.0"))["frames"]) EXPECT_FALSE(f["flagged"].get<bool>());
  const auto rows = body_of(cli.Get("/report"))["frames"];
  for (std::size_t i = 1; i < rows.size(); ++i) {
    EXPECT_GE(rows[i - 1]["max_abnormal_probability"].get<double>(), rows[i]["max_abnormal_probability"].get<double>());
  }
  for (const auto& f : body_of(cli.Get("/report?threshold=1.1"))["frames"]) EXPECT_FALSE(f["flagged"].get<bool>());
  for (const char* bad : {"abc", "0.5x", "", "nan"}) {
    EXPECT_EQ(cli.Get(std::string("/report?threshold=") + bad)->status, 400) << bad;
  }
  const auto patch = body_of(cli.Get("/patches/frame_0000_p0_j0"));
  EXPECT_TRUE(patch["abnormal_probability"].is_number());
  EXPECT_TRUE(body_of(cli.Get("/frames"))[0]["flagged"].is_boolean());
}

TEST(Service, PreflightRequests) {
  Running server(options_with_copy("cors"));
  auto cli = server.client();
  auto r = cli.Options("/patches/frame_0000_p0_j0/label");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 204);
  EXPECT_NE(r->get_header_value("Access-Control-Allow-Methods").find("POST"), std::string::npos);
}
