#pragma once

// HTTP/JSON backend for the annotation front end. Labels live in a
// LabelStore; the manifest on disk changes only on export.

#include <cmath>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "invigil/checkpoint.hpp"
#include "invigil/commands.hpp"
#include "invigil/labels.hpp"
#include "invigil/manifest.hpp"
#include "invigil/report.hpp"

// After Eigen: <resolv.h> (pulled in by httplib) defines a `_res` macro.
#include <httplib.h>

namespace invigil {

struct ServiceOptions {
  std::filesystem::path manifest;
  std::filesystem::path checkpoint;   // optional; enables probabilities and /report
  std::filesystem::path frames_dir;   // optional; enables /frames/{id}/image
  std::filesystem::path export_path;  // default: the manifest itself
  std::filesystem::path event_log;    // optional JSONL of label events
  double threshold = kDefaultFlagThreshold;
};

struct ExportResult {
  std::filesystem::path path;
  std::size_t records = 0;
  std::size_t labeled = 0;
  std::size_t unlabeled = 0;
  std::size_t changed = 0;  // labels that differed from the previous export
};

inline nlohmann::json export_json(const ExportResult& r) {
  return {{"path", r.path.string()},
          {"records", r.records},
          {"labeled", r.labeled},
          {"unlabeled", r.unlabeled},
          {"changed", r.changed}};
}

class AnnotationService {
public:
  explicit AnnotationService(ServiceOptions opt)
      : opt_(std::move(opt)), manifest_(read_manifest(opt_.manifest)), store_(manifest_, opt_.event_log) {
    if (opt_.export_path.empty()) opt_.export_path = opt_.manifest;
    for (std::size_t i = 0; i < manifest_.records.size(); ++i) {
      const auto& r = manifest_.records[i];
      by_patch_[r.patch_id()] = i;
      by_frame_[r.frame_id].push_back(i);
    }
    if (!opt_.checkpoint.empty()) {
      const auto ckpt = load_checkpoint(opt_.checkpoint);
      predictions_ = predict_manifest(ckpt.model, manifest_);
    }
    routes();
  }

  AnnotationService(const AnnotationService&) = delete;
  AnnotationService& operator=(const AnnotationService&) = delete;

  httplib::Server& server() { return server_; }
  const LabelStore& store() const { return store_; }
  bool has_model() const { return !predictions_.empty(); }

  /// Binds to an OS-chosen port and returns it, or -1.
  int bind_any(const std::string& host = "127.0.0.1") { return server_.bind_to_any_port(host); }
  bool bind(const std::string& host, int port) { return server_.bind_to_port(host, port); }
  /// Blocks until stop().
  bool run() { return server_.listen_after_bind(); }
  void stop() { server_.stop(); }

  /// Writes the manifest with current labels, atomically.
  ExportResult export_manifest() {
    std::lock_guard lock(export_mutex_);
    ExportResult r;
    r.changed = store_.pending();
    const auto merged = store_.merged(manifest_);
    write_manifest(merged, opt_.export_path);
    store_.mark_exported();
    r.path = opt_.export_path;
    r.records = merged.records.size();
    for (const auto& rec : merged.records) (rec.label ? r.labeled : r.unlabeled)++;
    return r;
  }

private:
  static void send_json(httplib::Response& res, const nlohmann::json& body, int status = 200) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  static void send_error(httplib::Response& res, int status, const std::string& message) {
    send_json(res, {{"error", message}}, status);
  }

  nlohmann::json probability_json(std::size_t index) const {
    if (predictions_.empty()) return nullptr;
    return predictions_[index].probabilities[1];
  }

  nlohmann::json patch_json(std::size_t index) const {
    const auto& r = manifest_.records[index];
    const auto id = r.patch_id();
    return {{"patch_id", id},
            {"frame_id", r.frame_id},
            {"person", r.person},
            {"joint", r.joint},
            {"joint_name", std::string(joint_name(r.joint))},
            {"anchor", {{"x", r.anchor_x}, {"y", r.anchor_y}}},
            {"split", std::string(split_name(r.split))},
            {"label", label_json(store_.label(id))},
            {"sequence", store_.sequence_of(id)},
            {"abnormal_probability", probability_json(index)}};
  }

  nlohmann::json frame_summary(const std::string& id, const std::vector<std::size_t>& indices) const {
    std::size_t labeled = 0;
    double max_p = 0.0;
    for (auto i : indices) {
      labeled += store_.label(manifest_.records[i].patch_id()).has_value();
      if (!predictions_.empty()) max_p = std::max(max_p, static_cast<double>(predictions_[i].probabilities[1]));
    }
    nlohmann::json j = {{"frame_id", id}, {"patch_count", indices.size()}, {"labeled", labeled}};
    if (predictions_.empty()) {
      j["max_abnormal_probability"] = nullptr;
      j["flagged"] = nullptr;
    } else {
      j["max_abnormal_probability"] = max_p;
      j["flagged"] = max_p >= opt_.threshold;
    }
    return j;
  }

  std::optional<std::filesystem::path> frame_image_path(const std::string& id) const {
    if (opt_.frames_dir.empty() || id.find('/') != std::string::npos || id == "." || id == "..") {
      return std::nullopt;
    }
    for (const char* ext : {".png", ".ppm"}) {
      auto p = opt_.frames_dir / (id + ext);
      if (std::filesystem::is_regular_file(p)) return p;
    }
    return std::nullopt;
  }

  void routes() {
    server_.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                                 {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                                 {"Access-Control-Allow-Headers", "Content-Type"}});
    server_.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
    server_.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      std::string what = "internal error";
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        what = e.what();
      } catch (...) {
      }
      send_error(res, 500, what);
    });

    server_.Get("/frames", [this](const httplib::Request&, httplib::Response& res) {
      nlohmann::json out = nlohmann::json::array();
      for (const auto& [id, indices] : by_frame_) out.push_back(frame_summary(id, indices));
      send_json(res, out);
    });

    server_.Get(R"(/frames/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      auto it = by_frame_.find(req.matches[1].str());
      if (it == by_frame_.end()) return send_error(res, 404, "unknown frame " + req.matches[1].str());
      auto out = frame_summary(it->first, it->second);
      out["patches"] = nlohmann::json::array();
      for (auto i : it->second) out["patches"].push_back(patch_json(i));
      send_json(res, out);
    });

    server_.Get(R"(/frames/([^/]+)/image)", [this](const httplib::Request& req, httplib::Response& res) {
      const auto id = req.matches[1].str();
      if (!by_frame_.count(id)) return send_error(res, 404, "unknown frame " + id);
      const auto path = frame_image_path(id);
      if (!path) return send_error(res, 404, "no image for frame " + id);
      const auto png = encode_png(read_image(*path));
      res.set_content(reinterpret_cast<const char*>(png.data()), png.size(), "image/png");
    });

    server_.Get(R"(/patches/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      auto it = by_patch_.find(req.matches[1].str());
      if (it == by_patch_.end()) return send_error(res, 404, "unknown patch " + req.matches[1].str());
      send_json(res, patch_json(it->second));
    });

    server_.Get(R"(/patches/([^/]+)/image)", [this](const httplib::Request& req, httplib::Response& res) {
      auto it = by_patch_.find(req.matches[1].str());
      if (it == by_patch_.end()) return send_error(res, 404, "unknown patch " + req.matches[1].str());
      const auto png = encode_png(read_image(manifest_.patch_path(manifest_.records[it->second])));
      res.set_content(reinterpret_cast<const char*>(png.data()), png.size(), "image/png");
    });

    server_.Post(R"(/patches/([^/]+)/label)", [this](const httplib::Request& req, httplib::Response& res) {
      const auto id = req.matches[1].str();
      if (!by_patch_.count(id)) return send_error(res, 404, "unknown patch " + id);
      const auto body = nlohmann::json::parse(req.body, nullptr, false);
      if (body.is_discarded() || !body.is_object() || !body.contains("label")) {
        return send_error(res, 400, R"(expected a JSON object with "label": 0, 1, "clear" or null)");
      }
      const auto& l = body["label"];
      std::optional<int> label;
      if (l.is_number_integer() && (l.get<long long>() == 0 || l.get<long long>() == 1)) {
        label = static_cast<int>(l.get<long long>());
      } else if (!(l.is_null() || (l.is_string() && l.get<std::string>() == "clear"))) {
        return send_error(res, 400, R"(label must be 0, 1, "clear" or null)");
      }
      std::string annotator;
      if (body.contains("annotator")) {
        if (!body["annotator"].is_string()) return send_error(res, 400, "annotator must be a string");
        annotator = body["annotator"].get<std::string>();
      }
      const auto event = store_.apply(id, label, annotator);
      send_json(res, event_json(event));
    });

    server_.Get("/report", [this](const httplib::Request& req, httplib::Response& res) {
      if (predictions_.empty()) return send_error(res, 409, "no model loaded; start the server with a checkpoint");
      double threshold = opt_.threshold;
      if (req.has_param("threshold")) {
        const auto text = req.get_param_value("threshold");
        std::size_t used = 0;
        try {
          threshold = std::stod(text, &used);
        } catch (const std::exception&) {
          used = 0;
        }
        if (used == 0 || used != text.size() || !std::isfinite(threshold)) {
          return send_error(res, 400, "threshold must be a number");
        }
      }
      nlohmann::json rows = nlohmann::json::array();
      for (const auto& r : build_report(manifest_.records, predictions_, threshold)) rows.push_back(report_row_json(r));
      send_json(res, {{"threshold", threshold}, {"frames", rows}});
    });

    server_.Post("/export", [this](const httplib::Request&, httplib::Response& res) {
      try {
        send_json(res, export_json(export_manifest()));
      } catch (const std::exception& e) {
        send_error(res, 500, std::string("export failed: ") + e.what());
      }
    });
  }

  ServiceOptions opt_;
  DatasetManifest manifest_;
  LabelStore store_;
  std::vector<Prediction> predictions_;
  std::map<std::string, std::size_t> by_patch_;
  std::map<std::string, std::vector<std::size_t>> by_frame_;
  std::mutex export_mutex_;
  httplib::Server server_;
};

} // namespace invigil
