#include "deepedit/server.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <shared_mutex>

#include "httplib.h"

#include "deepedit/error.hpp"
#include "deepedit/png.hpp"
#include "deepedit/rle.hpp"
#include "deepedit/volume_io.hpp"

namespace deepedit {

using nlohmann::json;
namespace fs = std::filesystem;

json ranking_to_json(const std::vector<UncertaintyScore>& scores, RankKey key, int passes, std::uint64_t seed) {
  json arr = json::array();
  for (const auto& s : scores) arr.push_back(to_json(s));
  return {{"key", rank_key_name(key)}, {"passes", passes}, {"seed", seed}, {"scores", arr}};
}

std::vector<UncertaintyScore> ranking_from_json(const json& j) {
  if (!j.is_object() || !j.contains("scores") || !j.at("scores").is_array()) {
    throw Error(ErrorKind::kFormat, "ranking file needs a \"scores\" array");
  }
  std::vector<UncertaintyScore> out;
  for (const auto& s : j.at("scores")) out.push_back(uncertainty_score_from_json(s));
  return out;
}

namespace {

struct CaseEntry {
  CaseRecord record;
  LoadedCase data;
  float window_min = 0.0f;
  float window_max = 0.0f;
  bool done = false;
};

void reply(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void reply_error(httplib::Response& res, int status, const std::string& message) {
  reply(res, status, {{"error", message}});
}

std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

bool parse_index(const std::string& text, long long& out) {
  if (text.empty()) return false;
  try {
    std::size_t used = 0;
    out = std::stoll(text, &used);
    return used == text.size();
  } catch (const std::logic_error&) {
    return false;
  }
}

}  // namespace

struct Server::Impl {
  ModelParams params;
  std::string version;
  ServerOptions opts;
  httplib::Server http;

  std::atomic<bool> loaded{false};
  mutable std::shared_mutex mu;
  std::mutex writer;
  std::vector<CaseEntry> cases;
  std::map<std::string, std::size_t> index;
  std::optional<std::vector<UncertaintyScore>> scores;

  Impl(ModelParams p, ServerOptions o) : params(std::move(p)), version(model_version(params)), opts(std::move(o)) {
    const int threads = std::max(1, opts.threads);
    http.new_task_queue = [threads] { return new httplib::ThreadPool(static_cast<std::size_t>(threads)); };
    routes();
  }

  int num_labels() const { return model_num_labels(params); }

  // Caller holds mu.
  const CaseEntry* find(const std::string& id) const {
    const auto it = index.find(id);
    return it == index.end() ? nullptr : &cases[it->second];
  }

  void load() {
    std::vector<CaseEntry> loaded_cases;
    std::map<std::string, std::size_t> idx;
    const int L = num_labels();
    for (const CaseRecord& rec : scan_dataset(opts.data_root)) {
      if (rec.num_labels != 0 && rec.num_labels != L) {
        throw Error(ErrorKind::kConfig, "model segments " + std::to_string(L) + " labels but case " + rec.case_id +
                                            " declares " + std::to_string(rec.num_labels));
      }
      CaseEntry e{rec, load_case(rec), 0.0f, 0.0f, false};
      const int expected = params.cfg.in_channels - L - 1;
      if (static_cast<int>(e.data.image.channels()) != expected) {
        throw Error(ErrorKind::kConfig, "case " + rec.case_id + " has " + std::to_string(e.data.image.channels()) +
                                            " image channels, model expects " + std::to_string(expected));
      }
      try {
        params.cfg.check_shape(e.data.image.shape());
      } catch (const Error& err) {
        throw Error(ErrorKind::kConfig, "case " + rec.case_id + ": " + err.what());
      }
      const auto ch0 = e.data.image.channel(0);
      const auto [lo, hi] = std::minmax_element(ch0.begin(), ch0.end());
      e.window_min = *lo;
      e.window_max = *hi;
      idx[rec.case_id] = loaded_cases.size();
      loaded_cases.push_back(std::move(e));
    }
    std::optional<std::vector<UncertaintyScore>> ranking;
    if (opts.rank_file) {
      std::ifstream in(*opts.rank_file);
      if (!in) throw Error(ErrorKind::kIo, "cannot open ranking " + opts.rank_file->string());
      json j;
      try {
        j = json::parse(in);
      } catch (const json::exception& e) {
        throw Error(ErrorKind::kFormat, std::string("ranking file: ") + e.what());
      }
      ranking = ranking_from_json(j);
      for (const auto& s : *ranking) {
        if (!idx.contains(s.case_id)) throw Error(ErrorKind::kConfig, "ranking names unknown case " + s.case_id);
      }
    }
    std::unique_lock lock(mu);
    cases = std::move(loaded_cases);
    index = std::move(idx);
    scores = std::move(ranking);
    loaded = true;
  }

  json case_record(const CaseEntry& e) const {
    const Shape3D& s = e.data.image.shape();
    json r = {{"case_id", e.record.case_id},
              {"labeled", e.data.labels.has_value()},
              {"shape", {s.depth, s.height, s.width}},
              {"num_labels", num_labels()},
              {"done", e.done}};
    if (scores) {
      for (const auto& sc : *scores) {
        if (sc.case_id == e.record.case_id) {
          r["uncertainty"] = sc.combined;
          r["scores"] = to_json(sc);
        }
      }
    }
    return r;
  }

  void routes() {
    http.set_pre_routing_handler([this](const httplib::Request& req, httplib::Response& res) {
      if (req.path.rfind("/api/", 0) == 0 && !loaded) {
        reply_error(res, 503, "dataset not loaded yet");
        return httplib::Server::HandlerResponse::Handled;
      }
      return httplib::Server::HandlerResponse::Unhandled;
    });
    http.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        reply_error(res, 500, e.what());
      } catch (...) {
        reply_error(res, 500, "unknown error");
      }
    });

    http.Get("/api/cases", [this](const httplib::Request&, httplib::Response& res) {
      std::shared_lock lock(mu);
      json arr = json::array();
      for (const auto& e : cases) arr.push_back(case_record(e));
      reply(res, 200, arr);
    });

    http.Get("/api/cases/:id/slice", [this](const httplib::Request& req, httplib::Response& res) { slice(req, res); });
    http.Post("/api/cases/:id/segment",
              [this](const httplib::Request& req, httplib::Response& res) { segment(req, res); });
    http.Post("/api/cases/:id/labels",
              [this](const httplib::Request& req, httplib::Response& res) { save_labels_for(req, res); });
    http.Post("/api/cases/:id/done", [this](const httplib::Request& req, httplib::Response& res) {
      std::unique_lock lock(mu);
      const auto it = index.find(req.path_params.at("id"));
      if (it == index.end()) return reply_error(res, 404, "unknown case");
      cases[it->second].done = true;
      res.status = 204;
    });
    http.Post("/api/rank", [this](const httplib::Request& req, httplib::Response& res) { rank(req, res); });
    http.Get("/api/next", [this](const httplib::Request& req, httplib::Response& res) { next(req, res); });

    if (opts.ui_dir) http.set_mount_point("/", opts.ui_dir->string());
  }

  void slice(const httplib::Request& req, httplib::Response& res) {
    std::shared_lock lock(mu);
    const CaseEntry* e = find(req.path_params.at("id"));
    if (!e) return reply_error(res, 404, "unknown case");
    const std::string axis = req.has_param("axis") ? req.get_param_value("axis") : "z";
    long long idx = 0;
    if (!parse_index(req.get_param_value("index"), idx)) return reply_error(res, 400, "index must be an integer");
    const Shape3D& s = e->data.image.shape();
    std::size_t extent = 0, rows = 0, cols = 0;
    if (axis == "z") {
      extent = s.depth, rows = s.height, cols = s.width;
    } else if (axis == "y") {
      extent = s.height, rows = s.depth, cols = s.width;
    } else if (axis == "x") {
      extent = s.width, rows = s.depth, cols = s.height;
    } else {
      return reply_error(res, 400, "axis must be z, y or x");
    }
    if (idx < 0 || static_cast<std::size_t>(idx) >= extent) {
      return reply_error(res, 400, "index " + std::to_string(idx) + " outside 0.." + std::to_string(extent - 1));
    }
    const auto k = static_cast<std::size_t>(idx);
    const float lo = e->window_min, hi = e->window_max;
    const bool degenerate = !(hi > lo);
    std::vector<std::uint8_t> px(rows * cols, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        float v = 0.0f;
        if (axis == "z") v = e->data.image.at(0, k, r, c);
        if (axis == "y") v = e->data.image.at(0, r, k, c);
        if (axis == "x") v = e->data.image.at(0, r, c, k);
        if (!degenerate) {
          const double t = (static_cast<double>(v) - lo) / (static_cast<double>(hi) - lo);
          px[r * cols + c] = static_cast<std::uint8_t>(std::clamp(std::lround(t * 255.0), 0L, 255L));
        }
      }
    }
    res.set_header("X-Window-Min", format_real(lo));
    res.set_header("X-Window-Max", format_real(hi));
    res.set_header("X-Window-Degenerate", degenerate ? "true" : "false");
    res.set_content(encode_png_gray8(cols, rows, px), "image/png");
  }

  void segment(const httplib::Request& req, httplib::Response& res) {
    LoadedCase c;
    {
      std::shared_lock lock(mu);
      const CaseEntry* e = find(req.path_params.at("id"));
      if (!e) return reply_error(res, 404, "unknown case");
      c = e->data;
    }
    const int L = num_labels();
    ClickSet clicks{L, {}};
    if (!req.body.empty()) {
      try {
        clicks = click_set_from_json(json::parse(req.body));
      } catch (const json::exception& e) {
        return reply_error(res, 400, std::string("body is not JSON: ") + e.what());
      } catch (const Error& e) {
        return reply_error(res, 400, e.what());
      }
    }
    if (!clicks.empty() && clicks.num_labels != L) {
      return reply_error(res, 422, "clicks declare " + std::to_string(clicks.num_labels) + " labels, model segments " +
                                       std::to_string(L));
    }
    const Shape3D& shape = c.image.shape();
    for (const Click& k : clicks.clicks) {
      if (!shape.contains(k.z, k.y, k.x) || k.label < 0 || k.label > L) {
        return reply(res, 422, {{"error", "click outside volume " + shape.str() + " or label outside 0.." +
                                              std::to_string(L)},
                                {"click", to_json(k)}});
      }
    }
    const LabelMap pred = predict_with_clicks(params, c.image, clicks);
    json body = {{"case_id", c.case_id}, {"model_version", version}, {"mask", to_json(encode_rle(pred))}};
    if (c.labels) {
      json d = json::object();
      for (int l = 1; l <= L; ++l) d[std::to_string(l)] = dice(pred, *c.labels, l);
      body["dice_per_label"] = d;
    }
    reply(res, 200, body);
  }

  void save_labels_for(const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.path_params.at("id");
    Shape3D shape;
    {
      std::shared_lock lock(mu);
      const CaseEntry* e = find(id);
      if (!e) return reply_error(res, 404, "unknown case");
      shape = e->data.image.shape();
    }
    LabelMap labels;
    try {
      const MaskRLE rle = mask_rle_from_json(json::parse(req.body));
      if (!(rle.shape == shape)) {
        return reply_error(res, 409, "mask shape " + rle.shape.str() + " does not match case " + shape.str());
      }
      labels = decode_rle(rle, num_labels());
    } catch (const json::exception& e) {
      return reply_error(res, 422, std::string("body is not JSON: ") + e.what());
    } catch (const Error& e) {
      return reply_error(res, 422, e.what());
    }
    std::lock_guard write(writer);
    const fs::path path = label_path_for(opts.data_root, id);
    fs::create_directories(path.parent_path());
    save_labels(labels, path);
    std::unique_lock lock(mu);
    CaseEntry& e = cases[index.at(id)];
    e.data.labels = std::move(labels);
    e.record.label_path = path;
    e.record.labeled = true;
    res.status = 204;
  }

  void rank(const httplib::Request& req, httplib::Response& res) {
    int passes = opts.rank_passes;
    std::uint64_t seed = opts.rank_seed;
    RankKey key = RankKey::kCombined;
    try {
      if (!req.body.empty()) {
        const json j = json::parse(req.body);
        passes = j.value("passes", passes);
        seed = j.value("seed", seed);
        if (j.contains("key")) key = parse_rank_key(j.at("key").get<std::string>());
      }
      if (req.has_param("key")) key = parse_rank_key(req.get_param_value("key"));
    } catch (const std::exception& e) {
      return reply_error(res, 400, e.what());
    }
    if (passes < 1) return reply_error(res, 400, "passes must be >= 1");
    std::vector<LoadedCase> snapshot;
    {
      std::shared_lock lock(mu);
      for (const auto& e : cases) snapshot.push_back(e.data);
    }
    std::vector<UncertaintyScore> all;
    for (const auto& c : snapshot) all.push_back(score_case(params, c, passes, seed));
    std::vector<UncertaintyScore> ordered;
    for (const auto& id : rank_unlabeled(all, key)) {
      for (const auto& s : all) {
        if (s.case_id == id) ordered.push_back(s);
      }
    }
    {
      std::unique_lock lock(mu);
      scores = ordered;
    }
    reply(res, 200, ranking_to_json(ordered, key, passes, seed));
  }

  void next(const httplib::Request& req, httplib::Response& res) {
    RankKey key = RankKey::kCombined;
    try {
      if (req.has_param("key")) key = parse_rank_key(req.get_param_value("key"));
    } catch (const Error& e) {
      return reply_error(res, 400, e.what());
    }
    std::shared_lock lock(mu);
    if (!scores) return reply_error(res, 409, "no ranking computed; POST /api/rank first");
    std::vector<UncertaintyScore> pool;
    for (const auto& s : *scores) {
      const CaseEntry* e = find(s.case_id);
      if (e && !e->data.labels && !e->done) pool.push_back(s);
    }
    const auto order = rank_unlabeled(pool, key);
    if (order.empty()) return reply_error(res, 404, "no unlabeled cases left");
    for (const auto& s : pool) {
      if (s.case_id == order.front()) {
        return reply(res, 200, {{"case_id", s.case_id}, {"score", score_for(s, key)}, {"key", rank_key_name(key)}});
      }
    }
  }
};

Server::Server(ModelParams params, ServerOptions options)
    : impl_(std::make_unique<Impl>(std::move(params), std::move(options))) {}

Server::~Server() = default;

void Server::load_dataset() { impl_->load(); }

int Server::bind(const std::string& host, int port) { return impl_->http.bind_to_port(host, port) ? port : -1; }

int Server::bind_any_port(const std::string& host) { return impl_->http.bind_to_any_port(host); }

bool Server::listen_after_bind() { return impl_->http.listen_after_bind(); }

void Server::stop() { impl_->http.stop(); }

void Server::wait_until_ready() const { impl_->http.wait_until_ready(); }

}  // namespace deepedit
