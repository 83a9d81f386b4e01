#pragma once

// HTTP/JSON session API over the pipeline. Sessions live on disk (one
// directory each); a bounded LRU keeps recently used ones in memory. Each
// session has its own mutex so requests against one session are serialized
// while different sessions proceed independently.

#include <filesystem>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

// Eigen (via pipeline.hpp) must come before httplib: <resolv.h> defines a
// `_res` macro that collides with Eigen parameter names.
#include "pipeline.hpp"

#include <httplib.h>
#include <sodium.h>

namespace toddler {

// ---------------------------------------------------------------------------
// Encoding helpers (libsodium)
// ---------------------------------------------------------------------------

inline void ensure_sodium() {
  static const int ok = sodium_init();
  require(ok >= 0, ErrorKind::io, "libsodium failed to initialise");
}

inline std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
  ensure_sodium();
  const std::size_t n = sodium_base64_encoded_len(bytes.size(), sodium_base64_VARIANT_ORIGINAL);
  std::string out(n, '\0');
  sodium_bin2base64(out.data(), n, bytes.data(), bytes.size(), sodium_base64_VARIANT_ORIGINAL);
  out.resize(n - 1);  // drop the terminator
  return out;
}

inline std::vector<std::uint8_t> base64_decode(const std::string& text) {
  ensure_sodium();
  std::vector<std::uint8_t> out(text.size() / 4 * 3 + 3);
  std::size_t len = 0;
  const char* end = nullptr;
  const int rc = sodium_base642bin(out.data(), out.size(), text.data(), text.size(), " \t\r\n", &len, &end,
                                   sodium_base64_VARIANT_ORIGINAL);
  require(rc == 0 && end == text.data() + text.size(), ErrorKind::invalid_argument, "invalid base64 payload");
  out.resize(len);
  return out;
}

/// Random (version 4) UUID.
inline std::string uuid_v4() {
  ensure_sodium();
  std::uint8_t b[16];
  randombytes_buf(b, sizeof b);
  b[6] = static_cast<std::uint8_t>((b[6] & 0x0F) | 0x40);
  b[8] = static_cast<std::uint8_t>((b[8] & 0x3F) | 0x80);
  char hex[33];
  sodium_bin2hex(hex, sizeof hex, b, sizeof b);
  const std::string h(hex);
  return h.substr(0, 8) + "-" + h.substr(8, 4) + "-" + h.substr(12, 4) + "-" + h.substr(16, 4) + "-" + h.substr(20);
}

inline bool is_uuid(const std::string& s) {
  if (s.size() != 36) return false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const bool dash = i == 8 || i == 13 || i == 18 || i == 23;
    if (dash ? s[i] != '-' : !std::isxdigit(static_cast<unsigned char>(s[i]))) return false;
  }
  return true;
}

/// Gray uploads saved as RGB keep their exact values; anything else goes
/// through luminance.
inline ImageGrid gray_from_rgb(const ImageGrid& rgb) {
  const auto& v = rgb.values();
  std::vector<double> out(v.size() / 3);
  for (std::size_t p = 0; p < out.size(); ++p) {
    if (v[3 * p] != v[3 * p + 1] || v[3 * p] != v[3 * p + 2]) return luminance(rgb);
    out[p] = v[3 * p];
  }
  return ImageGrid(Shape{rgb.height(), rgb.width(), 1}, std::move(out));
}

// ---------------------------------------------------------------------------
// API description served at GET /spec
// ---------------------------------------------------------------------------

inline const Json& service_api_description() {
  static const Json doc = Json::parse(R"({
  "openapi": "3.0.3",
  "info": {"title": "toddler session API", "version": "1"},
  "paths": {
    "/sessions": {"post": {
      "summary": "Create a session; noise for every stage is sampled once and frozen.",
      "requestBody": {"content": {"application/json": {"schema": {"type": "object", "required": ["seed"],
        "properties": {"seed": {"type": "integer", "minimum": 0},
                       "steps": {"oneOf": [{"type": "integer"}, {"type": "array", "items": {"type": "integer"}}]},
                       "trunc_s": {"type": "integer", "minimum": 0},
                       "coefficients": {"enum": ["oracle-derived", "paper-literal"]},
                       "pipeline": {"type": "object"}}}}}},
      "responses": {"201": {"description": "{id, stages}"}, "400": {"description": "bad request"},
                    "409": {"description": "checkpoints missing or not matching the pipeline"}}}},
    "/sessions/{id}": {"get": {"summary": "Session status",
      "responses": {"200": {"description": "{id, stages:[{index, kind, status}], edits, sampler}"},
                    "404": {"description": "unknown session"}}}},
    "/sessions/{id}/stages/{j}/run": {"post": {"summary": "Run stage j (1-based). Rerunning a finished stage is a no-op.",
      "responses": {"200": {"description": "{stage, status, rerun}"}, "404": {"description": "unknown session or stage"},
                    "409": {"description": "an earlier stage is still pending"}}}},
    "/sessions/{id}/stages/{j}/output": {
      "get": {"summary": "Stage output as PNG, or ?format=json for a flat H*W*C array of values in [0,1]",
        "responses": {"200": {"description": "image/png or application/json"}, "404": {"description": "unknown session or stage"},
                      "409": {"description": "stage pending"}}},
      "put": {"summary": "Replace stage j output (binary sketch for j=1); downstream stages become pending and the edit is logged.",
        "requestBody": {"content": {"application/json": {"schema": {"type": "object", "required": ["png"],
          "properties": {"png": {"type": "string", "description": "base64-encoded PNG"}}}}}},
        "responses": {"200": {"description": "{stage, pending}"}, "400": {"description": "bad payload or wrong size"},
                      "404": {"description": "unknown session or stage"}, "409": {"description": "stage has no output yet"}}}},
    "/sessions/{id}/resume": {"post": {"summary": "Run every pending stage in order.",
      "responses": {"200": {"description": "{rerun:[stages]}"}, "404": {"description": "unknown session"},
                    "409": {"description": "nothing pending"}}}},
    "/spec": {"get": {"summary": "This document", "responses": {"200": {"description": "OpenAPI JSON"}}}}
  }
})");
  return doc;
}

// ---------------------------------------------------------------------------
// Session store
// ---------------------------------------------------------------------------

struct ServiceOptions {
  std::filesystem::path session_dir = "sessions";
  std::filesystem::path checkpoint_dir = "runs/default";  // stage{j}.ckpt
  PipelineSpec default_pipeline = PipelineSpec::two_stage();
  std::size_t max_resident = 64;  // sessions kept in memory
};

/// HTTP-free core so the semantics are testable without sockets.
class SessionStore {
 public:
  struct Reply {
    int status = 200;
    Json body = Json::object();
    std::string content_type = "application/json";
    std::string raw;  // non-JSON payload (PNG)
  };

  explicit SessionStore(ServiceOptions opts) : opts_(std::move(opts)) {
    ensure_sodium();
    std::filesystem::create_directories(opts_.session_dir);
  }

  const ServiceOptions& options() const { return opts_; }

  Reply create(const std::string& body) {
    return guarded([&] {
      const Json req = parse_body(body);
      if (!req.contains("seed")) return error(400, "'seed' is required");
      for (const auto& [k, _] : req.items())
        if (k != "seed" && k != "steps" && k != "trunc_s" && k != "coefficients" && k != "pipeline")
          return error(400, "unknown field '" + k + "'");
      if (!req["seed"].is_number_integer() || req["seed"].get<long long>() < 0)
        return error(400, "'seed' must be a non-negative integer");
      PipelineSpec spec = opts_.default_pipeline;
      if (req.contains("pipeline")) spec = pipeline_spec_from_json(req["pipeline"]);
      Json sj = {{"seed", req["seed"]}};
      for (const char* k : {"steps", "trunc_s", "coefficients"})
        if (req.contains(k)) sj[k] = req[k];
      const SamplerConfig cfg = sampler_config_from_json(sj);
      cfg.validate(spec);
      std::shared_ptr<const Pipeline> pipe = pipeline_for(spec);
      if (!pipe) return error(409, "checkpoints for this pipeline are missing in " + opts_.checkpoint_dir.string());
      auto entry = std::make_shared<Entry>();
      entry->pipeline = pipe;
      entry->state = pipe->open(cfg, uuid_v4());
      const std::string id = entry->state->id;
      save_session(*entry->state, opts_.session_dir / id);
      remember(id, entry);
      Reply r;
      r.status = 201;
      r.body = {{"id", id}, {"stages", spec.size()}};
      return r;
    });
  }

  Reply status(const std::string& id) {
    return with_session(id, [&](Entry& e) {
      const SessionState& s = *e.state;
      Json stages = Json::array();
      for (const auto& st : s.spec.stages)
        stages.push_back({{"index", st.index},
                          {"kind", to_string(st.kind())},
                          {"status", st.index <= s.completed() ? "done" : "pending"}});
      Reply r;
      r.body = {{"id", s.id}, {"stages", stages}, {"edits", s.edits.size()}, {"sampler", to_json(s.sampler)},
                {"pipeline", to_json(s.spec)}};
      return r;
    });
  }

  Reply run_stage(const std::string& id, int j) {
    return with_session(id, [&](Entry& e) {
      SessionState& s = *e.state;
      if (j < 1 || j > static_cast<int>(s.spec.size())) return error(404, "no stage " + std::to_string(j));
      const bool already = j <= s.completed();
      e.pipeline->run(s, j);
      if (!already) persist(e);
      Reply r;
      r.body = {{"stage", j}, {"status", "done"}, {"rerun", already}};
      return r;
    });
  }

  Reply output(const std::string& id, int j, bool as_json) {
    return with_session(id, [&](Entry& e) {
      const SessionState& s = *e.state;
      if (j < 1 || j > static_cast<int>(s.spec.size())) return error(404, "no stage " + std::to_string(j));
      if (j > s.completed()) return error(409, "stage " + std::to_string(j) + " is pending");
      const ImageGrid& img = s.x_inter[static_cast<std::size_t>(j - 1)].image;
      Reply r;
      if (as_json) {
        r.body = img.values();
      } else {
        const auto png = encode_png(img);
        r.raw.assign(png.begin(), png.end());
        r.content_type = "image/png";
      }
      return r;
    });
  }

  Reply edit(const std::string& id, int j, const std::string& body) {
    return with_session(id, [&](Entry& e) {
      SessionState& s = *e.state;
      if (j < 1 || j > static_cast<int>(s.spec.size())) return error(404, "no stage " + std::to_string(j));
      if (j > s.completed()) return error(409, "stage " + std::to_string(j) + " has no output to edit");
      const Json req = parse_body(body);
      if (!req.contains("png") || !req["png"].is_string()) return error(400, "'png' (base64 string) is required");
      ImageGrid img = decode_png(base64_decode(req["png"].get<std::string>()));
      const Shape want = s.spec.shape(j);
      if (want.channels == 1 && img.channels() == 3) img = gray_from_rgb(img);
      if (!(img.shape() == want))
        return error(400, "expected a " + to_string(want) + " image, got " + to_string(img.shape()));
      e.pipeline->set_output(s, j, img);
      persist(e);
      Json pending = Json::array();
      for (int k = j + 1; k <= static_cast<int>(s.spec.size()); ++k) pending.push_back(k);
      Reply r;
      r.body = {{"stage", j}, {"pending", pending}};
      return r;
    });
  }

  Reply resume(const std::string& id) {
    return with_session(id, [&](Entry& e) {
      SessionState& s = *e.state;
      if (s.done()) return error(409, "nothing pending");
      Json rerun = Json::array();
      for (int j = s.completed() + 1; j <= static_cast<int>(s.spec.size()); ++j) {
        e.pipeline->run(s, j);
        rerun.push_back(j);
      }
      persist(e);
      Reply r;
      r.body = {{"rerun", rerun}};
      return r;
    });
  }

  std::size_t resident() const {
    std::lock_guard lock(mu_);
    return lru_.size();
  }

 private:
  struct Entry {
    std::mutex mu;
    std::shared_ptr<const Pipeline> pipeline;
    std::optional<SessionState> state;
  };

  static Reply error(int status, const std::string& msg) {
    Reply r;
    r.status = status;
    r.body = {{"error", msg}};
    return r;
  }

  static Json parse_body(const std::string& body) {
    try {
      return Json::parse(body.empty() ? std::string("{}") : body);
    } catch (const Json::exception& ex) {
      throw Error(ErrorKind::invalid_argument, std::string("malformed JSON body: ") + ex.what());
    }
  }

  static int status_for(ErrorKind k) {
    switch (k) {
      case ErrorKind::order: return 409;
      case ErrorKind::io:
      case ErrorKind::numeric: return 500;
      default: return 400;
    }
  }

  template <class F>
  Reply guarded(F&& f) {
    try {
      return f();
    } catch (const Error& ex) {
      return error(status_for(ex.kind()), ex.what());
    } catch (const Json::exception& ex) {
      return error(400, ex.what());
    } catch (const std::exception& ex) {
      return error(500, ex.what());
    }
  }

  template <class F>
  Reply with_session(const std::string& id, F&& f) {
    return guarded([&] {
      std::shared_ptr<Entry> e = lookup(id);
      if (!e) return error(404, "unknown session '" + id + "'");
      std::lock_guard lock(e->mu);
      return f(*e);
    });
  }

  void persist(const Entry& e) const { save_session(*e.state, opts_.session_dir / e.state->id); }

  /// Loads the stage checkpoints for `spec` once; null when any is missing or mismatched.
  std::shared_ptr<const Pipeline> pipeline_for(const PipelineSpec& spec) {
    const std::string key = to_json(spec).dump();
    std::lock_guard lock(pipe_mu_);
    if (auto it = pipelines_.find(key); it != pipelines_.end()) return it->second;
    std::vector<Checkpoint> cks;
    for (const auto& st : spec.stages) {
      const auto path = opts_.checkpoint_dir / ("stage" + std::to_string(st.index) + ".ckpt");
      if (!std::filesystem::exists(path)) return nullptr;
      cks.push_back(load_checkpoint(path));
    }
    std::shared_ptr<const Pipeline> p;
    try {
      p = std::make_shared<const Pipeline>(Pipeline::from_checkpoints(spec, cks));
    } catch (const Error&) {
      return nullptr;
    }
    pipelines_.emplace(key, p);
    return p;
  }

  std::shared_ptr<Entry> lookup(const std::string& id) {
    if (!is_uuid(id)) return nullptr;
    {
      std::lock_guard lock(mu_);
      if (auto it = index_.find(id); it != index_.end()) {
        lru_.splice(lru_.begin(), lru_, it->second);
        return it->second->second;
      }
    }
    const auto dir = opts_.session_dir / id;
    if (!std::filesystem::exists(dir / "manifest.json")) return nullptr;
    auto e = std::make_shared<Entry>();
    e->state = load_session(dir);
    e->pipeline = pipeline_for(e->state->spec);
    require(e->pipeline != nullptr, ErrorKind::order, "checkpoints for this session's pipeline are missing");
    return remember(id, e);
  }

  std::shared_ptr<Entry> remember(const std::string& id, std::shared_ptr<Entry> e) {
    std::lock_guard lock(mu_);
    if (auto it = index_.find(id); it != index_.end()) return it->second->second;  // lost a load race
    lru_.emplace_front(id, std::move(e));
    index_[id] = lru_.begin();
    // Evicted sessions stay on disk and reload on next use.
    while (lru_.size() > std::max<std::size_t>(1, opts_.max_resident)) {
      index_.erase(lru_.back().first);
      lru_.pop_back();
    }
    return lru_.front().second;
  }

  ServiceOptions opts_;
  mutable std::mutex mu_;
  std::list<std::pair<std::string, std::shared_ptr<Entry>>> lru_;
  std::map<std::string, std::list<std::pair<std::string, std::shared_ptr<Entry>>>::iterator> index_;
  std::mutex pipe_mu_;
  std::map<std::string, std::shared_ptr<const Pipeline>> pipelines_;
};

// ---------------------------------------------------------------------------
// HTTP front end
// ---------------------------------------------------------------------------

class SessionServer {
 public:
  explicit SessionServer(ServiceOptions opts) : store_(std::move(opts)) { routes(); }
  ~SessionServer() { stop(); }

  SessionStore& store() { return store_; }

  /// Binds to an ephemeral port and serves on a background thread.
  int start_background(const std::string& host = "127.0.0.1") {
    const int port = http_.bind_to_any_port(host);
    require(port > 0, ErrorKind::io, "service: could not bind");
    thread_ = std::thread([this] { http_.listen_after_bind(); });
    http_.wait_until_ready();
    return port;
  }

  /// Blocks until stop().
  bool listen(const std::string& host, int port) { return http_.listen(host, port); }

  void stop() {
    http_.stop();
    if (thread_.joinable()) thread_.join();
  }

 private:
  static void send(httplib::Response& res, const SessionStore::Reply& r) {
    res.status = r.status;
    if (r.content_type == "application/json")
      res.set_content(r.body.dump(), "application/json");
    else
      res.set_content(r.raw, r.content_type);
  }

  static int stage_index(const std::string& s) {
    try {
      return std::stoi(s);
    } catch (const std::exception&) {
      return 0;
    }
  }

  void routes() {
    http_.set_payload_max_length(16u << 20);
    http_.Post("/sessions", [this](const httplib::Request& q, httplib::Response& r) { send(r, store_.create(q.body)); });
    http_.Get(R"(/sessions/([^/]+))", [this](const httplib::Request& q, httplib::Response& r) {
      send(r, store_.status(q.matches[1]));
    });
    http_.Post(R"(/sessions/([^/]+)/stages/(\d+)/run)", [this](const httplib::Request& q, httplib::Response& r) {
      send(r, store_.run_stage(q.matches[1], stage_index(q.matches[2])));
    });
    http_.Get(R"(/sessions/([^/]+)/stages/(\d+)/output)", [this](const httplib::Request& q, httplib::Response& r) {
      const bool as_json = q.has_param("format") && q.get_param_value("format") == "json";
      if (q.has_param("format") && !as_json && q.get_param_value("format") != "png") {
        SessionStore::Reply bad;
        bad.status = 400;
        bad.body = {{"error", "format must be png or json"}};
        send(r, bad);
        return;
      }
      send(r, store_.output(q.matches[1], stage_index(q.matches[2]), as_json));
    });
    http_.Put(R"(/sessions/([^/]+)/stages/(\d+)/output)", [this](const httplib::Request& q, httplib::Response& r) {
      send(r, store_.edit(q.matches[1], stage_index(q.matches[2]), q.body));
    });
    http_.Post(R"(/sessions/([^/]+)/resume)", [this](const httplib::Request& q, httplib::Response& r) {
      send(r, store_.resume(q.matches[1]));
    });
    http_.Get("/spec", [](const httplib::Request&, httplib::Response& r) {
      r.set_content(service_api_description().dump(2), "application/json");
    });
  }

  SessionStore store_;
  httplib::Server http_;
  std::thread thread_;
};

}  // namespace toddler
