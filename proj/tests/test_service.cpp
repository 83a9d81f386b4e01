#include <gtest/gtest.h>

#include <filesystem>
#include <thread>

#include "toddler/service.hpp"

using namespace toddler;
namespace fs = std::filesystem;

namespace {

const PipelineSpec& spec() {
  static const PipelineSpec p = PipelineSpec::two_stage(4, 16);
  return p;
}

// Checkpoints trained once for the whole suite.
const fs::path& checkpoint_dir() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / "toddler_service_ckpt";
    fs::remove_all(d);
    fs::create_directories(d);
    const Dataset data = make_dataset(8, 5, ToyworldOptions{16, 4, 0.1});
    std::vector<const DatasetItem*> items;
    for (const auto& it : data.items) items.push_back(&it);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 4;
    for (int j = 1; j <= 2; ++j) {
      const TrainState st = train_stage(items, spec(), j, cfg);
      save_checkpoint(d / ("stage" + std::to_string(j) + ".ckpt"), stage_checkpoint(st, spec(), j, cfg));
    }
    return d;
  }();
  return dir;
}

std::string png_b64(const ImageGrid& g) { return base64_encode(encode_png(g)); }

std::string put_body(const std::string& b64) { return Json{{"png", b64}}.dump(); }

class ServiceTest : public ::testing::Test {
 protected:
  void SetUp() override {
    sessions_ = fs::temp_directory_path() / ("toddler_sessions_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                             "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(sessions_);
    server_ = std::make_unique<SessionServer>(options());
    port_ = server_->start_background();
    client_ = std::make_unique<httplib::Client>("127.0.0.1", port_);
  }
  void TearDown() override {
    client_.reset();
    server_.reset();
    fs::remove_all(sessions_);
  }

  ServiceOptions options(std::size_t resident = 64) const {
    ServiceOptions o;
    o.session_dir = sessions_;
    o.checkpoint_dir = checkpoint_dir();
    o.default_pipeline = spec();
    o.max_resident = resident;
    return o;
  }

  std::string create(std::uint64_t seed, Json extra = Json::object()) {
    extra["seed"] = seed;
    auto r = client_->Post("/sessions", extra.dump(), "application/json");
    EXPECT_TRUE(r);
    EXPECT_EQ(r->status, 201) << r->body;
    return Json::parse(r->body).at("id").get<std::string>();
  }

  int run(const std::string& id, int j) {
    return client_->Post("/sessions/" + id + "/stages/" + std::to_string(j) + "/run", "", "application/json")->status;
  }

  std::string png(const std::string& id, int j) {
    auto r = client_->Get("/sessions/" + id + "/stages/" + std::to_string(j) + "/output");
    EXPECT_EQ(r->status, 200);
    EXPECT_EQ(r->get_header_value("Content-Type"), "image/png");
    return r->body;
  }

  int put(const std::string& id, int j, const std::string& body) {
    return client_->Put("/sessions/" + id + "/stages/" + std::to_string(j) + "/output", body, "application/json")->status;
  }

  fs::path sessions_;
  std::unique_ptr<SessionServer> server_;
  int port_ = 0;
  std::unique_ptr<httplib::Client> client_;
};

}  // namespace

// ---------------------------------------------------------------------------
// Helpers
// ---------------------------------------------------------------------------

TEST(Encoding, Base64RoundTripAndRejectsGarbage) {
  const std::vector<std::uint8_t> bytes{0, 1, 2, 250, 251, 252, 253};
  EXPECT_EQ(base64_decode(base64_encode(bytes)), bytes);
  EXPECT_EQ(base64_encode({'h', 'i'}), "aGk=");
  EXPECT_EQ(base64_decode("aG\nk="), (std::vector<std::uint8_t>{'h', 'i'}));
  EXPECT_THROW(base64_decode("###"), Error);
}

TEST(Encoding, UuidsAreVersion4AndDistinct) {
  const std::string a = uuid_v4(), b = uuid_v4();
  EXPECT_TRUE(is_uuid(a));
  EXPECT_NE(a, b);
  EXPECT_EQ(a[14], '4');
  EXPECT_NE(std::string("89ab").find(a[19]), std::string::npos);
  EXPECT_FALSE(is_uuid("../../etc"));
}

// ---------------------------------------------------------------------------
// Endpoints
// ---------------------------------------------------------------------------

TEST_F(ServiceTest, SpecEndpointListsEveryRoute) {
  auto r = client_->Get("/spec");
  ASSERT_EQ(r->status, 200);
  const Json doc = Json::parse(r->body);
  for (const char* p : {"/sessions", "/sessions/{id}", "/sessions/{id}/stages/{j}/run", "/sessions/{id}/stages/{j}/output",
                        "/sessions/{id}/resume", "/spec"})
    EXPECT_TRUE(doc["paths"].contains(p)) << p;
}

TEST_F(ServiceTest, CreateValidation) {
  EXPECT_EQ(client_->Post("/sessions", "{}", "application/json")->status, 400);
  EXPECT_EQ(client_->Post("/sessions", "{ nope", "application/json")->status, 400);
  EXPECT_EQ(client_->Post("/sessions", R"({"seed": -1})", "application/json")->status, 400);
  EXPECT_EQ(client_->Post("/sessions", R"({"seed": 1, "colour": 2})", "application/json")->status, 400);
  EXPECT_EQ(client_->Post("/sessions", R"({"seed": 1, "trunc_s": 99})", "application/json")->status, 400);
  EXPECT_EQ(client_->Post("/sessions", R"({"seed": 1, "coefficients": "x"})", "application/json")->status, 400);
  auto ok = client_->Post("/sessions", R"({"seed": 1, "steps": 2, "trunc_s": 1})", "application/json");
  ASSERT_EQ(ok->status, 201);
  EXPECT_TRUE(is_uuid(Json::parse(ok->body).at("id")));
  EXPECT_TRUE(fs::exists(sessions_ / Json::parse(ok->body).at("id").get<std::string>() / "manifest.json"));
}

TEST_F(ServiceTest, MissingCheckpointsConflict) {
  ServiceOptions o = options();
  o.checkpoint_dir = sessions_ / "nothing-here";
  SessionStore store(o);
  EXPECT_EQ(store.create(R"({"seed": 1})").status, 409);
  // A pipeline that disagrees with the stored checkpoints is refused the same way.
  SessionStore ok(options());
  Json other = to_json(PipelineSpec::two_stage(6, 16));
  EXPECT_EQ(ok.create(Json{{"seed", 1}, {"pipeline", other}}.dump()).status, 409);
}

TEST_F(ServiceTest, UnknownSessionAndStage) {
  const std::string ghost = uuid_v4();
  EXPECT_EQ(client_->Get("/sessions/" + ghost)->status, 404);
  EXPECT_EQ(client_->Get("/sessions/not-a-uuid")->status, 404);
  EXPECT_EQ(run(ghost, 1), 404);
  EXPECT_EQ(client_->Post("/sessions/" + ghost + "/resume", "", "application/json")->status, 404);
  const std::string id = create(3);
  EXPECT_EQ(run(id, 3), 404);
  EXPECT_EQ(run(id, 0), 404);
  EXPECT_EQ(client_->Get("/sessions/" + id + "/stages/7/output")->status, 404);
}

TEST_F(ServiceTest, StagesRunInOrder) {
  const std::string id = create(4);
  EXPECT_EQ(run(id, 2), 409);
  EXPECT_EQ(client_->Get("/sessions/" + id + "/stages/1/output")->status, 409);
  auto first = client_->Post("/sessions/" + id + "/stages/1/run", "", "application/json");
  ASSERT_EQ(first->status, 200);
  EXPECT_FALSE(Json::parse(first->body)["rerun"].get<bool>());
  auto again = client_->Post("/sessions/" + id + "/stages/1/run", "", "application/json");
  ASSERT_EQ(again->status, 200);
  EXPECT_TRUE(Json::parse(again->body)["rerun"].get<bool>());
  const Json st = Json::parse(client_->Get("/sessions/" + id)->body);
  EXPECT_EQ(st["stages"][0]["status"], "done");
  EXPECT_EQ(st["stages"][1]["status"], "pending");
  EXPECT_EQ(run(id, 2), 200);
  EXPECT_EQ(client_->Post("/sessions/" + id + "/resume", "", "application/json")->status, 409);
}

TEST_F(ServiceTest, OutputFormats) {
  const std::string id = create(5);
  ASSERT_EQ(run(id, 1), 200);
  ASSERT_EQ(run(id, 2), 200);
  const std::string bytes = png(id, 2);
  const ImageGrid img = decode_png(std::vector<std::uint8_t>(bytes.begin(), bytes.end()));
  EXPECT_EQ(img.shape(), spec().shape(2));
  auto js = client_->Get("/sessions/" + id + "/stages/2/output?format=json");
  ASSERT_EQ(js->status, 200);
  const Json arr = Json::parse(js->body);
  ASSERT_TRUE(arr.is_array());
  EXPECT_EQ(arr.size(), static_cast<std::size_t>(16 * 16 * 3));
  for (std::size_t i = 0; i < arr.size(); ++i) EXPECT_NEAR(arr[i].get<double>(), img.values()[i], 1e-12);
  const Json sk = Json::parse(client_->Get("/sessions/" + id + "/stages/1/output?format=json")->body);
  EXPECT_EQ(sk.size(), 16u * 16u);
  for (const auto& v : sk) EXPECT_TRUE(v == 0.0 || v == 1.0);
  EXPECT_EQ(client_->Get("/sessions/" + id + "/stages/2/output?format=bmp")->status, 400);
}

TEST_F(ServiceTest, EditValidation) {
  const std::string id = create(6);
  const ImageGrid sketch = ImageGrid::filled(spec().shape(1), 0.0);
  EXPECT_EQ(put(id, 1, put_body(png_b64(sketch))), 409);  // nothing to edit yet
  ASSERT_EQ(run(id, 1), 200);
  EXPECT_EQ(put(id, 1, "{}"), 400);
  EXPECT_EQ(put(id, 1, "not json"), 400);
  EXPECT_EQ(put(id, 1, put_body("@@@")), 400);
  EXPECT_EQ(put(id, 1, put_body(base64_encode({'n', 'o', 'p', 'e'}))), 400);
  EXPECT_EQ(put(id, 1, put_body(png_b64(ImageGrid::filled(Shape{8, 8, 1}, 0.0)))), 400);
  EXPECT_EQ(put(id, 1, put_body(png_b64(ImageGrid::filled(spec().shape(1), 0.5)))), 400);  // sketches are binary
  EXPECT_EQ(put(id, 2, put_body(png_b64(ImageGrid::filled(spec().shape(2), 0.5)))), 409);  // stage 2 pending
}

TEST_F(ServiceTest, EditMarksDownstreamPendingAndResumeReruns) {
  const std::string id = create(7);
  ASSERT_EQ(run(id, 1), 200);
  ASSERT_EQ(run(id, 2), 200);
  const std::string before = png(id, 2);
  std::vector<double> px(16 * 16, 0.0);
  for (int x = 2; x < 14; ++x) px[8 * 16 + x] = 1.0;
  const ImageGrid edited(spec().shape(1), px);
  // RGB uploads of a sketch are accepted and reduced to one channel.
  auto r = client_->Put("/sessions/" + id + "/stages/1/output", put_body(png_b64(replicate_channels(edited, 3))), "application/json");
  ASSERT_EQ(r->status, 200) << r->body;
  EXPECT_EQ(Json::parse(r->body)["pending"], Json::array({2}));
  EXPECT_EQ(client_->Get("/sessions/" + id + "/stages/2/output")->status, 409);
  EXPECT_EQ(Json::parse(client_->Get("/sessions/" + id)->body)["edits"], 1);
  auto res = client_->Post("/sessions/" + id + "/resume", "", "application/json");
  ASSERT_EQ(res->status, 200);
  EXPECT_EQ(Json::parse(res->body)["rerun"], Json::array({2}));
  EXPECT_EQ(png(id, 1), std::string(reinterpret_cast<const char*>(encode_png(edited).data()), encode_png(edited).size()));
  EXPECT_NE(png(id, 2), before);
}

// Same seed, same PNG bytes; and putting back the unedited image is the identity.
TEST_F(ServiceTest, DeterministicReplayAndIdentityEdit) {
  const std::string a = create(11, {{"trunc_s", 1}}), b = create(11, {{"trunc_s", 1}});
  for (const auto& id : {a, b}) {
    ASSERT_EQ(run(id, 1), 200);
    ASSERT_EQ(run(id, 2), 200);
  }
  EXPECT_EQ(png(a, 1), png(b, 1));
  const std::string final_a = png(a, 2);
  EXPECT_EQ(final_a, png(b, 2));
  const std::string sk = png(a, 1);
  ASSERT_EQ(put(a, 1, put_body(base64_encode(std::vector<std::uint8_t>(sk.begin(), sk.end())))), 200);
  ASSERT_EQ(client_->Post("/sessions/" + a + "/resume", "", "application/json")->status, 200);
  EXPECT_EQ(png(a, 2), final_a);
}

TEST_F(ServiceTest, SessionsSurviveRestartAndEviction) {
  const std::string id = create(13);
  ASSERT_EQ(run(id, 1), 200);
  const std::string sk = png(id, 1);
  client_.reset();
  server_.reset();
  SessionStore store(options(1));
  EXPECT_EQ(store.status(id).status, 200);
  EXPECT_EQ(store.output(id, 1, false).raw, sk);
  const auto other = store.create(R"({"seed": 14})").body.at("id").get<std::string>();
  EXPECT_EQ(store.resident(), 1u);
  EXPECT_EQ(store.run_stage(id, 2).status, 200);  // reloaded from disk
  EXPECT_EQ(store.run_stage(other, 1).status, 200);
  EXPECT_EQ(store.output(id, 2, false).status, 200);
  EXPECT_EQ(store.resident(), 1u);
}

TEST_F(ServiceTest, ConcurrentSessionsMatchSerialOutputs) {
  std::vector<std::string> ids;
  for (int i = 0; i < 4; ++i) ids.push_back(create(20 + i));
  std::vector<std::thread> ts;
  for (const auto& id : ids)
    ts.emplace_back([this, id] {
      httplib::Client c("127.0.0.1", port_);
      c.Post("/sessions/" + id + "/stages/1/run", "", "application/json");
      c.Post("/sessions/" + id + "/stages/2/run", "", "application/json");
    });
  for (auto& t : ts) t.join();
  for (int i = 0; i < 4; ++i) {
    const std::string again = create(20 + i);
    ASSERT_EQ(run(again, 1), 200);
    ASSERT_EQ(run(again, 2), 200);
    EXPECT_EQ(png(ids[static_cast<std::size_t>(i)], 2), png(again, 2));
  }
}
