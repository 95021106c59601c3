#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <thread>

#include "doctest.h"
#include "httplib.h"
#include "deepedit/error.hpp"
#include "deepedit/png.hpp"
#include "deepedit/rle.hpp"
#include "deepedit/server.hpp"
#include "deepedit/volume_io.hpp"
#include "test_util.hpp"

using namespace deepedit;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::uint32_t get_u32(const std::string& s, std::size_t at) {
  const auto* p = reinterpret_cast<const unsigned char*>(s.data() + at);
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | p[3];
}

struct Gray8 {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;
};

// Minimal reader for unfiltered 8-bit grayscale PNGs; checks every CRC.
Gray8 decode_png(const std::string& png) {
  REQUIRE(png.compare(0, 8, std::string("\x89PNG\r\n\x1a\n", 8)) == 0);
  Gray8 img;
  std::string idat;
  std::size_t at = 8;
  bool ended = false;
  while (at + 12 <= png.size()) {
    const std::uint32_t len = get_u32(png, at);
    const std::string type = png.substr(at + 4, 4);
    const auto* body = reinterpret_cast<const Bytef*>(png.data() + at + 4);
    REQUIRE(get_u32(png, at + 8 + len) == crc32(0L, body, len + 4));
    if (type == "IHDR") {
      img.width = get_u32(png, at + 8);
      img.height = get_u32(png, at + 12);
      REQUIRE(png[at + 16] == 8);
      REQUIRE(png[at + 17] == 0);
    } else if (type == "IDAT") {
      idat += png.substr(at + 8, len);
    } else if (type == "IEND") {
      ended = true;
    }
    at += 12 + len;
  }
  REQUIRE(ended);
  std::vector<Bytef> raw(img.height * (img.width + 1));
  uLongf raw_size = raw.size();
  REQUIRE(uncompress(raw.data(), &raw_size, reinterpret_cast<const Bytef*>(idat.data()), idat.size()) == Z_OK);
  REQUIRE(raw_size == raw.size());
  for (std::size_t r = 0; r < img.height; ++r) {
    REQUIRE(raw[r * (img.width + 1)] == 0);
    img.pixels.insert(img.pixels.end(), raw.begin() + r * (img.width + 1) + 1, raw.begin() + (r + 1) * (img.width + 1));
  }
  return img;
}

ServerOptions options_for(const fs::path& root) {
  ServerOptions o;
  o.data_root = root;
  return o;
}

ModelParams tiny_model(int num_labels, std::uint64_t seed = 3) {
  ArchConfig a;
  a.in_channels = 1 + num_labels + 1;
  a.num_classes = num_labels + 1;
  a.base_width = 2;
  a.levels = 2;
  SeededRng rng(seed);
  return init_model(a, rng);
}

// Two labeled and two unlabeled 8^3 cases with L = 2.
void write_dataset(const fs::path& root) {
  SynthConfig cfg = default_synth_config(2);
  cfg.shape = Shape3D(8, 8, 8);
  cfg.min_radius = 1.0;
  cfg.max_radius = 2.5;
  for (int i = 0; i < 4; ++i) {
    SeededRng rng(100 + i);
    auto [img, lab] = generate_synthetic_case(cfg, rng);
    const std::string id = "c" + std::to_string(i);
    save_volume(img, image_path_for(root, id));
    if (i < 2) save_labels(lab, label_path_for(root, id));
  }
}

class Running {
 public:
  Running(ModelParams params, ServerOptions opts) : server_(std::move(params), std::move(opts)) {
    port_ = server_.bind_any_port("127.0.0.1");
    REQUIRE(port_ > 0);
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~Running() {
    server_.stop();
    thread_.join();
  }
  Server& server() { return server_; }
  httplib::Client client() const { return httplib::Client("127.0.0.1", port_); }

 private:
  Server server_;
  int port_ = -1;
  std::thread thread_;
};

json body_of(const httplib::Result& r) {
  REQUIRE(r);
  return json::parse(r->body);
}

}  // namespace

TEST_CASE("rle round trip on random label maps") {
  for (std::uint64_t s = 0; s < 50; ++s) {
    const LabelMap m = testutil::random_labels(Shape3D(3 + s % 4, 5, 2 + s % 3), 3, s);
    const MaskRLE rle = encode_rle(m);
    CHECK(decode_rle(rle, 3) == m);
    CHECK(mask_rle_from_json(json::parse(to_json(rle).dump())) == rle);
  }
  LabelMap empty(Shape3D(2, 2, 2), 2);
  CHECK(encode_rle(empty).runs.empty());
  CHECK(decode_rle(encode_rle(empty), 2) == empty);
}

TEST_CASE("rle rejects malformed runs") {
  auto bad = [](const char* text) {
    CHECK_THROWS_AS(decode_rle(mask_rle_from_json(json::parse(text)), 2), Error);
  };
  bad(R"({"shape":[2,2,2],"labels":{"3":[[0,1]]}})");
  bad(R"({"shape":[2,2,2],"labels":{"0":[[0,1]]}})");
  bad(R"({"shape":[2,2,2],"labels":{"1":[[0,0]]}})");
  bad(R"({"shape":[2,2,2],"labels":{"1":[[7,2]]}})");
  bad(R"({"shape":[2,2,2],"labels":{"1":[[4,1],[0,1]]}})");
  bad(R"({"shape":[2,2,2],"labels":{"1":[[0,3]],"2":[[2,1]]}})");
  bad(R"({"shape":[2,2],"labels":{}})");
  bad(R"({"shape":[2,2,2],"labels":{"x":[[0,1]]}})");
  bad(R"({"shape":[2,2,2],"labels":{"1":[[0]]}})");
  bad(R"({"labels":{}})");
}

TEST_CASE("png encoding decodes back to the pixels") {
  std::vector<std::uint8_t> px(7 * 5);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<std::uint8_t>(i * 37);
  const Gray8 img = decode_png(encode_png_gray8(7, 5, px));
  CHECK(img.width == 7);
  CHECK(img.height == 5);
  CHECK(img.pixels == px);
  CHECK_THROWS_AS(encode_png_gray8(3, 3, px), Error);
}

TEST_CASE("ranking file round trip") {
  std::vector<UncertaintyScore> s{{"b", 0.2, 0.1, 0.3}, {"a", 0.1, 0.0, 0.1}};
  const json j = ranking_to_json(s, RankKey::kEpistemic, 5, 7);
  CHECK(j.at("key") == "epistemic");
  const auto back = ranking_from_json(json::parse(j.dump()));
  REQUIRE(back.size() == 2);
  CHECK(back[0].case_id == "b");
  CHECK(back[1].combined == s[1].combined);
  CHECK_THROWS_AS(ranking_from_json(json::parse("[]")), Error);
}

TEST_CASE("server endpoints") {
  testutil::TempDir dir;
  write_dataset(dir.path());
  const ModelParams model = tiny_model(2);
  Running run(model, options_for(dir.path()));
  auto cli = run.client();

  SUBCASE("503 until the dataset is loaded") {
    auto r = cli.Get("/api/cases");
    REQUIRE(r);
    CHECK(r->status == 503);
  }

  run.server().load_dataset();
  const LoadedCase c0 = load_case(scan_dataset(dir.path())[0]);
  const LoadedCase c2 = load_case(scan_dataset(dir.path())[2]);

  SUBCASE("case listing") {
    auto r = cli.Get("/api/cases");
    REQUIRE(r->status == 200);
    const json cases = body_of(r);
    REQUIRE(cases.size() == 4);
    CHECK(cases[0].at("case_id") == "c0");
    CHECK(cases[0].at("labeled") == true);
    CHECK(cases[3].at("labeled") == false);
    CHECK(cases[1].at("shape") == json::array({8, 8, 8}));
    CHECK(cases[1].at("num_labels") == 2);
  }

  SUBCASE("slices are windowed by the volume range") {
    const auto ch = c0.image.channel(0);
    const auto [lo, hi] = std::minmax_element(ch.begin(), ch.end());
    auto r = cli.Get("/api/cases/c0/slice?axis=z&index=3");
    REQUIRE(r->status == 200);
    CHECK(r->get_header_value("Content-Type") == "image/png");
    CHECK(r->get_header_value("X-Window-Degenerate") == "false");
    CHECK(std::stof(r->get_header_value("X-Window-Min")) == doctest::Approx(*lo));
    const Gray8 img = decode_png(r->body);
    REQUIRE(img.width == 8);
    REQUIRE(img.height == 8);
    for (std::size_t y = 0; y < 8; ++y) {
      for (std::size_t x = 0; x < 8; ++x) {
        const double t = (c0.image.at(0, 3, y, x) - *lo) / (double(*hi) - *lo);
        CHECK(img.pixels[y * 8 + x] == std::lround(t * 255.0));
      }
    }
    const Gray8 side = decode_png(cli.Get("/api/cases/c0/slice?axis=x&index=2")->body);
    const Gray8 zmax = decode_png(cli.Get("/api/cases/c0/slice?axis=z&index=7")->body);
    // Voxel (z=7, y=5, x=2) seen from both sides.
    CHECK(side.pixels[7 * 8 + 5] == zmax.pixels[5 * 8 + 2]);
    const Gray8 top = decode_png(cli.Get("/api/cases/c0/slice?axis=y&index=5")->body);
    CHECK(top.pixels[7 * 8 + 2] == zmax.pixels[5 * 8 + 2]);

    CHECK(cli.Get("/api/cases/c0/slice?axis=w&index=0")->status == 400);
    CHECK(cli.Get("/api/cases/c0/slice?axis=z&index=8")->status == 400);
    CHECK(cli.Get("/api/cases/c0/slice?axis=z&index=-1")->status == 400);
    CHECK(cli.Get("/api/cases/c0/slice?axis=z")->status == 400);
    CHECK(cli.Get("/api/cases/nope/slice?axis=z&index=0")->status == 404);
  }

  SUBCASE("segment") {
    auto r = cli.Post("/api/cases/c0/segment", "", "application/json");
    REQUIRE(r->status == 200);
    json j = body_of(r);
    CHECK(j.at("model_version") == model_version(model));
    CHECK(decode_rle(mask_rle_from_json(j.at("mask")), 2) == predict_auto(model, c0.image));
    CHECK(j.at("dice_per_label").size() == 2);

    const ClickSet clicks{2, {{1, 2, 3, 4}, {0, 0, 0, 0}, {2, 7, 7, 7}}};
    r = cli.Post("/api/cases/c2/segment", to_json(clicks).dump(), "application/json");
    REQUIRE(r->status == 200);
    j = body_of(r);
    CHECK(decode_rle(mask_rle_from_json(j.at("mask")), 2) == predict_with_clicks(model, c2.image, clicks));
    CHECK_FALSE(j.contains("dice_per_label"));

    const ClickSet outside{2, {{1, 2, 8, 4}}};
    r = cli.Post("/api/cases/c0/segment", to_json(outside).dump(), "application/json");
    CHECK(r->status == 422);
    CHECK(body_of(r).at("click") == to_json(outside.clicks[0]));
    const ClickSet wrong_l{3, {{1, 2, 3, 4}}};
    CHECK(cli.Post("/api/cases/c0/segment", to_json(wrong_l).dump(), "application/json")->status == 422);
    CHECK(cli.Post("/api/cases/c0/segment", "{not json", "application/json")->status == 400);
    CHECK(cli.Post("/api/cases/nope/segment", "", "application/json")->status == 404);
  }

  SUBCASE("labels are saved and the case becomes labeled") {
    LabelMap m(Shape3D(8, 8, 8), 2);
    m.at(1, 1, 1) = 1;
    m.at(4, 4, 4) = 2;
    auto r = cli.Post("/api/cases/c3/labels", to_json(encode_rle(m)).dump(), "application/json");
    REQUIRE(r->status == 204);
    CHECK(load_labels(label_path_for(dir.path(), "c3")) == m);
    CHECK(body_of(cli.Get("/api/cases"))[3].at("labeled") == true);
    LabelMap small(Shape3D(4, 8, 8), 2);
    CHECK(cli.Post("/api/cases/c3/labels", to_json(encode_rle(small)).dump(), "application/json")->status == 409);
    CHECK(cli.Post("/api/cases/c3/labels", R"({"shape":[8,8,8],"labels":{"5":[[0,1]]}})", "application/json")
              ->status == 422);
    CHECK(cli.Post("/api/cases/c3/labels", "garbage", "application/json")->status == 422);
    CHECK(cli.Post("/api/cases/nope/labels", "{}", "application/json")->status == 404);
  }

  SUBCASE("ranking drives the next case until all are done") {
    CHECK(cli.Get("/api/next")->status == 409);
    auto r = cli.Post("/api/rank", R"({"passes":3,"seed":1})", "application/json");
    REQUIRE(r->status == 200);
    const json ranking = body_of(r);
    CHECK(ranking.at("key") == "combined");
    const auto scores = ranking_from_json(ranking);
    REQUIRE(scores.size() == 4);
    for (std::size_t i = 1; i < scores.size(); ++i) CHECK(scores[i - 1].combined >= scores[i].combined);
    const UncertaintyScore expect = score_case(model, c2, 3, 1);
    for (const auto& s : scores) {
      if (s.case_id == "c2") CHECK(s.combined == expect.combined);
    }

    std::vector<std::string> unlabeled;
    for (const auto& s : scores) {
      if (s.case_id == "c2" || s.case_id == "c3") unlabeled.push_back(s.case_id);
    }
    json next = body_of(cli.Get("/api/next"));
    CHECK(next.at("case_id") == unlabeled[0]);
    CHECK(cli.Post("/api/cases/" + unlabeled[0] + "/done", "", "text/plain")->status == 204);
    next = body_of(cli.Get("/api/next"));
    CHECK(next.at("case_id") == unlabeled[1]);
    CHECK(cli.Post("/api/cases/" + unlabeled[1] + "/done", "", "text/plain")->status == 204);
    CHECK(cli.Get("/api/next")->status == 404);
    CHECK(cli.Get("/api/next?key=bogus")->status == 400);
    CHECK(cli.Post("/api/rank?key=bogus", "", "application/json")->status == 400);
    CHECK(cli.Post("/api/cases/nope/done", "", "text/plain")->status == 404);
  }
}

TEST_CASE("server load rejects a model with the wrong label count") {
  testutil::TempDir dir;
  write_dataset(dir.path());
  Server s(tiny_model(3), options_for(dir.path()));
  CHECK_THROWS_AS(s.load_dataset(), Error);
}

TEST_CASE("server load rejects a ranking naming unknown cases") {
  testutil::TempDir dir;
  write_dataset(dir.path());
  const fs::path rank = dir.path() / "rank.json";
  std::ofstream(rank) << ranking_to_json({{"ghost", 0.1, 0.1, 0.2}}, RankKey::kCombined, 2, 0).dump();
  ServerOptions opts = options_for(dir.path());
  opts.rank_file = rank;
  Server s(tiny_model(2), opts);
  CHECK_THROWS_AS(s.load_dataset(), Error);
}

TEST_CASE("segment responses are replayable and concurrency-safe") {
  testutil::TempDir dir;
  write_dataset(dir.path());
  Running run(tiny_model(2), options_for(dir.path()));
  run.server().load_dataset();
  auto cli = run.client();
  const ClickSet clicks{2, {{1, 3, 3, 3}, {0, 7, 0, 0}}};
  const std::string body = to_json(clicks).dump();
  std::vector<std::string> serial;
  for (int i = 0; i < 4; ++i) {
    serial.push_back(cli.Post("/api/cases/c" + std::to_string(i) + "/segment", body, "application/json")->body);
  }
  CHECK(cli.Post("/api/cases/c0/segment", body, "application/json")->body == serial[0]);

  std::vector<std::string> parallel(8);
  std::vector<std::thread> threads;
  for (int i = 0; i < 8; ++i) {
    threads.emplace_back([&, i] {
      auto c = run.client();
      auto r = c.Post("/api/cases/c" + std::to_string(i % 4) + "/segment", body, "application/json");
      if (r) parallel[i] = r->body;
    });
  }
  for (auto& t : threads) t.join();
  for (int i = 0; i < 8; ++i) CHECK(parallel[i] == serial[i % 4]);
}

TEST_CASE("constant volumes give a degenerate window and a black slice") {
  testutil::TempDir dir;
  save_volume(Volume(1, Shape3D(8, 8, 8), 0.5f), image_path_for(dir.path(), "flat"));
  Running run(tiny_model(2), options_for(dir.path()));
  run.server().load_dataset();
  auto r = run.client().Get("/api/cases/flat/slice?axis=z&index=0");
  REQUIRE(r->status == 200);
  CHECK(r->get_header_value("X-Window-Degenerate") == "true");
  const Gray8 img = decode_png(r->body);
  CHECK(img.width == 8);
  CHECK(std::all_of(img.pixels.begin(), img.pixels.end(), [](std::uint8_t p) { return p == 0; }));
}

TEST_CASE("an empty dataset lists no cases") {
  testutil::TempDir dir;
  fs::create_directories(dir.path() / "images");
  Running run(tiny_model(2), options_for(dir.path()));
  run.server().load_dataset();
  auto r = run.client().Get("/api/cases");
  REQUIRE(r->status == 200);
  CHECK(r->body == "[]");
}
