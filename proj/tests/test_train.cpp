#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "sod/checkpoint.hpp"
#include "sod/train.hpp"
#include "sod/zoo.hpp"

using namespace sod;
namespace fs = std::filesystem;

namespace {

std::string tmp_dir(const char* tag) {
  std::string d = (fs::temp_directory_path() / (std::string("sod_train_") + tag)).string();
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

TrainConfig tiny_cfg(const std::string& model, int epochs) {
  TrainConfig cfg;
  cfg.model = model;
  cfg.imgsz = 64;
  cfg.epochs = epochs;
  cfg.batch_size = 2;
  cfg.warmup_epochs = 1;
  cfg.seed = 7;
  cfg.aug.hsv_s = cfg.aug.hsv_v = cfg.aug.scale = cfg.aug.mixup = 0;
  return cfg;
}

}  // namespace

TEST_CASE("lr schedule hits its endpoints exactly and decays monotonically") {
  TrainConfig cfg;
  cfg.epochs = 100;
  cfg.lr0 = 0.01;
  cfg.lrf = 0.1;
  cfg.warmup_epochs = 3;
  CHECK(lr_at(0, cfg) == doctest::Approx(cfg.lr0 / 100).epsilon(1e-12));
  // warmup end meets the main schedule continuously
  real e = cfg.warmup_epochs;
  real want = cfg.lr0 * ((1 - e / 100) * (1 - cfg.lrf) + cfg.lrf);
  CHECK(lr_at(e, cfg) == doctest::Approx(want).epsilon(1e-12));
  CHECK(lr_at(100, cfg) == doctest::Approx(cfg.lr0 * cfg.lrf).epsilon(1e-12));
  // halfway through warmup sits at the midpoint of the ramp
  CHECK(lr_at(1.5, cfg) == doctest::Approx((cfg.lr0 / 100 + want) / 2).epsilon(1e-12));
  real prev = lr_at(0, cfg);
  for (real x = real(0.25); x <= 3; x += real(0.25)) {
    real v = lr_at(x, cfg);
    CHECK(v > prev);  // warmup rises
    prev = v;
  }
  for (real x = real(3.5); x <= 100; x += real(0.5)) {
    real v = lr_at(x, cfg);
    CHECK(v < prev);  // decay falls
    prev = v;
  }
  // warmup longer than the run clamps to the run length and stays positive
  TrainConfig shorty = cfg;
  shorty.epochs = 2;
  for (real x = 0; x <= 2; x += real(0.1)) CHECK(lr_at(x, shorty) > 0);
}

TEST_CASE("config validation names the offending field") {
  auto expect = [](TrainConfig cfg, const char* field) {
    try {
      cfg.validate();
      FAIL("expected ConfigError for ", field);
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find(field) != std::string::npos);
    }
  };
  TrainConfig ok;
  ok.validate();
  TrainConfig c = ok;
  c.model = "resnet50";
  expect(c, "model");
  c = ok;
  c.lrf = 0;
  expect(c, "lrf");
  c = ok;
  c.epochs = 0;
  expect(c, "epochs");
  c = ok;
  c.momentum = 1.0;
  expect(c, "momentum");
  c = ok;
  c.batch_size = 0;
  expect(c, "batch_size");
  c = ok;
  c.lr0 = -0.01;
  expect(c, "lr0");
  c = ok;
  c.conf_thresh = 0;
  expect(c, "conf_thresh");
}

TEST_CASE("config file round-trips every field") {
  std::string d = tmp_dir("cfg");
  TrainConfig cfg;
  cfg.model = "gelan-repvit-mini";
  cfg.imgsz = 96;
  cfg.epochs = 17;
  cfg.batch_size = 3;
  cfg.lr0 = 0.02;
  cfg.lrf = 0.25;
  cfg.momentum = 0.9;
  cfg.weight_decay = 0.001;
  cfg.ema_decay = 0.9;
  cfg.warmup_epochs = 2.5;
  cfg.seed = 1234567;
  cfg.gains.box = 0.07;
  cfg.aug.scale = 0.3;
  cfg.early_stop_map50 = 0.5;
  save_train_config(d + "/t.cfg", cfg);
  TrainConfig back = load_train_config(d + "/t.cfg");
  CHECK(back.model == cfg.model);
  CHECK(back.imgsz == cfg.imgsz);
  CHECK(back.epochs == cfg.epochs);
  CHECK(back.batch_size == cfg.batch_size);
  CHECK(back.lr0 == doctest::Approx(cfg.lr0).epsilon(1e-9));
  CHECK(back.lrf == doctest::Approx(cfg.lrf).epsilon(1e-9));
  CHECK(back.momentum == doctest::Approx(cfg.momentum).epsilon(1e-9));
  CHECK(back.weight_decay == doctest::Approx(cfg.weight_decay).epsilon(1e-9));
  CHECK(back.ema_decay == doctest::Approx(cfg.ema_decay).epsilon(1e-9));
  CHECK(back.warmup_epochs == doctest::Approx(cfg.warmup_epochs).epsilon(1e-9));
  CHECK(back.seed == cfg.seed);
  CHECK(back.gains.box == doctest::Approx(cfg.gains.box).epsilon(1e-9));
  CHECK(back.aug.scale == doctest::Approx(cfg.aug.scale).epsilon(1e-9));
  CHECK(back.early_stop_map50 == doctest::Approx(cfg.early_stop_map50).epsilon(1e-9));
}

TEST_CASE("config loader rejects junk with line numbers") {
  std::string d = tmp_dir("cfgbad");
  std::ofstream(d + "/a.cfg") << "nothing 1\n";
  CHECK_THROWS_AS(load_train_config(d + "/a.cfg"), ConfigError);
  std::ofstream(d + "/b.cfg") << "sodtrain 1\nwidgets 3\n";
  try {
    load_train_config(d + "/b.cfg");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    CHECK(std::string(e.what()).find("widgets") != std::string::npos);
  }
  // invalid value combinations are caught at load time
  std::ofstream(d + "/c.cfg") << "sodtrain 1\nlrf 0\n";
  CHECK_THROWS_AS(load_train_config(d + "/c.cfg"), ConfigError);
}

TEST_CASE("weight decay targets exactly the conv and linear weights") {
  for (const std::string& name : zoo_names()) {
    Model m = Model::build(zoo_spec(name, 3, 64), 1);
    std::vector<NamedTensor> params = m.parameters();
    int decayed = 0;
    for (auto& [pname, t] : params) {
      std::string leaf = pname.substr(pname.rfind('.') + 1);
      bool is_matrix = t.rank() >= 2;  // conv [Cout,Cin,k,k] or linear [Din,Dout]
      bool is_embedding = leaf == "pos" || leaf == "cls";
      if (decays(pname)) {
        CHECK(is_matrix);
        CHECK(!is_embedding);
        ++decayed;
      } else {
        // everything exempt is a bias, norm affine or embedding
        CHECK((t.rank() == 1 || is_embedding));
      }
    }
    CHECK(decayed > 10);
    CHECK(decayed < static_cast<int>(params.size()));
  }
}

TEST_CASE("sgd step matches the hand-iterated momentum recurrence") {
  // Single decayed weight w (name ".w") and one exempt bias b.
  Tensor w({2}, {1.0, -2.0});
  Tensor b({2}, {0.5, 0.25});
  w.set_requires_grad(true);
  b.set_requires_grad(true);
  std::vector<NamedTensor> params{{"layer0.w", w}, {"layer0.b", b}};
  std::vector<std::vector<real>> vel(2, std::vector<real>(2, 0));
  const real lr = 0.1, mu = 0.9, wd = 0.01;
  double hw[2] = {1.0, -2.0}, hb[2] = {0.5, 0.25};
  double vw[2] = {0, 0}, vb[2] = {0, 0};
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int step = 0; step < 20; ++step) {
    double gw[2] = {u(rng), u(rng)}, gb[2] = {u(rng), u(rng)};
    for (int j = 0; j < 2; ++j) {
      w.grad()[static_cast<size_t>(j)] = static_cast<real>(gw[j]);
      b.grad()[static_cast<size_t>(j)] = static_cast<real>(gb[j]);
    }
    sgd_step(params, vel, lr, mu, wd);
    for (int j = 0; j < 2; ++j) {
      vw[j] = mu * vw[j] + (gw[j] + wd * hw[j]);
      hw[j] -= lr * vw[j];
      vb[j] = mu * vb[j] + gb[j];
      hb[j] -= lr * vb[j];
      CHECK(w.data()[static_cast<size_t>(j)] == doctest::Approx(hw[j]).epsilon(1e-12));
      CHECK(b.data()[static_cast<size_t>(j)] == doctest::Approx(hb[j]).epsilon(1e-12));
      CHECK(w.grad()[static_cast<size_t>(j)] == 0);  // grads cleared after the step
    }
  }
}

TEST_CASE("a short run keeps exact bookkeeping and writes both checkpoints") {
  std::string data = tmp_dir("run_data"), val = tmp_dir("run_val"), out = tmp_dir("run_out");
  gen_dataset(4, 3, 64, 31, data, {8, 16});
  gen_dataset(2, 3, 64, 32, val, {8, 16});
  TrainConfig cfg = tiny_cfg("gelan-repvit-mini", 2);
  TrainResult r = train(cfg, data, val, out);
  REQUIRE(r.log.rows.size() == 2);
  for (int e = 0; e < 2; ++e) {
    const EpochStats& row = r.log.rows[static_cast<size_t>(e)];
    CHECK(row.epoch == e);
    CHECK(row.total ==
          doctest::Approx(0.05 * row.box + 0.5 * row.cls + 1.0 * row.obj).epsilon(1e-9));
    CHECK(row.lr > 0);
    CHECK(row.map50 >= 0);
    CHECK(row.map50_95 <= row.map50 + 1e-12);
    CHECK(std::isfinite(row.total));
  }
  // warmup makes the second epoch's lr higher than the first's
  CHECK(r.log.rows[1].lr > r.log.rows[0].lr);
  CHECK(fs::exists(r.last_path));
  CHECK(fs::exists(r.best_path));
  CHECK(fs::exists(out + "/train_log.txt"));
  // the written log matches the returned one
  std::ifstream f(out + "/train_log.txt");
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  CHECK(text == r.log.to_text());
  // last checkpoint reloads into a usable model
  Model m = load_checkpoint(r.last_path);
  MetricsReport rep = evaluate(m, val);
  CHECK(rep.map50 == doctest::Approx(r.log.rows[1].map50).epsilon(1e-12));
}

TEST_CASE("training is bit-deterministic in its logged trajectory") {
  std::string data = tmp_dir("det_data"), val = tmp_dir("det_val");
  gen_dataset(4, 3, 64, 41, data, {8, 16});
  gen_dataset(2, 3, 64, 42, val, {8, 16});
  TrainConfig cfg = tiny_cfg("gelan-repvit-mini", 2);
  cfg.aug.scale = 0.3;  // augmentation streams must also be deterministic
  std::string o1 = tmp_dir("det_o1"), o2 = tmp_dir("det_o2"), o3 = tmp_dir("det_o3");
  TrainResult a = train(cfg, data, val, o1);
  TrainResult b = train(cfg, data, val, o2);
  CHECK(a.log.to_text() == b.log.to_text());
  TrainConfig other = cfg;
  other.seed = 8;
  TrainResult c = train(other, data, val, o3);
  CHECK(a.log.to_text() != c.log.to_text());
}

TEST_CASE("mismatched dataset configurations are refused") {
  std::string data = tmp_dir("mis_data"), val = tmp_dir("mis_val"), out = tmp_dir("mis_out");
  gen_dataset(2, 3, 64, 51, data, {8, 16});
  gen_dataset(2, 3, 64, 52, val, {8, 16});
  TrainConfig cfg = tiny_cfg("gelan-repvit-mini", 1);
  cfg.imgsz = 96;  // dataset was generated at 64
  CHECK_THROWS_AS(train(cfg, data, val, out), ConfigError);
  cfg.imgsz = 64;
  cfg.model = "gelan-vit-mini";  // wants strides {8,16,32}, anchors fit {8,16}
  CHECK_THROWS_AS(train(cfg, data, val, out), ConfigError);
  // evaluate() refuses a class-count mismatch
  Model m = Model::build(zoo_spec("gelan-repvit-mini", 2, 64), 1);
  CHECK_THROWS_AS(evaluate(m, val), ConfigError);
}
