#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "sod/audit.hpp"
#include "sod/checkpoint.hpp"
#include "sod/data.hpp"
#include "sod/train.hpp"
#include "sod/zoo.hpp"

namespace {

sod::GraphSpec spec_from_args(const std::string& model, const std::string& spec_path, int classes,
                              int imgsz) {
  if (!spec_path.empty()) return sod::load_spec_file(spec_path);
  return sod::zoo_spec(model, classes, imgsz);
}

int run_gen_data(const std::string& out, int count, int classes, int imgsz, std::uint64_t seed,
                 std::vector<int> strides) {
  sod::DatasetManifest m = sod::gen_dataset(count, classes, imgsz, seed, out, strides);
  std::printf("wrote %d images (%d classes, %dx%d) to %s\n", m.count,
              static_cast<int>(m.class_names.size()), m.imgsz, m.imgsz, out.c_str());
  return 0;
}

int run_flops(const sod::GraphSpec& spec, int img) {
  sod::ComplexityReport p = sod::count_params(spec);
  sod::ComplexityReport f = sod::count_flops(spec, img, img);
  std::cout << spec.name << " @ " << img << "x" << img << "\n";
  std::cout << sod::format_report(p, f);
  std::cout << sod::format_ledger(sod::capacity_report(spec, img, img));
  return 0;
}

int run_info(const sod::GraphSpec& spec) {
  sod::ResolvedGraph rg = sod::resolve(spec);
  std::cout << sod::emit_spec(spec);
  std::printf("resolved: %zu layers, total stride %d, %lld parameters\n", rg.layers.size(),
              rg.total_stride,
              static_cast<long long>(sod::count_params(spec).total_params));
  return 0;
}

int run_train(const std::string& cfg_path, sod::TrainConfig cfg, const std::string& data,
              const std::string& val, const std::string& out) {
  if (!cfg_path.empty()) cfg = sod::load_train_config(cfg_path);
  cfg.validate();
  std::filesystem::create_directories(out);
  sod::save_train_config(out + "/train_config.txt", cfg);
  sod::TrainResult r = sod::train(cfg, data, val, out);
  std::cout << r.log.to_text();
  std::printf("best mAP50 %.4f (%s)\n", r.best_map50, r.best_path.c_str());
  return 0;
}

int run_eval(const std::string& ckpt, const std::string& data, double conf, double iou, int runs,
             const std::string& dets_path) {
  sod::Model model = sod::load_checkpoint(ckpt);
  sod::DatasetManifest m = sod::load_manifest(data + "/manifest.txt");
  std::vector<double> m50, m5095;
  std::vector<sod::Detection> dets;
  for (int r = 0; r < runs; ++r) {
    sod::MetricsReport rep = sod::evaluate(model, data, static_cast<sod::real>(conf),
                                           static_cast<sod::real>(iou), &dets);
    m50.push_back(rep.map50);
    m5095.push_back(rep.map50_95);
    if (r == 0) std::cout << sod::format_metrics(rep, m.class_names);
  }
  if (!dets_path.empty()) sod::write_detections(dets_path, dets);
  if (runs > 1) {
    auto spread = [](const std::vector<double>& v) {
      double lo = v[0], hi = v[0], sum = 0;
      for (double x : v) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
        sum += x;
      }
      return std::pair<double, double>(sum / static_cast<double>(v.size()), hi - lo);
    };
    auto [a50, s50] = spread(m50);
    auto [a95, s95] = spread(m5095);
    std::printf("runs %d: mAP50 %.6f +- %.6f, mAP50:95 %.6f +- %.6f\n", runs, a50, s50 / 2, a95,
                s95 / 2);
    if (s50 != 0 || s95 != 0) {
      std::fprintf(stderr, "error: evaluation is not reproducible across runs\n");
      return 1;
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sod: small object detection models, training and auditing"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "synthesize a labeled starfield dataset");
  std::string gen_out = "dataset";
  int gen_count = 64, gen_classes = 3, gen_imgsz = 64;
  std::uint64_t gen_seed = 0;
  std::vector<int> gen_strides{8, 16, 32};
  gen->add_option("--out", gen_out, "output directory");
  gen->add_option("--count", gen_count, "number of images")->check(CLI::PositiveNumber);
  gen->add_option("--classes", gen_classes, "number of classes (1-3)");
  gen->add_option("--imgsz", gen_imgsz, "square image size");
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_option("--strides", gen_strides, "head strides the anchors are fit for");

  // train
  auto* tr = app.add_subcommand("train", "train a zoo model on a generated dataset");
  std::string tr_cfg, tr_data, tr_val, tr_out = "runs/exp";
  sod::TrainConfig cfg;
  tr->add_option("--config", tr_cfg, "training config file (overrides the flags)");
  tr->add_option("--data", tr_data, "training dataset directory")->required();
  tr->add_option("--val", tr_val, "validation dataset directory")->required();
  tr->add_option("--out", tr_out, "run directory for checkpoints and logs");
  tr->add_option("--model", cfg.model, "zoo model name");
  tr->add_option("--imgsz", cfg.imgsz, "train/eval image size");
  tr->add_option("--epochs", cfg.epochs, "epoch count");
  tr->add_option("--batch", cfg.batch_size, "batch size");
  tr->add_option("--lr0", cfg.lr0, "initial learning rate");
  tr->add_option("--seed", cfg.seed, "run seed");
  tr->add_option("--early-stop-map50", cfg.early_stop_map50,
                 "stop once val mAP50 reaches this value");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  std::string ev_ckpt, ev_data, ev_dets;
  double ev_conf = 0.25, ev_iou = 0.45;
  int ev_runs = 1;
  ev->add_option("--ckpt", ev_ckpt, "checkpoint path")->required();
  ev->add_option("--data", ev_data, "dataset directory")->required();
  ev->add_option("--conf", ev_conf, "confidence threshold");
  ev->add_option("--iou", ev_iou, "NMS IoU threshold");
  ev->add_option("--runs", ev_runs, "repeat count; the spread must be zero")
      ->check(CLI::PositiveNumber);
  ev->add_option("--dets", ev_dets, "write surviving detections to this file");

  // flops / info
  std::string au_model = "gelan-vit-mini", au_spec;
  int au_img = 640, au_classes = 3;
  auto* fl = app.add_subcommand("flops", "parameter/FLOP report with the capacity ledger");
  auto* in = app.add_subcommand("info", "print the resolved graph spec");
  for (auto* sc : {fl, in}) {
    sc->add_option("--model", au_model, "zoo model name");
    sc->add_option("--spec", au_spec, "graph spec file (overrides --model)");
    sc->add_option("--img", au_img, "input size for FLOPs");
    sc->add_option("--classes", au_classes, "class count");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return run_gen_data(gen_out, gen_count, gen_classes, gen_imgsz, gen_seed,
                                           gen_strides);
    if (tr->parsed()) return run_train(tr_cfg, cfg, tr_data, tr_val, tr_out);
    if (ev->parsed()) return run_eval(ev_ckpt, ev_data, ev_conf, ev_iou, ev_runs, ev_dets);
    sod::GraphSpec spec = spec_from_args(au_model, au_spec, au_classes, au_img);
    if (fl->parsed()) return run_flops(spec, au_img);
    if (in->parsed()) return run_info(spec);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
