#include "sod/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "sod/checkpoint.hpp"
#include "sod/zoo.hpp"

namespace sod {

void TrainConfig::validate() const {
  auto names = zoo_names();
  if (std::find(names.begin(), names.end(), model) == names.end())
    throw ConfigError("model: unknown name '" + model + "'");
  if (imgsz < 32) throw ConfigError("imgsz: must be >= 32");
  if (epochs < 1) throw ConfigError("epochs: must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size: must be >= 1");
  if (lr0 <= 0) throw ConfigError("lr0: must be positive");
  if (lrf <= 0 || lrf > 1) throw ConfigError("lrf: must be in (0, 1]");
  if (momentum < 0 || momentum >= 1) throw ConfigError("momentum: must be in [0, 1)");
  if (weight_decay < 0) throw ConfigError("weight_decay: must be non-negative");
  if (ema_decay < 0 || ema_decay >= 1) throw ConfigError("ema_decay: must be in [0, 1)");
  if (warmup_epochs < 0) throw ConfigError("warmup_epochs: must be non-negative");
  if (conf_thresh <= 0 || conf_thresh >= 1) throw ConfigError("conf_thresh: must be in (0, 1)");
  if (iou_thresh <= 0 || iou_thresh >= 1) throw ConfigError("iou_thresh: must be in (0, 1)");
  if (gains.box < 0 || gains.cls < 0 || gains.obj < 0)
    throw ConfigError("gains: must be non-negative");
  aug.validate();
}

void save_train_config(const std::string& path, const TrainConfig& cfg) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    if (!f) throw ConfigError("cannot write " + tmp);
    char buf[512];
    std::snprintf(buf, sizeof(buf),
                  "sodtrain 1\nmodel %s\nimgsz %d\nepochs %d\nbatch_size %d\nlr0 %.9g\n"
                  "lrf %.9g\nmomentum %.9g\nweight_decay %.9g\nema_decay %.9g\n"
                  "warmup_epochs %.9g\nseed %llu\n"
                  "gain_box %.9g\ngain_cls %.9g\ngain_obj %.9g\n"
                  "hsv_s %.9g\nhsv_v %.9g\nscale %.9g\nmixup %.9g\n"
                  "conf_thresh %.9g\niou_thresh %.9g\nearly_stop_map50 %.9g\n",
                  cfg.model.c_str(), cfg.imgsz, cfg.epochs, cfg.batch_size,
                  static_cast<double>(cfg.lr0), static_cast<double>(cfg.lrf),
                  static_cast<double>(cfg.momentum), static_cast<double>(cfg.weight_decay),
                  static_cast<double>(cfg.ema_decay), static_cast<double>(cfg.warmup_epochs),
                  static_cast<unsigned long long>(cfg.seed), static_cast<double>(cfg.gains.box),
                  static_cast<double>(cfg.gains.cls), static_cast<double>(cfg.gains.obj),
                  static_cast<double>(cfg.aug.hsv_s), static_cast<double>(cfg.aug.hsv_v),
                  static_cast<double>(cfg.aug.scale), static_cast<double>(cfg.aug.mixup),
                  static_cast<double>(cfg.conf_thresh), static_cast<double>(cfg.iou_thresh),
                  static_cast<double>(cfg.early_stop_map50));
    f << buf;
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw ConfigError("cannot move config into place at " + path);
}

TrainConfig load_train_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open " + path);
  TrainConfig cfg;
  std::string line;
  bool saw_magic = false;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (!saw_magic) {
      int version = 0;
      if (key != "sodtrain" || !(ls >> version) || version != 1)
        throw ConfigError(path + " is not a training config");
      saw_magic = true;
      continue;
    }
    bool ok = true;
    double v = 0;
    if (key == "model") ok = static_cast<bool>(ls >> cfg.model);
    else if (key == "imgsz") ok = static_cast<bool>(ls >> cfg.imgsz);
    else if (key == "epochs") ok = static_cast<bool>(ls >> cfg.epochs);
    else if (key == "batch_size") ok = static_cast<bool>(ls >> cfg.batch_size);
    else if (key == "seed") ok = static_cast<bool>(ls >> cfg.seed);
    else if ((ok = static_cast<bool>(ls >> v))) {
      if (key == "lr0") cfg.lr0 = static_cast<real>(v);
      else if (key == "lrf") cfg.lrf = static_cast<real>(v);
      else if (key == "momentum") cfg.momentum = static_cast<real>(v);
      else if (key == "weight_decay") cfg.weight_decay = static_cast<real>(v);
      else if (key == "ema_decay") cfg.ema_decay = static_cast<real>(v);
      else if (key == "warmup_epochs") cfg.warmup_epochs = static_cast<real>(v);
      else if (key == "gain_box") cfg.gains.box = static_cast<real>(v);
      else if (key == "gain_cls") cfg.gains.cls = static_cast<real>(v);
      else if (key == "gain_obj") cfg.gains.obj = static_cast<real>(v);
      else if (key == "hsv_s") cfg.aug.hsv_s = static_cast<real>(v);
      else if (key == "hsv_v") cfg.aug.hsv_v = static_cast<real>(v);
      else if (key == "scale") cfg.aug.scale = static_cast<real>(v);
      else if (key == "mixup") cfg.aug.mixup = static_cast<real>(v);
      else if (key == "conf_thresh") cfg.conf_thresh = static_cast<real>(v);
      else if (key == "iou_thresh") cfg.iou_thresh = static_cast<real>(v);
      else if (key == "early_stop_map50") cfg.early_stop_map50 = static_cast<real>(v);
      else
        throw ConfigError(path + ": line " + std::to_string(lineno) + ": unknown key '" + key +
                          "'");
    }
    if (!ok)
      throw ConfigError(path + ": line " + std::to_string(lineno) + ": bad value for '" + key +
                        "'");
  }
  if (!saw_magic) throw ConfigError(path + " is empty");
  cfg.validate();
  return cfg;
}

real lr_at(real epoch, const TrainConfig& cfg) {
  auto base = [&](real e) {
    return cfg.lr0 * ((1 - e / static_cast<real>(cfg.epochs)) * (1 - cfg.lrf) + cfg.lrf);
  };
  real warmup = std::min(cfg.warmup_epochs, static_cast<real>(cfg.epochs));
  if (warmup > 0 && epoch < warmup) {
    real start = cfg.lr0 / 100;
    return start + (base(warmup) - start) * (epoch / warmup);
  }
  return base(epoch);
}

bool decays(const std::string& param_name) {
  size_t dot = param_name.rfind('.');
  std::string leaf = dot == std::string::npos ? param_name : param_name.substr(dot + 1);
  return leaf == "w" || leaf == "wq" || leaf == "wk" || leaf == "wv" || leaf == "wo" ||
         leaf == "mlp_w1" || leaf == "mlp_w2";
}

void sgd_step(std::vector<NamedTensor>& params, std::vector<std::vector<real>>& velocity, real lr,
              real momentum, real weight_decay) {
  if (velocity.size() != params.size())
    throw ConfigError("optimizer state is misaligned with the parameter list");
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i].second;
    bool wd = decays(params[i].first) && weight_decay > 0;
    std::vector<real>& g = p.grad();
    std::vector<real>& v = velocity[i];
    std::vector<real>& w = p.data();
    for (size_t j = 0; j < w.size(); ++j) {
      real grad = g[j] + (wd ? weight_decay * w[j] : real(0));
      v[j] = momentum * v[j] + grad;
      w[j] -= lr * v[j];
    }
    p.zero_grad();
  }
}

std::string TrainLog::to_text() const {
  std::ostringstream os;
  os << "epoch lr box cls obj total map50 map50_95\n";
  for (const EpochStats& r : rows) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%d %.8f %.6f %.6f %.6f %.6f %.6f %.6f\n", r.epoch,
                  static_cast<double>(r.lr), static_cast<double>(r.box),
                  static_cast<double>(r.cls), static_cast<double>(r.obj),
                  static_cast<double>(r.total), r.map50, r.map50_95);
    os << buf;
  }
  return os.str();
}

namespace {

AnchorSet model_anchors(const Model& model) {
  return AnchorSet::from_flat(model.anchors, model.spec.strides);
}

void gather_gts(const std::vector<Label>& labels, int image_id, int imgsz,
                std::vector<GtBox>& out) {
  for (const Label& l : labels)
    out.push_back({image_id, l.class_id, static_cast<double>((l.cx - l.w / 2) * imgsz),
                   static_cast<double>((l.cy - l.h / 2) * imgsz),
                   static_cast<double>((l.cx + l.w / 2) * imgsz),
                   static_cast<double>((l.cy + l.h / 2) * imgsz)});
}

}  // namespace

MetricsReport evaluate(Model& model, const std::string& data_dir, real conf_thresh,
                       real iou_thresh, std::vector<Detection>* dets_out) {
  DatasetManifest m = load_manifest(data_dir + "/manifest.txt");
  int classes = static_cast<int>(m.class_names.size());
  if (classes != model.spec.classes)
    throw ConfigError("dataset has " + std::to_string(classes) + " classes, model expects " +
                      std::to_string(model.spec.classes));
  AnchorSet anchors = model_anchors(model);
  std::vector<Detection> dets;
  std::vector<GtBox> gts;
  for (int i = 0; i < m.count; ++i) {
    Sample s = load_sample(data_dir, i);
    Tensor x = reshape(nullptr, s.image, {1, 3, s.image.dim(1), s.image.dim(2)});
    ForwardResult fr = model.forward(nullptr, x, false);
    std::vector<Detection> di = decode_boxes(fr.head_maps, anchors, classes, i);
    di = nms(std::move(di), static_cast<double>(iou_thresh), static_cast<double>(conf_thresh));
    dets.insert(dets.end(), di.begin(), di.end());
    gather_gts(s.labels, i, m.imgsz, gts);
  }
  if (dets_out) *dets_out = dets;
  return metrics_report(dets, gts, classes);
}

TrainResult train(const TrainConfig& cfg, const std::string& train_dir, const std::string& val_dir,
                  const std::string& out_dir) {
  cfg.validate();
  DatasetManifest tm = load_manifest(train_dir + "/manifest.txt");
  DatasetManifest vm = load_manifest(val_dir + "/manifest.txt");
  int classes = static_cast<int>(tm.class_names.size());
  if (static_cast<int>(vm.class_names.size()) != classes)
    throw ConfigError("train/val class counts differ");
  if (tm.imgsz != cfg.imgsz)
    throw ConfigError("dataset imgsz " + std::to_string(tm.imgsz) + " does not match config " +
                      std::to_string(cfg.imgsz));

  GraphSpec spec = zoo_spec(cfg.model, classes, cfg.imgsz);
  if (tm.anchor_strides != spec.strides)
    throw ConfigError("dataset anchors were fit for different strides than the model's heads");
  Model model = Model::build(spec, cfg.seed);
  model.anchors = tm.anchors_flat;
  AnchorSet anchors = model_anchors(model);
  anchors.validate();

  std::vector<NamedTensor> params = model.parameters();
  for (auto& [name, t] : params) t.set_requires_grad(true);
  std::vector<std::vector<real>> velocity(params.size());
  for (size_t i = 0; i < params.size(); ++i)
    velocity[i].assign(params[i].second.data().size(), 0);
  // shadow average of the weights, used for eval and checkpoints
  std::vector<std::vector<real>> ema(params.size());
  for (size_t i = 0; i < params.size(); ++i) ema[i] = params[i].second.data();
  std::int64_t step = 0;
  auto ema_update = [&]() {
    if (cfg.ema_decay <= 0) return;
    ++step;
    real ramp = static_cast<real>(step) / static_cast<real>(step + 100);
    real d = std::min(cfg.ema_decay, ramp);
    for (size_t i = 0; i < params.size(); ++i) {
      const std::vector<real>& w = params[i].second.data();
      std::vector<real>& e = ema[i];
      for (size_t j = 0; j < w.size(); ++j) e[j] = d * e[j] + (1 - d) * w[j];
    }
  };
  auto with_eval_weights = [&](auto&& fn) {
    if (cfg.ema_decay <= 0) {
      fn();
      return;
    }
    for (size_t i = 0; i < params.size(); ++i) params[i].second.data().swap(ema[i]);
    fn();
    for (size_t i = 0; i < params.size(); ++i) params[i].second.data().swap(ema[i]);
  };

  TrainResult result;
  result.best_map50 = -1;
  result.best_path = out_dir + "/best.ckpt";
  result.last_path = out_dir + "/last.ckpt";
  int steps = (tm.count + cfg.batch_size - 1) / cfg.batch_size;

  std::vector<int> order(static_cast<size_t>(tm.count));
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 order_rng(mix_seed(cfg.seed, 0xE0000u + static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), order_rng);

    double sum_box = 0, sum_cls = 0, sum_obj = 0, sum_total = 0;
    int n_seen = 0;
    real lr = 0;
    for (int b = 0; b < steps; ++b) {
      lr = lr_at(static_cast<real>(epoch) + static_cast<real>(b) / static_cast<real>(steps), cfg);
      int lo = b * cfg.batch_size;
      int hi = std::min(tm.count, lo + cfg.batch_size);
      for (int s = lo; s < hi; ++s) {
        int idx = order[static_cast<size_t>(s)];
        std::mt19937_64 aug_rng(mix_seed(mix_seed(cfg.seed, 0xA0000u + static_cast<std::uint64_t>(epoch)),
                                         static_cast<std::uint64_t>(idx)));
        Sample sample = augment(load_sample(train_dir, idx), cfg.aug, aug_rng);
        Tape tape;
        Tensor x = reshape(nullptr, sample.image, {1, 3, cfg.imgsz, cfg.imgsz});
        ForwardResult fr = model.forward(&tape, x, true);
        Tensor total;
        LossBreakdown lb = compute_loss(&tape, fr.head_maps, {sample.labels}, anchors, classes,
                                        cfg.imgsz, cfg.gains, &total);
        if (!std::isfinite(static_cast<double>(lb.total)))
          throw NumericError("epoch " + std::to_string(epoch) + " batch " + std::to_string(b) +
                             " image " + std::to_string(idx) + ": non-finite loss (box=" +
                             std::to_string(lb.box) + " cls=" + std::to_string(lb.cls) +
                             " obj=" + std::to_string(lb.obj) + ")");
        Tensor scaled = mul_scalar(&tape, total, real(1) / static_cast<real>(hi - lo));
        tape.backward(scaled);
        sum_box += lb.box;
        sum_cls += lb.cls;
        sum_obj += lb.obj;
        sum_total += lb.total;
        ++n_seen;
      }
      sgd_step(params, velocity, lr, cfg.momentum, cfg.weight_decay);
      ema_update();
    }

    EpochStats row;
    row.epoch = epoch;
    row.lr = lr;
    row.box = static_cast<real>(sum_box / n_seen);
    row.cls = static_cast<real>(sum_cls / n_seen);
    row.obj = static_cast<real>(sum_obj / n_seen);
    row.total = static_cast<real>(sum_total / n_seen);
    MetricsReport rep;
    with_eval_weights([&] {
      rep = evaluate(model, val_dir, cfg.conf_thresh, cfg.iou_thresh);
      save_checkpoint(model, result.last_path);
      if (rep.map50 > result.best_map50) {
        result.best_map50 = rep.map50;
        save_checkpoint(model, result.best_path);
      }
    });
    row.map50 = rep.map50;
    row.map50_95 = rep.map50_95;
    row.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.rows.push_back(row);
    {
      std::ofstream f(out_dir + "/train_log.txt", std::ios::trunc);
      f << result.log.to_text();
    }
    if (cfg.early_stop_map50 >= 0 && rep.map50 >= static_cast<double>(cfg.early_stop_map50)) break;
  }
  return result;
}

}  // namespace sod
