#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sod/data.hpp"
#include "sod/loss.hpp"
#include "sod/metrics.hpp"
#include "sod/model.hpp"

namespace sod {

struct TrainConfig {
  std::string model = "gelan-vit-mini";
  int imgsz = 64;
  int epochs = 10;
  int batch_size = 2;
  real lr0 = 0.01, lrf = 0.1;
  real momentum = 0.937;
  real weight_decay = 0.0005;
  // Shadow-average decay for the weights used at eval/checkpoint time;
  // 0 disables. The effective decay ramps in as t/(t+100) early on.
  real ema_decay = 0.995;
  real warmup_epochs = 3;
  std::uint64_t seed = 0;
  LossGains gains;
  AugConfig aug;
  real conf_thresh = 0.25, iou_thresh = 0.45;
  real early_stop_map50 = -1;  // stop once val mAP50 reaches this; <0 disables
  void validate() const;       // throws ConfigError naming the bad field
};

// Structured text config (`sodtrain 1` header, `key value` lines).
void save_train_config(const std::string& path, const TrainConfig& cfg);
TrainConfig load_train_config(const std::string& path);

// Learning rate at a fractional epoch: linear warmup from lr0/100, then
// linear decay lr0 * [(1 - e/E) * (1 - lrf) + lrf].
real lr_at(real epoch, const TrainConfig& cfg);

// Decayed parameters are the conv/linear weight matrices; biases, norm
// affines and embeddings are exempt.
bool decays(const std::string& param_name);

// One SGD + momentum update over named parameters:
//   v <- momentum*v + (grad + weight_decay*w  if the name decays, else grad)
//   w <- w - lr*v
// then zeroes the gradients. `velocity` must be aligned with `params`.
void sgd_step(std::vector<NamedTensor>& params, std::vector<std::vector<real>>& velocity, real lr,
              real momentum, real weight_decay);

struct EpochStats {
  int epoch = 0;
  real lr = 0;
  real box = 0, cls = 0, obj = 0, total = 0;
  double map50 = 0, map50_95 = 0;
  double seconds = 0;  // wall time, not serialized
};

struct TrainLog {
  std::vector<EpochStats> rows;
  std::string to_text() const;  // deterministic fields only
};

struct TrainResult {
  TrainLog log;
  double best_map50 = 0;
  std::string best_path, last_path;
};

// Decode + NMS over every sample in data_dir, score against its labels.
// Model class count must match the dataset. Optionally returns the
// surviving detections (image_id = sample index).
MetricsReport evaluate(Model& model, const std::string& data_dir, real conf_thresh = 0.25,
                       real iou_thresh = 0.45, std::vector<Detection>* dets_out = nullptr);

// SGD + momentum with the schedule above; per-epoch validation, best/last
// checkpoints and train_log.txt under out_dir. Deterministic given cfg.seed.
TrainResult train(const TrainConfig& cfg, const std::string& train_dir,
                  const std::string& val_dir, const std::string& out_dir);

}  // namespace sod
