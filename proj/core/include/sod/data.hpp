#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "sod/detect.hpp"
#include "sod/tensor.hpp"

namespace sod {

struct Sample {
  Tensor image;  // [3,H,W] in [0,1]
  std::vector<Label> labels;
};

struct AugConfig {
  real hsv_s = 0.7, hsv_v = 0.4, scale = 0.5, mixup = 0.0;
  void validate() const;
};

struct DatasetManifest {
  int version = 1;
  std::uint64_t seed = 0;
  int imgsz = 0;
  int count = 0;
  std::vector<std::string> class_names;
  std::vector<int> anchor_strides;
  std::vector<real> anchors_flat;  // scale-major (w,h) pairs, pixels
};

// Binary 8-bit PPM (P6).
void write_ppm(const std::string& path, const Tensor& image);
Tensor load_ppm(const std::string& path);

// One `class_id cx cy w h` line per object, 6-decimal normalized values.
void write_labels(const std::string& path, const std::vector<Label>& labels);
std::vector<Label> load_labels(const std::string& path);

void write_manifest(const std::string& path, const DatasetManifest& m);
DatasetManifest load_manifest(const std::string& path);

// Procedural starfield scenes: 1-4 objects per image drawn from
// class-specific shapes (panel rig, disc, crescent), exact box labels,
// per-image RNG streams from (seed, index). Writes images/, labels/ and
// the manifest (with k-means anchors) under out_dir.
DatasetManifest gen_dataset(int n, int classes, int imgsz, std::uint64_t seed,
                            const std::string& out_dir,
                            const std::vector<int>& strides = {8, 16, 32});

std::string image_path(const std::string& dir, int index);
std::string label_path(const std::string& dir, int index);
Sample load_sample(const std::string& dir, int index);

// HSV saturation/value jitter plus geometric scaling about the origin;
// labels transform identically, clip to the canvas and drop below 10%
// residual area. mixup = 0 (paper setting) blends nothing.
Sample augment(const Sample& s, const AugConfig& cfg, std::mt19937_64& rng);

// per-image deterministic stream
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index);

void rgb_to_hsv(real r, real g, real b, real& h, real& s, real& v);
void hsv_to_rgb(real h, real s, real v, real& r, real& g, real& b);

}  // namespace sod
