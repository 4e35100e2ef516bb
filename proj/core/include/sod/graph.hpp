#pragma once

#include <string>
#include <vector>

#include "sod/tensor.hpp"

namespace sod {

enum class LayerKind { Conv, Predict, Elan, ElanViT, Spp, ViT, Up, Concat };
enum class PathTag { Local, Global, Shared };

std::string kind_name(LayerKind k);
std::string tag_name(PathTag t);

// One layer of the declarative model graph. Channel counts are stored
// pre-width-scale; resolve() applies the scale and the rounding rule.
struct LayerSpec {
  int id = -1;
  LayerKind kind = LayerKind::Conv;
  PathTag tag = PathTag::Local;
  std::vector<int> from{-1};  // -1 refers to the network input
  int cout_base = 0;          // conv/elan/elanvit/spp; ignored elsewhere
  int k = 3, stride = 1;      // conv/predict
  bool bn = true;             // conv only; bias-only conv when off
  int depth = 0;              // elan/elanvit
  int vit_dim = 0, vit_heads = 0, vit_layers = 0;
};

struct GraphSpec {
  int spec_version = 1;
  std::string name;
  double width_scale = 1.0;
  int classes = 3;
  int imgsz = 640;
  int anchors_per_scale = 3;
  std::vector<int> strides;  // one per detection scale, finest first
  std::vector<LayerSpec> layers;
  std::vector<int> heads;  // predict-layer ids, aligned with strides
};

// Effective channel count: width-scaled, rounded up to a multiple of 4,
// floor 8.
int scaled_channels(int base, double width_scale);

struct ResolvedLayer {
  LayerSpec spec;
  int cin = 0;
  int cout = 0;
  int pad = 0;
  int out_stride = 1;          // cumulative stride w.r.t. the input image
  int tokens_h = 0, tokens_w = 0;  // vit/elanvit token grid at spec.imgsz
  int trunk_channels = 0;      // elan/elanvit aggregate width
};

struct ResolvedGraph {
  std::vector<ResolvedLayer> layers;
  int total_stride = 1;
};

// Validates the DAG and propagates channels/strides. Throws ConfigError
// naming the offending layer id.
ResolvedGraph resolve(const GraphSpec& spec);

// Text round-trip of the versioned spec format.
std::string emit_spec(const GraphSpec& spec);
GraphSpec parse_spec(const std::string& text);
GraphSpec load_spec_file(const std::string& path);

bool operator==(const LayerSpec& a, const LayerSpec& b);
bool operator==(const GraphSpec& a, const GraphSpec& b);

}  // namespace sod
