#pragma once

#include <cstdint>
#include <variant>
#include <vector>

#include "sod/blocks.hpp"
#include "sod/graph.hpp"

namespace sod {

struct UpLayer {};
struct ConcatLayer {};

using LayerImpl =
    std::variant<ConvBlock, RepNcspelan4, RepNcspelan4ViT, SppPool, ViTPath, UpLayer, ConcatLayer>;

struct ForwardResult {
  std::vector<Tensor> layer_outputs;  // by declaration order
  std::vector<Tensor> head_maps;      // aligned with spec.strides
};

// A built, evaluable model: graph + per-layer weights.
class Model {
 public:
  GraphSpec spec;
  ResolvedGraph graph;
  std::vector<LayerImpl> impls;
  std::vector<real> anchors;  // [scales * anchors_per_scale * 2], (w,h) pixels

  // Deterministic weight initialization from seed: He fan-in for convs,
  // std-0.02 normals for ViT embeddings.
  static Model build(const GraphSpec& spec, std::uint64_t seed);

  ForwardResult forward(Tape* tape, const Tensor& input, bool training);

  // Parameters and running-stat buffers in declaration order; copies share
  // storage with the live blocks.
  std::vector<NamedTensor> parameters();
  std::vector<NamedTensor> buffers();
  std::int64_t parameter_count();
  void zero_grad();
};

}  // namespace sod
