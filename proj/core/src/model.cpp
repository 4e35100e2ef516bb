#include "sod/model.hpp"

#include <random>

namespace sod {

Model Model::build(const GraphSpec& spec, std::uint64_t seed) {
  Model m;
  m.spec = spec;
  m.graph = resolve(spec);
  std::mt19937_64 rng(seed);
  m.impls.reserve(m.graph.layers.size());
  for (const ResolvedLayer& rl : m.graph.layers) {
    switch (rl.spec.kind) {
      case LayerKind::Conv: {
        ConvBlock c;
        c.cin = rl.cin;
        c.cout = rl.cout;
        c.k = rl.spec.k;
        c.stride = rl.spec.stride;
        c.pad = rl.pad;
        c.bn = rl.spec.bn;
        c.init(rng);
        m.impls.emplace_back(std::move(c));
        break;
      }
      case LayerKind::Predict: {
        ConvBlock c;
        c.cin = rl.cin;
        c.cout = rl.cout;
        c.k = 1;
        c.stride = 1;
        c.pad = 0;
        c.bn = false;
        c.act = false;
        c.init(rng);
        m.impls.emplace_back(std::move(c));
        break;
      }
      case LayerKind::Elan: {
        RepNcspelan4 e;
        e.cin = rl.cin;
        e.cout = rl.cout;
        e.depth = rl.spec.depth;
        e.init(rng);
        m.impls.emplace_back(std::move(e));
        break;
      }
      case LayerKind::ElanViT: {
        RepNcspelan4ViT e;
        e.base.cin = rl.cin;
        e.base.cout = rl.cout;
        e.base.depth = rl.spec.depth;
        e.vit_layers = rl.spec.vit_layers;
        e.vit_heads = rl.spec.vit_heads;
        e.tokens_h = rl.tokens_h;
        e.tokens_w = rl.tokens_w;
        e.init(rng);
        m.impls.emplace_back(std::move(e));
        break;
      }
      case LayerKind::Spp: {
        SppPool s;
        s.cin = rl.cin;
        s.cout = rl.cout;
        s.init(rng);
        m.impls.emplace_back(std::move(s));
        break;
      }
      case LayerKind::ViT: {
        ViTPath v;
        v.cin = rl.cin;
        v.dim = rl.spec.vit_dim;
        v.heads = rl.spec.vit_heads;
        v.layers = rl.spec.vit_layers;
        v.tokens_h = rl.tokens_h;
        v.tokens_w = rl.tokens_w;
        v.init(rng);
        m.impls.emplace_back(std::move(v));
        break;
      }
      case LayerKind::Up:
        m.impls.emplace_back(UpLayer{});
        break;
      case LayerKind::Concat:
        m.impls.emplace_back(ConcatLayer{});
        break;
    }
  }
  return m;
}

ForwardResult Model::forward(Tape* tape, const Tensor& input, bool training) {
  if (input.rank() != 4 || input.dim(1) != 3)
    throw ShapeError("model input must be [N,3,H,W], got " + shape_str(input.shape()));
  if (input.dim(2) % graph.total_stride != 0 || input.dim(3) % graph.total_stride != 0)
    throw ConfigError("input " + shape_str(input.shape()) + " not divisible by total stride " +
                      std::to_string(graph.total_stride));
  ForwardResult res;
  res.layer_outputs.resize(impls.size());
  auto lookup = [&](int from, size_t upto) -> const Tensor& {
    if (from == -1) return input;
    for (size_t i = 0; i < upto; ++i)
      if (graph.layers[i].spec.id == from) return res.layer_outputs[i];
    throw ConfigError("edge from unknown layer " + std::to_string(from));
  };
  for (size_t i = 0; i < impls.size(); ++i) {
    const ResolvedLayer& rl = graph.layers[i];
    const Tensor& x = lookup(rl.spec.from[0], i);
    Tensor y;
    if (auto* c = std::get_if<ConvBlock>(&impls[i])) {
      y = c->forward(tape, x, training);
    } else if (auto* e = std::get_if<RepNcspelan4>(&impls[i])) {
      y = e->forward(tape, x, training);
    } else if (auto* ev = std::get_if<RepNcspelan4ViT>(&impls[i])) {
      y = ev->forward(tape, x, training);
    } else if (auto* s = std::get_if<SppPool>(&impls[i])) {
      y = s->forward(tape, x, training);
    } else if (auto* v = std::get_if<ViTPath>(&impls[i])) {
      y = v->forward(tape, x, training);
    } else if (std::get_if<UpLayer>(&impls[i])) {
      y = upsample_nearest2(tape, x);
    } else {
      std::vector<Tensor> xs;
      for (int f : rl.spec.from) xs.push_back(lookup(f, i));
      y = concat_channels(tape, xs);
    }
    res.layer_outputs[i] = y;
  }
  for (int h : spec.heads)
    for (size_t i = 0; i < impls.size(); ++i)
      if (graph.layers[i].spec.id == h) res.head_maps.push_back(res.layer_outputs[i]);
  return res;
}

std::vector<NamedTensor> Model::parameters() {
  std::vector<NamedTensor> out;
  for (size_t i = 0; i < impls.size(); ++i) {
    std::string p = "l" + std::to_string(graph.layers[i].spec.id);
    std::visit(
        [&](auto& impl) {
          using T = std::decay_t<decltype(impl)>;
          if constexpr (!std::is_same_v<T, UpLayer> && !std::is_same_v<T, ConcatLayer>)
            impl.collect_params(p, out);
        },
        impls[i]);
  }
  return out;
}

std::vector<NamedTensor> Model::buffers() {
  std::vector<NamedTensor> out;
  for (size_t i = 0; i < impls.size(); ++i) {
    std::string p = "l" + std::to_string(graph.layers[i].spec.id);
    std::visit(
        [&](auto& impl) {
          using T = std::decay_t<decltype(impl)>;
          if constexpr (!std::is_same_v<T, UpLayer> && !std::is_same_v<T, ConcatLayer>)
            impl.collect_buffers(p, out);
        },
        impls[i]);
  }
  return out;
}

std::int64_t Model::parameter_count() {
  std::int64_t n = 0;
  for (auto& [name, t] : parameters()) n += t.numel();
  return n;
}

void Model::zero_grad() {
  for (auto& [name, t] : parameters()) t.zero_grad();
}

}  // namespace sod
