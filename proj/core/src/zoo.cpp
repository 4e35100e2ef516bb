#include "sod/zoo.hpp"

namespace sod {

namespace {

LayerSpec conv(int id, PathTag tag, int from, int base, int k, int s) {
  LayerSpec l;
  l.id = id;
  l.kind = LayerKind::Conv;
  l.tag = tag;
  l.from = {from};
  l.cout_base = base;
  l.k = k;
  l.stride = s;
  return l;
}

LayerSpec elan(int id, PathTag tag, int from, int base, int depth) {
  LayerSpec l;
  l.id = id;
  l.kind = LayerKind::Elan;
  l.tag = tag;
  l.from = {from};
  l.cout_base = base;
  l.depth = depth;
  return l;
}

LayerSpec spp(int id, PathTag tag, int from, int base) {
  LayerSpec l;
  l.id = id;
  l.kind = LayerKind::Spp;
  l.tag = tag;
  l.from = {from};
  l.cout_base = base;
  return l;
}

LayerSpec up(int id, PathTag tag, int from) {
  LayerSpec l;
  l.id = id;
  l.kind = LayerKind::Up;
  l.tag = tag;
  l.from = {from};
  return l;
}

LayerSpec cat(int id, PathTag tag, std::vector<int> from) {
  LayerSpec l;
  l.id = id;
  l.kind = LayerKind::Concat;
  l.tag = tag;
  l.from = std::move(from);
  return l;
}

LayerSpec predict(int id, int from) {
  LayerSpec l;
  l.id = id;
  l.kind = LayerKind::Predict;
  l.tag = PathTag::Shared;
  l.from = {from};
  return l;
}

// The CNN feature path, identical in every zoo model. Expects an
// 8-wide (base 32) stride-2 stem output as layer 1. Ids 2..16;
// P3 tail = 6 (stride 8), N4 = 13 (stride 16), P5 tail = 10 (stride 32),
// N3 = 16 (stride 8).
void append_local_core(GraphSpec& g) {
  const PathTag L = PathTag::Local;
  g.layers.push_back(conv(2, L, 1, 64, 3, 2));
  g.layers.push_back(elan(3, L, 2, 64, 2));
  g.layers.push_back(conv(4, L, 3, 96, 3, 2));
  g.layers.push_back(spp(5, L, 4, 96));
  g.layers.push_back(elan(6, L, 5, 96, 2));
  g.layers.push_back(conv(7, L, 6, 128, 3, 2));
  g.layers.push_back(elan(8, L, 7, 128, 2));
  g.layers.push_back(conv(9, L, 8, 128, 3, 2));
  g.layers.push_back(elan(10, L, 9, 128, 1));
  g.layers.push_back(up(11, L, 10));
  g.layers.push_back(cat(12, L, {11, 8}));
  g.layers.push_back(elan(13, L, 12, 96, 1));
  g.layers.push_back(up(14, L, 13));
  g.layers.push_back(cat(15, L, {14, 6}));
  g.layers.push_back(elan(16, L, 15, 64, 1));
}

GraphSpec base_spec(const std::string& name, int classes, int imgsz) {
  GraphSpec g;
  g.name = name;
  g.width_scale = 0.25;
  g.classes = classes;
  g.imgsz = imgsz;
  g.anchors_per_scale = 3;
  return g;
}

GraphSpec gelan_t_mini(int classes, int imgsz) {
  GraphSpec g = base_spec("gelan-t-mini", classes, imgsz);
  const PathTag S = PathTag::Shared;
  g.layers.push_back(conv(0, S, -1, 64, 3, 1));
  g.layers.push_back(conv(1, S, 0, 32, 3, 2));
  append_local_core(g);
  g.layers.push_back(conv(17, S, 16, 128, 3, 1));
  g.layers.push_back(predict(18, 17));
  g.layers.push_back(conv(19, S, 13, 192, 3, 1));
  g.layers.push_back(predict(20, 19));
  g.layers.push_back(conv(21, S, 10, 256, 3, 1));
  g.layers.push_back(predict(22, 21));
  g.heads = {18, 20, 22};
  g.strides = {8, 16, 32};
  return g;
}

GraphSpec gelan_vit_mini(int classes, int imgsz) {
  GraphSpec g = base_spec("gelan-vit-mini", classes, imgsz);
  const PathTag S = PathTag::Shared;
  const PathTag G = PathTag::Global;
  g.layers.push_back(conv(1, S, -1, 32, 3, 2));
  append_local_core(g);
  LayerSpec v;
  v.id = 17;
  v.kind = LayerKind::ViT;
  v.tag = G;
  v.from = {10};
  v.vit_dim = 64;
  v.vit_heads = 4;
  v.vit_layers = 2;
  g.layers.push_back(v);
  g.layers.push_back(up(18, G, 17));
  g.layers.push_back(up(19, G, 18));
  g.layers.push_back(cat(20, G, {19, 16}));
  g.layers.push_back(conv(21, G, 20, 64, 1, 1));
  g.layers.push_back(conv(22, S, 21, 64, 3, 1));
  g.layers.push_back(predict(23, 22));
  g.layers.push_back(conv(24, S, 13, 96, 3, 1));
  g.layers.push_back(predict(25, 24));
  g.layers.push_back(conv(26, S, 10, 128, 3, 1));
  g.layers.push_back(predict(27, 26));
  g.heads = {23, 25, 27};
  g.strides = {8, 16, 32};
  return g;
}

GraphSpec gelan_repvit_mini(int classes, int imgsz) {
  GraphSpec g = base_spec("gelan-repvit-mini", classes, imgsz);
  const PathTag S = PathTag::Shared;
  const PathTag G = PathTag::Global;
  g.layers.push_back(conv(1, S, -1, 32, 3, 2));
  append_local_core(g);
  g.layers.push_back(conv(17, G, 10, 32, 1, 1));
  LayerSpec ev = elan(18, G, 17, 64, 1);
  ev.kind = LayerKind::ElanViT;
  ev.vit_heads = 2;
  ev.vit_layers = 1;
  g.layers.push_back(ev);
  g.layers.push_back(up(19, G, 18));
  g.layers.push_back(up(20, G, 19));
  g.layers.push_back(cat(21, G, {20, 16}));
  g.layers.push_back(conv(22, G, 21, 64, 1, 1));
  g.layers.push_back(conv(23, S, 22, 64, 3, 1));
  g.layers.push_back(predict(24, 23));
  g.layers.push_back(conv(25, S, 13, 96, 3, 1));
  g.layers.push_back(predict(26, 25));
  g.heads = {24, 26};
  g.strides = {8, 16};
  return g;
}

}  // namespace

std::vector<std::string> zoo_names() {
  return {"gelan-t-mini", "gelan-vit-mini", "gelan-repvit-mini"};
}

GraphSpec zoo_spec(const std::string& name, int classes, int imgsz) {
  if (classes < 1) throw ConfigError("classes must be >= 1, got " + std::to_string(classes));
  if (name == "gelan-t-mini") return gelan_t_mini(classes, imgsz);
  if (name == "gelan-vit-mini") return gelan_vit_mini(classes, imgsz);
  if (name == "gelan-repvit-mini") return gelan_repvit_mini(classes, imgsz);
  throw ConfigError("unknown model '" + name + "'");
}

}  // namespace sod
