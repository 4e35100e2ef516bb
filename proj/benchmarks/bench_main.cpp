#include <benchmark/benchmark.h>

#include <random>

#include "sod/loss.hpp"
#include "sod/model.hpp"
#include "sod/zoo.hpp"

namespace {

sod::Tensor randn_image(int c, int h, int w, std::uint64_t seed) {
  sod::Tensor t({1, c, h, w});
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  for (auto& v : t.data()) v = static_cast<sod::real>(u(rng));
  return t;
}

void BM_Conv3x3Forward(benchmark::State& state) {
  int c = static_cast<int>(state.range(0));
  sod::ConvBlock conv;
  conv.cin = c;
  conv.cout = c;
  conv.k = 3;
  conv.stride = 1;
  conv.pad = 1;
  std::mt19937_64 rng(1);
  conv.init(rng);
  sod::Tensor x = randn_image(c, 56, 56, 2);
  for (auto _ : state) {
    sod::Tensor y = conv.forward(nullptr, x, false);
    benchmark::DoNotOptimize(y.data().data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * 9 * c * c * 56 * 56);
}
BENCHMARK(BM_Conv3x3Forward)->Arg(16)->Arg(32)->Arg(64);

void BM_ModelForward(benchmark::State& state) {
  static const char* names[] = {"gelan-t-mini", "gelan-vit-mini", "gelan-repvit-mini"};
  const char* name = names[state.range(0)];
  sod::Model model = sod::Model::build(sod::zoo_spec(name, 3, 64), 1);
  sod::Tensor x = randn_image(3, 64, 64, 3);
  for (auto _ : state) {
    sod::ForwardResult fr = model.forward(nullptr, x, false);
    benchmark::DoNotOptimize(fr.head_maps.back().data().data());
  }
  state.SetLabel(name);
}
BENCHMARK(BM_ModelForward)->Arg(0)->Arg(1)->Arg(2);

void BM_TrainStep(benchmark::State& state) {
  sod::Model model = sod::Model::build(sod::zoo_spec("gelan-repvit-mini", 3, 64), 1);
  model.anchors = {6, 6, 10, 10, 14, 14, 18, 18, 24, 24, 30, 30};
  sod::AnchorSet anchors =
      sod::AnchorSet::from_flat(model.anchors, model.spec.strides);
  std::vector<sod::NamedTensor> params = model.parameters();
  for (auto& [n, t] : params) t.set_requires_grad(true);
  sod::Tensor x = randn_image(3, 64, 64, 4);
  std::vector<sod::Label> labels{{0, 0.4, 0.4, 0.2, 0.25}, {1, 0.7, 0.6, 0.3, 0.2}};
  for (auto _ : state) {
    sod::Tape tape;
    sod::ForwardResult fr = model.forward(&tape, x, true);
    sod::Tensor total;
    sod::compute_loss(&tape, fr.head_maps, {labels}, anchors, 3, 64, {}, &total);
    tape.backward(total);
    model.zero_grad();
    benchmark::DoNotOptimize(total.item());
  }
}
BENCHMARK(BM_TrainStep);

}  // namespace

BENCHMARK_MAIN();
