#include "sod/audit.hpp"

#include <sstream>

namespace sod {

namespace {

std::int64_t conv_params(int k, int cin, int cout, bool bn) {
  std::int64_t p = static_cast<std::int64_t>(k) * k * cin * cout + cout;
  if (bn) p += 2 * cout;
  return p;
}

std::int64_t encoder_layer_params(int d) {
  std::int64_t qkvo = 4 * (static_cast<std::int64_t>(d) * d + d);
  std::int64_t norms = 2 * (2 * static_cast<std::int64_t>(d));
  std::int64_t mlp = static_cast<std::int64_t>(d) * 2 * d + 2 * d + static_cast<std::int64_t>(2 * d) * d + d;
  return qkvo + norms + mlp;
}

// projection + attention matmuls + MLP, 2*MACs convention
std::int64_t encoder_layer_flops(int d, std::int64_t T) {
  std::int64_t qkvo = 4 * 2 * T * static_cast<std::int64_t>(d) * d;
  std::int64_t attn = 2 * (2 * T * T * static_cast<std::int64_t>(d));  // QK^T and AV
  std::int64_t mlp = 2 * (2 * T * static_cast<std::int64_t>(d) * 2 * d);
  return qkvo + attn + mlp;
}

struct Mode {
  bool flops = false;
  int input_h = 0, input_w = 0;
};

ComplexityReport run_audit(const GraphSpec& spec, const Mode& mode) {
  ResolvedGraph rg = resolve(spec);
  if (mode.flops) {
    if (mode.input_h % rg.total_stride != 0 || mode.input_w % rg.total_stride != 0)
      throw ConfigError("input " + std::to_string(mode.input_h) + "x" + std::to_string(mode.input_w) +
                        " not divisible by total stride " + std::to_string(rg.total_stride));
  }
  ComplexityReport rep;
  for (const ResolvedLayer& rl : rg.layers) {
    LayerCost row;
    row.id = rl.spec.id;
    row.kind = kind_name(rl.spec.kind);
    row.tag = rl.spec.tag;
    std::int64_t h = mode.flops ? mode.input_h / rl.out_stride : 0;
    std::int64_t w = mode.flops ? mode.input_w / rl.out_stride : 0;
    std::int64_t hw = h * w;
    switch (rl.spec.kind) {
      case LayerKind::Conv:
        row.params = conv_params(rl.spec.k, rl.cin, rl.cout, rl.spec.bn);
        row.flops = 2 * static_cast<std::int64_t>(rl.spec.k) * rl.spec.k * rl.cin * rl.cout * hw;
        break;
      case LayerKind::Predict:
        row.params = conv_params(1, rl.cin, rl.cout, false);
        row.flops = 2 * static_cast<std::int64_t>(rl.cin) * rl.cout * hw;
        break;
      case LayerKind::Elan:
      case LayerKind::ElanViT: {
        int half = rl.cin / 2;
        row.params = rl.spec.depth * conv_params(3, half, half, true) +
                     conv_params(1, rl.trunk_channels, rl.cout, true);
        row.flops = rl.spec.depth * 2 * std::int64_t(9) * half * half * hw +
                    2 * static_cast<std::int64_t>(rl.trunk_channels) * rl.cout * hw;
        if (rl.spec.kind == LayerKind::ElanViT && rl.spec.vit_layers > 0) {
          int d = rl.trunk_channels;
          std::int64_t T = mode.flops ? hw : static_cast<std::int64_t>(rl.tokens_h) * rl.tokens_w;
          row.params += static_cast<std::int64_t>(rl.tokens_h) * rl.tokens_w * d;  // pos
          row.params += rl.spec.vit_layers * encoder_layer_params(d);
          row.flops += rl.spec.vit_layers * encoder_layer_flops(d, T);
        }
        break;
      }
      case LayerKind::Spp:
        row.params = conv_params(1, 4 * rl.cin, rl.cout, true);
        row.flops = 2 * static_cast<std::int64_t>(4 * rl.cin) * rl.cout * hw;
        break;
      case LayerKind::ViT: {
        int d = rl.spec.vit_dim;
        std::int64_t T = (mode.flops ? hw : static_cast<std::int64_t>(rl.tokens_h) * rl.tokens_w) + 1;
        row.params = conv_params(1, rl.cin, d, false);                    // patch projection
        row.params += d;                                                  // cls
        row.params += (static_cast<std::int64_t>(rl.tokens_h) * rl.tokens_w + 1) * d;  // pos
        row.params += rl.spec.vit_layers * encoder_layer_params(d);
        row.flops = 2 * static_cast<std::int64_t>(rl.cin) * d * hw;
        row.flops += rl.spec.vit_layers * encoder_layer_flops(d, T);
        break;
      }
      case LayerKind::Up:
      case LayerKind::Concat:
        break;  // zero-cost op classes
    }
    if (!mode.flops) row.flops = 0;
    if (mode.flops) row.out_shape = {rl.cout, static_cast<int>(h), static_cast<int>(w)};
    rep.total_params += row.params;
    rep.total_flops += row.flops;
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

}  // namespace

ComplexityReport count_params(const GraphSpec& spec) { return run_audit(spec, {false, 0, 0}); }

ComplexityReport count_flops(const GraphSpec& spec, int input_h, int input_w) {
  return run_audit(spec, {true, input_h, input_w});
}

CapacityLedger capacity_report(const GraphSpec& spec, int input_h, int input_w) {
  ComplexityReport rep = count_flops(spec, input_h, input_w);
  ComplexityReport par = count_params(spec);
  CapacityLedger led;
  for (size_t i = 0; i < rep.rows.size(); ++i) {
    CapacitySide* side = nullptr;
    switch (rep.rows[i].tag) {
      case PathTag::Local: side = &led.local; break;
      case PathTag::Global: side = &led.global; break;
      case PathTag::Shared: side = &led.shared; break;
    }
    side->params += par.rows[i].params;
    side->flops += rep.rows[i].flops;
    led.total.params += par.rows[i].params;
    led.total.flops += rep.rows[i].flops;
  }
  return led;
}

std::string format_report(const ComplexityReport& params, const ComplexityReport& flops) {
  std::ostringstream os;
  os << "id    kind      tag      params        flops  out_shape\n";
  for (size_t i = 0; i < params.rows.size(); ++i) {
    const LayerCost& p = params.rows[i];
    const LayerCost& f = flops.rows[i];
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%-5d %-9s %-7s %8lld %12lld  %s\n", p.id, p.kind.c_str(),
                  tag_name(p.tag).c_str(), static_cast<long long>(p.params),
                  static_cast<long long>(f.flops), shape_str(f.out_shape).c_str());
    os << buf;
  }
  os << "total params " << params.total_params << "\n";
  os << "total flops " << flops.total_flops << " (" << flops.gflops() << " GFLOPs)\n";
  return os.str();
}

std::string format_ledger(const CapacityLedger& l) {
  std::ostringstream os;
  auto line = [&](const char* name, const CapacitySide& s) {
    os << name << " params " << s.params << " flops " << s.flops << "\n";
  };
  line("c_local ", l.local);
  line("c_global", l.global);
  line("c_shared", l.shared);
  line("c_total ", l.total);
  return os.str();
}

}  // namespace sod
