#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sod/graph.hpp"

namespace sod {

struct LayerCost {
  int id = 0;
  std::string kind;
  PathTag tag = PathTag::Local;
  std::int64_t params = 0;
  std::int64_t flops = 0;
  Shape out_shape;  // [C, H, W] at the audited input size
};

struct ComplexityReport {
  std::int64_t total_params = 0;
  std::int64_t total_flops = 0;
  std::vector<LayerCost> rows;
  double gflops() const { return static_cast<double>(total_flops) / 1e9; }
};

struct CapacitySide {
  std::int64_t params = 0;
  std::int64_t flops = 0;
};

// Per-path capacity partition: local + global + shared == total, exact.
struct CapacityLedger {
  CapacitySide local, global, shared, total;
};

// Analytic per-layer parameter counts (conv: k*k*cin*cout + cout,
// norms: 2*c, embeddings: tokens*d), summed exactly.
ComplexityReport count_params(const GraphSpec& spec);

// FLOPs = 2*MACs for conv/linear/attention matmuls; elementwise, norm and
// pooling ops excluded. Counts are shape-propagated at input_hw.
ComplexityReport count_flops(const GraphSpec& spec, int input_h, int input_w);

CapacityLedger capacity_report(const GraphSpec& spec, int input_h, int input_w);

std::string format_report(const ComplexityReport& params, const ComplexityReport& flops);
std::string format_ledger(const CapacityLedger& ledger);

}  // namespace sod
