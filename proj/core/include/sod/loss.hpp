#pragma once

#include <vector>

#include "sod/detect.hpp"
#include "sod/tensor.hpp"

namespace sod {

struct LossGains {
  real box = 0.05, cls = 0.5, obj = 1.0;
};

struct LossBreakdown {
  real box = 0, cls = 0, obj = 0, total = 0;
  int assigned = 0;    // matched (gt, anchor, cell) triples across the batch
  int unassigned = 0;  // gt boxes matching no anchor at any scale
};

// Composite detection loss, differentiable end to end:
//   box = mean(1 - CIoU) over assigned pairs,
//   cls = BCE on class logits of assigned cells (one-hot targets),
//   obj = BCE over every cell at every scale (1 at assigned),
//   total = box*gain.box + cls*gain.cls + obj*gain.obj.
// `total_out`, when given, receives the tape-connected total for backward.
LossBreakdown compute_loss(Tape* tape, const std::vector<Tensor>& head_maps,
                           const std::vector<std::vector<Label>>& gts_per_image,
                           const AnchorSet& anchors, int classes, int imgsz,
                           const LossGains& gains = {}, Tensor* total_out = nullptr);

}  // namespace sod
