#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sod/tensor.hpp"

namespace sod {

// Normalized ground-truth label: center/size in [0,1].
struct Label {
  int class_id = 0;
  real cx = 0, cy = 0, w = 0, h = 0;
};

struct GtBox {
  int image_id = 0;
  int class_id = 0;
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
};

struct Detection {
  int image_id = 0;
  int class_id = 0;
  double conf = 0;
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
};

// Per-scale prior boxes, pixels.
struct AnchorSet {
  std::vector<int> strides;                            // one per scale
  std::vector<std::vector<std::pair<real, real>>> whs;  // per scale, (w,h)
  int scales() const { return static_cast<int>(strides.size()); }
  int per_scale() const { return whs.empty() ? 0 : static_cast<int>(whs[0].size()); }
  void validate() const;  // positive dims, one list per scale, equal arity
  // flat (w,h) list scale-major <-> structured form
  std::vector<real> flatten() const;
  static AnchorSet from_flat(const std::vector<real>& flat, const std::vector<int>& strides);
};

// One matched (gt, anchor, cell) triple.
struct Assignment {
  int scale = 0, anchor = 0, cell_x = 0, cell_y = 0, gt = 0;
};

struct AssignResult {
  std::vector<Assignment> assigned;
  std::vector<int> unassigned;  // gt indices matching no anchor anywhere
};

// Ratio-gated anchor matching: gt g matches anchor a iff
// max(w_g/w_a, w_a/w_g) < anchor_t and likewise for h; each match trains
// the containing cell plus the two nearest neighbor cells.
AssignResult assign_targets(const std::vector<Label>& gts, const AnchorSet& anchors, int imgsz,
                            real anchor_t = 4.0);

// Decode head maps [N, A*(5+K), h, w] into detections:
// center = (cell + 2*sigmoid(t_xy) - 0.5) * stride,
// size   = anchor * (2*sigmoid(t_wh))^2,
// conf   = sigmoid(obj) * max class probability.
std::vector<Detection> decode_boxes(const std::vector<Tensor>& head_maps, const AnchorSet& anchors,
                                    int classes, int image_id = 0);

double box_iou(double ax1, double ay1, double ax2, double ay2, double bx1, double by1, double bx2,
               double by2);

// Greedy per-class suppression, confidence descending.
std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh = 0.45,
                           double conf_thresh = 0.25);

// k-means (Lloyd, k = scales*per_scale) over box (w,h) in pixels; centers
// sorted by area and split across scales, finest stride first.
AnchorSet kmeans_anchors(const std::vector<std::pair<real, real>>& whs,
                         const std::vector<int>& strides, int per_scale, std::uint64_t seed);

// Detection text format: `image_id class conf x1 y1 x2 y2`, two-decimal
// fixed point, one line per detection.
void write_detections(const std::string& path, const std::vector<Detection>& dets);
std::vector<Detection> load_detections(const std::string& path);

}  // namespace sod
