#pragma once

#include <string>
#include <vector>

#include "sod/detect.hpp"

namespace sod {

struct MetricsReport {
  std::vector<double> ap50;      // per class; -1 where the class has no gt
  std::vector<int> gt_counts;    // per class
  double map50 = 0;
  double map50_95 = 0;
};

// Per-class average precision at IoU threshold u: confidence-descending
// greedy matching (one match per gt, ties to the earlier gt index),
// all-points area under the monotone precision envelope.
double ap_u(const std::vector<Detection>& dets, const std::vector<GtBox>& gts, double u);

// Class means over classes holding at least one gt; throws NumericError
// when no class has any gt.
double map50(const std::vector<Detection>& dets, const std::vector<GtBox>& gts, int classes);
double map50_95(const std::vector<Detection>& dets, const std::vector<GtBox>& gts, int classes);

MetricsReport metrics_report(const std::vector<Detection>& dets, const std::vector<GtBox>& gts,
                             int classes);
std::string format_metrics(const MetricsReport& rep, const std::vector<std::string>& class_names);

}  // namespace sod
