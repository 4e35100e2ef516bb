#include "sod/metrics.hpp"

#include <algorithm>
#include <sstream>

namespace sod {

namespace {

constexpr double kThresholds[] = {0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95};

std::vector<Detection> class_dets(const std::vector<Detection>& dets, int c) {
  std::vector<Detection> out;
  for (const Detection& d : dets)
    if (d.class_id == c) out.push_back(d);
  return out;
}

std::vector<GtBox> class_gts(const std::vector<GtBox>& gts, int c) {
  std::vector<GtBox> out;
  for (const GtBox& g : gts)
    if (g.class_id == c) out.push_back(g);
  return out;
}

double class_mean(const std::vector<Detection>& dets, const std::vector<GtBox>& gts, int classes,
                  bool all_thresholds) {
  double total = 0;
  int counted = 0;
  for (int c = 0; c < classes; ++c) {
    std::vector<GtBox> cg = class_gts(gts, c);
    if (cg.empty()) continue;
    std::vector<Detection> cd = class_dets(dets, c);
    double v = 0;
    if (all_thresholds) {
      for (double u : kThresholds) v += ap_u(cd, cg, u);
      v /= static_cast<double>(std::size(kThresholds));
    } else {
      v = ap_u(cd, cg, 0.5);
    }
    total += v;
    ++counted;
  }
  if (counted == 0) throw NumericError("mAP undefined: no class has any ground truth");
  return total / counted;
}

}  // namespace

double ap_u(const std::vector<Detection>& dets, const std::vector<GtBox>& gts, double u) {
  if (gts.empty()) return 0.0;
  std::vector<size_t> order(dets.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return dets[a].conf > dets[b].conf; });
  std::vector<bool> used(gts.size(), false);
  std::vector<double> recall, precision;
  int tp = 0, fp = 0;
  for (size_t oi : order) {
    const Detection& d = dets[oi];
    int best = -1;
    double best_iou = 0;
    for (size_t g = 0; g < gts.size(); ++g) {
      if (used[g] || gts[g].image_id != d.image_id) continue;
      double i = box_iou(d.x1, d.y1, d.x2, d.y2, gts[g].x1, gts[g].y1, gts[g].x2, gts[g].y2);
      if (i >= u && i > best_iou) {  // strict >: equal IoU keeps the earlier gt
        best_iou = i;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0) {
      used[static_cast<size_t>(best)] = true;
      ++tp;
    } else {
      ++fp;
    }
    recall.push_back(static_cast<double>(tp) / static_cast<double>(gts.size()));
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
  }
  // monotone non-increasing precision envelope, exact area under it
  for (int i = static_cast<int>(precision.size()) - 2; i >= 0; --i)
    precision[static_cast<size_t>(i)] =
        std::max(precision[static_cast<size_t>(i)], precision[static_cast<size_t>(i) + 1]);
  double ap = 0, prev_r = 0;
  for (size_t i = 0; i < recall.size(); ++i) {
    ap += (recall[i] - prev_r) * precision[i];
    prev_r = recall[i];
  }
  return ap;
}

double map50(const std::vector<Detection>& dets, const std::vector<GtBox>& gts, int classes) {
  return class_mean(dets, gts, classes, false);
}

double map50_95(const std::vector<Detection>& dets, const std::vector<GtBox>& gts, int classes) {
  return class_mean(dets, gts, classes, true);
}

MetricsReport metrics_report(const std::vector<Detection>& dets, const std::vector<GtBox>& gts,
                             int classes) {
  MetricsReport rep;
  for (int c = 0; c < classes; ++c) {
    std::vector<GtBox> cg = class_gts(gts, c);
    rep.gt_counts.push_back(static_cast<int>(cg.size()));
    rep.ap50.push_back(cg.empty() ? -1.0 : ap_u(class_dets(dets, c), cg, 0.5));
  }
  rep.map50 = map50(dets, gts, classes);
  rep.map50_95 = map50_95(dets, gts, classes);
  return rep;
}

std::string format_metrics(const MetricsReport& rep, const std::vector<std::string>& class_names) {
  std::ostringstream os;
  os << "class        gts   ap50\n";
  for (size_t c = 0; c < rep.ap50.size(); ++c) {
    std::string name = c < class_names.size() ? class_names[c] : "class" + std::to_string(c);
    char buf[96];
    if (rep.ap50[c] < 0)
      std::snprintf(buf, sizeof(buf), "%-12s %4d      -\n", name.c_str(), rep.gt_counts[c]);
    else
      std::snprintf(buf, sizeof(buf), "%-12s %4d  %.4f\n", name.c_str(), rep.gt_counts[c],
                    rep.ap50[c]);
    os << buf;
  }
  char buf[64];
  std::snprintf(buf, sizeof(buf), "mAP50 %.4f\nmAP50:95 %.4f\n", rep.map50, rep.map50_95);
  os << buf;
  return os.str();
}

}  // namespace sod
