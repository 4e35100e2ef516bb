#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <random>

#include "sod/metrics.hpp"

using namespace sod;

namespace {

// Point-by-point PR reference: for every prefix of the confidence-ranked
// list, rerun the greedy matching from scratch, then integrate the
// envelope. Deliberately quadratic and structured unlike the library path.
double ap_reference(std::vector<Detection> dets, const std::vector<GtBox>& gts, double u) {
  if (gts.empty()) return 0.0;
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection& a, const Detection& b) { return a.conf > b.conf; });
  std::vector<std::pair<double, double>> pr;  // (recall, precision)
  for (size_t k = 1; k <= dets.size(); ++k) {
    std::vector<bool> used(gts.size(), false);
    int tp = 0;
    for (size_t i = 0; i < k; ++i) {
      int best = -1;
      double best_iou = 0;
      for (size_t g = 0; g < gts.size(); ++g) {
        if (used[g] || gts[g].image_id != dets[i].image_id) continue;
        double v = box_iou(dets[i].x1, dets[i].y1, dets[i].x2, dets[i].y2, gts[g].x1, gts[g].y1,
                           gts[g].x2, gts[g].y2);
        if (v >= u && v > best_iou) {
          best_iou = v;
          best = static_cast<int>(g);
        }
      }
      if (best >= 0) {
        used[static_cast<size_t>(best)] = true;
        ++tp;
      }
    }
    pr.emplace_back(static_cast<double>(tp) / static_cast<double>(gts.size()),
                    static_cast<double>(tp) / static_cast<double>(k));
  }
  double ap = 0, prev_r = 0;
  for (size_t i = 0; i < pr.size(); ++i) {
    double env = 0;
    for (size_t j = i; j < pr.size(); ++j) env = std::max(env, pr[j].second);
    ap += (pr[i].first - prev_r) * env;
    prev_r = pr[i].first;
  }
  return ap;
}

GtBox gt(int img, int cls, double x1, double y1, double x2, double y2) {
  return {img, cls, x1, y1, x2, y2};
}

Detection det(int img, int cls, double conf, double x1, double y1, double x2, double y2) {
  return {img, cls, conf, x1, y1, x2, y2};
}

}  // namespace

TEST_CASE("iou of identical, disjoint and hand-computed boxes") {
  CHECK(box_iou(0, 0, 2, 2, 0, 0, 2, 2) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(box_iou(0, 0, 1, 1, 5, 5, 6, 6) == 0.0);
  CHECK(box_iou(0, 0, 2, 2, 1, 1, 3, 3) == doctest::Approx(1.0 / 7).epsilon(1e-12));
}

TEST_CASE("one perfect match gives AP 1") {
  std::vector<GtBox> g{gt(0, 0, 0, 0, 10, 10)};
  std::vector<Detection> d{det(0, 0, 0.9, 0, 0, 10, 10)};
  CHECK(ap_u(d, g, 0.5) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("hand-derived TP/FP/TP sequence reproduces 5/6 to 1e-9") {
  std::vector<GtBox> g{gt(0, 0, 0, 0, 10, 10), gt(0, 0, 40, 40, 50, 50)};
  std::vector<Detection> d{det(0, 0, 0.9, 0, 0, 10, 10),        // TP
                           det(0, 0, 0.8, 100, 100, 110, 110),  // FP
                           det(0, 0, 0.7, 40, 40, 50, 50)};     // TP
  double ap = ap_u(d, g, 0.5);
  CHECK(std::abs(ap - (0.5 * 1.0 + 0.5 * (2.0 / 3))) < 1e-9);
  CHECK(std::abs(ap - 5.0 / 6) < 1e-9);
}

TEST_CASE("zero gts yield AP 0") {
  std::vector<Detection> d{det(0, 0, 0.9, 0, 0, 10, 10)};
  CHECK(ap_u(d, {}, 0.5) == 0.0);
}

TEST_CASE("ap matches the brute-force PR enumeration on 600 fuzzed instances") {
  std::mt19937_64 rng(101);
  std::uniform_real_distribution<double> u01(0, 1);
  for (int trial = 0; trial < 600; ++trial) {
    int n_gt = 1 + static_cast<int>(rng() % 4);
    int n_det = static_cast<int>(rng() % 7);
    std::vector<GtBox> gts;
    std::vector<Detection> dets;
    for (int i = 0; i < n_gt; ++i) {
      double x = 40 * u01(rng), y = 40 * u01(rng);
      gts.push_back(gt(static_cast<int>(rng() % 2), 0, x, y, x + 4 + 10 * u01(rng),
                       y + 4 + 10 * u01(rng)));
    }
    for (int i = 0; i < n_det; ++i) {
      // half the detections perturb a gt, half are noise
      if (i % 2 == 0 && !gts.empty()) {
        const GtBox& b = gts[rng() % gts.size()];
        double dx = 6 * (u01(rng) - 0.5), dy = 6 * (u01(rng) - 0.5);
        dets.push_back(det(b.image_id, 0, u01(rng), b.x1 + dx, b.y1 + dy, b.x2 + dx, b.y2 + dy));
      } else {
        double x = 40 * u01(rng), y = 40 * u01(rng);
        dets.push_back(det(static_cast<int>(rng() % 2), 0, u01(rng), x, y, x + 4 + 10 * u01(rng),
                           y + 4 + 10 * u01(rng)));
      }
    }
    for (double thr : {0.5, 0.65, 0.8}) {
      double got = ap_u(dets, gts, thr);
      double want = ap_reference(dets, gts, thr);
      CHECK(got == doctest::Approx(want).epsilon(1e-12));
    }
  }
}

TEST_CASE("map50 is the unweighted class mean over classes with gts") {
  std::vector<GtBox> g{gt(0, 0, 0, 0, 10, 10), gt(0, 1, 20, 20, 30, 30)};
  std::vector<Detection> d{det(0, 0, 0.9, 0, 0, 10, 10),  // class 0 perfect
                           det(0, 1, 0.9, 100, 100, 110, 110)};  // class 1 miss
  CHECK(map50(d, g, 2) == doctest::Approx(0.5).epsilon(1e-12));
  // class 2 has no gts and is excluded from the mean
  CHECK(map50(d, g, 3) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("map with no ground truth anywhere is an error") {
  std::vector<Detection> d{det(0, 0, 0.9, 0, 0, 10, 10)};
  CHECK_THROWS_AS(map50(d, {}, 2), NumericError);
  CHECK_THROWS_AS(map50_95(d, {}, 2), NumericError);
}

TEST_CASE("an IoU-0.6 match counts at exactly three of ten thresholds") {
  // det overlaps gt with IoU 0.6: gt [0,10], det [0,10] shifted so
  // inter/union = 0.6 -> width overlap solves to 7.5 of 10
  std::vector<GtBox> g{gt(0, 0, 0, 0, 10, 10)};
  std::vector<Detection> d{det(0, 0, 0.9, 2.5, 0, 12.5, 10)};
  double i = box_iou(0, 0, 10, 10, 2.5, 0, 12.5, 10);
  CHECK(i == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(map50(d, g, 1) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(map50_95(d, g, 1) == doctest::Approx(3.0 / 10).epsilon(1e-12));
}

TEST_CASE("map50_95 never exceeds map50") {
  std::mt19937_64 rng(103);
  std::uniform_real_distribution<double> u01(0, 1);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<GtBox> gts;
    std::vector<Detection> dets;
    for (int i = 0; i < 3; ++i) {
      double x = 30 * u01(rng), y = 30 * u01(rng);
      gts.push_back(gt(0, static_cast<int>(rng() % 2), x, y, x + 5 + 5 * u01(rng), y + 5 + 5 * u01(rng)));
      double dx = 4 * (u01(rng) - 0.5);
      const GtBox& b = gts.back();
      dets.push_back(det(0, b.class_id, u01(rng), b.x1 + dx, b.y1, b.x2 + dx, b.y2));
    }
    CHECK(map50_95(dets, gts, 2) <= map50(dets, gts, 2) + 1e-12);
  }
}

TEST_CASE("AP depends only on the confidence ordering") {
  std::vector<GtBox> g{gt(0, 0, 0, 0, 10, 10), gt(0, 0, 40, 40, 50, 50)};
  std::vector<Detection> d{det(0, 0, 0.9, 0, 0, 10, 10), det(0, 0, 0.5, 100, 100, 110, 110),
                           det(0, 0, 0.3, 40, 40, 50, 50)};
  double base = ap_u(d, g, 0.5);
  for (auto& x : d) x.conf = x.conf * 0.001 + 0.1;  // strictly monotone rescale
  CHECK(ap_u(d, g, 0.5) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("duplicating a matched detection never raises AP") {
  std::vector<GtBox> g{gt(0, 0, 0, 0, 10, 10), gt(0, 0, 40, 40, 50, 50)};
  std::vector<Detection> d{det(0, 0, 0.9, 0, 0, 10, 10), det(0, 0, 0.7, 40, 40, 50, 50)};
  double base = ap_u(d, g, 0.5);
  d.push_back(det(0, 0, 0.8, 0, 0, 10, 10));  // duplicate of the matched first box
  CHECK(ap_u(d, g, 0.5) <= base + 1e-12);
}

TEST_CASE("metrics report composes per-class AP with the class means") {
  std::vector<GtBox> g{gt(0, 0, 0, 0, 10, 10), gt(0, 1, 20, 20, 30, 30)};
  std::vector<Detection> d{det(0, 0, 0.9, 0, 0, 10, 10), det(0, 1, 0.8, 20, 20, 30, 30)};
  MetricsReport rep = metrics_report(d, g, 3);
  REQUIRE(rep.ap50.size() == 3);
  CHECK(rep.ap50[0] == doctest::Approx(1.0));
  CHECK(rep.ap50[1] == doctest::Approx(1.0));
  CHECK(rep.ap50[2] == -1.0);  // empty class flagged
  CHECK(rep.map50 == doctest::Approx(1.0));
  std::string text = format_metrics(rep, {"panel", "disc"});
  CHECK(text.find("mAP50") != std::string::npos);
  CHECK(text.find("panel") != std::string::npos);
}
