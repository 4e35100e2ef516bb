#include "sod/loss.hpp"

#include <cmath>

namespace sod {

namespace {

constexpr real kEps = 1e-9;

Tensor constant(const std::vector<real>& vals) {
  Tensor t({static_cast<int>(vals.size())});
  t.data() = vals;
  return t;
}

// concat 1-D tensors along their only axis
Tensor concat1(Tape* tape, const std::vector<Tensor>& xs) {
  if (xs.size() == 1) return xs[0];
  std::vector<Tensor> wrapped;
  for (const Tensor& x : xs)
    wrapped.push_back(reshape(tape, x, {1, static_cast<int>(x.numel()), 1, 1}));
  Tensor cat = concat_channels(tape, wrapped);
  return reshape(tape, cat, {static_cast<int>(cat.numel())});
}

}  // namespace

LossBreakdown compute_loss(Tape* tape, const std::vector<Tensor>& head_maps,
                           const std::vector<std::vector<Label>>& gts_per_image,
                           const AnchorSet& anchors, int classes, int imgsz,
                           const LossGains& gains, Tensor* total_out) {
  anchors.validate();
  int S = anchors.scales(), A = anchors.per_scale(), ch = 5 + classes;
  if (head_maps.size() != static_cast<size_t>(S))
    throw ConfigError("loss got " + std::to_string(head_maps.size()) + " head maps for " +
                      std::to_string(S) + " anchor scales");
  int N = head_maps[0].dim(0);
  if (gts_per_image.size() != static_cast<size_t>(N))
    throw ConfigError("loss got labels for " + std::to_string(gts_per_image.size()) +
                      " images, batch is " + std::to_string(N));
  for (const Tensor& m : head_maps)
    if (m.rank() != 4 || m.dim(0) != N || m.dim(1) != A * ch)
      throw ShapeError("head map " + shape_str(m.shape()) + " expected [" + std::to_string(N) +
                       "," + std::to_string(A * ch) + ",h,w]");

  LossBreakdown bd;
  std::vector<std::vector<Assignment>> per_scale_asn(static_cast<size_t>(S));
  std::vector<std::vector<int>> asn_image(static_cast<size_t>(S));
  std::vector<AssignResult> per_image;
  for (int n = 0; n < N; ++n) {
    per_image.push_back(assign_targets(gts_per_image[static_cast<size_t>(n)], anchors, imgsz));
    const AssignResult& ar = per_image.back();
    bd.unassigned += static_cast<int>(ar.unassigned.size());
    for (const Assignment& as : ar.assigned) {
      per_scale_asn[static_cast<size_t>(as.scale)].push_back(as);
      asn_image[static_cast<size_t>(as.scale)].push_back(n);
      ++bd.assigned;
    }
  }

  // objectness: every cell at every scale, target 1 at assigned
  std::vector<Tensor> obj_logits, obj_targets;
  for (int s = 0; s < S; ++s) {
    const Tensor& m = head_maps[s];
    int h = m.dim(2), w = m.dim(3);
    std::int64_t hw = static_cast<std::int64_t>(h) * w;
    std::vector<std::int64_t> idx;
    idx.reserve(static_cast<size_t>(N) * A * hw);
    for (int n = 0; n < N; ++n)
      for (int a = 0; a < A; ++a) {
        std::int64_t base = (static_cast<std::int64_t>(n) * (A * ch) + a * ch + 4) * hw;
        for (std::int64_t p = 0; p < hw; ++p) idx.push_back(base + p);
      }
    std::vector<real> tgt(idx.size(), 0);
    for (size_t i = 0; i < per_scale_asn[static_cast<size_t>(s)].size(); ++i) {
      const Assignment& as = per_scale_asn[static_cast<size_t>(s)][i];
      int n = asn_image[static_cast<size_t>(s)][i];
      std::int64_t pos = (static_cast<std::int64_t>(n) * A + as.anchor) * hw +
                         static_cast<std::int64_t>(as.cell_y) * w + as.cell_x;
      tgt[static_cast<size_t>(pos)] = 1;
    }
    obj_logits.push_back(gather(tape, m, idx, {static_cast<int>(idx.size())}));
    obj_targets.push_back(constant(tgt));
  }
  Tensor obj_t = bce_with_logits_mean(tape, concat1(tape, obj_logits), concat1(nullptr, obj_targets));

  // box + cls over assigned entries
  Tensor box_t, cls_t;
  if (bd.assigned == 0) {
    box_t = Tensor::zeros({1});
    cls_t = Tensor::zeros({1});
  } else {
    std::vector<Tensor> txs, tys, tws, ths, clss;
    std::vector<real> cellx, celly, strd, aw, ah, gx, gy, gw, gh, cls_tgt;
    for (int s = 0; s < S; ++s) {
      const auto& asn = per_scale_asn[static_cast<size_t>(s)];
      if (asn.empty()) continue;
      const Tensor& m = head_maps[s];
      int h = m.dim(2), w = m.dim(3);
      std::int64_t hw = static_cast<std::int64_t>(h) * w;
      std::vector<std::int64_t> itx, ity, itw, ith, icls;
      for (size_t i = 0; i < asn.size(); ++i) {
        const Assignment& as = asn[i];
        int n = asn_image[static_cast<size_t>(s)][i];
        auto flat = [&](int c) {
          return (static_cast<std::int64_t>(n) * (A * ch) + as.anchor * ch + c) * hw +
                 static_cast<std::int64_t>(as.cell_y) * w + as.cell_x;
        };
        itx.push_back(flat(0));
        ity.push_back(flat(1));
        itw.push_back(flat(2));
        ith.push_back(flat(3));
        for (int c = 0; c < classes; ++c) icls.push_back(flat(5 + c));
        cellx.push_back(static_cast<real>(as.cell_x));
        celly.push_back(static_cast<real>(as.cell_y));
        strd.push_back(static_cast<real>(anchors.strides[s]));
        aw.push_back(anchors.whs[s][static_cast<size_t>(as.anchor)].first);
        ah.push_back(anchors.whs[s][static_cast<size_t>(as.anchor)].second);
        const Label& g = gts_per_image[static_cast<size_t>(n)][static_cast<size_t>(as.gt)];
        gx.push_back(g.cx * imgsz);
        gy.push_back(g.cy * imgsz);
        gw.push_back(g.w * imgsz);
        gh.push_back(g.h * imgsz);
        for (int c = 0; c < classes; ++c) cls_tgt.push_back(c == g.class_id ? real(1) : real(0));
      }
      int M = static_cast<int>(asn.size());
      txs.push_back(gather(tape, m, itx, {M}));
      tys.push_back(gather(tape, m, ity, {M}));
      tws.push_back(gather(tape, m, itw, {M}));
      ths.push_back(gather(tape, m, ith, {M}));
      clss.push_back(gather(tape, m, icls, {M * classes}));
    }
    Tensor cellx_t = constant(cellx), celly_t = constant(celly), strd_t = constant(strd);
    Tensor aw_t = constant(aw), ah_t = constant(ah);
    Tensor gx_t = constant(gx), gy_t = constant(gy), gw_t = constant(gw), gh_t = constant(gh);
    Tensor zero_t = Tensor::zeros({static_cast<int>(cellx.size())});

    auto off = [&](const Tensor& t) {
      return add_scalar(tape, mul_scalar(tape, sigmoid(tape, t), 2), real(-0.5));
    };
    Tensor bx = mul(tape, add(tape, off(concat1(tape, txs)), cellx_t), strd_t);
    Tensor by = mul(tape, add(tape, off(concat1(tape, tys)), celly_t), strd_t);
    auto szdecode = [&](const Tensor& t, const Tensor& anc) {
      return mul(tape, square(tape, mul_scalar(tape, sigmoid(tape, t), 2)), anc);
    };
    Tensor bw = szdecode(concat1(tape, tws), aw_t);
    Tensor bh = szdecode(concat1(tape, ths), ah_t);
    Tensor x1 = sub(tape, bx, mul_scalar(tape, bw, 0.5));
    Tensor x2 = add(tape, bx, mul_scalar(tape, bw, 0.5));
    Tensor y1 = sub(tape, by, mul_scalar(tape, bh, 0.5));
    Tensor y2 = add(tape, by, mul_scalar(tape, bh, 0.5));
    std::vector<real> gx1(gx.size()), gx2(gx.size()), gy1(gx.size()), gy2(gx.size()), garea(gx.size());
    for (size_t i = 0; i < gx.size(); ++i) {
      gx1[i] = gx[i] - gw[i] / 2;
      gx2[i] = gx[i] + gw[i] / 2;
      gy1[i] = gy[i] - gh[i] / 2;
      gy2[i] = gy[i] + gh[i] / 2;
      garea[i] = gw[i] * gh[i];
    }
    Tensor gx1_t = constant(gx1), gx2_t = constant(gx2), gy1_t = constant(gy1),
           gy2_t = constant(gy2), garea_t = constant(garea);
    Tensor iw = maximum(tape, sub(tape, minimum(tape, x2, gx2_t), maximum(tape, x1, gx1_t)), zero_t);
    Tensor ih = maximum(tape, sub(tape, minimum(tape, y2, gy2_t), maximum(tape, y1, gy1_t)), zero_t);
    Tensor inter = mul(tape, iw, ih);
    Tensor uni = sub(tape, add(tape, mul(tape, bw, bh), garea_t), inter);
    Tensor iou = div(tape, inter, add_scalar(tape, uni, kEps));
    // enclosing-box diagonal and center distance
    Tensor cw = sub(tape, maximum(tape, x2, gx2_t), minimum(tape, x1, gx1_t));
    Tensor chh = sub(tape, maximum(tape, y2, gy2_t), minimum(tape, y1, gy1_t));
    Tensor c2 = add_scalar(tape, add(tape, square(tape, cw), square(tape, chh)), kEps);
    Tensor rho2 = add(tape, square(tape, sub(tape, bx, gx_t)), square(tape, sub(tape, by, gy_t)));
    // aspect-ratio consistency term
    std::vector<real> gaspect(gx.size());
    for (size_t i = 0; i < gx.size(); ++i) gaspect[i] = std::atan(gw[i] / gh[i]);
    Tensor aspect = tatan(tape, div(tape, bw, add_scalar(tape, bh, kEps)));
    real c4pi = real(4.0 / (M_PI * M_PI));
    Tensor v = mul_scalar(tape, square(tape, sub(tape, constant(gaspect), aspect)), c4pi);
    Tensor alpha = div(tape, v, add_scalar(tape, add(tape, add_scalar(tape, neg(tape, iou), 1), v), kEps));
    Tensor ciou = sub(tape, sub(tape, iou, div(tape, rho2, c2)), mul(tape, alpha, v));
    box_t = mean(tape, add_scalar(tape, neg(tape, ciou), 1));
    cls_t = bce_with_logits_mean(tape, concat1(tape, clss), constant(cls_tgt));
  }

  Tensor total = add(tape, add(tape, mul_scalar(tape, box_t, gains.box), mul_scalar(tape, cls_t, gains.cls)),
                     mul_scalar(tape, obj_t, gains.obj));
  bd.box = box_t.item();
  bd.cls = cls_t.item();
  bd.obj = obj_t.item();
  bd.total = total.item();
  if (total_out) *total_out = total;
  return bd;
}

}  // namespace sod
