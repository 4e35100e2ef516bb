#include "sod/detect.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

namespace sod {

void AnchorSet::validate() const {
  if (strides.empty() || strides.size() != whs.size())
    throw ConfigError("anchor set needs one (w,h) list per scale");
  for (size_t s = 0; s < whs.size(); ++s) {
    if (strides[s] <= 0) throw ConfigError("anchor stride must be positive");
    if (whs[s].size() != whs[0].size())
      throw ConfigError("anchor lists must have equal arity across scales");
    if (whs[s].empty()) throw ConfigError("empty anchor list for stride " + std::to_string(strides[s]));
    for (auto& [w, h] : whs[s])
      if (w <= 0 || h <= 0) throw ConfigError("anchor dims must be positive");
  }
}

std::vector<real> AnchorSet::flatten() const {
  std::vector<real> out;
  for (auto& list : whs)
    for (auto& [w, h] : list) {
      out.push_back(w);
      out.push_back(h);
    }
  return out;
}

AnchorSet AnchorSet::from_flat(const std::vector<real>& flat, const std::vector<int>& strides) {
  if (strides.empty() || flat.size() % (2 * strides.size()) != 0)
    throw ConfigError("flat anchor list of " + std::to_string(flat.size()) +
                      " values does not divide across " + std::to_string(strides.size()) +
                      " scales");
  AnchorSet a;
  a.strides = strides;
  size_t per = flat.size() / (2 * strides.size());
  size_t i = 0;
  for (size_t s = 0; s < strides.size(); ++s) {
    std::vector<std::pair<real, real>> list;
    for (size_t k = 0; k < per; ++k, i += 2) list.emplace_back(flat[i], flat[i + 1]);
    a.whs.push_back(std::move(list));
  }
  a.validate();
  return a;
}

AssignResult assign_targets(const std::vector<Label>& gts, const AnchorSet& anchors, int imgsz,
                            real anchor_t) {
  anchors.validate();
  AssignResult res;
  for (size_t g = 0; g < gts.size(); ++g) {
    const Label& gt = gts[g];
    real gw = gt.w * imgsz, gh = gt.h * imgsz;
    bool matched = false;
    for (int s = 0; s < anchors.scales(); ++s) {
      int stride = anchors.strides[s];
      int grid = imgsz / stride;
      real fx = gt.cx * imgsz / stride;
      real fy = gt.cy * imgsz / stride;
      int cx = std::min(static_cast<int>(fx), grid - 1);
      int cy = std::min(static_cast<int>(fy), grid - 1);
      for (int a = 0; a < anchors.per_scale(); ++a) {
        auto [aw, ah] = anchors.whs[s][a];
        real rw = std::max(gw / aw, aw / gw);
        real rh = std::max(gh / ah, ah / gh);
        if (rw >= anchor_t || rh >= anchor_t) continue;
        matched = true;
        std::vector<std::pair<int, int>> cells{{cx, cy}};
        real ox = fx - cx, oy = fy - cy;
        int nx = ox < 0.5 ? cx - 1 : cx + 1;
        int ny = oy < 0.5 ? cy - 1 : cy + 1;
        if (nx >= 0 && nx < grid) cells.emplace_back(nx, cy);
        if (ny >= 0 && ny < grid) cells.emplace_back(cx, ny);
        for (auto [ax, ay] : cells)
          res.assigned.push_back({s, a, ax, ay, static_cast<int>(g)});
      }
    }
    if (!matched) res.unassigned.push_back(static_cast<int>(g));
  }
  return res;
}

std::vector<Detection> decode_boxes(const std::vector<Tensor>& head_maps, const AnchorSet& anchors,
                                    int classes, int image_id) {
  anchors.validate();
  if (head_maps.size() != static_cast<size_t>(anchors.scales()))
    throw ConfigError("decode got " + std::to_string(head_maps.size()) + " maps for " +
                      std::to_string(anchors.scales()) + " anchor scales");
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  std::vector<Detection> out;
  int A = anchors.per_scale();
  int ch = 5 + classes;
  for (int s = 0; s < anchors.scales(); ++s) {
    const Tensor& m = head_maps[s];
    if (m.rank() != 4 || m.dim(0) != 1 || m.dim(1) != A * ch)
      throw ShapeError("head map " + shape_str(m.shape()) + " expected [1," +
                       std::to_string(A * ch) + ",h,w]");
    int h = m.dim(2), w = m.dim(3);
    int stride = anchors.strides[s];
    std::int64_t hw = static_cast<std::int64_t>(h) * w;
    auto at = [&](int a, int c, int y, int x) {
      return m.data()[(static_cast<std::int64_t>(a * ch + c)) * hw + static_cast<std::int64_t>(y) * w + x];
    };
    for (int a = 0; a < A; ++a) {
      auto [aw, ah] = anchors.whs[s][a];
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          double bx = (x + 2 * sig(at(a, 0, y, x)) - 0.5) * stride;
          double by = (y + 2 * sig(at(a, 1, y, x)) - 0.5) * stride;
          double tw = 2 * sig(at(a, 2, y, x));
          double th = 2 * sig(at(a, 3, y, x));
          double bw = aw * tw * tw;
          double bh = ah * th * th;
          double obj = sig(at(a, 4, y, x));
          int best = 0;
          double bestp = -1;
          for (int c = 0; c < classes; ++c) {
            double p = sig(at(a, 5 + c, y, x));
            if (p > bestp) {
              bestp = p;
              best = c;
            }
          }
          Detection d;
          d.image_id = image_id;
          d.class_id = best;
          d.conf = obj * bestp;
          d.x1 = bx - bw / 2;
          d.y1 = by - bh / 2;
          d.x2 = bx + bw / 2;
          d.y2 = by + bh / 2;
          out.push_back(d);
        }
    }
  }
  return out;
}

double box_iou(double ax1, double ay1, double ax2, double ay2, double bx1, double by1, double bx2,
               double by2) {
  double iw = std::max(0.0, std::min(ax2, bx2) - std::max(ax1, bx1));
  double ih = std::max(0.0, std::min(ay2, by2) - std::max(ay1, by1));
  double inter = iw * ih;
  double uni = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
  return uni <= 0 ? 0.0 : inter / uni;
}

std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh, double conf_thresh) {
  dets.erase(std::remove_if(dets.begin(), dets.end(),
                            [&](const Detection& d) { return d.conf < conf_thresh; }),
             dets.end());
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection& a, const Detection& b) { return a.conf > b.conf; });
  std::vector<Detection> keep;
  for (const Detection& d : dets) {
    bool suppressed = false;
    for (const Detection& k : keep) {
      if (k.image_id != d.image_id || k.class_id != d.class_id) continue;
      if (box_iou(k.x1, k.y1, k.x2, k.y2, d.x1, d.y1, d.x2, d.y2) >= iou_thresh) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) keep.push_back(d);
  }
  return keep;
}

AnchorSet kmeans_anchors(const std::vector<std::pair<real, real>>& whs,
                         const std::vector<int>& strides, int per_scale, std::uint64_t seed) {
  int k = per_scale * static_cast<int>(strides.size());
  if (whs.empty()) throw ConfigError("cannot fit anchors to an empty box list");
  std::mt19937_64 rng(seed);
  std::vector<std::pair<real, real>> centers;
  std::uniform_int_distribution<size_t> pick(0, whs.size() - 1);
  for (int i = 0; i < k; ++i) centers.push_back(whs[pick(rng)]);
  std::vector<int> owner(whs.size(), 0);
  for (int iter = 0; iter < 50; ++iter) {
    bool moved = false;
    for (size_t i = 0; i < whs.size(); ++i) {
      int best = 0;
      double bd = 1e300;
      for (int c = 0; c < k; ++c) {
        double dw = whs[i].first - centers[c].first;
        double dh = whs[i].second - centers[c].second;
        double d = dw * dw + dh * dh;
        if (d < bd) {
          bd = d;
          best = c;
        }
      }
      if (owner[i] != best) {
        owner[i] = best;
        moved = true;
      }
    }
    for (int c = 0; c < k; ++c) {
      double sw = 0, sh = 0;
      int n = 0;
      for (size_t i = 0; i < whs.size(); ++i)
        if (owner[i] == c) {
          sw += whs[i].first;
          sh += whs[i].second;
          ++n;
        }
      if (n) centers[c] = {static_cast<real>(sw / n), static_cast<real>(sh / n)};
    }
    if (!moved) break;
  }
  for (auto& [w, h] : centers) {
    w = std::max<real>(w, real(1));
    h = std::max<real>(h, real(1));
  }
  std::sort(centers.begin(), centers.end(), [](const auto& a, const auto& b) {
    return a.first * a.second < b.first * b.second;
  });
  AnchorSet as;
  as.strides = strides;
  for (size_t s = 0; s < strides.size(); ++s)
    as.whs.emplace_back(centers.begin() + static_cast<long>(s) * per_scale,
                        centers.begin() + static_cast<long>(s + 1) * per_scale);
  as.validate();
  return as;
}

void write_detections(const std::string& path, const std::vector<Detection>& dets) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    if (!f) throw ConfigError("cannot write " + tmp);
    for (const Detection& d : dets) {
      char buf[160];
      std::snprintf(buf, sizeof(buf), "%d %d %.6f %.2f %.2f %.2f %.2f\n", d.image_id, d.class_id,
                    d.conf, d.x1, d.y1, d.x2, d.y2);
      f << buf;
    }
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw ConfigError("cannot move detections into place at " + path);
}

std::vector<Detection> load_detections(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open " + path);
  std::vector<Detection> out;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    Detection d;
    if (!(ls >> d.image_id >> d.class_id >> d.conf >> d.x1 >> d.y1 >> d.x2 >> d.y2))
      throw ConfigError(path + ": line " + std::to_string(lineno) + ": malformed detection");
    std::string extra;
    if (ls >> extra)
      throw ConfigError(path + ": line " + std::to_string(lineno) + ": trailing tokens");
    out.push_back(d);
  }
  return out;
}

}  // namespace sod
