#include "sod/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace sod {

namespace fs = std::filesystem;

void AugConfig::validate() const {
  if (hsv_s < 0 || hsv_v < 0 || scale < 0 || mixup < 0)
    throw ConfigError("augmentation gains must be non-negative");
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + (index + 1) * 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

void write_ppm(const std::string& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw ShapeError("ppm wants [3,H,W], got " + shape_str(image.shape()));
  int H = image.dim(1), W = image.dim(2);
  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw ConfigError("cannot write " + tmp);
    f << "P6\n" << W << " " << H << "\n255\n";
    std::int64_t hw = static_cast<std::int64_t>(H) * W;
    std::vector<unsigned char> row(static_cast<size_t>(W) * 3);
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x)
        for (int c = 0; c < 3; ++c) {
          real v = image.data()[static_cast<size_t>(c * hw + y * W + x)];
          v = std::min<real>(1, std::max<real>(0, v));
          row[static_cast<size_t>(x) * 3 + c] =
              static_cast<unsigned char>(std::lround(v * 255.0));
        }
      f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw ConfigError("cannot move image into place at " + path);
}

Tensor load_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open " + path);
  std::string magic;
  int W = 0, H = 0, maxv = 0;
  f >> magic >> W >> H >> maxv;
  if (magic != "P6" || W <= 0 || H <= 0 || maxv != 255)
    throw ConfigError(path + " is not an 8-bit P6 ppm");
  f.get();  // single whitespace after header
  std::vector<unsigned char> raw(static_cast<size_t>(W) * H * 3);
  if (!f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
    throw ConfigError(path + ": truncated pixel data");
  Tensor img({3, H, W});
  std::int64_t hw = static_cast<std::int64_t>(H) * W;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c)
        img.data()[static_cast<size_t>(c * hw + y * W + x)] =
            static_cast<real>(raw[(static_cast<size_t>(y) * W + x) * 3 + c]) / real(255);
  return img;
}

void write_labels(const std::string& path, const std::vector<Label>& labels) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    if (!f) throw ConfigError("cannot write " + tmp);
    for (const Label& l : labels) {
      char buf[128];
      std::snprintf(buf, sizeof(buf), "%d %.6f %.6f %.6f %.6f\n", l.class_id,
                    static_cast<double>(l.cx), static_cast<double>(l.cy),
                    static_cast<double>(l.w), static_cast<double>(l.h));
      f << buf;
    }
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw ConfigError("cannot move labels into place at " + path);
}

std::vector<Label> load_labels(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open " + path);
  std::vector<Label> out;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    Label l;
    double cx, cy, w, h;
    if (!(ls >> l.class_id >> cx >> cy >> w >> h))
      throw ConfigError(path + ": line " + std::to_string(lineno) + ": malformed label");
    std::string extra;
    if (ls >> extra)
      throw ConfigError(path + ": line " + std::to_string(lineno) + ": trailing tokens");
    if (l.class_id < 0)
      throw ConfigError(path + ": line " + std::to_string(lineno) + ": negative class id");
    const double tol = 1e-6;
    if (w <= 0 || h <= 0 || cx - w / 2 < -tol || cy - h / 2 < -tol || cx + w / 2 > 1 + tol ||
        cy + h / 2 > 1 + tol)
      throw ConfigError(path + ": line " + std::to_string(lineno) + ": box out of range");
    l.cx = static_cast<real>(cx);
    l.cy = static_cast<real>(cy);
    l.w = static_cast<real>(w);
    l.h = static_cast<real>(h);
    out.push_back(l);
  }
  return out;
}

void write_manifest(const std::string& path, const DatasetManifest& m) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    if (!f) throw ConfigError("cannot write " + tmp);
    f << "sodset " << m.version << "\n";
    f << "seed " << m.seed << "\n";
    f << "imgsz " << m.imgsz << "\n";
    f << "count " << m.count << "\n";
    f << "classes";
    for (auto& c : m.class_names) f << ' ' << c;
    f << "\nstrides";
    for (int s : m.anchor_strides) f << ' ' << s;
    f << "\nanchors";
    for (real v : m.anchors_flat) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), " %.6f", static_cast<double>(v));
      f << buf;
    }
    f << "\n";
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw ConfigError("cannot move manifest into place at " + path);
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open " + path);
  DatasetManifest m;
  std::string line;
  bool saw_magic = false;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (!saw_magic) {
      if (key != "sodset") throw ConfigError(path + " is not a dataset manifest");
      ls >> m.version;
      if (m.version != 1)
        throw ConfigError("unsupported manifest version " + std::to_string(m.version));
      saw_magic = true;
      continue;
    }
    if (key == "seed") ls >> m.seed;
    else if (key == "imgsz") ls >> m.imgsz;
    else if (key == "count") ls >> m.count;
    else if (key == "classes") {
      std::string c;
      while (ls >> c) m.class_names.push_back(c);
    } else if (key == "strides") {
      int v;
      while (ls >> v) m.anchor_strides.push_back(v);
    } else if (key == "anchors") {
      double v;
      while (ls >> v) m.anchors_flat.push_back(static_cast<real>(v));
    } else {
      throw ConfigError(path + ": line " + std::to_string(lineno) + ": unknown directive '" + key +
                        "'");
    }
  }
  if (!saw_magic) throw ConfigError(path + " is empty");
  if (m.imgsz <= 0 || m.count <= 0 || m.class_names.empty())
    throw ConfigError(path + ": incomplete manifest");
  return m;
}

std::string image_path(const std::string& dir, int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06d.ppm", index);
  return dir + "/images/" + buf;
}

std::string label_path(const std::string& dir, int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06d.txt", index);
  return dir + "/labels/" + buf;
}

Sample load_sample(const std::string& dir, int index) {
  Sample s;
  s.image = load_ppm(image_path(dir, index));
  s.labels = load_labels(label_path(dir, index));
  return s;
}

namespace {

struct Box {
  int x1, y1, x2, y2;  // pixel bounds, half-open
};

void draw_object(Tensor& img, const Box& b, int cls) {
  int H = img.dim(1), W = img.dim(2);
  std::int64_t hw = static_cast<std::int64_t>(H) * W;
  auto put = [&](int x, int y, real r, real g, real bl) {
    img.data()[static_cast<size_t>(0 * hw + y * W + x)] = r;
    img.data()[static_cast<size_t>(1 * hw + y * W + x)] = g;
    img.data()[static_cast<size_t>(2 * hw + y * W + x)] = bl;
  };
  int w = b.x2 - b.x1, h = b.y2 - b.y1;
  double cx = b.x1 + w / 2.0, cy = b.y1 + h / 2.0;
  for (int y = b.y1; y < b.y2; ++y)
    for (int x = b.x1; x < b.x2; ++x) {
      double nx = (x + 0.5 - cx) / (w / 2.0);  // [-1,1] across the box
      double ny = (y + 0.5 - cy) / (h / 2.0);
      switch (cls % 3) {
        case 0:  // solar-panel rig: two wings plus a vertical body
          if (std::abs(ny) < 0.3)
            put(x, y, 0.20, 0.35, 0.85);  // wings span the full width
          else if (std::abs(nx) < 0.22)
            put(x, y, 0.72, 0.72, 0.78);  // body spans the full height
          break;
        case 1:  // disc body filling the box
          if (nx * nx + ny * ny <= 1.0) put(x, y, 0.92, 0.78, 0.42);
          break;
        default: {  // crescent: disc minus an offset disc
          double ix = (nx - 0.55) / 0.85, iy = ny / 0.85;
          if (nx * nx + ny * ny <= 1.0 && ix * ix + iy * iy > 1.0) put(x, y, 0.88, 0.88, 0.95);
          break;
        }
      }
    }
}

}  // namespace

DatasetManifest gen_dataset(int n, int classes, int imgsz, std::uint64_t seed,
                            const std::string& out_dir, const std::vector<int>& strides) {
  if (n < 1) throw ConfigError("dataset size must be >= 1");
  if (classes < 1 || classes > 3) throw ConfigError("generator supports 1-3 classes");
  if (imgsz < 32) throw ConfigError("imgsz must be >= 32");
  std::error_code ec;
  fs::create_directories(out_dir + "/images", ec);
  fs::create_directories(out_dir + "/labels", ec);
  if (!fs::is_directory(out_dir + "/images") || !fs::is_directory(out_dir + "/labels"))
    throw ConfigError("cannot create dataset directories under " + out_dir);

  std::vector<std::pair<real, real>> all_whs;
  for (int i = 0; i < n; ++i) {
    std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
    std::uniform_real_distribution<double> u01(0, 1);
    Tensor img({3, imgsz, imgsz});
    // starfield background
    std::normal_distribution<double> noise(0.0, 0.012);
    for (auto& v : img.data())
      v = static_cast<real>(std::min(1.0, std::max(0.0, 0.035 + noise(rng))));
    int stars = imgsz * imgsz / 96;
    std::int64_t hw = static_cast<std::int64_t>(imgsz) * imgsz;
    for (int s = 0; s < stars; ++s) {
      int x = static_cast<int>(rng() % static_cast<std::uint64_t>(imgsz));
      int y = static_cast<int>(rng() % static_cast<std::uint64_t>(imgsz));
      real b = static_cast<real>(0.3 + 0.7 * u01(rng));
      for (int c = 0; c < 3; ++c) img.data()[static_cast<size_t>(c * hw + y * imgsz + x)] = b;
    }
    // objects
    int n_obj = 1 + static_cast<int>(rng() % 4);
    std::vector<Box> placed;
    std::vector<Label> labels;
    for (int o = 0; o < n_obj; ++o) {
      int cls = static_cast<int>(rng() % static_cast<std::uint64_t>(classes));
      bool ok = false;
      for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
        int lo = std::max(6, imgsz / 8), hi = std::max(lo + 1, imgsz / 3);
        int w = lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo));
        int h = lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo));
        int x1 = 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(imgsz - w - 2));
        int y1 = 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(imgsz - h - 2));
        Box b{x1, y1, x1 + w, y1 + h};
        bool clash = false;
        for (const Box& p : placed)
          if (box_iou(b.x1, b.y1, b.x2, b.y2, p.x1, p.y1, p.x2, p.y2) > 0.05) clash = true;
        if (clash) continue;
        draw_object(img, b, cls);
        placed.push_back(b);
        Label l;
        l.class_id = cls;
        l.cx = static_cast<real>((b.x1 + b.x2) / 2.0 / imgsz);
        l.cy = static_cast<real>((b.y1 + b.y2) / 2.0 / imgsz);
        l.w = static_cast<real>(static_cast<double>(w) / imgsz);
        l.h = static_cast<real>(static_cast<double>(h) / imgsz);
        labels.push_back(l);
        all_whs.emplace_back(static_cast<real>(w), static_cast<real>(h));
        ok = true;
      }
      if (!ok)
        throw ConfigError("image " + std::to_string(i) + ": could not place object " +
                          std::to_string(o) + " after 100 attempts");
    }
    write_ppm(image_path(out_dir, i), img);
    write_labels(label_path(out_dir, i), labels);
  }

  DatasetManifest m;
  m.seed = seed;
  m.imgsz = imgsz;
  m.count = n;
  const char* names[] = {"panel", "disc", "crescent"};
  for (int c = 0; c < classes; ++c) m.class_names.push_back(names[c]);
  m.anchor_strides = strides;
  m.anchors_flat = kmeans_anchors(all_whs, strides, 3, seed).flatten();
  write_manifest(out_dir + "/manifest.txt", m);
  return m;
}

void rgb_to_hsv(real r, real g, real b, real& h, real& s, real& v) {
  real mx = std::max({r, g, b}), mn = std::min({r, g, b});
  v = mx;
  real d = mx - mn;
  s = mx == 0 ? real(0) : d / mx;
  if (d == 0) {
    h = 0;
  } else if (mx == r) {
    h = real(60) * std::fmod((g - b) / d + 6, real(6));
  } else if (mx == g) {
    h = real(60) * ((b - r) / d + 2);
  } else {
    h = real(60) * ((r - g) / d + 4);
  }
}

void hsv_to_rgb(real h, real s, real v, real& r, real& g, real& b) {
  real c = v * s;
  real hp = h / 60;
  real x = c * (1 - std::abs(std::fmod(hp, real(2)) - 1));
  real r1 = 0, g1 = 0, b1 = 0;
  if (hp < 1) { r1 = c; g1 = x; }
  else if (hp < 2) { r1 = x; g1 = c; }
  else if (hp < 3) { g1 = c; b1 = x; }
  else if (hp < 4) { g1 = x; b1 = c; }
  else if (hp < 5) { r1 = x; b1 = c; }
  else { r1 = c; b1 = x; }
  real m = v - c;
  r = r1 + m;
  g = g1 + m;
  b = b1 + m;
}

Sample augment(const Sample& in, const AugConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  std::uniform_real_distribution<double> u(-1, 1);
  real fs = 1 + static_cast<real>(u(rng)) * cfg.hsv_s;
  real fv = 1 + static_cast<real>(u(rng)) * cfg.hsv_v;
  real f = 1 + static_cast<real>(u(rng)) * cfg.scale;
  fs = std::max<real>(fs, 0);
  fv = std::max<real>(fv, 0);
  f = std::max<real>(f, real(0.05));

  Sample out;
  int H = in.image.dim(1), W = in.image.dim(2);
  std::int64_t hw = static_cast<std::int64_t>(H) * W;
  out.image = Tensor({3, H, W});
  bool hsv_on = cfg.hsv_s > 0 || cfg.hsv_v > 0;
  bool scale_on = cfg.scale > 0;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      int sx = x, sy = y;
      if (scale_on) {
        sx = static_cast<int>(x / f);
        sy = static_cast<int>(y / f);
      }
      real r = 0, g = 0, b = 0;
      if (sx >= 0 && sx < W && sy >= 0 && sy < H) {
        r = in.image.data()[static_cast<size_t>(0 * hw + sy * W + sx)];
        g = in.image.data()[static_cast<size_t>(1 * hw + sy * W + sx)];
        b = in.image.data()[static_cast<size_t>(2 * hw + sy * W + sx)];
        if (hsv_on) {
          real hh, ss, vv;
          rgb_to_hsv(r, g, b, hh, ss, vv);
          ss = std::min<real>(1, std::max<real>(0, ss * fs));
          vv = std::min<real>(1, std::max<real>(0, vv * fv));
          hsv_to_rgb(hh, ss, vv, r, g, b);
          r = std::min<real>(1, std::max<real>(0, r));
          g = std::min<real>(1, std::max<real>(0, g));
          b = std::min<real>(1, std::max<real>(0, b));
        }
      }
      out.image.data()[static_cast<size_t>(0 * hw + y * W + x)] = r;
      out.image.data()[static_cast<size_t>(1 * hw + y * W + x)] = g;
      out.image.data()[static_cast<size_t>(2 * hw + y * W + x)] = b;
    }
  if (!scale_on) {
    out.labels = in.labels;
    return out;
  }
  for (const Label& l : in.labels) {
    real x1 = (l.cx - l.w / 2) * f, x2 = (l.cx + l.w / 2) * f;
    real y1 = (l.cy - l.h / 2) * f, y2 = (l.cy + l.h / 2) * f;
    real cx1 = std::max<real>(0, x1), cx2 = std::min<real>(1, x2);
    real cy1 = std::max<real>(0, y1), cy2 = std::min<real>(1, y2);
    if (cx2 <= cx1 || cy2 <= cy1) continue;
    real area = (x2 - x1) * (y2 - y1);
    real clipped = (cx2 - cx1) * (cy2 - cy1);
    if (clipped < real(0.1) * area) continue;
    Label nl = l;
    nl.cx = (cx1 + cx2) / 2;
    nl.cy = (cy1 + cy2) / 2;
    nl.w = cx2 - cx1;
    nl.h = cy2 - cy1;
    out.labels.push_back(nl);
  }
  return out;
}

}  // namespace sod
