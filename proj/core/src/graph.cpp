#include "sod/graph.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace sod {

std::string kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Conv: return "conv";
    case LayerKind::Predict: return "predict";
    case LayerKind::Elan: return "elan";
    case LayerKind::ElanViT: return "elanvit";
    case LayerKind::Spp: return "spp";
    case LayerKind::ViT: return "vit";
    case LayerKind::Up: return "up";
    case LayerKind::Concat: return "concat";
  }
  return "?";
}

std::string tag_name(PathTag t) {
  switch (t) {
    case PathTag::Local: return "local";
    case PathTag::Global: return "global";
    case PathTag::Shared: return "shared";
  }
  return "?";
}

namespace {
LayerKind parse_kind(const std::string& s) {
  for (LayerKind k : {LayerKind::Conv, LayerKind::Predict, LayerKind::Elan, LayerKind::ElanViT,
                      LayerKind::Spp, LayerKind::ViT, LayerKind::Up, LayerKind::Concat})
    if (kind_name(k) == s) return k;
  throw ConfigError("unknown layer kind '" + s + "'");
}
PathTag parse_tag(const std::string& s) {
  for (PathTag t : {PathTag::Local, PathTag::Global, PathTag::Shared})
    if (tag_name(t) == s) return t;
  throw ConfigError("unknown path tag '" + s + "'");
}
}  // namespace

int scaled_channels(int base, double width_scale) {
  int c = static_cast<int>(std::ceil(base * width_scale / 4.0)) * 4;
  return std::max(8, c);
}

ResolvedGraph resolve(const GraphSpec& spec) {
  if (spec.layers.empty()) return {};
  ResolvedGraph rg;
  rg.layers.resize(spec.layers.size());
  std::map<int, size_t> index;
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& ls = spec.layers[i];
    auto where = "layer " + std::to_string(ls.id);
    if (index.count(ls.id)) throw ConfigError(where + ": duplicate id");
    ResolvedLayer& rl = rg.layers[i];
    rl.spec = ls;
    int cin = 0, in_stride = 1;
    for (size_t fi = 0; fi < ls.from.size(); ++fi) {
      int f = ls.from[fi];
      if (f == -1) {
        cin += 3;
        in_stride = 1;
        continue;
      }
      auto it = index.find(f);
      if (it == index.end())
        throw ConfigError(where + ": edge from " + std::to_string(f) +
                          " does not precede it (graph must be a DAG in declaration order)");
      const ResolvedLayer& src = rg.layers[it->second];
      if (fi == 0) {
        in_stride = src.out_stride;
      } else if (src.out_stride != in_stride) {
        throw ConfigError(where + ": concat operands at different strides");
      }
      cin += src.cout;
    }
    if (ls.from.size() != 1 && ls.kind != LayerKind::Concat)
      throw ConfigError(where + ": only concat takes multiple inputs");
    rl.cin = cin;
    rl.out_stride = in_stride;
    switch (ls.kind) {
      case LayerKind::Conv:
        rl.cout = scaled_channels(ls.cout_base, spec.width_scale);
        rl.pad = ls.k / 2;
        rl.out_stride = in_stride * ls.stride;
        break;
      case LayerKind::Predict:
        rl.cout = spec.anchors_per_scale * (5 + spec.classes);
        rl.pad = 0;
        rl.spec.k = 1;
        rl.spec.stride = 1;
        break;
      case LayerKind::Elan:
      case LayerKind::ElanViT:
        rl.cout = scaled_channels(ls.cout_base, spec.width_scale);
        if (cin % 2 != 0) throw ConfigError(where + ": split block needs even channels, got " +
                                            std::to_string(cin));
        rl.trunk_channels = (ls.depth + 2) * (cin / 2);
        if (ls.kind == LayerKind::ElanViT && ls.vit_layers > 0) {
          if (rl.trunk_channels % ls.vit_heads != 0)
            throw ConfigError(where + ": trunk width " + std::to_string(rl.trunk_channels) +
                              " not divisible by heads " + std::to_string(ls.vit_heads));
          if (spec.imgsz % rl.out_stride != 0)
            throw ConfigError(where + ": imgsz not divisible by stride");
          rl.tokens_h = rl.tokens_w = spec.imgsz / rl.out_stride;
        }
        break;
      case LayerKind::Spp:
        rl.cout = scaled_channels(ls.cout_base, spec.width_scale);
        break;
      case LayerKind::ViT:
        rl.cout = ls.vit_dim;
        if (ls.vit_dim % ls.vit_heads != 0)
          throw ConfigError(where + ": vit dim " + std::to_string(ls.vit_dim) +
                            " not divisible by heads " + std::to_string(ls.vit_heads));
        if (spec.imgsz % rl.out_stride != 0)
          throw ConfigError(where + ": imgsz not divisible by stride");
        rl.tokens_h = rl.tokens_w = spec.imgsz / rl.out_stride;
        break;
      case LayerKind::Up:
        rl.cout = cin;
        if (in_stride % 2 != 0) throw ConfigError(where + ": cannot upsample past input stride");
        rl.out_stride = in_stride / 2;
        break;
      case LayerKind::Concat:
        rl.cout = cin;
        break;
    }
    rg.total_stride = std::max(rg.total_stride, rl.out_stride);
    index[ls.id] = i;
  }
  if (spec.heads.size() != spec.strides.size())
    throw ConfigError("head list and stride list differ in length");
  for (size_t h = 0; h < spec.heads.size(); ++h) {
    auto it = index.find(spec.heads[h]);
    if (it == index.end())
      throw ConfigError("head id " + std::to_string(spec.heads[h]) + " does not exist");
    const ResolvedLayer& rl = rg.layers[it->second];
    if (rl.spec.kind != LayerKind::Predict)
      throw ConfigError("head id " + std::to_string(spec.heads[h]) + " is not a predict layer");
    if (rl.out_stride != spec.strides[h])
      throw ConfigError("head id " + std::to_string(spec.heads[h]) + " is at stride " +
                        std::to_string(rl.out_stride) + ", expected " +
                        std::to_string(spec.strides[h]));
  }
  return rg;
}

std::string emit_spec(const GraphSpec& spec) {
  std::ostringstream os;
  os << "sodspec " << spec.spec_version << "\n";
  os << "name " << spec.name << "\n";
  os << "width_scale " << spec.width_scale << "\n";
  os << "classes " << spec.classes << "\n";
  os << "imgsz " << spec.imgsz << "\n";
  os << "anchors_per_scale " << spec.anchors_per_scale << "\n";
  os << "strides";
  for (int s : spec.strides) os << ' ' << s;
  os << "\n";
  for (const LayerSpec& l : spec.layers) {
    os << "layer id=" << l.id << " kind=" << kind_name(l.kind) << " tag=" << tag_name(l.tag)
       << " from=";
    for (size_t i = 0; i < l.from.size(); ++i) os << (i ? "," : "") << l.from[i];
    switch (l.kind) {
      case LayerKind::Conv:
        os << " cout=" << l.cout_base << " k=" << l.k << " s=" << l.stride;
        if (!l.bn) os << " bn=0";
        break;
      case LayerKind::Elan:
        os << " cout=" << l.cout_base << " depth=" << l.depth;
        break;
      case LayerKind::ElanViT:
        os << " cout=" << l.cout_base << " depth=" << l.depth << " heads=" << l.vit_heads
           << " layers=" << l.vit_layers;
        break;
      case LayerKind::Spp:
        os << " cout=" << l.cout_base;
        break;
      case LayerKind::ViT:
        os << " dim=" << l.vit_dim << " heads=" << l.vit_heads << " layers=" << l.vit_layers;
        break;
      default:
        break;
    }
    os << "\n";
  }
  os << "heads";
  for (int h : spec.heads) os << ' ' << h;
  os << "\n";
  return os.str();
}

namespace {
std::map<std::string, std::string> parse_kv(std::istringstream& line, int lineno) {
  std::map<std::string, std::string> kv;
  std::string tok;
  while (line >> tok) {
    auto eq = tok.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key=value, got '" + tok + "'");
    kv[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  return kv;
}
int to_int(const std::string& s, int lineno) {
  try {
    size_t pos = 0;
    int v = std::stoi(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (...) {
    throw ConfigError("line " + std::to_string(lineno) + ": bad integer '" + s + "'");
  }
}
}  // namespace

GraphSpec parse_spec(const std::string& text) {
  GraphSpec spec;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  bool saw_magic = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (!saw_magic) {
      if (key != "sodspec") throw ConfigError("not a model spec file (missing sodspec header)");
      ls >> spec.spec_version;
      if (spec.spec_version != 1)
        throw ConfigError("unsupported spec_version " + std::to_string(spec.spec_version));
      saw_magic = true;
      continue;
    }
    if (key == "name") {
      ls >> spec.name;
    } else if (key == "width_scale") {
      ls >> spec.width_scale;
    } else if (key == "classes") {
      ls >> spec.classes;
    } else if (key == "imgsz") {
      ls >> spec.imgsz;
    } else if (key == "anchors_per_scale") {
      ls >> spec.anchors_per_scale;
    } else if (key == "strides") {
      int v;
      while (ls >> v) spec.strides.push_back(v);
    } else if (key == "heads") {
      int v;
      while (ls >> v) spec.heads.push_back(v);
    } else if (key == "layer") {
      auto kv = parse_kv(ls, lineno);
      LayerSpec l;
      auto need = [&](const char* k) {
        auto it = kv.find(k);
        if (it == kv.end())
          throw ConfigError("line " + std::to_string(lineno) + ": missing " + std::string(k));
        return it->second;
      };
      l.id = to_int(need("id"), lineno);
      l.kind = parse_kind(need("kind"));
      l.tag = parse_tag(need("tag"));
      l.from.clear();
      {
        std::istringstream fs(need("from"));
        std::string part;
        while (std::getline(fs, part, ',')) l.from.push_back(to_int(part, lineno));
      }
      auto opt = [&](const char* k, int dflt) {
        auto it = kv.find(k);
        return it == kv.end() ? dflt : to_int(it->second, lineno);
      };
      l.cout_base = opt("cout", 0);
      l.k = opt("k", 3);
      l.stride = opt("s", 1);
      l.bn = opt("bn", 1) != 0;
      l.depth = opt("depth", 0);
      l.vit_dim = opt("dim", 0);
      l.vit_heads = opt("heads", 0);
      l.vit_layers = opt("layers", 0);
      spec.layers.push_back(l);
    } else {
      throw ConfigError("line " + std::to_string(lineno) + ": unknown directive '" + key + "'");
    }
  }
  if (!saw_magic) throw ConfigError("empty model spec");
  resolve(spec);  // validate eagerly
  return spec;
}

GraphSpec load_spec_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open spec file " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_spec(ss.str());
}

bool operator==(const LayerSpec& a, const LayerSpec& b) {
  return a.id == b.id && a.kind == b.kind && a.tag == b.tag && a.from == b.from &&
         a.cout_base == b.cout_base && a.k == b.k && a.stride == b.stride && a.bn == b.bn &&
         a.depth == b.depth &&
         a.vit_dim == b.vit_dim && a.vit_heads == b.vit_heads && a.vit_layers == b.vit_layers;
}

bool operator==(const GraphSpec& a, const GraphSpec& b) {
  return a.spec_version == b.spec_version && a.name == b.name && a.width_scale == b.width_scale &&
         a.classes == b.classes && a.imgsz == b.imgsz &&
         a.anchors_per_scale == b.anchors_per_scale && a.strides == b.strides &&
         a.layers == b.layers && a.heads == b.heads;
}

}  // namespace sod
