#include "sod/blocks.hpp"

#include <cmath>

namespace sod {

namespace {

Tensor he_normal(std::mt19937_64& rng, Shape shape, int fan_in) {
  Tensor t(shape, true);
  std::normal_distribution<double> d(0.0, std::sqrt(2.0 / fan_in));
  for (auto& v : t.data()) v = static_cast<real>(d(rng));
  return t;
}

Tensor normal_std(std::mt19937_64& rng, Shape shape, double std) {
  Tensor t(shape, true);
  std::normal_distribution<double> d(0.0, std);
  for (auto& v : t.data()) v = static_cast<real>(d(rng));
  return t;
}

Tensor param_zeros(Shape s) { return Tensor::zeros(std::move(s), true); }
Tensor param_ones(Shape s) { return Tensor::full(std::move(s), 1.0, true); }

}  // namespace

Tensor slice_channels(Tape* tape, const Tensor& x, int c0, int c1) {
  if (x.rank() != 4 || c0 < 0 || c1 > x.dim(1) || c0 >= c1)
    throw ShapeError("slice_channels [" + std::to_string(c0) + "," + std::to_string(c1) + ") of " +
                     shape_str(x.shape()));
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  std::int64_t hw = static_cast<std::int64_t>(H) * W;
  std::vector<std::int64_t> idx;
  idx.reserve(static_cast<size_t>(N) * (c1 - c0) * hw);
  for (int n = 0; n < N; ++n)
    for (int c = c0; c < c1; ++c)
      for (std::int64_t p = 0; p < hw; ++p)
        idx.push_back((static_cast<std::int64_t>(n) * C + c) * hw + p);
  return gather(tape, x, idx, {N, c1 - c0, H, W});
}

Tensor broadcast_rows(Tape* tape, const Tensor& x, int n) {
  if (x.rank() != 2) throw ShapeError("broadcast_rows needs a 2-D tensor");
  std::vector<std::int64_t> idx;
  idx.reserve(static_cast<size_t>(n) * x.numel());
  for (int i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < x.numel(); ++j) idx.push_back(j);
  return gather(tape, x, idx, {n, x.dim(0), x.dim(1)});
}

// ---- ConvBlock ----

void ConvBlock::init(std::mt19937_64& rng) {
  w = he_normal(rng, {cout, cin, k, k}, cin * k * k);
  b = param_zeros({cout});
  if (bn) {
    bn_g = param_ones({cout});
    bn_b = param_zeros({cout});
    bn_rm = Tensor::zeros({cout});
    bn_rv = Tensor::full({cout}, 1.0);
  }
}

Tensor ConvBlock::forward(Tape* tape, const Tensor& x, bool training) {
  Tensor y = conv2d(tape, x, w, b, stride, pad);
  if (bn) y = batch_norm2d(tape, y, bn_g, bn_b, bn_rm, bn_rv, 0.03, 1e-3, training);
  if (act) y = silu(tape, y);
  return y;
}

void ConvBlock::collect_params(const std::string& prefix, std::vector<NamedTensor>& out) {
  out.emplace_back(prefix + ".w", w);
  out.emplace_back(prefix + ".b", b);
  if (bn) {
    out.emplace_back(prefix + ".bn_g", bn_g);
    out.emplace_back(prefix + ".bn_b", bn_b);
  }
}

void ConvBlock::collect_buffers(const std::string& prefix, std::vector<NamedTensor>& out) {
  if (bn) {
    out.emplace_back(prefix + ".bn_rm", bn_rm);
    out.emplace_back(prefix + ".bn_rv", bn_rv);
  }
}

// ---- MultiHeadAttention ----

void MultiHeadAttention::init(std::mt19937_64& rng) {
  if (dim % heads != 0)
    throw ConfigError("attention dim " + std::to_string(dim) + " not divisible by heads " +
                      std::to_string(heads));
  wq = he_normal(rng, {dim, dim}, dim);
  wk = he_normal(rng, {dim, dim}, dim);
  wv = he_normal(rng, {dim, dim}, dim);
  // small output projection keeps a fresh encoder layer near identity,
  // which the residual stream needs to train at CNN-scale learning rates
  wo = normal_std(rng, {dim, dim}, 0.02);
  bq = param_zeros({dim});
  bk = param_zeros({dim});
  bv = param_zeros({dim});
  bo = param_zeros({dim});
}

Tensor MultiHeadAttention::forward(Tape* tape, const Tensor& x) {
  if (x.rank() != 3 || x.dim(2) != dim)
    throw ShapeError("attention input " + shape_str(x.shape()) + " expected [N,T," +
                     std::to_string(dim) + "]");
  int N = x.dim(0), T = x.dim(1), dh = dim / heads;
  auto split_heads = [&](const Tensor& t) {
    // [N,T,dim] -> [N*heads, T, dh]
    Tensor r = reshape(tape, t, {N, T, heads, dh});
    Tensor p = permute(tape, r, {0, 2, 1, 3});
    return reshape(tape, p, {N * heads, T, dh});
  };
  Tensor q = split_heads(linear(tape, x, wq, bq));
  Tensor kk = split_heads(linear(tape, x, wk, bk));
  Tensor v = split_heads(linear(tape, x, wv, bv));
  Tensor kt = permute(tape, kk, {0, 2, 1});
  Tensor scores = mul_scalar(tape, bmm(tape, q, kt), real(1) / std::sqrt(static_cast<real>(dh)));
  Tensor attn = softmax_last(tape, scores);  // [N*heads, T, T]
  if (probe) last_attention = attn;
  Tensor ctx = bmm(tape, attn, v);  // [N*heads, T, dh]
  Tensor merged = reshape(tape, permute(tape, reshape(tape, ctx, {N, heads, T, dh}), {0, 2, 1, 3}),
                          {N, T, dim});
  return linear(tape, merged, wo, bo);
}

void MultiHeadAttention::collect_params(const std::string& prefix, std::vector<NamedTensor>& out) {
  out.emplace_back(prefix + ".wq", wq);
  out.emplace_back(prefix + ".bq", bq);
  out.emplace_back(prefix + ".wk", wk);
  out.emplace_back(prefix + ".bk", bk);
  out.emplace_back(prefix + ".wv", wv);
  out.emplace_back(prefix + ".bv", bv);
  out.emplace_back(prefix + ".wo", wo);
  out.emplace_back(prefix + ".bo", bo);
}

// ---- EncoderLayer ----

void EncoderLayer::init(std::mt19937_64& rng, int d, int h) {
  dim = d;
  attn.dim = d;
  attn.heads = h;
  attn.init(rng);
  ln1_g = param_ones({d});
  ln1_b = param_zeros({d});
  ln2_g = param_ones({d});
  ln2_b = param_zeros({d});
  int hidden = 2 * d;
  mlp_w1 = he_normal(rng, {d, hidden}, d);
  mlp_b1 = param_zeros({hidden});
  mlp_w2 = normal_std(rng, {hidden, d}, 0.02);  // near-identity, as for wo
  mlp_b2 = param_zeros({d});
}

Tensor EncoderLayer::forward(Tape* tape, const Tensor& x) {
  Tensor h = add(tape, x, attn.forward(tape, layer_norm(tape, x, ln1_g, ln1_b, 1e-5)));
  Tensor m = layer_norm(tape, h, ln2_g, ln2_b, 1e-5);
  m = linear(tape, gelu(tape, linear(tape, m, mlp_w1, mlp_b1)), mlp_w2, mlp_b2);
  return add(tape, h, m);
}

void EncoderLayer::collect_params(const std::string& prefix, std::vector<NamedTensor>& out) {
  out.emplace_back(prefix + ".ln1_g", ln1_g);
  out.emplace_back(prefix + ".ln1_b", ln1_b);
  attn.collect_params(prefix + ".attn", out);
  out.emplace_back(prefix + ".ln2_g", ln2_g);
  out.emplace_back(prefix + ".ln2_b", ln2_b);
  out.emplace_back(prefix + ".mlp_w1", mlp_w1);
  out.emplace_back(prefix + ".mlp_b1", mlp_b1);
  out.emplace_back(prefix + ".mlp_w2", mlp_w2);
  out.emplace_back(prefix + ".mlp_b2", mlp_b2);
}

// ---- ViTPath ----

void ViTPath::init(std::mt19937_64& rng) {
  patch_proj = ConvBlock{cin, dim, 1, 1, 0, /*bn=*/false, /*act=*/false, {}, {}, {}, {}, {}, {}};
  patch_proj.init(rng);
  cls_token = normal_std(rng, {1, dim}, 0.02);
  pos_embedding = normal_std(rng, {tokens_h * tokens_w + 1, dim}, 0.02);
  encoder.resize(static_cast<size_t>(layers));
  for (auto& e : encoder) e.init(rng, dim, heads);
}

Tensor ViTPath::forward(Tape* tape, const Tensor& feat, bool training) {
  if (feat.rank() != 4 || feat.dim(1) != cin)
    throw ShapeError("vit_path input " + shape_str(feat.shape()));
  int N = feat.dim(0), h = feat.dim(2), w = feat.dim(3);
  if (h != tokens_h || w != tokens_w)
    throw ConfigError("vit_path token grid " + std::to_string(h) + "x" + std::to_string(w) +
                      " does not match positional embedding grid " + std::to_string(tokens_h) + "x" +
                      std::to_string(tokens_w));
  int T = h * w;
  Tensor proj = patch_proj.forward(tape, feat, training);              // [N,dim,h,w]
  Tensor tok = permute(tape, proj, {0, 2, 3, 1});                      // [N,h,w,dim]
  tok = reshape(tape, tok, {N, T, dim});
  // prepend CLS via a 4-D channel concat on the token axis
  Tensor cls = reshape(tape, broadcast_rows(tape, cls_token, N), {N, 1, dim, 1});
  Tensor seq = concat_channels(tape, {cls, reshape(tape, tok, {N, T, dim, 1})});
  seq = reshape(tape, seq, {N, T + 1, dim});
  seq = add(tape, seq, broadcast_rows(tape, pos_embedding, N));
  for (auto& e : encoder) seq = e.forward(tape, seq);
  // drop CLS, restore the spatial layout
  Tensor spatial = slice_channels(tape, reshape(tape, seq, {N, T + 1, dim, 1}), 1, T + 1);
  spatial = reshape(tape, spatial, {N, h, w, dim});
  return permute(tape, spatial, {0, 3, 1, 2});
}

void ViTPath::collect_params(const std::string& prefix, std::vector<NamedTensor>& out) {
  patch_proj.collect_params(prefix + ".patch", out);
  out.emplace_back(prefix + ".cls", cls_token);
  out.emplace_back(prefix + ".pos", pos_embedding);
  for (size_t i = 0; i < encoder.size(); ++i)
    encoder[i].collect_params(prefix + ".enc" + std::to_string(i), out);
}

void ViTPath::collect_buffers(const std::string& prefix, std::vector<NamedTensor>& out) {
  patch_proj.collect_buffers(prefix + ".patch", out);
}

// ---- RepNcspelan4 ----

void RepNcspelan4::init(std::mt19937_64& rng) {
  if (cin % 2 != 0)
    throw ConfigError("rep_ncspelan4 needs even input channels, got " + std::to_string(cin));
  int half = cin / 2;
  chain.resize(static_cast<size_t>(depth));
  for (auto& c : chain) {
    c = ConvBlock{half, half, 3, 1, 1, true, true, {}, {}, {}, {}, {}, {}};
    c.init(rng);
  }
  out_proj = ConvBlock{trunk_channels(), cout, 1, 1, 0, true, true, {}, {}, {}, {}, {}, {}};
  out_proj.init(rng);
}

Tensor RepNcspelan4::trunk(Tape* tape, const Tensor& x, bool training) {
  if (x.dim(1) != cin)
    throw ConfigError("rep_ncspelan4 expects " + std::to_string(cin) + " channels, got " +
                      shape_str(x.shape()));
  int half = cin / 2;
  Tensor a = slice_channels(tape, x, 0, half);
  Tensor b = slice_channels(tape, x, half, cin);
  std::vector<Tensor> branches{a, b};
  Tensor cur = b;
  for (auto& c : chain) {
    cur = c.forward(tape, cur, training);
    branches.push_back(cur);
  }
  return concat_channels(tape, branches);
}

Tensor RepNcspelan4::forward(Tape* tape, const Tensor& x, bool training) {
  return out_proj.forward(tape, trunk(tape, x, training), training);
}

void RepNcspelan4::collect_params(const std::string& prefix, std::vector<NamedTensor>& out) {
  for (size_t i = 0; i < chain.size(); ++i)
    chain[i].collect_params(prefix + ".c" + std::to_string(i), out);
  out_proj.collect_params(prefix + ".proj", out);
}

void RepNcspelan4::collect_buffers(const std::string& prefix, std::vector<NamedTensor>& out) {
  for (size_t i = 0; i < chain.size(); ++i)
    chain[i].collect_buffers(prefix + ".c" + std::to_string(i), out);
  out_proj.collect_buffers(prefix + ".proj", out);
}

// ---- RepNcspelan4ViT ----

void RepNcspelan4ViT::init(std::mt19937_64& rng) {
  base.init(rng);
  int d = base.trunk_channels();
  pos_embedding = normal_std(rng, {tokens_h * tokens_w, d}, 0.02);
  encoder.resize(static_cast<size_t>(vit_layers));
  for (auto& e : encoder) e.init(rng, d, vit_heads);
}

Tensor RepNcspelan4ViT::forward(Tape* tape, const Tensor& x, bool training) {
  Tensor tr = base.trunk(tape, x, training);  // [N, d, H, W]
  int N = tr.dim(0), d = tr.dim(1), h = tr.dim(2), w = tr.dim(3);
  if (!encoder.empty()) {
    if (h != tokens_h || w != tokens_w)
      throw ConfigError("rep_ncspelan4_vit token grid " + std::to_string(h) + "x" +
                        std::to_string(w) + " does not match positional embedding grid " +
                        std::to_string(tokens_h) + "x" + std::to_string(tokens_w));
    int T = h * w;
    Tensor tok = reshape(tape, permute(tape, tr, {0, 2, 3, 1}), {N, T, d});
    tok = add(tape, tok, broadcast_rows(tape, pos_embedding, N));
    for (auto& e : encoder) tok = e.forward(tape, tok);
    tr = permute(tape, reshape(tape, tok, {N, h, w, d}), {0, 3, 1, 2});
  }
  return base.out_proj.forward(tape, tr, training);
}

void RepNcspelan4ViT::collect_params(const std::string& prefix, std::vector<NamedTensor>& out) {
  for (size_t i = 0; i < base.chain.size(); ++i)
    base.chain[i].collect_params(prefix + ".c" + std::to_string(i), out);
  if (!encoder.empty()) {
    out.emplace_back(prefix + ".pos", pos_embedding);
    for (size_t i = 0; i < encoder.size(); ++i)
      encoder[i].collect_params(prefix + ".enc" + std::to_string(i), out);
  }
  base.out_proj.collect_params(prefix + ".proj", out);
}

void RepNcspelan4ViT::collect_buffers(const std::string& prefix, std::vector<NamedTensor>& out) {
  base.collect_buffers(prefix, out);
}

// ---- SppPool ----

void SppPool::init(std::mt19937_64& rng) {
  out_proj = ConvBlock{4 * cin, cout, 1, 1, 0, true, true, {}, {}, {}, {}, {}, {}};
  out_proj.init(rng);
}

Tensor SppPool::forward(Tape* tape, const Tensor& x, bool training) {
  if (x.dim(2) < 5 || x.dim(3) < 5)
    throw ConfigError("spp_pool needs spatial extent >= 5, got " + shape_str(x.shape()));
  Tensor p1 = max_pool2d(tape, x, 5, 1, 2);
  Tensor p2 = max_pool2d(tape, p1, 5, 1, 2);
  Tensor p3 = max_pool2d(tape, p2, 5, 1, 2);
  return out_proj.forward(tape, concat_channels(tape, {x, p1, p2, p3}), training);
}

void SppPool::collect_params(const std::string& prefix, std::vector<NamedTensor>& out) {
  out_proj.collect_params(prefix + ".proj", out);
}

void SppPool::collect_buffers(const std::string& prefix, std::vector<NamedTensor>& out) {
  out_proj.collect_buffers(prefix + ".proj", out);
}

}  // namespace sod
