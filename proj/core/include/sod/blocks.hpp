#pragma once

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "sod/tensor.hpp"

namespace sod {

using NamedTensor = std::pair<std::string, Tensor>;

// Conv -> BatchNorm -> SiLU. BN and the activation can be switched off
// (plain 1x1 projections and prediction convs use bias only).
struct ConvBlock {
  int cin = 0, cout = 0, k = 1, stride = 1, pad = 0;
  bool bn = true;
  bool act = true;
  Tensor w, b, bn_g, bn_b, bn_rm, bn_rv;

  void init(std::mt19937_64& rng);
  Tensor forward(Tape* tape, const Tensor& x, bool training);
  void collect_params(const std::string& prefix, std::vector<NamedTensor>& out);
  void collect_buffers(const std::string& prefix, std::vector<NamedTensor>& out);
};

struct MultiHeadAttention {
  int dim = 0, heads = 0;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  // Row-stochastic attention of the last forward, kept when probe is set.
  Tensor last_attention;
  bool probe = false;

  void init(std::mt19937_64& rng);
  // x: [N, T, dim] -> [N, T, dim]
  Tensor forward(Tape* tape, const Tensor& x);
  void collect_params(const std::string& prefix, std::vector<NamedTensor>& out);
};

// Pre-norm transformer encoder layer, MLP ratio 2, GELU.
struct EncoderLayer {
  int dim = 0;
  MultiHeadAttention attn;
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;

  void init(std::mt19937_64& rng, int d, int heads);
  Tensor forward(Tape* tape, const Tensor& x);
  void collect_params(const std::string& prefix, std::vector<NamedTensor>& out);
};

// CLS token + learned positional embeddings + encoder stack over the
// spatial tokens of a feature map. Emits spatial tokens only; the CLS
// slot takes part in attention and is dropped at the output.
struct ViTPath {
  int cin = 0, dim = 0, heads = 0, layers = 0;
  int tokens_h = 0, tokens_w = 0;
  ConvBlock patch_proj;  // 1x1, bias only
  Tensor cls_token;      // [1, dim]
  Tensor pos_embedding;  // [tokens+1, dim]
  std::vector<EncoderLayer> encoder;

  void init(std::mt19937_64& rng);
  // feat: [N, cin, tokens_h, tokens_w] -> [N, dim, tokens_h, tokens_w]
  Tensor forward(Tape* tape, const Tensor& feat, bool training);
  void collect_params(const std::string& prefix, std::vector<NamedTensor>& out);
  void collect_buffers(const std::string& prefix, std::vector<NamedTensor>& out);
};

// Split-transform-aggregate block: halves the channels, runs one half
// through `depth` conv sub-blocks collecting every intermediate, concats
// the untouched half plus all collected branches, 1x1-projects to cout.
struct RepNcspelan4 {
  int cin = 0, cout = 0, depth = 0;
  std::vector<ConvBlock> chain;  // depth x (3x3, cin/2 -> cin/2)
  ConvBlock out_proj;            // 1x1, (depth+2)*cin/2 -> cout

  void init(std::mt19937_64& rng);
  Tensor forward(Tape* tape, const Tensor& x, bool training);
  // Aggregated trunk (before out_proj), used by the ViT variant.
  Tensor trunk(Tape* tape, const Tensor& x, bool training);
  int trunk_channels() const { return (depth + 2) * (cin / 2); }
  void collect_params(const std::string& prefix, std::vector<NamedTensor>& out);
  void collect_buffers(const std::string& prefix, std::vector<NamedTensor>& out);
};

// RepNcspelan4 with a CLS-free encoder stack on the aggregated trunk
// before the final 1x1 projection.
struct RepNcspelan4ViT {
  RepNcspelan4 base;
  int vit_layers = 0, vit_heads = 0;
  int tokens_h = 0, tokens_w = 0;
  Tensor pos_embedding;  // [tokens, trunk_channels]
  std::vector<EncoderLayer> encoder;

  void init(std::mt19937_64& rng);
  Tensor forward(Tape* tape, const Tensor& x, bool training);
  void collect_params(const std::string& prefix, std::vector<NamedTensor>& out);
  void collect_buffers(const std::string& prefix, std::vector<NamedTensor>& out);
};

// Identity plus three successive 5x5 stride-1 max-pools, concatenated and
// 1x1-projected.
struct SppPool {
  int cin = 0, cout = 0;
  ConvBlock out_proj;  // 1x1, 4*cin -> cout

  void init(std::mt19937_64& rng);
  Tensor forward(Tape* tape, const Tensor& x, bool training);
  void collect_params(const std::string& prefix, std::vector<NamedTensor>& out);
  void collect_buffers(const std::string& prefix, std::vector<NamedTensor>& out);
};

// Channel slice [c0, c1) of a 4-D tensor, differentiable.
Tensor slice_channels(Tape* tape, const Tensor& x, int c0, int c1);
// Repeats a [A, B] tensor across a leading batch axis -> [N, A, B].
Tensor broadcast_rows(Tape* tape, const Tensor& x, int n);

}  // namespace sod
