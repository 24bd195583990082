#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "segkit/image_io.hpp"
#include "segkit/nn.hpp"

namespace segkit {

struct ViTConfig {
  int patch_size = 16;
  std::int64_t embed_dim = 768;
  int depth = 12;
  int heads = 12;
  double mlp_ratio = 4.0;
  int image_size = 224;
  /// Stochastic depth rate at the last block, linearly scaled from 0 at the first.
  double drop_path = 0.0;

  int grid() const { return image_size / patch_size; }
  std::int64_t mlp_dim() const { return static_cast<std::int64_t>(static_cast<double>(embed_dim) * mlp_ratio); }
  void validate() const;

  /// D=64, L=4, H=4 with 4-pixel patches at 64x64.
  static ViTConfig toy();
  /// ViT-B/16 at 224x224.
  static ViTConfig base();
  /// ViT-L/16 at 224x224: D=1024, L=24, H=16.
  static ViTConfig large();
};

/// Per-patch embeddings on a (grid_h x grid_w) grid, optionally flagged as masked.
struct PatchSequence {
  Var tokens;  // [N, D]
  std::int64_t grid_h = 0;
  std::int64_t grid_w = 0;
  std::vector<std::uint8_t> mask;  // empty, or one flag per patch

  std::int64_t size() const { return grid_h * grid_w; }
};

/// Flattens non-overlapping p x p x 3 patches in (row, col, channel) order to [N, p*p*3].
Tensor patchify(const Tensor& image, int patch_size);

struct AttentionWeights {
  Linear qkv;   // D -> 3D
  Linear proj;  // D -> D
};

struct MlpWeights {
  Linear fc1;
  Linear fc2;
};

struct BlockWeights {
  LayerNorm norm1;
  AttentionWeights attn;
  LayerNorm norm2;
  MlpWeights mlp;
};

/// Multi-head self-attention: softmax(Q K^T / sqrt(d)) V per head, heads
/// concatenated and passed through the output projection.
Var multi_head_attention(const Var& x, const AttentionWeights& w, int heads);
Var mlp_forward(const Var& x, const MlpWeights& w);
/// Pre-norm block: x + attn(LN(x)), then + MLP(LN(x)). `keep` scales each residual
/// branch (1 = always kept, 0 = dropped by stochastic depth).
Var transformer_block(const Var& x, const BlockWeights& w, int heads, double keep_attn = 1.0,
                      double keep_mlp = 1.0);

AttentionWeights make_attention(ParameterSet& ps, const std::string& name, std::int64_t dim);
MlpWeights make_mlp(ParameterSet& ps, const std::string& name, std::int64_t dim, std::int64_t hidden);
BlockWeights make_block(ParameterSet& ps, const std::string& name, std::int64_t dim, std::int64_t hidden);

/// Bicubic resize of a [src_h * src_w, D] position table to [new_h * new_w, D].
Var interpolate_pos_embed(const Var& pos, std::int64_t src_h, std::int64_t src_w, std::int64_t new_h,
                          std::int64_t new_w);

/// Vision Transformer encoder with learned absolute position embeddings and no
/// class token. Parameter names are `<prefix>.patch_embed.*`, `<prefix>.pos_embed`,
/// `<prefix>.blocks.<i>.*` and `<prefix>.norm.*`.
class VisionTransformer {
 public:
  VisionTransformer(ParameterSet& ps, const std::string& prefix, const ViTConfig& config);

  const ViTConfig& config() const { return config_; }

  /// Linear patch projection only; positions are not added.
  PatchSequence embed_patches(const Tensor& image) const;
  /// Adds position embeddings, resizing the table when the grid differs.
  Var add_positions(const Var& tokens, std::int64_t grid_h, std::int64_t grid_w) const;
  /// embed_patches followed by add_positions.
  PatchSequence patchify_embed(const Tensor& image) const;

  /// Runs all blocks and the final LayerNorm. When `tap_depths` is given, the
  /// outputs after those (1-based) block counts are appended to `taps`.
  /// `rng` enables stochastic depth when the config rate is non-zero.
  Var encode(const Var& tokens, std::span<const int> tap_depths = {}, std::vector<Var>* taps = nullptr,
             Rng* rng = nullptr) const;

  Var pos_embed;
  Linear patch_proj;
  std::vector<BlockWeights> blocks;
  LayerNorm norm;

 private:
  ViTConfig config_;
};

}  // namespace segkit
