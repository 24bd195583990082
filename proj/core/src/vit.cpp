#include "segkit/vit.hpp"

#include <stdexcept>

namespace segkit {

void ViTConfig::validate() const {
  if (patch_size <= 0 || embed_dim <= 0 || depth <= 0 || heads <= 0) {
    throw std::invalid_argument("ViTConfig: sizes must be positive");
  }
  if (embed_dim % heads != 0) throw std::invalid_argument("ViTConfig: embed_dim must be divisible by heads");
  if (image_size % patch_size != 0) {
    throw std::invalid_argument("ViTConfig: image_size " + std::to_string(image_size) +
                                " is not divisible by patch_size " + std::to_string(patch_size));
  }
  if (mlp_ratio <= 0) throw std::invalid_argument("ViTConfig: mlp_ratio must be positive");
  if (drop_path < 0 || drop_path >= 1) throw std::invalid_argument("ViTConfig: drop_path must be in [0, 1)");
}

ViTConfig ViTConfig::toy() {
  ViTConfig c;
  c.patch_size = 4;
  c.embed_dim = 64;
  c.depth = 4;
  c.heads = 4;
  c.image_size = 64;
  return c;
}

ViTConfig ViTConfig::base() { return ViTConfig{}; }

ViTConfig ViTConfig::large() {
  ViTConfig c;
  c.embed_dim = 1024;
  c.depth = 24;
  c.heads = 16;
  return c;
}

Tensor patchify(const Tensor& image, int patch_size) {
  if (image.rank() != 3 || image.dim(2) != 3) throw std::invalid_argument("patchify: expected [H, W, 3]");
  const auto h = image.dim(0), w = image.dim(1);
  if (patch_size <= 0 || h % patch_size != 0 || w % patch_size != 0) {
    throw std::invalid_argument("patchify: resolution " + std::to_string(h) + "x" + std::to_string(w) +
                                " is not divisible by patch size " + std::to_string(patch_size));
  }
  const std::int64_t gh = h / patch_size, gw = w / patch_size, pp = patch_size;
  Tensor out(Shape{gh * gw, pp * pp * 3});
  for (std::int64_t py = 0; py < gh; ++py) {
    for (std::int64_t px = 0; px < gw; ++px) {
      double* dst = out.data() + (py * gw + px) * pp * pp * 3;
      for (std::int64_t y = 0; y < pp; ++y) {
        const double* src = image.data() + ((py * pp + y) * w + px * pp) * 3;
        std::copy_n(src, pp * 3, dst + y * pp * 3);
      }
    }
  }
  return out;
}

Var multi_head_attention(const Var& x, const AttentionWeights& w, int heads) {
  const auto d = x.value().cols();
  const Var qkv = w.qkv(x);
  const Var q = ops::slice_last(qkv, 0, d);
  const Var k = ops::slice_last(qkv, d, 2 * d);
  const Var v = ops::slice_last(qkv, 2 * d, 3 * d);
  return w.proj(ops::attention(q, k, v, heads));
}

Var mlp_forward(const Var& x, const MlpWeights& w) { return w.fc2(ops::gelu(w.fc1(x))); }

Var transformer_block(const Var& x, const BlockWeights& w, int heads, double keep_attn, double keep_mlp) {
  Var h = x;
  if (keep_attn > 0.0) {
    Var a = multi_head_attention(w.norm1(h), w.attn, heads);
    if (keep_attn != 1.0) a = ops::scale(a, 1.0 / keep_attn);
    h = ops::add(h, a);
  }
  if (keep_mlp > 0.0) {
    Var m = mlp_forward(w.norm2(h), w.mlp);
    if (keep_mlp != 1.0) m = ops::scale(m, 1.0 / keep_mlp);
    h = ops::add(h, m);
  }
  return h;
}

AttentionWeights make_attention(ParameterSet& ps, const std::string& name, std::int64_t dim) {
  return {make_linear(ps, name + ".qkv", dim, 3 * dim, Init::trunc_normal(0.02)),
          make_linear(ps, name + ".proj", dim, dim, Init::trunc_normal(0.02))};
}

MlpWeights make_mlp(ParameterSet& ps, const std::string& name, std::int64_t dim, std::int64_t hidden) {
  return {make_linear(ps, name + ".fc1", dim, hidden, Init::trunc_normal(0.02)),
          make_linear(ps, name + ".fc2", hidden, dim, Init::trunc_normal(0.02))};
}

BlockWeights make_block(ParameterSet& ps, const std::string& name, std::int64_t dim, std::int64_t hidden) {
  BlockWeights b;
  b.norm1 = make_layer_norm(ps, name + ".norm1", dim);
  b.attn = make_attention(ps, name + ".attn", dim);
  b.norm2 = make_layer_norm(ps, name + ".norm2", dim);
  b.mlp = make_mlp(ps, name + ".mlp", dim, hidden);
  return b;
}

Var interpolate_pos_embed(const Var& pos, std::int64_t src_h, std::int64_t src_w, std::int64_t new_h,
                          std::int64_t new_w) {
  if (pos.value().rows() != src_h * src_w) throw std::invalid_argument("interpolate_pos_embed: table size mismatch");
  if (src_h == new_h && src_w == new_w) return pos;
  const auto d = pos.value().cols();
  const Var grid = ops::reshape(pos, {src_h, src_w, d});
  const Var resized = ops::resample(grid, ops::bicubic_weights(src_h, new_h), ops::bicubic_weights(src_w, new_w));
  return ops::reshape(resized, {new_h * new_w, d});
}

VisionTransformer::VisionTransformer(ParameterSet& ps, const std::string& prefix, const ViTConfig& config)
    : config_(config) {
  config_.validate();
  const auto d = config_.embed_dim;
  const auto p = config_.patch_size;
  const auto n = static_cast<std::int64_t>(config_.grid()) * config_.grid();
  patch_proj = make_linear(ps, prefix + ".patch_embed", static_cast<std::int64_t>(p) * p * 3, d, Init::trunc_normal(0.02));
  pos_embed = ps.add(prefix + ".pos_embed", {n, d}, Init::trunc_normal(0.02), false);
  for (int i = 0; i < config_.depth; ++i) {
    blocks.push_back(make_block(ps, prefix + ".blocks." + std::to_string(i), d, config_.mlp_dim()));
  }
  norm = make_layer_norm(ps, prefix + ".norm", d);
}

PatchSequence VisionTransformer::embed_patches(const Tensor& image) const {
  const Tensor patches = patchify(image, config_.patch_size);
  PatchSequence seq;
  seq.grid_h = image.dim(0) / config_.patch_size;
  seq.grid_w = image.dim(1) / config_.patch_size;
  seq.tokens = patch_proj(Var(patches));
  return seq;
}

Var VisionTransformer::add_positions(const Var& tokens, std::int64_t grid_h, std::int64_t grid_w) const {
  const auto g = config_.grid();
  return ops::add(tokens, interpolate_pos_embed(pos_embed, g, g, grid_h, grid_w));
}

PatchSequence VisionTransformer::patchify_embed(const Tensor& image) const {
  PatchSequence seq = embed_patches(image);
  seq.tokens = add_positions(seq.tokens, seq.grid_h, seq.grid_w);
  return seq;
}

Var VisionTransformer::encode(const Var& tokens, std::span<const int> tap_depths, std::vector<Var>* taps,
                              Rng* rng) const {
  Var x = tokens;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < config_.depth; ++i) {
    double keep_attn = 1.0, keep_mlp = 1.0;
    if (rng && config_.drop_path > 0.0) {
      const double rate = config_.depth > 1 ? config_.drop_path * i / (config_.depth - 1) : config_.drop_path;
      const double keep = 1.0 - rate;
      keep_attn = u(*rng) < keep ? keep : 0.0;
      keep_mlp = u(*rng) < keep ? keep : 0.0;
    }
    x = transformer_block(x, blocks[static_cast<std::size_t>(i)], config_.heads, keep_attn, keep_mlp);
    if (taps) {
      for (int t : tap_depths)
        if (t == i + 1 && t != config_.depth) taps->push_back(x);
    }
  }
  x = norm(x);
  if (taps) {
    for (int t : tap_depths)
      if (t == config_.depth) taps->push_back(x);
  }
  return x;
}

}  // namespace segkit
