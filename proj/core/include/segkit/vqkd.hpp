#pragma once

#include <cstdint>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "segkit/optim.hpp"
#include "segkit/vit.hpp"

namespace segkit {

/// K unit-norm code vectors plus the moving-average statistics that update them.
struct Codebook {
  Tensor codes;                  // [K, d]
  Tensor ema_count;              // [K]
  Tensor ema_sum;                // [K, d]
  std::vector<std::int64_t> idle;  // consecutive updates without an assignment

  std::int64_t size() const { return codes.empty() ? 0 : codes.dim(0); }
  std::int64_t dim() const { return codes.empty() ? 0 : codes.dim(1); }

  /// Codes from normalized rows of `vectors`; statistics start at count 1.
  static Codebook from_vectors(const Tensor& vectors);
  static Codebook random(std::int64_t size, std::int64_t dim, Rng& rng);
};

struct QuantizeResult {
  std::vector<std::int32_t> codes;
  Tensor quantized;  // [N, d], the selected code vectors
};

/// Nearest code by cosine similarity after L2-normalizing each input row.
/// Ties go to the lowest index. Throws on a zero-norm row.
QuantizeResult quantize(const Tensor& vectors, const Codebook& codebook);

struct EmaConfig {
  double decay = 0.99;
  std::int64_t dead_after = 200;
  double eps = 1e-5;
};

/// count <- g*count + (1-g)*n; sum <- g*sum + (1-g)*sum(assigned);
/// code <- normalize(sum / max(count, eps)). Codes idle for `dead_after`
/// consecutive updates are re-seeded from a random row of `vectors`.
void update_codebook_ema(Codebook& codebook, std::span<const std::int32_t> assignments, const Tensor& vectors,
                         const EmaConfig& config, Rng& rng);

/// One code index per patch, with the patch grid attached.
struct TokenSequence {
  std::vector<std::int32_t> codes;
  std::int64_t grid_h = 0;
  std::int64_t grid_w = 0;

  std::set<std::int32_t> distinct() const { return {codes.begin(), codes.end()}; }
};

/// |A & B| / |A | B| over the distinct codes of two sequences.
double token_iou(const TokenSequence& a, const TokenSequence& b);

struct TokenIouMatrix {
  std::vector<std::string> names;
  std::vector<std::vector<double>> values;

  /// Table layout with names as header row and first column. The diagonal
  /// prints as "-" unless `show_diagonal` is set.
  std::string to_csv(bool show_diagonal = false, int precision = 3) const;
};
TokenIouMatrix token_iou_matrix(const std::vector<TokenSequence>& tokens, const std::vector<std::string>& names);

/// Frozen source of per-patch distillation targets.
class TeacherAdapter {
 public:
  virtual ~TeacherAdapter() = default;
  /// [N, feature_dim] targets for an [H, W, 3] image; no gradient is recorded.
  virtual Tensor features(const Tensor& image) const = 0;
  virtual std::int64_t feature_dim() const = 0;
  virtual int patch_size() const = 0;
};

/// Randomly initialized, frozen ViT whose final features serve as targets.
class RandomViTTeacher final : public TeacherAdapter {
 public:
  RandomViTTeacher(const ViTConfig& config, std::uint64_t seed);
  Tensor features(const Tensor& image) const override;
  std::int64_t feature_dim() const override { return vit_.config().embed_dim; }
  int patch_size() const override { return vit_.config().patch_size; }
  const ParameterSet& parameters() const { return params_; }

 private:
  ParameterSet params_;
  VisionTransformer vit_;
};

struct TokenizerConfig {
  ViTConfig encoder;
  std::int64_t code_dim = 32;
  std::int64_t codebook_size = 8192;
  int decoder_depth = 3;
  std::int64_t teacher_dim = 512;
  double beta = 1.0;
  EmaConfig ema;

  void validate() const;
  /// 32x32 inputs, 4-pixel patches, K=64, one decoder block.
  static TokenizerConfig toy();
  /// ViT-B/16 encoder at 224x224 with K=8192.
  static TokenizerConfig base();
};

struct VqkdLoss {
  double total = 0.0;
  double reconstruction = 0.0;
  double commitment = 0.0;
};

/// Vector-quantized knowledge-distillation tokenizer: ViT encoder, projection
/// to unit-norm code space, nearest-code quantizer, and a Transformer decoder
/// that regresses teacher features from the quantized sequence.
class VqkdTokenizer {
 public:
  VqkdTokenizer(const TokenizerConfig& config, std::uint64_t seed);

  const TokenizerConfig& config() const { return config_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }
  Codebook& codebook() { return codebook_; }
  const Codebook& codebook() const { return codebook_; }

  /// Normalized code-space vectors [N, code_dim] for one image.
  Var encode(const Tensor& image) const;
  /// Code indices for an image at the configured resolution.
  TokenSequence tokenize(const Tensor& image) const;

  /// Builds the loss graph for one image. Appends the normalized encoder
  /// outputs and their code assignments when the out-params are given.
  Var loss_graph(const Tensor& image, const Tensor& teacher_features, VqkdLoss* parts,
                 Tensor* encoder_vectors = nullptr, std::vector<std::int32_t>* assignments = nullptr) const;

  /// Loss without any tape, averaged over a batch.
  VqkdLoss evaluate(std::span<const Tensor> images, const TeacherAdapter& teacher) const;

  /// Seeds the codebook from encoder outputs of the given images.
  void init_codebook_from(std::span<const Tensor> images, Rng& rng);

 private:
  Var decode(const Var& quantized) const;

  TokenizerConfig config_;
  ParameterSet params_;
  VisionTransformer encoder_;
  Linear to_code_;
  Linear from_code_;
  Var decoder_pos_;
  std::vector<BlockWeights> decoder_blocks_;
  LayerNorm decoder_norm_;
  Linear decoder_head_;
  Codebook codebook_;
};

struct VqkdStepResult {
  VqkdLoss loss;  // evaluated before the update
  std::vector<std::int32_t> assignments;
};

/// One optimization step: batch loss, backward, AdamW, then one EMA codebook update.
VqkdStepResult vqkd_train_step(VqkdTokenizer& tokenizer, std::span<const Tensor> images,
                               const TeacherAdapter& teacher, AdamW& optimizer, double lr, Rng& rng);

}  // namespace segkit
