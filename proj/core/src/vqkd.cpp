#include "segkit/vqkd.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace segkit {

namespace {

// Fixed input standardization shared by tokenizer and teacher.
Tensor standardize(const Tensor& image) {
  Tensor out = image;
  for (auto& v : out.values()) v = (v - 0.5) / 0.25;
  return out;
}

void require_resolution(const Tensor& image, int size, const char* who) {
  if (image.rank() != 3 || image.dim(2) != 3) throw std::invalid_argument(std::string(who) + ": expected [H, W, 3] image");
  if (image.dim(0) != size || image.dim(1) != size) {
    throw std::invalid_argument(std::string(who) + ": image is " + std::to_string(image.dim(0)) + "x" +
                                std::to_string(image.dim(1)) + ", tokenizer expects " + std::to_string(size) + "x" +
                                std::to_string(size));
  }
}

}  // namespace

Codebook Codebook::from_vectors(const Tensor& vectors) {
  if (vectors.rank() != 2 || vectors.dim(0) == 0) throw std::invalid_argument("Codebook: need a non-empty [K, d] table");
  Codebook cb;
  cb.codes = vectors;
  auto m = cb.codes.matrix();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double n = m.row(r).norm();
    if (!(n > 0.0)) throw std::invalid_argument("Codebook: zero-norm code vector");
    m.row(r) /= n;
  }
  cb.ema_count = Tensor(Shape{vectors.dim(0)}, 1.0);
  cb.ema_sum = cb.codes;
  cb.idle.assign(static_cast<std::size_t>(vectors.dim(0)), 0);
  return cb;
}

Codebook Codebook::random(std::int64_t size, std::int64_t dim, Rng& rng) {
  if (size <= 0 || dim <= 0) throw std::invalid_argument("Codebook: size and dim must be positive");
  std::normal_distribution<double> nd(0.0, 1.0);
  Tensor t(Shape{size, dim});
  for (auto& v : t.values()) v = nd(rng);
  return from_vectors(t);
}

QuantizeResult quantize(const Tensor& vectors, const Codebook& codebook) {
  if (codebook.size() == 0) throw std::invalid_argument("quantize: empty codebook");
  if (vectors.rank() != 2 || vectors.dim(1) != codebook.dim()) {
    throw std::invalid_argument("quantize: vectors " + shape_string(vectors.shape()) + " do not match code dim " +
                                std::to_string(codebook.dim()));
  }
  RowMatrix x = vectors.matrix();
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double n = x.row(r).norm();
    if (!(n > 0.0) || !std::isfinite(n)) {
      throw std::domain_error("quantize: row " + std::to_string(r) + " has zero or non-finite norm");
    }
    x.row(r) /= n;
  }
  const RowMatrix sims = x * codebook.codes.matrix().transpose();
  QuantizeResult out;
  out.codes.resize(static_cast<std::size_t>(x.rows()));
  out.quantized = Tensor(Shape{x.rows(), codebook.dim()});
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    Eigen::Index best = 0;
    for (Eigen::Index k = 1; k < sims.cols(); ++k)
      if (sims(r, k) > sims(r, best)) best = k;
    out.codes[static_cast<std::size_t>(r)] = static_cast<std::int32_t>(best);
    out.quantized.matrix().row(r) = codebook.codes.matrix().row(best);
  }
  return out;
}

void update_codebook_ema(Codebook& codebook, std::span<const std::int32_t> assignments, const Tensor& vectors,
                         const EmaConfig& config, Rng& rng) {
  const double g = config.decay;
  if (g < 0.0 || g > 1.0) throw std::invalid_argument("update_codebook_ema: decay must lie in [0, 1]");
  const auto k = codebook.size(), d = codebook.dim();
  if (static_cast<std::int64_t>(assignments.size()) != vectors.rows() || vectors.cols() != d) {
    throw std::invalid_argument("update_codebook_ema: assignments and vectors disagree");
  }
  RowMatrix batch_sum = RowMatrix::Zero(k, d);
  std::vector<std::int64_t> batch_count(static_cast<std::size_t>(k), 0);
  const auto vm = vectors.matrix();
  for (std::size_t i = 0; i < assignments.size(); ++i) {
    const auto a = assignments[i];
    if (a < 0 || a >= k) throw std::out_of_range("update_codebook_ema: assignment out of range");
    batch_sum.row(a) += vm.row(static_cast<Eigen::Index>(i));
    ++batch_count[static_cast<std::size_t>(a)];
  }
  auto codes = codebook.codes.matrix();
  auto sums = codebook.ema_sum.matrix();
  for (std::int64_t c = 0; c < k; ++c) {
    const auto ci = static_cast<std::size_t>(c);
    double& count = codebook.ema_count[ci];
    count = g * count + (1.0 - g) * static_cast<double>(batch_count[ci]);
    sums.row(c) = g * sums.row(c) + (1.0 - g) * batch_sum.row(c);
    const Eigen::RowVectorXd mean = sums.row(c) / std::max(count, config.eps);
    const double n = mean.norm();
    if (n > 0.0 && std::isfinite(n)) codes.row(c) = mean / n;
    codebook.idle[ci] = batch_count[ci] > 0 ? 0 : codebook.idle[ci] + 1;
  }
  if (vectors.rows() == 0) return;
  std::uniform_int_distribution<Eigen::Index> pick(0, vectors.rows() - 1);
  for (std::int64_t c = 0; c < k; ++c) {
    const auto ci = static_cast<std::size_t>(c);
    if (config.dead_after <= 0 || codebook.idle[ci] < config.dead_after) continue;
    Eigen::RowVectorXd v = vm.row(pick(rng));
    const double n = v.norm();
    if (!(n > 0.0)) continue;
    v /= n;
    codes.row(c) = v;
    sums.row(c) = v;
    codebook.ema_count[ci] = 1.0;
    codebook.idle[ci] = 0;
  }
}

double token_iou(const TokenSequence& a, const TokenSequence& b) {
  const auto sa = a.distinct(), sb = b.distinct();
  if (sa.empty() && sb.empty()) throw std::invalid_argument("token_iou: both token sets are empty");
  std::size_t inter = 0;
  for (auto v : sa) inter += sb.count(v);
  const auto uni = sa.size() + sb.size() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

std::string TokenIouMatrix::to_csv(bool show_diagonal, int precision) const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision);
  for (const auto& n : names) os << ',' << n;
  os << '\n';
  for (std::size_t i = 0; i < values.size(); ++i) {
    os << names[i];
    for (std::size_t j = 0; j < values[i].size(); ++j) {
      os << ',';
      if (i == j && !show_diagonal) os << '-';
      else os << values[i][j];
    }
    os << '\n';
  }
  return os.str();
}

TokenIouMatrix token_iou_matrix(const std::vector<TokenSequence>& tokens, const std::vector<std::string>& names) {
  if (tokens.size() < 2) throw std::invalid_argument("token_iou_matrix: need at least two images");
  if (names.size() != tokens.size()) throw std::invalid_argument("token_iou_matrix: one name per image required");
  TokenIouMatrix m;
  m.names = names;
  m.values.assign(tokens.size(), std::vector<double>(tokens.size(), 1.0));
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    for (std::size_t j = i + 1; j < tokens.size(); ++j) {
      const double v = token_iou(tokens[i], tokens[j]);
      m.values[i][j] = m.values[j][i] = v;
    }
  }
  return m;
}

RandomViTTeacher::RandomViTTeacher(const ViTConfig& config, std::uint64_t seed)
    : params_(seed), vit_(params_, "teacher", config) {
  params_.freeze();
}

Tensor RandomViTTeacher::features(const Tensor& image) const {
  NoGradGuard guard;
  const auto seq = vit_.patchify_embed(standardize(image));
  return vit_.encode(seq.tokens).value();
}

void TokenizerConfig::validate() const {
  encoder.validate();
  if (code_dim <= 0 || codebook_size <= 0 || teacher_dim <= 0 || decoder_depth < 0) {
    throw std::invalid_argument("TokenizerConfig: sizes must be positive");
  }
  if (beta < 0) throw std::invalid_argument("TokenizerConfig: beta must be non-negative");
}

TokenizerConfig TokenizerConfig::toy() {
  TokenizerConfig c;
  c.encoder.patch_size = 4;
  c.encoder.embed_dim = 64;
  c.encoder.depth = 2;
  c.encoder.heads = 4;
  c.encoder.image_size = 32;
  c.code_dim = 32;
  c.codebook_size = 64;
  c.decoder_depth = 1;
  c.teacher_dim = 64;
  return c;
}

TokenizerConfig TokenizerConfig::base() {
  TokenizerConfig c;
  c.encoder = ViTConfig::base();
  return c;
}

VqkdTokenizer::VqkdTokenizer(const TokenizerConfig& config, std::uint64_t seed)
    : config_(config), params_(seed), encoder_(params_, "encoder", config.encoder) {
  config_.validate();
  const auto d = config_.encoder.embed_dim;
  const auto n = static_cast<std::int64_t>(config_.encoder.grid()) * config_.encoder.grid();
  to_code_ = make_linear(params_, "quantize.proj", d, config_.code_dim, Init::trunc_normal(0.02));
  from_code_ = make_linear(params_, "decoder.embed", config_.code_dim, d, Init::trunc_normal(0.02));
  decoder_pos_ = params_.add("decoder.pos_embed", {n, d}, Init::trunc_normal(0.02), false);
  for (int i = 0; i < config_.decoder_depth; ++i) {
    decoder_blocks_.push_back(make_block(params_, "decoder.blocks." + std::to_string(i), d, config_.encoder.mlp_dim()));
  }
  decoder_norm_ = make_layer_norm(params_, "decoder.norm", d);
  decoder_head_ = make_linear(params_, "decoder.head", d, config_.teacher_dim, Init::trunc_normal(0.02));
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  codebook_ = Codebook::random(config_.codebook_size, config_.code_dim, rng);
}

Var VqkdTokenizer::encode(const Tensor& image) const {
  require_resolution(image, config_.encoder.image_size, "tokenizer");
  const auto seq = encoder_.patchify_embed(standardize(image));
  return ops::l2_normalize_rows(to_code_(encoder_.encode(seq.tokens)));
}

TokenSequence VqkdTokenizer::tokenize(const Tensor& image) const {
  NoGradGuard guard;
  const Var z = encode(image);
  TokenSequence t;
  t.codes = quantize(z.value(), codebook_).codes;
  t.grid_h = t.grid_w = config_.encoder.grid();
  return t;
}

Var VqkdTokenizer::decode(const Var& quantized) const {
  Var x = ops::add(from_code_(quantized), decoder_pos_);
  for (const auto& b : decoder_blocks_) x = transformer_block(x, b, config_.encoder.heads);
  return decoder_head_(decoder_norm_(x));
}

Var VqkdTokenizer::loss_graph(const Tensor& image, const Tensor& teacher_features, VqkdLoss* parts,
                              Tensor* encoder_vectors, std::vector<std::int32_t>* assignments) const {
  const Var z = encode(image);
  if (teacher_features.rows() != z.value().rows() || teacher_features.cols() != config_.teacher_dim) {
    throw std::invalid_argument("vqkd: teacher features " + shape_string(teacher_features.shape()) +
                                " do not match the tokenizer grid/teacher_dim");
  }
  auto q = quantize(z.value(), codebook_);
  const Var code(q.quantized);
  // Straight-through: forward uses the code, backward treats quantization as identity.
  const Var st = ops::add(z, ops::detach(ops::sub(code, z)));
  const Var recon = ops::cosine_distance_mean(decode(st), Var(teacher_features));
  const Var commit = ops::mean_row_sq_norm(ops::sub(z, code));
  const Var total = ops::add(recon, ops::scale(commit, config_.beta));
  if (parts) *parts = {total.value().item(), recon.value().item(), commit.value().item()};
  if (encoder_vectors) *encoder_vectors = z.value();
  if (assignments) *assignments = std::move(q.codes);
  return total;
}

VqkdLoss VqkdTokenizer::evaluate(std::span<const Tensor> images, const TeacherAdapter& teacher) const {
  NoGradGuard guard;
  VqkdLoss acc;
  for (const auto& img : images) {
    VqkdLoss l;
    loss_graph(img, teacher.features(img), &l);
    acc.total += l.total;
    acc.reconstruction += l.reconstruction;
    acc.commitment += l.commitment;
  }
  const double n = static_cast<double>(images.size());
  acc.total /= n;
  acc.reconstruction /= n;
  acc.commitment /= n;
  return acc;
}

void VqkdTokenizer::init_codebook_from(std::span<const Tensor> images, Rng& rng) {
  NoGradGuard guard;
  std::vector<Tensor> zs;
  std::int64_t rows = 0;
  for (const auto& img : images) {
    zs.push_back(encode(img).value());
    rows += zs.back().rows();
  }
  if (rows == 0) throw std::invalid_argument("init_codebook_from: no vectors");
  RowMatrix all(rows, config_.code_dim);
  std::int64_t at = 0;
  for (const auto& z : zs) {
    all.middleRows(at, z.rows()) = z.matrix();
    at += z.rows();
  }
  std::normal_distribution<double> nd(0.0, 0.05);
  std::uniform_int_distribution<Eigen::Index> pick(0, rows - 1);
  Tensor table(Shape{config_.codebook_size, config_.code_dim});
  for (std::int64_t k = 0; k < config_.codebook_size; ++k) {
    const auto r = pick(rng);
    for (std::int64_t j = 0; j < config_.code_dim; ++j) table.matrix()(k, j) = all(r, j) + nd(rng);
  }
  codebook_ = Codebook::from_vectors(table);
}

VqkdStepResult vqkd_train_step(VqkdTokenizer& tokenizer, std::span<const Tensor> images,
                               const TeacherAdapter& teacher, AdamW& optimizer, double lr, Rng& rng) {
  if (images.empty()) throw std::invalid_argument("vqkd_train_step: empty batch");
  if (teacher.patch_size() != tokenizer.config().encoder.patch_size) {
    throw std::invalid_argument("vqkd_train_step: teacher grid does not match tokenizer grid");
  }
  tokenizer.parameters().zero_grad();
  VqkdStepResult result;
  std::vector<Tensor> vectors;
  const double inv = 1.0 / static_cast<double>(images.size());
  for (const auto& img : images) {
    VqkdLoss parts;
    Tensor z;
    std::vector<std::int32_t> codes;
    const Var loss = tokenizer.loss_graph(img, teacher.features(img), &parts, &z, &codes);
    if (!std::isfinite(parts.total)) {
      throw std::runtime_error("vqkd_train_step: non-finite loss (reconstruction " + std::to_string(parts.reconstruction) +
                               ", commitment " + std::to_string(parts.commitment) + ")");
    }
    ops::scale(loss, inv).backward();
    result.loss.total += parts.total * inv;
    result.loss.reconstruction += parts.reconstruction * inv;
    result.loss.commitment += parts.commitment * inv;
    result.assignments.insert(result.assignments.end(), codes.begin(), codes.end());
    vectors.push_back(std::move(z));
  }
  optimizer.step(lr);
  const auto d = tokenizer.config().code_dim;
  Tensor all(Shape{static_cast<std::int64_t>(result.assignments.size()), d});
  std::int64_t at = 0;
  for (const auto& z : vectors) {
    all.matrix().middleRows(at, z.rows()) = z.matrix();
    at += z.rows();
  }
  update_codebook_ema(tokenizer.codebook(), result.assignments, all, tokenizer.config().ema, rng);
  return result;
}

}  // namespace segkit
