#include "segkit/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace segkit {

using nlohmann::json;

namespace {

template <typename T>
void read(const json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

json vit_json(const ViTConfig& c) {
  return {{"patch_size", c.patch_size}, {"embed_dim", c.embed_dim}, {"depth", c.depth},       {"heads", c.heads},
          {"mlp_ratio", c.mlp_ratio},   {"image_size", c.image_size}, {"drop_path", c.drop_path}};
}

void vit_from(const json& j, ViTConfig& c) {
  read(j, "patch_size", c.patch_size);
  read(j, "embed_dim", c.embed_dim);
  read(j, "depth", c.depth);
  read(j, "heads", c.heads);
  read(j, "mlp_ratio", c.mlp_ratio);
  read(j, "image_size", c.image_size);
  read(j, "drop_path", c.drop_path);
}

json dcn_json(const DCNConfig& c) {
  return {{"channels", c.channels}, {"depths", c.depths}, {"groups", c.groups}, {"mlp_ratio", c.mlp_ratio},
          {"offset_bound", c.offset_bound}};
}

void dcn_from(const json& j, DCNConfig& c) {
  read(j, "channels", c.channels);
  read(j, "depths", c.depths);
  read(j, "groups", c.groups);
  read(j, "mlp_ratio", c.mlp_ratio);
  read(j, "offset_bound", c.offset_bound);
}

json norm_json(const Normalization& n) {
  return {{"mean", {n.mean[0], n.mean[1], n.mean[2]}}, {"std", {n.std[0], n.std[1], n.std[2]}}};
}

void norm_from(const json& j, Normalization& n) {
  if (j.contains("mean"))
    for (int i = 0; i < 3; ++i) n.mean[i] = j.at("mean").at(static_cast<std::size_t>(i)).get<double>();
  if (j.contains("std"))
    for (int i = 0; i < 3; ++i) n.std[i] = j.at("std").at(static_cast<std::size_t>(i)).get<double>();
}

json optim_json(const AdamWConfig& c) {
  return {{"lr", c.lr}, {"weight_decay", c.weight_decay}, {"betas", {c.beta1, c.beta2}}, {"eps", c.eps}};
}

void optim_from(const json& j, AdamWConfig& c) {
  read(j, "lr", c.lr);
  read(j, "weight_decay", c.weight_decay);
  read(j, "eps", c.eps);
  if (j.contains("betas")) {
    c.beta1 = j.at("betas").at(0).get<double>();
    c.beta2 = j.at("betas").at(1).get<double>();
  }
}

json augment_json(const AugmentConfig& a) {
  return {{"scale_range", {a.scale_min, a.scale_max}},
          {"crop", a.crop},
          {"flip_prob", a.flip_prob},
          {"brightness", a.brightness},
          {"contrast", a.contrast},
          {"saturation", a.saturation}};
}

void augment_from(const json& j, AugmentConfig& a) {
  if (j.contains("scale_range")) {
    a.scale_min = j.at("scale_range").at(0).get<double>();
    a.scale_max = j.at("scale_range").at(1).get<double>();
  }
  read(j, "crop", a.crop);
  read(j, "flip_prob", a.flip_prob);
  read(j, "brightness", a.brightness);
  read(j, "contrast", a.contrast);
  read(j, "saturation", a.saturation);
}

json eval_json(const EvalOptions& e) {
  return {{"mode", e.mode == InferenceMode::Sliding ? "sliding" : "whole"},
          {"crop", e.crop},
          {"stride", e.stride},
          {"exclude_background", e.exclude_background}};
}

void eval_from(const json& j, EvalOptions& e) {
  if (j.contains("mode")) {
    const auto m = j.at("mode").get<std::string>();
    if (m == "sliding") e.mode = InferenceMode::Sliding;
    else if (m == "whole") e.mode = InferenceMode::Whole;
    else throw std::invalid_argument("eval.mode must be sliding or whole, got " + m);
  }
  read(j, "crop", e.crop);
  read(j, "stride", e.stride);
  read(j, "exclude_background", e.exclude_background);
}

json seg_json(const SegModelConfig& c) {
  return {{"backbone", backbone_name(c.backbone)},
          {"vit", vit_json(c.vit)},
          {"dcn", dcn_json(c.dcn)},
          {"num_classes", c.num_classes},
          {"decoder_channels", c.decoder_channels},
          {"aux_head", c.aux_head},
          {"aux_channels", c.aux_channels},
          {"normalization", norm_json(c.normalization)}};
}

void seg_from(const json& j, SegModelConfig& c) {
  if (j.contains("backbone")) c.backbone = parse_backbone(j.at("backbone").get<std::string>());
  if (j.contains("vit")) vit_from(j.at("vit"), c.vit);
  if (j.contains("dcn")) dcn_from(j.at("dcn"), c.dcn);
  read(j, "num_classes", c.num_classes);
  read(j, "decoder_channels", c.decoder_channels);
  read(j, "aux_head", c.aux_head);
  read(j, "aux_channels", c.aux_channels);
  if (j.contains("normalization")) norm_from(j.at("normalization"), c.normalization);
}

json mim_json(const MimConfig& c) {
  return {{"encoder", vit_json(c.encoder)}, {"vocab_size", c.vocab_size}, {"mask_ratio", c.mask_ratio}};
}

void mim_from(const json& j, MimConfig& c) {
  if (j.contains("encoder")) vit_from(j.at("encoder"), c.encoder);
  read(j, "vocab_size", c.vocab_size);
  read(j, "mask_ratio", c.mask_ratio);
}

json tok_json(const TokenizerConfig& c) {
  return {{"encoder", vit_json(c.encoder)},
          {"code_dim", c.code_dim},
          {"codebook_size", c.codebook_size},
          {"decoder_depth", c.decoder_depth},
          {"teacher_dim", c.teacher_dim},
          {"beta", c.beta},
          {"ema", {{"decay", c.ema.decay}, {"dead_after", c.ema.dead_after}, {"eps", c.ema.eps}}}};
}

void tok_from(const json& j, TokenizerConfig& c) {
  if (j.contains("encoder")) vit_from(j.at("encoder"), c.encoder);
  read(j, "code_dim", c.code_dim);
  read(j, "codebook_size", c.codebook_size);
  read(j, "decoder_depth", c.decoder_depth);
  read(j, "teacher_dim", c.teacher_dim);
  read(j, "beta", c.beta);
  if (j.contains("ema")) {
    const auto& e = j.at("ema");
    read(e, "decay", c.ema.decay);
    read(e, "dead_after", c.ema.dead_after);
    read(e, "eps", c.ema.eps);
  }
}

json parse(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("config is not valid JSON: ") + e.what());
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (!(optim.lr > 0)) throw std::invalid_argument("TrainConfig: lr must be positive");
  if (optim.beta1 < 0 || optim.beta1 >= 1 || optim.beta2 < 0 || optim.beta2 >= 1) {
    throw std::invalid_argument("TrainConfig: betas must lie in [0, 1)");
  }
  if (iterations <= warmup) throw std::invalid_argument("TrainConfig: iterations must exceed warmup");
  if (warmup < 0 || batch_size <= 0 || crop <= 0) throw std::invalid_argument("TrainConfig: sizes must be positive");
  if (aux_weight < 0) throw std::invalid_argument("TrainConfig: aux_weight must be non-negative");
  if (stop_at_miou < 0 || stop_at_miou > 1) throw std::invalid_argument("TrainConfig: stop_at_miou must lie in [0, 1]");
}

void RunConfig::validate() const {
  train.validate();
  model.validate();
}

RunConfig RunConfig::toy(BackboneKind backbone) {
  RunConfig r;
  r.model = SegModelConfig::toy(backbone, 5);
  r.train.augment.scale_min = 1.0;
  r.train.augment.scale_max = 1.0;
  r.train.augment.brightness = r.train.augment.contrast = r.train.augment.saturation = 0.0;
  r.train.augment.crop = r.train.crop;
  r.train.eval.crop = 64;
  r.train.eval.stride = 43;
  r.train.val_split = "train";
  if (backbone == BackboneKind::DCN) r.train.optim.lr = 2e-3;
  return r;
}

RunConfig RunConfig::beit_large_foodseg() {
  RunConfig r;
  r.model = SegModelConfig::at_scale(BackboneKind::ViT, 104);
  r.train.optim = {3e-5, 0.05, 0.9, 0.999, 1e-8};
  r.train.iterations = 160000;
  r.train.warmup = 1500;
  r.train.crop = 512;
  r.train.augment = AugmentConfig{};
  r.train.augment.crop = 512;
  r.train.eval = EvalOptions{};
  r.train.eval_interval = 16000;
  return r;
}

RunConfig RunConfig::internimage_base_foodseg() {
  RunConfig r = beit_large_foodseg();
  r.model = SegModelConfig::at_scale(BackboneKind::DCN, 104);
  r.train.optim = {6e-5, 0.0, 0.9, 0.999, 1e-8};
  r.train.pretrained_prefix = "backbone.";
  return r;
}

void PretrainConfig::validate() const {
  model.validate();
  if (!(optim.lr > 0)) throw std::invalid_argument("PretrainConfig: lr must be positive");
  if (iterations <= warmup || batch_size <= 0) throw std::invalid_argument("PretrainConfig: bad iteration or batch settings");
}

PretrainConfig PretrainConfig::toy() { return PretrainConfig{}; }

PretrainConfig PretrainConfig::large() {
  PretrainConfig c;
  c.model = MimConfig::large();
  c.iterations = 1600 * 5000;
  c.warmup = 10 * 5000;
  c.batch_size = 256;
  return c;
}

void TokenizerTrainConfig::validate() const {
  model.validate();
  teacher.validate();
  if (teacher.patch_size != model.encoder.patch_size || teacher.image_size != model.encoder.image_size) {
    throw std::invalid_argument("TokenizerTrainConfig: teacher grid must match the tokenizer grid");
  }
  if (teacher.embed_dim != model.teacher_dim) {
    throw std::invalid_argument("TokenizerTrainConfig: teacher embed_dim must equal model.teacher_dim");
  }
  if (!(optim.lr > 0)) throw std::invalid_argument("TokenizerTrainConfig: lr must be positive");
  if (iterations <= warmup || batch_size <= 0) throw std::invalid_argument("TokenizerTrainConfig: bad iteration or batch settings");
}

TokenizerTrainConfig TokenizerTrainConfig::toy() {
  TokenizerTrainConfig c;
  c.model = TokenizerConfig::toy();
  c.teacher = c.model.encoder;
  c.teacher.embed_dim = c.model.teacher_dim;
  return c;
}

TokenizerTrainConfig TokenizerTrainConfig::base() {
  TokenizerTrainConfig c;
  c.model = TokenizerConfig::base();
  c.teacher = ViTConfig::base();
  c.model.teacher_dim = c.teacher.embed_dim;
  c.iterations = 100 * 600;
  c.warmup = 5000;
  c.batch_size = 128;
  c.optim.lr = 5e-5;
  return c;
}

std::string to_json(const RunConfig& c) {
  const auto& t = c.train;
  json j;
  j["model"] = seg_json(c.model);
  j["train"] = {{"optimizer", optim_json(t.optim)},
                {"iterations", t.iterations},
                {"warmup", t.warmup},
                {"poly_power", t.poly_power},
                {"batch_size", t.batch_size},
                {"crop", t.crop},
                {"seed", t.seed},
                {"aux_weight", t.aux_weight},
                {"eval_interval", t.eval_interval},
                {"stop_at_miou", t.stop_at_miou},
                {"augment", augment_json(t.augment)},
                {"eval", eval_json(t.eval)},
                {"dataset_root", t.dataset_root},
                {"val_split", t.val_split},
                {"output_dir", t.output_dir},
                {"pretrained", t.pretrained},
                {"pretrained_prefix", t.pretrained_prefix}};
  return j.dump(2);
}

RunConfig run_config_from_json(const std::string& text) {
  const json j = parse(text);
  RunConfig c = RunConfig::toy(BackboneKind::ViT);
  if (j.contains("preset")) {
    const auto p = j.at("preset").get<std::string>();
    if (p == "toy_vit") c = RunConfig::toy(BackboneKind::ViT);
    else if (p == "toy_dcn") c = RunConfig::toy(BackboneKind::DCN);
    else if (p == "beit_large") c = RunConfig::beit_large_foodseg();
    else if (p == "internimage_base") c = RunConfig::internimage_base_foodseg();
    else throw std::invalid_argument("unknown preset '" + p + "'");
  } else if (j.contains("model") && j.at("model").contains("backbone")) {
    c = RunConfig::toy(parse_backbone(j.at("model").at("backbone").get<std::string>()));
  }
  if (j.contains("model")) seg_from(j.at("model"), c.model);
  if (j.contains("train")) {
    const auto& tj = j.at("train");
    auto& t = c.train;
    if (tj.contains("optimizer")) optim_from(tj.at("optimizer"), t.optim);
    read(tj, "iterations", t.iterations);
    read(tj, "warmup", t.warmup);
    read(tj, "poly_power", t.poly_power);
    read(tj, "batch_size", t.batch_size);
    read(tj, "crop", t.crop);
    read(tj, "seed", t.seed);
    read(tj, "aux_weight", t.aux_weight);
    read(tj, "eval_interval", t.eval_interval);
    read(tj, "stop_at_miou", t.stop_at_miou);
    if (tj.contains("crop") && !(tj.contains("augment") && tj.at("augment").contains("crop"))) t.augment.crop = t.crop;
    if (tj.contains("augment")) augment_from(tj.at("augment"), t.augment);
    if (tj.contains("eval")) eval_from(tj.at("eval"), t.eval);
    read(tj, "dataset_root", t.dataset_root);
    read(tj, "val_split", t.val_split);
    read(tj, "output_dir", t.output_dir);
    read(tj, "pretrained", t.pretrained);
    read(tj, "pretrained_prefix", t.pretrained_prefix);
  }
  c.train.augment.normalization = c.model.normalization;
  c.validate();
  return c;
}

std::string to_json(const PretrainConfig& c) {
  json j = {{"model", mim_json(c.model)},         {"optimizer", optim_json(c.optim)}, {"iterations", c.iterations},
            {"warmup", c.warmup},                 {"batch_size", c.batch_size},       {"seed", c.seed},
            {"image_root", c.image_root},         {"tokenizer", c.tokenizer},         {"output_dir", c.output_dir},
            {"checkpoint_interval", c.checkpoint_interval}};
  return j.dump(2);
}

PretrainConfig pretrain_config_from_json(const std::string& text) {
  const json j = parse(text);
  PretrainConfig c;
  if (j.contains("preset")) {
    const auto p = j.at("preset").get<std::string>();
    if (p == "toy") c = PretrainConfig::toy();
    else if (p == "large") c = PretrainConfig::large();
    else throw std::invalid_argument("unknown preset '" + p + "'");
  }
  if (j.contains("model")) mim_from(j.at("model"), c.model);
  if (j.contains("optimizer")) optim_from(j.at("optimizer"), c.optim);
  read(j, "iterations", c.iterations);
  read(j, "warmup", c.warmup);
  read(j, "batch_size", c.batch_size);
  read(j, "seed", c.seed);
  read(j, "image_root", c.image_root);
  read(j, "tokenizer", c.tokenizer);
  read(j, "output_dir", c.output_dir);
  read(j, "checkpoint_interval", c.checkpoint_interval);
  c.validate();
  return c;
}

std::string to_json(const TokenizerTrainConfig& c) {
  json j = {{"model", tok_json(c.model)},   {"teacher", vit_json(c.teacher)}, {"teacher_seed", c.teacher_seed},
            {"optimizer", optim_json(c.optim)}, {"iterations", c.iterations}, {"warmup", c.warmup},
            {"batch_size", c.batch_size},   {"seed", c.seed},                 {"image_root", c.image_root},
            {"output_dir", c.output_dir}};
  return j.dump(2);
}

TokenizerTrainConfig tokenizer_config_from_json(const std::string& text) {
  const json j = parse(text);
  TokenizerTrainConfig c = TokenizerTrainConfig::toy();
  if (j.contains("preset")) {
    const auto p = j.at("preset").get<std::string>();
    if (p == "toy") c = TokenizerTrainConfig::toy();
    else if (p == "base") c = TokenizerTrainConfig::base();
    else throw std::invalid_argument("unknown preset '" + p + "'");
  }
  if (j.contains("model")) tok_from(j.at("model"), c.model);
  if (j.contains("teacher")) vit_from(j.at("teacher"), c.teacher);
  read(j, "teacher_seed", c.teacher_seed);
  if (j.contains("optimizer")) optim_from(j.at("optimizer"), c.optim);
  read(j, "iterations", c.iterations);
  read(j, "warmup", c.warmup);
  read(j, "batch_size", c.batch_size);
  read(j, "seed", c.seed);
  read(j, "image_root", c.image_root);
  read(j, "output_dir", c.output_dir);
  c.validate();
  return c;
}

std::string to_json(const SegModelConfig& c) { return seg_json(c).dump(); }
std::string to_json(const MimConfig& c) { return mim_json(c).dump(); }
std::string to_json(const TokenizerConfig& c) { return tok_json(c).dump(); }

SegModelConfig seg_model_config_from_json(const std::string& text) {
  SegModelConfig c;
  seg_from(parse(text), c);
  c.validate();
  return c;
}

MimConfig mim_config_from_json(const std::string& text) {
  MimConfig c;
  mim_from(parse(text), c);
  c.validate();
  return c;
}

TokenizerConfig tokenizer_model_config_from_json(const std::string& text) {
  TokenizerConfig c;
  tok_from(parse(text), c);
  c.validate();
  return c;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

}  // namespace segkit
