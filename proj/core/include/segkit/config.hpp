#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "segkit/dataset.hpp"
#include "segkit/eval.hpp"
#include "segkit/mim.hpp"
#include "segkit/optim.hpp"
#include "segkit/segmentation.hpp"
#include "segkit/vqkd.hpp"

namespace segkit {

/// Fine-tuning hyperparameters.
struct TrainConfig {
  AdamWConfig optim{1e-3, 0.0, 0.9, 0.999, 1e-8};
  std::int64_t iterations = 2000;
  std::int64_t warmup = 50;
  double poly_power = 0.9;
  int batch_size = 8;
  int crop = 64;
  std::uint64_t seed = 1;
  double aux_weight = 0.4;
  std::int64_t eval_interval = 100;
  /// Stop once validation mIoU reaches this value; 0 disables early stopping.
  double stop_at_miou = 0.0;
  AugmentConfig augment;
  EvalOptions eval;
  std::string dataset_root;
  std::string val_split = "test";
  std::string output_dir;
  /// Optional checkpoint whose `pretrained_prefix` arrays initialize the backbone.
  std::string pretrained;
  std::string pretrained_prefix = "encoder.";

  void validate() const;
};

struct RunConfig {
  TrainConfig train;
  SegModelConfig model;

  void validate() const;
  /// 64x64 synthetic data, tiny backbone, 2000 iterations.
  static RunConfig toy(BackboneKind backbone);
  /// ViT-L/16 + UperNet: lr 3e-5, wd 0.05, 160k iterations, 512 crops, 104 classes.
  static RunConfig beit_large_foodseg();
  /// Base DCN backbone + UperNet: lr 6e-5, no weight decay, 160k iterations, 512 crops.
  static RunConfig internimage_base_foodseg();
};

/// Masked-image-modeling pretraining run.
struct PretrainConfig {
  MimConfig model = MimConfig::toy();
  AdamWConfig optim{1.5e-3, 0.05, 0.9, 0.999, 1e-8};
  std::int64_t iterations = 500;
  std::int64_t warmup = 20;
  int batch_size = 8;
  std::uint64_t seed = 1;
  std::string image_root;
  std::string tokenizer;
  std::string output_dir;
  std::int64_t checkpoint_interval = 0;

  void validate() const;
  static PretrainConfig toy();
  /// ViT-L/16 at 224x224, 40% masking, K=8192.
  static PretrainConfig large();
};

/// Tokenizer training run with a frozen random-ViT teacher.
struct TokenizerTrainConfig {
  TokenizerConfig model = TokenizerConfig::toy();
  ViTConfig teacher;
  std::uint64_t teacher_seed = 7;
  AdamWConfig optim{2e-3, 0.0, 0.9, 0.99, 1e-8};
  std::int64_t iterations = 500;
  std::int64_t warmup = 10;
  int batch_size = 8;
  std::uint64_t seed = 1;
  std::string image_root;
  std::string output_dir;

  void validate() const;
  static TokenizerTrainConfig toy();
  static TokenizerTrainConfig base();
};

std::string to_json(const RunConfig& config);
std::string to_json(const PretrainConfig& config);
std::string to_json(const TokenizerTrainConfig& config);
std::string to_json(const SegModelConfig& config);
std::string to_json(const MimConfig& config);
std::string to_json(const TokenizerConfig& config);

/// Keys absent from the text keep the preset values. A "preset" key selects
/// the starting preset: toy_vit, toy_dcn, beit_large, internimage_base for runs.
RunConfig run_config_from_json(const std::string& text);
PretrainConfig pretrain_config_from_json(const std::string& text);
TokenizerTrainConfig tokenizer_config_from_json(const std::string& text);
SegModelConfig seg_model_config_from_json(const std::string& text);
MimConfig mim_config_from_json(const std::string& text);
TokenizerConfig tokenizer_model_config_from_json(const std::string& text);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace segkit
