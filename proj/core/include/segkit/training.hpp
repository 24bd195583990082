#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "segkit/checkpoint.hpp"
#include "segkit/config.hpp"

namespace segkit {

struct MetricRow {
  std::int64_t iteration = 0;  // 1-based
  double loss = 0.0;
  double lr = 0.0;
  double val_miou = 0.0;  // NaN on iterations without evaluation
};

/// CSV with header iteration,loss,lr,val_miou; missing mIoU values are empty.
std::string metrics_csv(const std::vector<MetricRow>& rows);

struct FinetuneResult {
  std::vector<MetricRow> log;
  double best_miou;
  std::int64_t best_iteration = -1;
};

using MetricFn = std::function<void(const MetricRow&)>;

/// Augmented mini-batches, seg_loss with the auxiliary head, AdamW under the
/// warmup + poly schedule. Evaluates `val` every eval_interval iterations and
/// at the end. With a non-empty `out_dir`, writes run_manifest.json,
/// metrics.csv, best.ckpt (best validation mIoU) and last.ckpt.
FinetuneResult finetune(SegmentationModel& model, const RunConfig& config, const DatasetManifest& train,
                        const DatasetManifest* val, const std::filesystem::path& out_dir = {}, const MetricFn& progress = {});

/// Resolved configuration plus the parameter count and inference mode.
std::string run_manifest(const RunConfig& config, std::int64_t parameter_count);

void save_segmentation_model(const std::filesystem::path& path, const SegmentationModel& model,
                             const std::string& extra_meta = "{}");
std::unique_ptr<SegmentationModel> load_segmentation_model(const std::filesystem::path& path);

void save_tokenizer(const std::filesystem::path& path, const VqkdTokenizer& tokenizer);
std::unique_ptr<VqkdTokenizer> load_tokenizer(const std::filesystem::path& path);

void save_mim_model(const std::filesystem::path& path, const MimModel& model);

/// Every image of a folder, resized to size x size.
std::vector<Tensor> load_folder_images(const ImageFolder& folder, int size);

struct TokenizerLogRow {
  std::int64_t step = 0;
  double loss = 0.0;
  double reconstruction = 0.0;
  double commitment = 0.0;
  double lr = 0.0;
  std::int64_t batch_codes = 0;  // distinct codes assigned in the batch
};
std::string tokenizer_log_csv(const std::vector<TokenizerLogRow>& rows);

/// Seeds the codebook from the data, then runs vqkd_train_step for the configured iterations.
std::vector<TokenizerLogRow> train_tokenizer(VqkdTokenizer& tokenizer, const TeacherAdapter& teacher,
                                             const std::vector<Tensor>& images, const TokenizerTrainConfig& config,
                                             const std::function<void(const TokenizerLogRow&)>& progress = {});

/// Fraction of codes assigned at least once when tokenizing `images`.
double codebook_usage(const VqkdTokenizer& tokenizer, const std::vector<Tensor>& images);

struct PretrainLogRow {
  std::int64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
};
std::string pretrain_log_csv(const std::vector<PretrainLogRow>& rows);

std::vector<PretrainLogRow> pretrain(MimModel& model, const TokenTargetSource& targets, const std::vector<Tensor>& images,
                                     const PretrainConfig& config,
                                     const std::function<void(const PretrainLogRow&)>& progress = {});

/// Mean of the `window` values ending at index `end` (inclusive, 0-based).
double running_mean(const std::vector<double>& values, std::size_t end, std::size_t window = 10);

}  // namespace segkit
