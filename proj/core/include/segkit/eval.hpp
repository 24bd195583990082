#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "segkit/dataset.hpp"
#include "segkit/segmentation.hpp"

namespace segkit {

/// C x C pixel counts, rows = ground truth, columns = prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::int64_t num_classes = 0);

  std::int64_t num_classes() const { return classes_; }
  std::int64_t at(std::int64_t gt, std::int64_t pred) const;
  std::int64_t& at(std::int64_t gt, std::int64_t pred);
  std::int64_t total() const;
  std::int64_t row_sum(std::int64_t c) const;
  std::int64_t col_sum(std::int64_t c) const;

  ConfusionMatrix& operator+=(const ConfusionMatrix& other);
  friend ConfusionMatrix operator+(ConfusionMatrix a, const ConfusionMatrix& b) { return a += b; }
  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::int64_t classes_ = 0;
  std::vector<std::int64_t> counts_;
};

void confusion_update(ConfusionMatrix& matrix, const Mask& pred, const Mask& gt);

/// Full-scale reference results shipped for side-by-side reporting.
struct ReferenceResult {
  std::string model;
  std::string params;
  double miou;
};
const std::vector<ReferenceResult>& reference_results();

struct EvalReport {
  double miou = 0.0;                 // over included classes
  double miou_without_background = 0.0;
  bool exclude_background = false;  // which of the two `miou` holds
  std::vector<double> iou;           // NaN for classes absent from gt and prediction
  std::vector<std::int64_t> gt_pixels;
  std::vector<std::string> class_names;
  std::optional<ClassFrequencyReport> frequency;

  std::int64_t num_classes() const { return static_cast<std::int64_t>(iou.size()); }
  /// One row per class: class_id,name,iou,gt_pixels[,train_images,long_tail].
  std::string to_csv() const;
  /// Headline numbers, long-tail comparison and reference rows.
  std::string summary() const;
};

/// IoU_c = M[c][c] / (row_c + col_c - M[c][c]); classes with row_c + col_c = 0
/// are left out of the mean, as is class 0 when `exclude_background` is set.
EvalReport miou(const ConfusionMatrix& matrix, bool exclude_background = false);

/// Window origins covering [0, size) with the last window flush to the end.
std::vector<std::int64_t> window_origins(std::int64_t size, int crop, int stride);

using LogitFn = std::function<Tensor(const Tensor&)>;

/// Averages crop x crop window logits over every covered pixel. Inputs smaller
/// than the crop are padded with `pad_value` and cropped back.
Tensor sliding_logits(const LogitFn& logits, const Tensor& image, int crop, int stride, double pad_value = 0.5);
/// One forward on the image padded up to a multiple of `multiple`.
Tensor whole_logits(const LogitFn& logits, const Tensor& image, int multiple, double pad_value = 0.5);

Mask predict_sliding(const SegmentationModel& model, const Tensor& image, int crop, int stride);

enum class InferenceMode { Sliding, Whole };

struct EvalOptions {
  InferenceMode mode = InferenceMode::Sliding;
  int crop = 512;
  int stride = 341;  // two thirds of the crop
  bool exclude_background = false;
};

ConfusionMatrix confusion_over(const SegmentationModel& model, const DatasetManifest& manifest, const EvalOptions& options);
EvalReport evaluate_dataset(const SegmentationModel& model, const DatasetManifest& manifest, const EvalOptions& options,
                            const std::optional<ClassFrequencyReport>& frequency = std::nullopt);

}  // namespace segkit
