#include "segkit/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace segkit {

ConfusionMatrix::ConfusionMatrix(std::int64_t num_classes)
    : classes_(num_classes), counts_(static_cast<std::size_t>(num_classes * num_classes), 0) {
  if (num_classes < 0) throw std::invalid_argument("ConfusionMatrix: negative class count");
}

std::int64_t ConfusionMatrix::at(std::int64_t gt, std::int64_t pred) const {
  return counts_[static_cast<std::size_t>(gt * classes_ + pred)];
}

std::int64_t& ConfusionMatrix::at(std::int64_t gt, std::int64_t pred) {
  return counts_[static_cast<std::size_t>(gt * classes_ + pred)];
}

std::int64_t ConfusionMatrix::total() const {
  std::int64_t t = 0;
  for (auto v : counts_) t += v;
  return t;
}

std::int64_t ConfusionMatrix::row_sum(std::int64_t c) const {
  std::int64_t s = 0;
  for (std::int64_t p = 0; p < classes_; ++p) s += at(c, p);
  return s;
}

std::int64_t ConfusionMatrix::col_sum(std::int64_t c) const {
  std::int64_t s = 0;
  for (std::int64_t g = 0; g < classes_; ++g) s += at(g, c);
  return s;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.classes_ != classes_) throw std::invalid_argument("ConfusionMatrix: class counts differ");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  return *this;
}

void confusion_update(ConfusionMatrix& matrix, const Mask& pred, const Mask& gt) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw std::invalid_argument("confusion_update: prediction " + std::to_string(pred.height) + "x" +
                                std::to_string(pred.width) + " vs ground truth " + std::to_string(gt.height) + "x" +
                                std::to_string(gt.width));
  }
  const auto c = matrix.num_classes();
  for (std::size_t i = 0; i < gt.labels.size(); ++i) {
    const auto g = gt.labels[i], p = pred.labels[i];
    if (g < 0 || g >= c || p < 0 || p >= c) throw std::out_of_range("confusion_update: label outside [0, C)");
    ++matrix.at(g, p);
  }
}

const std::vector<ReferenceResult>& reference_results() {
  static const std::vector<ReferenceResult> rows = {
      {"BEiT v2 Large", "441M", 49.4}, {"InternImage-B", "128M", 41.1}, {"SeTR-MLA", "711M", 45.1},
      {"SeTR-Naive", "723M", 43.9},    {"Swin-S", "931M", 41.6},        {"CCNet", "381M", 35.5},
  };
  return rows;
}

EvalReport miou(const ConfusionMatrix& matrix, bool exclude_background) {
  if (matrix.total() <= 0) throw std::invalid_argument("miou: empty confusion matrix");
  const auto c = matrix.num_classes();
  EvalReport r;
  r.exclude_background = exclude_background;
  r.iou.assign(static_cast<std::size_t>(c), std::numeric_limits<double>::quiet_NaN());
  r.gt_pixels.resize(static_cast<std::size_t>(c));
  double sum_all = 0.0, sum_fg = 0.0;
  int n_all = 0, n_fg = 0;
  for (std::int64_t k = 0; k < c; ++k) {
    const auto row = matrix.row_sum(k), col = matrix.col_sum(k), tp = matrix.at(k, k);
    r.gt_pixels[static_cast<std::size_t>(k)] = row;
    if (row + col == 0) continue;
    const double iou = static_cast<double>(tp) / static_cast<double>(row + col - tp);
    r.iou[static_cast<std::size_t>(k)] = iou;
    sum_all += iou;
    ++n_all;
    if (k != 0) {
      sum_fg += iou;
      ++n_fg;
    }
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  const double all = n_all ? sum_all / n_all : nan;
  r.miou_without_background = n_fg ? sum_fg / n_fg : nan;
  r.miou = exclude_background ? r.miou_without_background : all;
  return r;
}

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os << std::setprecision(6);
  os << "class_id,name,iou,gt_pixels";
  if (frequency) os << ",train_images,long_tail";
  os << '\n';
  for (std::size_t k = 0; k < iou.size(); ++k) {
    os << k << ',' << (k < class_names.size() ? class_names[k] : "class_" + std::to_string(k)) << ',';
    if (std::isnan(iou[k])) os << "nan";
    else os << iou[k];
    os << ',' << gt_pixels[k];
    if (frequency) {
      const auto& f = frequency->classes.at(k);
      os << ',' << f.train_images << ',' << (f.long_tail ? 1 : 0);
    }
    os << '\n';
  }
  return os.str();
}

std::string EvalReport::summary() const {
  auto mean_of = [&](bool want_tail) {
    double s = 0.0;
    int n = 0;
    for (std::size_t k = 1; k < iou.size(); ++k) {
      if (std::isnan(iou[k]) || frequency->classes.at(k).long_tail != want_tail) continue;
      s += iou[k];
      ++n;
    }
    return std::make_pair(n ? s / n : std::numeric_limits<double>::quiet_NaN(), n);
  };
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "mIoU (" << (exclude_background ? "foreground classes" : "all classes") << "): " << miou << '\n';
  os << "mIoU excluding background: " << miou_without_background << '\n';
  if (frequency) {
    const auto [tail, nt] = mean_of(true);
    const auto [head, nh] = mean_of(false);
    os << "long-tail classes (<= " << frequency->long_tail_threshold << " train images): " << nt << ", mean IoU " << tail << '\n';
    os << "other foreground classes: " << nh << ", mean IoU " << head << '\n';
  }
  os << std::setprecision(1) << "reference results at full scale (mIoU %):\n";
  for (const auto& r : reference_results()) os << "  " << r.model << " (" << r.params << "): " << r.miou << '\n';
  return os.str();
}

std::vector<std::int64_t> window_origins(std::int64_t size, int crop, int stride) {
  if (crop <= 0 || stride <= 0 || stride > crop) throw std::invalid_argument("window_origins: need 0 < stride <= crop");
  if (size <= crop) return {0};
  const auto grids = (size - crop + stride - 1) / stride + 1;
  std::vector<std::int64_t> out;
  for (std::int64_t i = 0; i < grids; ++i) out.push_back(std::min<std::int64_t>(i * stride, size - crop));
  return out;
}

namespace {

Tensor pad_image(const Tensor& image, std::int64_t h, std::int64_t w, double value) {
  if (image.dim(0) == h && image.dim(1) == w) return image;
  Tensor out(Shape{h, w, image.dim(2)}, value);
  const auto c = image.dim(2);
  for (std::int64_t y = 0; y < image.dim(0); ++y) {
    std::copy_n(image.data() + y * image.dim(1) * c, image.dim(1) * c, out.data() + y * w * c);
  }
  return out;
}

Tensor crop_map(const Tensor& map, std::int64_t y0, std::int64_t x0, std::int64_t h, std::int64_t w) {
  const auto c = map.dim(2), mw = map.dim(1);
  Tensor out(Shape{h, w, c});
  for (std::int64_t y = 0; y < h; ++y) std::copy_n(map.data() + ((y0 + y) * mw + x0) * c, w * c, out.data() + y * w * c);
  return out;
}

}  // namespace

Tensor sliding_logits(const LogitFn& logits, const Tensor& image, int crop, int stride, double pad_value) {
  if (image.rank() != 3) throw std::invalid_argument("sliding_logits: expected [H, W, 3]");
  const auto h = image.dim(0), w = image.dim(1);
  const auto ph = std::max<std::int64_t>(h, crop), pw = std::max<std::int64_t>(w, crop);
  const Tensor padded = pad_image(image, ph, pw, pad_value);
  Tensor sum;
  std::vector<int> cover(static_cast<std::size_t>(ph * pw), 0);
  for (auto y0 : window_origins(ph, crop, stride)) {
    for (auto x0 : window_origins(pw, crop, stride)) {
      const Tensor out = logits(crop_map(padded, y0, x0, crop, crop));
      if (out.rank() != 3 || out.dim(0) != crop || out.dim(1) != crop) throw std::runtime_error("sliding_logits: bad window output");
      const auto c = out.dim(2);
      if (sum.empty()) sum = Tensor(Shape{ph, pw, c});
      for (std::int64_t y = 0; y < crop; ++y) {
        for (std::int64_t x = 0; x < crop; ++x) {
          const auto p = (y0 + y) * pw + x0 + x;
          ++cover[static_cast<std::size_t>(p)];
          const double* src = out.data() + (y * crop + x) * c;
          double* dst = sum.data() + p * c;
          for (std::int64_t k = 0; k < c; ++k) dst[k] += src[k];
        }
      }
    }
  }
  const auto c = sum.dim(2);
  for (std::int64_t p = 0; p < ph * pw; ++p) {
    const double inv = 1.0 / cover[static_cast<std::size_t>(p)];
    for (std::int64_t k = 0; k < c; ++k) sum.data()[p * c + k] *= inv;
  }
  return crop_map(sum, 0, 0, h, w);
}

Tensor whole_logits(const LogitFn& logits, const Tensor& image, int multiple, double pad_value) {
  const auto h = image.dim(0), w = image.dim(1);
  const auto ph = (h + multiple - 1) / multiple * multiple, pw = (w + multiple - 1) / multiple * multiple;
  return crop_map(logits(pad_image(image, ph, pw, pad_value)), 0, 0, h, w);
}

namespace {

LogitFn model_fn(const SegmentationModel& model) {
  return [&model](const Tensor& x) { return model.predict_logits(x); };
}

}  // namespace

Mask predict_sliding(const SegmentationModel& model, const Tensor& image, int crop, int stride) {
  if (crop % model.size_multiple() != 0) {
    throw std::invalid_argument("predict_sliding: crop must be a multiple of " + std::to_string(model.size_multiple()));
  }
  return argmax_mask(sliding_logits(model_fn(model), image, crop, stride));
}

ConfusionMatrix confusion_over(const SegmentationModel& model, const DatasetManifest& manifest, const EvalOptions& options) {
  if (model.num_classes() != manifest.num_classes) {
    throw std::invalid_argument("evaluate: model predicts " + std::to_string(model.num_classes()) + " classes, dataset has " +
                                std::to_string(manifest.num_classes));
  }
  ConfusionMatrix m(manifest.num_classes);
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    const auto s = manifest.load(i);
    const Mask pred = options.mode == InferenceMode::Sliding
                          ? predict_sliding(model, s.image.pixels, options.crop, options.stride)
                          : argmax_mask(whole_logits(model_fn(model), s.image.pixels, model.size_multiple()));
    confusion_update(m, pred, s.mask);
  }
  return m;
}

EvalReport evaluate_dataset(const SegmentationModel& model, const DatasetManifest& manifest, const EvalOptions& options,
                            const std::optional<ClassFrequencyReport>& frequency) {
  EvalReport r = miou(confusion_over(model, manifest, options), options.exclude_background);
  r.class_names = manifest.class_names;
  r.frequency = frequency;
  return r;
}

}  // namespace segkit
