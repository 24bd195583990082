#include "segkit/training.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace segkit {

using nlohmann::json;

namespace {

/// Endless shuffled epochs over [0, n).
class IndexStream {
 public:
  IndexStream(std::size_t n, Rng& rng) : order_(n), rng_(&rng) { std::iota(order_.begin(), order_.end(), 0); }
  std::size_t next() {
    if (pos_ == 0) std::shuffle(order_.begin(), order_.end(), *rng_);
    const auto v = order_[pos_];
    pos_ = (pos_ + 1) % order_.size();
    return v;
  }

 private:
  std::vector<std::size_t> order_;
  Rng* rng_;
  std::size_t pos_ = 0;
};

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

}  // namespace

std::string metrics_csv(const std::vector<MetricRow>& rows) {
  std::ostringstream os;
  os << "iteration,loss,lr,val_miou\n";
  for (const auto& r : rows) {
    os << r.iteration << ',' << fmt(r.loss) << ',' << fmt(r.lr) << ',';
    if (!std::isnan(r.val_miou)) os << fmt(r.val_miou);
    os << '\n';
  }
  return os.str();
}

std::string run_manifest(const RunConfig& config, std::int64_t parameter_count) {
  json j = json::parse(to_json(config));
  j["parameter_count"] = parameter_count;
  j["inference_mode"] = config.train.eval.mode == InferenceMode::Sliding ? "sliding" : "whole";
  j["lr_schedule"] = {{"type", "linear warmup + poly"}, {"warmup", config.train.warmup}, {"power", config.train.poly_power}};
  return j.dump(2);
}

void save_segmentation_model(const std::filesystem::path& path, const SegmentationModel& model,
                             const std::string& extra_meta) {
  Archive a;
  json meta = json::parse(extra_meta);
  meta["kind"] = "segmentation";
  meta["model"] = json::parse(to_json(model.config()));
  a.meta = meta.dump();
  store_parameters(a, model.parameters());
  save_archive(path, a);
}

std::unique_ptr<SegmentationModel> load_segmentation_model(const std::filesystem::path& path) {
  const Archive a = load_archive(path);
  const json meta = json::parse(a.meta);
  if (meta.value("kind", "") != "segmentation") throw std::runtime_error(path.string() + " is not a segmentation checkpoint");
  auto model = std::make_unique<SegmentationModel>(seg_model_config_from_json(meta.at("model").dump()), 0);
  load_parameters(model->parameters(), a, "", "", true);
  return model;
}

void save_tokenizer(const std::filesystem::path& path, const VqkdTokenizer& tokenizer) {
  Archive a;
  a.meta = json{{"kind", "tokenizer"}, {"model", json::parse(to_json(tokenizer.config()))}}.dump();
  store_parameters(a, tokenizer.parameters());
  const auto& cb = tokenizer.codebook();
  a.arrays["codebook.codes"] = cb.codes;
  a.arrays["codebook.ema_count"] = cb.ema_count;
  a.arrays["codebook.ema_sum"] = cb.ema_sum;
  Tensor idle(Shape{static_cast<std::int64_t>(cb.idle.size())});
  for (std::size_t i = 0; i < cb.idle.size(); ++i) idle[i] = static_cast<double>(cb.idle[i]);
  a.arrays["codebook.idle"] = idle;
  save_archive(path, a);
}

std::unique_ptr<VqkdTokenizer> load_tokenizer(const std::filesystem::path& path) {
  const Archive a = load_archive(path);
  const json meta = json::parse(a.meta);
  if (meta.value("kind", "") != "tokenizer") throw std::runtime_error(path.string() + " is not a tokenizer checkpoint");
  auto tok = std::make_unique<VqkdTokenizer>(tokenizer_model_config_from_json(meta.at("model").dump()), 0);
  load_parameters(tok->parameters(), a, "", "", true);
  auto& cb = tok->codebook();
  cb.codes = a.arrays.at("codebook.codes");
  cb.ema_count = a.arrays.at("codebook.ema_count");
  cb.ema_sum = a.arrays.at("codebook.ema_sum");
  const auto& idle = a.arrays.at("codebook.idle");
  cb.idle.resize(idle.size());
  for (std::size_t i = 0; i < idle.size(); ++i) cb.idle[i] = static_cast<std::int64_t>(idle[i]);
  return tok;
}

void save_mim_model(const std::filesystem::path& path, const MimModel& model) {
  Archive a;
  a.meta = json{{"kind", "mim"}, {"model", json::parse(to_json(model.config()))}}.dump();
  store_parameters(a, model.parameters());
  save_archive(path, a);
}

FinetuneResult finetune(SegmentationModel& model, const RunConfig& config, const DatasetManifest& train,
                        const DatasetManifest* val, const std::filesystem::path& out_dir, const MetricFn& progress) {
  config.validate();
  const auto& tc = config.train;
  if (train.num_classes != model.num_classes()) {
    throw std::invalid_argument("finetune: dataset has " + std::to_string(train.num_classes) + " classes but the head predicts " +
                                std::to_string(model.num_classes()));
  }
  if (val && val->num_classes != model.num_classes()) throw std::invalid_argument("finetune: validation class count differs");
  if (train.size() == 0) throw std::invalid_argument("finetune: empty training split");
  if (tc.crop % model.size_multiple() != 0) {
    throw std::invalid_argument("finetune: crop " + std::to_string(tc.crop) + " is not a multiple of " +
                                std::to_string(model.size_multiple()));
  }
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    write_text_file(out_dir / "run_manifest.json", run_manifest(config, model.parameters().count()));
  }
  AugmentConfig aug = tc.augment;
  aug.crop = tc.crop;
  aug.normalization = model.config().normalization;
  AdamW opt(model.parameters(), tc.optim);
  const LrSchedule schedule{tc.optim.lr, tc.warmup, tc.iterations, tc.poly_power};
  Rng rng(tc.seed);
  IndexStream stream(train.size(), rng);
  const double inv = 1.0 / tc.batch_size;

  FinetuneResult result;
  result.best_miou = std::numeric_limits<double>::quiet_NaN();
  for (std::int64_t it = 0; it < tc.iterations; ++it) {
    model.parameters().zero_grad();
    double loss_sum = 0.0;
    for (int b = 0; b < tc.batch_size; ++b) {
      const auto sample = augment(train.load(stream.next()), aug, rng);
      const auto out = model.forward(sample.image.pixels, &rng);
      const Var loss = seg_loss(out.logits, sample.mask, out.aux, tc.aux_weight);
      const double v = loss.value().item();
      if (!std::isfinite(v)) throw std::runtime_error("finetune: non-finite loss at iteration " + std::to_string(it + 1));
      ops::scale(loss, inv).backward();
      loss_sum += v;
    }
    const double lr = schedule.at(it);
    opt.step(lr);
    MetricRow row{it + 1, loss_sum * inv, lr, std::numeric_limits<double>::quiet_NaN()};
    const bool eval_now = val && ((tc.eval_interval > 0 && (it + 1) % tc.eval_interval == 0) || it + 1 == tc.iterations);
    if (eval_now) {
      row.val_miou = miou(confusion_over(model, *val, tc.eval), tc.eval.exclude_background).miou;
      if (std::isnan(result.best_miou) || row.val_miou > result.best_miou) {
        result.best_miou = row.val_miou;
        result.best_iteration = row.iteration;
        if (!out_dir.empty()) save_segmentation_model(out_dir / "best.ckpt", model, json{{"iteration", row.iteration}, {"val_miou", row.val_miou}}.dump());
      }
    }
    result.log.push_back(row);
    if (progress) progress(row);
    if (eval_now && !out_dir.empty()) write_text_file(out_dir / "metrics.csv", metrics_csv(result.log));
    if (eval_now && tc.stop_at_miou > 0.0 && row.val_miou >= tc.stop_at_miou) break;
  }
  if (!out_dir.empty()) {
    write_text_file(out_dir / "metrics.csv", metrics_csv(result.log));
    save_segmentation_model(out_dir / "last.ckpt", model, json{{"iteration", result.log.back().iteration}}.dump());
  }
  return result;
}

std::vector<Tensor> load_folder_images(const ImageFolder& folder, int size) {
  std::vector<Tensor> out;
  for (const auto& p : folder.images) {
    Image img = read_image(p);
    if (img.height() != size || img.width() != size) img = resize_image(img, size, size);
    out.push_back(std::move(img.pixels));
  }
  return out;
}

std::string tokenizer_log_csv(const std::vector<TokenizerLogRow>& rows) {
  std::ostringstream os;
  os << "step,loss,reconstruction,commitment,lr,batch_codes\n";
  for (const auto& r : rows) {
    os << r.step << ',' << fmt(r.loss) << ',' << fmt(r.reconstruction) << ',' << fmt(r.commitment) << ',' << fmt(r.lr)
       << ',' << r.batch_codes << '\n';
  }
  return os.str();
}

std::vector<TokenizerLogRow> train_tokenizer(VqkdTokenizer& tokenizer, const TeacherAdapter& teacher,
                                             const std::vector<Tensor>& images, const TokenizerTrainConfig& config,
                                             const std::function<void(const TokenizerLogRow&)>& progress) {
  config.validate();
  if (images.empty()) throw std::invalid_argument("train_tokenizer: no images");
  Rng rng(config.seed);
  tokenizer.init_codebook_from(images, rng);
  AdamW opt(tokenizer.parameters(), config.optim);
  const LrSchedule schedule{config.optim.lr, config.warmup, config.iterations, 1.0};
  IndexStream stream(images.size(), rng);
  std::vector<TokenizerLogRow> log;
  std::vector<Tensor> batch(static_cast<std::size_t>(config.batch_size));
  for (std::int64_t it = 0; it < config.iterations; ++it) {
    for (auto& b : batch) b = images[stream.next()];
    const double lr = schedule.at(it);
    const auto r = vqkd_train_step(tokenizer, batch, teacher, opt, lr, rng);
    const std::set<std::int32_t> used(r.assignments.begin(), r.assignments.end());
    TokenizerLogRow row{it + 1, r.loss.total, r.loss.reconstruction, r.loss.commitment, lr,
                        static_cast<std::int64_t>(used.size())};
    log.push_back(row);
    if (progress) progress(row);
  }
  return log;
}

double codebook_usage(const VqkdTokenizer& tokenizer, const std::vector<Tensor>& images) {
  std::set<std::int32_t> used;
  for (const auto& img : images) {
    const auto t = tokenizer.tokenize(img);
    used.insert(t.codes.begin(), t.codes.end());
  }
  return static_cast<double>(used.size()) / static_cast<double>(tokenizer.codebook().size());
}

std::string pretrain_log_csv(const std::vector<PretrainLogRow>& rows) {
  std::ostringstream os;
  os << "step,loss,lr\n";
  for (const auto& r : rows) os << r.step << ',' << fmt(r.loss) << ',' << fmt(r.lr) << '\n';
  return os.str();
}

std::vector<PretrainLogRow> pretrain(MimModel& model, const TokenTargetSource& targets, const std::vector<Tensor>& images,
                                     const PretrainConfig& config,
                                     const std::function<void(const PretrainLogRow&)>& progress) {
  config.validate();
  if (images.empty()) throw std::invalid_argument("pretrain: no images");
  Rng rng(config.seed);
  AdamW opt(model.parameters(), config.optim);
  const LrSchedule schedule{config.optim.lr, config.warmup, config.iterations, 1.0};
  IndexStream stream(images.size(), rng);
  std::vector<PretrainLogRow> log;
  std::vector<Tensor> batch(static_cast<std::size_t>(config.batch_size));
  for (std::int64_t it = 0; it < config.iterations; ++it) {
    for (auto& b : batch) b = images[stream.next()];
    const double lr = schedule.at(it);
    PretrainLogRow row{it + 1, pretrain_step(model, batch, targets, opt, lr, rng), lr};
    log.push_back(row);
    if (progress) progress(row);
    if (!config.output_dir.empty() && config.checkpoint_interval > 0 && (it + 1) % config.checkpoint_interval == 0) {
      save_mim_model(std::filesystem::path(config.output_dir) / ("mim_" + std::to_string(it + 1) + ".ckpt"), model);
    }
  }
  return log;
}

double running_mean(const std::vector<double>& values, std::size_t end, std::size_t window) {
  if (end >= values.size() || window == 0) throw std::out_of_range("running_mean: index outside the series");
  const std::size_t begin = end + 1 >= window ? end + 1 - window : 0;
  double s = 0.0;
  for (std::size_t i = begin; i <= end; ++i) s += values[i];
  return s / static_cast<double>(end + 1 - begin);
}

}  // namespace segkit
