#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "segkit/render.hpp"
#include "segkit/training.hpp"

namespace fs = std::filesystem;
using namespace segkit;

namespace {

void emit(const std::string& csv, const std::string& path) {
  if (path.empty()) std::cout << csv;
  else write_text_file(path, csv);
}

Tensor load_for_tokenizer(const fs::path& path, int size) {
  Image img = read_image(path);
  if (img.height() != size || img.width() != size) {
    throw std::invalid_argument(path.string() + " is " + std::to_string(img.height()) + "x" + std::to_string(img.width()) +
                                "; the tokenizer expects " + std::to_string(size) + "x" + std::to_string(size) +
                                " (use --resize)");
  }
  return img.pixels;
}

RunConfig finetune_config(const std::string& path, const std::string& backbone) {
  auto j = nlohmann::json::parse(read_text_file(path));
  if (!backbone.empty()) {
    if (j.contains("preset")) {
      const auto p = j.at("preset").get<std::string>();
      const bool preset_dcn = p == "toy_dcn" || p == "internimage_base";
      if (preset_dcn != (parse_backbone(backbone) == BackboneKind::DCN)) {
        throw std::invalid_argument("--backbone " + backbone + " conflicts with preset " + p);
      }
    } else {
      j["model"]["backbone"] = backbone;
    }
  }
  return run_config_from_json(j.dump());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"segkit: food segmentation toolkit (ViT + MIM + VQ-KD, DCN backbone, UperNet)"};
  app.require_subcommand(1);

  // dataset
  auto* dataset = app.add_subcommand("dataset", "Dataset utilities");
  dataset->require_subcommand(1);
  std::string ds_root, ds_train = "train", ds_companion = "test", ds_out;
  int threshold = kDefaultLongTailThreshold;
  auto* stats = dataset->add_subcommand("stats", "Per-class frequency report as CSV plus a long-tail summary");
  stats->add_option("root", ds_root, "Dataset root")->required();
  stats->add_option("--split", ds_train, "Split whose counts define the long tail");
  stats->add_option("--companion", ds_companion, "Second split counted alongside");
  stats->add_option("--threshold", threshold, "Long-tail threshold in train images");
  stats->add_option("--csv", ds_out, "Write the CSV here instead of stdout");

  ToyDatasetOptions toy;
  auto* gen = dataset->add_subcommand("generate", "Write a synthetic segmentation dataset");
  gen->add_option("root", ds_root, "Output root")->required();
  gen->add_option("--seed", toy.seed);
  gen->add_option("--images", toy.n_images, "Train images");
  gen->add_option("--test", toy.n_test, "Test images");
  gen->add_option("--classes", toy.n_classes, "Classes including background");
  gen->add_option("--size", toy.size, "Image side in pixels");

  int folder_classes = 3, per_class = 8, folder_size = 32;
  std::uint64_t folder_seed = 1;
  auto* gen_folder = dataset->add_subcommand("generate-folder", "Write a synthetic class-per-directory image folder");
  gen_folder->add_option("root", ds_root, "Output root")->required();
  gen_folder->add_option("--seed", folder_seed);
  gen_folder->add_option("--classes", folder_classes);
  gen_folder->add_option("--per-class", per_class);
  gen_folder->add_option("--size", folder_size);

  // tokenizer
  auto* tokenizer = app.add_subcommand("tokenizer", "VQ-KD tokenizer");
  tokenizer->require_subcommand(1);
  std::string tok_config, tok_images, tok_ckpt, tok_log;
  auto* tok_train = tokenizer->add_subcommand("train", "Train a tokenizer against a frozen random-ViT teacher");
  tok_train->add_option("--config", tok_config, "JSON config")->required();
  tok_train->add_option("--images", tok_images, "Image folder (overrides image_root)");
  tok_train->add_option("--out", tok_ckpt, "Checkpoint path")->required();
  tok_train->add_option("--log", tok_log, "Loss CSV path (default stdout)");

  std::vector<std::string> tok_inputs;
  bool resize = false, show_diagonal = false;
  auto* tok_encode = tokenizer->add_subcommand("encode", "Print the code of every patch as CSV");
  tok_encode->add_option("--checkpoint", tok_ckpt)->required();
  tok_encode->add_option("image", tok_inputs)->required()->expected(1);
  tok_encode->add_flag("--resize", resize, "Resize to the tokenizer resolution");

  auto* tok_sim = tokenizer->add_subcommand("similarity", "Pairwise token-IoU matrix as CSV");
  tok_sim->add_option("--checkpoint", tok_ckpt)->required();
  tok_sim->add_option("images", tok_inputs)->required()->expected(2, -1);
  tok_sim->add_flag("--resize", resize, "Resize to the tokenizer resolution");
  tok_sim->add_flag("--show-diagonal", show_diagonal, "Print 1.0 instead of '-' on the diagonal");

  // pretrain
  std::string pre_config, pre_tokenizer, pre_images, pre_out, pre_log;
  auto* pre = app.add_subcommand("pretrain", "Masked image modeling against tokenizer codes");
  pre->add_option("--config", pre_config, "JSON config")->required();
  pre->add_option("--tokenizer", pre_tokenizer, "Tokenizer checkpoint (overrides config)");
  pre->add_option("--images", pre_images, "Image folder (overrides image_root)");
  pre->add_option("--out", pre_out, "Final checkpoint path")->required();
  pre->add_option("--log", pre_log, "Loss CSV path (default stdout)");

  // finetune
  std::string ft_config, ft_backbone, ft_data, ft_out;
  auto* ft = app.add_subcommand("finetune", "Train backbone + UperNet on a segmentation dataset");
  ft->add_option("--config", ft_config, "JSON run config")->required();
  ft->add_option("--backbone", ft_backbone, "vit or dcn")->check(CLI::IsMember({"vit", "dcn"}));
  ft->add_option("--data", ft_data, "Dataset root (overrides dataset_root)");
  ft->add_option("--out", ft_out, "Output directory (overrides output_dir)");
  bool ft_print = false;
  ft->add_flag("--print-manifest", ft_print, "Print the resolved run manifest and exit");

  // eval
  std::string ev_ckpt, ev_data, ev_split = "test", ev_mode = "sliding", ev_csv, ev_train_split;
  int ev_crop = 0, ev_stride = 0;
  bool ev_no_bg = false;
  auto* ev = app.add_subcommand("eval", "mIoU and per-class IoU of a checkpoint on a split");
  ev->add_option("--checkpoint", ev_ckpt)->required();
  ev->add_option("--data", ev_data, "Dataset root")->required();
  ev->add_option("--split", ev_split);
  ev->add_option("--mode", ev_mode)->check(CLI::IsMember({"sliding", "whole"}));
  ev->add_option("--crop", ev_crop, "Window size (default: model input multiple rounded to 512 or the toy size)");
  ev->add_option("--stride", ev_stride, "Window stride (default 2/3 crop)");
  ev->add_flag("--exclude-background", ev_no_bg);
  ev->add_option("--long-tail-split", ev_train_split, "Split whose image counts are joined to the report");
  ev->add_option("--csv", ev_csv, "Write the per-class CSV here instead of stdout");

  // render
  std::string rd_ckpt, rd_data, rd_split = "test", rd_out;
  std::vector<std::string> rd_ids;
  int rd_crop = 0;
  auto* rd = app.add_subcommand("render", "input | prediction | ground truth panels");
  rd->add_option("--checkpoint", rd_ckpt)->required();
  rd->add_option("--data", rd_data)->required();
  rd->add_option("--split", rd_split);
  rd->add_option("--id", rd_ids, "Sample ids (default: all)");
  rd->add_option("--crop", rd_crop, "Sliding window size (default: whole image)");
  rd->add_option("--out", rd_out, "Output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (stats->parsed()) {
      const auto train = load_dataset(ds_root, ds_train);
      const auto companion = load_dataset(ds_root, ds_companion);
      const auto report = class_frequency_report(train, companion, threshold);
      emit(report.to_csv(), ds_out);
      std::cerr << report.long_tail_summary();
    } else if (gen->parsed()) {
      const auto m = generate_toy_dataset(ds_root, toy);
      std::cerr << "wrote " << m.size() << " train and " << toy.n_test << " test samples to " << ds_root << '\n';
    } else if (gen_folder->parsed()) {
      const auto f = generate_toy_image_folder(ds_root, folder_seed, folder_classes, per_class, folder_size);
      std::cerr << "wrote " << f.images.size() << " images in " << f.class_names.size() << " classes to " << ds_root << '\n';
    } else if (tok_train->parsed()) {
      auto cfg = tokenizer_config_from_json(read_text_file(tok_config));
      if (!tok_images.empty()) cfg.image_root = tok_images;
      if (cfg.image_root.empty()) throw std::invalid_argument("no image folder given (image_root or --images)");
      const auto images = load_folder_images(load_image_folder(cfg.image_root), cfg.model.encoder.image_size);
      VqkdTokenizer tok(cfg.model, cfg.seed);
      RandomViTTeacher teacher(cfg.teacher, cfg.teacher_seed);
      const auto log = train_tokenizer(tok, teacher, images, cfg);
      save_tokenizer(tok_ckpt, tok);
      emit(tokenizer_log_csv(log), tok_log);
      std::cerr << "final loss " << log.back().loss << ", codebook usage " << codebook_usage(tok, images) << '\n';
    } else if (tok_encode->parsed()) {
      const auto tok = load_tokenizer(tok_ckpt);
      const int size = tok->config().encoder.image_size;
      Tensor img = resize ? resize_image(read_image(tok_inputs[0]), size, size).pixels : load_for_tokenizer(tok_inputs[0], size);
      const auto t = tok->tokenize(img);
      std::cout << "index,row,col,code\n";
      for (std::size_t i = 0; i < t.codes.size(); ++i) {
        std::cout << i << ',' << static_cast<std::int64_t>(i) / t.grid_w << ',' << static_cast<std::int64_t>(i) % t.grid_w << ','
                  << t.codes[i] << '\n';
      }
      std::cerr << t.distinct().size() << " distinct codes over " << t.codes.size() << " patches\n";
    } else if (tok_sim->parsed()) {
      const auto tok = load_tokenizer(tok_ckpt);
      const int size = tok->config().encoder.image_size;
      std::vector<TokenSequence> seqs;
      std::vector<std::string> names;
      for (const auto& p : tok_inputs) {
        Tensor img = resize ? resize_image(read_image(p), size, size).pixels : load_for_tokenizer(p, size);
        seqs.push_back(tok->tokenize(img));
        const fs::path path(p);
        const auto parent = path.parent_path().filename().string();
        names.push_back(parent.empty() ? path.stem().string() : parent + "/" + path.stem().string());
      }
      std::cout << token_iou_matrix(seqs, names).to_csv(show_diagonal);
    } else if (pre->parsed()) {
      auto cfg = pretrain_config_from_json(read_text_file(pre_config));
      if (!pre_tokenizer.empty()) cfg.tokenizer = pre_tokenizer;
      if (!pre_images.empty()) cfg.image_root = pre_images;
      if (cfg.tokenizer.empty() || cfg.image_root.empty()) throw std::invalid_argument("pretrain needs a tokenizer and an image folder");
      const auto tok = load_tokenizer(cfg.tokenizer);
      if (tok->config().encoder.image_size != cfg.model.encoder.image_size ||
          tok->config().encoder.patch_size != cfg.model.encoder.patch_size) {
        throw std::invalid_argument("tokenizer grid does not match the encoder grid");
      }
      cfg.model.vocab_size = tok->codebook().size();
      const auto images = load_folder_images(load_image_folder(cfg.image_root), cfg.model.encoder.image_size);
      MimModel model(cfg.model, cfg.seed);
      const auto log = pretrain(model, TokenizerTargets(*tok), images, cfg);
      save_mim_model(pre_out, model);
      emit(pretrain_log_csv(log), pre_log);
      std::cerr << "final loss " << log.back().loss << '\n';
    } else if (ft->parsed()) {
      auto cfg = finetune_config(ft_config, ft_backbone);
      if (!ft_data.empty()) cfg.train.dataset_root = ft_data;
      if (!ft_out.empty()) cfg.train.output_dir = ft_out;
      if (ft_print) {
        std::cout << run_manifest(cfg, count_parameters(cfg.model)) << '\n';
        return 0;
      }
      if (cfg.train.dataset_root.empty()) throw std::invalid_argument("no dataset root given (dataset_root or --data)");
      const auto train = load_dataset(cfg.train.dataset_root, "train");
      const auto val = load_dataset(cfg.train.dataset_root, cfg.train.val_split);
      cfg.model.num_classes = train.num_classes;
      SegmentationModel model(cfg.model, cfg.train.seed);
      if (!cfg.train.pretrained.empty()) {
        const auto rep = load_parameters(model.parameters(), load_archive(cfg.train.pretrained), cfg.train.pretrained_prefix,
                                         cfg.model.backbone == BackboneKind::ViT ? "encoder." : "backbone.");
        std::cerr << "restored " << rep.loaded.size() << " backbone arrays (" << rep.interpolated.size() << " resized)\n";
      }
      const auto r = finetune(model, cfg, train, &val, cfg.train.output_dir, [](const MetricRow& row) {
        if (!std::isnan(row.val_miou)) std::cerr << "iter " << row.iteration << " loss " << row.loss << " mIoU " << row.val_miou << '\n';
      });
      if (cfg.train.output_dir.empty()) std::cout << metrics_csv(r.log);
      std::cerr << "best mIoU " << r.best_miou << " at iteration " << r.best_iteration << '\n';
    } else if (ev->parsed()) {
      const auto model = load_segmentation_model(ev_ckpt);
      const auto manifest = load_dataset(ev_data, ev_split);
      EvalOptions opt;
      opt.mode = ev_mode == "whole" ? InferenceMode::Whole : InferenceMode::Sliding;
      opt.crop = ev_crop > 0 ? ev_crop : (model->config().num_classes > 0 && model->config().decoder_channels >= 512 ? 512 : 64);
      opt.stride = ev_stride > 0 ? ev_stride : std::max(1, opt.crop * 2 / 3);
      opt.exclude_background = ev_no_bg;
      std::optional<ClassFrequencyReport> freq;
      if (!ev_train_split.empty()) freq = class_frequency_report(load_dataset(ev_data, ev_train_split), manifest);
      const auto report = evaluate_dataset(*model, manifest, opt, freq);
      emit(report.to_csv(), ev_csv);
      std::cerr << report.summary();
    } else if (rd->parsed()) {
      const auto model = load_segmentation_model(rd_ckpt);
      const auto manifest = load_dataset(rd_data, rd_split);
      const auto palette = class_palette();
      fs::create_directories(rd_out);
      int written = 0;
      for (std::size_t i = 0; i < manifest.size(); ++i) {
        const auto& e = manifest.samples[i];
        if (!rd_ids.empty() && std::find(rd_ids.begin(), rd_ids.end(), e.id) == rd_ids.end()) continue;
        const auto s = manifest.load(i);
        const Mask pred = rd_crop > 0 ? predict_sliding(*model, s.image.pixels, rd_crop, std::max(1, rd_crop * 2 / 3))
                                      : argmax_mask(whole_logits([&](const Tensor& x) { return model->predict_logits(x); },
                                                                 s.image.pixels, model->size_multiple()));
        write_png(fs::path(rd_out) / (e.id + "_panel.png"), render_panel(s.image, pred, s.mask, palette));
        ++written;
      }
      if (written == 0) throw std::invalid_argument("no matching samples to render");
      std::cerr << "wrote " << written << " panels to " << rd_out << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
