#include "segkit/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace segkit {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

bool is_image_file(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

std::string zero_pad(int v, int width) {
  std::string s = std::to_string(v);
  if (static_cast<int>(s.size()) < width) s.insert(0, static_cast<std::size_t>(width) - s.size(), '0');
  return s;
}

}  // namespace

DatasetDescriptor read_descriptor(const fs::path& root) {
  const auto path = root / "dataset.json";
  std::ifstream in(path);
  if (!in) throw std::runtime_error("dataset descriptor not found: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("malformed dataset descriptor " + path.string() + ": " + e.what());
  }
  if (!j.contains("num_classes")) throw std::runtime_error("dataset descriptor lacks num_classes: " + path.string());
  DatasetDescriptor d;
  d.num_classes = j.at("num_classes").get<int>();
  if (d.num_classes < 1) throw std::runtime_error("num_classes must be positive");
  if (j.contains("class_names")) d.class_names = j.at("class_names").get<std::vector<std::string>>();
  if (!d.class_names.empty() && static_cast<int>(d.class_names.size()) != d.num_classes) {
    throw std::runtime_error("class_names has " + std::to_string(d.class_names.size()) + " entries, expected " +
                             std::to_string(d.num_classes));
  }
  if (d.class_names.empty()) {
    for (int c = 0; c < d.num_classes; ++c) d.class_names.push_back(c == 0 ? "background" : "class_" + std::to_string(c));
  }
  return d;
}

void write_descriptor(const fs::path& root, const DatasetDescriptor& descriptor) {
  fs::create_directories(root);
  json j;
  j["num_classes"] = descriptor.num_classes;
  j["class_names"] = descriptor.class_names;
  std::ofstream out(root / "dataset.json");
  out << j.dump(2) << '\n';
}

ImageSample DatasetManifest::load(std::size_t index) const {
  const auto& e = samples.at(index);
  ImageSample s{read_image(e.image_path), read_mask(e.mask_path), e.id};
  if (s.image.height() != s.mask.height || s.image.width() != s.mask.width) {
    throw std::runtime_error("image/mask size mismatch for id " + e.id);
  }
  return s;
}

DatasetManifest load_dataset(const fs::path& root, const std::string& split) {
  if (!fs::is_directory(root)) throw std::runtime_error("dataset root not found: " + root.string());
  const auto image_dir = root / "images" / split;
  const auto mask_dir = root / "masks" / split;
  if (!fs::is_directory(image_dir)) throw std::runtime_error("image directory not found: " + image_dir.string());
  if (!fs::is_directory(mask_dir)) throw std::runtime_error("mask directory not found: " + mask_dir.string());

  const auto desc = read_descriptor(root);
  DatasetManifest m;
  m.root = root;
  m.split = split;
  m.num_classes = desc.num_classes;
  m.class_names = desc.class_names;

  for (const auto& entry : fs::directory_iterator(image_dir)) {
    if (!entry.is_regular_file() || !is_image_file(entry.path())) continue;
    const auto id = entry.path().stem().string();
    const auto mask_path = mask_dir / (id + ".png");
    if (!fs::exists(mask_path)) throw std::runtime_error("missing mask for image id " + id);
    m.samples.push_back({id, entry.path(), mask_path});
  }
  std::sort(m.samples.begin(), m.samples.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  for (std::size_t i = 1; i < m.samples.size(); ++i) {
    if (m.samples[i].id == m.samples[i - 1].id) throw std::runtime_error("duplicate sample id " + m.samples[i].id);
  }

  for (const auto& s : m.samples) {
    const auto dims = image_dimensions(s.image_path);
    const auto mask = read_mask(s.mask_path);
    if (dims.height != mask.height || dims.width != mask.width) {
      throw std::runtime_error("image/mask size mismatch for id " + s.id + ": image " + std::to_string(dims.height) +
                               "x" + std::to_string(dims.width) + ", mask " + std::to_string(mask.height) + "x" +
                               std::to_string(mask.width));
    }
    for (auto v : mask.labels) {
      if (v >= m.num_classes) {
        throw std::runtime_error("mask value " + std::to_string(v) + " >= num_classes " +
                                 std::to_string(m.num_classes) + " in id " + s.id);
      }
    }
  }
  return m;
}

std::string ClassFrequencyReport::to_csv() const {
  std::ostringstream os;
  os << "class_id,name,train_images,test_images,train_pixels,long_tail\n";
  for (const auto& c : classes) {
    os << c.class_id << ',' << c.name << ',' << c.train_images << ',' << c.test_images << ',' << c.train_pixels << ','
       << (c.long_tail ? 1 : 0) << '\n';
  }
  return os.str();
}

std::string ClassFrequencyReport::long_tail_summary() const {
  std::ostringstream os;
  std::int64_t n = 0;
  for (const auto& c : classes) n += c.long_tail ? 1 : 0;
  os << "images: " << train_image_total << " train, " << test_image_total << " test\n";
  os << "long-tail classes (<= " << long_tail_threshold << " train images): " << n << " of " << classes.size()
     << '\n';
  for (const auto& c : classes) {
    if (!c.long_tail) continue;
    os << "  " << c.name << ": " << c.train_images << " train / " << c.test_images << " test\n";
  }
  return os.str();
}

const ClassFrequency* ClassFrequencyReport::find(const std::string& name) const {
  for (const auto& c : classes)
    if (c.name == name) return &c;
  return nullptr;
}

ClassFrequencyReport class_frequency_report(const DatasetManifest& manifest, const DatasetManifest& companion,
                                            int long_tail_threshold) {
  if (manifest.num_classes != companion.num_classes) {
    throw std::invalid_argument("class_frequency_report: manifests disagree on num_classes");
  }
  const int nc = manifest.num_classes;
  ClassFrequencyReport r;
  r.long_tail_threshold = long_tail_threshold;
  r.train_image_total = static_cast<std::int64_t>(manifest.size());
  r.test_image_total = static_cast<std::int64_t>(companion.size());
  r.classes.resize(static_cast<std::size_t>(nc));
  for (int c = 0; c < nc; ++c) {
    r.classes[static_cast<std::size_t>(c)].class_id = c;
    r.classes[static_cast<std::size_t>(c)].name =
        c < static_cast<int>(manifest.class_names.size()) ? manifest.class_names[static_cast<std::size_t>(c)]
                                                           : "class_" + std::to_string(c);
  }
  std::vector<std::uint8_t> present(static_cast<std::size_t>(nc));
  for (const auto& s : manifest.samples) {
    std::fill(present.begin(), present.end(), 0);
    for (auto v : read_mask(s.mask_path).labels) {
      if (v < 0 || v >= nc) throw std::runtime_error("mask value out of range in id " + s.id);
      present[static_cast<std::size_t>(v)] = 1;
      ++r.classes[static_cast<std::size_t>(v)].train_pixels;
    }
    for (int c = 0; c < nc; ++c) r.classes[static_cast<std::size_t>(c)].train_images += present[static_cast<std::size_t>(c)];
  }
  for (const auto& s : companion.samples) {
    std::fill(present.begin(), present.end(), 0);
    for (auto v : read_mask(s.mask_path).labels) {
      if (v < 0 || v >= nc) throw std::runtime_error("mask value out of range in id " + s.id);
      present[static_cast<std::size_t>(v)] = 1;
    }
    for (int c = 0; c < nc; ++c) r.classes[static_cast<std::size_t>(c)].test_images += present[static_cast<std::size_t>(c)];
  }
  for (auto& c : r.classes) c.long_tail = c.train_images <= long_tail_threshold;
  return r;
}

// ---------------------------------------------------------------------------
// Synthetic data

namespace {

struct Appearance {
  double rgb[3];
  int texture;  // 0 stripes, 1 checker, 2 speckle
  double freq;
  double angle;
};

void hsv_to_rgb(double h, double s, double v, double out[3]) {
  const double hh = std::fmod(h, 1.0) * 6.0;
  const int i = static_cast<int>(hh);
  const double f = hh - i, p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  const double table[6][3] = {{v, t, p}, {q, v, p}, {p, v, t}, {p, q, v}, {t, p, v}, {v, p, q}};
  for (int c = 0; c < 3; ++c) out[c] = table[i % 6][c];
}

Appearance appearance_for(int cls, int n_classes) {
  Appearance a{};
  if (cls == 0) {
    a.rgb[0] = 0.86;
    a.rgb[1] = 0.84;
    a.rgb[2] = 0.80;
    a.texture = 2;
    a.freq = 0.0;
    a.angle = 0.0;
    return a;
  }
  const int fg = std::max(1, n_classes - 1);
  hsv_to_rgb(static_cast<double>(cls - 1) / fg, 0.65, 0.72, a.rgb);
  a.texture = cls % 3;
  a.freq = 0.35 + 0.12 * (cls % 4);
  a.angle = 0.7 * cls;
  return a;
}

double texture_value(const Appearance& a, std::int64_t y, std::int64_t x) {
  switch (a.texture) {
    case 0:
      return 0.08 * std::sin(a.freq * (std::cos(a.angle) * x + std::sin(a.angle) * y) * std::numbers::pi);
    case 1: {
      const auto cell = static_cast<std::int64_t>(2 + std::lround(4 * a.freq));
      return ((y / cell + x / cell) % 2 == 0) ? 0.06 : -0.06;
    }
    default:
      return 0.0;
  }
}

// Paints shapes of the given ingredient ids onto `mask`.
void draw_shapes(Mask& mask, Rng& rng, const std::vector<int>& ingredients, int min_shapes, int max_shapes) {
  const double s = static_cast<double>(mask.width);
  std::uniform_int_distribution<int> n_dist(min_shapes, max_shapes);
  std::uniform_int_distribution<std::size_t> pick(0, ingredients.size() - 1);
  std::uniform_int_distribution<int> kind_dist(0, 2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const int n = n_dist(rng);
  for (int k = 0; k < n; ++k) {
    const int cls = ingredients[pick(rng)];
    const int kind = kind_dist(rng);
    const double cy = (0.15 + 0.7 * u(rng)) * s, cx = (0.15 + 0.7 * u(rng)) * s;
    const double a = (0.12 + 0.13 * u(rng)) * s;  // radius or half extent
    const double b = (0.12 + 0.13 * u(rng)) * s;
    for (std::int64_t y = 0; y < mask.height; ++y) {
      for (std::int64_t x = 0; x < mask.width; ++x) {
        const double dy = static_cast<double>(y) + 0.5 - cy, dx = static_cast<double>(x) + 0.5 - cx;
        bool inside = false;
        if (kind == 0) inside = dy * dy + dx * dx <= a * a;
        else if (kind == 1) inside = std::abs(dy) <= a && std::abs(dx) <= b;
        else inside = (dy * dy) / (a * a) + (dx * dx) / (b * b) <= 1.0;
        if (inside) mask.at(y, x) = cls;
      }
    }
  }
}

Image render_from_mask(const Mask& mask, int n_appearances, Rng& rng) {
  std::normal_distribution<double> jitter(0.0, 0.05);
  std::normal_distribution<double> noise(0.0, 0.045);
  std::vector<Appearance> looks;
  std::vector<std::array<double, 3>> offsets;
  for (int c = 0; c < n_appearances; ++c) {
    looks.push_back(appearance_for(c, n_appearances));
    offsets.push_back({jitter(rng), jitter(rng), jitter(rng)});
  }
  Image img(mask.height, mask.width);
  for (std::int64_t y = 0; y < mask.height; ++y) {
    for (std::int64_t x = 0; x < mask.width; ++x) {
      const auto cls = static_cast<std::size_t>(mask.at(y, x));
      const double t = texture_value(looks[cls], y, x);
      for (int c = 0; c < 3; ++c) {
        img.at(y, x, c) = std::clamp(looks[cls].rgb[c] + offsets[cls][static_cast<std::size_t>(c)] + t + noise(rng), 0.0, 1.0);
      }
    }
  }
  return img;
}

}  // namespace

DatasetManifest generate_toy_dataset(const fs::path& root, const ToyDatasetOptions& options) {
  if (options.n_classes < 2) throw std::invalid_argument("generate_toy_dataset: n_classes must be >= 2");
  if (options.n_classes > 256) throw std::invalid_argument("generate_toy_dataset: n_classes must fit 8-bit masks");
  if (options.size < 32) throw std::invalid_argument("generate_toy_dataset: size must be >= 32");
  if (options.n_images < 0 || options.n_test < 0) throw std::invalid_argument("generate_toy_dataset: negative count");

  DatasetDescriptor desc;
  desc.num_classes = options.n_classes;
  for (int c = 0; c < options.n_classes; ++c) desc.class_names.push_back(c == 0 ? "background" : "ingredient_" + std::to_string(c));
  write_descriptor(root, desc);

  std::vector<int> ingredients;
  for (int c = 1; c < options.n_classes; ++c) ingredients.push_back(c);

  Rng rng(options.seed);
  const int total = options.n_images + options.n_test;
  for (const auto* split : {"train", "test"}) {
    fs::create_directories(root / "images" / split);
    fs::create_directories(root / "masks" / split);
  }
  for (int i = 0; i < total; ++i) {
    const char* split = i < options.n_images ? "train" : "test";
    Mask mask(options.size, options.size, 0);
    draw_shapes(mask, rng, ingredients, 2, 4);
    const Image img = render_from_mask(mask, options.n_classes, rng);
    const auto id = "img_" + zero_pad(i, 4);
    write_png(root / "images" / split / (id + ".png"), img);
    write_mask_png(root / "masks" / split / (id + ".png"), mask);
  }
  return load_dataset(root, "train");
}

ImageFolder load_image_folder(const fs::path& root) {
  if (!fs::is_directory(root)) throw std::runtime_error("image folder not found: " + root.string());
  ImageFolder f;
  std::vector<fs::path> dirs, loose;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory()) dirs.push_back(e.path());
    else if (e.is_regular_file() && is_image_file(e.path())) loose.push_back(e.path());
  }
  std::sort(dirs.begin(), dirs.end());
  std::sort(loose.begin(), loose.end());
  for (const auto& p : loose) {
    f.images.push_back(p);
    f.labels.push_back(-1);
  }
  for (std::size_t d = 0; d < dirs.size(); ++d) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dirs[d]))
      if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    f.class_names.push_back(dirs[d].filename().string());
    for (const auto& p : files) {
      f.images.push_back(p);
      f.labels.push_back(static_cast<int>(d));
    }
  }
  if (f.images.empty()) throw std::runtime_error("image folder has no images: " + root.string());
  return f;
}

ImageFolder generate_toy_image_folder(const fs::path& root, std::uint64_t seed, int n_classes, int per_class, int size) {
  if (n_classes < 1 || per_class < 1) throw std::invalid_argument("generate_toy_image_folder: empty request");
  if (size < 16) throw std::invalid_argument("generate_toy_image_folder: size must be >= 16");
  const int n_looks = 2 * n_classes + 1;
  Rng rng(seed);
  for (int d = 0; d < n_classes; ++d) {
    const auto dir = root / ("dish_" + std::to_string(d));
    fs::create_directories(dir);
    const std::vector<int> ingredients{2 * d + 1, 2 * d + 2};
    for (int i = 0; i < per_class; ++i) {
      Mask mask(size, size, 0);
      draw_shapes(mask, rng, ingredients, 2, 4);
      write_png(dir / ("img_" + zero_pad(i, 4) + ".png"), render_from_mask(mask, n_looks, rng));
    }
  }
  return load_image_folder(root);
}

}  // namespace segkit
