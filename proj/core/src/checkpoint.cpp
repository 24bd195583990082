#include "segkit/checkpoint.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "segkit/vit.hpp"

namespace segkit {

namespace {

constexpr char kMagic[8] = {'S', 'E', 'G', 'K', 'I', 'T', '0', '1'};

bool starts_with(const std::string& s, const std::string& prefix) { return s.compare(0, prefix.size(), prefix) == 0; }

}  // namespace

void save_archive(const std::filesystem::path& path, const Archive& archive) {
  nlohmann::json header;
  header["meta"] = nlohmann::json::parse(archive.meta);
  std::uint64_t offset = 0;
  for (const auto& [name, t] : archive.arrays) {
    header["arrays"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.size();
  }
  if (!header.contains("arrays")) header["arrays"] = nlohmann::json::array();
  const std::string text = header.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  const std::uint64_t len = text.size();
  out.write(kMagic, sizeof kMagic);
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : archive.arrays) {
    out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

Archive load_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint not found: " + path.string());
  char magic[8];
  std::uint64_t len = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw std::runtime_error("not a segkit checkpoint: " + path.string());
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  const auto header = nlohmann::json::parse(text);
  Archive a;
  a.meta = header.at("meta").dump();
  const auto data_start = in.tellg();
  for (const auto& e : header.at("arrays")) {
    Tensor t(e.at("shape").get<Shape>());
    in.seekg(data_start + static_cast<std::streamoff>(e.at("offset").get<std::uint64_t>() * sizeof(double)));
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!in) throw std::runtime_error("truncated checkpoint: " + path.string());
    a.arrays.emplace(e.at("name").get<std::string>(), std::move(t));
  }
  return a;
}

void store_parameters(Archive& archive, const ParameterSet& params, const std::string& prefix) {
  for (const auto& p : params.items()) {
    if (!p.var.defined()) throw std::invalid_argument("store_parameters: parameter set is shape-only");
    archive.arrays[prefix + p.name] = p.var.value();
  }
}

LoadReport load_parameters(ParameterSet& params, const Archive& archive, const std::string& src_prefix,
                           const std::string& dst_prefix, bool strict) {
  LoadReport report;
  for (auto& p : params.items()) {
    if (!starts_with(p.name, dst_prefix)) continue;
    const auto src = src_prefix + p.name.substr(dst_prefix.size());
    const auto it = archive.arrays.find(src);
    if (it == archive.arrays.end()) {
      report.missing.push_back(p.name);
      continue;
    }
    const Tensor& t = it->second;
    Tensor& dst = p.var.mutable_value();
    if (t.shape() == dst.shape()) {
      dst = t;
      report.loaded.push_back(p.name);
      continue;
    }
    const bool is_pos = p.name.size() >= 9 && p.name.compare(p.name.size() - 9, 9, "pos_embed") == 0;
    if (is_pos && t.rank() == 2 && dst.rank() == 2 && t.dim(1) == dst.dim(1)) {
      const auto gs = static_cast<std::int64_t>(std::llround(std::sqrt(static_cast<double>(t.dim(0)))));
      const auto gd = static_cast<std::int64_t>(std::llround(std::sqrt(static_cast<double>(dst.dim(0)))));
      if (gs * gs == t.dim(0) && gd * gd == dst.dim(0)) {
        NoGradGuard guard;
        dst = interpolate_pos_embed(Var(t), gs, gs, gd, gd).value();
        report.interpolated.push_back(p.name);
        report.loaded.push_back(p.name);
        continue;
      }
    }
    throw std::invalid_argument("load_parameters: " + src + " has shape " + shape_string(t.shape()) + ", parameter " +
                                p.name + " expects " + shape_string(dst.shape()));
  }
  if (strict && !report.missing.empty()) {
    throw std::invalid_argument("load_parameters: no array for parameter " + report.missing.front());
  }
  return report;
}

}  // namespace segkit
