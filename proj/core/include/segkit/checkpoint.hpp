#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "segkit/nn.hpp"

namespace segkit {

/// Named arrays plus a JSON metadata string (model config, training state).
struct Archive {
  std::string meta = "{}";
  std::map<std::string, Tensor> arrays;
};

/// Layout: "SEGKIT01", u64 header length, JSON header listing each array's
/// name, shape and offset, then the raw little-endian doubles.
void save_archive(const std::filesystem::path& path, const Archive& archive);
Archive load_archive(const std::filesystem::path& path);

/// Copies every parameter value into an archive under its name.
void store_parameters(Archive& archive, const ParameterSet& params, const std::string& prefix = "");

struct LoadReport {
  std::vector<std::string> loaded;
  std::vector<std::string> missing;       // parameters without a matching array
  std::vector<std::string> interpolated;  // position tables resized to a new grid
};

/// Loads arrays named `<src_prefix><rest>` into parameters named `<dst_prefix><rest>`.
/// Square `pos_embed` tables of another grid size are resized bicubically.
/// Any other shape mismatch throws. With `strict`, missing parameters throw too.
LoadReport load_parameters(ParameterSet& params, const Archive& archive, const std::string& src_prefix = "",
                           const std::string& dst_prefix = "", bool strict = false);

}  // namespace segkit
