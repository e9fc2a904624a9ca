#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "tsprobe/tensor.hpp"

namespace tsprobe {

/// Named tensors plus a JSON metadata blob, as read from disk.
template <typename T>
struct TensorBundle {
  nlohmann::json meta;
  std::map<std::string, Tensor<T>> tensors;

  const Tensor<T>& at(const std::string& name) const;
};

/// Binary layout (little-endian host order):
///   "TSPRCKPT" | u32 version | u32 bytes-per-scalar | u64 header length | header JSON | raw data
/// The header holds {"meta": ..., "tensors": [{"name", "shape"}, ...]} in storage order.
template <typename T>
void save_bundle(const std::filesystem::path& path, const nlohmann::json& meta,
                 const std::vector<std::pair<std::string, const Tensor<T>*>>& tensors);

/// Loads a bundle, converting scalars when the file precision differs from T.
template <typename T>
TensorBundle<T> load_bundle(const std::filesystem::path& path);

/// Reads only the metadata blob.
nlohmann::json read_bundle_meta(const std::filesystem::path& path);

}  // namespace tsprobe
