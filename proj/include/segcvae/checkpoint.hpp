#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "segcvae/tensor.hpp"

namespace segcvae {

inline constexpr const char* kCheckpointVersion = "segcvae-ckpt-1";

enum class Dtype { F64, F32 };

struct NamedArray {
  std::string name;
  Dtype dtype = Dtype::F64;
  ad::Shape shape;
  std::vector<double> values;
};

/// Flat container of named arrays plus string metadata.
///
/// On disk: a text index (version line, "meta <key> <value>" lines, one
/// "array <name> <f64|f32> <d0,d1,..> <byte offset> <byte count>" line per
/// array, then "data <total bytes>") followed by the little-endian payload.
/// Offsets are relative to the first payload byte.
struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::vector<NamedArray> arrays;

  const NamedArray& array(const std::string& name) const;
  bool has_array(const std::string& name) const;
  const std::string& meta_value(const std::string& key) const;

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
};

}  // namespace segcvae
