#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "iselab/model.hpp"

namespace iselab {

/// On-disk model snapshot. The file layout is a compact UTF-8 JSON header
/// (config, metadata, per-tensor name/shape/byte-offset/length) terminated
/// by a newline and the magic string "ISECKPT1", followed by the raw
/// little-endian float32 payloads in header order.
struct Checkpoint {
  static constexpr int kFormatVersion = 1;

  struct Blob {
    std::string name;
    std::vector<int> shape;
    std::vector<float> data;
  };

  ModelConfig config;
  std::int64_t step = 0;
  std::uint64_t seed = 0;
  std::vector<Blob> blobs;

  const Blob* find_blob(const std::string& name) const;

  /// Reassembles model parameters from the parameter blobs; throws
  /// FormatError when a parameter is missing or has the wrong shape.
  ModelParams<float> to_params() const;

  static Checkpoint from_params(ModelParams<float>& params, const ModelConfig& config,
                                std::int64_t step, std::uint64_t seed);

  /// Appends an extra blob (optimizer moments and the like).
  void add_blob(std::string name, std::vector<int> shape, std::vector<float> data);
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

/// FNV-1a over the parameter payload bytes; stable id for reports.
std::string checkpoint_content_id(const Checkpoint& ckpt);

}  // namespace iselab
