// SPDX-License-Identifier: Apache-2.0
#pragma once

// SMPC container: little-endian, deterministic. Prunable weights are stored
// as coordinate lists with u64 row-major indices, everything else dense.
// Byte layout is documented in docs/smpc-format.md.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "smp/model.hpp"
#include "smp/tensor.hpp"

namespace smp {

inline constexpr char kSmpcMagic[4] = {'S', 'M', 'P', 'C'};
inline constexpr std::uint16_t kSmpcVersion = 1;

enum class Storage : std::uint8_t { dense = 0, coo = 1 };
/// sparse: prunable tensors as COO. dense: every tensor dense.
enum class StoragePolicy { sparse, dense };

struct TensorRecord {
  std::string name;
  Tensor value;
  Storage storage = Storage::dense;
};

struct Checkpoint {
  std::vector<TensorRecord> records;
  nlohmann::json metadata = nlohmann::json::object();
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
/// Throws FormatError naming the offending record on any malformed input.
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Records for every parameter (gates of non-finalized gated weights are
/// added as dense "<name>.gate" records) plus metadata describing the model.
Checkpoint checkpoint_from_model(const CaptionModel& model, StoragePolicy policy = StoragePolicy::sparse,
                                 const nlohmann::json& extra = nlohmann::json::object());
void save_model(const std::filesystem::path& path, const CaptionModel& model,
                StoragePolicy policy = StoragePolicy::sparse, const nlohmann::json& extra = nlohmann::json::object());

/// Rebuilds the model described by the metadata. Gates come back in the
/// stored mode; zero patterns of finalized or hard-masked tensors come back
/// as hard masks.
CaptionModel model_from_checkpoint(const Checkpoint& ckpt);
CaptionModel load_model(const std::filesystem::path& path);

nlohmann::json dims_to_json(const ModelDims& dims);
/// Missing keys keep their defaults; unknown keys are a ConfigError.
ModelDims dims_from_json(const nlohmann::json& j);

/// Encoded size of one record.
std::size_t record_bytes(const std::string& name, std::size_t ndim, std::size_t numel, std::size_t nnz,
                         Storage storage);
/// Encoded size of a whole checkpoint, from the container formulas.
std::size_t checkpoint_bytes(const Checkpoint& ckpt);

struct CompressionReport {
  double sparsity = 0.0;        // over prunable tensors
  std::size_t nnz = 0;          // nonzero prunable weights
  std::size_t p_total = 0;      // prunable weights
  std::size_t dense_bytes = 0;  // prunable records stored dense
  std::size_t coo_bytes = 0;    // prunable records stored as COO
  std::size_t stored_bytes = 0; // prunable records under the chosen policy
  double ratio = 1.0;           // dense_bytes / stored_bytes
  std::size_t file_bytes = 0;   // whole container under the chosen policy
};

CompressionReport compression_report(const CaptionModel& model, StoragePolicy policy = StoragePolicy::sparse,
                                     const nlohmann::json& extra = nlohmann::json::object());

}  // namespace smp
