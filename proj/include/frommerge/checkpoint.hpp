#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "frommerge/tensor.hpp"

namespace frommerge {

enum class DType { F32, F64 };

const char* dtype_name(DType d) noexcept;
std::size_t dtype_size(DType d) noexcept;

// A tensor as it lives in a container: f64 values for computation plus the
// on-disk shape and dtype needed to write it back unchanged.
struct StoredTensor {
  Tensor2D value;
  std::vector<std::uint64_t> shape;
  DType dtype = DType::F32;

  // 2-D storage record for a computed matrix.
  static StoredTensor from_matrix(Tensor2D m, DType dtype);
  // Same shape and dtype as `like`, new values.
  static StoredTensor like(const StoredTensor& like, Tensor2D m);
};

struct Checkpoint {
  std::map<std::string, StoredTensor> tensors;
  std::map<std::string, std::string> metadata;
};

// Matrix view of an N-d shape: scalars 1x1, vectors 1xd, otherwise dim0 x prod(rest).
std::pair<std::size_t, std::size_t> matrix_shape(std::span<const std::uint64_t> shape);

// Container layout: u64 LE header length N, N bytes of JSON header, raw payload.
Checkpoint parse_container(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> serialize_container(const Checkpoint& ckpt);

Checkpoint read_container(const std::filesystem::path& path);
void write_container(const Checkpoint& ckpt, const std::filesystem::path& path);

// Writes to a sibling temporary file and renames it into place, so the target is either
// absent/unchanged or complete.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_file_atomic(const std::filesystem::path& path, const std::string& text);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

struct LoraEntry {
  std::string layer;
  Tensor2D a;  // r x d2
  Tensor2D b;  // d1 x r
};

// A LoRA adapter. Effective per-layer delta is scaling_alpha * B * A.
struct LoraAdapter {
  std::vector<LoraEntry> entries;  // sorted by layer name
  std::size_t rank = 0;
  double scaling_alpha = 1.0;
  DType dtype = DType::F32;

  const LoraEntry* find(const std::string& layer) const;
  Tensor2D delta(const LoraEntry& e) const;
  // Throws ValidationError if ranks disagree or entries are unsorted/duplicated.
  void validate() const;
};

LoraAdapter read_lora(const std::filesystem::path& weights_path, const std::filesystem::path& config_path);
void write_lora(const LoraAdapter& adapter, const std::filesystem::path& weights_path,
                const std::filesystem::path& config_path);

// In-memory halves of read_lora/write_lora.
LoraAdapter lora_from_parts(const Checkpoint& weights, const std::string& config_json);
Checkpoint lora_weights(const LoraAdapter& adapter);
std::string lora_config_json(const LoraAdapter& adapter);

}  // namespace frommerge
