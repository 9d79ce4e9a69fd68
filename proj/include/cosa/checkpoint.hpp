#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "cosa/model.hpp"

namespace cosa {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class Dtype : std::uint8_t { f32 = 0, f64 = 1 };

/// Values are held as double; f32 tensors round-trip exactly.
struct CheckpointTensor {
  std::string name;
  Dtype dtype = Dtype::f32;
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::vector<double> values;
};

/// Binary container:
///   magic "COSACKPT", u32 version, u64 header length, header JSON,
///   u32 tensor count, then per tensor: u16 name length, name, u8 dtype,
///   u8 rank (2), i64 rows, i64 cols, little-endian payload.
struct Checkpoint {
  nlohmann::json header = nlohmann::json::object();
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor* find(const std::string& name) const;
  const CheckpointTensor& at(const std::string& name) const;  // throws DataError

  std::string serialize() const;
  static Checkpoint deserialize(const std::string& bytes);
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

template <typename T>
CheckpointTensor to_tensor(const std::string& name, const ag::Matrix<T>& m);
template <typename T>
ag::Matrix<T> from_tensor(const CheckpointTensor& t);

/// Stores header["model_config"] and one tensor per parameter.
template <typename T>
void store_model(Checkpoint& ckpt, const Model<T>& model);
/// Rebuilds the model. Throws DataError when `expected` is given and differs
/// from the stored config, or when a tensor is missing or misshapen.
template <typename T>
Model<T> load_model(const Checkpoint& ckpt, const ModelConfig* expected = nullptr);

}  // namespace cosa
