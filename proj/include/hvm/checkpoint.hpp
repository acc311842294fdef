#pragma once

// Binary checkpoint container.
//
//   magic "HVMCKPT\0" | u32 version | u64 config hash | str config
//   then tagged sections "PARM", "OPTM", "META", each as tag[4] | u64 bytes | payload
//
// Integers and floats are little-endian; strings are u32 length + bytes.
// A tensor record is str name | "f32\0" | u32 rank | u64 dims[rank] | f32 data.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "hvm/module.hpp"

namespace hvm {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TensorRecord {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct OptimizerRecord {
  std::uint64_t step = 0;
  std::vector<TensorRecord> first_moment;
  std::vector<TensorRecord> second_moment;
};

struct Checkpoint {
  std::uint64_t config_hash = 0;
  std::string config;  // canonical model config, for diagnostics
  std::vector<TensorRecord> params;
  std::optional<OptimizerRecord> optimizer;
  std::map<std::string, std::string> meta;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

template <class T>
std::vector<TensorRecord> capture_parameters(const Module<T>& module);

// Requires an exact name and shape match in both directions.
template <class T>
void restore_parameters(Module<T>& module, const std::vector<TensorRecord>& records);

}  // namespace hvm
