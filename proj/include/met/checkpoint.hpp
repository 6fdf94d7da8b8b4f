#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "met/autodiff.hpp"
#include "met/tensor.hpp"

namespace met {

enum class Dtype { f64, f32 };
std::string dtype_name(Dtype d);
Dtype dtype_from_name(const std::string& s);

// Container layout: 8-byte magic, u64 header length, JSON header, then raw
// little-endian tensor payloads at the recorded offsets. Round-trips are
// bit-exact at the file level for both storage precisions and at the tensor
// level for f64.
struct CheckpointMeta {
  std::string nonlinearity = "tanh";
  nlohmann::json extra = nlohmann::json::object();
};

struct LoadedCheckpoint {
  CheckpointMeta meta;
  std::map<std::string, Tensor> tensors;
  std::map<std::string, Dtype> storage;
};

void save_checkpoint(const std::filesystem::path& path,
                     const std::vector<std::pair<std::string, const Tensor*>>& tensors,
                     const CheckpointMeta& meta, Dtype storage = Dtype::f64);

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

// Write-temp-then-rename helper shared by every artifact writer.
void atomic_write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace met
