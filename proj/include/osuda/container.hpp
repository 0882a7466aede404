#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "osuda/layers.hpp"

namespace osuda {

// Self-describing binary file holding named float32 tensors plus a JSON
// header. Layout:
//
//   8 bytes   magic "OSUDACON"
//   u32 LE    format version
//   u64 LE    header length in bytes
//   header    UTF-8 JSON: {"kind", "meta", "tensors": [{name, shape, offset, count}], "data_sha256"}
//   data      little-endian float32 values, tensors back to back
//
// Checkpoints and weight files both use it; "kind" tells them apart.
struct TensorContainer {
  static constexpr std::uint32_t kFormatVersion = 1;

  std::string kind;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  bool contains(const std::string& name) const;
  const Tensor<float>& get(const std::string& name) const;
  void put(const std::string& name, const Tensor<float>& tensor) { tensors.emplace_back(name, tensor); }
};

std::string serialize_container(const TensorContainer& c);
TensorContainer parse_container(const std::string& bytes, const std::string& source = "<memory>");

void write_container(const std::filesystem::path& path, const TensorContainer& c);
TensorContainer read_container(const std::filesystem::path& path);

// Copies name-matched tensors into the parameter values; every parameter
// must be present with an identical shape.
void load_parameters(const TensorContainer& c, const std::string& prefix, const ParameterList<float>& params);
void store_parameters(TensorContainer& c, const std::string& prefix, const ParameterList<float>& params);
void load_buffers(const TensorContainer& c, const std::string& prefix, const BufferList<float>& buffers);
void store_buffers(TensorContainer& c, const std::string& prefix, const BufferList<float>& buffers);

}  // namespace osuda
