#pragma once

#include <cstddef>
#include <memory>
#include <string>
#include <string_view>

#include "osuda/layers.hpp"

namespace osuda {

// Incremental SHA-256.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(const void* data, std::size_t size);
  void update(std::string_view text) { update(text.data(), text.size()); }
  std::string hex_digest();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

std::string sha256_hex(std::string_view data);

// Digest over parameter names, shapes and raw value bytes.
template <typename Scalar>
std::string parameter_digest(const ParameterList<Scalar>& params) {
  Sha256 h;
  for (const auto& p : params) {
    h.update(p.name);
    h.update(p.var.shape().str());
    h.update(p.var.value().data(), sizeof(Scalar) * static_cast<std::size_t>(p.var.value().numel()));
  }
  return h.hex_digest();
}

}  // namespace osuda
