#include "osuda/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "osuda/digest.hpp"

namespace osuda {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'O', 'S', 'U', 'D', 'A', 'C', 'O', 'N'};

template <typename T>
void append_raw(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T read_raw(const std::string& bytes, std::size_t offset, const std::string& source, const char* field) {
  if (offset + sizeof(T) > bytes.size()) {
    throw CheckpointError(source + ": truncated file while reading field '" + field + "'");
  }
  T value;
  std::memcpy(&value, bytes.data() + offset, sizeof(T));
  return value;
}

const nlohmann::json& require(const nlohmann::json& j, const std::string& key, const std::string& source) {
  if (!j.is_object() || !j.contains(key)) throw CheckpointError(source + ": missing field '" + key + "'");
  return j.at(key);
}

}  // namespace

bool TensorContainer::contains(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return true;
  }
  return false;
}

const Tensor<float>& TensorContainer::get(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw CheckpointError("missing tensor '" + name + "'");
}

std::string serialize_container(const TensorContainer& c) {
  std::string data;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& [name, t] : c.tensors) {
    entries.push_back({{"name", name},
                       {"shape", {t.n(), t.c(), t.h(), t.w()}},
                       {"offset", data.size()},
                       {"count", t.numel()}});
    data.append(reinterpret_cast<const char*>(t.data()), sizeof(float) * static_cast<std::size_t>(t.numel()));
  }
  nlohmann::json header{{"kind", c.kind}, {"meta", c.meta}, {"tensors", entries}, {"data_sha256", sha256_hex(data)}};
  const std::string header_text = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  append_raw<std::uint32_t>(out, TensorContainer::kFormatVersion);
  append_raw<std::uint64_t>(out, header_text.size());
  out += header_text;
  out += data;
  return out;
}

TensorContainer parse_container(const std::string& bytes, const std::string& source) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError(source + ": bad magic, not a tensor container");
  }
  const auto version = read_raw<std::uint32_t>(bytes, 8, source, "format_version");
  if (version != TensorContainer::kFormatVersion) {
    throw CheckpointError(source + ": unsupported format_version " + std::to_string(version) + " (expected " +
                          std::to_string(TensorContainer::kFormatVersion) + ")");
  }
  const auto header_len = read_raw<std::uint64_t>(bytes, 12, source, "header_length");
  const std::size_t header_begin = 20;
  if (header_begin + header_len > bytes.size()) throw CheckpointError(source + ": truncated file in field 'header'");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(header_begin, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(source + ": field 'header' is not valid JSON (" + e.what() + ")");
  }
  const std::string data = bytes.substr(header_begin + header_len);
  const auto& digest = require(header, "data_sha256", source);
  if (!digest.is_string() || digest.get<std::string>() != sha256_hex(data)) {
    throw CheckpointError(source + ": field 'data_sha256' does not match the tensor data (file corrupt)");
  }

  TensorContainer c;
  try {
    c.kind = require(header, "kind", source).get<std::string>();
    c.meta = require(header, "meta", source);
    for (const auto& e : require(header, "tensors", source)) {
      const auto name = require(e, "name", source).get<std::string>();
      const auto shape = require(e, "shape", source).get<std::vector<Index>>();
      const auto offset = require(e, "offset", source).get<std::size_t>();
      const auto count = require(e, "count", source).get<Index>();
      if (shape.size() != 4) throw CheckpointError(source + ": tensor '" + name + "' field 'shape' must have 4 dims");
      const Shape s{shape[0], shape[1], shape[2], shape[3]};
      if (s.numel() != count || offset + sizeof(float) * static_cast<std::size_t>(count) > data.size()) {
        throw CheckpointError(source + ": tensor '" + name + "' has inconsistent field 'count'");
      }
      Tensor<float> t(s);
      std::memcpy(t.data(), data.data() + offset, sizeof(float) * static_cast<std::size_t>(count));
      c.tensors.emplace_back(name, std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(source + ": malformed header (" + e.what() + ")");
  }
  return c;
}

void write_container(const std::filesystem::path& path, const TensorContainer& c) {
  const std::string bytes = serialize_container(c);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw PathError("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw PathError("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

TensorContainer read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PathError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_container(ss.str(), path.string());
}

void load_parameters(const TensorContainer& c, const std::string& prefix, const ParameterList<float>& params) {
  for (const auto& p : params) {
    const std::string name = prefix + p.name;
    if (!c.contains(name)) throw CheckpointError("missing tensor '" + name + "'");
    const auto& t = c.get(name);
    if (!(t.shape() == p.var.shape())) {
      throw CheckpointError("tensor '" + name + "' has shape " + t.shape().str() + ", expected " + p.var.shape().str());
    }
    Var<float> v = p.var;
    v.mutable_value() = t;
  }
}

void store_parameters(TensorContainer& c, const std::string& prefix, const ParameterList<float>& params) {
  for (const auto& p : params) c.put(prefix + p.name, p.var.value());
}

void load_buffers(const TensorContainer& c, const std::string& prefix, const BufferList<float>& buffers) {
  for (const auto& b : buffers) {
    const std::string name = prefix + b.name;
    const auto& t = c.get(name);
    if (!(t.shape() == b.tensor->shape())) throw CheckpointError("tensor '" + name + "' has the wrong shape");
    *b.tensor = t;
  }
}

void store_buffers(TensorContainer& c, const std::string& prefix, const BufferList<float>& buffers) {
  for (const auto& b : buffers) c.put(prefix + b.name, *b.tensor);
}

}  // namespace osuda
