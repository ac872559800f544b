#pragma once

// Checkpoint layout:
//
//   shapo-checkpoint
//   version 1
//   dtype f32|f64
//   config <key> <value>          (one line per ModelConfig field)
//   meta <key> <value>            (free-form provenance, e.g. config_hash)
//   param <name> <dims> <byte offset> <count>
//   end
//   <little-endian arrays in manifest order>
//
// Byte offsets are relative to the first byte after the "end" line.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "shapo/error.hpp"
#include "shapo/model.hpp"
#include "shapo/parameter_store.hpp"

namespace shapo {

enum class StorageType { f32, f64 };

struct Checkpoint {
  ModelConfig config;
  ParameterStore params;
  std::map<std::string, std::string> meta;
  StorageType dtype = StorageType::f32;
};

inline constexpr int kCheckpointVersion = 1;

/// Rounds every parameter to the nearest 32-bit float, i.e. the values a
/// f32 checkpoint will reproduce on load.
inline void round_to_f32(ParameterStore& p) {
  for (std::size_t e = 0; e < p.size(); ++e)
    for (double& v : p.value(e).storage()) v = static_cast<double>(static_cast<float>(v));
}

namespace detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
void put_le(std::string& out, T v) {
  static_assert(sizeof(T) == 4 || sizeof(T) == 8);
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  U bits = std::bit_cast<U>(v);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(const unsigned char* p) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<U>(p[i]) << (8 * i);
  return std::bit_cast<T>(bits);
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  const ModelConfig& c = ck.config;
  const std::size_t width = ck.dtype == StorageType::f32 ? 4 : 8;
  std::ostringstream h;
  h << "shapo-checkpoint\n";
  h << "version " << kCheckpointVersion << "\n";
  h << "dtype " << (ck.dtype == StorageType::f32 ? "f32" : "f64") << "\n";
  h << "config vocab_size " << c.vocab_size << "\n";
  h << "config d_model " << c.d_model << "\n";
  h << "config n_layers " << c.n_layers << "\n";
  h << "config n_heads " << c.n_heads << "\n";
  h << "config mlp_hidden " << c.mlp_hidden << "\n";
  h << "config max_seq_len " << c.max_seq_len << "\n";
  h << "config seed " << c.seed << "\n";
  for (const auto& [k, v] : ck.meta) {
    detail::require<FormatError>(k.find_first_of(" \n") == std::string::npos && v.find('\n') == std::string::npos,
                                 "checkpoint meta key/value contains separators: ", k);
    h << "meta " << k << " " << v << "\n";
  }
  std::size_t offset = 0;
  for (std::size_t e = 0; e < ck.params.size(); ++e) {
    const Tensor& t = ck.params.value(e);
    h << "param " << ck.params.name(e) << " ";
    for (std::size_t i = 0; i < t.shape().size(); ++i) h << (i ? "," : "") << t.shape()[i];
    h << " " << offset << " " << t.size() << "\n";
    offset += t.size() * width;
  }
  h << "end\n";
  std::string out = h.str();
  out.reserve(out.size() + offset);
  for (std::size_t e = 0; e < ck.params.size(); ++e) {
    for (double v : ck.params.value(e).values()) {
      if (ck.dtype == StorageType::f32) {
        detail::put_le(out, static_cast<float>(v));
      } else {
        detail::put_le(out, v);
      }
    }
  }
  return out;
}

inline Checkpoint parse_checkpoint(const std::string& bytes) {
  Checkpoint ck;
  std::size_t pos = 0;
  auto next_line = [&]() -> std::string {
    const std::size_t nl = bytes.find('\n', pos);
    detail::require<FormatError>(nl != std::string::npos, "checkpoint header truncated");
    std::string line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
  };
  detail::require<FormatError>(next_line() == "shapo-checkpoint", "not a shapo checkpoint");
  struct Manifest {
    std::string name;
    std::vector<std::size_t> shape;
    std::size_t offset, count;
  };
  std::vector<Manifest> manifest;
  int version = -1;
  for (;;) {
    const std::string line = next_line();
    if (line == "end") break;
    std::istringstream is(line);
    std::string tag;
    is >> tag;
    if (tag == "version") {
      is >> version;
      detail::require<FormatError>(version == kCheckpointVersion, "unsupported checkpoint version ", version);
    } else if (tag == "dtype") {
      std::string d;
      is >> d;
      detail::require<FormatError>(d == "f32" || d == "f64", "unknown dtype ", d);
      ck.dtype = d == "f32" ? StorageType::f32 : StorageType::f64;
    } else if (tag == "config") {
      std::string key;
      is >> key;
      ModelConfig& c = ck.config;
      if (key == "vocab_size") is >> c.vocab_size;
      else if (key == "d_model") is >> c.d_model;
      else if (key == "n_layers") is >> c.n_layers;
      else if (key == "n_heads") is >> c.n_heads;
      else if (key == "mlp_hidden") is >> c.mlp_hidden;
      else if (key == "max_seq_len") is >> c.max_seq_len;
      else if (key == "seed") is >> c.seed;
      else detail::fail<FormatError>("unknown config key ", key);
      detail::require<FormatError>(!is.fail(), "malformed config line: ", line);
    } else if (tag == "meta") {
      std::string key, value;
      is >> key;
      std::getline(is >> std::ws, value);
      ck.meta[key] = value;
    } else if (tag == "param") {
      Manifest m;
      std::string dims;
      is >> m.name >> dims >> m.offset >> m.count;
      detail::require<FormatError>(!is.fail(), "malformed param line: ", line);
      std::istringstream ds(dims);
      std::string part;
      while (std::getline(ds, part, ',')) m.shape.push_back(std::stoul(part));
      manifest.push_back(std::move(m));
    } else {
      detail::fail<FormatError>("unknown checkpoint header line: ", line);
    }
  }
  detail::require<FormatError>(version == kCheckpointVersion, "checkpoint header missing version");
  const std::size_t width = ck.dtype == StorageType::f32 ? 4 : 8;
  const auto* base = reinterpret_cast<const unsigned char*>(bytes.data()) + pos;
  const std::size_t avail = bytes.size() - pos;
  for (const auto& m : manifest) {
    detail::require<FormatError>(m.offset + m.count * width <= avail, "checkpoint payload truncated at ", m.name);
    std::vector<double> data(m.count);
    for (std::size_t i = 0; i < m.count; ++i) {
      const unsigned char* p = base + m.offset + i * width;
      data[i] = ck.dtype == StorageType::f32 ? static_cast<double>(detail::get_le<float>(p)) : detail::get_le<double>(p);
    }
    ck.params.add(m.name, Tensor(m.shape, std::move(data)));
  }
  ck.config.validate();
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary);
  detail::require<FormatError>(os.good(), "cannot open ", path, " for writing");
  const std::string bytes = serialize_checkpoint(ck);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  detail::require<FormatError>(os.good(), "write failed for ", path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  detail::require<FormatError>(is.good(), "cannot open checkpoint ", path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_checkpoint(ss.str());
}

}  // namespace shapo
