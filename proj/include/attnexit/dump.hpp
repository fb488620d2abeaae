#pragma once

// Tensor dump files: the binary carrier for attention logits, hidden states
// and checkpoint parameters.
//
//   bytes 0..7   magic "ATNDUMP1"
//   u32 LE       number of dims
//   u64 LE       each dim
//   f32 LE       payload, row-major, product(dims) values
//
// An optional JSON sidecar at <path>.manifest names the model, its layer and
// head counts and the sequences the payload covers:
//
//   {"format": "ATNDUMP1", "model_name": "...", "n_layers": N, "n_heads": H,
//    "sequences": [{"id": "...", "length": L}, ...],
//    "attributes": {"key": "value", ...}}
//
// For rank-4 dumps (layers, heads, L, L) the manifest must list exactly one
// sequence of length L; rank-3 dumps (layers or layers+1, L, d) likewise.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attnexit/error.hpp"

namespace attnexit {

inline constexpr std::array<char, 8> kDumpMagic = {'A', 'T', 'N', 'D', 'U', 'M', 'P', '1'};

struct SequenceEntry {
  std::string id;
  std::uint64_t length = 0;
  friend bool operator==(const SequenceEntry&, const SequenceEntry&) = default;
};

struct DumpManifest {
  std::string model_name;
  std::uint64_t n_layers = 0;
  std::uint64_t n_heads = 0;
  std::vector<SequenceEntry> sequences;
  std::map<std::string, std::string> attributes;
  friend bool operator==(const DumpManifest&, const DumpManifest&) = default;
};

struct TensorDump {
  std::vector<std::uint64_t> dims;
  std::vector<float> payload;
  std::optional<DumpManifest> manifest;

  std::uint64_t element_count() const {
    std::uint64_t n = dims.empty() ? 0 : 1;
    for (auto d : dims) n *= d;
    return n;
  }

  friend bool operator==(const TensorDump&, const TensorDump&) = default;
};

inline std::filesystem::path manifest_path(const std::filesystem::path& dump_path) {
  return std::filesystem::path(dump_path.string() + ".manifest");
}

inline nlohmann::json to_json(const DumpManifest& m) {
  nlohmann::json seqs = nlohmann::json::array();
  for (const auto& s : m.sequences) seqs.push_back({{"id", s.id}, {"length", s.length}});
  nlohmann::json j = {{"format", "ATNDUMP1"},
                      {"model_name", m.model_name},
                      {"n_layers", m.n_layers},
                      {"n_heads", m.n_heads},
                      {"sequences", seqs}};
  if (!m.attributes.empty()) j["attributes"] = m.attributes;
  return j;
}

inline DumpManifest manifest_from_json(const nlohmann::json& j) {
  try {
    DumpManifest m;
    m.model_name = j.at("model_name").get<std::string>();
    m.n_layers = j.at("n_layers").get<std::uint64_t>();
    m.n_heads = j.at("n_heads").get<std::uint64_t>();
    for (const auto& s : j.at("sequences")) {
      m.sequences.push_back({s.at("id").get<std::string>(), s.at("length").get<std::uint64_t>()});
    }
    if (j.contains("attributes")) {
      m.attributes = j.at("attributes").get<std::map<std::string, std::string>>();
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::data, "malformed dump manifest: ", e.what());
  }
}

namespace detail {

inline void check_manifest(const std::vector<std::uint64_t>& dims, const DumpManifest& m) {
  auto mismatch = [&](auto&&... why) { fail(ErrorKind::manifest_mismatch, why...); };
  if (dims.size() == 4) {
    if (dims[0] != m.n_layers || dims[1] != m.n_heads) {
      mismatch("manifest declares ", m.n_layers, " layers x ", m.n_heads, " heads, payload has ",
               dims[0], " x ", dims[1]);
    }
    if (m.sequences.size() != 1) {
      mismatch("attention dump must describe exactly one sequence, manifest lists ",
               m.sequences.size());
    }
    if (dims[2] != m.sequences[0].length || dims[3] != m.sequences[0].length) {
      mismatch("sequence '", m.sequences[0].id, "' has length ", m.sequences[0].length,
               ", payload grid is ", dims[2], "x", dims[3]);
    }
  } else if (dims.size() == 3) {
    if (dims[0] != m.n_layers && dims[0] != m.n_layers + 1) {
      mismatch("hidden dump has ", dims[0], " layer slices, manifest declares ", m.n_layers);
    }
    if (m.sequences.size() != 1 || dims[1] != m.sequences[0].length) {
      mismatch("hidden dump sequence length does not match manifest");
    }
  }
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline std::uint64_t get_le(const unsigned char* p, int nbytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < nbytes; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline std::string encode_dump(const TensorDump& t) {
  if (t.dims.empty()) fail(ErrorKind::invalid_argument, "tensor dump needs at least one dim");
  for (auto d : t.dims) {
    if (d == 0) fail(ErrorKind::invalid_argument, "tensor dump dims must be >= 1");
  }
  if (t.payload.size() != t.element_count()) {
    fail(ErrorKind::invalid_argument, "payload holds ", t.payload.size(),
         " values, dims require ", t.element_count());
  }
  if (t.manifest) detail::check_manifest(t.dims, *t.manifest);

  std::string out(kDumpMagic.begin(), kDumpMagic.end());
  out.reserve(12 + 8 * t.dims.size() + 4 * t.payload.size());
  detail::put_u32(out, static_cast<std::uint32_t>(t.dims.size()));
  for (auto d : t.dims) detail::put_u64(out, d);
  for (float f : t.payload) detail::put_u32(out, std::bit_cast<std::uint32_t>(f));
  return out;
}

inline TensorDump decode_dump(const std::string& bytes, const std::string& origin = "<memory>") {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t n = bytes.size();
  if (n < kDumpMagic.size() || std::memcmp(p, kDumpMagic.data(), kDumpMagic.size()) != 0) {
    fail(ErrorKind::bad_magic, origin, ": not a tensor dump (bad magic)");
  }
  std::size_t off = kDumpMagic.size();
  if (n < off + 4) fail(ErrorKind::truncated, origin, ": truncated before dim count");
  const auto ndims = static_cast<std::uint32_t>(detail::get_le(p + off, 4));
  off += 4;
  if (ndims == 0) fail(ErrorKind::data, origin, ": dump declares zero dims");
  if (n < off + 8ull * ndims) fail(ErrorKind::truncated, origin, ": truncated inside dims");

  TensorDump t;
  t.dims.resize(ndims);
  for (auto& d : t.dims) {
    d = detail::get_le(p + off, 8);
    off += 8;
    if (d == 0) fail(ErrorKind::data, origin, ": dump has a zero extent");
  }
  const std::uint64_t count = t.element_count();
  const std::uint64_t need = off + 4 * count;
  if (n < need) {
    fail(ErrorKind::truncated, origin, ": payload truncated, expected ", need, " bytes, got ", n);
  }
  if (n > need) fail(ErrorKind::data, origin, ": ", n - need, " trailing bytes after payload");
  t.payload.resize(count);
  for (auto& f : t.payload) {
    f = std::bit_cast<float>(static_cast<std::uint32_t>(detail::get_le(p + off, 4)));
    off += 4;
  }
  return t;
}

inline void write_dump(const TensorDump& t, const std::filesystem::path& path) {
  const std::string bytes = encode_dump(t);
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::io, "cannot open ", path.string(), " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorKind::io, "write failed for ", path.string());
  }
  const auto mpath = manifest_path(path);
  if (t.manifest) {
    std::ofstream out(mpath, std::ios::trunc);
    if (!out) fail(ErrorKind::io, "cannot open ", mpath.string(), " for writing");
    out << to_json(*t.manifest).dump(2) << '\n';
  } else {
    std::error_code ec;
    std::filesystem::remove(mpath, ec);
  }
}

inline TensorDump read_dump(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open ", path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  TensorDump t = decode_dump(bytes, path.string());

  const auto mpath = manifest_path(path);
  if (std::filesystem::exists(mpath)) {
    std::ifstream min(mpath);
    nlohmann::json j;
    try {
      min >> j;
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::data, mpath.string(), ": ", e.what());
    }
    t.manifest = manifest_from_json(j);
    detail::check_manifest(t.dims, *t.manifest);
  }
  return t;
}

}  // namespace attnexit
