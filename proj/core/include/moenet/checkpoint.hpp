#pragma once

// Flat binary container for named tensors: header JSON (format version,
// config digest, embedded model config) plus raw little-endian payloads.
// Round-trips bitwise.

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "moenet/common.hpp"
#include "moenet/data.hpp"
#include "moenet/module.hpp"

namespace moenet {

inline constexpr char kBlobMagic[8] = {'M', 'O', 'E', 'B', 'L', 'O', 'B', '1'};
inline constexpr uint32_t kBlobVersion = 1;

enum class BlobDtype : uint8_t { F32 = 0, F64 = 1, I32 = 2 };

struct BlobEntry {
  std::string name;
  BlobDtype dtype = BlobDtype::F32;
  std::array<uint32_t, 4> dims = {1, 1, 1, 1};
  std::vector<uint8_t> data;

  uint64_t elem_count() const {
    return static_cast<uint64_t>(dims[0]) * dims[1] * dims[2] * dims[3];
  }
};

struct BlobFile {
  nlohmann::json header;
  std::vector<BlobEntry> entries;
};

// Write-to-temp-then-rename; readers never observe a partial file.
inline void atomic_write_file(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out.is_open())
      throw FormatError(strcat_msg("cannot open ", tmp, " for writing"));
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError(strcat_msg("write failed: ", tmp));
  }
  std::filesystem::rename(tmp, path);
}

namespace detail {
template <typename V>
void append_raw(std::string& out, const V& v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(V));
}
template <typename V>
V read_raw(std::ifstream& in, const char* what) {
  V v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!in) throw FormatError(strcat_msg("blob: truncated reading ", what));
  return v;
}
}  // namespace detail

inline void write_blob(const std::string& path, const BlobFile& blob) {
  std::string out;
  out.append(kBlobMagic, sizeof(kBlobMagic));
  detail::append_raw(out, kBlobVersion);
  const std::string header = blob.header.dump();
  detail::append_raw(out, static_cast<uint32_t>(header.size()));
  out.append(header);
  detail::append_raw(out, static_cast<uint64_t>(blob.entries.size()));
  for (const auto& e : blob.entries) {
    detail::append_raw(out, static_cast<uint16_t>(e.name.size()));
    out.append(e.name);
    detail::append_raw(out, static_cast<uint8_t>(e.dtype));
    for (uint32_t d : e.dims) detail::append_raw(out, d);
    detail::append_raw(out, static_cast<uint64_t>(e.data.size()));
    out.append(reinterpret_cast<const char*>(e.data.data()), e.data.size());
  }
  atomic_write_file(path, out);
}

inline BlobFile read_blob(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.is_open()) throw FormatError(strcat_msg("cannot open ", path));
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kBlobMagic, 8) != 0)
    throw FormatError(strcat_msg(path, ": not a moenet blob file"));
  const auto version = detail::read_raw<uint32_t>(in, "version");
  if (version != kBlobVersion)
    throw FormatError(strcat_msg(path, ": unsupported blob version ", version));
  const auto header_len = detail::read_raw<uint32_t>(in, "header length");
  std::string header(header_len, '\0');
  in.read(header.data(), header_len);
  if (!in) throw FormatError("blob: truncated header");
  BlobFile blob;
  blob.header = nlohmann::json::parse(header);
  const auto n = detail::read_raw<uint64_t>(in, "entry count");
  blob.entries.resize(n);
  for (auto& e : blob.entries) {
    const auto name_len = detail::read_raw<uint16_t>(in, "name length");
    e.name.resize(name_len);
    in.read(e.name.data(), name_len);
    e.dtype = static_cast<BlobDtype>(detail::read_raw<uint8_t>(in, "dtype"));
    for (auto& d : e.dims) d = detail::read_raw<uint32_t>(in, "dims");
    const auto bytes = detail::read_raw<uint64_t>(in, "data length");
    e.data.resize(bytes);
    in.read(reinterpret_cast<char*>(e.data.data()),
            static_cast<std::streamsize>(bytes));
    if (!in) throw FormatError(strcat_msg("blob: truncated entry ", e.name));
  }
  return blob;
}

// ---------------------------------------------------------------------------
// Model state <-> blob
// ---------------------------------------------------------------------------

template <typename T>
constexpr BlobDtype dtype_of() {
  if constexpr (std::is_same_v<T, float>) return BlobDtype::F32;
  else if constexpr (std::is_same_v<T, double>) return BlobDtype::F64;
  else return BlobDtype::I32;
}

template <typename T>
BlobFile model_state_blob(Module<T>& model, const nlohmann::json& model_config,
                          const std::string& config_digest) {
  BlobFile blob;
  blob.header = {{"format", "moenet-checkpoint"},
                 {"version", 1},
                 {"config_digest", config_digest},
                 {"model_config", model_config}};
  model.visit_parameters([&](const std::string& name, Parameter<T>& p) {
    BlobEntry e;
    e.name = name;
    e.dtype = dtype_of<T>();
    const Shape& s = p.value.shape();
    e.dims = {static_cast<uint32_t>(s.n), static_cast<uint32_t>(s.c),
              static_cast<uint32_t>(s.h), static_cast<uint32_t>(s.w)};
    auto vals = p.value.values();
    e.data.resize(vals.size() * sizeof(T));
    std::memcpy(e.data.data(), vals.data(), e.data.size());
    blob.entries.push_back(std::move(e));
  });
  model.visit_buffers([&](const std::string& name, std::vector<double>& buf) {
    BlobEntry e;
    e.name = name;
    e.dtype = BlobDtype::F64;
    e.dims = {1, static_cast<uint32_t>(buf.size()), 1, 1};
    e.data.resize(buf.size() * sizeof(double));
    std::memcpy(e.data.data(), buf.data(), e.data.size());
    blob.entries.push_back(std::move(e));
  });
  return blob;
}

template <typename T>
void save_checkpoint(const std::string& path, Module<T>& model,
                     const nlohmann::json& model_config,
                     const std::string& config_digest) {
  write_blob(path, model_state_blob(model, model_config, config_digest));
}

inline nlohmann::json read_checkpoint_header(const std::string& path) {
  return read_blob(path).header;
}

// Strict by-name restore: every parameter and buffer must match exactly.
template <typename T>
void load_model_state(Module<T>& model, const BlobFile& blob) {
  std::map<std::string, const BlobEntry*> by_name;
  for (const auto& e : blob.entries) {
    if (by_name.count(e.name))
      throw FormatError(strcat_msg("checkpoint: duplicate entry ", e.name));
    by_name[e.name] = &e;
  }
  size_t used = 0;
  model.visit_parameters([&](const std::string& name, Parameter<T>& p) {
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw FormatError(strcat_msg("checkpoint: missing parameter ", name));
    const BlobEntry& e = *it->second;
    if (e.dtype != dtype_of<T>())
      throw FormatError(strcat_msg("checkpoint: dtype mismatch for ", name));
    if (e.elem_count() != static_cast<uint64_t>(p.value.numel()))
      throw FormatError(strcat_msg("checkpoint: shape mismatch for ", name));
    std::memcpy(p.value.mutable_values().data(), e.data.data(), e.data.size());
    ++used;
  });
  model.visit_buffers([&](const std::string& name, std::vector<double>& buf) {
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw FormatError(strcat_msg("checkpoint: missing buffer ", name));
    const BlobEntry& e = *it->second;
    if (e.dtype != BlobDtype::F64 || e.elem_count() != buf.size())
      throw FormatError(strcat_msg("checkpoint: buffer mismatch for ", name));
    std::memcpy(buf.data(), e.data.data(), e.data.size());
    ++used;
  });
  if (used != blob.entries.size())
    throw FormatError(strcat_msg("checkpoint: ", blob.entries.size() - used,
                                 " unused entries (model mismatch)"));
}

template <typename T>
void load_checkpoint(const std::string& path, Module<T>& model,
                     const std::string& expected_digest = "") {
  BlobFile blob = read_blob(path);
  if (!expected_digest.empty()) {
    const std::string found =
        blob.header.value("config_digest", std::string());
    if (found != expected_digest)
      throw ConfigError(strcat_msg(
          "checkpoint config digest mismatch: checkpoint has ", found,
          ", expected ", expected_digest));
  }
  load_model_state(model, blob);
}

// Datasets reuse the same container (synthetic data export).
inline void save_dataset_blob(const std::string& path, const Dataset& ds) {
  BlobFile blob;
  blob.header = {{"format", "moenet-dataset"},
                 {"version", 1},
                 {"split", ds.split},
                 {"class_count", ds.class_count}};
  BlobEntry images;
  images.name = "images";
  images.dtype = BlobDtype::F32;
  images.dims = {static_cast<uint32_t>(ds.size()),
                 static_cast<uint32_t>(ds.channels),
                 static_cast<uint32_t>(ds.height),
                 static_cast<uint32_t>(ds.width)};
  images.data.resize(ds.images.size() * sizeof(float));
  std::memcpy(images.data.data(), ds.images.data(), images.data.size());
  blob.entries.push_back(std::move(images));
  BlobEntry labels;
  labels.name = "labels";
  labels.dtype = BlobDtype::I32;
  labels.dims = {static_cast<uint32_t>(ds.size()), 1, 1, 1};
  labels.data.resize(ds.labels.size() * sizeof(int32_t));
  std::memcpy(labels.data.data(), ds.labels.data(), labels.data.size());
  blob.entries.push_back(std::move(labels));
  write_blob(path, blob);
}

inline Dataset load_dataset_blob(const std::string& path) {
  BlobFile blob = read_blob(path);
  if (blob.header.value("format", std::string()) != "moenet-dataset")
    throw FormatError(strcat_msg(path, ": not a dataset blob"));
  Dataset ds;
  ds.split = blob.header.value("split", std::string("train"));
  ds.class_count = blob.header.value("class_count", 0);
  for (const auto& e : blob.entries) {
    if (e.name == "images") {
      ds.channels = static_cast<int>(e.dims[1]);
      ds.height = static_cast<int>(e.dims[2]);
      ds.width = static_cast<int>(e.dims[3]);
      ds.images.resize(e.elem_count());
      std::memcpy(ds.images.data(), e.data.data(), e.data.size());
    } else if (e.name == "labels") {
      ds.labels.resize(e.dims[0]);
      std::memcpy(ds.labels.data(), e.data.data(), e.data.size());
    }
  }
  ds.validate();
  return ds;
}

}  // namespace moenet
