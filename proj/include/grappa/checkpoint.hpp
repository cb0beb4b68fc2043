#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "grappa/common.hpp"
#include "grappa/nn.hpp"
#include "grappa/sha256.hpp"

// Checkpoint container, format "GRAPPAC1":
//
//   bytes 0..7   magic "GRAPPAC1"
//   bytes 8..11  u32 little-endian manifest length M
//   bytes 12..   UTF-8 JSON manifest of M bytes
//   then         raw little-endian tensor payload
//
// The manifest records format_version, a `kind` string, an arbitrary
// config/meta block, and for every tensor its name, shape, dtype
// ("f32" | "f64" | "i32" | "u64") and byte offset into the payload.
// Matrices are stored row-major. Writers emit to a temp file and rename, so
// readers never observe a partial artifact.

namespace grappa {

namespace detail {
template <typename S>
const char* dtype_name();
template <>
inline const char* dtype_name<float>() { return "f32"; }
template <>
inline const char* dtype_name<double>() { return "f64"; }
}  // namespace detail

inline constexpr char kCheckpointMagic[8] = {'G', 'R', 'A', 'P', 'P', 'A', 'C', '1'};
inline constexpr int kCheckpointVersion = 1;

struct TensorInfo {
  std::string name;
  std::string dtype;
  int64_t rows = 0, cols = 0;
  uint64_t offset = 0, bytes = 0;
};

class CheckpointWriter {
 public:
  explicit CheckpointWriter(const std::string& kind) {
    manifest_["format_version"] = kCheckpointVersion;
    manifest_["kind"] = kind;
    manifest_["tensors"] = nlohmann::json::array();
  }

  nlohmann::json& manifest() { return manifest_; }

  template <typename S>
  void add_mat(const std::string& name, const Mat<S>& m) {
    add_raw(name, detail::dtype_name<S>(), m.rows(), m.cols(),
            reinterpret_cast<const char*>(m.data()), m.size() * sizeof(S));
  }

  void add_i32(const std::string& name, const std::vector<int32_t>& v) {
    add_raw(name, "i32", static_cast<int64_t>(v.size()), 1,
            reinterpret_cast<const char*>(v.data()), v.size() * sizeof(int32_t));
  }

  void add_u64(const std::string& name, const std::vector<uint64_t>& v) {
    add_raw(name, "u64", static_cast<int64_t>(v.size()), 1,
            reinterpret_cast<const char*>(v.data()), v.size() * sizeof(uint64_t));
  }

  template <typename S>
  void add_params(const std::string& prefix, const std::vector<NamedParam<S>>& params) {
    for (const auto& np : params) add_mat(prefix + np.name, np.p->v);
  }

  void save(const std::string& path) {
    const std::string body = manifest_.dump();
    const std::string tmp = path + ".tmp";
    {
      std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
      if (!f) throw IoError("checkpoint: cannot open " + tmp);
      f.write(kCheckpointMagic, 8);
      const uint32_t len = static_cast<uint32_t>(body.size());
      char lenbuf[4];
      std::memcpy(lenbuf, &len, 4);
      f.write(lenbuf, 4);
      f.write(body.data(), static_cast<std::streamsize>(body.size()));
      f.write(payload_.data(), static_cast<std::streamsize>(payload_.size()));
      if (!f) throw IoError("checkpoint: short write to " + tmp);
    }
    std::filesystem::rename(tmp, path);
  }

 private:
  void add_raw(const std::string& name, const char* dtype, int64_t rows, int64_t cols,
               const char* data, size_t bytes) {
    nlohmann::json t{{"name", name}, {"dtype", dtype}, {"rows", rows}, {"cols", cols},
                     {"offset", payload_.size()}, {"bytes", bytes}};
    manifest_["tensors"].push_back(std::move(t));
    payload_.insert(payload_.end(), data, data + bytes);
  }

  nlohmann::json manifest_;
  std::vector<char> payload_;
};

class Checkpoint {
 public:
  static Checkpoint load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("checkpoint: cannot open " + path);
    char magic[8];
    f.read(magic, 8);
    if (f.gcount() != 8 || std::memcmp(magic, kCheckpointMagic, 8) != 0)
      throw IoError("checkpoint: bad magic in " + path);
    char lenbuf[4];
    f.read(lenbuf, 4);
    uint32_t len = 0;
    std::memcpy(&len, lenbuf, 4);
    std::string body(len, '\0');
    f.read(body.data(), len);
    if (f.gcount() != static_cast<std::streamsize>(len))
      throw IoError("checkpoint: truncated manifest in " + path);

    Checkpoint ck;
    ck.manifest_ = nlohmann::json::parse(body);
    if (ck.manifest_.value("format_version", -1) != kCheckpointVersion)
      throw IoError("checkpoint: unsupported format_version in " + path);
    ck.payload_.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
    for (const auto& t : ck.manifest_.at("tensors")) {
      TensorInfo info{t.at("name"), t.at("dtype"), t.at("rows"), t.at("cols"),
                      t.at("offset"), t.at("bytes")};
      if (info.offset + info.bytes > ck.payload_.size())
        throw IoError("checkpoint: tensor payload out of range in " + path);
      ck.index_.emplace(info.name, info);
    }
    return ck;
  }

  const nlohmann::json& manifest() const { return manifest_; }
  std::string kind() const { return manifest_.value("kind", ""); }
  bool has(const std::string& name) const { return index_.count(name) > 0; }

  const TensorInfo& info(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw IoError("checkpoint: missing tensor " + name);
    return it->second;
  }

  template <typename S>
  Mat<S> get_mat(const std::string& name) const {
    const TensorInfo& t = info(name);
    if (t.dtype != detail::dtype_name<S>())
      throw IoError("checkpoint: dtype mismatch for " + name + " (" + t.dtype + ")");
    Mat<S> m(t.rows, t.cols);
    std::memcpy(m.data(), payload_.data() + t.offset, t.bytes);
    return m;
  }

  std::vector<int32_t> get_i32(const std::string& name) const {
    const TensorInfo& t = info(name);
    if (t.dtype != "i32") throw IoError("checkpoint: dtype mismatch for " + name);
    std::vector<int32_t> v(static_cast<size_t>(t.rows));
    std::memcpy(v.data(), payload_.data() + t.offset, t.bytes);
    return v;
  }

  std::vector<uint64_t> get_u64(const std::string& name) const {
    const TensorInfo& t = info(name);
    if (t.dtype != "u64") throw IoError("checkpoint: dtype mismatch for " + name);
    std::vector<uint64_t> v(static_cast<size_t>(t.rows));
    std::memcpy(v.data(), payload_.data() + t.offset, t.bytes);
    return v;
  }

  // Copies stored tensors into an existing parameter registry; every
  // parameter must be present with exactly matching shape.
  template <typename S>
  void load_params(const std::string& prefix, std::vector<NamedParam<S>>& params) const {
    for (auto& np : params) {
      Mat<S> m = get_mat<S>(prefix + np.name);
      if (m.rows() != np.p->v.rows() || m.cols() != np.p->v.cols())
        throw ShapeError("checkpoint: shape mismatch for " + np.name);
      np.p->v = std::move(m);
    }
  }

 private:
  nlohmann::json manifest_;
  std::vector<char> payload_;
  std::map<std::string, TensorInfo> index_;
};

// SHA-256 over (name, shape, raw bytes) of every parameter in registry
// order — the before/after audit primitive for frozen-parameter checks.
template <typename S>
std::string fingerprint_params(const std::vector<NamedParam<S>>& params) {
  Sha256 h;
  for (const auto& np : params) {
    h.update(np.name.data(), np.name.size());
    const int64_t shape[2] = {np.p->v.rows(), np.p->v.cols()};
    h.update(shape, sizeof(shape));
    h.update(np.p->v.data(), np.p->v.size() * sizeof(S));
  }
  return h.hex();
}

inline std::string fingerprint_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("fingerprint: cannot open " + path);
  Sha256 h;
  char buf[1 << 16];
  while (f) {
    f.read(buf, sizeof(buf));
    h.update(buf, static_cast<size_t>(f.gcount()));
  }
  return h.hex();
}

}  // namespace grappa
