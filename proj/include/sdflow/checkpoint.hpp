#pragma once

// Self-describing binary checkpoint container: magic, format version, then
// named entries of (dtype code, shape, little-endian payload). Writes are
// atomic (temp file + rename). Loading validates shapes against the
// configured architecture and reports version / truncation / shape problems
// as distinct errors.

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

#include "sdflow/core.hpp"

namespace sdflow {

inline constexpr char kCkptMagic[4] = {'S', 'D', 'F', 'L'};
inline constexpr uint32_t kCkptVersion = 1;

enum class DtypeCode : uint8_t { f32 = 0, f64 = 1, u8 = 2, i64 = 3 };

struct CheckpointEntry {
  DtypeCode dtype;
  std::vector<uint64_t> dims;
  std::vector<uint8_t> bytes;

  uint64_t count() const {
    uint64_t c = 1;
    for (auto d : dims) c *= d;
    return c;
  }
};

class Checkpoint {
public:
  std::map<std::string, CheckpointEntry> entries;

  bool has(const std::string& name) const { return entries.count(name) > 0; }

  template <class R>
  void add_tensor(const std::string& name, const Tensor<R>& t) {
    CheckpointEntry e;
    e.dtype = sizeof(R) == 4 ? DtypeCode::f32 : DtypeCode::f64;
    e.dims = {uint64_t(t.shape.n), uint64_t(t.shape.c), uint64_t(t.shape.h), uint64_t(t.shape.w)};
    e.bytes.resize(t.v.size() * sizeof(R));
    std::memcpy(e.bytes.data(), t.v.data(), e.bytes.size());
    entries[name] = std::move(e);
  }

  void add_blob(const std::string& name, const std::string& data) {
    CheckpointEntry e;
    e.dtype = DtypeCode::u8;
    e.dims = {uint64_t(data.size())};
    e.bytes.assign(data.begin(), data.end());
    entries[name] = std::move(e);
  }

  void add_i64(const std::string& name, int64_t v) {
    CheckpointEntry e;
    e.dtype = DtypeCode::i64;
    e.dims = {1};
    e.bytes.resize(8);
    std::memcpy(e.bytes.data(), &v, 8);
    entries[name] = std::move(e);
  }

  template <class R>
  Tensor<R> get_tensor(const std::string& name, Shape4 expect) const {
    auto it = entries.find(name);
    if (it == entries.end())
      fail(ErrKind::mismatch, "checkpoint: missing entry '" + name + "'");
    const auto& e = it->second;
    require(e.dims.size() == 4, ErrKind::format, "checkpoint: entry '" + name + "' is not a tensor");
    Shape4 s{long(e.dims[0]), long(e.dims[1]), long(e.dims[2]), long(e.dims[3])};
    if (!(s == expect))
      fail(ErrKind::mismatch, "checkpoint: shape mismatch for entry '" + name + "': stored " +
                                  s.str() + ", model expects " + expect.str());
    Tensor<R> t(s);
    if (e.dtype == DtypeCode::f32) {
      std::vector<float> tmp(e.count());
      std::memcpy(tmp.data(), e.bytes.data(), e.bytes.size());
      for (size_t i = 0; i < tmp.size(); ++i) t.v[i] = R(tmp[i]);
    } else if (e.dtype == DtypeCode::f64) {
      std::vector<double> tmp(e.count());
      std::memcpy(tmp.data(), e.bytes.data(), e.bytes.size());
      for (size_t i = 0; i < tmp.size(); ++i) t.v[i] = R(tmp[i]);
    } else {
      fail(ErrKind::format, "checkpoint: entry '" + name + "' has a non-float dtype");
    }
    return t;
  }

  std::string get_blob(const std::string& name) const {
    auto it = entries.find(name);
    if (it == entries.end())
      fail(ErrKind::mismatch, "checkpoint: missing entry '" + name + "'");
    return std::string(it->second.bytes.begin(), it->second.bytes.end());
  }

  int64_t get_i64(const std::string& name) const {
    auto it = entries.find(name);
    if (it == entries.end())
      fail(ErrKind::mismatch, "checkpoint: missing entry '" + name + "'");
    int64_t v = 0;
    std::memcpy(&v, it->second.bytes.data(), 8);
    return v;
  }

  void save(const std::string& path) const {
    namespace fs = std::filesystem;
    std::string tmp = path + ".tmp";
    {
      std::ofstream f(tmp, std::ios::binary);
      if (!f) fail(ErrKind::io, "cannot write " + tmp);
      f.write(kCkptMagic, 4);
      write_u32(f, kCkptVersion);
      write_u64(f, entries.size());
      for (const auto& [name, e] : entries) {
        write_u32(f, uint32_t(name.size()));
        f.write(name.data(), std::streamsize(name.size()));
        uint8_t dt = uint8_t(e.dtype);
        f.write(reinterpret_cast<const char*>(&dt), 1);
        uint8_t nd = uint8_t(e.dims.size());
        f.write(reinterpret_cast<const char*>(&nd), 1);
        for (auto d : e.dims) write_u64(f, d);
        write_u64(f, e.bytes.size());
        f.write(reinterpret_cast<const char*>(e.bytes.data()), std::streamsize(e.bytes.size()));
      }
      if (!f) fail(ErrKind::io, "write failed: " + tmp);
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) fail(ErrKind::io, "atomic rename failed: " + path + ": " + ec.message());
  }

  static Checkpoint load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) fail(ErrKind::io, "cannot open checkpoint " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kCkptMagic, 4) != 0)
      fail(ErrKind::format, "not a checkpoint file: " + path);
    uint32_t version = read_u32(f);
    if (version != kCkptVersion)
      fail(ErrKind::format, "checkpoint version mismatch: file has " + std::to_string(version) +
                                ", reader expects " + std::to_string(kCkptVersion));
    uint64_t n = read_u64(f);
    Checkpoint ck;
    for (uint64_t i = 0; i < n; ++i) {
      uint32_t name_len = read_u32(f);
      std::string name(name_len, '\0');
      f.read(name.data(), name_len);
      uint8_t dt = 0, nd = 0;
      f.read(reinterpret_cast<char*>(&dt), 1);
      f.read(reinterpret_cast<char*>(&nd), 1);
      CheckpointEntry e;
      e.dtype = DtypeCode(dt);
      for (uint8_t d = 0; d < nd; ++d) e.dims.push_back(read_u64(f));
      uint64_t len = read_u64(f);
      e.bytes.resize(len);
      f.read(reinterpret_cast<char*>(e.bytes.data()), std::streamsize(len));
      if (!f) fail(ErrKind::format, "truncated checkpoint while reading entry '" + name + "'");
      ck.entries[name] = std::move(e);
    }
    return ck;
  }

private:
  static void write_u32(std::ofstream& f, uint32_t v) {
    f.write(reinterpret_cast<const char*>(&v), 4);
  }
  static void write_u64(std::ofstream& f, uint64_t v) {
    f.write(reinterpret_cast<const char*>(&v), 8);
  }
  static uint32_t read_u32(std::ifstream& f) {
    uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 4);
    if (!f) fail(ErrKind::format, "truncated checkpoint header");
    return v;
  }
  static uint64_t read_u64(std::ifstream& f) {
    uint64_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 8);
    if (!f) fail(ErrKind::format, "truncated checkpoint header");
    return v;
  }
};

}  // namespace sdflow
