#pragma once

// Binary checkpoint file:
//   "FLEXCKPT"            8 bytes
//   version               u32 (= 1)
//   metadata              u32 length + UTF-8 JSON
//   record count          u32
//   per record: u32 name length, name, u32 rank, u32 dims[rank],
//               f32 payload (product of dims values)
// All integers and floats are little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "flexctl/errors.hpp"
#include "flexctl/tensor.hpp"

namespace flexctl {

inline constexpr char kCheckpointMagic[8] = {'F', 'L', 'E', 'X', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

struct Record {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct Checkpoint {
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<Record> records;

  const Record* find(const std::string& name) const {
    for (const auto& r : records) {
      if (r.name == name) return &r;
    }
    return nullptr;
  }

  template <class T>
  void add(const std::string& name, const Tensor<T>& t) {
    records.push_back({name, t.shape(), std::vector<float>(t.data().begin(), t.data().end())});
  }
  void add(const std::string& name, Shape shape, std::vector<float> data) {
    records.push_back({name, std::move(shape), std::move(data)});
  }
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : b_(bytes) {}

  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == b_.size(); }

  void need(std::size_t n, const char* what) {
    if (b_.size() - pos_ < n) throw ParseError(std::string("truncated checkpoint while reading ") + what, pos_);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v;
    std::memcpy(&v, b_.data() + pos_, 4);
    pos_ += 4;
    return v;
  }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void floats(float* dst, std::size_t n, const char* what) {
    if (n > (b_.size() - pos_) / 4) throw ParseError(std::string("truncated checkpoint while reading ") + what, pos_);
    std::memcpy(dst, b_.data() + pos_, n * 4);
    pos_ += n * 4;
  }

 private:
  const std::string& b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  std::string out(kCheckpointMagic, 8);
  detail::put_u32(out, kCheckpointVersion);
  const std::string meta = ck.metadata.dump();
  detail::put_u32(out, static_cast<std::uint32_t>(meta.size()));
  out += meta;
  detail::put_u32(out, static_cast<std::uint32_t>(ck.records.size()));
  for (const auto& r : ck.records) {
    if (shape_numel(r.shape) != r.data.size()) throw UsageError("checkpoint record '" + r.name + "' size mismatch");
    detail::put_u32(out, static_cast<std::uint32_t>(r.name.size()));
    out += r.name;
    detail::put_u32(out, static_cast<std::uint32_t>(r.shape.size()));
    for (auto d : r.shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
    out.append(reinterpret_cast<const char*>(r.data.data()), r.data.size() * 4);
  }
  return out;
}

inline Checkpoint parse_checkpoint(const std::string& bytes) {
  detail::Reader rd(bytes);
  const std::string magic = rd.bytes(8, "magic");
  if (std::memcmp(magic.data(), kCheckpointMagic, 8) != 0) throw ParseError("bad checkpoint magic", 0);
  const std::uint32_t version = rd.u32("version");
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                       std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ck;
  const std::size_t meta_at = rd.offset();
  const std::uint32_t meta_len = rd.u32("metadata length");
  const std::string meta = rd.bytes(meta_len, "metadata");
  try {
    ck.metadata = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("invalid checkpoint metadata: ") + e.what(), meta_at + 4 + e.byte);
  }
  const std::uint32_t count = rd.u32("record count");
  for (std::uint32_t i = 0; i < count; ++i) {
    Record r;
    const std::uint32_t name_len = rd.u32("record name length");
    r.name = rd.bytes(name_len, "record name");
    const std::uint32_t rank = rd.u32("record rank");
    if (rank > 8) throw ParseError("implausible rank for record '" + r.name + "'", rd.offset() - 4);
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const std::uint32_t d = rd.u32("record dims");
      if (d == 0) throw ParseError("zero dimension in record '" + r.name + "'", rd.offset() - 4);
      r.shape.push_back(d);
      n *= d;
      if (n > bytes.size()) throw ParseError("record '" + r.name + "' larger than the file", rd.offset() - 4);
    }
    r.data.resize(n);
    rd.floats(r.data.data(), n, "record payload");
    ck.records.push_back(std::move(r));
  }
  if (!rd.done()) throw ParseError("trailing bytes after last record", rd.offset());
  return ck;
}

inline void save_checkpoint_file(const Checkpoint& ck, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(ck);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("failed writing '" + path.string() + "'");
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

inline Checkpoint load_checkpoint_file(const std::filesystem::path& path) { return parse_checkpoint(read_file_bytes(path)); }

// Copy records into a module's parameters by name. Every parameter must be present.
template <class M>
void assign_params(M& module, const Checkpoint& ck, const std::string& prefix) {
  module.for_each_param(prefix, [&](const std::string& name, auto& t) {
    const Record* r = ck.find(name);
    if (!r) throw ParseError("checkpoint has no record '" + name + "'", 0);
    if (r->shape != t.shape()) {
      throw ParseError("record '" + name + "' has shape " + shape_str(r->shape) + ", expected " + shape_str(t.shape()), 0);
    }
    auto dst = t.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<typename std::decay_t<decltype(t)>::value_type>(r->data[i]);
  });
}

template <class M>
void add_params(Checkpoint& ck, M& module, const std::string& prefix) {
  module.for_each_param(prefix, [&](const std::string& name, auto& t) { ck.add(name, t); });
}

}  // namespace flexctl
