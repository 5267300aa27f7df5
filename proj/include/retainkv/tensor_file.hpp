#pragma once

// Binary tensor container used for backbone weights and head sets.
//
// Layout:  magic "RKV1" | u64 LE header length | JSON header | raw data
// The header maps tensor name -> {dtype: "f32"|"f64", shape: [...],
// byte_offset: N} with offsets relative to the start of the data section.
// Data is little-endian; save/load of the same precision round-trips
// bit-exactly. Insertion order is preserved so re-saving an unchanged store
// reproduces the same bytes.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "retainkv/mat.hpp"

namespace retainkv {

static_assert(std::endian::native == std::endian::little,
              "tensor container assumes a little-endian host");

namespace detail {
template <typename T>
constexpr const char* dtype_name();
template <>
constexpr const char* dtype_name<float>() { return "f32"; }
template <>
constexpr const char* dtype_name<double>() { return "f64"; }

inline size_t dtype_size(const std::string& d) {
  if (d == "f32") return 4;
  if (d == "f64") return 8;
  throw DataError("tensor container: unknown dtype '" + d + "'");
}
}  // namespace detail

class TensorFile {
 public:
  struct Entry {
    std::string dtype;
    std::vector<size_t> shape;
    std::vector<unsigned char> bytes;

    size_t count() const {
      size_t n = 1;
      for (size_t s : shape) n *= s;
      return n;
    }
  };

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  const std::vector<std::string>& names() const { return order_; }

  template <typename T>
  void put(const std::string& name, const Mat<T>& m) {
    put_raw(name, detail::dtype_name<T>(), {m.rows, m.cols},
            reinterpret_cast<const unsigned char*>(m.data.data()),
            m.data.size() * sizeof(T));
  }

  template <typename T>
  void put(const std::string& name, const std::vector<T>& v) {
    put_raw(name, detail::dtype_name<T>(), {v.size()},
            reinterpret_cast<const unsigned char*>(v.data()),
            v.size() * sizeof(T));
  }

  template <typename T>
  Mat<T> get_mat(const std::string& name) const {
    const Entry& e = entry(name);
    if (e.shape.size() != 2)
      throw DataError("tensor '" + name + "' is not rank 2");
    Mat<T> m(e.shape[0], e.shape[1]);
    read_into(e, m.data);
    return m;
  }

  template <typename T>
  std::vector<T> get_vec(const std::string& name) const {
    const Entry& e = entry(name);
    if (e.shape.size() != 1)
      throw DataError("tensor '" + name + "' is not rank 1");
    std::vector<T> v(e.shape[0]);
    read_into(e, v);
    return v;
  }

  const Entry& entry(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end())
      throw DataError("tensor '" + name + "' not present in container");
    return entries_[it->second];
  }

  void save(const std::string& path) const {
    nlohmann::ordered_json header = nlohmann::ordered_json::object();
    size_t offset = 0;
    for (size_t i = 0; i < order_.size(); ++i) {
      const Entry& e = entries_[i];
      header[order_[i]] = {{"dtype", e.dtype},
                           {"shape", e.shape},
                           {"byte_offset", offset}};
      offset += e.bytes.size();
    }
    const std::string hs = header.dump();
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot open '" + path + "' for writing");
    f.write("RKV1", 4);
    const uint64_t hlen = hs.size();
    f.write(reinterpret_cast<const char*>(&hlen), 8);
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const Entry& e : entries_)
      f.write(reinterpret_cast<const char*>(e.bytes.data()),
              static_cast<std::streamsize>(e.bytes.size()));
    if (!f) throw DataError("write failed for '" + path + "'");
  }

  static TensorFile load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open '" + path + "'");
    char magic[4];
    if (!f.read(magic, 4) || std::memcmp(magic, "RKV1", 4) != 0)
      throw DataError("'" + path + "' is not a tensor container (bad magic)");
    uint64_t hlen = 0;
    if (!f.read(reinterpret_cast<char*>(&hlen), 8))
      throw DataError("'" + path + "' is truncated (no header length)");
    std::string hs(hlen, '\0');
    if (!f.read(hs.data(), static_cast<std::streamsize>(hlen)))
      throw DataError("'" + path + "' is truncated (header)");
    nlohmann::ordered_json header;
    try {
      header = nlohmann::ordered_json::parse(hs);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("'" + path + "' has a corrupt header: " + e.what());
    }
    if (!header.is_object())
      throw DataError("'" + path + "' header is not an object");

    std::vector<char> data(std::istreambuf_iterator<char>(f), {});

    TensorFile tf;
    for (auto& [name, desc] : header.items()) {
      if (!desc.is_object() || !desc.contains("dtype") ||
          !desc.contains("shape") || !desc.contains("byte_offset"))
        throw DataError("'" + path + "' header entry '" + name +
                        "' is malformed");
      Entry e;
      e.dtype = desc["dtype"].get<std::string>();
      e.shape = desc["shape"].get<std::vector<size_t>>();
      const size_t off = desc["byte_offset"].get<size_t>();
      const size_t nbytes = e.count() * detail::dtype_size(e.dtype);
      if (off + nbytes > data.size())
        throw DataError("'" + path + "' is truncated (tensor '" + name + "')");
      e.bytes.assign(data.begin() + static_cast<std::ptrdiff_t>(off),
                     data.begin() + static_cast<std::ptrdiff_t>(off + nbytes));
      tf.index_[name] = tf.entries_.size();
      tf.entries_.push_back(std::move(e));
      tf.order_.push_back(name);
    }
    return tf;
  }

 private:
  void put_raw(const std::string& name, const char* dtype,
               std::vector<size_t> shape, const unsigned char* p, size_t n) {
    Entry e;
    e.dtype = dtype;
    e.shape = std::move(shape);
    e.bytes.assign(p, p + n);
    auto it = index_.find(name);
    if (it != index_.end()) {
      entries_[it->second] = std::move(e);
    } else {
      index_[name] = entries_.size();
      entries_.push_back(std::move(e));
      order_.push_back(name);
    }
  }

  // Copies entry data into v, converting between f32 and f64 when the stored
  // dtype differs from the requested one. Matching dtypes are bit-exact.
  template <typename T>
  void read_into(const Entry& e, std::vector<T>& v) const {
    const size_t n = e.count();
    if (v.size() != n) throw DataError("tensor element count mismatch");
    if (e.dtype == detail::dtype_name<T>()) {
      std::memcpy(v.data(), e.bytes.data(), n * sizeof(T));
    } else if (e.dtype == "f32") {
      const float* src = reinterpret_cast<const float*>(e.bytes.data());
      for (size_t i = 0; i < n; ++i) v[i] = static_cast<T>(src[i]);
    } else if (e.dtype == "f64") {
      const double* src = reinterpret_cast<const double*>(e.bytes.data());
      for (size_t i = 0; i < n; ++i) v[i] = static_cast<T>(src[i]);
    } else {
      throw DataError("tensor container: unknown dtype '" + e.dtype + "'");
    }
  }

  std::vector<Entry> entries_;
  std::vector<std::string> order_;
  std::unordered_map<std::string, size_t> index_;
};

}  // namespace retainkv
