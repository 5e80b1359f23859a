#pragma once

// Dense row-major tensors, named parameter stores, and the KRFL binary
// container used for every checkpoint in the pipeline.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace drkrnet {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class NumericalError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class ValidationError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

inline std::size_t shape_size(const Shape &shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape &shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i)
      os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

class Tensor {
public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size())
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  static Tensor vector(std::vector<double> v) {
    const auto n = v.size();
    return Tensor(Shape{n}, std::move(v));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor(Shape{rows, cols}, std::move(v));
  }

  const Shape &shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  /// Rows/cols of a rank-2 tensor; a rank-1 tensor is one row.
  std::size_t rows() const { return rank() == 2 ? shape_[0] : 1; }
  std::size_t cols() const { return rank() == 0 ? 1 : shape_.back(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double> &storage() { return data_; }
  const std::vector<double> &storage() const { return data_; }

  double &operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double &at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  double item() const {
    if (data_.size() != 1)
      throw ShapeError("item() on tensor of shape " + shape_string(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size())
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " +
                       shape_string(shape));
    return Tensor(std::move(shape), data_);
  }

  /// Copy of row r of a rank-2 tensor as a rank-1 tensor.
  Tensor row(std::size_t r) const {
    const auto c = cols();
    return Tensor::vector(std::vector<double>(data_.begin() + r * c,
                                              data_.begin() + (r + 1) * c));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](double v) { return std::isfinite(v); });
  }

  bool operator==(const Tensor &other) const = default;

private:
  Shape shape_;
  std::vector<double> data_;
};

/// Stack equally sized rank-1 tensors (or flat fields) into a rows x n matrix.
inline Tensor stack_rows(std::span<const Tensor> rows) {
  if (rows.empty())
    throw ShapeError("stack_rows of empty sequence");
  const std::size_t n = rows.front().size();
  std::vector<double> out;
  out.reserve(rows.size() * n);
  for (const auto &r : rows) {
    if (r.size() != n)
      throw ShapeError("stack_rows: row of size " + std::to_string(r.size()) +
                       ", expected " + std::to_string(n));
    out.insert(out.end(), r.storage().begin(), r.storage().end());
  }
  return Tensor::matrix(rows.size(), n, std::move(out));
}

/// Ordered name -> tensor map. Insertion order is iteration order.
class ParamStore {
public:
  using Entry = std::pair<std::string, Tensor>;

  ParamStore() = default;
  explicit ParamStore(std::uint64_t seed) : rng_seed_(seed) {}

  void add(std::string name, Tensor value) {
    if (contains(name))
      throw ValidationError("duplicate parameter name '" + name + "'");
    entries_.emplace_back(std::move(name), std::move(value));
  }

  bool contains(std::string_view name) const {
    return std::any_of(entries_.begin(), entries_.end(),
                       [&](const Entry &e) { return e.first == name; });
  }

  const Tensor &at(std::string_view name) const {
    for (const auto &e : entries_)
      if (e.first == name)
        return e.second;
    throw ValidationError("unknown parameter '" + std::string(name) + "'");
  }

  Tensor &at(std::string_view name) {
    return const_cast<Tensor &>(std::as_const(*this).at(name));
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::uint64_t rng_seed() const { return rng_seed_; }
  void set_rng_seed(std::uint64_t s) { rng_seed_ = s; }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  const std::vector<Entry> &entries() const { return entries_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto &e : entries_)
      n += e.second.size();
    return n;
  }

  /// Same names, same shapes, zero values.
  ParamStore zeros_like() const {
    ParamStore out(rng_seed_);
    for (const auto &[name, t] : entries_)
      out.add(name, Tensor(t.shape()));
    return out;
  }

  bool operator==(const ParamStore &other) const = default;

private:
  std::vector<Entry> entries_;
  std::uint64_t rng_seed_ = 0;
};

// ---------------------------------------------------------------------------
// KRFL container
//
//   magic   "KRFL" (4 bytes)
//   version u32 (currently 1)
//   repeated until end of file:
//     name_len u32, name bytes, rank u32, dims u64[rank], payload f64[prod(dims)]
//
// All integers and floats little-endian.
// ---------------------------------------------------------------------------

namespace detail {

inline void require_little_endian() {
  static_assert(sizeof(double) == 8);
  const std::uint16_t probe = 1;
  if (*reinterpret_cast<const std::uint8_t *>(&probe) != 1)
    throw std::runtime_error("big-endian hosts are not supported");
}

template <class T> void put(std::string &out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <class T> T take(std::string_view in, std::size_t &pos) {
  if (pos + sizeof(T) > in.size())
    throw ValidationError("truncated binary container");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

} // namespace detail

inline constexpr std::uint32_t kParamStoreVersion = 1;

inline std::string serialize(const ParamStore &store) {
  detail::require_little_endian();
  std::string out = "KRFL";
  detail::put<std::uint32_t>(out, kParamStoreVersion);
  for (const auto &[name, t] : store) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.append(name);
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape())
      detail::put<std::uint64_t>(out, d);
    out.append(reinterpret_cast<const char *>(t.storage().data()),
               t.size() * sizeof(double));
  }
  return out;
}

inline ParamStore deserialize(std::string_view bytes) {
  detail::require_little_endian();
  if (bytes.size() < 8 || bytes.substr(0, 4) != "KRFL")
    throw ValidationError("not a KRFL parameter container");
  std::size_t pos = 4;
  const auto version = detail::take<std::uint32_t>(bytes, pos);
  if (version != kParamStoreVersion)
    throw ValidationError("unsupported KRFL version " + std::to_string(version));
  ParamStore store;
  while (pos < bytes.size()) {
    const auto len = detail::take<std::uint32_t>(bytes, pos);
    if (pos + len > bytes.size())
      throw ValidationError("truncated parameter name");
    std::string name(bytes.substr(pos, len));
    pos += len;
    const auto rank = detail::take<std::uint32_t>(bytes, pos);
    Shape shape(rank);
    for (auto &d : shape)
      d = detail::take<std::uint64_t>(bytes, pos);
    const std::size_t n = shape_size(shape);
    if (pos + n * sizeof(double) > bytes.size())
      throw ValidationError("truncated payload for '" + name + "'");
    std::vector<double> data(n);
    std::memcpy(data.data(), bytes.data() + pos, n * sizeof(double));
    pos += n * sizeof(double);
    store.add(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  return store;
}

inline void write_bytes(const std::string &path, std::string_view bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f)
    throw ValidationError("cannot open '" + path + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f)
    throw ValidationError("failed writing '" + path + "'");
}

inline std::string read_bytes(const std::string &path) {
  std::ifstream f(path, std::ios::binary);
  if (!f)
    throw ValidationError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void save_params(const ParamStore &store, const std::string &path) {
  write_bytes(path, serialize(store));
}

inline ParamStore load_params(const std::string &path) {
  return deserialize(read_bytes(path));
}

} // namespace drkrnet
