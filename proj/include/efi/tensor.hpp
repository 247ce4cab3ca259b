#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "efi/errors.hpp"

namespace efi {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ')';
  return os.str();
}

// Dense row-major n-dimensional array. float for everything the artifact
// stores or transmits; double instantiations exist for high-precision
// gradient checking only.
template <typename S>
class TensorT {
 public:
  TensorT() = default;

  explicit TensorT(Shape shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<std::size_t>(checked_numel(shape_)), S(0));
  }

  TensorT(Shape shape, std::vector<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<std::int64_t>(data_.size()) != checked_numel(shape_)) {
      throw InputError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
#ifndef NDEBUG
    for (S v : data_) {
      if (!std::isfinite(static_cast<double>(v))) {
        throw InputError("non-finite value in tensor of shape " + shape_str(shape_));
      }
    }
#endif
  }

  static TensorT filled(Shape shape, S v) {
    TensorT t(std::move(shape));
    for (S& x : t.data_) x = v;
    return t;
  }

  static TensorT scalar(S v) { return TensorT({1}, {v}); }

  static TensorT row(std::initializer_list<S> vals) {
    return TensorT({static_cast<int>(vals.size())}, std::vector<S>(vals));
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  std::vector<S>& raw() { return data_; }
  const std::vector<S>& raw() const { return data_; }

  S& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  S operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  S& at2(int i, int j) { return data_[static_cast<std::size_t>(i) * shape_[1] + j]; }
  S at2(int i, int j) const { return data_[static_cast<std::size_t>(i) * shape_[1] + j]; }

  S& at3(int c, int h, int w) {
    return data_[(static_cast<std::size_t>(c) * shape_[1] + h) * shape_[2] + w];
  }
  S at3(int c, int h, int w) const {
    return data_[(static_cast<std::size_t>(c) * shape_[1] + h) * shape_[2] + w];
  }

  S& at4(int n, int c, int h, int w) {
    return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  S at4(int n, int c, int h, int w) const {
    return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  bool all_finite() const {
    for (S v : data_) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  void ensure_finite(const std::string& what) const {
    if (!all_finite()) throw InputError(what + ": non-finite values");
  }

  template <typename T>
  TensorT<T> cast() const {
    std::vector<T> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<T>(data_[i]);
    return TensorT<T>(shape_, std::move(out));
  }

 private:
  static std::int64_t checked_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) {
      if (d < 0) throw InputError("negative dimension in shape " + shape_str(s));
      n *= d;
    }
    return n;
  }

  Shape shape_;
  std::vector<S> data_;
};

using Tensor = TensorT<float>;

}  // namespace efi
