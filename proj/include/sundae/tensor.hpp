#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "sundae/errors.hpp"

namespace sundae {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// 64-byte aligned storage. Vectorized reductions split work by address
/// alignment, so unaligned buffers would make sums depend on the allocator.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <class T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

/// Dense row-major array with an optional gradient slot of the same shape.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), values_(shape_size(shape_), fill) {}

  Tensor(Shape shape, AlignedVector<T> values)
      : shape_(std::move(shape)), values_(std::move(values)) {
    check_fit();
  }
  Tensor(Shape shape, const std::vector<T>& values)
      : shape_(std::move(shape)), values_(values.begin(), values.end()) {
    check_fit();
  }
  Tensor(Shape shape, std::initializer_list<T> values)
      : shape_(std::move(shape)), values_(values) {
    check_fit();
  }

 private:
  void check_fit() const {
    if (values_.size() != shape_size(shape_)) {
      throw ArgumentError("Tensor: " + std::to_string(values_.size()) +
                          " values do not fit shape " + shape_string(shape_));
    }
  }

 public:

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  /// Trailing dimension; 1 for scalars.
  std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }
  /// Product of all leading dimensions.
  std::size_t rows() const { return cols() == 0 ? 0 : size() / cols(); }

  std::span<T> values() { return values_; }
  std::span<const T> values() const { return values_; }
  AlignedVector<T>& storage() { return values_; }
  const AlignedVector<T>& storage() const { return values_; }

  T* data() { return values_.data(); }
  const T* data() const { return values_.data(); }

  T& operator[](std::size_t i) { return values_[i]; }
  const T& operator[](std::size_t i) const { return values_[i]; }

  T& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }

  std::span<T> row(std::size_t r) { return {values_.data() + r * cols(), cols()}; }
  std::span<const T> row(std::size_t r) const {
    return {values_.data() + r * cols(), cols()};
  }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on) { requires_grad_ = on; }

  bool has_grad() const { return !grad_.empty() || size() == 0; }

  /// Gradient slot, allocated (zero-filled) on first use.
  std::span<T> grad() {
    if (grad_.size() != values_.size()) grad_.assign(values_.size(), T(0));
    return grad_;
  }
  std::span<const T> grad() const { return grad_; }

  void zero_grad() { std::fill(grad_.begin(), grad_.end(), T(0)); }
  void drop_grad() {
    grad_.clear();
    grad_.shrink_to_fit();
  }

  Tensor<T> detached_copy() const { return Tensor<T>(shape_, values_); }

  template <class U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, AlignedVector<U>(values_.begin(), values_.end()));
  }

 private:
  Shape shape_;
  AlignedVector<T> values_;
  AlignedVector<T> grad_;
  bool requires_grad_ = false;
};

/// Graph node handle. Parameters and activations are both Vars.
template <class T>
using Var = std::shared_ptr<Tensor<T>>;

template <class T>
Var<T> make_var(Shape shape, T fill = T(0)) {
  return std::make_shared<Tensor<T>>(std::move(shape), fill);
}

template <class T>
Var<T> make_var(Tensor<T> tensor) {
  return std::make_shared<Tensor<T>>(std::move(tensor));
}

/// Named, ordered parameter collection.
template <class T>
class ParamSet {
 public:
  struct Entry {
    std::string name;
    Var<T> tensor;
  };

  Var<T> add(const std::string& name, Shape shape) {
    if (contains(name)) throw ArgumentError("ParamSet: duplicate name " + name);
    auto v = make_var<T>(std::move(shape));
    v->set_requires_grad(true);
    entries_.push_back({name, v});
    return v;
  }

  void add(const std::string& name, Tensor<T> tensor) {
    if (contains(name)) throw ArgumentError("ParamSet: duplicate name " + name);
    auto v = make_var<T>(std::move(tensor));
    v->set_requires_grad(true);
    entries_.push_back({name, v});
  }

  bool contains(const std::string& name) const {
    return std::any_of(entries_.begin(), entries_.end(),
                       [&](const Entry& e) { return e.name == name; });
  }

  const Var<T>& get(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.name == name) return e.tensor;
    throw ArgumentError("ParamSet: no parameter named " + name);
  }

  std::size_t size() const { return entries_.size(); }
  const Entry& operator[](std::size_t i) const { return entries_[i]; }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor->size();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor->zero_grad();
  }

  /// Deep copy with fresh storage.
  ParamSet<T> clone() const { return cast<T>(); }

  template <class U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& e : entries_) out.add(e.name, e.tensor->template cast<U>());
    return out;
  }

  bool same_layout(const ParamSet<T>& other) const {
    if (size() != other.size()) return false;
    for (std::size_t i = 0; i < size(); ++i) {
      if (entries_[i].name != other.entries_[i].name ||
          entries_[i].tensor->shape() != other.entries_[i].tensor->shape())
        return false;
    }
    return true;
  }

  /// Overwrites values from a set with the same layout (any precision).
  template <class U>
  void assign_from(const ParamSet<U>& other) {
    if (size() != other.size()) throw ArgumentError("ParamSet: layout mismatch");
    for (std::size_t i = 0; i < size(); ++i) {
      auto& dst = *entries_[i].tensor;
      const auto& src = *other[i].tensor;
      if (entries_[i].name != other[i].name || dst.shape() != src.shape())
        throw ArgumentError("ParamSet: layout mismatch at " + entries_[i].name);
      std::copy(src.values().begin(), src.values().end(), dst.values().begin());
    }
  }

 private:
  std::vector<Entry> entries_;
};

}  // namespace sundae
