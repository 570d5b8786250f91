#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace lfd {

using Index = std::int64_t;
using Shape = std::vector<Index>;

Index numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Row-major strides for a shape.
Shape strides_of(const Shape& shape);

/// Allocator returning 64-byte aligned storage.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() noexcept = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

/// Tensor storage. Every buffer starts on a 64-byte boundary, so vectorised
/// kernels take the same code path for a given shape on every run.
using Buffer = std::vector<double, AlignedAllocator<double>>;

class Tensor;
struct TensorImpl;

namespace detail {

/// Backward rule of one recorded operation. `grad_out` is the gradient of the
/// loss w.r.t. the operation's output; `grad_in[k]` points at the gradient
/// buffer of input k, or is null when that input is not tracked.
using BackwardFn = std::function<void(std::span<const double> grad_out,
                                      std::span<Buffer*> grad_in)>;

struct Node {
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
};

}  // namespace detail

struct TensorImpl {
  Shape shape;
  Buffer data;
  Buffer grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  std::shared_ptr<detail::Node> node;  // null for leaves
};

/// Dense double-precision n-d array with optional reverse-mode tracking.
///
/// A Tensor is a shared handle: copies alias the same storage. Operations never
/// mutate their inputs, so untracked tensors behave as immutable values once
/// built. Leaves flagged `requires_grad` are the trainable parameters.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, Buffer data, bool requires_grad = false);
  Tensor(Shape shape, const std::vector<double>& data, bool requires_grad = false);

  static Tensor zeros(const Shape& shape);
  static Tensor ones(const Shape& shape);
  static Tensor full(const Shape& shape, double value);
  static Tensor scalar(double value);
  static Tensor from(const Shape& shape, std::initializer_list<double> values);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  Index rank() const { return static_cast<Index>(shape().size()); }
  Index dim(Index axis) const;
  Index numel() const;

  std::span<const double> data() const;
  /// Raw write access. Only valid on leaves; used by optimizers and by
  /// finite-difference perturbation.
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<Index> index) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  bool is_leaf() const;

  /// Accumulated gradient (empty span if none).
  std::span<const double> grad() const;
  void zero_grad();

  /// Untracked copy sharing no storage.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  const TensorImpl* id() const noexcept { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& impl() const noexcept { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;

  friend Tensor make_result(Shape shape, Buffer data,
                            std::vector<Tensor> inputs, detail::BackwardFn fn);
};

/// Builds an operation result. Records a graph node iff gradient mode is on and
/// at least one input is tracked.
Tensor make_result(Shape shape, Buffer data, std::vector<Tensor> inputs,
                   detail::BackwardFn fn);

/// Thread-local switch for graph recording.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

class NoGradGuard {
 public:
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

using GradientMap = std::unordered_map<const TensorImpl*, Buffer>;

/// Reverse pass from a scalar loss. Every node is visited exactly once in
/// reverse topological order. Leaf gradients accumulate into the leaves and are
/// also returned; intermediate nodes are released afterwards.
GradientMap backward(const Tensor& loss);

bool allclose(const Tensor& a, const Tensor& b, double atol);
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace lfd
