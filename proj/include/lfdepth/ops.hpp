#pragma once

#include <cstdint>
#include <vector>

#include "lfdepth/tensor.hpp"

namespace lfd {

enum class BinaryOp { Add, Sub, Mul, Div };
enum class ReduceOp { Sum, Mean, Max };

/// Elementwise binary op with numpy-style broadcasting over singleton axes.
/// Division by an exact zero raises DomainError.
Tensor binary_elementwise(const Tensor& a, const Tensor& b, BinaryOp op);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator/(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a);

Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor operator+(const Tensor& a, double s);
Tensor operator*(const Tensor& a, double s);
Tensor operator*(double s, const Tensor& a);
Tensor operator-(double s, const Tensor& a);

Tensor abs(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor square(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);

/// Batched product of the trailing two axes: [.., M, K] x [.., K, N].
/// Batch extents must be equal, or one operand may be a plain matrix that is
/// shared across the other's batch.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor reduce(const Tensor& x, const std::vector<Index>& axes, ReduceOp op,
              bool keep_dims = false);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum(const Tensor& x, const std::vector<Index>& axes, bool keep_dims = false);
Tensor mean(const Tensor& x, const std::vector<Index>& axes, bool keep_dims = false);

Tensor reshape(const Tensor& x, const Shape& shape);
Tensor permute(const Tensor& x, const std::vector<Index>& order);
/// Swap the trailing two axes.
Tensor transpose_last(const Tensor& x);
/// Contiguous sub-range [start, start + length) along one axis.
Tensor slice(const Tensor& x, Index axis, Index start, Index length);
Tensor concat(const std::vector<Tensor>& xs, Index axis);
/// Explicit tiling of singleton axes up to `shape`.
Tensor expand(const Tensor& x, const Shape& shape);

namespace detail {
/// Test fixture: scales one backward rule by 1.01 so gradient checks can prove
/// they detect a wrong rule.
enum class GradientFault { None, Sigmoid, Matmul };

/// While alive, relu, abs, max reductions and max pooling on this thread fold
/// the branch taken by every element into a running hash. Two forward passes
/// with equal hashes took the same side of every kink.
class BranchTrace {
 public:
  BranchTrace();
  ~BranchTrace();
  BranchTrace(const BranchTrace&) = delete;
  BranchTrace& operator=(const BranchTrace&) = delete;
  std::uint64_t value() const { return hash_; }

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
  std::uint64_t* prev_;
};
/// Null unless a BranchTrace is active on this thread.
std::uint64_t* branch_trace();
inline void trace_branch(std::uint64_t* h, std::uint64_t v) { *h = (*h ^ v) * 0x100000001b3ULL; }
void set_gradient_fault(GradientFault fault);
GradientFault gradient_fault();
}  // namespace detail

/// Result shape of broadcasting two shapes; throws ShapeError if incompatible.
Shape broadcast_shapes(const Shape& a, const Shape& b);

}  // namespace lfd
