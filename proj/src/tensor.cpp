#include "lfdepth/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "lfdepth/errors.hpp"

namespace lfd {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::Shape: return "E_SHAPE";
    case ErrorCode::Domain: return "E_DOMAIN";
    case ErrorCode::Usage: return "E_USAGE";
    case ErrorCode::Config: return "E_CONFIG";
    case ErrorCode::Io: return "E_IO";
    case ErrorCode::Format: return "E_FORMAT";
    case ErrorCode::Evaluation: return "E_EVAL";
    case ErrorCode::NumericalCheck: return "E_NUMCHECK";
  }
  return "E_UNKNOWN";
}

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::Io:
    case ErrorCode::Format: return 2;
    case ErrorCode::NumericalCheck: return 3;
    default: return 1;
  }
}

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Shape strides_of(const Shape& shape) {
  Shape s(shape.size(), 1);
  for (Index i = static_cast<Index>(shape.size()) - 2; i >= 0; --i) s[i] = s[i + 1] * shape[i + 1];
  return s;
}

namespace {

void validate(const Shape& shape, std::size_t size) {
  for (Index e : shape) {
    if (e < 1) throw ShapeError("tensor extents must be >= 1, got " + to_string(shape));
  }
  if (static_cast<std::size_t>(numel(shape)) != size) {
    throw ShapeError("shape " + to_string(shape) + " does not match data length " +
                     std::to_string(size));
  }
}

thread_local bool g_grad_enabled = true;

}  // namespace

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool on) { g_grad_enabled = on; }

Tensor::Tensor(Shape shape, Buffer data, bool requires_grad) {
  validate(shape, data.size());
  impl_ = std::make_shared<TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, const std::vector<double>& data, bool requires_grad)
    : Tensor(std::move(shape), Buffer(data.begin(), data.end()), requires_grad) {}

Tensor Tensor::zeros(const Shape& shape) { return full(shape, 0.0); }
Tensor Tensor::ones(const Shape& shape) { return full(shape, 1.0); }

Tensor Tensor::full(const Shape& shape, double value) {
  for (Index e : shape) {
    if (e < 1) throw ShapeError("tensor extents must be >= 1, got " + to_string(shape));
  }
  return Tensor(shape, Buffer(static_cast<std::size_t>(lfd::numel(shape)), value));
}

Tensor Tensor::scalar(double value) { return Tensor({}, Buffer{value}); }

Tensor Tensor::from(const Shape& shape, std::initializer_list<double> values) {
  return Tensor(shape, Buffer(values));
}

const Shape& Tensor::shape() const {
  if (!impl_) throw UsageError("use of undefined tensor");
  return impl_->shape;
}

Index Tensor::dim(Index axis) const {
  const Index r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("axis out of range for " + to_string(shape()));
  return impl_->shape[axis];
}

Index Tensor::numel() const { return lfd::numel(shape()); }

std::span<const double> Tensor::data() const {
  if (!impl_) throw UsageError("use of undefined tensor");
  return impl_->data;
}

std::span<double> Tensor::mutable_data() {
  if (!impl_) throw UsageError("use of undefined tensor");
  if (impl_->node) throw UsageError("mutable_data() on a non-leaf tensor");
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<Index> index) const {
  const Shape& s = shape();
  if (index.size() != s.size()) throw ShapeError("index rank mismatch");
  const Shape st = strides_of(s);
  Index off = 0;
  std::size_t k = 0;
  for (Index i : index) {
    if (i < 0 || i >= s[k]) throw ShapeError("index out of range");
    off += i * st[k++];
  }
  return impl_->data[static_cast<std::size_t>(off)];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  if (!impl_) throw UsageError("use of undefined tensor");
  if (impl_->node && !flag) throw UsageError("cannot untrack a non-leaf tensor; use detach()");
  impl_->requires_grad = flag;
  return *this;
}

bool Tensor::is_leaf() const { return impl_ && !impl_->node; }

std::span<const double> Tensor::grad() const {
  if (!impl_) throw UsageError("use of undefined tensor");
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_) impl_->grad.clear();
}

Tensor Tensor::detach() const { return Tensor(shape(), impl_->data, false); }

Tensor make_result(Shape shape, Buffer data, std::vector<Tensor> inputs,
                   detail::BackwardFn fn) {
  Tensor out(std::move(shape), std::move(data), false);
  if (!GradMode::enabled()) return out;
  const bool tracked = std::any_of(inputs.begin(), inputs.end(),
                                   [](const Tensor& t) { return t.requires_grad(); });
  if (!tracked) return out;
  auto node = std::make_shared<detail::Node>();
  node->inputs.reserve(inputs.size());
  for (const Tensor& t : inputs) node->inputs.push_back(t.impl());
  node->backward = std::move(fn);
  out.impl_->requires_grad = true;
  out.impl_->node = std::move(node);
  return out;
}

GradientMap backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw UsageError("backward() requires a scalar loss");
  }
  if (!loss.requires_grad()) throw UsageError("backward() on an untracked loss");

  // Iterative post-order DFS gives a topological order (inputs before users).
  // `order` owns its entries so nodes can be released during the sweep.
  std::vector<std::shared_ptr<TensorImpl>> order;
  std::unordered_set<const TensorImpl*> seen;
  std::vector<std::pair<std::shared_ptr<TensorImpl>, std::size_t>> stack;
  stack.emplace_back(loss.impl(), 0);
  seen.insert(loss.impl().get());
  while (!stack.empty()) {
    auto& top = stack.back();
    const auto& t = top.first;
    if (t->node && top.second < t->node->inputs.size()) {
      std::shared_ptr<TensorImpl> child = t->node->inputs[top.second++];
      if (child->requires_grad && seen.insert(child.get()).second) {
        stack.emplace_back(std::move(child), 0);
      }
      continue;
    }
    order.push_back(t);
    stack.pop_back();
  }

  TensorImpl* root = loss.impl().get();
  root->grad.assign(1, 1.0);

  std::vector<Buffer*> grad_in;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* t = it->get();
    if (!t->node) continue;
    if (t->grad.empty()) t->grad.assign(t->data.size(), 0.0);
    grad_in.clear();
    for (const auto& in : t->node->inputs) {
      if (in->requires_grad) {
        if (in->grad.empty()) in->grad.assign(in->data.size(), 0.0);
        grad_in.push_back(&in->grad);
      } else {
        grad_in.push_back(nullptr);
      }
    }
    t->node->backward(t->grad, grad_in);
    // Intermediate results are released as soon as their rule has run.
    t->node.reset();
    t->requires_grad = false;
    Buffer().swap(t->grad);
  }

  GradientMap result;
  for (const auto& t : order) {
    if (t->requires_grad) result.emplace(t.get(), t->grad);
  }
  return result;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
  double m = 0.0;
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < x.size(); ++i) m = std::max(m, std::abs(x[i] - y[i]));
  return m;
}

bool allclose(const Tensor& a, const Tensor& b, double atol) {
  return a.shape() == b.shape() && max_abs_diff(a, b) <= atol;
}

}  // namespace lfd
