#include "cacom/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace cacom::ad {
namespace {

thread_local Tape* g_active_tape = nullptr;

}  // namespace

std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::span<float> Node::grad_buffer() {
  if (grad.empty()) grad.assign(value.size(), 0.0f);
  return grad;
}

Tensor Tensor::constant(Shape shape, std::vector<float> data) {
  if (numel_of(shape) != data.size()) {
    throw DimensionError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                         shape_str(shape));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape) {
  auto n = numel_of(shape);
  return constant(std::move(shape), std::vector<float>(n, 0.0f));
}

Tensor Tensor::scalar(float v) { return constant({}, {v}); }

Tensor Tensor::parameter(Shape shape, std::vector<float> data) {
  Tensor t = constant(std::move(shape), std::move(data));
  t.node_->requires_grad = true;
  return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  return node_->shape[axis];
}

float Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

void Tensor::zero_grad() {
  if (node_->has_grad()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
}

Tensor Tensor::clone() const {
  auto node = std::make_shared<Node>();
  node->shape = node_->shape;
  node->value = node_->value;
  node->requires_grad = node_->requires_grad;
  return Tensor(std::move(node));
}

Tape::~Tape() {
  if (g_active_tape == this) g_active_tape = nullptr;
}

Tape::Recording::Recording(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
Tape::Recording::~Recording() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::push(NodePtr out, BackwardFn fn) {
  if (consumed_) throw std::logic_error("recording onto a tape that already ran backward");
  entries_.push_back({std::move(out), std::move(fn)});
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw std::logic_error("backward called twice on the same tape");
  if (!loss.defined() || loss.numel() != 1) {
    throw DimensionError("backward requires a scalar loss, got " + (loss.defined() ? shape_str(loss.shape()) : "undefined"));
  }
  consumed_ = true;
  if (!loss.requires_grad()) {
    entries_.clear();
    return;
  }
  loss.node()->grad_buffer()[0] += 1.0f;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->out->has_grad()) it->fn(*it->out);
  }
  entries_.clear();
}

NoGradGuard::NoGradGuard() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradGuard::~NoGradGuard() { g_active_tape = previous_; }

namespace {

template <typename It>
Tensor record_impl(Shape shape, std::vector<float> value, It first, It last, BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  Tape* tape = g_active_tape;
  if (tape != nullptr) {
    bool needs = std::any_of(first, last, [](const Tensor& t) { return t.defined() && t.requires_grad(); });
    if (needs) {
      node->requires_grad = true;
      tape->push(node, std::move(fn));
    }
  }
  return Tensor(std::move(node));
}

struct DerefIt {
  const Tensor* const* p;
  const Tensor& operator*() const { return **p; }
  DerefIt& operator++() {
    ++p;
    return *this;
  }
  bool operator!=(const DerefIt& o) const { return p != o.p; }
  bool operator==(const DerefIt& o) const { return p == o.p; }
  using difference_type = std::ptrdiff_t;
  using value_type = Tensor;
  using pointer = const Tensor*;
  using reference = const Tensor&;
  using iterator_category = std::input_iterator_tag;
};

}  // namespace

Tensor record_op(Shape shape, std::vector<float> value, std::initializer_list<const Tensor*> inputs, BackwardFn fn) {
  return record_impl(std::move(shape), std::move(value), DerefIt{inputs.begin()}, DerefIt{inputs.end()}, std::move(fn));
}

Tensor record_op(Shape shape, std::vector<float> value, const std::vector<Tensor>& inputs, BackwardFn fn) {
  return record_impl(std::move(shape), std::move(value), inputs.begin(), inputs.end(), std::move(fn));
}

}  // namespace cacom::ad
