#pragma once

// Dense float tensors with an opt-in reverse-mode tape.
//
// A Tensor is a cheap handle onto a shared Node. Leaves are created through
// Tensor::constant / Tensor::parameter; every other tensor is produced by an
// op in ops.hpp. Ops are recorded only while a Tape::Recording guard is alive
// on the current thread and at least one input requires a gradient, so the
// same network code serves rollouts (no tape) and learning (taped).

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cacom {

/// Raised on any shape disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace ad {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node {
  Shape shape;
  std::vector<float> value;
  std::vector<float> grad;  // empty until something is accumulated
  bool requires_grad = false;

  std::size_t numel() const { return value.size(); }
  bool has_grad() const { return !grad.empty(); }
  // Zero-initialised on first use.
  std::span<float> grad_buffer();
};

using NodePtr = std::shared_ptr<Node>;

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor constant(Shape shape, std::vector<float> data);
  static Tensor zeros(Shape shape);
  static Tensor scalar(float v);
  static Tensor parameter(Shape shape, std::vector<float> data);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return node_->numel(); }

  std::span<const float> data() const { return node_->value; }
  // Only valid on leaves; used by optimizers and checkpoint loading.
  std::span<float> mutable_data() { return node_->value; }
  float item() const;
  float operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->has_grad(); }
  std::span<const float> grad() const { return node_->grad; }
  std::span<float> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad();

  // Deep copy with no tape history; keeps requires_grad.
  Tensor clone() const;

  Node* node() const { return node_.get(); }
  const NodePtr& node_ptr() const { return node_; }

 private:
  NodePtr node_;
};

/// Gradient callback for one recorded op; receives the op's output node.
using BackwardFn = std::function<void(Node& out)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape();

  /// RAII guard making this tape the current thread's recording target.
  class Recording {
   public:
    explicit Recording(Tape& tape);
    Recording(const Recording&) = delete;
    Recording& operator=(const Recording&) = delete;
    ~Recording();

   private:
    Tape* previous_;
  };

  Recording record() { return Recording(*this); }

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded op in reverse.
  /// Throws on a non-scalar loss or a second call on the same tape.
  void backward(const Tensor& loss);

  std::size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }

  static Tape* active();
  void push(NodePtr out, BackwardFn fn);

 private:
  struct Entry {
    NodePtr out;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
  bool consumed_ = false;
};

/// Suspends recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
  ~NoGradGuard();

 private:
  Tape* previous_;
};

/// Builds an op output. When a tape is active and any input needs a
/// gradient, the result is marked requires_grad and `fn` is recorded.
Tensor record_op(Shape shape, std::vector<float> value, std::initializer_list<const Tensor*> inputs,
                 BackwardFn fn);
Tensor record_op(Shape shape, std::vector<float> value, const std::vector<Tensor>& inputs, BackwardFn fn);

}  // namespace ad
}  // namespace cacom
