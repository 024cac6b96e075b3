#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include "midccnn/common.hpp"

namespace midccnn {

// Dense row-major float64 tensor. Values are written once by the producing
// op; grad accumulates additively until zero_grad().
struct Tensor {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::string name;

  int64_t numel() const { return static_cast<int64_t>(values.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  void ensure_grad();
  void zero_grad();
  double scalar() const;
};

using TensorPtr = std::shared_ptr<Tensor>;

TensorPtr make_tensor(Shape shape, double fill = 0.0);
TensorPtr make_tensor(Shape shape, std::vector<double> values);
TensorPtr make_param(Shape shape, std::string name);

// Recorded op sequence. Nodes are appended as ops execute, so input ids
// always precede their output; backward() is a reverse sweep over the
// recording and replay() reruns every forward kernel in order.
class Tape {
 public:
  struct Node {
    std::string op;
    std::vector<TensorPtr> inputs;
    TensorPtr output;
    std::function<void()> backward;   // reads output->grad, accumulates input grads
    std::function<void()> recompute;  // recomputes output->values from inputs
  };

  TensorPtr record(std::string op, std::vector<TensorPtr> inputs, TensorPtr output,
                   std::function<void()> backward, std::function<void()> recompute);

  // Seeds d(loss)/d(loss) = 1 and sweeps the recording in reverse.
  // loss must be a single-element tensor produced by this tape.
  void backward(const TensorPtr& loss);

  // Reruns all forward kernels from current leaf values. Stateful ops
  // (batch norm running stats) are not re-applied; dropout reuses its mask.
  void replay();

  size_t size() const { return nodes_.size(); }
  const Node& node(size_t i) const { return nodes_[i]; }
  bool produced(const TensorPtr& t) const;

 private:
  std::vector<Node> nodes_;
  std::unordered_set<const Tensor*> outputs_;
};

namespace ops {

enum class EwKind { add, sub, mul, relu, tanh, exp, log, scale };
enum class LogMode { strict, clamped };

// Binary kinds accept equal shapes or a rank-1 b matching a's channel axis
// (axis 1 for rank >= 2).
TensorPtr elementwise(Tape& tape, EwKind kind, const TensorPtr& a,
                      const TensorPtr& b = nullptr, double c = 0.0,
                      LogMode log_mode = LogMode::strict);

TensorPtr add(Tape& tape, const TensorPtr& a, const TensorPtr& b);
TensorPtr sub(Tape& tape, const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(Tape& tape, const TensorPtr& a, const TensorPtr& b);
TensorPtr relu(Tape& tape, const TensorPtr& a);
TensorPtr tanh(Tape& tape, const TensorPtr& a);
TensorPtr exp(Tape& tape, const TensorPtr& a);
TensorPtr log(Tape& tape, const TensorPtr& a, LogMode mode = LogMode::strict);
TensorPtr scale(Tape& tape, const TensorPtr& a, double c);

TensorPtr matmul(Tape& tape, const TensorPtr& a, const TensorPtr& b);

// Max-subtracted softmax along `axis`; slices sum to 1 within 1e-12.
TensorPtr softmax(Tape& tape, const TensorPtr& x, int axis);

// NCHW concat along the channel axis; argument order is channel order.
TensorPtr concat_channels(Tape& tape, const std::vector<TensorPtr>& tensors);

TensorPtr reshape(Tape& tape, const TensorPtr& x, Shape shape);
TensorPtr sum_all(Tape& tape, const TensorPtr& x);  // -> shape {1}

}  // namespace ops
}  // namespace midccnn
