#include "midccnn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <utility>

#include "kernels.hpp"

namespace midccnn {

void Tensor::ensure_grad() {
  if (grad.empty()) grad.assign(values.size(), 0.0);
}

void Tensor::zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

double Tensor::scalar() const {
  if (numel() != 1) fail("scalar(): tensor has shape " + shape_str(shape));
  return values[0];
}

namespace {

void validate_shape(const Shape& shape) {
  if (shape.empty()) fail("tensor shape must have at least one dimension");
  for (int d : shape)
    if (d <= 0) fail("tensor dimensions must be positive, got " + shape_str(shape));
}

void check_finite(const Tensor& t, const std::string& op) {
  for (double v : t.values)
    if (!std::isfinite(v)) fail(op + ": non-finite value in output of shape " + shape_str(t.shape));
}

}  // namespace

using detail::grad_dst;

TensorPtr make_tensor(Shape shape, double fill) {
  validate_shape(shape);
  auto t = std::make_shared<Tensor>();
  t->values.assign(static_cast<size_t>(shape_numel(shape)), fill);
  t->shape = std::move(shape);
  return t;
}

TensorPtr make_tensor(Shape shape, std::vector<double> values) {
  validate_shape(shape);
  if (shape_numel(shape) != static_cast<int64_t>(values.size()))
    fail("tensor: " + shape_str(shape) + " needs " + std::to_string(shape_numel(shape)) +
         " values, got " + std::to_string(values.size()));
  auto t = std::make_shared<Tensor>();
  t->shape = std::move(shape);
  t->values = std::move(values);
  return t;
}

TensorPtr make_param(Shape shape, std::string name) {
  auto t = make_tensor(std::move(shape));
  t->requires_grad = true;
  t->name = std::move(name);
  return t;
}

TensorPtr Tape::record(std::string op, std::vector<TensorPtr> inputs, TensorPtr output,
                       std::function<void()> backward, std::function<void()> recompute) {
  for (const auto& in : inputs)
    if (in->requires_grad) output->requires_grad = true;
  if (debug_checks()) check_finite(*output, op);
  outputs_.insert(output.get());
  nodes_.push_back(Node{std::move(op), std::move(inputs), output,
                        std::move(backward), std::move(recompute)});
  return nodes_.back().output;
}

bool Tape::produced(const TensorPtr& t) const { return outputs_.count(t.get()) > 0; }

void Tape::backward(const TensorPtr& loss) {
  if (loss->numel() != 1)
    fail("backward: loss must be scalar, got shape " + shape_str(loss->shape));
  if (!produced(loss)) fail("backward: loss was not produced on this tape");
  loss->ensure_grad();
  loss->grad[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (!it->output->requires_grad || it->output->grad.empty()) continue;
    it->backward();
  }
}

void Tape::replay() {
  for (auto& n : nodes_) {
    n.recompute();
    if (debug_checks()) check_finite(*n.output, n.op + " (replay)");
  }
}

namespace ops {
namespace {

constexpr double kLogClamp = 1e-12;

// Broadcast accepted for binary kinds: identical shapes, or rank-1 b whose
// length matches a's channel axis (axis 1 for rank >= 2).
enum class Bcast { none, channel };

struct BinaryPlan {
  Bcast bcast;
  int64_t channels = 0;
  int64_t inner = 0;  // elements per channel slice
};

BinaryPlan binary_plan(const char* op, const TensorPtr& a, const TensorPtr& b) {
  if (a->shape == b->shape) return {Bcast::none};
  if (b->rank() == 1 && a->rank() >= 2 && b->shape[0] == a->shape[1]) {
    int64_t inner = 1;
    for (int i = 2; i < a->rank(); ++i) inner *= a->shape[i];
    return {Bcast::channel, a->shape[1], inner};
  }
  fail(std::string(op) + ": shape mismatch " + shape_str(a->shape) + " vs " + shape_str(b->shape));
}

inline int64_t channel_of(int64_t idx, const BinaryPlan& plan) {
  return (idx / plan.inner) % plan.channels;
}

const char* ew_name(EwKind kind) {
  switch (kind) {
    case EwKind::add: return "add";
    case EwKind::sub: return "sub";
    case EwKind::mul: return "mul";
    case EwKind::relu: return "relu";
    case EwKind::tanh: return "tanh";
    case EwKind::exp: return "exp";
    case EwKind::log: return "log";
    case EwKind::scale: return "scale";
  }
  return "?";
}

}  // namespace

TensorPtr elementwise(Tape& tape, EwKind kind, const TensorPtr& a, const TensorPtr& b,
                      double c, LogMode log_mode) {
  const bool binary = kind == EwKind::add || kind == EwKind::sub || kind == EwKind::mul;
  const char* name = ew_name(kind);
  if (binary && !b) fail(std::string(name) + ": second operand required");
  if (!binary && b) fail(std::string(name) + ": unary op takes one operand");

  BinaryPlan plan{Bcast::none};
  if (binary) plan = binary_plan(name, a, b);

  auto out = make_tensor(a->shape);
  const int64_t n = a->numel();

  auto compute = [=] {
    const double* av = a->values.data();
    double* ov = out->values.data();
    switch (kind) {
      case EwKind::add:
      case EwKind::sub:
      case EwKind::mul: {
        const double* bv = b->values.data();
        for (int64_t i = 0; i < n; ++i) {
          double rhs = plan.bcast == Bcast::none ? bv[i] : bv[channel_of(i, plan)];
          ov[i] = kind == EwKind::add ? av[i] + rhs
                : kind == EwKind::sub ? av[i] - rhs
                                      : av[i] * rhs;
        }
        break;
      }
      case EwKind::relu:
        for (int64_t i = 0; i < n; ++i) ov[i] = av[i] > 0.0 ? av[i] : 0.0;
        break;
      case EwKind::tanh:
        for (int64_t i = 0; i < n; ++i) ov[i] = std::tanh(av[i]);
        break;
      case EwKind::exp:
        for (int64_t i = 0; i < n; ++i) ov[i] = std::exp(av[i]);
        break;
      case EwKind::log:
        for (int64_t i = 0; i < n; ++i) {
          if (log_mode == LogMode::strict && av[i] <= 0.0)
            fail("log: non-positive input " + std::to_string(av[i]) + " at flat index " +
                 std::to_string(i) + " (strict mode)");
          ov[i] = std::log(std::max(av[i], kLogClamp));
        }
        break;
      case EwKind::scale:
        for (int64_t i = 0; i < n; ++i) ov[i] = c * av[i];
        break;
    }
  };
  compute();

  auto backward = [=] {
    const double* g = out->grad.data();
    const double* av = a->values.data();
    const double* ov = out->values.data();
    double* ga = grad_dst(a);
    double* gb = binary ? grad_dst(b) : nullptr;
    switch (kind) {
      case EwKind::add:
      case EwKind::sub: {
        const double sgn = kind == EwKind::sub ? -1.0 : 1.0;
        if (ga) detail::axpy(ga, 1.0, g, n);
        if (gb) {
          if (plan.bcast == Bcast::none) {
            detail::axpy(gb, sgn, g, n);
          } else {
            for (int64_t i = 0; i < n; ++i) gb[channel_of(i, plan)] += sgn * g[i];
          }
        }
        break;
      }
      case EwKind::mul: {
        const double* bv = b->values.data();
        if (ga) {
          for (int64_t i = 0; i < n; ++i)
            ga[i] += g[i] * (plan.bcast == Bcast::none ? bv[i] : bv[channel_of(i, plan)]);
        }
        if (gb) {
          if (plan.bcast == Bcast::none) {
            for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * av[i];
          } else {
            for (int64_t i = 0; i < n; ++i) gb[channel_of(i, plan)] += g[i] * av[i];
          }
        }
        break;
      }
      case EwKind::relu:
        if (ga)
          for (int64_t i = 0; i < n; ++i)
            if (av[i] > 0.0) ga[i] += g[i];  // subgradient 0 at exactly 0
        break;
      case EwKind::tanh:
        if (ga)
          for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * (1.0 - ov[i] * ov[i]);
        break;
      case EwKind::exp:
        if (ga)
          for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * ov[i];
        break;
      case EwKind::log:
        if (ga)
          for (int64_t i = 0; i < n; ++i)
            if (av[i] > kLogClamp) ga[i] += g[i] / av[i];
        break;
      case EwKind::scale:
        if (ga) detail::axpy(ga, c, g, n);
        break;
    }
  };

  std::vector<TensorPtr> inputs{a};
  if (binary) inputs.push_back(b);
  return tape.record(name, std::move(inputs), out, std::move(backward), std::move(compute));
}

TensorPtr add(Tape& t, const TensorPtr& a, const TensorPtr& b) { return elementwise(t, EwKind::add, a, b); }
TensorPtr sub(Tape& t, const TensorPtr& a, const TensorPtr& b) { return elementwise(t, EwKind::sub, a, b); }
TensorPtr mul(Tape& t, const TensorPtr& a, const TensorPtr& b) { return elementwise(t, EwKind::mul, a, b); }
TensorPtr relu(Tape& t, const TensorPtr& a) { return elementwise(t, EwKind::relu, a); }
TensorPtr tanh(Tape& t, const TensorPtr& a) { return elementwise(t, EwKind::tanh, a); }
TensorPtr exp(Tape& t, const TensorPtr& a) { return elementwise(t, EwKind::exp, a); }
TensorPtr log(Tape& t, const TensorPtr& a, LogMode mode) {
  return elementwise(t, EwKind::log, a, nullptr, 0.0, mode);
}
TensorPtr scale(Tape& t, const TensorPtr& a, double c) {
  return elementwise(t, EwKind::scale, a, nullptr, c);
}

TensorPtr matmul(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
  if (a->rank() != 2 || b->rank() != 2)
    fail("matmul: expects rank-2 operands, got " + shape_str(a->shape) + " and " + shape_str(b->shape));
  if (a->shape[1] != b->shape[0])
    fail("matmul: inner dimensions disagree, " + shape_str(a->shape) + " x " + shape_str(b->shape));
  const int64_t m = a->shape[0], k = a->shape[1], n = b->shape[1];
  auto out = make_tensor({a->shape[0], b->shape[1]});

  auto compute = [=] {
    const double* av = a->values.data();
    const double* bv = b->values.data();
    double* ov = out->values.data();
    // b gets transposed into contiguous rows so every product is a dot
    // of two contiguous spans.
    std::vector<double> bt(static_cast<size_t>(k * n));
    for (int64_t kk = 0; kk < k; ++kk)
      for (int64_t j = 0; j < n; ++j) bt[j * k + kk] = bv[kk * n + j];
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j)
        ov[i * n + j] = detail::dot(av + i * k, bt.data() + j * k, k);
  };
  compute();

  auto backward = [=] {
    const double* g = out->grad.data();
    const double* av = a->values.data();
    const double* bv = b->values.data();
    if (double* ga = grad_dst(a)) {
      // dA[i,kk] = sum_j g[i,j] * b[kk,j]
      for (int64_t i = 0; i < m; ++i)
        for (int64_t kk = 0; kk < k; ++kk)
          ga[i * k + kk] += detail::dot(g + i * n, bv + kk * n, n);
    }
    if (double* gb = grad_dst(b)) {
      // dB[kk,j] = sum_i a[i,kk] * g[i,j]
      for (int64_t i = 0; i < m; ++i)
        for (int64_t kk = 0; kk < k; ++kk)
          detail::axpy(gb + kk * n, av[i * k + kk], g + i * n, n);
    }
  };

  return tape.record("matmul", {a, b}, out, std::move(backward), std::move(compute));
}

TensorPtr softmax(Tape& tape, const TensorPtr& x, int axis) {
  if (axis < 0 || axis >= x->rank())
    fail("softmax: axis " + std::to_string(axis) + " invalid for shape " + shape_str(x->shape));
  const int64_t len = x->shape[axis];
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x->shape[i];
  for (int i = axis + 1; i < x->rank(); ++i) inner *= x->shape[i];
  auto out = make_tensor(x->shape);

  auto compute = [=] {
    const double* xv = x->values.data();
    double* ov = out->values.data();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t i = 0; i < inner; ++i) {
        const int64_t base = o * len * inner + i;
        double mx = xv[base];
        for (int64_t a = 1; a < len; ++a) mx = std::max(mx, xv[base + a * inner]);
        double denom = 0.0;
        for (int64_t a = 0; a < len; ++a) {
          const double e = std::exp(xv[base + a * inner] - mx);
          ov[base + a * inner] = e;
          denom += e;
        }
        for (int64_t a = 0; a < len; ++a) ov[base + a * inner] /= denom;
      }
  };
  compute();

  auto backward = [=] {
    double* gx = grad_dst(x);
    if (!gx) return;
    const double* g = out->grad.data();
    const double* y = out->values.data();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t i = 0; i < inner; ++i) {
        const int64_t base = o * len * inner + i;
        double gy = 0.0;
        for (int64_t a = 0; a < len; ++a) gy += g[base + a * inner] * y[base + a * inner];
        for (int64_t a = 0; a < len; ++a) {
          const int64_t idx = base + a * inner;
          gx[idx] += y[idx] * (g[idx] - gy);
        }
      }
  };

  return tape.record("softmax", {x}, out, std::move(backward), std::move(compute));
}

TensorPtr concat_channels(Tape& tape, const std::vector<TensorPtr>& tensors) {
  if (tensors.empty()) fail("concat_channels: needs at least one tensor");
  const auto& first = tensors.front();
  if (first->rank() != 4) fail("concat_channels: expects NCHW, got " + shape_str(first->shape));
  int total_ch = 0;
  for (const auto& t : tensors) {
    if (t->rank() != 4 || t->shape[0] != first->shape[0] || t->shape[2] != first->shape[2] ||
        t->shape[3] != first->shape[3])
      fail("concat_channels: batch/spatial mismatch " + shape_str(first->shape) + " vs " +
           shape_str(t->shape));
    total_ch += t->shape[1];
  }
  const int64_t batch = first->shape[0];
  const int64_t hw = static_cast<int64_t>(first->shape[2]) * first->shape[3];
  auto out = make_tensor({first->shape[0], total_ch, first->shape[2], first->shape[3]});

  auto parts = tensors;  // captured copy keeps inputs alive
  auto compute = [=] {
    double* ov = out->values.data();
    for (int64_t n = 0; n < batch; ++n) {
      int64_t off = n * total_ch * hw;
      for (const auto& t : parts) {
        const int64_t sz = t->shape[1] * hw;
        std::memcpy(ov + off, t->values.data() + n * sz, sizeof(double) * static_cast<size_t>(sz));
        off += sz;
      }
    }
  };
  compute();

  auto backward = [=] {
    const double* g = out->grad.data();
    for (int64_t n = 0; n < batch; ++n) {
      int64_t off = n * total_ch * hw;
      for (const auto& t : parts) {
        const int64_t sz = t->shape[1] * hw;
        if (double* gt = grad_dst(t)) detail::axpy(gt + n * sz, 1.0, g + off, sz);
        off += sz;
      }
    }
  };

  return tape.record("concat_channels", tensors, out, std::move(backward), std::move(compute));
}

TensorPtr reshape(Tape& tape, const TensorPtr& x, Shape shape) {
  if (shape_numel(shape) != x->numel())
    fail("reshape: cannot view " + shape_str(x->shape) + " as " + shape_str(shape));
  auto out = make_tensor(std::move(shape));
  auto compute = [=] { out->values = x->values; };
  compute();
  auto backward = [=] {
    if (double* gx = grad_dst(x)) detail::axpy(gx, 1.0, out->grad.data(), x->numel());
  };
  return tape.record("reshape", {x}, out, std::move(backward), std::move(compute));
}

TensorPtr sum_all(Tape& tape, const TensorPtr& x) {
  auto out = make_tensor(Shape{1});
  const int64_t n = x->numel();
  auto compute = [=] {
    double s = 0.0;
    const double* xv = x->values.data();
    for (int64_t i = 0; i < n; ++i) s += xv[i];
    out->values[0] = s;
  };
  compute();
  auto backward = [=] {
    if (double* gx = grad_dst(x)) {
      const double g = out->grad[0];
      for (int64_t i = 0; i < n; ++i) gx[i] += g;
    }
  };
  return tape.record("sum_all", {x}, out, std::move(backward), std::move(compute));
}

}  // namespace ops
}  // namespace midccnn
