#include "midccnn/layers.hpp"

#include <algorithm>
#include <cmath>

#include "kernels.hpp"

namespace midccnn {
namespace ops {
namespace {

struct ConvDims {
  int64_t n, cin, h, w;
  int64_t cout, kh, kw;
  int64_t oh, ow;
  int64_t patch;  // cin*kh*kw
  int64_t m;      // oh*ow
};

ConvDims conv_dims(const TensorPtr& x, const TensorPtr& weight, const TensorPtr& bias,
                   int stride, int padding) {
  if (x->rank() != 4) fail("conv2d: input must be NCHW, got " + shape_str(x->shape));
  if (weight->rank() != 4) fail("conv2d: weight must be rank 4, got " + shape_str(weight->shape));
  if (bias->rank() != 1 || bias->shape[0] != weight->shape[0])
    fail("conv2d: bias shape " + shape_str(bias->shape) + " does not match weight " +
         shape_str(weight->shape));
  if (x->shape[1] != weight->shape[1])
    fail("conv2d: channel mismatch, input " + shape_str(x->shape) + " vs weight " +
         shape_str(weight->shape));
  if (stride < 1 || padding < 0) fail("conv2d: invalid stride/padding");
  ConvDims d;
  d.n = x->shape[0];
  d.cin = x->shape[1];
  d.h = x->shape[2];
  d.w = x->shape[3];
  d.cout = weight->shape[0];
  d.kh = weight->shape[2];
  d.kw = weight->shape[3];
  d.oh = (d.h + 2 * padding - d.kh) / stride + 1;
  d.ow = (d.w + 2 * padding - d.kw) / stride + 1;
  if (d.h + 2 * padding < d.kh || d.w + 2 * padding < d.kw || d.oh < 1 || d.ow < 1)
    fail("conv2d: degenerate output size for input " + shape_str(x->shape) + ", kernel " +
         shape_str(weight->shape) + ", stride " + std::to_string(stride) + ", padding " +
         std::to_string(padding));
  d.patch = d.cin * d.kh * d.kw;
  d.m = d.oh * d.ow;
  return d;
}

// Rows are patches, columns follow (c, kh, kw) order.
void im2col(const double* x, const ConvDims& d, int stride, int padding, double* cols) {
  for (int64_t oh = 0; oh < d.oh; ++oh)
    for (int64_t ow = 0; ow < d.ow; ++ow) {
      double* row = cols + (oh * d.ow + ow) * d.patch;
      int64_t k = 0;
      for (int64_t c = 0; c < d.cin; ++c) {
        const double* plane = x + c * d.h * d.w;
        for (int64_t kh = 0; kh < d.kh; ++kh) {
          const int64_t ih = oh * stride + kh - padding;
          for (int64_t kw = 0; kw < d.kw; ++kw, ++k) {
            const int64_t iw = ow * stride + kw - padding;
            row[k] = (ih >= 0 && ih < d.h && iw >= 0 && iw < d.w) ? plane[ih * d.w + iw] : 0.0;
          }
        }
      }
    }
}

}  // namespace

using detail::grad_dst;

TensorPtr conv2d(Tape& tape, const TensorPtr& x, const TensorPtr& weight, const TensorPtr& bias,
                 int stride, int padding) {
  const ConvDims d = conv_dims(x, weight, bias, stride, padding);
  auto out = make_tensor({static_cast<int>(d.n), static_cast<int>(d.cout),
                          static_cast<int>(d.oh), static_cast<int>(d.ow)});

  auto compute = [=] {
    std::vector<double> cols(static_cast<size_t>(d.m * d.patch));
    const double* wv = weight->values.data();
    const double* bv = bias->values.data();
    for (int64_t n = 0; n < d.n; ++n) {
      im2col(x->values.data() + n * d.cin * d.h * d.w, d, stride, padding, cols.data());
      double* on = out->values.data() + n * d.cout * d.m;
      for (int64_t o = 0; o < d.cout; ++o) {
        const double* wrow = wv + o * d.patch;
        const double b = bv[o];
        for (int64_t m = 0; m < d.m; ++m)
          on[o * d.m + m] = detail::dot(wrow, cols.data() + m * d.patch, d.patch) + b;
      }
    }
  };
  compute();

  auto backward = [=] {
    const double* g = out->grad.data();
    const double* wv = weight->values.data();
    double* gx = grad_dst(x);
    double* gw = grad_dst(weight);
    double* gb = grad_dst(bias);
    std::vector<double> cols;
    std::vector<double> dcols;
    if (gw || gx) cols.resize(static_cast<size_t>(d.m * d.patch));
    if (gx) dcols.resize(static_cast<size_t>(d.m * d.patch));
    for (int64_t n = 0; n < d.n; ++n) {
      const double* gn = g + n * d.cout * d.m;
      if (gw || gx)
        im2col(x->values.data() + n * d.cin * d.h * d.w, d, stride, padding, cols.data());
      if (gb)
        for (int64_t o = 0; o < d.cout; ++o)
          for (int64_t m = 0; m < d.m; ++m) gb[o] += gn[o * d.m + m];
      if (gw)
        for (int64_t o = 0; o < d.cout; ++o)
          for (int64_t m = 0; m < d.m; ++m)
            detail::axpy(gw + o * d.patch, gn[o * d.m + m], cols.data() + m * d.patch, d.patch);
      if (gx) {
        std::fill(dcols.begin(), dcols.end(), 0.0);
        for (int64_t o = 0; o < d.cout; ++o)
          for (int64_t m = 0; m < d.m; ++m)
            detail::axpy(dcols.data() + m * d.patch, gn[o * d.m + m], wv + o * d.patch, d.patch);
        // col2im: scatter patch gradients back, skipping padding cells
        double* gxn = gx + n * d.cin * d.h * d.w;
        for (int64_t oh = 0; oh < d.oh; ++oh)
          for (int64_t ow = 0; ow < d.ow; ++ow) {
            const double* row = dcols.data() + (oh * d.ow + ow) * d.patch;
            int64_t k = 0;
            for (int64_t c = 0; c < d.cin; ++c) {
              double* plane = gxn + c * d.h * d.w;
              for (int64_t kh = 0; kh < d.kh; ++kh) {
                const int64_t ih = oh * stride + kh - padding;
                for (int64_t kw = 0; kw < d.kw; ++kw, ++k) {
                  const int64_t iw = ow * stride + kw - padding;
                  if (ih >= 0 && ih < d.h && iw >= 0 && iw < d.w) plane[ih * d.w + iw] += row[k];
                }
              }
            }
          }
      }
    }
  };

  return tape.record("conv2d", {x, weight, bias}, out, std::move(backward), std::move(compute));
}

TensorPtr pool2d(Tape& tape, PoolKind kind, const TensorPtr& x, int k, int stride, int padding) {
  if (x->rank() != 4) fail("pool2d: input must be NCHW, got " + shape_str(x->shape));
  if (k < 1 || stride < 1 || padding < 0) fail("pool2d: invalid window/stride/padding");
  const int64_t n = x->shape[0], c = x->shape[1], h = x->shape[2], w = x->shape[3];
  const int64_t oh = (h + 2 * padding - k) / stride + 1;
  const int64_t ow = (w + 2 * padding - k) / stride + 1;
  if (h + 2 * padding < k || w + 2 * padding < k || oh < 1 || ow < 1)
    fail("pool2d: degenerate output size for input " + shape_str(x->shape) + ", window " +
         std::to_string(k) + ", stride " + std::to_string(stride));
  auto out = make_tensor({static_cast<int>(n), static_cast<int>(c), static_cast<int>(oh),
                          static_cast<int>(ow)});
  // argmax per output (flat h*w index within the plane), max pooling only
  auto argmax = std::make_shared<std::vector<int64_t>>();
  if (kind == PoolKind::max) argmax->assign(static_cast<size_t>(out->numel()), -1);

  auto compute = [=] {
    const double* xv = x->values.data();
    double* ov = out->values.data();
    for (int64_t nc = 0; nc < n * c; ++nc) {
      const double* plane = xv + nc * h * w;
      for (int64_t i = 0; i < oh; ++i)
        for (int64_t j = 0; j < ow; ++j) {
          const int64_t h0 = i * stride - padding, w0 = j * stride - padding;
          const int64_t h1 = std::max<int64_t>(h0, 0), w1 = std::max<int64_t>(w0, 0);
          const int64_t h2 = std::min<int64_t>(h0 + k, h), w2 = std::min<int64_t>(w0 + k, w);
          const int64_t oidx = nc * oh * ow + i * ow + j;
          if (h1 >= h2 || w1 >= w2) fail("pool2d: window fully outside input");
          if (kind == PoolKind::max) {
            double best = plane[h1 * w + w1];
            int64_t besti = h1 * w + w1;
            for (int64_t hh = h1; hh < h2; ++hh)
              for (int64_t ww = w1; ww < w2; ++ww) {
                const double v = plane[hh * w + ww];
                if (v > best) {  // strict: ties keep the lowest flat index
                  best = v;
                  besti = hh * w + ww;
                }
              }
            ov[oidx] = best;
            (*argmax)[static_cast<size_t>(oidx)] = besti;
          } else {
            double s = 0.0;
            for (int64_t hh = h1; hh < h2; ++hh)
              for (int64_t ww = w1; ww < w2; ++ww) s += plane[hh * w + ww];
            ov[oidx] = s / static_cast<double>((h2 - h1) * (w2 - w1));
          }
        }
    }
  };
  compute();

  auto backward = [=] {
    double* gx = grad_dst(x);
    if (!gx) return;
    const double* g = out->grad.data();
    // gather form: each input cell scans the windows that contain it
    const auto first_window = [&](int64_t pos) {
      const int64_t num = pos + padding - k + stride;  // ceil((pos + p - k + 1) / stride)
      return std::max<int64_t>(0, num < 0 ? 0 : num / stride);
    };
    for (int64_t nc = 0; nc < n * c; ++nc) {
      double* gplane = gx + nc * h * w;
      const double* gout = g + nc * oh * ow;
      const int64_t* am = kind == PoolKind::max ? argmax->data() + nc * oh * ow : nullptr;
      for (int64_t hh = 0; hh < h; ++hh) {
        const int64_t ilo = first_window(hh);
        const int64_t ihi = std::min<int64_t>(oh - 1, (hh + padding) / stride);
        for (int64_t ww = 0; ww < w; ++ww) {
          const int64_t jlo = first_window(ww);
          const int64_t jhi = std::min<int64_t>(ow - 1, (ww + padding) / stride);
          double acc = 0.0;
          for (int64_t i = ilo; i <= ihi; ++i)
            for (int64_t j = jlo; j <= jhi; ++j) {
              if (kind == PoolKind::max) {
                if (am[i * ow + j] == hh * w + ww) acc += gout[i * ow + j];
              } else {
                const int64_t h0 = i * stride - padding, w0 = j * stride - padding;
                const int64_t cnt = (std::min<int64_t>(h0 + k, h) - std::max<int64_t>(h0, 0)) *
                                    (std::min<int64_t>(w0 + k, w) - std::max<int64_t>(w0, 0));
                acc += gout[i * ow + j] / static_cast<double>(cnt);
              }
            }
          gplane[hh * w + ww] += acc;
        }
      }
    }
  };

  return tape.record(kind == PoolKind::max ? "max_pool2d" : "avg_pool2d", {x}, out,
                     std::move(backward), std::move(compute));
}

TensorPtr batch_norm(Tape& tape, const TensorPtr& x, const TensorPtr& gamma,
                     const TensorPtr& beta, const TensorPtr& running_mean,
                     const TensorPtr& running_var, double eps, double momentum, Mode mode) {
  if (x->rank() != 4) fail("batch_norm: input must be NCHW, got " + shape_str(x->shape));
  const int64_t n = x->shape[0], c = x->shape[1], h = x->shape[2], w = x->shape[3];
  if (gamma->numel() != c || beta->numel() != c || running_mean->numel() != c ||
      running_var->numel() != c)
    fail("batch_norm: parameter length does not match " + std::to_string(c) + " channels");
  const int64_t hw = h * w, nb = n * hw;
  auto out = make_tensor(x->shape);
  auto mean = std::make_shared<std::vector<double>>(static_cast<size_t>(c));
  auto invstd = std::make_shared<std::vector<double>>(static_cast<size_t>(c));

  auto normalize = [=] {
    const double* xv = x->values.data();
    double* ov = out->values.data();
    for (int64_t ch = 0; ch < c; ++ch) {
      const double mu = (*mean)[ch], is = (*invstd)[ch];
      const double gm = gamma->values[ch], bt = beta->values[ch];
      for (int64_t i = 0; i < n; ++i) {
        const double* src = xv + (i * c + ch) * hw;
        double* dst = ov + (i * c + ch) * hw;
        for (int64_t s = 0; s < hw; ++s) dst[s] = gm * (src[s] - mu) * is + bt;
      }
    }
  };

  if (mode == Mode::train) {
    const double* xv = x->values.data();
    for (int64_t ch = 0; ch < c; ++ch) {
      double sum = 0.0;
      for (int64_t i = 0; i < n; ++i) {
        const double* src = xv + (i * c + ch) * hw;
        for (int64_t s = 0; s < hw; ++s) sum += src[s];
      }
      const double mu = sum / static_cast<double>(nb);
      double sq = 0.0;
      for (int64_t i = 0; i < n; ++i) {
        const double* src = xv + (i * c + ch) * hw;
        for (int64_t s = 0; s < hw; ++s) sq += (src[s] - mu) * (src[s] - mu);
      }
      const double var = sq / static_cast<double>(nb);
      (*mean)[ch] = mu;
      (*invstd)[ch] = 1.0 / std::sqrt(var + eps);
      const double var_running = nb > 1 ? sq / static_cast<double>(nb - 1) : var;
      running_mean->values[ch] = (1.0 - momentum) * running_mean->values[ch] + momentum * mu;
      running_var->values[ch] = (1.0 - momentum) * running_var->values[ch] + momentum * var_running;
    }
  } else {
    for (int64_t ch = 0; ch < c; ++ch) {
      (*mean)[ch] = running_mean->values[ch];
      (*invstd)[ch] = 1.0 / std::sqrt(running_var->values[ch] + eps);
    }
  }
  normalize();

  auto backward = [=] {
    const double* g = out->grad.data();
    const double* xv = x->values.data();
    double* gx = grad_dst(x);
    double* gg = grad_dst(gamma);
    double* gb = grad_dst(beta);
    for (int64_t ch = 0; ch < c; ++ch) {
      const double mu = (*mean)[ch], is = (*invstd)[ch], gm = gamma->values[ch];
      double sum_g = 0.0, sum_gx = 0.0;
      for (int64_t i = 0; i < n; ++i) {
        const double* gsrc = g + (i * c + ch) * hw;
        const double* src = xv + (i * c + ch) * hw;
        for (int64_t s = 0; s < hw; ++s) {
          sum_g += gsrc[s];
          sum_gx += gsrc[s] * (src[s] - mu) * is;
        }
      }
      if (gg) gg[ch] += sum_gx;
      if (gb) gb[ch] += sum_g;
      if (!gx) continue;
      if (mode == Mode::train) {
        const double inv_nb = 1.0 / static_cast<double>(nb);
        for (int64_t i = 0; i < n; ++i) {
          const double* gsrc = g + (i * c + ch) * hw;
          const double* src = xv + (i * c + ch) * hw;
          double* dst = gx + (i * c + ch) * hw;
          for (int64_t s = 0; s < hw; ++s) {
            const double xh = (src[s] - mu) * is;
            dst[s] += gm * is * (gsrc[s] - sum_g * inv_nb - xh * sum_gx * inv_nb);
          }
        }
      } else {
        for (int64_t i = 0; i < n; ++i) {
          const double* gsrc = g + (i * c + ch) * hw;
          double* dst = gx + (i * c + ch) * hw;
          for (int64_t s = 0; s < hw; ++s) dst[s] += gm * is * gsrc[s];
        }
      }
    }
  };

  // Replay normalizes with the saved batch statistics; running stats are
  // updated only by the original forward.
  return tape.record("batch_norm", {x, gamma, beta, running_mean, running_var}, out,
                     std::move(backward), std::move(normalize));
}

TensorPtr dropout(Tape& tape, const TensorPtr& x, double rate, Mode mode, Rng* rng) {
  if (rate < 0.0 || rate >= 1.0)
    fail("dropout: rate must be in [0, 1), got " + std::to_string(rate));
  const int64_t num = x->numel();
  auto out = make_tensor(x->shape);
  const bool active = mode == Mode::train && rate > 0.0;

  if (!active) {
    auto compute = [=] { out->values = x->values; };
    compute();
    auto backward = [=] {
      if (double* gx = grad_dst(x)) detail::axpy(gx, 1.0, out->grad.data(), num);
    };
    return tape.record("dropout", {x}, out, std::move(backward), std::move(compute));
  }

  if (!rng) fail("dropout: train mode requires an RNG");
  auto mask = std::make_shared<std::vector<double>>(static_cast<size_t>(num));
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const double keep_scale = 1.0 / (1.0 - rate);
  for (int64_t i = 0; i < num; ++i) (*mask)[i] = uni(*rng) < rate ? 0.0 : keep_scale;

  auto compute = [=] {
    const double* xv = x->values.data();
    double* ov = out->values.data();
    for (int64_t i = 0; i < num; ++i) ov[i] = xv[i] * (*mask)[i];
  };
  compute();
  auto backward = [=] {
    if (double* gx = grad_dst(x)) {
      const double* g = out->grad.data();
      for (int64_t i = 0; i < num; ++i) gx[i] += g[i] * (*mask)[i];
    }
  };
  return tape.record("dropout", {x}, out, std::move(backward), std::move(compute));
}

TensorPtr linear(Tape& tape, const TensorPtr& x, const TensorPtr& weight, const TensorPtr& bias) {
  if (x->rank() != 2 || weight->rank() != 2 || x->shape[1] != weight->shape[1])
    fail("linear: input " + shape_str(x->shape) + " incompatible with weight " +
         shape_str(weight->shape));
  if (bias->numel() != weight->shape[0])
    fail("linear: bias shape " + shape_str(bias->shape) + " does not match weight " +
         shape_str(weight->shape));
  const int64_t n = x->shape[0], in = x->shape[1], outd = weight->shape[0];
  auto out = make_tensor({static_cast<int>(n), static_cast<int>(outd)});

  auto compute = [=] {
    const double* xv = x->values.data();
    const double* wv = weight->values.data();
    double* ov = out->values.data();
    for (int64_t i = 0; i < n; ++i)
      for (int64_t o = 0; o < outd; ++o)
        ov[i * outd + o] = detail::dot(xv + i * in, wv + o * in, in) + bias->values[o];
  };
  compute();

  auto backward = [=] {
    const double* g = out->grad.data();
    const double* xv = x->values.data();
    const double* wv = weight->values.data();
    if (double* gx = grad_dst(x))
      for (int64_t i = 0; i < n; ++i)
        for (int64_t o = 0; o < outd; ++o) detail::axpy(gx + i * in, g[i * outd + o], wv + o * in, in);
    if (double* gw = grad_dst(weight))
      for (int64_t i = 0; i < n; ++i)
        for (int64_t o = 0; o < outd; ++o) detail::axpy(gw + o * in, g[i * outd + o], xv + i * in, in);
    if (double* gb = grad_dst(bias))
      for (int64_t i = 0; i < n; ++i)
        for (int64_t o = 0; o < outd; ++o) gb[o] += g[i * outd + o];
  };

  return tape.record("linear", {x, weight, bias}, out, std::move(backward), std::move(compute));
}

}  // namespace ops

Conv2d::Conv2d(int in_ch, int out_ch, int k, int stride_, int padding_, const std::string& name)
    : weight(make_param({out_ch, in_ch, k, k}, name + ".weight")),
      bias(make_param({out_ch}, name + ".bias")),
      stride(stride_),
      padding(padding_) {}

TensorPtr Conv2d::forward(Tape& tape, const TensorPtr& x) const {
  return ops::conv2d(tape, x, weight, bias, stride, padding);
}

BatchNorm2d::BatchNorm2d(int channels, const std::string& name)
    : gamma(make_param({channels}, name + ".gamma")),
      beta(make_param({channels}, name + ".beta")),
      running_mean(make_tensor({channels}, 0.0)),
      running_var(make_tensor({channels}, 1.0)) {
  std::fill(gamma->values.begin(), gamma->values.end(), 1.0);
  running_mean->name = name + ".running_mean";
  running_var->name = name + ".running_var";
}

TensorPtr BatchNorm2d::forward(Tape& tape, const TensorPtr& x, Mode mode) const {
  return ops::batch_norm(tape, x, gamma, beta, running_mean, running_var, eps, momentum, mode);
}

Linear::Linear(int in, int out, const std::string& name)
    : weight(make_param({out, in}, name + ".weight")),
      bias(make_param({out}, name + ".bias")) {}

TensorPtr Linear::forward(Tape& tape, const TensorPtr& x) const {
  return ops::linear(tape, x, weight, bias);
}

TensorPtr composite_fn(Tape& tape, const BatchNorm2d& bn, const Conv2d& conv, const TensorPtr& x,
                       Mode mode, bool use_bn) {
  TensorPtr h = use_bn ? bn.forward(tape, x, mode) : x;
  return conv.forward(tape, ops::relu(tape, h));
}

DenseBlock::DenseBlock(int in_ch, int k, int num_layers, bool use_bn_, const std::string& name)
    : in_channels(in_ch), growth_rate(k), use_bn(use_bn_) {
  for (int l = 0; l < num_layers; ++l) {
    const int cin = in_ch + l * k;
    const std::string base = name + ".layer" + std::to_string(l + 1);
    layers.push_back(Layer{
        BatchNorm2d(cin, base + ".bn1"),
        Conv2d(cin, 4 * k, 1, 1, 0, base + ".bottleneck"),
        BatchNorm2d(4 * k, base + ".bn2"),
        Conv2d(4 * k, k, 3, 1, 1, base + ".conv"),
    });
  }
}

TensorPtr DenseBlock::forward(Tape& tape, const TensorPtr& x, Mode mode) const {
  if (x->shape[1] != in_channels)
    fail("dense_block: channel mismatch, expected " + std::to_string(in_channels) + ", got " +
         shape_str(x->shape));
  std::vector<TensorPtr> features{x};
  for (const auto& layer : layers) {
    TensorPtr inp = features.size() == 1 ? features[0] : ops::concat_channels(tape, features);
    TensorPtr squeezed = composite_fn(tape, layer.bn1, layer.bottleneck, inp, mode, use_bn);
    TensorPtr grown = composite_fn(tape, layer.bn2, layer.conv, squeezed, mode, use_bn);
    features.push_back(grown);
  }
  return ops::concat_channels(tape, features);
}

TransitionLayer::TransitionLayer(int channels, bool use_bn_, const std::string& name)
    : bn(channels, name + ".bn"), conv(channels, channels, 1, 1, 0, name + ".conv"), use_bn(use_bn_) {}

TensorPtr TransitionLayer::forward(Tape& tape, const TensorPtr& x, Mode mode) const {
  if (x->shape[2] % 2 != 0 || x->shape[3] % 2 != 0)
    fail("transition: 2x2 stride-2 pool requires even spatial dims, got " + shape_str(x->shape));
  TensorPtr refined = composite_fn(tape, bn, conv, x, mode, use_bn);
  return ops::pool2d(tape, ops::PoolKind::avg, refined, 2, 2, 0);
}

}  // namespace midccnn
