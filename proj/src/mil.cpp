#include "midccnn/mil.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "kernels.hpp"

namespace midccnn {
namespace ops {

using detail::grad_dst;

TensorPtr attention_scores(Tape& tape, const TensorPtr& x, const TensorPtr& w1,
                           const TensorPtr& w2, const TensorPtr& b) {
  if (x->rank() != 4) fail("attention_scores: input must be NCHW, got " + shape_str(x->shape));
  const int64_t n = x->shape[0], c = x->shape[1], h = x->shape[2], w = x->shape[3];
  const int64_t m = h * w;
  if (w1->rank() != 2 || w1->shape[1] != c)
    fail("attention_scores: W1 " + shape_str(w1->shape) + " does not match " + std::to_string(c) +
         " instance channels");
  const int64_t l = w1->shape[0];
  if (w2->numel() != l || b->numel() != l)
    fail("attention_scores: w2/b length must equal hidden dim " + std::to_string(l));
  auto out = make_tensor({static_cast<int>(n), static_cast<int>(h), static_cast<int>(w)});
  // tanh activations saved for backward: [n][l][m]
  auto acts = std::make_shared<std::vector<double>>(static_cast<size_t>(n * l * m));

  auto compute = [=] {
    const double* xv = x->values.data();
    double* ov = out->values.data();
    for (int64_t i = 0; i < n; ++i) {
      const double* xi = xv + i * c * m;
      double* ti = acts->data() + i * l * m;
      for (int64_t ll = 0; ll < l; ++ll) {
        const double* w1row = w1->values.data() + ll * c;
        for (int64_t mm = 0; mm < m; ++mm) {
          double s = b->values[ll];
          for (int64_t cc = 0; cc < c; ++cc) s += w1row[cc] * xi[cc * m + mm];
          ti[ll * m + mm] = std::tanh(s);
        }
      }
      for (int64_t mm = 0; mm < m; ++mm) {
        double s = 0.0;
        for (int64_t ll = 0; ll < l; ++ll) s += w2->values[ll] * ti[ll * m + mm];
        ov[i * m + mm] = s;
      }
    }
  };
  compute();

  auto backward = [=] {
    const double* g = out->grad.data();
    const double* xv = x->values.data();
    double* gx = grad_dst(x);
    double* gw1 = grad_dst(w1);
    double* gw2 = grad_dst(w2);
    double* gb = grad_dst(b);
    for (int64_t i = 0; i < n; ++i) {
      const double* gi = g + i * m;
      const double* xi = xv + i * c * m;
      const double* ti = acts->data() + i * l * m;
      for (int64_t ll = 0; ll < l; ++ll) {
        const double w2l = w2->values[ll];
        const double* w1row = w1->values.data() + ll * c;
        for (int64_t mm = 0; mm < m; ++mm) {
          const double t = ti[ll * m + mm];
          if (gw2) gw2[ll] += gi[mm] * t;
          const double dpre = gi[mm] * w2l * (1.0 - t * t);
          if (gb) gb[ll] += dpre;
          if (gw1)
            for (int64_t cc = 0; cc < c; ++cc) gw1[ll * c + cc] += dpre * xi[cc * m + mm];
          if (gx)
            for (int64_t cc = 0; cc < c; ++cc) gx[i * c * m + cc * m + mm] += dpre * w1row[cc];
        }
      }
    }
  };

  return tape.record("attention_scores", {x, w1, w2, b}, out, std::move(backward),
                     std::move(compute));
}

TensorPtr weighted_pool(Tape& tape, const TensorPtr& probs, const TensorPtr& weights) {
  if (probs->rank() != 4) fail("weighted_pool: probs must be NCHW, got " + shape_str(probs->shape));
  const int64_t n = probs->shape[0], c = probs->shape[1];
  const int64_t m = static_cast<int64_t>(probs->shape[2]) * probs->shape[3];
  if (weights->rank() != 3 || weights->shape[0] != probs->shape[0] ||
      weights->shape[1] != probs->shape[2] || weights->shape[2] != probs->shape[3])
    fail("weighted_pool: weights " + shape_str(weights->shape) + " do not match probs " +
         shape_str(probs->shape));
  auto out = make_tensor({static_cast<int>(n), static_cast<int>(c)});

  auto compute = [=] {
    const double* pv = probs->values.data();
    const double* wv = weights->values.data();
    for (int64_t i = 0; i < n; ++i)
      for (int64_t cc = 0; cc < c; ++cc)
        out->values[i * c + cc] = detail::dot(pv + (i * c + cc) * m, wv + i * m, m);
  };
  compute();

  auto backward = [=] {
    const double* g = out->grad.data();
    const double* pv = probs->values.data();
    const double* wv = weights->values.data();
    if (double* gp = grad_dst(probs))
      for (int64_t i = 0; i < n; ++i)
        for (int64_t cc = 0; cc < c; ++cc)
          detail::axpy(gp + (i * c + cc) * m, g[i * c + cc], wv + i * m, m);
    if (double* gw = grad_dst(weights))
      for (int64_t i = 0; i < n; ++i)
        for (int64_t cc = 0; cc < c; ++cc)
          detail::axpy(gw + i * m, g[i * c + cc], pv + (i * c + cc) * m, m);
  };

  return tape.record("weighted_pool", {probs, weights}, out, std::move(backward),
                     std::move(compute));
}

TensorPtr instance_mean(Tape& tape, const TensorPtr& probs) {
  if (probs->rank() != 4) fail("instance_mean: probs must be NCHW, got " + shape_str(probs->shape));
  const int64_t n = probs->shape[0], c = probs->shape[1];
  const int64_t m = static_cast<int64_t>(probs->shape[2]) * probs->shape[3];
  auto out = make_tensor({static_cast<int>(n), static_cast<int>(c)});
  auto compute = [=] {
    const double* pv = probs->values.data();
    for (int64_t i = 0; i < n * c; ++i) {
      double s = 0.0;
      for (int64_t mm = 0; mm < m; ++mm) s += pv[i * m + mm];
      out->values[i] = s / static_cast<double>(m);
    }
  };
  compute();
  auto backward = [=] {
    if (double* gp = grad_dst(probs)) {
      const double* g = out->grad.data();
      for (int64_t i = 0; i < n * c; ++i)
        for (int64_t mm = 0; mm < m; ++mm) gp[i * m + mm] += g[i] / static_cast<double>(m);
    }
  };
  return tape.record("instance_mean", {probs}, out, std::move(backward), std::move(compute));
}

TensorPtr instance_max(Tape& tape, const TensorPtr& probs) {
  if (probs->rank() != 4) fail("instance_max: probs must be NCHW, got " + shape_str(probs->shape));
  const int64_t n = probs->shape[0], c = probs->shape[1];
  const int64_t m = static_cast<int64_t>(probs->shape[2]) * probs->shape[3];
  auto out = make_tensor({static_cast<int>(n), static_cast<int>(c)});
  auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(n * c));
  auto compute = [=] {
    const double* pv = probs->values.data();
    for (int64_t i = 0; i < n * c; ++i) {
      double best = pv[i * m];
      int64_t besti = 0;
      for (int64_t mm = 1; mm < m; ++mm)
        if (pv[i * m + mm] > best) {  // ties keep the lowest flat index
          best = pv[i * m + mm];
          besti = mm;
        }
      out->values[i] = best;
      (*argmax)[i] = besti;
    }
  };
  compute();
  auto backward = [=] {
    if (double* gp = grad_dst(probs)) {
      const double* g = out->grad.data();
      for (int64_t i = 0; i < n * c; ++i) gp[i * m + (*argmax)[i]] += g[i];
    }
  };
  return tape.record("instance_max", {probs}, out, std::move(backward), std::move(compute));
}

TensorPtr row_normalize(Tape& tape, const TensorPtr& x) {
  if (x->rank() != 2) fail("row_normalize: expects rank 2, got " + shape_str(x->shape));
  const int64_t n = x->shape[0], c = x->shape[1];
  auto out = make_tensor(x->shape);
  auto sums = std::make_shared<std::vector<double>>(static_cast<size_t>(n));
  auto compute = [=] {
    const double* xv = x->values.data();
    for (int64_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (int64_t cc = 0; cc < c; ++cc) s += xv[i * c + cc];
      if (!(s > 0.0)) fail("row_normalize: non-positive row sum " + std::to_string(s));
      (*sums)[i] = s;
      for (int64_t cc = 0; cc < c; ++cc) out->values[i * c + cc] = xv[i * c + cc] / s;
    }
  };
  compute();
  auto backward = [=] {
    if (double* gx = grad_dst(x)) {
      const double* g = out->grad.data();
      const double* y = out->values.data();
      for (int64_t i = 0; i < n; ++i) {
        double gy = 0.0;
        for (int64_t cc = 0; cc < c; ++cc) gy += g[i * c + cc] * y[i * c + cc];
        for (int64_t cc = 0; cc < c; ++cc) gx[i * c + cc] += (g[i * c + cc] - gy) / (*sums)[i];
      }
    }
  };
  return tape.record("row_normalize", {x}, out, std::move(backward), std::move(compute));
}

}  // namespace ops

std::string to_string(MilPooling method) {
  switch (method) {
    case MilPooling::attention: return "attention";
    case MilPooling::mean: return "mean";
    case MilPooling::max: return "max";
  }
  return "?";
}

MilPooling mil_pooling_from_string(const std::string& name) {
  if (name == "attention") return MilPooling::attention;
  if (name == "mean") return MilPooling::mean;
  if (name == "max") return MilPooling::max;
  fail("unknown MIL pooling method '" + name + "' (expected attention|mean|max)");
}

MilHead::MilHead(const MilHeadConfig& config) : config_(config) {
  if (config.num_classes < 2) fail("MilHead: num_classes must be >= 2");
  if (config.in_channels < 1 || config.hidden_dim < 1)
    fail("MilHead: in_channels and hidden_dim must be positive");
  instance_conv_ = Conv2d(config.in_channels, config.num_classes, 1, 1, 0, "mil.instance");
  w1_ = make_param({config.hidden_dim, config.num_classes}, "mil.attention.W1");
  w2_ = make_param({config.hidden_dim}, "mil.attention.w2");
  b_ = make_param({config.hidden_dim}, "mil.attention.b");
}

TensorPtr MilHead::instance_logits(Tape& tape, const TensorPtr& features) const {
  if (features->rank() != 4 || features->shape[1] != config_.in_channels)
    fail("instance_logits: expected " + std::to_string(config_.in_channels) +
         " feature channels, got " + shape_str(features->shape));
  return instance_conv_.forward(tape, features);
}

TensorPtr MilHead::instance_probs(Tape& tape, const TensorPtr& logits) {
  return ops::softmax(tape, logits, 1);
}

TensorPtr MilHead::attention_weights(Tape& tape, const TensorPtr& logits) const {
  TensorPtr scored = ops::attention_scores(tape, logits, w1_, w2_, b_);
  const int n = scored->shape[0], h = scored->shape[1], w = scored->shape[2];
  TensorPtr flat = ops::reshape(tape, scored, {n, h * w});
  return ops::reshape(tape, ops::softmax(tape, flat, 1), {n, h, w});
}

TensorPtr mil_pool(Tape& tape, MilPooling method, const TensorPtr& probs,
                   const TensorPtr& weights) {
  switch (method) {
    case MilPooling::attention:
      if (!weights) fail("mil_pool: attention pooling requires attention weights");
      return ops::weighted_pool(tape, probs, weights);
    case MilPooling::mean:
      return ops::instance_mean(tape, probs);
    case MilPooling::max:
      // per-class max over positions, renormalized back to a distribution
      return ops::row_normalize(tape, ops::instance_max(tape, probs));
  }
  fail("mil_pool: bad method");
}

MilHead::Output MilHead::forward(Tape& tape, const TensorPtr& features) const {
  TensorPtr logits = instance_logits(tape, features);
  TensorPtr probs = instance_probs(tape, logits);
  TensorPtr attn;
  if (config_.method == MilPooling::attention)
    attn = attention_weights(tape, config_.attention_on_probs ? probs : logits);
  TensorPtr p_bag = mil_pool(tape, config_.method, probs, attn);
  return {p_bag, probs, attn};
}

BagPrediction MilHead::predict(const TensorPtr& features) const {
  if (features->rank() != 4 || features->shape[0] != 1)
    fail("predict: expects a single bag [1, C, H, W], got " + shape_str(features->shape));
  Tape tape;
  Output out = forward(tape, features);
  BagPrediction pred;
  pred.p_bag = out.p_bag->values;
  const int c = out.instance_probs->shape[1];
  pred.grid_h = out.instance_probs->shape[2];
  pred.grid_w = out.instance_probs->shape[3];
  pred.instance_probs = make_tensor({c, pred.grid_h, pred.grid_w}, out.instance_probs->values);
  if (out.attention) pred.attention = out.attention->values;
  return pred;
}

std::vector<Parameter> MilHead::parameters() const {
  return {
      {instance_conv_.weight->name, instance_conv_.weight, true},
      {instance_conv_.bias->name, instance_conv_.bias, false},
      {w1_->name, w1_, true},
      {w2_->name, w2_, true},
      {b_->name, b_, false},
  };
}

void export_attention_map(const BagPrediction& pred, const std::string& prefix, int target_size) {
  if (!pred.attention) fail("export_attention_map: prediction has no attention weights");
  const auto& a = *pred.attention;
  const int h = pred.grid_h, w = pred.grid_w;

  const std::string csv_path = prefix + ".csv";
  std::ofstream csv(csv_path);
  if (!csv) fail("export_attention_map: cannot open " + csv_path);
  csv << "h,w,weight\n";
  char buf[64];
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", a[static_cast<size_t>(i) * w + j]);
      csv << i << "," << j << "," << buf << "\n";
    }
  csv.close();
  if (!csv) fail("export_attention_map: write failed for " + csv_path);

  double lo = a[0], hi = a[0];
  for (double v : a) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double range = hi - lo;
  const int scale = std::max(1, target_size / std::max(h, w));
  const int oh = h * scale, ow = w * scale;
  std::vector<unsigned char> pixels(static_cast<size_t>(oh) * ow);
  for (int i = 0; i < oh; ++i)
    for (int j = 0; j < ow; ++j) {
      const double v = a[static_cast<size_t>(i / scale) * w + j / scale];
      const double unit = range > 1e-300 ? (v - lo) / range : 0.5;
      pixels[static_cast<size_t>(i) * ow + j] =
          static_cast<unsigned char>(std::lround(unit * 255.0));
    }
  const std::string pgm_path = prefix + ".pgm";
  std::ofstream pgm(pgm_path, std::ios::binary);
  if (!pgm) fail("export_attention_map: cannot open " + pgm_path);
  pgm << "P5\n" << ow << " " << oh << "\n255\n";
  pgm.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!pgm) fail("export_attention_map: write failed for " + pgm_path);
}

}  // namespace midccnn
