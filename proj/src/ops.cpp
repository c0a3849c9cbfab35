#include "mtlnas/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "mtlnas/kernels.hpp"

namespace mtlnas {
namespace {

Tape& same_tape(const char* op, std::initializer_list<Var> vars) {
  Tape* tape = vars.begin()->tape;
  if (tape == nullptr) throw Error(std::string(op) + ": operand is not bound to a tape");
  for (const Var& v : vars) {
    if (v.tape != tape) throw Error(std::string(op) + ": operands live on different tapes");
  }
  return *tape;
}

[[noreturn]] void shape_fail(const char* op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_fail(op, "shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
}

void require_rank4(const char* op, const Tensor& t) {
  if (t.rank() != 4) shape_fail(op, "expected rank-4 [N,C,H,W], got " + to_string(t.shape()));
}

}  // namespace

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

BatchNormState BatchNormState::identity(std::size_t channels) {
  BatchNormState s;
  s.running_mean = Tensor(Shape{channels}, 0.0);
  s.running_var = Tensor(Shape{channels}, 1.0);
  return s;
}

Var add(Var a, Var b) {
  Tape& tape = same_tape("add", {a, b});
  require_same_shape("add", a.value(), b.value());
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return tape.record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    for (std::size_t in : {ia, ib}) {
      if (!t.requires_grad(in)) continue;
      Tensor& acc = t.grad_accumulator(in);
      for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) { return add(a, scale(b, -1.0)); }

Var mul(Var a, Var b) {
  Tape& tape = same_tape("mul", {a, b});
  require_same_shape("mul", a.value(), b.value());
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return tape.record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ia)) {
      Tensor& acc = t.grad_accumulator(ia);
      const Tensor& other = t.value(ib);
      for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i] * other[i];
    }
    if (t.requires_grad(ib)) {
      Tensor& acc = t.grad_accumulator(ib);
      const Tensor& other = t.value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i] * other[i];
    }
  });
}

Var scale(Var a, double factor) {
  Tape& tape = same_tape("scale", {a});
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= factor;
  const std::size_t ia = a.id;
  return tape.record(std::move(out), {ia}, [ia, factor](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& acc = t.grad_accumulator(ia);
    for (std::size_t i = 0; i < g.size(); ++i) acc[i] += factor * g[i];
  });
}

Var add_constant(Var a, const Tensor& offset) {
  Tape& tape = same_tape("add_constant", {a});
  require_same_shape("add_constant", a.value(), offset);
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += offset[i];
  const std::size_t ia = a.id;
  return tape.record(std::move(out), {ia}, [ia](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& acc = t.grad_accumulator(ia);
    for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
  });
}

Var sum(Var a) {
  Tape& tape = same_tape("sum", {a});
  double total = 0.0;
  for (double v : a.value().data()) total += v;
  const std::size_t ia = a.id;
  return tape.record(Tensor::scalar(total), {ia}, [ia](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    Tensor& acc = t.grad_accumulator(ia);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g;
  });
}

Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) shape_fail("mean", "empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var relu(Var a) {
  Tape& tape = same_tape("relu", {a});
  Tensor out = a.value();
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  const std::size_t ia = a.id;
  return tape.record(std::move(out), {ia}, [ia](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& x = t.value(ia);
    Tensor& acc = t.grad_accumulator(ia);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] > 0.0) acc[i] += g[i];
    }
  });
}

Var sigmoid(Var a) {
  Tape& tape = same_tape("sigmoid", {a});
  Tensor out = a.value();
  for (double& v : out.data()) v = stable_sigmoid(v);
  const std::size_t ia = a.id;
  return tape.record(std::move(out), {ia}, [ia](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& acc = t.grad_accumulator(ia);
    for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

Var conv2d(Var x, Var weight, Var bias, std::size_t stride) {
  Tape& tape = same_tape("conv2d", {x, weight, bias});
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  require_rank4("conv2d", xv);
  if (wv.rank() != 4 || wv.dim(2) != wv.dim(3) || wv.dim(2) % 2 == 0) {
    shape_fail("conv2d", "weight must be [Co,Ci,k,k] with odd k, got " + to_string(wv.shape()));
  }
  if (wv.dim(1) != xv.dim(1)) {
    shape_fail("conv2d", "input has " + std::to_string(xv.dim(1)) + " channels, weight expects " +
                             std::to_string(wv.dim(1)));
  }
  if (bias.value().shape() != Shape{wv.dim(0)}) {
    shape_fail("conv2d", "bias " + to_string(bias.value().shape()) + " does not match " +
                             std::to_string(wv.dim(0)) + " output channels");
  }
  if (stride == 0) shape_fail("conv2d", "stride must be positive");
  kernels::ConvGeometry g;
  g.batch = xv.dim(0);
  g.in_channels = xv.dim(1);
  g.in_height = xv.dim(2);
  g.in_width = xv.dim(3);
  g.out_channels = wv.dim(0);
  g.kernel = wv.dim(2);
  g.stride = stride;
  g.pad = g.kernel / 2;
  Tensor out(Shape{g.batch, g.out_channels, g.out_height(), g.out_width()});
  auto cols = std::make_shared<std::vector<double>>();
  kernels::conv2d_forward(g, xv.data(), wv.data(), bias.value().data(), out.data(), *cols);
  const std::size_t ix = x.id, iw = weight.id, ib = bias.id;
  return tape.record(std::move(out), {ix, iw, ib}, [g, cols, ix, iw, ib](Tape& t, std::size_t self) {
    const Tensor& gy = t.grad(self);
    std::span<double> dx, dw, db;
    if (t.requires_grad(ix)) dx = t.grad_accumulator(ix).data();
    if (t.requires_grad(iw)) dw = t.grad_accumulator(iw).data();
    if (t.requires_grad(ib)) db = t.grad_accumulator(ib).data();
    kernels::conv2d_backward(g, *cols, t.value(iw).data(), gy.data(), dx, dw, db);
  });
}

Var channel_mix(Var x, Var weight) {
  Tape& tape = same_tape("channel_mix", {x, weight});
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  require_rank4("channel_mix", xv);
  if (wv.rank() != 2 || wv.dim(1) != xv.dim(1)) {
    shape_fail("channel_mix", "weight " + to_string(wv.shape()) + " incompatible with input channels " +
                                  std::to_string(xv.dim(1)));
  }
  const std::size_t n = xv.dim(0), ci = xv.dim(1), co = wv.dim(0), pixels = xv.dim(2) * xv.dim(3);
  Tensor out(Shape{n, co, xv.dim(2), xv.dim(3)});
  kernels::channel_mix_forward(n, ci, co, pixels, xv.data(), wv.data(), out.data());
  const std::size_t ix = x.id, iw = weight.id;
  return tape.record(std::move(out), {ix, iw}, [n, ci, co, pixels, ix, iw](Tape& t, std::size_t self) {
    std::span<double> dx, dw;
    if (t.requires_grad(ix)) dx = t.grad_accumulator(ix).data();
    if (t.requires_grad(iw)) dw = t.grad_accumulator(iw).data();
    kernels::channel_mix_backward(n, ci, co, pixels, t.value(ix).data(), t.value(iw).data(), t.grad(self).data(),
                                  dx, dw);
  });
}

Var channel_affine(Var x, Var scale_v, Var shift) {
  Tape& tape = same_tape("channel_affine", {x, scale_v, shift});
  const Tensor& xv = x.value();
  require_rank4("channel_affine", xv);
  const std::size_t n = xv.dim(0), c = xv.dim(1), plane = xv.dim(2) * xv.dim(3);
  if (scale_v.value().shape() != Shape{c} || shift.value().shape() != Shape{c}) {
    shape_fail("channel_affine", "scale/shift must be [" + std::to_string(c) + "], got " +
                                     to_string(scale_v.value().shape()) + " and " + to_string(shift.value().shape()));
  }
  Tensor out(xv.shape());
  const Tensor& s = scale_v.value();
  const Tensor& b = shift.value();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (i * c + ch) * plane;
      for (std::size_t p = 0; p < plane; ++p) out[base + p] = s[ch] * xv[base + p] + b[ch];
    }
  }
  const std::size_t ix = x.id, is = scale_v.id, ib = shift.id;
  return tape.record(std::move(out), {ix, is, ib}, [n, c, plane, ix, is, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(ix);
    const Tensor& s = t.value(is);
    const bool gx = t.requires_grad(ix), gs = t.requires_grad(is), gb = t.requires_grad(ib);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t base = (i * c + ch) * plane;
        double ds = 0.0, db = 0.0;
        for (std::size_t p = 0; p < plane; ++p) {
          ds += g[base + p] * xv[base + p];
          db += g[base + p];
        }
        if (gs) t.grad_accumulator(is)[ch] += ds;
        if (gb) t.grad_accumulator(ib)[ch] += db;
        if (gx) {
          Tensor& acc = t.grad_accumulator(ix);
          for (std::size_t p = 0; p < plane; ++p) acc[base + p] += s[ch] * g[base + p];
        }
      }
    }
  });
}

Var batch_norm(Var x, Var gamma, Var beta, BatchNormState& state, bool training) {
  Tape& tape = same_tape("batch_norm", {x, gamma, beta});
  const Tensor& xv = x.value();
  require_rank4("batch_norm", xv);
  const std::size_t n = xv.dim(0), c = xv.dim(1), plane = xv.dim(2) * xv.dim(3);
  if (gamma.value().shape() != Shape{c} || beta.value().shape() != Shape{c} ||
      state.running_mean.shape() != Shape{c} || state.running_var.shape() != Shape{c}) {
    shape_fail("batch_norm", "per-channel parameters must be [" + std::to_string(c) + "]");
  }
  const double count = static_cast<double>(n * plane);
  if (training && n * plane < 2) shape_fail("batch_norm", "training mode needs at least two values per channel");
  auto inv_std = std::make_shared<std::vector<double>>(c);
  auto normed = std::make_shared<Tensor>(xv.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mu, var;
    if (training) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < plane; ++p) acc += xv[(i * c + ch) * plane + p];
      mu = acc / count;
      double sq = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < plane; ++p) {
          const double d = xv[(i * c + ch) * plane + p] - mu;
          sq += d * d;
        }
      var = sq / count;
      state.running_mean[ch] = (1.0 - state.momentum) * state.running_mean[ch] + state.momentum * mu;
      state.running_var[ch] =
          (1.0 - state.momentum) * state.running_var[ch] + state.momentum * var * count / (count - 1.0);
    } else {
      mu = state.running_mean[ch];
      var = state.running_var[ch];
    }
    (*inv_std)[ch] = 1.0 / std::sqrt(var + state.eps);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t k = (i * c + ch) * plane + p;
        (*normed)[k] = (xv[k] - mu) * (*inv_std)[ch];
      }
  }
  Tensor out(xv.shape());
  const Tensor& gm = gamma.value();
  const Tensor& bt = beta.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t k = (i * c + ch) * plane + p;
        out[k] = gm[ch] * (*normed)[k] + bt[ch];
      }
  const std::size_t ix = x.id, ig = gamma.id, ib = beta.id;
  return tape.record(std::move(out), {ix, ig, ib},
                     [n, c, plane, count, training, inv_std, normed, ix, ig, ib](Tape& t, std::size_t self) {
                       const Tensor& g = t.grad(self);
                       const Tensor& gm = t.value(ig);
                       for (std::size_t ch = 0; ch < c; ++ch) {
                         double sum_g = 0.0, sum_gx = 0.0;
                         for (std::size_t i = 0; i < n; ++i)
                           for (std::size_t p = 0; p < plane; ++p) {
                             const std::size_t k = (i * c + ch) * plane + p;
                             sum_g += g[k];
                             sum_gx += g[k] * (*normed)[k];
                           }
                         if (t.requires_grad(ig)) t.grad_accumulator(ig)[ch] += sum_gx;
                         if (t.requires_grad(ib)) t.grad_accumulator(ib)[ch] += sum_g;
                         if (!t.requires_grad(ix)) continue;
                         Tensor& acc = t.grad_accumulator(ix);
                         const double factor = gm[ch] * (*inv_std)[ch];
                         for (std::size_t i = 0; i < n; ++i)
                           for (std::size_t p = 0; p < plane; ++p) {
                             const std::size_t k = (i * c + ch) * plane + p;
                             acc[k] += training ? factor * (g[k] - sum_g / count - (*normed)[k] * sum_gx / count)
                                                : factor * g[k];
                           }
                       }
                     });
}

Var concat_channels(std::span<const Var> parts) {
  if (parts.empty()) shape_fail("concat_channels", "no inputs");
  Tape& tape = same_tape("concat_channels", {parts[0]});
  const Tensor& first = parts[0].value();
  require_rank4("concat_channels", first);
  std::vector<std::size_t> ids, channels;
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.tape != &tape) throw Error("concat_channels: operands live on different tapes");
    const Tensor& v = p.value();
    require_rank4("concat_channels", v);
    if (v.dim(0) != first.dim(0) || v.dim(2) != first.dim(2) || v.dim(3) != first.dim(3)) {
      shape_fail("concat_channels",
                 "operand " + to_string(v.shape()) + " differs from " + to_string(first.shape()) + " outside axis 1");
    }
    ids.push_back(p.id);
    channels.push_back(v.dim(1));
    total += v.dim(1);
  }
  const std::size_t n = first.dim(0), plane = first.dim(2) * first.dim(3);
  Tensor out(Shape{n, total, first.dim(2), first.dim(3)});
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const Tensor& v = parts[k].value();
      const double* src = v.data().data() + i * channels[k] * plane;
      std::copy(src, src + channels[k] * plane, out.data().data() + (i * total + offset) * plane);
      offset += channels[k];
    }
  }
  return tape.record(std::move(out), ids, [ids, channels, n, total, plane](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (t.requires_grad(ids[k])) {
        Tensor& acc = t.grad_accumulator(ids[k]);
        for (std::size_t i = 0; i < n; ++i) {
          const double* src = g.data().data() + (i * total + offset) * plane;
          double* dst = acc.data().data() + i * channels[k] * plane;
          for (std::size_t j = 0; j < channels[k] * plane; ++j) dst[j] += src[j];
        }
      }
      offset += channels[k];
    }
  });
}

namespace {

struct Taps {
  std::vector<std::size_t> lo, hi;
  std::vector<double> frac;
};

Taps resize_taps(std::size_t src, std::size_t dst) {
  Taps taps;
  const double ratio = static_cast<double>(src) / static_cast<double>(dst);
  for (std::size_t d = 0; d < dst; ++d) {
    double s = (static_cast<double>(d) + 0.5) * ratio - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(src - 1));
    const auto lo = static_cast<std::size_t>(std::floor(s));
    taps.lo.push_back(lo);
    taps.hi.push_back(std::min(lo + 1, src - 1));
    taps.frac.push_back(s - static_cast<double>(lo));
  }
  return taps;
}

}  // namespace

Var bilinear_resize(Var x, std::size_t height, std::size_t width) {
  Tape& tape = same_tape("bilinear_resize", {x});
  const Tensor& xv = x.value();
  require_rank4("bilinear_resize", xv);
  if (height == 0 || width == 0) shape_fail("bilinear_resize", "target size must be positive");
  const std::size_t nc = xv.dim(0) * xv.dim(1), sh = xv.dim(2), sw = xv.dim(3);
  const auto ty = std::make_shared<Taps>(resize_taps(sh, height));
  const auto tx = std::make_shared<Taps>(resize_taps(sw, width));
  Tensor out(Shape{xv.dim(0), xv.dim(1), height, width});
  for (std::size_t c = 0; c < nc; ++c) {
    const double* src = xv.data().data() + c * sh * sw;
    double* dst = out.data().data() + c * height * width;
    for (std::size_t oy = 0; oy < height; ++oy) {
      const double* r0 = src + ty->lo[oy] * sw;
      const double* r1 = src + ty->hi[oy] * sw;
      const double fy = ty->frac[oy];
      for (std::size_t ox = 0; ox < width; ++ox) {
        const std::size_t a = tx->lo[ox], b = tx->hi[ox];
        const double fx = tx->frac[ox];
        const double top = r0[a] + fx * (r0[b] - r0[a]);
        const double bottom = r1[a] + fx * (r1[b] - r1[a]);
        dst[oy * width + ox] = top + fy * (bottom - top);
      }
    }
  }
  const std::size_t ix = x.id;
  return tape.record(std::move(out), {ix}, [ix, nc, sh, sw, height, width, ty, tx](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& acc = t.grad_accumulator(ix);
    for (std::size_t c = 0; c < nc; ++c) {
      const double* src = g.data().data() + c * height * width;
      double* dst = acc.data().data() + c * sh * sw;
      for (std::size_t oy = 0; oy < height; ++oy) {
        double* r0 = dst + ty->lo[oy] * sw;
        double* r1 = dst + ty->hi[oy] * sw;
        const double fy = ty->frac[oy];
        for (std::size_t ox = 0; ox < width; ++ox) {
          const std::size_t a = tx->lo[ox], b = tx->hi[ox];
          const double fx = tx->frac[ox];
          const double v = src[oy * width + ox];
          const double top = v * (1.0 - fy), bottom = v * fy;
          r0[a] += top * (1.0 - fx);
          r0[b] += top * fx;
          r1[a] += bottom * (1.0 - fx);
          r1[b] += bottom * fx;
        }
      }
    }
  });
}

Var scale_by_element(Var x, Var multipliers, std::size_t index) {
  Tape& tape = same_tape("scale_by_element", {x, multipliers});
  if (index >= multipliers.value().size()) {
    shape_fail("scale_by_element", "index " + std::to_string(index) + " outside multipliers " +
                                       to_string(multipliers.value().shape()));
  }
  const double m = multipliers.value()[index];
  Tensor out = x.value();
  for (double& v : out.data()) v *= m;
  const std::size_t ix = x.id, im = multipliers.id;
  return tape.record(std::move(out), {ix, im}, [ix, im, index](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ix)) {
      const double m = t.value(im)[index];
      Tensor& acc = t.grad_accumulator(ix);
      for (std::size_t i = 0; i < g.size(); ++i) acc[i] += m * g[i];
    }
    if (t.requires_grad(im)) {
      const Tensor& xv = t.value(ix);
      double dm = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) dm += g[i] * xv[i];
      t.grad_accumulator(im)[index] += dm;
    }
  });
}

Var softmax_cross_entropy(Var logits, std::span<const int> labels) {
  Tape& tape = same_tape("softmax_cross_entropy", {logits});
  const Tensor& lv = logits.value();
  require_rank4("softmax_cross_entropy", lv);
  const std::size_t n = lv.dim(0), k = lv.dim(1), plane = lv.dim(2) * lv.dim(3);
  if (labels.size() != n * plane) {
    shape_fail("softmax_cross_entropy", "expected " + std::to_string(n * plane) + " labels, got " +
                                            std::to_string(labels.size()));
  }
  auto probs = std::make_shared<Tensor>(lv.shape());
  auto label_copy = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < plane; ++p) {
      const int label = labels[i * plane + p];
      if (label < 0 || static_cast<std::size_t>(label) >= k) {
        shape_fail("softmax_cross_entropy", "label " + std::to_string(label) + " outside [0," + std::to_string(k) + ")");
      }
      double mx = -INFINITY;
      for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, lv[(i * k + c) * plane + p]);
      double z = 0.0;
      for (std::size_t c = 0; c < k; ++c) z += std::exp(lv[(i * k + c) * plane + p] - mx);
      for (std::size_t c = 0; c < k; ++c) {
        (*probs)[(i * k + c) * plane + p] = std::exp(lv[(i * k + c) * plane + p] - mx) / z;
      }
      total += mx + std::log(z) - lv[(i * k + static_cast<std::size_t>(label)) * plane + p];
    }
  }
  const double count = static_cast<double>(n * plane);
  const std::size_t il = logits.id;
  return tape.record(Tensor::scalar(total / count), {il},
                     [il, probs, label_copy, n, k, plane, count](Tape& t, std::size_t self) {
                       const double g = t.grad(self)[0] / count;
                       Tensor& acc = t.grad_accumulator(il);
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t p = 0; p < plane; ++p) {
                           const auto label = static_cast<std::size_t>((*label_copy)[i * plane + p]);
                           for (std::size_t c = 0; c < k; ++c) {
                             const std::size_t idx = (i * k + c) * plane + p;
                             acc[idx] += g * ((*probs)[idx] - (c == label ? 1.0 : 0.0));
                           }
                         }
                     });
}

namespace {
constexpr double kNormEps = 1e-12;
}

Var cosine_loss(Var pred, Var target) {
  Tape& tape = same_tape("cosine_loss", {pred, target});
  const Tensor& pv = pred.value();
  const Tensor& tv = target.value();
  require_rank4("cosine_loss", pv);
  require_same_shape("cosine_loss", pv, tv);
  const std::size_t n = pv.dim(0), c = pv.dim(1), plane = pv.dim(2) * pv.dim(3);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < plane; ++p) {
      double pp = 0.0, tt = 0.0, pt = 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double a = pv[(i * c + ch) * plane + p], b = tv[(i * c + ch) * plane + p];
        pp += a * a;
        tt += b * b;
        pt += a * b;
      }
      total += 1.0 - pt / (std::sqrt(pp + kNormEps) * std::sqrt(tt + kNormEps));
    }
  }
  const double count = static_cast<double>(n * plane);
  const std::size_t ip = pred.id, it = target.id;
  return tape.record(Tensor::scalar(total / count), {ip, it}, [ip, it, n, c, plane, count](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0] / count;
    const Tensor& pv = t.value(ip);
    const Tensor& tv = t.value(it);
    const bool gp = t.requires_grad(ip), gt = t.requires_grad(it);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t p = 0; p < plane; ++p) {
        double pp = 0.0, tt = 0.0, pt = 0.0;
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double a = pv[(i * c + ch) * plane + p], b = tv[(i * c + ch) * plane + p];
          pp += a * a;
          tt += b * b;
          pt += a * b;
        }
        const double np = std::sqrt(pp + kNormEps), nt = std::sqrt(tt + kNormEps);
        for (std::size_t ch = 0; ch < c; ++ch) {
          const std::size_t idx = (i * c + ch) * plane + p;
          // d(1 - cos)/dp = -(t / (|p||t|) - cos * p / |p|^2)
          if (gp) t.grad_accumulator(ip)[idx] -= g * (tv[idx] / (np * nt) - pt * pv[idx] / (np * np * np * nt));
          if (gt) t.grad_accumulator(it)[idx] -= g * (pv[idx] / (np * nt) - pt * tv[idx] / (np * nt * nt * nt));
        }
      }
    }
  });
}

Var squared_error(Var pred, Var target) {
  Var diff = sub(pred, target);
  return mean(mul(diff, diff));
}

Var entropy_of_logits(Var logits) {
  Tape& tape = same_tape("entropy_of_logits", {logits});
  const Tensor& lv = logits.value();
  double total = 0.0;
  for (double l : lv.data()) {
    // H(sigmoid(l)) = softplus(l) - l * sigmoid(l)
    total += softplus(l) - l * stable_sigmoid(l);
  }
  const std::size_t il = logits.id;
  return tape.record(Tensor::scalar(total), {il}, [il](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    const Tensor& lv = t.value(il);
    Tensor& acc = t.grad_accumulator(il);
    for (std::size_t i = 0; i < lv.size(); ++i) {
      const double s = stable_sigmoid(lv[i]);
      acc[i] += g * (-lv[i] * s * (1.0 - s));
    }
  });
}

}  // namespace mtlnas
