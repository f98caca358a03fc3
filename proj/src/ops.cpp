#include "fundus/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "fundus/thread_pool.hpp"
#include "kernels.hpp"

namespace fundus {
namespace ops {

namespace {

bool tracing(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::current()) return false;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

void record(const char* name, Tensor& out, std::function<void()> fn) {
  out.set_requires_grad(true);
  Tape::current()->record(name, std::move(fn));
}

bool is_suffix(const Shape& full, const Shape& tail) {
  if (tail.size() > full.size()) return false;
  return std::equal(tail.rbegin(), tail.rend(), full.rbegin());
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

float sigmoid_scalar(float x) {
  if (x >= 0.f) {
    return 1.f / (1.f + std::exp(-x));
  }
  float e = std::exp(x);
  return e / (1.f + e);
}

}  // namespace

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  const std::int64_t an = a.numel();
  const std::int64_t bn = b.numel();
  Tensor out = Tensor::zeros(a.shape());
  const float* pa = a.data();
  const float* pb = b.data();
  float* po = out.data();
  if (a.shape() == b.shape()) {
    for (std::int64_t i = 0; i < an; ++i) po[i] = pa[i] + pb[i];
  } else if (is_suffix(a.shape(), b.shape())) {
    for (std::int64_t i = 0; i < an; ++i) po[i] = pa[i] + pb[i % bn];
  } else {
    throw ShapeError("add: cannot broadcast " + shape_str(b.shape()) + " onto " +
                     shape_str(a.shape()));
  }
  if (tracing({&a, &b})) {
    record("add", out, [a, b, out]() mutable {
      if (!out.has_grad()) return;
      const float* g = out.grad_data();
      const std::int64_t n = out.numel();
      if (a.requires_grad()) {
        float* da = a.grad();
        for (std::int64_t i = 0; i < n; ++i) da[i] += g[i];
      }
      if (b.requires_grad()) {
        float* db = b.grad();
        const std::int64_t bn2 = b.numel();
        for (std::int64_t i = 0; i < n; ++i) db[i % bn2] += g[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const std::int64_t an = a.numel();
  const std::int64_t bn = b.numel();
  Tensor out = Tensor::zeros(a.shape());
  const float* pa = a.data();
  const float* pb = b.data();
  float* po = out.data();
  if (a.shape() == b.shape()) {
    for (std::int64_t i = 0; i < an; ++i) po[i] = pa[i] - pb[i];
  } else if (is_suffix(a.shape(), b.shape())) {
    for (std::int64_t i = 0; i < an; ++i) po[i] = pa[i] - pb[i % bn];
  } else {
    throw ShapeError("sub: cannot broadcast " + shape_str(b.shape()) + " onto " +
                     shape_str(a.shape()));
  }
  if (tracing({&a, &b})) {
    record("sub", out, [a, b, out]() mutable {
      if (!out.has_grad()) return;
      const float* g = out.grad_data();
      const std::int64_t n = out.numel();
      if (a.requires_grad()) {
        float* da = a.grad();
        for (std::int64_t i = 0; i < n; ++i) da[i] += g[i];
      }
      if (b.requires_grad()) {
        float* db = b.grad();
        const std::int64_t bn2 = b.numel();
        for (std::int64_t i = 0; i < n; ++i) db[i % bn2] -= g[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const std::int64_t an = a.numel();
  const std::int64_t bn = b.numel();
  Tensor out = Tensor::zeros(a.shape());
  const float* pa = a.data();
  const float* pb = b.data();
  float* po = out.data();
  if (a.shape() == b.shape()) {
    for (std::int64_t i = 0; i < an; ++i) po[i] = pa[i] * pb[i];
  } else if (is_suffix(a.shape(), b.shape())) {
    for (std::int64_t i = 0; i < an; ++i) po[i] = pa[i] * pb[i % bn];
  } else {
    throw ShapeError("mul: cannot broadcast " + shape_str(b.shape()) + " onto " +
                     shape_str(a.shape()));
  }
  if (tracing({&a, &b})) {
    record("mul", out, [a, b, out]() mutable {
      if (!out.has_grad()) return;
      const float* g = out.grad_data();
      const float* pa2 = a.data();
      const float* pb2 = b.data();
      const std::int64_t n = out.numel();
      const std::int64_t bn2 = b.numel();
      if (a.requires_grad()) {
        float* da = a.grad();
        for (std::int64_t i = 0; i < n; ++i) da[i] += g[i] * pb2[i % bn2];
      }
      if (b.requires_grad()) {
        float* db = b.grad();
        for (std::int64_t i = 0; i < n; ++i) db[i % bn2] += g[i] * pa2[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, float s) {
  Tensor out = Tensor::zeros(a.shape());
  const float* pa = a.data();
  float* po = out.data();
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] * s;
  if (tracing({&a})) {
    record("scale", out, [a, out, s]() mutable {
      if (!out.has_grad() || !a.requires_grad()) return;
      const float* g = out.grad_data();
      float* da = a.grad();
      const std::int64_t n2 = a.numel();
      for (std::int64_t i = 0; i < n2; ++i) da[i] += g[i] * s;
    });
  }
  return out;
}

// ---------------------------------------------------------------- activations

Tensor relu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const float* px = x.data();
  float* po = out.data();
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = px[i] > 0.f ? px[i] : 0.f;
  if (tracing({&x})) {
    record("relu", out, [x, out]() mutable {
      if (!out.has_grad() || !x.requires_grad()) return;
      const float* g = out.grad_data();
      const float* px2 = x.data();
      float* dx = x.grad();
      const std::int64_t n2 = x.numel();
      for (std::int64_t i = 0; i < n2; ++i) {
        if (px2[i] > 0.f) dx[i] += g[i];
      }
    });
  }
  return out;
}

Tensor silu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const float* px = x.data();
  float* po = out.data();
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    po[i] = px[i] * sigmoid_scalar(px[i]);
  }
  if (tracing({&x})) {
    record("silu", out, [x, out]() mutable {
      if (!out.has_grad() || !x.requires_grad()) return;
      const float* g = out.grad_data();
      const float* px2 = x.data();
      float* dx = x.grad();
      const std::int64_t n2 = x.numel();
      for (std::int64_t i = 0; i < n2; ++i) {
        const float s = sigmoid_scalar(px2[i]);
        dx[i] += g[i] * s * (1.f + px2[i] * (1.f - s));
      }
    });
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  // tanh approximation
  constexpr float kC = 0.7978845608028654f;  // sqrt(2/pi)
  constexpr float kA = 0.044715f;
  Tensor out = Tensor::zeros(x.shape());
  const float* px = x.data();
  float* po = out.data();
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    const float v = px[i];
    const float t = std::tanh(kC * (v + kA * v * v * v));
    po[i] = 0.5f * v * (1.f + t);
  }
  if (tracing({&x})) {
    record("gelu", out, [x, out]() mutable {
      if (!out.has_grad() || !x.requires_grad()) return;
      const float* g = out.grad_data();
      const float* px2 = x.data();
      float* dx = x.grad();
      const std::int64_t n2 = x.numel();
      for (std::int64_t i = 0; i < n2; ++i) {
        const float v = px2[i];
        const float u = kC * (v + kA * v * v * v);
        const float t = std::tanh(u);
        const float du = kC * (1.f + 3.f * kA * v * v);
        dx[i] += g[i] * (0.5f * (1.f + t) + 0.5f * v * (1.f - t * t) * du);
      }
    });
  }
  return out;
}

Tensor sigmoid(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const float* px = x.data();
  float* po = out.data();
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = sigmoid_scalar(px[i]);
  if (tracing({&x})) {
    record("sigmoid", out, [x, out]() mutable {
      if (!out.has_grad() || !x.requires_grad()) return;
      const float* g = out.grad_data();
      const float* py = out.data();
      float* dx = x.grad();
      const std::int64_t n2 = x.numel();
      for (std::int64_t i = 0; i < n2; ++i) dx[i] += g[i] * py[i] * (1.f - py[i]);
    });
  }
  return out;
}

// ---------------------------------------------------------------- normalization

Tensor softmax(const Tensor& x, int axis) {
  const int nd = x.ndim();
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) {
    throw ShapeError("softmax: axis out of range for " + shape_str(x.shape()));
  }
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  const std::int64_t len = x.dim(axis);
  for (int i = axis + 1; i < nd; ++i) inner *= x.dim(i);

  Tensor out = Tensor::zeros(x.shape());
  const float* px = x.data();
  float* po = out.data();
  parallel_for(outer, 8, [&](std::int64_t o0, std::int64_t o1) {
    for (std::int64_t o = o0; o < o1; ++o) {
      for (std::int64_t in = 0; in < inner; ++in) {
        const float* sx = px + (o * len) * inner + in;
        float* so = po + (o * len) * inner + in;
        float m = sx[0];
        for (std::int64_t l = 1; l < len; ++l) m = std::max(m, sx[l * inner]);
        double sum = 0.0;
        for (std::int64_t l = 0; l < len; ++l) {
          const float e = std::exp(sx[l * inner] - m);
          so[l * inner] = e;
          sum += e;
        }
        const float invs = static_cast<float>(1.0 / sum);
        for (std::int64_t l = 0; l < len; ++l) so[l * inner] *= invs;
      }
    }
  });
  if (tracing({&x})) {
    record("softmax", out, [x, out, outer, len, inner]() mutable {
      if (!out.has_grad() || !x.requires_grad()) return;
      const float* g = out.grad_data();
      const float* py = out.data();
      float* dx = x.grad();
      for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
          const std::int64_t base = (o * len) * inner + in;
          double dot = 0.0;
          for (std::int64_t l = 0; l < len; ++l) {
            dot += static_cast<double>(g[base + l * inner]) * py[base + l * inner];
          }
          const float dotf = static_cast<float>(dot);
          for (std::int64_t l = 0; l < len; ++l) {
            const std::int64_t idx = base + l * inner;
            dx[idx] += py[idx] * (g[idx] - dotf);
          }
        }
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
  const int nd = x.ndim();
  if (nd < 1) throw ShapeError("layer_norm: rank-0 input");
  const std::int64_t d = x.dim(nd - 1);
  if (gain.numel() != d || bias.numel() != d) {
    throw ShapeError("layer_norm: gain/bias must match last axis (" + std::to_string(d) + ")");
  }
  const std::int64_t rows = x.numel() / d;
  Tensor out = Tensor::zeros(x.shape());
  auto mean = std::make_shared<std::vector<float>>(static_cast<std::size_t>(rows));
  auto inv = std::make_shared<std::vector<float>>(static_cast<std::size_t>(rows));
  const float* px = x.data();
  const float* pg = gain.data();
  const float* pb = bias.data();
  float* po = out.data();
  parallel_for(rows, 16, [&](std::int64_t r0, std::int64_t r1) {
    for (std::int64_t r = r0; r < r1; ++r) {
      const float* row = px + r * d;
      double s = 0.0;
      for (std::int64_t j = 0; j < d; ++j) s += row[j];
      const double mu = s / static_cast<double>(d);
      double v = 0.0;
      for (std::int64_t j = 0; j < d; ++j) {
        const double c = row[j] - mu;
        v += c * c;
      }
      const double varv = v / static_cast<double>(d);
      const float iv = static_cast<float>(1.0 / std::sqrt(varv + eps));
      (*mean)[static_cast<std::size_t>(r)] = static_cast<float>(mu);
      (*inv)[static_cast<std::size_t>(r)] = iv;
      float* orow = po + r * d;
      const float muf = static_cast<float>(mu);
      for (std::int64_t j = 0; j < d; ++j) {
        orow[j] = (row[j] - muf) * iv * pg[j] + pb[j];
      }
    }
  });
  if (tracing({&x, &gain, &bias})) {
    record("layer_norm", out, [x, gain, bias, out, mean, inv, rows, d]() mutable {
      if (!out.has_grad()) return;
      const float* g = out.grad_data();
      const float* px2 = x.data();
      const float* pg2 = gain.data();
      float* dx = x.requires_grad() ? x.grad() : nullptr;
      float* dg = gain.requires_grad() ? gain.grad() : nullptr;
      float* db = bias.requires_grad() ? bias.grad() : nullptr;
      for (std::int64_t r = 0; r < rows; ++r) {
        const float* row = px2 + r * d;
        const float* grow = g + r * d;
        const float mu = (*mean)[static_cast<std::size_t>(r)];
        const float iv = (*inv)[static_cast<std::size_t>(r)];
        double s1 = 0.0, s2 = 0.0;
        for (std::int64_t j = 0; j < d; ++j) {
          const float xh = (row[j] - mu) * iv;
          const float dxh = grow[j] * pg2[j];
          s1 += dxh;
          s2 += static_cast<double>(dxh) * xh;
          if (dg) dg[j] += grow[j] * xh;
          if (db) db[j] += grow[j];
        }
        if (dx) {
          const float m1 = static_cast<float>(s1 / static_cast<double>(d));
          const float m2 = static_cast<float>(s2 / static_cast<double>(d));
          float* dxrow = dx + r * d;
          for (std::int64_t j = 0; j < d; ++j) {
            const float xh = (row[j] - mu) * iv;
            const float dxh = grow[j] * pg2[j];
            dxrow[j] += iv * (dxh - m1 - xh * m2);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- matmul family

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({static_cast<int>(m), static_cast<int>(n)});
  kern::matmul(a.data(), b.data(), out.data(), m, k, n, false);
  if (tracing({&a, &b})) {
    record("matmul", out, [a, b, out, m, k, n]() mutable {
      if (!out.has_grad()) return;
      const float* g = out.grad_data();
      if (a.requires_grad()) kern::matmul_tb(g, b.data(), a.grad(), m, n, k, true);
      if (b.requires_grad()) kern::matmul_ta(a.data(), g, b.grad(), k, m, n, true);
    });
  }
  return out;
}

namespace {

// shared validation for batched matmuls; returns batch count
std::int64_t batch_dims(const Tensor& a, const Tensor& b, const char* op) {
  if (a.ndim() < 2 || b.ndim() != a.ndim()) {
    throw ShapeError(std::string(op) + ": rank mismatch " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  std::int64_t batch = 1;
  for (int i = 0; i + 2 < a.ndim(); ++i) {
    if (a.dim(i) != b.dim(i)) {
      throw ShapeError(std::string(op) + ": batch dims differ " + shape_str(a.shape()) + " x " +
                       shape_str(b.shape()));
    }
    batch *= a.dim(i);
  }
  return batch;
}

}  // namespace

Tensor bmm(const Tensor& a, const Tensor& b) {
  const std::int64_t batch = batch_dims(a, b, "bmm");
  const int nd = a.ndim();
  const std::int64_t m = a.dim(nd - 2), k = a.dim(nd - 1), n = b.dim(nd - 1);
  if (b.dim(nd - 2) != k) {
    throw ShapeError("bmm: inner dims differ " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  Shape os(a.shape());
  os[static_cast<std::size_t>(nd - 1)] = static_cast<int>(n);
  Tensor out = Tensor::zeros(os);
  const float* pa = a.data();
  const float* pb = b.data();
  float* po = out.data();
  parallel_for(batch, 1, [&](std::int64_t s0, std::int64_t s1) {
    for (std::int64_t s = s0; s < s1; ++s) {
      kern::matmul(pa + s * m * k, pb + s * k * n, po + s * m * n, m, k, n, false);
    }
  });
  if (tracing({&a, &b})) {
    record("bmm", out, [a, b, out, batch, m, k, n]() mutable {
      if (!out.has_grad()) return;
      const float* g = out.grad_data();
      for (std::int64_t s = 0; s < batch; ++s) {
        if (a.requires_grad()) {
          kern::matmul_tb(g + s * m * n, b.data() + s * k * n, a.grad() + s * m * k, m, n, k, true);
        }
        if (b.requires_grad()) {
          kern::matmul_ta(a.data() + s * m * k, g + s * m * n, b.grad() + s * k * n, k, m, n, true);
        }
      }
    });
  }
  return out;
}

Tensor bmm_nt(const Tensor& a, const Tensor& b) {
  const std::int64_t batch = batch_dims(a, b, "bmm_nt");
  const int nd = a.ndim();
  const std::int64_t m = a.dim(nd - 2), k = a.dim(nd - 1), n = b.dim(nd - 2);
  if (b.dim(nd - 1) != k) {
    throw ShapeError("bmm_nt: inner dims differ " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  Shape os(a.shape());
  os[static_cast<std::size_t>(nd - 1)] = static_cast<int>(n);
  Tensor out = Tensor::zeros(os);
  const float* pa = a.data();
  const float* pb = b.data();
  float* po = out.data();
  parallel_for(batch, 1, [&](std::int64_t s0, std::int64_t s1) {
    for (std::int64_t s = s0; s < s1; ++s) {
      kern::matmul_tb(pa + s * m * k, pb + s * n * k, po + s * m * n, m, k, n, false);
    }
  });
  if (tracing({&a, &b})) {
    record("bmm_nt", out, [a, b, out, batch, m, k, n]() mutable {
      if (!out.has_grad()) return;
      const float* g = out.grad_data();
      for (std::int64_t s = 0; s < batch; ++s) {
        if (a.requires_grad()) {
          kern::matmul(g + s * m * n, b.data() + s * n * k, a.grad() + s * m * k, m, n, k, true);
        }
        if (b.requires_grad()) {
          kern::matmul_ta(g + s * m * n, a.data() + s * m * k, b.grad() + s * n * k, n, m, k, true);
        }
      }
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.ndim() != 2) throw ShapeError("linear: weight must be 2-D [out,in]");
  const std::int64_t in = weight.dim(1), outf = weight.dim(0);
  if (x.dim(x.ndim() - 1) != in) {
    throw ShapeError("linear: input last dim " + std::to_string(x.dim(x.ndim() - 1)) +
                     " != weight in dim " + std::to_string(in));
  }
  if (bias.defined() && bias.numel() != outf) throw ShapeError("linear: bias size mismatch");
  const std::int64_t rows = x.numel() / in;
  Shape os(x.shape());
  os.back() = static_cast<int>(outf);
  Tensor out = Tensor::zeros(os);
  kern::matmul_tb(x.data(), weight.data(), out.data(), rows, in, outf, false);
  if (bias.defined()) {
    float* po = out.data();
    const float* pb = bias.data();
    for (std::int64_t r = 0; r < rows; ++r) {
      float* row = po + r * outf;
      for (std::int64_t j = 0; j < outf; ++j) row[j] += pb[j];
    }
  }
  if (tracing({&x, &weight, &bias})) {
    record("linear", out, [x, weight, bias, out, rows, in, outf]() mutable {
      if (!out.has_grad()) return;
      const float* g = out.grad_data();
      if (x.requires_grad()) kern::matmul(g, weight.data(), x.grad(), rows, outf, in, true);
      if (weight.requires_grad()) kern::matmul_ta(g, x.data(), weight.grad(), outf, rows, in, true);
      if (bias.defined() && bias.requires_grad()) {
        float* db = bias.grad();
        for (std::int64_t r = 0; r < rows; ++r) {
          const float* row = g + r * outf;
          for (std::int64_t j = 0; j < outf; ++j) db[j] += row[j];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- convolution

namespace {

struct ConvDims {
  int n, c, h, w, o, cg, og, kh, kw, ho, wo;
};

ConvDims conv_check(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int padding,
                    int groups) {
  if (x.ndim() != 4 || w.ndim() != 4) throw ShapeError("conv2d: input and kernel must be 4-D");
  if (stride < 1) throw ConfigError("conv2d: stride must be positive");
  if (padding < 0) throw ConfigError("conv2d: padding must be non-negative");
  if (groups < 1) throw ConfigError("conv2d: groups must be positive");
  ConvDims d{};
  d.n = x.dim(0);
  d.c = x.dim(1);
  d.h = x.dim(2);
  d.w = x.dim(3);
  d.o = w.dim(0);
  d.kh = w.dim(2);
  d.kw = w.dim(3);
  if (d.c % groups != 0 || d.o % groups != 0) {
    throw ShapeError("conv2d: channels not divisible by groups");
  }
  d.cg = d.c / groups;
  d.og = d.o / groups;
  if (w.dim(1) != d.cg) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(w.dim(1)) +
                     " input channels per group, got " + std::to_string(d.cg));
  }
  // floor-division output size; anything below one output position is a
  // configuration error
  const int eh = d.h + 2 * padding - d.kh;
  const int ew = d.w + 2 * padding - d.kw;
  if (eh < 0 || ew < 0) {
    throw ConfigError("conv2d: output size is not a positive integer for input " +
                      shape_str(x.shape()) + ", kernel " + shape_str(w.shape()) + ", stride " +
                      std::to_string(stride) + ", padding " + std::to_string(padding));
  }
  d.ho = eh / stride + 1;
  d.wo = ew / stride + 1;
  if (bias.defined() && bias.numel() != d.o) throw ShapeError("conv2d: bias size mismatch");
  return d;
}

void conv_forward_direct(const float* x, const float* w, const float* bias, float* y,
                         const ConvDims& d, int stride, int padding) {
  const std::int64_t in_plane = static_cast<std::int64_t>(d.h) * d.w;
  const std::int64_t out_plane = static_cast<std::int64_t>(d.ho) * d.wo;
  parallel_for(static_cast<std::int64_t>(d.n) * d.o, 1, [&](std::int64_t b0, std::int64_t b1) {
    for (std::int64_t no = b0; no < b1; ++no) {
      const int n = static_cast<int>(no / d.o);
      const int o = static_cast<int>(no % d.o);
      const int g = o / d.og;
      const float* wslice = w + static_cast<std::int64_t>(o) * d.cg * d.kh * d.kw;
      float* ydst = y + no * out_plane;
      const float b = bias ? bias[o] : 0.f;
      for (int oi = 0; oi < d.ho; ++oi) {
        for (int oj = 0; oj < d.wo; ++oj) {
          float acc = b;
          for (int ci = 0; ci < d.cg; ++ci) {
            const float* xsl =
                x + (static_cast<std::int64_t>(n) * d.c + g * d.cg + ci) * in_plane;
            const float* wk = wslice + static_cast<std::int64_t>(ci) * d.kh * d.kw;
            for (int ki = 0; ki < d.kh; ++ki) {
              const int ii = oi * stride - padding + ki;
              if (ii < 0 || ii >= d.h) continue;
              for (int kj = 0; kj < d.kw; ++kj) {
                const int jj = oj * stride - padding + kj;
                if (jj < 0 || jj >= d.w) continue;
                acc += xsl[static_cast<std::int64_t>(ii) * d.w + jj] * wk[ki * d.kw + kj];
              }
            }
          }
          ydst[static_cast<std::int64_t>(oi) * d.wo + oj] = acc;
        }
      }
    }
  });
}

void conv_forward_im2col(const float* x, const float* w, const float* bias, float* y,
                         const ConvDims& d, int stride, int padding, int groups) {
  const std::int64_t in_plane = static_cast<std::int64_t>(d.h) * d.w;
  const std::int64_t out_plane = static_cast<std::int64_t>(d.ho) * d.wo;
  const std::int64_t kcols = static_cast<std::int64_t>(d.cg) * d.kh * d.kw;
  parallel_for(d.n, 1, [&](std::int64_t n0, std::int64_t n1) {
    std::vector<float> col(static_cast<std::size_t>(kcols * out_plane));
    for (std::int64_t n = n0; n < n1; ++n) {
      for (int g = 0; g < groups; ++g) {
        const float* xg = x + (n * d.c + static_cast<std::int64_t>(g) * d.cg) * in_plane;
        kern::im2col(xg, d.cg, d.h, d.w, d.kh, d.kw, padding, stride, d.ho, d.wo, col.data());
        const float* wg = w + static_cast<std::int64_t>(g) * d.og * kcols;
        float* yg = y + (n * d.o + static_cast<std::int64_t>(g) * d.og) * out_plane;
        kern::matmul(wg, col.data(), yg, d.og, kcols, out_plane, false);
      }
    }
  });
  if (bias) {
    parallel_for(static_cast<std::int64_t>(d.n) * d.o, 32, [&](std::int64_t b0, std::int64_t b1) {
      for (std::int64_t no = b0; no < b1; ++no) {
        const float b = bias[no % d.o];
        float* row = y + no * out_plane;
        for (std::int64_t i = 0; i < out_plane; ++i) row[i] += b;
      }
    });
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int padding,
              int groups, ConvAlgo algo) {
  const ConvDims d = conv_check(x, w, bias, stride, padding, groups);
  Tensor out = Tensor::zeros({d.n, d.o, d.ho, d.wo});
  const bool depthwise = (groups == d.c && groups == d.o);
  const bool direct = (algo == ConvAlgo::kDirect) || (algo == ConvAlgo::kAuto && depthwise);
  if (direct) {
    conv_forward_direct(x.data(), w.data(), bias.defined() ? bias.data() : nullptr, out.data(), d,
                        stride, padding);
  } else {
    conv_forward_im2col(x.data(), w.data(), bias.defined() ? bias.data() : nullptr, out.data(), d,
                        stride, padding, groups);
  }
  if (tracing({&x, &w, &bias})) {
    record("conv2d", out, [x, w, bias, out, d, stride, padding, groups]() mutable {
      if (!out.has_grad()) return;
      const float* g = out.grad_data();
      const std::int64_t in_plane = static_cast<std::int64_t>(d.h) * d.w;
      const std::int64_t out_plane = static_cast<std::int64_t>(d.ho) * d.wo;
      const std::int64_t kcols = static_cast<std::int64_t>(d.cg) * d.kh * d.kw;
      if (bias.defined() && bias.requires_grad()) {
        float* db = bias.grad();
        for (std::int64_t n = 0; n < d.n; ++n) {
          for (int o = 0; o < d.o; ++o) {
            const float* row = g + (n * d.o + o) * out_plane;
            double s = 0.0;
            for (std::int64_t i = 0; i < out_plane; ++i) s += row[i];
            db[o] += static_cast<float>(s);
          }
        }
      }
      const bool need_dx = x.requires_grad();
      const bool need_dw = w.requires_grad();
      if (!need_dx && !need_dw) return;
      std::vector<float> col(static_cast<std::size_t>(kcols * out_plane));
      std::vector<float> dcol(need_dx ? static_cast<std::size_t>(kcols * out_plane) : 0);
      float* dx = need_dx ? x.grad() : nullptr;
      float* dw = need_dw ? w.grad() : nullptr;
      for (std::int64_t n = 0; n < d.n; ++n) {
        for (int gidx = 0; gidx < groups; ++gidx) {
          const float* gg = g + (n * d.o + static_cast<std::int64_t>(gidx) * d.og) * out_plane;
          const float* wg = w.data() + static_cast<std::int64_t>(gidx) * d.og * kcols;
          if (need_dw) {
            const float* xg =
                x.data() + (n * d.c + static_cast<std::int64_t>(gidx) * d.cg) * in_plane;
            kern::im2col(xg, d.cg, d.h, d.w, d.kh, d.kw, padding, stride, d.ho, d.wo, col.data());
            kern::matmul_tb(gg, col.data(), dw + static_cast<std::int64_t>(gidx) * d.og * kcols,
                            d.og, out_plane, kcols, true);
          }
          if (need_dx) {
            kern::matmul_ta(wg, gg, dcol.data(), kcols, d.og, out_plane, false);
            kern::col2im_add(dcol.data(), d.cg, d.h, d.w, d.kh, d.kw, padding, stride, d.ho, d.wo,
                             dx + (n * d.c + static_cast<std::int64_t>(gidx) * d.cg) * in_plane);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- batch norm

Tensor batch_norm2d(const Tensor& x, const Tensor& gain, const Tensor& bias,
                    BatchNormState& state, float momentum, float eps, bool training) {
  if (x.ndim() != 4) throw ShapeError("batch_norm2d: input must be NCHW");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (gain.numel() != c || bias.numel() != c || state.running_mean.numel() != c ||
      state.running_var.numel() != c) {
    throw ShapeError("batch_norm2d: per-channel parameter size mismatch");
  }
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  const std::int64_t m = static_cast<std::int64_t>(n) * plane;
  Tensor out = Tensor::zeros(x.shape());
  auto mean = std::make_shared<std::vector<float>>(static_cast<std::size_t>(c));
  auto inv = std::make_shared<std::vector<float>>(static_cast<std::size_t>(c));
  const float* px = x.data();
  const float* pg = gain.data();
  const float* pb = bias.data();
  float* po = out.data();

  if (training) {
    float* rm = state.running_mean.data();
    float* rv = state.running_var.data();
    parallel_for(c, 1, [&](std::int64_t c0, std::int64_t c1) {
      for (std::int64_t ch = c0; ch < c1; ++ch) {
        double s = 0.0;
        for (int b = 0; b < n; ++b) {
          const float* sl = px + (static_cast<std::int64_t>(b) * c + ch) * plane;
          for (std::int64_t i = 0; i < plane; ++i) s += sl[i];
        }
        const double mu = s / static_cast<double>(m);
        double v = 0.0;
        for (int b = 0; b < n; ++b) {
          const float* sl = px + (static_cast<std::int64_t>(b) * c + ch) * plane;
          for (std::int64_t i = 0; i < plane; ++i) {
            const double cdiff = sl[i] - mu;
            v += cdiff * cdiff;
          }
        }
        const double var = v / static_cast<double>(m);
        (*mean)[static_cast<std::size_t>(ch)] = static_cast<float>(mu);
        (*inv)[static_cast<std::size_t>(ch)] = static_cast<float>(1.0 / std::sqrt(var + eps));
        const double unbiased = m > 1 ? var * static_cast<double>(m) / static_cast<double>(m - 1)
                                      : var;
        rm[ch] = momentum * rm[ch] + (1.f - momentum) * static_cast<float>(mu);
        rv[ch] = momentum * rv[ch] + (1.f - momentum) * static_cast<float>(unbiased);
      }
    });
  } else {
    const float* rm = state.running_mean.data();
    const float* rv = state.running_var.data();
    for (int ch = 0; ch < c; ++ch) {
      (*mean)[static_cast<std::size_t>(ch)] = rm[ch];
      (*inv)[static_cast<std::size_t>(ch)] =
          static_cast<float>(1.0 / std::sqrt(static_cast<double>(rv[ch]) + eps));
    }
  }

  parallel_for(static_cast<std::int64_t>(n) * c, 4, [&](std::int64_t b0, std::int64_t b1) {
    for (std::int64_t bc = b0; bc < b1; ++bc) {
      const std::int64_t ch = bc % c;
      const float mu = (*mean)[static_cast<std::size_t>(ch)];
      const float iv = (*inv)[static_cast<std::size_t>(ch)];
      const float gn = pg[ch], bs = pb[ch];
      const float* sl = px + bc * plane;
      float* ol = po + bc * plane;
      for (std::int64_t i = 0; i < plane; ++i) ol[i] = (sl[i] - mu) * iv * gn + bs;
    }
  });

  if (tracing({&x, &gain, &bias})) {
    record("batch_norm2d", out,
           [x, gain, bias, out, mean, inv, n, c, plane, m, training]() mutable {
             if (!out.has_grad()) return;
             const float* g = out.grad_data();
             const float* px2 = x.data();
             const float* pg2 = gain.data();
             float* dx = x.requires_grad() ? x.grad() : nullptr;
             float* dg = gain.requires_grad() ? gain.grad() : nullptr;
             float* db = bias.requires_grad() ? bias.grad() : nullptr;
             for (int ch = 0; ch < c; ++ch) {
               const float mu = (*mean)[static_cast<std::size_t>(ch)];
               const float iv = (*inv)[static_cast<std::size_t>(ch)];
               double sg = 0.0, sb = 0.0;
               for (int b = 0; b < n; ++b) {
                 const std::int64_t base = (static_cast<std::int64_t>(b) * c + ch) * plane;
                 for (std::int64_t i = 0; i < plane; ++i) {
                   const float xh = (px2[base + i] - mu) * iv;
                   sg += static_cast<double>(g[base + i]) * xh;
                   sb += g[base + i];
                 }
               }
               if (dg) dg[ch] += static_cast<float>(sg);
               if (db) db[ch] += static_cast<float>(sb);
               if (dx) {
                 const float gn = pg2[ch];
                 if (training) {
                   const float mg = static_cast<float>(sg / static_cast<double>(m));
                   const float mb = static_cast<float>(sb / static_cast<double>(m));
                   for (int b = 0; b < n; ++b) {
                     const std::int64_t base = (static_cast<std::int64_t>(b) * c + ch) * plane;
                     for (std::int64_t i = 0; i < plane; ++i) {
                       const float xh = (px2[base + i] - mu) * iv;
                       dx[base + i] += gn * iv * (g[base + i] - mb - xh * mg);
                     }
                   }
                 } else {
                   for (int b = 0; b < n; ++b) {
                     const std::int64_t base = (static_cast<std::int64_t>(b) * c + ch) * plane;
                     for (std::int64_t i = 0; i < plane; ++i) {
                       dx[base + i] += gn * iv * g[base + i];
                     }
                   }
                 }
               }
             }
           });
  }
  return out;
}

// ---------------------------------------------------------------- pooling / gating

Tensor global_avg_pool(const Tensor& x) {
  if (x.ndim() != 4) throw ShapeError("global_avg_pool: input must be NCHW");
  const int n = x.dim(0), c = x.dim(1);
  const std::int64_t plane = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
  Tensor out = Tensor::zeros({n, c});
  const float* px = x.data();
  float* po = out.data();
  for (std::int64_t bc = 0; bc < static_cast<std::int64_t>(n) * c; ++bc) {
    const float* sl = px + bc * plane;
    double s = 0.0;
    for (std::int64_t i = 0; i < plane; ++i) s += sl[i];
    po[bc] = static_cast<float>(s / static_cast<double>(plane));
  }
  if (tracing({&x})) {
    record("global_avg_pool", out, [x, out, n, c, plane]() mutable {
      if (!out.has_grad() || !x.requires_grad()) return;
      const float* g = out.grad_data();
      float* dx = x.grad();
      const float invp = 1.f / static_cast<float>(plane);
      for (std::int64_t bc = 0; bc < static_cast<std::int64_t>(n) * c; ++bc) {
        const float gv = g[bc] * invp;
        float* sl = dx + bc * plane;
        for (std::int64_t i = 0; i < plane; ++i) sl[i] += gv;
      }
    });
  }
  return out;
}

Tensor mean_tokens(const Tensor& x) {
  if (x.ndim() != 3) throw ShapeError("mean_tokens: input must be [B,T,D]");
  const int b = x.dim(0), t = x.dim(1), d = x.dim(2);
  Tensor out = Tensor::zeros({b, d});
  const float* px = x.data();
  float* po = out.data();
  std::vector<double> acc(static_cast<std::size_t>(d));
  for (int bi = 0; bi < b; ++bi) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (int ti = 0; ti < t; ++ti) {
      const float* row = px + (static_cast<std::int64_t>(bi) * t + ti) * d;
      for (int j = 0; j < d; ++j) acc[static_cast<std::size_t>(j)] += row[j];
    }
    float* orow = po + static_cast<std::int64_t>(bi) * d;
    for (int j = 0; j < d; ++j) {
      orow[j] = static_cast<float>(acc[static_cast<std::size_t>(j)] / static_cast<double>(t));
    }
  }
  if (tracing({&x})) {
    record("mean_tokens", out, [x, out, b, t, d]() mutable {
      if (!out.has_grad() || !x.requires_grad()) return;
      const float* g = out.grad_data();
      float* dx = x.grad();
      const float invt = 1.f / static_cast<float>(t);
      for (int bi = 0; bi < b; ++bi) {
        const float* grow = g + static_cast<std::int64_t>(bi) * d;
        for (int ti = 0; ti < t; ++ti) {
          float* row = dx + (static_cast<std::int64_t>(bi) * t + ti) * d;
          for (int j = 0; j < d; ++j) row[j] += grow[j] * invt;
        }
      }
    });
  }
  return out;
}

Tensor max_tokens(const Tensor& x) {
  if (x.ndim() != 3) throw ShapeError("max_tokens: input must be [B,T,D]");
  const int b = x.dim(0), t = x.dim(1), d = x.dim(2);
  Tensor out = Tensor::zeros({b, d});
  auto argmax = std::make_shared<std::vector<int>>(static_cast<std::size_t>(b) * d);
  const float* px = x.data();
  float* po = out.data();
  for (int bi = 0; bi < b; ++bi) {
    for (int j = 0; j < d; ++j) {
      float best = px[(static_cast<std::int64_t>(bi) * t) * d + j];
      int bidx = 0;
      for (int ti = 1; ti < t; ++ti) {
        const float v = px[(static_cast<std::int64_t>(bi) * t + ti) * d + j];
        if (v > best) {
          best = v;
          bidx = ti;
        }
      }
      po[static_cast<std::int64_t>(bi) * d + j] = best;
      (*argmax)[static_cast<std::size_t>(bi) * d + j] = bidx;
    }
  }
  if (tracing({&x})) {
    record("max_tokens", out, [x, out, argmax, b, t, d]() mutable {
      if (!out.has_grad() || !x.requires_grad()) return;
      const float* g = out.grad_data();
      float* dx = x.grad();
      for (int bi = 0; bi < b; ++bi) {
        for (int j = 0; j < d; ++j) {
          const int ti = (*argmax)[static_cast<std::size_t>(bi) * d + j];
          dx[(static_cast<std::int64_t>(bi) * t + ti) * d + j] +=
              g[static_cast<std::int64_t>(bi) * d + j];
        }
      }
    });
  }
  return out;
}

Tensor scale_channels(const Tensor& x, const Tensor& g) {
  if (x.ndim() != 4 || g.ndim() != 2 || g.dim(0) != x.dim(0) || g.dim(1) != x.dim(1)) {
    throw ShapeError("scale_channels: expected x[N,C,H,W], g[N,C]");
  }
  const std::int64_t nc = static_cast<std::int64_t>(x.dim(0)) * x.dim(1);
  const std::int64_t plane = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
  Tensor out = Tensor::zeros(x.shape());
  const float* px = x.data();
  const float* pgt = g.data();
  float* po = out.data();
  for (std::int64_t bc = 0; bc < nc; ++bc) {
    const float s = pgt[bc];
    const float* sl = px + bc * plane;
    float* ol = po + bc * plane;
    for (std::int64_t i = 0; i < plane; ++i) ol[i] = sl[i] * s;
  }
  if (tracing({&x, &g})) {
    record("scale_channels", out, [x, g, out, nc, plane]() mutable {
      if (!out.has_grad()) return;
      const float* go = out.grad_data();
      if (x.requires_grad()) {
        float* dx = x.grad();
        const float* pg2 = g.data();
        for (std::int64_t bc = 0; bc < nc; ++bc) {
          const float s = pg2[bc];
          const float* gl = go + bc * plane;
          float* dl = dx + bc * plane;
          for (std::int64_t i = 0; i < plane; ++i) dl[i] += gl[i] * s;
        }
      }
      if (g.requires_grad()) {
        float* dg = g.grad();
        const float* px2 = x.data();
        for (std::int64_t bc = 0; bc < nc; ++bc) {
          const float* gl = go + bc * plane;
          const float* xl = px2 + bc * plane;
          double s = 0.0;
          for (std::int64_t i = 0; i < plane; ++i) s += static_cast<double>(gl[i]) * xl[i];
          dg[bc] += static_cast<float>(s);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- layout

Tensor reshape(const Tensor& x, Shape shape) { return x.reshaped(std::move(shape)); }

Tensor permute(const Tensor& x, const std::vector<int>& order) {
  const int nd = x.ndim();
  if (static_cast<int>(order.size()) != nd) throw ShapeError("permute: order rank mismatch");
  std::vector<bool> seen(static_cast<std::size_t>(nd), false);
  Shape os(static_cast<std::size_t>(nd));
  for (int i = 0; i < nd; ++i) {
    const int o = order[static_cast<std::size_t>(i)];
    if (o < 0 || o >= nd || seen[static_cast<std::size_t>(o)]) {
      throw ShapeError("permute: invalid order");
    }
    seen[static_cast<std::size_t>(o)] = true;
    os[static_cast<std::size_t>(i)] = x.dim(o);
  }
  // strides of the source, walked in destination order
  std::vector<std::int64_t> src_stride(static_cast<std::size_t>(nd), 1);
  for (int i = nd - 2; i >= 0; --i) {
    src_stride[static_cast<std::size_t>(i)] =
        src_stride[static_cast<std::size_t>(i + 1)] * x.dim(i + 1);
  }
  std::vector<std::int64_t> walk(static_cast<std::size_t>(nd));
  for (int i = 0; i < nd; ++i) {
    walk[static_cast<std::size_t>(i)] = src_stride[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
  }
  Tensor out = Tensor::zeros(os);
  const float* px = x.data();
  float* po = out.data();
  const std::int64_t total = x.numel();
  std::vector<std::int64_t> idx(static_cast<std::size_t>(nd), 0);
  std::int64_t src = 0;
  for (std::int64_t i = 0; i < total; ++i) {
    po[i] = px[src];
    for (int axis = nd - 1; axis >= 0; --axis) {
      idx[static_cast<std::size_t>(axis)]++;
      src += walk[static_cast<std::size_t>(axis)];
      if (idx[static_cast<std::size_t>(axis)] < os[static_cast<std::size_t>(axis)]) break;
      src -= walk[static_cast<std::size_t>(axis)] * os[static_cast<std::size_t>(axis)];
      idx[static_cast<std::size_t>(axis)] = 0;
    }
  }
  if (tracing({&x})) {
    record("permute", out, [x, out, os, walk]() mutable {
      if (!out.has_grad() || !x.requires_grad()) return;
      const float* g = out.grad_data();
      float* dx = x.grad();
      const int nd2 = static_cast<int>(os.size());
      const std::int64_t total2 = out.numel();
      std::vector<std::int64_t> idx2(static_cast<std::size_t>(nd2), 0);
      std::int64_t src = 0;
      for (std::int64_t i = 0; i < total2; ++i) {
        dx[src] += g[i];
        for (int axis = nd2 - 1; axis >= 0; --axis) {
          idx2[static_cast<std::size_t>(axis)]++;
          src += walk[static_cast<std::size_t>(axis)];
          if (idx2[static_cast<std::size_t>(axis)] < os[static_cast<std::size_t>(axis)]) break;
          src -= walk[static_cast<std::size_t>(axis)] * os[static_cast<std::size_t>(axis)];
          idx2[static_cast<std::size_t>(axis)] = 0;
        }
      }
    });
  }
  return out;
}

Tensor concat(const Tensor& a, const Tensor& b, int axis) {
  const int nd = a.ndim();
  if (b.ndim() != nd) throw ShapeError("concat: rank mismatch");
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) throw ShapeError("concat: axis out of range");
  for (int i = 0; i < nd; ++i) {
    if (i != axis && a.dim(i) != b.dim(i)) {
      throw ShapeError("concat: shapes differ outside axis: " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
    }
  }
  Shape os(a.shape());
  os[static_cast<std::size_t>(axis)] = a.dim(axis) + b.dim(axis);
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= a.dim(i);
  for (int i = axis + 1; i < nd; ++i) inner *= a.dim(i);
  const std::int64_t ablock = static_cast<std::int64_t>(a.dim(axis)) * inner;
  const std::int64_t bblock = static_cast<std::int64_t>(b.dim(axis)) * inner;
  Tensor out = Tensor::zeros(os);
  const float* pa = a.data();
  const float* pb = b.data();
  float* po = out.data();
  for (std::int64_t o = 0; o < outer; ++o) {
    std::memcpy(po + o * (ablock + bblock), pa + o * ablock,
                static_cast<std::size_t>(ablock) * sizeof(float));
    std::memcpy(po + o * (ablock + bblock) + ablock, pb + o * bblock,
                static_cast<std::size_t>(bblock) * sizeof(float));
  }
  if (tracing({&a, &b})) {
    record("concat", out, [a, b, out, outer, ablock, bblock]() mutable {
      if (!out.has_grad()) return;
      const float* g = out.grad_data();
      if (a.requires_grad()) {
        float* da = a.grad();
        for (std::int64_t o = 0; o < outer; ++o) {
          const float* src = g + o * (ablock + bblock);
          float* dst = da + o * ablock;
          for (std::int64_t i = 0; i < ablock; ++i) dst[i] += src[i];
        }
      }
      if (b.requires_grad()) {
        float* db = b.grad();
        for (std::int64_t o = 0; o < outer; ++o) {
          const float* src = g + o * (ablock + bblock) + ablock;
          float* dst = db + o * bblock;
          for (std::int64_t i = 0; i < bblock; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return out;
}

Tensor slice_tokens(const Tensor& x, int start, int len) {
  if (x.ndim() != 3) throw ShapeError("slice_tokens: input must be [B,T,D]");
  const int b = x.dim(0), t = x.dim(1), d = x.dim(2);
  if (start < 0 || len < 1 || start + len > t) throw ShapeError("slice_tokens: range out of bounds");
  Tensor out = Tensor::zeros({b, len, d});
  const float* px = x.data();
  float* po = out.data();
  for (int bi = 0; bi < b; ++bi) {
    std::memcpy(po + static_cast<std::int64_t>(bi) * len * d,
                px + (static_cast<std::int64_t>(bi) * t + start) * d,
                static_cast<std::size_t>(len) * d * sizeof(float));
  }
  if (tracing({&x})) {
    record("slice_tokens", out, [x, out, b, t, d, start, len]() mutable {
      if (!out.has_grad() || !x.requires_grad()) return;
      const float* g = out.grad_data();
      float* dx = x.grad();
      for (int bi = 0; bi < b; ++bi) {
        const float* src = g + static_cast<std::int64_t>(bi) * len * d;
        float* dst = dx + (static_cast<std::int64_t>(bi) * t + start) * d;
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(len) * d; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

Tensor broadcast_batch(const Tensor& x, int batch) {
  if (x.ndim() < 1 || x.dim(0) != 1) throw ShapeError("broadcast_batch: leading dim must be 1");
  Shape os(x.shape());
  os[0] = batch;
  Tensor out = Tensor::zeros(os);
  const std::int64_t block = x.numel();
  const float* px = x.data();
  float* po = out.data();
  for (int b = 0; b < batch; ++b) {
    std::memcpy(po + static_cast<std::int64_t>(b) * block, px,
                static_cast<std::size_t>(block) * sizeof(float));
  }
  if (tracing({&x})) {
    record("broadcast_batch", out, [x, out, batch, block]() mutable {
      if (!out.has_grad() || !x.requires_grad()) return;
      const float* g = out.grad_data();
      float* dx = x.grad();
      for (int b = 0; b < batch; ++b) {
        const float* src = g + static_cast<std::int64_t>(b) * block;
        for (std::int64_t i = 0; i < block; ++i) dx[i] += src[i];
      }
    });
  }
  return out;
}

Tensor space_to_patches(const Tensor& x, int patch) {
  if (x.ndim() != 4) throw ShapeError("space_to_patches: input must be NCHW");
  const int b = x.dim(0), c = x.dim(1), s = x.dim(2);
  if (x.dim(3) != s) throw ShapeError("space_to_patches: input must be square");
  if (patch < 1 || s % patch != 0) {
    throw ConfigError("space_to_patches: image size " + std::to_string(s) +
                      " not divisible by patch size " + std::to_string(patch));
  }
  const int grid = s / patch;
  const int t = grid * grid;
  const int f = c * patch * patch;
  Tensor out = Tensor::zeros({b, t, f});
  const float* px = x.data();
  float* po = out.data();
  for (int bi = 0; bi < b; ++bi) {
    for (int gi = 0; gi < grid; ++gi) {
      for (int gj = 0; gj < grid; ++gj) {
        float* dst = po + ((static_cast<std::int64_t>(bi) * t) + gi * grid + gj) * f;
        for (int ci = 0; ci < c; ++ci) {
          for (int pi = 0; pi < patch; ++pi) {
            const float* src = px + ((static_cast<std::int64_t>(bi) * c + ci) * s +
                                     (gi * patch + pi)) * s + gj * patch;
            std::memcpy(dst + (static_cast<std::int64_t>(ci) * patch + pi) * patch, src,
                        static_cast<std::size_t>(patch) * sizeof(float));
          }
        }
      }
    }
  }
  if (tracing({&x})) {
    record("space_to_patches", out, [x, out, b, c, s, patch]() mutable {
      if (!out.has_grad() || !x.requires_grad()) return;
      const int grid = s / patch;
      const int t = grid * grid;
      const int f = c * patch * patch;
      const float* g = out.grad_data();
      float* dx = x.grad();
      for (int bi = 0; bi < b; ++bi) {
        for (int gi = 0; gi < grid; ++gi) {
          for (int gj = 0; gj < grid; ++gj) {
            const float* src = g + ((static_cast<std::int64_t>(bi) * t) + gi * grid + gj) * f;
            for (int ci = 0; ci < c; ++ci) {
              for (int pi = 0; pi < patch; ++pi) {
                float* dst = dx + ((static_cast<std::int64_t>(bi) * c + ci) * s +
                                   (gi * patch + pi)) * s + gj * patch;
                const float* srow = src + (static_cast<std::int64_t>(ci) * patch + pi) * patch;
                for (int pj = 0; pj < patch; ++pj) dst[pj] += srow[pj];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- dropout / reductions

Tensor dropout(const Tensor& x, float rate, Rng& rng, bool training) {
  if (rate < 0.f || rate >= 1.f) throw ConfigError("dropout: rate must be in [0,1)");
  if (!training || rate == 0.f) return x;
  const std::int64_t n = x.numel();
  auto mask = std::make_shared<std::vector<float>>(static_cast<std::size_t>(n));
  const float keep_scale = 1.f / (1.f - rate);
  for (std::int64_t i = 0; i < n; ++i) {
    (*mask)[static_cast<std::size_t>(i)] = rng.uniform() < rate ? 0.f : keep_scale;
  }
  Tensor out = Tensor::zeros(x.shape());
  const float* px = x.data();
  float* po = out.data();
  for (std::int64_t i = 0; i < n; ++i) po[i] = px[i] * (*mask)[static_cast<std::size_t>(i)];
  if (tracing({&x})) {
    record("dropout", out, [x, out, mask]() mutable {
      if (!out.has_grad() || !x.requires_grad()) return;
      const float* g = out.grad_data();
      float* dx = x.grad();
      const std::int64_t n2 = x.numel();
      for (std::int64_t i = 0; i < n2; ++i) dx[i] += g[i] * (*mask)[static_cast<std::size_t>(i)];
    });
  }
  return out;
}

Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  const float* px = x.data();
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) s += px[i];
  Tensor out = Tensor::scalar(static_cast<float>(s));
  if (tracing({&x})) {
    record("sum_all", out, [x, out]() mutable {
      if (!out.has_grad() || !x.requires_grad()) return;
      const float g = out.grad_data()[0];
      float* dx = x.grad();
      const std::int64_t n2 = x.numel();
      for (std::int64_t i = 0; i < n2; ++i) dx[i] += g;
    });
  }
  return out;
}

Tensor mean_all(const Tensor& x) {
  double s = 0.0;
  const float* px = x.data();
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) s += px[i];
  Tensor out = Tensor::scalar(static_cast<float>(s / static_cast<double>(n)));
  if (tracing({&x})) {
    record("mean_all", out, [x, out]() mutable {
      if (!out.has_grad() || !x.requires_grad()) return;
      const float g = out.grad_data()[0] / static_cast<float>(x.numel());
      float* dx = x.grad();
      const std::int64_t n2 = x.numel();
      for (std::int64_t i = 0; i < n2; ++i) dx[i] += g;
    });
  }
  return out;
}

Tensor bce_loss(const Tensor& prob, const Tensor& label) {
  check_same_shape(prob, label, "bce_loss");
  const std::int64_t n = prob.numel();
  if (n == 0) throw ContractError("bce_loss: empty batch");
  const float* pp = prob.data();
  const float* pl = label.data();
  constexpr double kClamp = 1e-7;
  double total = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const float y = pl[i];
    if (y != 0.f && y != 1.f) {
      throw ContractError("bce_loss: labels must be exactly 0 or 1");
    }
    double p = static_cast<double>(pp[i]);
    p = std::min(1.0 - kClamp, std::max(kClamp, p));
    total += y == 1.f ? -std::log(p) : -std::log(1.0 - p);
  }
  Tensor out = Tensor::scalar(static_cast<float>(total / static_cast<double>(n)));
  if (tracing({&prob})) {
    record("bce_loss", out, [prob, label, out, n]() mutable {
      if (!out.has_grad() || !prob.requires_grad()) return;
      const float g = out.grad_data()[0];
      const float* pp2 = prob.data();
      const float* pl2 = label.data();
      float* dp = prob.grad();
      for (std::int64_t i = 0; i < n; ++i) {
        double p = static_cast<double>(pp2[i]);
        p = std::min(1.0 - 1e-7, std::max(1e-7, p));
        const double y = static_cast<double>(pl2[i]);
        // straight-through at the clamp: d/dp of -[y ln p + (1-y) ln(1-p)]
        const double d = (p - y) / (p * (1.0 - p)) / static_cast<double>(n);
        dp[i] += g * static_cast<float>(d);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- resize

Tensor upsample_bilinear(const Tensor& x, int out_h, int out_w) {
  if (x.ndim() != 3) throw ShapeError("upsample_bilinear: input must be [C,H,W]");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor out = Tensor::zeros({c, out_h, out_w});
  const float* px = x.data();
  float* po = out.data();
  const double sh = static_cast<double>(h) / out_h;
  const double sw = static_cast<double>(w) / out_w;
  for (int oi = 0; oi < out_h; ++oi) {
    double fy = (oi + 0.5) * sh - 0.5;
    fy = std::min(std::max(fy, 0.0), static_cast<double>(h - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, h - 1);
    const float wy = static_cast<float>(fy - y0);
    for (int oj = 0; oj < out_w; ++oj) {
      double fx = (oj + 0.5) * sw - 0.5;
      fx = std::min(std::max(fx, 0.0), static_cast<double>(w - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, w - 1);
      const float wx = static_cast<float>(fx - x0);
      for (int ci = 0; ci < c; ++ci) {
        const float* pl = px + static_cast<std::int64_t>(ci) * h * w;
        const float v00 = pl[static_cast<std::int64_t>(y0) * w + x0];
        const float v01 = pl[static_cast<std::int64_t>(y0) * w + x1];
        const float v10 = pl[static_cast<std::int64_t>(y1) * w + x0];
        const float v11 = pl[static_cast<std::int64_t>(y1) * w + x1];
        const float top = v00 + (v01 - v00) * wx;
        const float bot = v10 + (v11 - v10) * wx;
        po[(static_cast<std::int64_t>(ci) * out_h + oi) * out_w + oj] = top + (bot - top) * wy;
      }
    }
  }
  return out;
}

}  // namespace ops
}  // namespace fundus
