#include "capdet/tensor.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "capdet/rng.hpp"

namespace capdet {

namespace {

thread_local GradMap* g_sink = nullptr;
thread_local bool g_grad_enabled = true;

using EMat =
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const EMat>;
using Map = Eigen::Map<EMat>;

void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

// Gradient destination for a node. Leaf gradients go to the active sink when
// one is installed; everything else accumulates in place.
float* grad_buffer(TensorImpl* t) {
  if (g_sink && !t->backprop) {
    auto& v = (*g_sink)[t];
    if (v.size() != t->data.size()) v.assign(t->data.size(), 0.0f);
    return v.data();
  }
  if (t->grad.size() != t->data.size()) t->grad.assign(t->data.size(), 0.0f);
  return t->grad.data();
}

bool wants_grad(const TensorImpl* t) { return t->requires_grad; }

void axpy(float* dst, const float* src, int64_t n, float a = 1.0f) {
  for (int64_t i = 0; i < n; ++i) dst[i] += a * src[i];
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

Tensor make_op(Shape shape, std::vector<float> data,
               const std::vector<Tensor>& parents,
               const std::function<std::function<void()>(TensorImpl*)>& make_backprop) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  bool taped = false;
  if (g_grad_enabled) {
    for (const auto& p : parents)
      if (p.requires_grad()) taped = true;
  }
  if (taped) {
    impl->requires_grad = true;
    for (const auto& p : parents) impl->parents.push_back(p.impl_ptr());
    impl->backprop = make_backprop(impl.get());
  }
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return from(shape, std::vector<float>(shape_numel(shape), 0.0f), requires_grad);
}

Tensor Tensor::full(const Shape& shape, float value, bool requires_grad) {
  return from(shape, std::vector<float>(shape_numel(shape), value), requires_grad);
}

Tensor Tensor::from(const Shape& shape, std::vector<float> data,
                    bool requires_grad) {
  check(shape_numel(shape) == static_cast<int64_t>(data.size()),
        "tensor data length " + std::to_string(data.size()) +
            " does not match shape " + shape_str(shape));
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(float value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

Tensor Tensor::randn(const Shape& shape, Rng& rng, float stddev,
                     bool requires_grad) {
  std::vector<float> data(shape_numel(shape));
  for (auto& v : data) v = rng.normal(stddev);
  return from(shape, std::move(data), requires_grad);
}

float Tensor::item() const {
  check(numel() == 1, "item() on non-scalar tensor " + shape_str(shape()));
  return impl_->data[0];
}

const std::vector<float>* Tensor::grad() const {
  if (impl_->grad.empty()) return nullptr;
  return &impl_->grad;
}

void Tensor::zero_grad() { impl_->grad.clear(); }

GradSinkScope::GradSinkScope(GradMap* sink) : prev_(g_sink) { g_sink = sink; }
GradSinkScope::~GradSinkScope() { g_sink = prev_; }

NoGradScope::NoGradScope() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradScope::~NoGradScope() { g_grad_enabled = prev_; }

bool grad_enabled() { return g_grad_enabled; }

void backward(const Tensor& loss) {
  check(loss.numel() == 1,
        "backward() requires a scalar loss, got " + shape_str(loss.shape()));
  TensorImpl* root = loss.impl();
  if (!root->requires_grad) return;

  // Iterative post-order over the tape.
  std::vector<TensorImpl*> topo;
  std::unordered_set<TensorImpl*> seen;
  std::vector<std::pair<TensorImpl*, size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      TensorImpl* p = node->parents[idx++].get();
      if (p->requires_grad && p->backprop && seen.insert(p).second)
        stack.emplace_back(p, 0);
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }

  root->grad.assign(1, 1.0f);
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    if ((*it)->backprop && !(*it)->grad.empty()) (*it)->backprop();
  }
}

// --- elementwise and shape ops ----------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
  std::vector<float> out(a.numel());
  for (int64_t i = 0; i < a.numel(); ++i)
    out[i] = a.values()[i] + b.values()[i];
  auto pa = a.impl(), pb = b.impl();
  return make_op(a.shape(), std::move(out), {a, b}, [pa, pb](TensorImpl* self) {
    return [self, pa, pb] {
      const auto& g = self->grad;
      if (wants_grad(pa)) axpy(grad_buffer(pa), g.data(), g.size());
      if (wants_grad(pb)) axpy(grad_buffer(pb), g.data(), g.size());
    };
  });
}

Tensor add_rowvec(const Tensor& m, const Tensor& v) {
  check(m.rank() == 2 && v.rank() == 1 && m.size(1) == v.size(0),
        "add_rowvec: shape mismatch " + shape_str(m.shape()) + " vs " +
            shape_str(v.shape()));
  int64_t rows = m.size(0), cols = m.size(1);
  std::vector<float> out(m.numel());
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c)
      out[r * cols + c] = m.values()[r * cols + c] + v.values()[c];
  auto pm = m.impl(), pv = v.impl();
  return make_op(m.shape(), std::move(out), {m, v},
                 [pm, pv, rows, cols](TensorImpl* self) {
                   return [self, pm, pv, rows, cols] {
                     const auto& g = self->grad;
                     if (wants_grad(pm)) axpy(grad_buffer(pm), g.data(), g.size());
                     if (wants_grad(pv)) {
                       float* gv = grad_buffer(pv);
                       for (int64_t r = 0; r < rows; ++r)
                         for (int64_t c = 0; c < cols; ++c)
                           gv[c] += g[r * cols + c];
                     }
                   };
                 });
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0f)); }

Tensor mul(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), "mul: shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
  std::vector<float> out(a.numel());
  for (int64_t i = 0; i < a.numel(); ++i)
    out[i] = a.values()[i] * b.values()[i];
  auto pa = a.impl(), pb = b.impl();
  return make_op(a.shape(), std::move(out), {a, b}, [pa, pb](TensorImpl* self) {
    return [self, pa, pb] {
      const auto& g = self->grad;
      if (wants_grad(pa)) {
        float* ga = grad_buffer(pa);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * pb->data[i];
      }
      if (wants_grad(pb)) {
        float* gb = grad_buffer(pb);
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * pa->data[i];
      }
    };
  });
}

Tensor scale(const Tensor& a, float s) {
  std::vector<float> out(a.numel());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = a.values()[i] * s;
  auto pa = a.impl();
  return make_op(a.shape(), std::move(out), {a}, [pa, s](TensorImpl* self) {
    return [self, pa, s] {
      if (wants_grad(pa)) axpy(grad_buffer(pa), self->grad.data(), self->grad.size(), s);
    };
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  check(a.rank() == 2 && b.rank() == 2 && a.size(1) == b.size(0),
        "matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
            shape_str(b.shape()));
  int64_t m = a.size(0), k = a.size(1), n = b.size(1);
  std::vector<float> out(m * n, 0.0f);
  {
    MapC A(a.values().data(), m, k), B(b.values().data(), k, n);
    Map C(out.data(), m, n);
    C.noalias() = A * B;
  }
  auto pa = a.impl(), pb = b.impl();
  return make_op({m, n}, std::move(out), {a, b},
                 [pa, pb, m, k, n](TensorImpl* self) {
                   return [self, pa, pb, m, k, n] {
                     MapC G(self->grad.data(), m, n);
                     if (wants_grad(pa)) {
                       MapC B(pb->data.data(), k, n);
                       Map GA(grad_buffer(pa), m, k);
                       GA.noalias() += G * B.transpose();
                     }
                     if (wants_grad(pb)) {
                       MapC A(pa->data.data(), m, k);
                       Map GB(grad_buffer(pb), k, n);
                       GB.noalias() += A.transpose() * G;
                     }
                   };
                 });
}

Tensor transpose(const Tensor& a) {
  check(a.rank() == 2, "transpose: rank-2 tensor required, got " +
                           shape_str(a.shape()));
  int64_t r = a.size(0), c = a.size(1);
  std::vector<float> out(a.numel());
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) out[j * r + i] = a.values()[i * c + j];
  auto pa = a.impl();
  return make_op({c, r}, std::move(out), {a}, [pa, r, c](TensorImpl* self) {
    return [self, pa, r, c] {
      if (!wants_grad(pa)) return;
      float* ga = grad_buffer(pa);
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) ga[i * c + j] += self->grad[j * r + i];
    };
  });
}

Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.7071067811865476;
  constexpr double inv_sqrt2pi = 0.3989422804014327;
  std::vector<float> out(a.numel());
  for (int64_t i = 0; i < a.numel(); ++i) {
    double x = a.values()[i];
    out[i] = static_cast<float>(0.5 * x * (1.0 + std::erf(x * inv_sqrt2)));
  }
  auto pa = a.impl();
  return make_op(a.shape(), std::move(out), {a}, [pa](TensorImpl* self) {
    return [self, pa] {
      if (!wants_grad(pa)) return;
      float* ga = grad_buffer(pa);
      for (size_t i = 0; i < self->grad.size(); ++i) {
        double x = pa->data[i];
        double d = 0.5 * (1.0 + std::erf(x * inv_sqrt2)) +
                   x * inv_sqrt2pi * std::exp(-0.5 * x * x);
        ga[i] += self->grad[i] * static_cast<float>(d);
      }
    };
  });
}

Tensor sigmoid(const Tensor& a) {
  std::vector<float> out(a.numel());
  for (int64_t i = 0; i < a.numel(); ++i) {
    double x = a.values()[i];
    out[i] = static_cast<float>(x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                                       : std::exp(x) / (1.0 + std::exp(x)));
  }
  auto pa = a.impl();
  return make_op(a.shape(), std::move(out), {a}, [pa](TensorImpl* self) {
    return [self, pa] {
      if (!wants_grad(pa)) return;
      float* ga = grad_buffer(pa);
      for (size_t i = 0; i < self->grad.size(); ++i) {
        float y = self->data[i];
        ga[i] += self->grad[i] * y * (1.0f - y);
      }
    };
  });
}

namespace {

// Softmax over contiguous groups: the tensor is viewed as outer×len×inner.
void softmax_geometry(const Shape& s, int axis, int64_t& outer, int64_t& len,
                      int64_t& inner) {
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  len = s[axis];
  for (size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

}  // namespace

Tensor softmax_stable(const Tensor& x, int axis) {
  check(axis >= 0 && axis < x.rank(),
        "softmax: axis " + std::to_string(axis) + " invalid for shape " +
            shape_str(x.shape()));
  int64_t outer, len, inner;
  softmax_geometry(x.shape(), axis, outer, len, inner);
  std::vector<float> out(x.numel());
  const auto& v = x.values();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t in = 0; in < inner; ++in) {
      auto at = [&](int64_t i) { return (o * len + i) * inner + in; };
      double mx = -1e300;
      for (int64_t i = 0; i < len; ++i) mx = std::max(mx, (double)v[at(i)]);
      double denom = 0.0;
      for (int64_t i = 0; i < len; ++i) denom += std::exp((double)v[at(i)] - mx);
      for (int64_t i = 0; i < len; ++i)
        out[at(i)] = static_cast<float>(std::exp((double)v[at(i)] - mx) / denom);
    }
  auto px = x.impl();
  return make_op(x.shape(), std::move(out), {x},
                 [px, outer, len, inner](TensorImpl* self) {
                   return [self, px, outer, len, inner] {
                     if (!wants_grad(px)) return;
                     float* gx = grad_buffer(px);
                     const auto& p = self->data;
                     const auto& g = self->grad;
                     for (int64_t o = 0; o < outer; ++o)
                       for (int64_t in = 0; in < inner; ++in) {
                         auto at = [&](int64_t i) {
                           return (o * len + i) * inner + in;
                         };
                         double dot = 0.0;
                         for (int64_t i = 0; i < len; ++i)
                           dot += (double)g[at(i)] * p[at(i)];
                         for (int64_t i = 0; i < len; ++i)
                           gx[at(i)] += static_cast<float>(
                               p[at(i)] * ((double)g[at(i)] - dot));
                       }
                   };
                 });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  float eps) {
  check(x.rank() == 2, "layer_norm: rank-2 input required, got " +
                           shape_str(x.shape()));
  int64_t rows = x.size(0), d = x.size(1);
  check(gain.rank() == 1 && gain.size(0) == d && bias.rank() == 1 &&
            bias.size(0) == d,
        "layer_norm: gain/bias shape mismatch " + shape_str(gain.shape()) +
            " vs feature dim " + std::to_string(d));
  std::vector<float> out(x.numel());
  std::vector<float> xhat(x.numel());
  std::vector<float> inv_sigma(rows);
  for (int64_t r = 0; r < rows; ++r) {
    const float* row = x.values().data() + r * d;
    double mu = 0.0;
    for (int64_t j = 0; j < d; ++j) mu += row[j];
    mu /= d;
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= d;
    double is = 1.0 / std::sqrt(var + eps);
    inv_sigma[r] = static_cast<float>(is);
    for (int64_t j = 0; j < d; ++j) {
      double xh = (row[j] - mu) * is;
      xhat[r * d + j] = static_cast<float>(xh);
      out[r * d + j] =
          static_cast<float>(xh * gain.values()[j] + bias.values()[j]);
    }
  }
  auto px = x.impl(), pg = gain.impl(), pb = bias.impl();
  auto xh = std::make_shared<std::vector<float>>(std::move(xhat));
  auto is = std::make_shared<std::vector<float>>(std::move(inv_sigma));
  return make_op(x.shape(), std::move(out), {x, gain, bias},
                 [px, pg, pb, xh, is, rows, d](TensorImpl* self) {
                   return [self, px, pg, pb, xh, is, rows, d] {
                     const auto& g = self->grad;
                     if (wants_grad(pg)) {
                       float* gg = grad_buffer(pg);
                       for (int64_t r = 0; r < rows; ++r)
                         for (int64_t j = 0; j < d; ++j)
                           gg[j] += g[r * d + j] * (*xh)[r * d + j];
                     }
                     if (wants_grad(pb)) {
                       float* gb = grad_buffer(pb);
                       for (int64_t r = 0; r < rows; ++r)
                         for (int64_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
                     }
                     if (wants_grad(px)) {
                       float* gx = grad_buffer(px);
                       for (int64_t r = 0; r < rows; ++r) {
                         double m1 = 0.0, m2 = 0.0;
                         for (int64_t j = 0; j < d; ++j) {
                           double dxh = (double)g[r * d + j] * pg->data[j];
                           m1 += dxh;
                           m2 += dxh * (*xh)[r * d + j];
                         }
                         m1 /= d;
                         m2 /= d;
                         for (int64_t j = 0; j < d; ++j) {
                           double dxh = (double)g[r * d + j] * pg->data[j];
                           gx[r * d + j] += static_cast<float>(
                               (*is)[r] * (dxh - m1 - (*xh)[r * d + j] * m2));
                         }
                       }
                     }
                   };
                 });
}

Tensor reshape(const Tensor& a, const Shape& shape) {
  check(shape_numel(shape) == a.numel(),
        "reshape: cannot view " + shape_str(a.shape()) + " as " +
            shape_str(shape));
  auto pa = a.impl();
  return make_op(shape, a.values(), {a}, [pa](TensorImpl* self) {
    return [self, pa] {
      if (wants_grad(pa))
        axpy(grad_buffer(pa), self->grad.data(), self->grad.size());
    };
  });
}

Tensor slice_cols(const Tensor& a, int64_t start, int64_t n) {
  check(a.rank() == 2, "slice_cols: rank-2 tensor required");
  int64_t rows = a.size(0), cols = a.size(1);
  check(start >= 0 && n >= 0 && start + n <= cols,
        "slice_cols: window [" + std::to_string(start) + "," +
            std::to_string(start + n) + ") outside " + shape_str(a.shape()));
  std::vector<float> out(rows * n);
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < n; ++c)
      out[r * n + c] = a.values()[r * cols + start + c];
  auto pa = a.impl();
  return make_op({rows, n}, std::move(out), {a},
                 [pa, rows, cols, start, n](TensorImpl* self) {
                   return [self, pa, rows, cols, start, n] {
                     if (!wants_grad(pa)) return;
                     float* ga = grad_buffer(pa);
                     for (int64_t r = 0; r < rows; ++r)
                       for (int64_t c = 0; c < n; ++c)
                         ga[r * cols + start + c] += self->grad[r * n + c];
                   };
                 });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  check(!parts.empty(), "concat_cols: no parts");
  int64_t rows = parts[0].size(0);
  int64_t cols = 0;
  for (const auto& p : parts) {
    check(p.rank() == 2 && p.size(0) == rows,
          "concat_cols: row mismatch " + shape_str(p.shape()));
    cols += p.size(1);
  }
  std::vector<float> out(rows * cols);
  int64_t off = 0;
  for (const auto& p : parts) {
    int64_t pc = p.size(1);
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t c = 0; c < pc; ++c)
        out[r * cols + off + c] = p.values()[r * pc + c];
    off += pc;
  }
  std::vector<TensorImpl*> impls;
  std::vector<int64_t> widths;
  for (const auto& p : parts) {
    impls.push_back(p.impl());
    widths.push_back(p.size(1));
  }
  return make_op({rows, cols}, std::move(out), parts,
                 [impls, widths, rows, cols](TensorImpl* self) {
                   return [self, impls, widths, rows, cols] {
                     int64_t off = 0;
                     for (size_t k = 0; k < impls.size(); ++k) {
                       int64_t pc = widths[k];
                       if (wants_grad(impls[k])) {
                         float* gp = grad_buffer(impls[k]);
                         for (int64_t r = 0; r < rows; ++r)
                           for (int64_t c = 0; c < pc; ++c)
                             gp[r * pc + c] += self->grad[r * cols + off + c];
                       }
                       off += pc;
                     }
                   };
                 });
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
  check(table.rank() == 2, "gather_rows: rank-2 table required");
  int64_t n = table.size(0), d = table.size(1);
  for (int id : ids)
    check(id >= 0 && id < n, "gather_rows: id " + std::to_string(id) +
                                 " outside table " + shape_str(table.shape()));
  int64_t rows = static_cast<int64_t>(ids.size());
  std::vector<float> out(rows * d);
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < d; ++c)
      out[r * d + c] = table.values()[ids[r] * d + c];
  auto pt = table.impl();
  return make_op({rows, d}, std::move(out), {table},
                 [pt, ids, rows, d](TensorImpl* self) {
                   return [self, pt, ids, rows, d] {
                     if (!wants_grad(pt)) return;
                     float* gt = grad_buffer(pt);
                     for (int64_t r = 0; r < rows; ++r)
                       for (int64_t c = 0; c < d; ++c)
                         gt[ids[r] * d + c] += self->grad[r * d + c];
                   };
                 });
}

Tensor sum_all(const Tensor& a) {
  double acc = 0.0;
  for (float v : a.values()) acc += v;
  auto pa = a.impl();
  Tensor out = make_op({1}, {static_cast<float>(acc)}, {a}, [pa](TensorImpl* self) {
    return [self, pa] {
      if (!wants_grad(pa)) return;
      float* ga = grad_buffer(pa);
      for (size_t i = 0; i < pa->data.size(); ++i) ga[i] += self->grad[0];
    };
  });
  out.impl()->hi = acc;
  return out;
}

Tensor mean_all(const Tensor& a) {
  check(a.numel() > 0, "mean_all: empty tensor");
  double acc = 0.0;
  for (float v : a.values()) acc += v;
  acc /= a.numel();
  auto pa = a.impl();
  float inv_n = 1.0f / a.numel();
  Tensor out = make_op({1}, {static_cast<float>(acc)}, {a},
                       [pa, inv_n](TensorImpl* self) {
                         return [self, pa, inv_n] {
                           if (!wants_grad(pa)) return;
                           float* ga = grad_buffer(pa);
                           for (size_t i = 0; i < pa->data.size(); ++i)
                             ga[i] += self->grad[0] * inv_n;
                         };
                       });
  out.impl()->hi = acc;
  return out;
}

Tensor mean_rows(const Tensor& a) {
  check(a.rank() == 2 && a.size(0) > 0, "mean_rows: non-empty rank-2 required");
  int64_t rows = a.size(0), d = a.size(1);
  std::vector<float> out(d);
  for (int64_t c = 0; c < d; ++c) {
    double acc = 0.0;
    for (int64_t r = 0; r < rows; ++r) acc += a.values()[r * d + c];
    out[c] = static_cast<float>(acc / rows);
  }
  auto pa = a.impl();
  return make_op({d}, std::move(out), {a}, [pa, rows, d](TensorImpl* self) {
    return [self, pa, rows, d] {
      if (!wants_grad(pa)) return;
      float* ga = grad_buffer(pa);
      float inv = 1.0f / rows;
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < d; ++c) ga[r * d + c] += self->grad[c] * inv;
    };
  });
}

Tensor dropout(const Tensor& a, float p, Rng& rng) {
  check(p >= 0.0f && p < 1.0f, "dropout: p must be in [0,1)");
  if (p == 0.0f) return a;
  float keep_scale = 1.0f / (1.0f - p);
  auto mask = std::make_shared<std::vector<float>>(a.numel());
  std::vector<float> out(a.numel());
  for (int64_t i = 0; i < a.numel(); ++i) {
    float m = rng.next_uniform() < p ? 0.0f : keep_scale;
    (*mask)[i] = m;
    out[i] = a.values()[i] * m;
  }
  auto pa = a.impl();
  return make_op(a.shape(), std::move(out), {a}, [pa, mask](TensorImpl* self) {
    return [self, pa, mask] {
      if (!wants_grad(pa)) return;
      float* ga = grad_buffer(pa);
      for (size_t i = 0; i < self->grad.size(); ++i)
        ga[i] += self->grad[i] * (*mask)[i];
    };
  });
}

Tensor cross_entropy_logits(const Tensor& logits, const std::vector<int>& targets,
                            int ignore_id) {
  check(logits.rank() == 2, "cross_entropy: rank-2 logits required, got " +
                                shape_str(logits.shape()));
  int64_t rows = logits.size(0), vocab = logits.size(1);
  check(static_cast<int64_t>(targets.size()) == rows,
        "cross_entropy: " + std::to_string(targets.size()) + " targets vs " +
            std::to_string(rows) + " logit rows");
  int64_t kept = 0;
  for (int t : targets) {
    if (t == ignore_id) continue;
    check(t >= 0 && t < vocab, "cross_entropy: target " + std::to_string(t) +
                                   " outside vocab " + std::to_string(vocab));
    ++kept;
  }
  check(kept > 0, "cross_entropy: empty loss (all positions ignored)");
  double acc = 0.0;
  for (int64_t r = 0; r < rows; ++r) {
    if (targets[r] == ignore_id) continue;
    const float* row = logits.values().data() + r * vocab;
    double mx = row[0];
    for (int64_t c = 1; c < vocab; ++c) mx = std::max(mx, (double)row[c]);
    double denom = 0.0;
    for (int64_t c = 0; c < vocab; ++c) denom += std::exp(row[c] - mx);
    acc += mx + std::log(denom) - row[targets[r]];
  }
  acc /= kept;
  auto pl = logits.impl();
  Tensor out = make_op({1}, {static_cast<float>(acc)}, {logits},
                 [pl, targets, ignore_id, rows, vocab, kept](TensorImpl* self) {
                   return [self, pl, targets, ignore_id, rows, vocab, kept] {
                     if (!wants_grad(pl)) return;
                     float* gl = grad_buffer(pl);
                     float gout = self->grad[0] / kept;
                     for (int64_t r = 0; r < rows; ++r) {
                       if (targets[r] == ignore_id) continue;
                       const float* row = pl->data.data() + r * vocab;
                       double mx = row[0];
                       for (int64_t c = 1; c < vocab; ++c)
                         mx = std::max(mx, (double)row[c]);
                       double denom = 0.0;
                       for (int64_t c = 0; c < vocab; ++c)
                         denom += std::exp(row[c] - mx);
                       for (int64_t c = 0; c < vocab; ++c) {
                         double p = std::exp(row[c] - mx) / denom;
                         double grad = p - (c == targets[r] ? 1.0 : 0.0);
                         gl[r * vocab + c] += static_cast<float>(grad * gout);
                       }
                     }
                   };
                 });
  out.impl()->hi = acc;
  return out;
}

Tensor bce_with_logits(const Tensor& logits, const std::vector<float>& targets) {
  check(logits.numel() == static_cast<int64_t>(targets.size()),
        "bce: " + std::to_string(targets.size()) + " targets vs " +
            std::to_string(logits.numel()) + " logits");
  check(!targets.empty(), "bce: empty input");
  int64_t n = logits.numel();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    double z = logits.values()[i], y = targets[i];
    acc += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  acc /= n;
  auto pl = logits.impl();
  Tensor out = make_op({1}, {static_cast<float>(acc)}, {logits},
                 [pl, targets, n](TensorImpl* self) {
                   return [self, pl, targets, n] {
                     if (!wants_grad(pl)) return;
                     float* gl = grad_buffer(pl);
                     float gout = self->grad[0] / n;
                     for (int64_t i = 0; i < n; ++i) {
                       double z = pl->data[i];
                       double s = z >= 0 ? 1.0 / (1.0 + std::exp(-z))
                                         : std::exp(z) / (1.0 + std::exp(z));
                       gl[i] += static_cast<float>((s - targets[i]) * gout);
                     }
                   };
                 });
  out.impl()->hi = acc;
  return out;
}

double scalar_value(const Tensor& t) {
  if (t.numel() == 1 && !std::isnan(t.impl()->hi)) return t.impl()->hi;
  return t.item();
}

Im2ColPlan Im2ColPlan::make(int channels, int height, int width, int kernel,
                            int stride, int pad) {
  Im2ColPlan plan;
  plan.channels = channels;
  plan.height = height;
  plan.width = width;
  plan.kernel = kernel;
  plan.stride = stride;
  plan.pad = pad;
  plan.out_h = (height + 2 * pad - kernel) / stride + 1;
  plan.out_w = (width + 2 * pad - kernel) / stride + 1;
  plan.src_index.reserve(static_cast<size_t>(plan.out_h) * plan.out_w *
                         channels * kernel * kernel);
  for (int oy = 0; oy < plan.out_h; ++oy)
    for (int ox = 0; ox < plan.out_w; ++ox)
      for (int c = 0; c < channels; ++c)
        for (int ky = 0; ky < kernel; ++ky)
          for (int kx = 0; kx < kernel; ++kx) {
            int y = oy * stride - pad + ky;
            int x = ox * stride - pad + kx;
            bool in = y >= 0 && y < height && x >= 0 && x < width;
            plan.src_index.push_back(
                in ? (static_cast<int64_t>(c) * height + y) * width + x : -1);
          }
  return plan;
}

Tensor im2col(const Tensor& x, const Im2ColPlan& plan) {
  check(x.rank() == 3 && x.size(0) == plan.channels &&
            x.size(1) == plan.height && x.size(2) == plan.width,
        "im2col: input " + shape_str(x.shape()) + " does not match plan");
  int64_t rows = static_cast<int64_t>(plan.out_h) * plan.out_w;
  int64_t cols = static_cast<int64_t>(plan.channels) * plan.kernel * plan.kernel;
  std::vector<float> out(rows * cols);
  for (size_t i = 0; i < plan.src_index.size(); ++i) {
    int64_t src = plan.src_index[i];
    out[i] = src < 0 ? 0.0f : x.values()[src];
  }
  auto px = x.impl();
  auto idx = std::make_shared<std::vector<int64_t>>(plan.src_index);
  return make_op({rows, cols}, std::move(out), {x}, [px, idx](TensorImpl* self) {
    return [self, px, idx] {
      if (!wants_grad(px)) return;
      float* gx = grad_buffer(px);
      for (size_t i = 0; i < idx->size(); ++i)
        if ((*idx)[i] >= 0) gx[(*idx)[i]] += self->grad[i];
    };
  });
}

FiniteDiffReport finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                                   const Tensor& x, double h, double tol) {
  check(h > 0, "finite_diff_check: h must be positive");
  Tensor xv = Tensor::from(x.shape(), x.values(), true);
  Tensor loss = f(xv);
  check(loss.numel() == 1, "finite_diff_check: f must return a scalar");
  {
    Tensor again = f(xv);
    if (scalar_value(again) != scalar_value(loss))
      throw std::runtime_error(
          "finite_diff_check: f is not deterministic (two calls differ)");
  }
  backward(loss);
  std::vector<float> analytic(x.numel(), 0.0f);
  if (const auto* g = xv.grad()) analytic = *g;

  double max_rel = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) {
    auto eval_at = [&](float at) {
      std::vector<float> data = x.values();
      data[i] = at;
      NoGradScope ng;
      return scalar_value(f(Tensor::from(x.shape(), std::move(data))));
    };
    // Perturbed points round to float32, so divide by the step actually
    // applied rather than the nominal 2h.
    float xp = static_cast<float>(x.values()[i] + h);
    float xm = static_cast<float>(x.values()[i] - h);
    double numeric = (eval_at(xp) - eval_at(xm)) /
                     (static_cast<double>(xp) - static_cast<double>(xm));
    double a = analytic[i];
    double rel = std::abs(a - numeric) /
                 std::max({1.0, std::abs(a), std::abs(numeric)});
    max_rel = std::max(max_rel, rel);
  }
  return {max_rel, max_rel < tol};
}

}  // namespace capdet
