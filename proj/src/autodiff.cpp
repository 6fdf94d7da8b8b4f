#include "met/autodiff.hpp"

#include <cmath>
#include <cstring>
#include <numbers>
#include <utility>

#include "met/kernels.hpp"

namespace met {

std::string nonlinearity_name(Nonlinearity n) {
  return n == Nonlinearity::gelu ? "gelu" : "tanh";
}

Nonlinearity nonlinearity_from_name(const std::string& s) {
  if (s == "tanh") return Nonlinearity::tanh_fn;
  if (s == "gelu") return Nonlinearity::gelu;
  throw std::invalid_argument("unknown nonlinearity: " + s);
}

namespace {
[[noreturn]] void shape_fail(const char* op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}
}  // namespace

void Tape::check(Handle h, const char* op) const {
  if (!h.valid() || static_cast<size_t>(h.idx) >= slots_.size()) {
    shape_fail(op, "invalid handle");
  }
}

Handle Tape::push_value(Tensor t, bool requires_grad) {
  Slot s;
  s.own = std::move(t);
  s.requires_grad = grad_enabled_ && requires_grad;
  slots_.push_back(std::move(s));
  return Handle{static_cast<int32_t>(slots_.size() - 1)};
}

void Tape::push_node(const char* op, std::function<void()> back) {
  nodes_.push_back(Node{op, std::move(back)});
}

Tensor& Tape::grad_buf(Handle h) {
  Slot& s = slot(h);
  if (!s.has_grad) {
    s.grad = Tensor(s.val().shape());
    s.has_grad = true;
  }
  return s.grad;
}

Handle Tape::leaf(const Tensor& t) {
  const auto it = leaf_cache_.find(&t);
  if (it != leaf_cache_.end()) return Handle{it->second};
  Slot s;
  s.ref = &t;
  s.requires_grad = grad_enabled_ && t.requires_grad;
  slots_.push_back(std::move(s));
  const int32_t idx = static_cast<int32_t>(slots_.size() - 1);
  leaf_cache_.emplace(&t, idx);
  return Handle{idx};
}

Handle Tape::constant(Tensor t) { return push_value(std::move(t), false); }

std::optional<Handle> Tape::find_leaf(const Tensor& t) const {
  const auto it = leaf_cache_.find(&t);
  if (it == leaf_cache_.end()) return std::nullopt;
  return Handle{it->second};
}

const Tensor& Tape::value(Handle h) const {
  check(h, "value");
  return slot(h).val();
}

const Tensor& Tape::grad(Handle h) const {
  check(h, "grad");
  const Slot& s = slot(h);
  if (!s.has_grad) {
    throw std::logic_error("grad(): no gradient on this slot (backward not run, "
                           "or slot does not require grad)");
  }
  return s.grad;
}

bool Tape::has_grad(Handle h) const {
  check(h, "has_grad");
  return slot(h).has_grad;
}

Handle Tape::matmul(Handle a, Handle b) {
  check(a, "matmul");
  check(b, "matmul");
  const Tensor& av = slot(a).val();
  const Tensor& bv = slot(b).val();
  if (av.dim() != 2 || bv.dim() != 2 || av.cols() != bv.rows()) {
    shape_fail("matmul", shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  }
  const int64_t m = av.rows(), k = av.cols(), n = bv.cols();
  Tensor out({m, n});
  kernels::gemm_acc(out.data(), av.data(), bv.data(), m, n, k, false, false);
  const Handle o = push_value(std::move(out), rg(a) || rg(b));
  if (slot(o).requires_grad) {
    push_node("matmul", [this, a, b, o, m, n, k] {
      if (!slot(o).has_grad) return;
      const Tensor& go = slot(o).grad;
      if (slot(a).requires_grad) {
        kernels::gemm_acc(grad_buf(a).data(), go.data(), slot(b).val().data(),
                          m, k, n, false, true);
      }
      if (slot(b).requires_grad) {
        kernels::gemm_acc(grad_buf(b).data(), slot(a).val().data(), go.data(),
                          k, n, m, true, false);
      }
    });
  }
  return o;
}

Handle Tape::add(Handle a, Handle b) {
  check(a, "add");
  check(b, "add");
  const Tensor& av = slot(a).val();
  const Tensor& bv = slot(b).val();
  if (!av.same_shape(bv)) {
    shape_fail("add", shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  }
  Tensor out(av.shape());
  kernels::active().add(out.data(), av.data(), bv.data(), static_cast<size_t>(av.numel()));
  const Handle o = push_value(std::move(out), rg(a) || rg(b));
  if (slot(o).requires_grad) {
    push_node("add", [this, a, b, o] {
      if (!slot(o).has_grad) return;
      const Tensor& go = slot(o).grad;
      const size_t n = static_cast<size_t>(go.numel());
      if (slot(a).requires_grad) kernels::active().acc(grad_buf(a).data(), go.data(), n);
      if (slot(b).requires_grad) kernels::active().acc(grad_buf(b).data(), go.data(), n);
    });
  }
  return o;
}

Handle Tape::add_bias(Handle x, Handle b) {
  check(x, "add_bias");
  check(b, "add_bias");
  const Tensor& xv = slot(x).val();
  const Tensor& bv = slot(b).val();
  if (xv.dim() != 2 || bv.dim() != 1 || bv.numel() != xv.cols()) {
    shape_fail("add_bias", shape_str(xv.shape()) + " + " + shape_str(bv.shape()));
  }
  const int64_t m = xv.rows(), n = xv.cols();
  Tensor out({m, n});
  for (int64_t i = 0; i < m; ++i) {
    kernels::active().add(out.data() + i * n, xv.data() + i * n, bv.data(),
                          static_cast<size_t>(n));
  }
  const Handle o = push_value(std::move(out), rg(x) || rg(b));
  if (slot(o).requires_grad) {
    push_node("add_bias", [this, x, b, o, m, n] {
      if (!slot(o).has_grad) return;
      const Tensor& go = slot(o).grad;
      if (slot(x).requires_grad) {
        kernels::active().acc(grad_buf(x).data(), go.data(), static_cast<size_t>(m * n));
      }
      if (slot(b).requires_grad) {
        Tensor& gb = grad_buf(b);
        for (int64_t i = 0; i < m; ++i) {
          kernels::active().acc(gb.data(), go.data() + i * n, static_cast<size_t>(n));
        }
      }
    });
  }
  return o;
}

Handle Tape::sub(Handle a, Handle b) {
  check(a, "sub");
  check(b, "sub");
  const Tensor& av = slot(a).val();
  const Tensor& bv = slot(b).val();
  if (!av.same_shape(bv)) {
    shape_fail("sub", shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  }
  Tensor out(av.shape());
  kernels::active().sub(out.data(), av.data(), bv.data(), static_cast<size_t>(av.numel()));
  const Handle o = push_value(std::move(out), rg(a) || rg(b));
  if (slot(o).requires_grad) {
    push_node("sub", [this, a, b, o] {
      if (!slot(o).has_grad) return;
      const Tensor& go = slot(o).grad;
      const size_t n = static_cast<size_t>(go.numel());
      if (slot(a).requires_grad) kernels::active().acc(grad_buf(a).data(), go.data(), n);
      if (slot(b).requires_grad) kernels::active().axpy(grad_buf(b).data(), -1.0, go.data(), n);
    });
  }
  return o;
}

Handle Tape::mul(Handle a, Handle b) {
  check(a, "mul");
  check(b, "mul");
  const Tensor& av = slot(a).val();
  const Tensor& bv = slot(b).val();
  if (!av.same_shape(bv)) {
    shape_fail("mul", shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  }
  Tensor out(av.shape());
  kernels::active().mul(out.data(), av.data(), bv.data(), static_cast<size_t>(av.numel()));
  const Handle o = push_value(std::move(out), rg(a) || rg(b));
  if (slot(o).requires_grad) {
    push_node("mul", [this, a, b, o] {
      if (!slot(o).has_grad) return;
      const Tensor& go = slot(o).grad;
      const int64_t n = go.numel();
      if (slot(a).requires_grad) {
        Tensor& ga = grad_buf(a);
        const Tensor& bv2 = slot(b).val();
        for (int64_t i = 0; i < n; ++i) ga[i] += go[i] * bv2[i];
      }
      if (slot(b).requires_grad) {
        Tensor& gb = grad_buf(b);
        const Tensor& av2 = slot(a).val();
        for (int64_t i = 0; i < n; ++i) gb[i] += go[i] * av2[i];
      }
    });
  }
  return o;
}

Handle Tape::scale(Handle x, double c) {
  check(x, "scale");
  const Tensor& xv = slot(x).val();
  Tensor out(xv.shape());
  kernels::active().scale(out.data(), xv.data(), c, static_cast<size_t>(xv.numel()));
  const Handle o = push_value(std::move(out), rg(x));
  if (slot(o).requires_grad) {
    push_node("scale", [this, x, o, c] {
      if (!slot(o).has_grad) return;
      const Tensor& go = slot(o).grad;
      kernels::active().axpy(grad_buf(x).data(), c, go.data(), static_cast<size_t>(go.numel()));
    });
  }
  return o;
}

Handle Tape::embedding(Handle table, std::vector<int64_t> ids) {
  check(table, "embedding");
  const Tensor& tv = slot(table).val();
  if (tv.dim() != 2) shape_fail("embedding", "table must be 2-D, got " + shape_str(tv.shape()));
  const int64_t v = tv.rows(), d = tv.cols();
  for (const int64_t id : ids) {
    if (id < 0 || id >= v) {
      shape_fail("embedding", "id " + std::to_string(id) + " outside table with " +
                                  std::to_string(v) + " rows");
    }
  }
  const int64_t n = static_cast<int64_t>(ids.size());
  Tensor out({n, d});
  for (int64_t i = 0; i < n; ++i) {
    std::memcpy(out.data() + i * d, tv.data() + ids[static_cast<size_t>(i)] * d,
                static_cast<size_t>(d) * sizeof(double));
  }
  const Handle o = push_value(std::move(out), rg(table));
  if (slot(o).requires_grad) {
    push_node("embedding", [this, table, o, d, ids = std::move(ids)] {
      if (!slot(o).has_grad) return;
      const Tensor& go = slot(o).grad;
      Tensor& gt = grad_buf(table);
      for (size_t i = 0; i < ids.size(); ++i) {
        kernels::active().acc(gt.data() + ids[i] * d,
                              go.data() + static_cast<int64_t>(i) * d,
                              static_cast<size_t>(d));
      }
    });
  }
  return o;
}

namespace {
// Softmax of row[0, len) into out; out[len, n) untouched.
void softmax_row(const double* row, double* out, int64_t len) {
  double mx = row[0];
  for (int64_t j = 1; j < len; ++j) mx = std::max(mx, row[j]);
  double sum = 0.0;
  for (int64_t j = 0; j < len; ++j) {
    out[j] = std::exp(row[j] - mx);
    sum += out[j];
  }
  const double inv = 1.0 / sum;
  for (int64_t j = 0; j < len; ++j) out[j] *= inv;
}

void softmax_backward_row(const double* y, const double* gy, double* gx, int64_t len) {
  double s = 0.0;
  for (int64_t j = 0; j < len; ++j) s += gy[j] * y[j];
  for (int64_t j = 0; j < len; ++j) gx[j] += y[j] * (gy[j] - s);
}
}  // namespace

Handle Tape::softmax(Handle x) {
  check(x, "softmax");
  const Tensor& xv = slot(x).val();
  if (xv.dim() != 2) shape_fail("softmax", "expected 2-D, got " + shape_str(xv.shape()));
  const int64_t m = xv.rows(), n = xv.cols();
  Tensor out({m, n});
  for (int64_t i = 0; i < m; ++i) softmax_row(xv.data() + i * n, out.data() + i * n, n);
  const Handle o = push_value(std::move(out), rg(x));
  if (slot(o).requires_grad) {
    push_node("softmax", [this, x, o, m, n] {
      if (!slot(o).has_grad) return;
      const Tensor& y = slot(o).val();
      const Tensor& go = slot(o).grad;
      Tensor& gx = grad_buf(x);
      for (int64_t i = 0; i < m; ++i) {
        softmax_backward_row(y.data() + i * n, go.data() + i * n, gx.data() + i * n, n);
      }
    });
  }
  return o;
}

Handle Tape::causal_softmax(Handle x, int64_t offset) {
  check(x, "causal_softmax");
  const Tensor& xv = slot(x).val();
  if (xv.dim() != 2) shape_fail("causal_softmax", "expected 2-D, got " + shape_str(xv.shape()));
  if (offset < 0) shape_fail("causal_softmax", "negative offset");
  const int64_t m = xv.rows(), n = xv.cols();
  if (offset + 1 > n) {
    shape_fail("causal_softmax", "offset " + std::to_string(offset) +
                                     " leaves row 0 without valid columns in " +
                                     shape_str(xv.shape()));
  }
  Tensor out({m, n});
  for (int64_t i = 0; i < m; ++i) {
    const int64_t len = std::min<int64_t>(n, offset + i + 1);
    softmax_row(xv.data() + i * n, out.data() + i * n, len);
  }
  const Handle o = push_value(std::move(out), rg(x));
  if (slot(o).requires_grad) {
    push_node("causal_softmax", [this, x, o, m, n, offset] {
      if (!slot(o).has_grad) return;
      const Tensor& y = slot(o).val();
      const Tensor& go = slot(o).grad;
      Tensor& gx = grad_buf(x);
      for (int64_t i = 0; i < m; ++i) {
        const int64_t len = std::min<int64_t>(n, offset + i + 1);
        softmax_backward_row(y.data() + i * n, go.data() + i * n, gx.data() + i * n, len);
      }
    });
  }
  return o;
}

Handle Tape::layer_norm(Handle x, Handle gain, Handle bias, double eps) {
  check(x, "layer_norm");
  check(gain, "layer_norm");
  check(bias, "layer_norm");
  const Tensor& xv = slot(x).val();
  const Tensor& gv = slot(gain).val();
  const Tensor& bv = slot(bias).val();
  if (xv.dim() != 2 || gv.dim() != 1 || bv.dim() != 1 ||
      gv.numel() != xv.cols() || bv.numel() != xv.cols()) {
    shape_fail("layer_norm", shape_str(xv.shape()) + " with gain " + shape_str(gv.shape()) +
                                 ", bias " + shape_str(bv.shape()));
  }
  const int64_t m = xv.rows(), n = xv.cols();
  Tensor out({m, n});
  Tensor xhat({m, n});
  Tensor inv_std({m});
  for (int64_t i = 0; i < m; ++i) {
    const double* row = xv.data() + i * n;
    double mean = 0.0;
    for (int64_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (int64_t j = 0; j < n; ++j) {
      const double d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[i] = inv;
    for (int64_t j = 0; j < n; ++j) {
      const double xh = (row[j] - mean) * inv;
      xhat.at(i, j) = xh;
      out.at(i, j) = xh * gv[j] + bv[j];
    }
  }
  const Handle o = push_value(std::move(out), rg(x) || rg(gain) || rg(bias));
  if (slot(o).requires_grad) {
    push_node("layer_norm",
              [this, x, gain, bias, o, m, n, xhat = std::move(xhat),
               inv_std = std::move(inv_std)] {
      if (!slot(o).has_grad) return;
      const Tensor& go = slot(o).grad;
      const Tensor& gv2 = slot(gain).val();
      if (slot(gain).requires_grad) {
        Tensor& gg = grad_buf(gain);
        for (int64_t i = 0; i < m; ++i) {
          for (int64_t j = 0; j < n; ++j) gg[j] += go.at(i, j) * xhat.at(i, j);
        }
      }
      if (slot(bias).requires_grad) {
        Tensor& gb = grad_buf(bias);
        for (int64_t i = 0; i < m; ++i) {
          for (int64_t j = 0; j < n; ++j) gb[j] += go.at(i, j);
        }
      }
      if (slot(x).requires_grad) {
        Tensor& gx = grad_buf(x);
        for (int64_t i = 0; i < m; ++i) {
          double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
          for (int64_t j = 0; j < n; ++j) {
            const double dxh = go.at(i, j) * gv2[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat.at(i, j);
          }
          mean_dxhat /= static_cast<double>(n);
          mean_dxhat_xhat /= static_cast<double>(n);
          for (int64_t j = 0; j < n; ++j) {
            const double dxh = go.at(i, j) * gv2[j];
            gx.at(i, j) += inv_std[i] * (dxh - mean_dxhat - xhat.at(i, j) * mean_dxhat_xhat);
          }
        }
      }
    });
  }
  return o;
}

Handle Tape::activation(Handle x, Nonlinearity nl) {
  check(x, "activation");
  const Tensor& xv = slot(x).val();
  Tensor out(xv.shape());
  const int64_t n = xv.numel();
  if (nl == Nonlinearity::tanh_fn) {
    for (int64_t i = 0; i < n; ++i) out[i] = std::tanh(xv[i]);
  } else {
    for (int64_t i = 0; i < n; ++i) {
      out[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] / std::numbers::sqrt2));
    }
  }
  const Handle o = push_value(std::move(out), rg(x));
  if (slot(o).requires_grad) {
    push_node("activation", [this, x, o, nl, n] {
      if (!slot(o).has_grad) return;
      const Tensor& go = slot(o).grad;
      Tensor& gx = grad_buf(x);
      if (nl == Nonlinearity::tanh_fn) {
        const Tensor& y = slot(o).val();
        for (int64_t i = 0; i < n; ++i) gx[i] += go[i] * (1.0 - y[i] * y[i]);
      } else {
        const Tensor& xv2 = slot(x).val();
        constexpr double inv_sqrt_2pi = 0.3989422804014327;
        for (int64_t i = 0; i < n; ++i) {
          const double xi = xv2[i];
          const double cdf = 0.5 * (1.0 + std::erf(xi / std::numbers::sqrt2));
          const double pdf = inv_sqrt_2pi * std::exp(-0.5 * xi * xi);
          gx[i] += go[i] * (cdf + xi * pdf);
        }
      }
    });
  }
  return o;
}

Handle Tape::dropout_apply(Handle x, Tensor mask) {
  check(x, "dropout_apply");
  const Tensor& xv = slot(x).val();
  if (!xv.same_shape(mask)) {
    shape_fail("dropout_apply", shape_str(xv.shape()) + " vs mask " + shape_str(mask.shape()));
  }
  Tensor out(xv.shape());
  kernels::active().mul(out.data(), xv.data(), mask.data(), static_cast<size_t>(xv.numel()));
  const Handle o = push_value(std::move(out), rg(x));
  if (slot(o).requires_grad) {
    push_node("dropout_apply", [this, x, o, mask = std::move(mask)] {
      if (!slot(o).has_grad) return;
      const Tensor& go = slot(o).grad;
      Tensor& gx = grad_buf(x);
      const int64_t n = go.numel();
      for (int64_t i = 0; i < n; ++i) gx[i] += go[i] * mask[i];
    });
  }
  return o;
}

Handle Tape::cross_entropy_sum(Handle logits, std::vector<int64_t> targets) {
  check(logits, "cross_entropy");
  const Tensor& zv = slot(logits).val();
  if (zv.dim() != 2) shape_fail("cross_entropy", "logits must be 2-D, got " + shape_str(zv.shape()));
  const int64_t m = zv.rows(), v = zv.cols();
  if (static_cast<int64_t>(targets.size()) != m) {
    shape_fail("cross_entropy", std::to_string(targets.size()) + " targets for " +
                                    std::to_string(m) + " logit rows");
  }
  for (const int64_t t : targets) {
    if (t >= v) {
      shape_fail("cross_entropy", "target " + std::to_string(t) + " outside vocab of " +
                                      std::to_string(v));
    }
  }
  Tensor probs({m, v});
  double total = 0.0;
  for (int64_t i = 0; i < m; ++i) {
    const int64_t t = targets[static_cast<size_t>(i)];
    if (t < 0) continue;
    const double* row = zv.data() + i * v;
    double* prow = probs.data() + i * v;
    softmax_row(row, prow, v);
    total += -std::log(prow[t]);
  }
  const Handle o = push_value(Tensor::scalar(total), rg(logits));
  if (slot(o).requires_grad) {
    push_node("cross_entropy",
              [this, logits, o, m, v, probs = std::move(probs), targets = std::move(targets)] {
      if (!slot(o).has_grad) return;
      const double g = slot(o).grad.item();
      Tensor& gz = grad_buf(logits);
      for (int64_t i = 0; i < m; ++i) {
        const int64_t t = targets[static_cast<size_t>(i)];
        if (t < 0) continue;
        const double* prow = probs.data() + i * v;
        double* grow = gz.data() + i * v;
        for (int64_t j = 0; j < v; ++j) grow[j] += g * prow[j];
        grow[t] -= g;
      }
    });
  }
  return o;
}

Handle Tape::sum_squares(Handle x) {
  check(x, "sum_squares");
  const Tensor& xv = slot(x).val();
  double total = 0.0;
  const int64_t n = xv.numel();
  for (int64_t i = 0; i < n; ++i) total += xv[i] * xv[i];
  const Handle o = push_value(Tensor::scalar(total), rg(x));
  if (slot(o).requires_grad) {
    push_node("sum_squares", [this, x, o] {
      if (!slot(o).has_grad) return;
      const double g = slot(o).grad.item();
      const Tensor& xv2 = slot(x).val();
      kernels::active().axpy(grad_buf(x).data(), 2.0 * g, xv2.data(),
                             static_cast<size_t>(xv2.numel()));
    });
  }
  return o;
}

Handle Tape::sum_all(Handle x) {
  check(x, "sum_all");
  const Tensor& xv = slot(x).val();
  double total = 0.0;
  const int64_t n = xv.numel();
  for (int64_t i = 0; i < n; ++i) total += xv[i];
  const Handle o = push_value(Tensor::scalar(total), rg(x));
  if (slot(o).requires_grad) {
    push_node("sum_all", [this, x, o] {
      if (!slot(o).has_grad) return;
      const double g = slot(o).grad.item();
      Tensor& gx = grad_buf(x);
      const int64_t n2 = gx.numel();
      for (int64_t i = 0; i < n2; ++i) gx[i] += g;
    });
  }
  return o;
}

Handle Tape::concat_rows(Handle a, Handle b) {
  check(a, "concat_rows");
  check(b, "concat_rows");
  const Tensor& av = slot(a).val();
  const Tensor& bv = slot(b).val();
  if (av.dim() != 2 || bv.dim() != 2 || av.cols() != bv.cols()) {
    shape_fail("concat_rows", shape_str(av.shape()) + " | " + shape_str(bv.shape()));
  }
  const int64_t m1 = av.rows(), m2 = bv.rows(), n = av.cols();
  Tensor out({m1 + m2, n});
  std::memcpy(out.data(), av.data(), static_cast<size_t>(m1 * n) * sizeof(double));
  std::memcpy(out.data() + m1 * n, bv.data(), static_cast<size_t>(m2 * n) * sizeof(double));
  const Handle o = push_value(std::move(out), rg(a) || rg(b));
  if (slot(o).requires_grad) {
    push_node("concat_rows", [this, a, b, o, m1, m2, n] {
      if (!slot(o).has_grad) return;
      const Tensor& go = slot(o).grad;
      if (slot(a).requires_grad) {
        kernels::active().acc(grad_buf(a).data(), go.data(), static_cast<size_t>(m1 * n));
      }
      if (slot(b).requires_grad) {
        kernels::active().acc(grad_buf(b).data(), go.data() + m1 * n,
                              static_cast<size_t>(m2 * n));
      }
    });
  }
  return o;
}

Handle Tape::concat_cols(Handle a, Handle b) {
  check(a, "concat_cols");
  check(b, "concat_cols");
  const Tensor& av = slot(a).val();
  const Tensor& bv = slot(b).val();
  if (av.dim() != 2 || bv.dim() != 2 || av.rows() != bv.rows()) {
    shape_fail("concat_cols", shape_str(av.shape()) + " | " + shape_str(bv.shape()));
  }
  const int64_t m = av.rows(), n1 = av.cols(), n2 = bv.cols();
  Tensor out({m, n1 + n2});
  for (int64_t i = 0; i < m; ++i) {
    std::memcpy(out.data() + i * (n1 + n2), av.data() + i * n1,
                static_cast<size_t>(n1) * sizeof(double));
    std::memcpy(out.data() + i * (n1 + n2) + n1, bv.data() + i * n2,
                static_cast<size_t>(n2) * sizeof(double));
  }
  const Handle o = push_value(std::move(out), rg(a) || rg(b));
  if (slot(o).requires_grad) {
    push_node("concat_cols", [this, a, b, o, m, n1, n2] {
      if (!slot(o).has_grad) return;
      const Tensor& go = slot(o).grad;
      if (slot(a).requires_grad) {
        Tensor& ga = grad_buf(a);
        for (int64_t i = 0; i < m; ++i) {
          kernels::active().acc(ga.data() + i * n1, go.data() + i * (n1 + n2),
                                static_cast<size_t>(n1));
        }
      }
      if (slot(b).requires_grad) {
        Tensor& gb = grad_buf(b);
        for (int64_t i = 0; i < m; ++i) {
          kernels::active().acc(gb.data() + i * n2, go.data() + i * (n1 + n2) + n1,
                                static_cast<size_t>(n2));
        }
      }
    });
  }
  return o;
}

Handle Tape::slice_rows(Handle x, int64_t r0, int64_t r1) {
  check(x, "slice_rows");
  const Tensor& xv = slot(x).val();
  if (xv.dim() != 2 || r0 < 0 || r1 > xv.rows() || r0 >= r1) {
    shape_fail("slice_rows", "rows [" + std::to_string(r0) + "," + std::to_string(r1) +
                                 ") of " + shape_str(xv.shape()));
  }
  const int64_t n = xv.cols();
  Tensor out({r1 - r0, n});
  std::memcpy(out.data(), xv.data() + r0 * n,
              static_cast<size_t>((r1 - r0) * n) * sizeof(double));
  const Handle o = push_value(std::move(out), rg(x));
  if (slot(o).requires_grad) {
    push_node("slice_rows", [this, x, o, r0, r1, n] {
      if (!slot(o).has_grad) return;
      kernels::active().acc(grad_buf(x).data() + r0 * n, slot(o).grad.data(),
                            static_cast<size_t>((r1 - r0) * n));
    });
  }
  return o;
}

Handle Tape::slice_cols(Handle x, int64_t c0, int64_t c1) {
  check(x, "slice_cols");
  const Tensor& xv = slot(x).val();
  if (xv.dim() != 2 || c0 < 0 || c1 > xv.cols() || c0 >= c1) {
    shape_fail("slice_cols", "cols [" + std::to_string(c0) + "," + std::to_string(c1) +
                                 ") of " + shape_str(xv.shape()));
  }
  const int64_t m = xv.rows(), n = xv.cols(), w = c1 - c0;
  Tensor out({m, w});
  for (int64_t i = 0; i < m; ++i) {
    std::memcpy(out.data() + i * w, xv.data() + i * n + c0,
                static_cast<size_t>(w) * sizeof(double));
  }
  const Handle o = push_value(std::move(out), rg(x));
  if (slot(o).requires_grad) {
    push_node("slice_cols", [this, x, o, c0, m, n, w] {
      if (!slot(o).has_grad) return;
      const Tensor& go = slot(o).grad;
      Tensor& gx = grad_buf(x);
      for (int64_t i = 0; i < m; ++i) {
        kernels::active().acc(gx.data() + i * n + c0, go.data() + i * w,
                              static_cast<size_t>(w));
      }
    });
  }
  return o;
}

Handle Tape::transpose(Handle x) {
  check(x, "transpose");
  const Tensor& xv = slot(x).val();
  if (xv.dim() != 2) shape_fail("transpose", "expected 2-D, got " + shape_str(xv.shape()));
  const int64_t m = xv.rows(), n = xv.cols();
  Tensor out({n, m});
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) out.at(j, i) = xv.at(i, j);
  }
  const Handle o = push_value(std::move(out), rg(x));
  if (slot(o).requires_grad) {
    push_node("transpose", [this, x, o, m, n] {
      if (!slot(o).has_grad) return;
      const Tensor& go = slot(o).grad;
      Tensor& gx = grad_buf(x);
      for (int64_t j = 0; j < n; ++j) {
        for (int64_t i = 0; i < m; ++i) gx.at(i, j) += go.at(j, i);
      }
    });
  }
  return o;
}

Handle Tape::detach(Handle x) {
  check(x, "detach");
  return push_value(slot(x).val(), false);
}

void Tape::backward(Handle loss) {
  check(loss, "backward");
  if (!slot(loss).val().is_scalar()) {
    throw ShapeError("backward: loss must be scalar, got " +
                     shape_str(slot(loss).val().shape()));
  }
  if (!grad_enabled_) throw std::logic_error("backward: tape built with gradients disabled");
  if (backward_done_) throw std::logic_error("backward: already run on this tape");
  backward_done_ = true;
  if (slot(loss).requires_grad) {
    grad_buf(loss)[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->back();
  }
  // Parameters that never received a contribution get exact zeros.
  for (auto& s : slots_) {
    if (s.requires_grad && !s.has_grad) {
      s.grad = Tensor(s.val().shape());
      s.has_grad = true;
    }
  }
}

}  // namespace met
