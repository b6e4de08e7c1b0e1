// SPDX-License-Identifier: Apache-2.0
#include "tokenmark/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <fmt/format.h>

#include "tokenmark/errors.hpp"

namespace tokenmark {

const Tensor& Var::value() const { return tape->value(*this); }

Var Tape::constant(Tensor value) {
  Node n;
  n.owned = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::parameter(Tensor& t) {
  Node n;
  n.ref = &t;
  if (t.requires_grad()) {
    n.param = &t;
    n.needs_grad = true;
  }
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::parameter(const Tensor& t) {
  Node n;
  n.ref = &t;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

const Tensor& Tape::value(Var v) const {
  const Node& n = nodes_[v.id];
  return n.ref ? *n.ref : n.owned;
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  Node n;
  n.owned = std::move(value);
  for (Var in : inputs) n.needs_grad = n.needs_grad || nodes_[in.id].needs_grad;
  if (n.needs_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

std::span<float> Tape::grad_of(Var v) {
  Node& n = nodes_[v.id];
  if (n.grad.empty()) n.grad.assign(value(v).size(), 0.0f);
  return n.grad;
}

void Tape::backward(Var loss) {
  if (value(loss).size() != 1) {
    throw ContractViolation("backward() needs a scalar loss, got shape " + shape_string(value(loss).shape()));
  }
  for (auto& n : nodes_) n.grad.clear();
  if (!nodes_[loss.id].needs_grad) return;
  grad_of(loss)[0] = 1.0f;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.needs_grad || n.grad.empty()) continue;
    if (n.backward) {
      n.backward(*this, n.grad);
    } else if (n.param) {
      auto g = n.param->grad();
      for (std::size_t j = 0; j < g.size(); ++j) g[j] += n.grad[j];
    }
  }
}

namespace {

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(fmt::format("{}: expected a matrix, got {}", op, shape_string(t.shape())));
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(fmt::format("{}: shape {} vs {}", op, shape_string(a.shape()), shape_string(b.shape())));
  }
}

template <class F>
Var unary(Var a, F&& f, Tape::BackwardFn bw) {
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return a.tape->record(std::move(out), {a}, std::move(bw));
}

}  // namespace

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_matrix(av, "matmul");
  require_matrix(bv, "matmul");
  Tensor out = matmul(av, bv);
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, std::span<const float> g) {
    const Tensor& A = t.value(a);
    const Tensor& B = t.value(b);
    const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
    if (t.needs_grad(a)) {
      auto ga = t.grad_of(a);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          float s = 0.0f;
          for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * B[p * n + j];
          ga[i * k + p] += s;
        }
    }
    if (t.needs_grad(b)) {
      auto gb = t.grad_of(b);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const float av = A[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * g[i * n + j];
        }
    }
  });
}

Var matmul_nt(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require_matrix(A, "matmul_nt");
  require_matrix(B, "matmul_nt");
  if (A.cols() != B.cols()) {
    throw DimensionError(
        fmt::format("matmul_nt: {} x {}^T inner dimensions differ", shape_string(A.shape()), shape_string(B.shape())));
  }
  const std::size_t m = A.rows(), k = A.cols(), n = B.rows();
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      float s = 0.0f;
      for (std::size_t p = 0; p < k; ++p) s += A[i * k + p] * B[j * k + p];
      out[i * n + j] = s;
    }
  return a.tape->record(std::move(out), {a, b}, [a, b, m, k, n](Tape& t, std::span<const float> g) {
    const Tensor& A = t.value(a);
    const Tensor& B = t.value(b);
    if (t.needs_grad(a)) {
      auto ga = t.grad_of(a);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const float gv = g[i * n + j];
          if (gv == 0.0f) continue;
          for (std::size_t p = 0; p < k; ++p) ga[i * k + p] += gv * B[j * k + p];
        }
    }
    if (t.needs_grad(b)) {
      auto gb = t.grad_of(b);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const float gv = g[i * n + j];
          if (gv == 0.0f) continue;
          for (std::size_t p = 0; p < k; ++p) gb[j * k + p] += gv * A[i * k + p];
        }
    }
  });
}

Var transpose(Var a) {
  require_matrix(a.value(), "transpose");
  Tensor out = transpose(a.value());
  return a.tape->record(std::move(out), {a}, [a](Tape& t, std::span<const float> g) {
    const std::size_t r = t.value(a).rows(), c = t.value(a).cols();
    auto ga = t.grad_of(a);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
  });
}

Var add(Var a, Var b) {
  require_same(a.value(), b.value(), "add");
  Tensor out = a.value().detached();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, std::span<const float> g) {
    for (Var x : {a, b}) {
      if (!t.needs_grad(x)) continue;
      auto gx = t.grad_of(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  require_same(a.value(), b.value(), "sub");
  Tensor out = a.value().detached();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, std::span<const float> g) {
    if (t.needs_grad(a)) {
      auto ga = t.grad_of(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.needs_grad(b)) {
      auto gb = t.grad_of(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same(a.value(), b.value(), "mul");
  Tensor out = a.value().detached();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, std::span<const float> g) {
    const Tensor& A = t.value(a);
    const Tensor& B = t.value(b);
    if (t.needs_grad(a)) {
      auto ga = t.grad_of(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B[i];
    }
    if (t.needs_grad(b)) {
      auto gb = t.grad_of(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A[i];
    }
  });
}

Var add_bias(Var x, Var bias) {
  const Tensor& X = x.value();
  const Tensor& B = bias.value();
  require_matrix(X, "add_bias");
  if (B.size() != X.cols()) {
    throw DimensionError(fmt::format("add_bias: bias {} vs input {}", shape_string(B.shape()), shape_string(X.shape())));
  }
  const std::size_t m = X.rows(), n = X.cols();
  Tensor out = X.detached();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += B[j];
  return x.tape->record(std::move(out), {x, bias}, [x, bias, m, n](Tape& t, std::span<const float> g) {
    if (t.needs_grad(x)) {
      auto gx = t.grad_of(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.needs_grad(bias)) {
      auto gb = t.grad_of(bias);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
    }
  });
}

Var scale(Var a, float s) {
  return unary(a, [s](float v) { return v * s; }, [a, s](Tape& t, std::span<const float> g) {
    auto ga = t.grad_of(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
  });
}

Var square(Var a) {
  return unary(a, [](float v) { return v * v; }, [a](Tape& t, std::span<const float> g) {
    const Tensor& A = t.value(a);
    auto ga = t.grad_of(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += 2.0f * A[i] * g[i];
  });
}

Var relu(Var a) {
  return unary(a, [](float v) { return v > 0.0f ? v : 0.0f; }, [a](Tape& t, std::span<const float> g) {
    const Tensor& A = t.value(a);
    auto ga = t.grad_of(a);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (A[i] > 0.0f) ga[i] += g[i];
  });
}

namespace {
constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kGeluA = 0.044715f;
}  // namespace

Var gelu(Var a) {
  return unary(
      a, [](float x) { return 0.5f * x * (1.0f + std::tanh(kGeluC * (x + kGeluA * x * x * x))); },
      [a](Tape& t, std::span<const float> g) {
        const Tensor& A = t.value(a);
        auto ga = t.grad_of(a);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const float x = A[i];
          const float th = std::tanh(kGeluC * (x + kGeluA * x * x * x));
          const float d = 0.5f * (1.0f + th) + 0.5f * x * (1.0f - th * th) * kGeluC * (1.0f + 3.0f * kGeluA * x * x);
          ga[i] += g[i] * d;
        }
      });
}

Var softmax_rows(Var x) {
  const Tensor& X = x.value();
  require_matrix(X, "softmax_rows");
  const std::size_t m = X.rows(), n = X.cols();
  Tensor out(X.shape());
  for (std::size_t i = 0; i < m; ++i) {
    const float* row = &X.data()[i * n];
    float* o = &out.data()[i * n];
    const float mx = *std::max_element(row, row + n);
    float s = 0.0f;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(row[j] - mx);
      s += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= s;
  }
  std::vector<float> y = out.storage();
  return x.tape->record(std::move(out), {x}, [x, m, n, y = std::move(y)](Tape& t, std::span<const float> g) {
    auto gx = t.grad_of(x);
    for (std::size_t i = 0; i < m; ++i) {
      float dot = 0.0f;
      for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
    }
  });
}

Var layernorm(Var x, Var gamma, Var beta, float eps) {
  const Tensor& X = x.value();
  require_matrix(X, "layernorm");
  const std::size_t m = X.rows(), n = X.cols();
  if (n < 2) throw DimensionError("layernorm: feature dimension must be >= 2");
  if (gamma.value().size() != n || beta.value().size() != n) {
    throw DimensionError(fmt::format("layernorm: gamma/beta must have {} entries", n));
  }
  const Tensor& G = gamma.value();
  const Tensor& B = beta.value();
  std::vector<float> xhat(m * n), rstd(m);
  Tensor out(X.shape());
  for (std::size_t i = 0; i < m; ++i) {
    const float* row = &X.data()[i * n];
    float mu = 0.0f;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<float>(n);
    float var = 0.0f;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<float>(n);
    rstd[i] = 1.0f / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (row[j] - mu) * rstd[i];
      out[i * n + j] = xhat[i * n + j] * G[j] + B[j];
    }
  }
  return x.tape->record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, m, n, xhat = std::move(xhat), rstd = std::move(rstd)](Tape& t, std::span<const float> g) {
        const Tensor& G = t.value(gamma);
        if (t.needs_grad(beta)) {
          auto gb = t.grad_of(beta);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
        }
        if (t.needs_grad(gamma)) {
          auto gg = t.grad_of(gamma);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gg[j] += g[i * n + j] * xhat[i * n + j];
        }
        if (t.needs_grad(x)) {
          auto gx = t.grad_of(x);
          const float inv_n = 1.0f / static_cast<float>(n);
          for (std::size_t i = 0; i < m; ++i) {
            float mean_d = 0.0f, mean_dx = 0.0f;
            for (std::size_t j = 0; j < n; ++j) {
              const float d = g[i * n + j] * G[j];
              mean_d += d;
              mean_dx += d * xhat[i * n + j];
            }
            mean_d *= inv_n;
            mean_dx *= inv_n;
            for (std::size_t j = 0; j < n; ++j) {
              const float d = g[i * n + j] * G[j];
              gx[i * n + j] += rstd[i] * (d - mean_d - xhat[i * n + j] * mean_dx);
            }
          }
        }
      });
}

Var attention(Var q, Var k, Var v, std::size_t n_heads, std::size_t seq_len) {
  const Tensor& Q = q.value();
  const Tensor& K = k.value();
  const Tensor& V = v.value();
  require_matrix(Q, "attention");
  require_same(Q, K, "attention");
  require_same(Q, V, "attention");
  const std::size_t rows = Q.rows(), d = Q.cols();
  if (n_heads == 0 || d % n_heads != 0) throw DimensionError("attention: d must be divisible by n_heads");
  if (seq_len == 0 || rows % seq_len != 0) throw DimensionError("attention: rows must be a multiple of seq_len");
  const std::size_t batch = rows / seq_len, dh = d / n_heads, n = seq_len;
  const float sc = 1.0f / std::sqrt(static_cast<float>(dh));

  // probs layout: [batch][head][i][j]
  std::vector<float> probs(batch * n_heads * n * n);
  Tensor out({rows, d});
  std::vector<float> logits(n);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t c0 = h * dh;
      float* P = &probs[((b * n_heads + h) * n) * n];
      for (std::size_t i = 0; i < n; ++i) {
        const float* qi = &Q.data()[(b * n + i) * d + c0];
        float mx = -INFINITY;
        for (std::size_t j = 0; j < n; ++j) {
          const float* kj = &K.data()[(b * n + j) * d + c0];
          float s = 0.0f;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          logits[j] = s * sc;
          mx = std::max(mx, logits[j]);
        }
        float z = 0.0f;
        for (std::size_t j = 0; j < n; ++j) {
          P[i * n + j] = std::exp(logits[j] - mx);
          z += P[i * n + j];
        }
        float* oi = &out.data()[(b * n + i) * d + c0];
        for (std::size_t j = 0; j < n; ++j) {
          P[i * n + j] /= z;
          const float* vj = &V.data()[(b * n + j) * d + c0];
          for (std::size_t c = 0; c < dh; ++c) oi[c] += P[i * n + j] * vj[c];
        }
      }
    }
  return q.tape->record(
      std::move(out), {q, k, v},
      [q, k, v, batch, n_heads, n, d, dh, sc, probs = std::move(probs)](Tape& t, std::span<const float> g) {
        const Tensor& Q = t.value(q);
        const Tensor& K = t.value(k);
        const Tensor& V = t.value(v);
        const bool wq = t.needs_grad(q), wk = t.needs_grad(k), wv = t.needs_grad(v);
        std::span<float> gq, gk, gv;
        if (wq) gq = t.grad_of(q);
        if (wk) gk = t.grad_of(k);
        if (wv) gv = t.grad_of(v);
        std::vector<float> dP(n), dL(n);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t c0 = h * dh;
            const float* P = &probs[((b * n_heads + h) * n) * n];
            for (std::size_t i = 0; i < n; ++i) {
              const float* go = &g[(b * n + i) * d + c0];
              float dot = 0.0f;
              for (std::size_t j = 0; j < n; ++j) {
                const float* vj = &V.data()[(b * n + j) * d + c0];
                float s = 0.0f;
                for (std::size_t c = 0; c < dh; ++c) s += go[c] * vj[c];
                dP[j] = s;
                dot += s * P[i * n + j];
                if (wv) {
                  float* gvj = &gv[(b * n + j) * d + c0];
                  for (std::size_t c = 0; c < dh; ++c) gvj[c] += P[i * n + j] * go[c];
                }
              }
              for (std::size_t j = 0; j < n; ++j) dL[j] = P[i * n + j] * (dP[j] - dot) * sc;
              const float* qi = &Q.data()[(b * n + i) * d + c0];
              for (std::size_t j = 0; j < n; ++j) {
                const float* kj = &K.data()[(b * n + j) * d + c0];
                if (wq) {
                  float* gqi = &gq[(b * n + i) * d + c0];
                  for (std::size_t c = 0; c < dh; ++c) gqi[c] += dL[j] * kj[c];
                }
                if (wk) {
                  float* gkj = &gk[(b * n + j) * d + c0];
                  for (std::size_t c = 0; c < dh; ++c) gkj[c] += dL[j] * qi[c];
                }
              }
            }
          }
      });
}

Var permute_cols(Var x, std::span<const std::size_t> perm) {
  const Tensor& X = x.value();
  require_matrix(X, "permute_cols");
  const std::size_t m = X.rows(), n = X.cols();
  if (perm.size() != n) {
    throw DimensionError(fmt::format("permute_cols: permutation of size {} on {} columns", perm.size(), n));
  }
  Tensor out(X.shape());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = X[i * n + perm[j]];
  std::vector<std::size_t> p(perm.begin(), perm.end());
  return x.tape->record(std::move(out), {x}, [x, m, n, p = std::move(p)](Tape& t, std::span<const float> g) {
    auto gx = t.grad_of(x);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gx[i * n + p[j]] += g[i * n + j];
  });
}

Var gather_rows(Var table, std::span<const std::size_t> ids) {
  const Tensor& T = table.value();
  require_matrix(T, "gather_rows");
  const std::size_t rows = T.rows(), n = T.cols();
  Tensor out({ids.size(), n});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= rows) throw InputError(fmt::format("gather_rows: id {} out of range [0, {})", ids[i], rows));
    std::copy_n(&T.data()[ids[i] * n], n, &out.data()[i * n]);
  }
  std::vector<std::size_t> idv(ids.begin(), ids.end());
  return table.tape->record(std::move(out), {table},
                            [table, n, idv = std::move(idv)](Tape& t, std::span<const float> g) {
                              auto gt = t.grad_of(table);
                              for (std::size_t i = 0; i < idv.size(); ++i)
                                for (std::size_t j = 0; j < n; ++j) gt[idv[i] * n + j] += g[i * n + j];
                            });
}

Var mean_pool(Var x, std::size_t group) {
  const Tensor& X = x.value();
  require_matrix(X, "mean_pool");
  if (group == 0 || X.rows() % group != 0) throw DimensionError("mean_pool: rows must be a multiple of group");
  const std::size_t groups = X.rows() / group, n = X.cols();
  const float inv = 1.0f / static_cast<float>(group);
  Tensor out({groups, n});
  for (std::size_t r = 0; r < X.rows(); ++r)
    for (std::size_t j = 0; j < n; ++j) out[(r / group) * n + j] += X[r * n + j] * inv;
  return x.tape->record(std::move(out), {x}, [x, group, n, inv](Tape& t, std::span<const float> g) {
    auto gx = t.grad_of(x);
    for (std::size_t r = 0; r < gx.size() / n; ++r)
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += g[(r / group) * n + j] * inv;
  });
}

Var dropout(Var x, float rate, Rng& rng) {
  if (rate <= 0.0f) return x;
  if (rate >= 1.0f) throw InputError("dropout rate must be < 1");
  const Tensor& X = x.value();
  const float keep = 1.0f / (1.0f - rate);
  std::vector<float> mask(X.size());
  Tensor out(X.shape());
  for (std::size_t i = 0; i < X.size(); ++i) {
    mask[i] = rng.uniform() < rate ? 0.0f : keep;
    out[i] = X[i] * mask[i];
  }
  return x.tape->record(std::move(out), {x}, [x, mask = std::move(mask)](Tape& t, std::span<const float> g) {
    auto gx = t.grad_of(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
  });
}

Var sum(Var a) {
  double s = 0.0;
  for (float v : a.value().data()) s += v;
  return a.tape->record(Tensor::scalar(static_cast<float>(s)), {a}, [a](Tape& t, std::span<const float> g) {
    auto ga = t.grad_of(a);
    for (float& v : ga) v += g[0];
  });
}

Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(a), 1.0f / static_cast<float>(n));
}

Var cross_entropy(Var logits, std::span<const std::size_t> targets) {
  const Tensor& L = logits.value();
  require_matrix(L, "cross_entropy");
  const std::size_t m = L.rows(), c = L.cols();
  if (targets.size() != m) throw DimensionError("cross_entropy: one target per row required");
  std::vector<float> probs(m * c);
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (targets[i] >= c) throw InputError(fmt::format("cross_entropy: target {} >= {} classes", targets[i], c));
    const float* row = &L.data()[i * c];
    const float mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = static_cast<float>(std::exp(row[j] - mx) / z);
    total += std::log(z) + mx - row[targets[i]];
  }
  if (!std::isfinite(total)) throw NumericFault("cross_entropy: non-finite loss");
  std::vector<std::size_t> tv(targets.begin(), targets.end());
  return logits.tape->record(
      Tensor::scalar(static_cast<float>(total / static_cast<double>(m))), {logits},
      [logits, m, c, probs = std::move(probs), tv = std::move(tv)](Tape& t, std::span<const float> g) {
        auto gl = t.grad_of(logits);
        const float s = g[0] / static_cast<float>(m);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < c; ++j)
            gl[i * c + j] += s * (probs[i * c + j] - (j == tv[i] ? 1.0f : 0.0f));
      });
}

Var row_cosine(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require_same(A, B, "row_cosine");
  const std::size_t m = A.rows(), n = A.cols();
  std::vector<float> na(m), nb(m);
  Tensor out({m});
  for (std::size_t i = 0; i < m; ++i) {
    double dot = 0.0, sa = 0.0, sb = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      dot += static_cast<double>(A[i * n + j]) * B[i * n + j];
      sa += static_cast<double>(A[i * n + j]) * A[i * n + j];
      sb += static_cast<double>(B[i * n + j]) * B[i * n + j];
    }
    if (sa == 0.0 || sb == 0.0) throw NumericFault("cosine similarity of a zero-norm vector");
    na[i] = static_cast<float>(std::sqrt(sa));
    nb[i] = static_cast<float>(std::sqrt(sb));
    out[i] = static_cast<float>(dot / (std::sqrt(sa) * std::sqrt(sb)));
  }
  Tensor cos = out.detached();
  return a.tape->record(std::move(out), {a, b},
                        [a, b, m, n, na = std::move(na), nb = std::move(nb), cos = std::move(cos)](
                            Tape& t, std::span<const float> g) {
                          const Tensor& A = t.value(a);
                          const Tensor& B = t.value(b);
                          for (std::size_t i = 0; i < m; ++i) {
                            const float inv = 1.0f / (na[i] * nb[i]);
                            if (t.needs_grad(a)) {
                              auto ga = t.grad_of(a);
                              const float ca = cos[i] / (na[i] * na[i]);
                              for (std::size_t j = 0; j < n; ++j)
                                ga[i * n + j] += g[i] * (B[i * n + j] * inv - A[i * n + j] * ca);
                            }
                            if (t.needs_grad(b)) {
                              auto gb = t.grad_of(b);
                              const float cb = cos[i] / (nb[i] * nb[i]);
                              for (std::size_t j = 0; j < n; ++j)
                                gb[i * n + j] += g[i] * (A[i * n + j] * inv - B[i * n + j] * cb);
                            }
                          }
                        });
}

}  // namespace tokenmark
