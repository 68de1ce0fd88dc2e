#pragma once

// Differentiable primitives. All matrices are row-major; batched sequence
// data is stored as blocks of rows, one block of n_ctx rows per sequence.

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "mixlab/errors.hpp"
#include "mixlab/mask.hpp"
#include "mixlab/tensor.hpp"

namespace mixlab {

namespace detail {

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw DimensionError(msg);
}

template <class T>
void require_rank2(const Tensor<T>& t, const char* op) {
  require(t.rank() == 2, std::string(op) + ": expected a 2-D tensor, got " + shape_str(t.shape()));
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  if (a.cols() != b.rows())
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<T> out(m * n);
  detail::view(out, m, n).noalias() = detail::view(a.node()->data, m, k) * detail::view(b.node()->data, k, n);
  return make_result<T>({m, n}, std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    auto& A = *self.parents[0];
    auto& B = *self.parents[1];
    auto dC = detail::view(self.grad, m, n);
    if (A.requires_grad) detail::view(A.grad_buffer(), m, k).noalias() += dC * detail::view(B.data, k, n).transpose();
    if (B.requires_grad) detail::view(B.grad_buffer(), k, n).noalias() += detail::view(A.data, m, k).transpose() * dC;
  });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_rank2(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<T> out(m * n);
  detail::view(out, n, m) = detail::view(a.node()->data, m, n).transpose();
  return make_result<T>({n, m}, std::move(out), {a}, [m, n](Node<T>& self) {
    auto& A = *self.parents[0];
    detail::view(A.grad_buffer(), m, n) += detail::view(self.grad, n, m).transpose();
  });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel_of(shape) != a.numel())
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  std::vector<T> out(a.data().begin(), a.data().end());
  return make_result<T>(std::move(shape), std::move(out), {a}, [](Node<T>& self) {
    auto& A = *self.parents[0];
    T* g = A.grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    for (auto* p : {self.parents[0].get(), self.parents[1].get()}) {
      if (!p->requires_grad) continue;
      T* g = p->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    auto& A = *self.parents[0];
    auto& B = *self.parents[1];
    if (A.requires_grad) {
      T* g = A.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (B.requires_grad) {
      T* g = B.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    auto& A = *self.parents[0];
    auto& B = *self.parents[1];
    if (A.requires_grad) {
      T* g = A.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * B.data[i];
    }
    if (B.requires_grad) {
      T* g = B.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * A.data[i];
    }
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return make_result<T>(a.shape(), std::move(out), {a}, [s](Node<T>& self) {
    T* g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * s;
  });
}

// a[m x n] + v broadcast over rows; v has n elements.
template <class T>
Tensor<T> add_rowvec(const Tensor<T>& a, const Tensor<T>& v) {
  detail::require_rank2(a, "add_rowvec");
  const std::size_t m = a.rows(), n = a.cols();
  detail::require(v.numel() == n, "add_rowvec: bias of shape " + shape_str(v.shape()) + " for " + shape_str(a.shape()));
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a[i * n + j] + v[j];
  return make_result<T>(a.shape(), std::move(out), {a, v}, [m, n](Node<T>& self) {
    auto& A = *self.parents[0];
    auto& V = *self.parents[1];
    if (A.requires_grad) {
      T* g = A.grad_buffer();
      for (std::size_t i = 0; i < m * n; ++i) g[i] += self.grad[i];
    }
    if (V.requires_grad) {
      T* g = V.grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
    }
  });
}

template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = a[i];
    out[i] = T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2));
  }
  return make_result<T>(a.shape(), std::move(out), {a}, [inv_sqrt2](Node<T>& self) {
    auto& A = *self.parents[0];
    T* g = A.grad_buffer();
    const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T x = A.data[i];
      const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * x * x);
      g[i] += self.grad[i] * (cdf + x * pdf);
    }
  });
}

template <class T>
Tensor<T> silu(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] / (T(1) + std::exp(-a[i]));
  return make_result<T>(a.shape(), std::move(out), {a}, [](Node<T>& self) {
    auto& A = *self.parents[0];
    T* g = A.grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T x = A.data[i];
      const T s = T(1) / (T(1) + std::exp(-x));
      g[i] += self.grad[i] * s * (T(1) + x * (T(1) - s));
    }
  });
}

// ---------------------------------------------------------------------------
// Normalisation

template <class T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  detail::require_rank2(x, "layernorm");
  const std::size_t m = x.rows(), n = x.cols();
  detail::require(gamma.numel() == n && beta.numel() == n, "layernorm: affine parameters do not match width");
  std::vector<T> out(m * n), xhat(m * n), inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    T mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += x[i * n + j];
    mean /= T(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (x[i * n + j] - mean) * (x[i * n + j] - mean);
    var /= T(n);
    inv_std[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (x[i * n + j] - mean) * inv_std[i];
      out[i * n + j] = gamma[j] * xhat[i * n + j] + beta[j];
    }
  }
  return make_result<T>(x.shape(), std::move(out), {x, gamma, beta},
                        [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
    auto& X = *self.parents[0];
    auto& G = *self.parents[1];
    auto& B = *self.parents[2];
    if (G.requires_grad || B.requires_grad) {
      T* gg = G.requires_grad ? G.grad_buffer() : nullptr;
      T* gb = B.requires_grad ? B.grad_buffer() : nullptr;
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          if (gg) gg[j] += self.grad[i * n + j] * xhat[i * n + j];
          if (gb) gb[j] += self.grad[i * n + j];
        }
    }
    if (X.requires_grad) {
      T* gx = X.grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        T mean_d = 0, mean_dx = 0;
        for (std::size_t j = 0; j < n; ++j) {
          const T d = self.grad[i * n + j] * G.data[j];
          mean_d += d;
          mean_dx += d * xhat[i * n + j];
        }
        mean_d /= T(n);
        mean_dx /= T(n);
        for (std::size_t j = 0; j < n; ++j) {
          const T d = self.grad[i * n + j] * G.data[j];
          gx[i * n + j] += inv_std[i] * (d - mean_d - xhat[i * n + j] * mean_dx);
        }
      }
    }
  });
}

template <class T>
Tensor<T> rmsnorm(const Tensor<T>& x, const Tensor<T>& gamma, T eps = T(1e-6)) {
  detail::require_rank2(x, "rmsnorm");
  const std::size_t m = x.rows(), n = x.cols();
  detail::require(gamma.numel() == n, "rmsnorm: gain does not match width");
  std::vector<T> out(m * n), inv_rms(m);
  for (std::size_t i = 0; i < m; ++i) {
    T ss = 0;
    for (std::size_t j = 0; j < n; ++j) ss += x[i * n + j] * x[i * n + j];
    inv_rms[i] = T(1) / std::sqrt(ss / T(n) + eps);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = gamma[j] * x[i * n + j] * inv_rms[i];
  }
  return make_result<T>(x.shape(), std::move(out), {x, gamma}, [m, n, inv_rms = std::move(inv_rms)](Node<T>& self) {
    auto& X = *self.parents[0];
    auto& G = *self.parents[1];
    if (G.requires_grad) {
      T* gg = G.grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gg[j] += self.grad[i * n + j] * X.data[i * n + j] * inv_rms[i];
    }
    if (X.requires_grad) {
      T* gx = X.grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        T dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += self.grad[i * n + j] * G.data[j] * X.data[i * n + j];
        const T r = inv_rms[i];
        for (std::size_t j = 0; j < n; ++j)
          gx[i * n + j] += r * self.grad[i * n + j] * G.data[j] - r * r * r * X.data[i * n + j] * dot / T(n);
      }
    }
  });
}

// Divides each row by its Euclidean norm.
template <class T>
Tensor<T> normalize_rows(const Tensor<T>& x) {
  detail::require_rank2(x, "normalize_rows");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<T> out(m * n), inv_norm(m);
  for (std::size_t i = 0; i < m; ++i) {
    T ss = 0;
    for (std::size_t j = 0; j < n; ++j) ss += x[i * n + j] * x[i * n + j];
    if (!(ss > T(0))) throw InputError("normalize_rows: row " + std::to_string(i) + " has zero norm");
    inv_norm[i] = T(1) / std::sqrt(ss);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] * inv_norm[i];
  }
  return make_result<T>(x.shape(), out, {x}, [m, n, y = out, inv_norm = std::move(inv_norm)](Node<T>& self) {
    T* gx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < m; ++i) {
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += self.grad[i * n + j] * y[i * n + j];
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += inv_norm[i] * (self.grad[i * n + j] - y[i * n + j] * dot);
    }
  });
}

// ---------------------------------------------------------------------------
// Softmax family

// Row-wise softmax over the entries whose mask byte is nonzero; masked
// entries are exactly 0. An empty mask means every entry is open. Uses
// max-subtraction, so |x| up to 1e6 is safe.
template <class T>
Tensor<T> masked_softmax_rows(const Tensor<T>& x, std::span<const std::uint8_t> mask = {}) {
  detail::require_rank2(x, "softmax");
  const std::size_t m = x.rows(), n = x.cols();
  detail::require(mask.empty() || mask.size() == m * n, "softmax: mask size does not match input");
  std::vector<T> out(m * n, T(0));
  for (std::size_t i = 0; i < m; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < n; ++j)
      if (mask.empty() || mask[i * n + j]) {
        mx = std::max(mx, x[i * n + j]);
        any = true;
      }
    if (!any) throw ContractError("softmax: row " + std::to_string(i) + " has no unmasked entry");
    T total = 0;
    for (std::size_t j = 0; j < n; ++j)
      if (mask.empty() || mask[i * n + j]) {
        out[i * n + j] = std::exp(x[i * n + j] - mx);
        total += out[i * n + j];
      }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= total;
  }
  return make_result<T>(x.shape(), out, {x}, [m, n, y = out](Node<T>& self) {
    T* gx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < m; ++i) {
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += self.grad[i * n + j] * y[i * n + j];
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += y[i * n + j] * (self.grad[i * n + j] - dot);
    }
  });
}

// Softmax along `axis` of a 1-D or 2-D tensor.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1) {
  if (x.rank() == 1) {
    if (axis != -1 && axis != 0) throw DimensionError("softmax: axis out of range for 1-D input");
    return reshape(masked_softmax_rows(reshape(x, {1, x.numel()})), x.shape());
  }
  detail::require_rank2(x, "softmax");
  if (axis == -1 || axis == 1) return masked_softmax_rows(x);
  if (axis == 0) return transpose(masked_softmax_rows(transpose(x)));
  throw DimensionError("softmax: axis out of range for 2-D input");
}

// Mean negative log-likelihood of `targets` under row-wise softmax(logits),
// skipping positions whose target equals ignore_id.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets, int ignore_id) {
  detail::require_rank2(logits, "cross_entropy");
  const std::size_t m = logits.rows(), v = logits.cols();
  if (targets.size() != m)
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + shape_str(logits.shape()));
  std::size_t count = 0;
  for (int t : targets) {
    if (t == ignore_id) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= v)
      throw InputError("cross_entropy: target " + std::to_string(t) + " outside [0, " + std::to_string(v) + ")");
    ++count;
  }
  if (count == 0) throw EmptyLossError();
  std::vector<T> probs(m * v, T(0));
  T total = 0;
  for (std::size_t i = 0; i < m; ++i) {
    if (targets[i] == ignore_id) continue;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, logits[i * v + j]);
    T s = 0;
    for (std::size_t j = 0; j < v; ++j) {
      probs[i * v + j] = std::exp(logits[i * v + j] - mx);
      s += probs[i * v + j];
    }
    for (std::size_t j = 0; j < v; ++j) probs[i * v + j] /= s;
    total += std::log(s) + mx - logits[i * v + static_cast<std::size_t>(targets[i])];
  }
  const T denom = T(count);
  std::vector<int> tg(targets.begin(), targets.end());
  return make_result<T>(Shape{}, std::vector<T>{total / denom}, {logits},
                        [m, v, denom, ignore_id, probs = std::move(probs), tg = std::move(tg)](Node<T>& self) {
    T* g = self.parents[0]->grad_buffer();
    const T scale_ = self.grad[0] / denom;
    for (std::size_t i = 0; i < m; ++i) {
      if (tg[i] == ignore_id) continue;
      for (std::size_t j = 0; j < v; ++j) g[i * v + j] += scale_ * probs[i * v + j];
      g[i * v + static_cast<std::size_t>(tg[i])] -= scale_;
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = 0;
  for (T v : a.data()) s += v;
  return make_result<T>(Shape{}, std::vector<T>{s}, {a}, [](Node<T>& self) {
    T* g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < self.parents[0]->data.size(); ++i) g[i] += self.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / T(a.numel()));
}

// sum |a - target| with the subgradient sign(0) = 0.
template <class T>
Tensor<T> l1_distance(const Tensor<T>& a, std::span<const T> target) {
  if (target.size() != a.numel()) throw DimensionError("l1_distance: target size differs from input");
  T s = 0;
  for (std::size_t i = 0; i < target.size(); ++i) s += std::abs(a[i] - target[i]);
  std::vector<T> tgt(target.begin(), target.end());
  return make_result<T>(Shape{}, std::vector<T>{s}, {a}, [tgt = std::move(tgt)](Node<T>& self) {
    auto& A = *self.parents[0];
    T* g = A.grad_buffer();
    for (std::size_t i = 0; i < tgt.size(); ++i) {
      const T d = A.data[i] - tgt[i];
      g[i] += self.grad[0] * T((d > 0) - (d < 0));
    }
  });
}

// ---------------------------------------------------------------------------
// Gathering and layout

template <class T>
Tensor<T> embedding(std::span<const int> ids, const Tensor<T>& table) {
  detail::require_rank2(table, "embedding");
  const std::size_t v = table.rows(), d = table.cols();
  std::vector<T> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v)
      throw InputError("token id " + std::to_string(ids[i]) + " outside vocabulary of " + std::to_string(v));
    std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d, out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return make_result<T>({ids.size(), d}, std::move(out), {table}, [d, idv = std::move(idv)](Node<T>& self) {
    T* g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < idv.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) g[static_cast<std::size_t>(idv[i]) * d + j] += self.grad[i * d + j];
  });
}

template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, std::vector<std::size_t> rows) {
  detail::require_rank2(x, "gather_rows");
  const std::size_t n = x.cols();
  std::vector<T> out(rows.size() * n);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    detail::require(rows[i] < x.rows(), "gather_rows: row index out of range");
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[rows[i] * n + j];
  }
  const std::size_t count = rows.size();
  return make_result<T>({count, n}, std::move(out), {x}, [n, rows = std::move(rows)](Node<T>& self) {
    T* g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < n; ++j) g[rows[i] * n + j] += self.grad[i * n + j];
  });
}

template <class T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t start, std::size_t count) {
  detail::require_rank2(x, "slice_rows");
  detail::require(start + count <= x.rows(), "slice_rows: range exceeds " + shape_str(x.shape()));
  std::vector<std::size_t> rows(count);
  std::iota(rows.begin(), rows.end(), start);
  return gather_rows(x, std::move(rows));
}

template <class T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t start, std::size_t count) {
  detail::require_rank2(x, "slice_cols");
  const std::size_t m = x.rows(), n = x.cols();
  detail::require(start + count <= n, "slice_cols: range exceeds " + shape_str(x.shape()));
  std::vector<T> out(m * count);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = x[i * n + start + j];
  return make_result<T>({m, count}, std::move(out), {x}, [m, n, start, count](Node<T>& self) {
    T* g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < count; ++j) g[i * n + start + j] += self.grad[i * count + j];
  });
}

template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  detail::require(!parts.empty(), "concat_rows: no inputs");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  for (const auto& p : parts) {
    detail::require(p.rank() == 2 && p.cols() == n, "concat_rows: column counts differ");
    m += p.rows();
  }
  std::vector<T> out;
  out.reserve(m * n);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return make_result<T>({m, n}, std::move(out), parts, [](Node<T>& self) {
    std::size_t offset = 0;
    for (auto& p : self.parents) {
      const std::size_t len = p->data.size();
      if (p->requires_grad) {
        T* g = p->grad_buffer();
        for (std::size_t i = 0; i < len; ++i) g[i] += self.grad[offset + i];
      }
      offset += len;
    }
  });
}

template <class T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  detail::require(!parts.empty(), "concat_cols: no inputs");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  for (const auto& p : parts) {
    detail::require(p.rank() == 2 && p.rows() == m, "concat_cols: row counts differ");
    n += p.cols();
  }
  std::vector<T> out(m * n);
  std::size_t c0 = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.cols();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * n + c0 + j] = p[i * w + j];
    c0 += w;
  }
  return make_result<T>({m, n}, std::move(out), parts, [m, n](Node<T>& self) {
    std::size_t c = 0;
    for (auto& p : self.parents) {
      const std::size_t w = p->shape[1];
      if (p->requires_grad) {
        T* g = p->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < w; ++j) g[i * w + j] += self.grad[i * n + c + j];
      }
      c += w;
    }
  });
}

// Tiles a single row `count` times.
template <class T>
Tensor<T> repeat_row(const Tensor<T>& row, std::size_t count) {
  detail::require(row.numel() > 0, "repeat_row: empty input");
  return gather_rows(reshape(row, {1, row.numel()}), std::vector<std::size_t>(count, 0));
}

// Within every block of `block` rows, output row i takes input row i + offset,
// or zeros when that falls outside the block.
template <class T>
Tensor<T> shift_rows(const Tensor<T>& x, std::size_t block, std::ptrdiff_t offset) {
  detail::require_rank2(x, "shift_rows");
  detail::require(block > 0 && x.rows() % block == 0, "shift_rows: rows are not a whole number of blocks");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<T> out(m * n, T(0));
  auto source = [=](std::size_t r) -> std::ptrdiff_t {
    const auto i = static_cast<std::ptrdiff_t>(r % block) + offset;
    if (i < 0 || i >= static_cast<std::ptrdiff_t>(block)) return -1;
    return static_cast<std::ptrdiff_t>(r - r % block) + i;
  };
  for (std::size_t r = 0; r < m; ++r)
    if (auto s = source(r); s >= 0)
      for (std::size_t j = 0; j < n; ++j) out[r * n + j] = x[static_cast<std::size_t>(s) * n + j];
  return make_result<T>(x.shape(), std::move(out), {x}, [m, n, source](Node<T>& self) {
    T* g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < m; ++r)
      if (auto s = source(r); s >= 0)
        for (std::size_t j = 0; j < n; ++j) g[static_cast<std::size_t>(s) * n + j] += self.grad[r * n + j];
  });
}

// ---------------------------------------------------------------------------
// Token mixing

// Masked 1-D convolution between token positions.
//
// x holds B blocks of `in` rows (positions) by d columns (features). The
// weight has shape {k, out, in}: one (out x in) position-mixing matrix per
// kernel tap. The kernel slides along the feature axis with k-1 zeros of
// left padding, so tap t reads feature column c - (k-1-t):
//
//   y[b,i,c] = bias[i] + sum_t sum_j M[i,j] * w[t,i,j] * x[b,j,c-(k-1-t)]
//
// M is applied inside the forward pass, never written back into w, so
// masked entries receive exactly zero gradient.
template <class T>
Tensor<T> masked_conv1d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, CausalMask mask) {
  detail::require_rank2(x, "masked_conv1d");
  if (w.rank() != 3) throw DimensionError("masked_conv1d: weight must be {k, out, in}, got " + shape_str(w.shape()));
  const std::size_t k = w.dim(0), f = w.dim(1), c = w.dim(2), d = x.cols();
  if (k == 0) throw ConfigError("masked_conv1d: kernel size must be at least 1");
  if (k > c) throw ConfigError("masked_conv1d: kernel size " + std::to_string(k) + " exceeds sequence length " + std::to_string(c));
  if (x.rows() % c != 0)
    throw DimensionError("masked_conv1d: input " + shape_str(x.shape()) + " is not a stack of " + std::to_string(c) + "-row blocks");
  const bool has_bias = bias.defined();
  if (has_bias && bias.numel() != f) throw DimensionError("masked_conv1d: bias length differs from output positions");
  const std::size_t batch = x.rows() / c;

  const std::vector<T> pattern = mask.template pattern<T>(f, c);
  std::vector<T> weff(k * f * c);
  for (std::size_t t = 0; t < k; ++t)
    for (std::size_t e = 0; e < f * c; ++e) weff[t * f * c + e] = w[t * f * c + e] * pattern[e];

  std::vector<T> out(batch * f * d, T(0));
  for (std::size_t b = 0; b < batch; ++b) {
    auto xb = detail::view(x.node()->data.data() + b * c * d, c, d);
    auto yb = detail::view(out.data() + b * f * d, f, d);
    for (std::size_t t = 0; t < k; ++t) {
      const std::size_t s = k - 1 - t;
      if (s >= d) continue;
      auto wt = detail::view(weff.data() + t * f * c, f, c);
      yb.rightCols(static_cast<Eigen::Index>(d - s)).noalias() += wt * xb.leftCols(static_cast<Eigen::Index>(d - s));
    }
    if (has_bias)
      for (std::size_t i = 0; i < f; ++i) yb.row(static_cast<Eigen::Index>(i)).array() += bias[i];
  }

  std::vector<Tensor<T>> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return make_result<T>({batch * f, d}, std::move(out), inputs,
                        [k, f, c, d, batch, has_bias, pattern, weff = std::move(weff)](Node<T>& self) {
    auto& X = *self.parents[0];
    auto& W = *self.parents[1];
    for (std::size_t b = 0; b < batch; ++b) {
      auto gy = detail::view(self.grad.data() + b * f * d, f, d);
      for (std::size_t t = 0; t < k; ++t) {
        const std::size_t s = k - 1 - t;
        if (s >= d) continue;
        const auto cols = static_cast<Eigen::Index>(d - s);
        if (X.requires_grad) {
          auto gx = detail::view(X.grad_buffer() + b * c * d, c, d);
          auto wt = detail::view(weff.data() + t * f * c, f, c);
          gx.leftCols(cols).noalias() += wt.transpose() * gy.rightCols(cols);
        }
        if (W.requires_grad) {
          auto xb = detail::view(X.data.data() + b * c * d, c, d);
          auto gw = detail::view(W.grad_buffer() + t * f * c, f, c);
          detail::MatrixRM<T> full = gy.rightCols(cols) * xb.leftCols(cols).transpose();
          gw.array() += full.array() * detail::view(pattern, f, c).array();
        }
      }
      if (has_bias && self.parents[2]->requires_grad) {
        T* gb = self.parents[2]->grad_buffer();
        for (std::size_t i = 0; i < f; ++i) gb[i] += gy.row(static_cast<Eigen::Index>(i)).sum();
      }
    }
  });
}

// Row-softmax of conv weights {k, out, in} over the unmasked input
// positions of each (tap, output) row; masked entries are 0.
template <class T>
Tensor<T> softmax_conv_weights(const Tensor<T>& w, CausalMask mask) {
  if (w.rank() != 3) throw DimensionError("softmax_conv_weights: weight must be {k, out, in}");
  const std::size_t k = w.dim(0), f = w.dim(1), c = w.dim(2);
  std::vector<std::uint8_t> open(k * f * c);
  for (std::size_t t = 0; t < k; ++t)
    for (std::size_t i = 0; i < f; ++i)
      for (std::size_t j = 0; j < c; ++j) open[(t * f + i) * c + j] = mask.allows(i, j) ? 1 : 0;
  return reshape(masked_softmax_rows(reshape(w, {k * f, c}), open), w.shape());
}

// Scaled dot-product attention over row blocks of n_ctx positions with
// n_heads heads of width cols/n_heads. Queries may attend to keys allowed by
// `direction`; keys flagged in key_pad are hidden except from their own
// query row, which keeps every row non-empty.
template <class T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t n_ctx, std::size_t n_heads,
                    MaskDirection direction, std::span<const std::uint8_t> key_pad = {}) {
  detail::require_rank2(q, "attention");
  detail::require_same_shape(q, k, "attention");
  detail::require_same_shape(q, v, "attention");
  const std::size_t m = q.rows(), width = q.cols();
  if (n_heads == 0 || width % n_heads != 0) throw ConfigError("attention: heads must divide width");
  if (n_ctx == 0 || m % n_ctx != 0) throw DimensionError("attention: rows are not a whole number of sequences");
  if (!key_pad.empty() && key_pad.size() != m) throw DimensionError("attention: key pad mask length differs from rows");
  const std::size_t dh = width / n_heads, batch = m / n_ctx;
  const T inv_scale = T(1) / std::sqrt(T(dh));
  const CausalMask cm{direction};

  std::vector<std::uint8_t> open(batch * n_ctx * n_ctx);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < n_ctx; ++i)
      for (std::size_t j = 0; j < n_ctx; ++j) {
        bool ok = cm.allows(i, j);
        if (ok && i != j && !key_pad.empty() && key_pad[b * n_ctx + j]) ok = false;
        open[(b * n_ctx + i) * n_ctx + j] = ok;
      }

  auto head_block = [&](const std::vector<T>& src, std::size_t b, std::size_t h) {
    return Eigen::Map<const detail::MatrixRM<T>, 0, Eigen::OuterStride<>>(
        src.data() + b * n_ctx * width + h * dh, static_cast<Eigen::Index>(n_ctx), static_cast<Eigen::Index>(dh),
        Eigen::OuterStride<>(static_cast<Eigen::Index>(width)));
  };

  std::vector<T> out(m * width, T(0));
  std::vector<T> probs(batch * n_heads * n_ctx * n_ctx, T(0));
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < n_heads; ++h) {
      detail::MatrixRM<T> s = (head_block(q.node()->data, b, h) * head_block(k.node()->data, b, h).transpose()) * inv_scale;
      T* p = probs.data() + (b * n_heads + h) * n_ctx * n_ctx;
      for (std::size_t i = 0; i < n_ctx; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < n_ctx; ++j)
          if (open[(b * n_ctx + i) * n_ctx + j]) mx = std::max(mx, s(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
        T tot = 0;
        for (std::size_t j = 0; j < n_ctx; ++j)
          if (open[(b * n_ctx + i) * n_ctx + j]) {
            p[i * n_ctx + j] = std::exp(s(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) - mx);
            tot += p[i * n_ctx + j];
          }
        for (std::size_t j = 0; j < n_ctx; ++j) p[i * n_ctx + j] /= tot;
      }
      Eigen::Map<detail::MatrixRM<T>, 0, Eigen::OuterStride<>> o(out.data() + b * n_ctx * width + h * dh,
                                                                 static_cast<Eigen::Index>(n_ctx), static_cast<Eigen::Index>(dh),
                                                                 Eigen::OuterStride<>(static_cast<Eigen::Index>(width)));
      o.noalias() = detail::view(p, n_ctx, n_ctx) * head_block(v.node()->data, b, h);
    }

  return make_result<T>(q.shape(), std::move(out), {q, k, v},
                        [n_ctx, width, dh, batch, n_heads, inv_scale, probs = std::move(probs)](Node<T>& self) {
    auto& Q = *self.parents[0];
    auto& K = *self.parents[1];
    auto& V = *self.parents[2];
    auto block = [&](T* base, std::size_t b, std::size_t h) {
      return Eigen::Map<detail::MatrixRM<T>, 0, Eigen::OuterStride<>>(
          base + b * n_ctx * width + h * dh, static_cast<Eigen::Index>(n_ctx), static_cast<Eigen::Index>(dh),
          Eigen::OuterStride<>(static_cast<Eigen::Index>(width)));
    };
    T* gq = Q.requires_grad ? Q.grad_buffer() : nullptr;
    T* gk = K.requires_grad ? K.grad_buffer() : nullptr;
    T* gv = V.requires_grad ? V.grad_buffer() : nullptr;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t h = 0; h < n_heads; ++h) {
        auto P = detail::CMapRM<T>(probs.data() + (b * n_heads + h) * n_ctx * n_ctx, static_cast<Eigen::Index>(n_ctx),
                                   static_cast<Eigen::Index>(n_ctx));
        auto dO = block(self.grad.data(), b, h);
        auto Qb = block(Q.data.data(), b, h);
        auto Kb = block(K.data.data(), b, h);
        auto Vb = block(V.data.data(), b, h);
        if (gv) block(gv, b, h).noalias() += P.transpose() * dO;
        if (!gq && !gk) continue;
        detail::MatrixRM<T> dP = dO * Vb.transpose();
        Eigen::Matrix<T, Eigen::Dynamic, 1> rowdot = (dP.array() * P.array()).rowwise().sum();
        detail::MatrixRM<T> dS = P.array() * (dP.colwise() - rowdot).array();
        dS *= inv_scale;
        if (gq) block(gq, b, h).noalias() += dS * Kb;
        if (gk) block(gk, b, h).noalias() += dS.transpose() * Qb;
      }
  });
}

// Rotary position encoding (rotate-half convention) applied per head to
// row blocks of n_ctx positions. Position is the row index within a block.
template <class T>
Tensor<T> rotary(const Tensor<T>& x, std::size_t n_ctx, std::size_t n_heads, T base = T(10000)) {
  detail::require_rank2(x, "rotary");
  const std::size_t m = x.rows(), width = x.cols();
  if (n_heads == 0 || width % n_heads != 0) throw ConfigError("rotary: heads must divide width");
  const std::size_t dh = width / n_heads;
  if (dh % 2 != 0) throw ConfigError("rotary: head width must be even");
  if (m % n_ctx != 0) throw DimensionError("rotary: rows are not a whole number of sequences");
  const std::size_t half = dh / 2;
  std::vector<T> cosv(n_ctx * half), sinv(n_ctx * half);
  for (std::size_t p = 0; p < n_ctx; ++p)
    for (std::size_t i = 0; i < half; ++i) {
      const double theta = static_cast<double>(p) * std::pow(static_cast<double>(base), -2.0 * static_cast<double>(i) / static_cast<double>(dh));
      cosv[p * half + i] = static_cast<T>(std::cos(theta));
      sinv[p * half + i] = static_cast<T>(std::sin(theta));
    }
  std::vector<T> out(m * width);
  for (std::size_t r = 0; r < m; ++r) {
    const std::size_t p = r % n_ctx;
    for (std::size_t h = 0; h < n_heads; ++h)
      for (std::size_t i = 0; i < half; ++i) {
        const std::size_t a = r * width + h * dh + i, b = a + half;
        const T c = cosv[p * half + i], s = sinv[p * half + i];
        out[a] = x[a] * c - x[b] * s;
        out[b] = x[a] * s + x[b] * c;
      }
  }
  return make_result<T>(x.shape(), std::move(out), {x},
                        [m, width, n_ctx, n_heads, dh, half, cosv = std::move(cosv), sinv = std::move(sinv)](Node<T>& self) {
    T* g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < m; ++r) {
      const std::size_t p = r % n_ctx;
      for (std::size_t h = 0; h < n_heads; ++h)
        for (std::size_t i = 0; i < half; ++i) {
          const std::size_t a = r * width + h * dh + i, b = a + half;
          const T c = cosv[p * half + i], s = sinv[p * half + i];
          g[a] += self.grad[a] * c + self.grad[b] * s;
          g[b] += -self.grad[a] * s + self.grad[b] * c;
        }
    }
  });
}

}  // namespace mixlab
