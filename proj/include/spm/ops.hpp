#pragma once

// Differentiable dense operations on Var.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "spm/autodiff.hpp"

namespace spm {

namespace detail {

inline void require_rank(const Var& v, std::size_t rank, const char* op) {
  if (v.shape().size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(v.shape()));
  }
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double stable_softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

// Elementwise y = f(x) with dy/dx = df(x, y).
template <typename F, typename DF>
Var unary(const char* op, const Var& x, F f, DF df) {
  Tensor y(x.shape());
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xv[i]);
  return Var::from_op(op, y, {x}, [df](Node& self) {
    Tensor* gx = self.parent_grad(0);
    if (!gx) return;
    const Tensor& xv = self.parent_value(0);
    for (std::size_t i = 0; i < xv.size(); ++i) (*gx)[i] += self.grad[i] * df(xv[i], self.value[i]);
  });
}

}  // namespace detail

inline Var constant(Tensor t) { return Var(std::move(t), false); }

/// [m,k]·[k,n] -> [m,n].
inline Var matmul(const Var& a, const Var& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner extents differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor y({m, n});
  const double* av = a.value().data();
  const double* bv = b.value().data();
  double* yv = y.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* yr = yv + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* br = bv + p * n;
      for (std::size_t j = 0; j < n; ++j) yr[j] += aip * br[j];
    }
  }
  return Var::from_op("matmul", std::move(y), {a, b}, [m, k, n](Node& self) {
    const double* dy = self.grad.data();
    if (Tensor* ga = self.parent_grad(0)) {
      const double* bv = self.parent_value(1).data();
      double* g = ga->data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += dy[i * n + j] * bv[p * n + j];
          g[i * k + p] += s;
        }
    }
    if (Tensor* gb = self.parent_grad(1)) {
      const double* av = self.parent_value(0).data();
      double* g = gb->data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = av[i * k + p];
          for (std::size_t j = 0; j < n; ++j) g[p * n + j] += aip * dy[i * n + j];
        }
    }
  });
}

inline Var add(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "add");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b.value()[i];
  return Var::from_op("add", std::move(y), {a, b}, [](Node& self) {
    for (std::size_t p = 0; p < 2; ++p)
      if (Tensor* g = self.parent_grad(p))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
  return Var::from_op("mul", std::move(y), {a, b}, [](Node& self) {
    if (Tensor* g = self.parent_grad(0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * self.parent_value(1)[i];
    if (Tensor* g = self.parent_grad(1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * self.parent_value(0)[i];
  });
}

inline Var scale(const Var& a, double s) {
  Tensor y = a.value();
  for (double& v : y.storage()) v *= s;
  return Var::from_op("scale", std::move(y), {a}, [s](Node& self) {
    if (Tensor* g = self.parent_grad(0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += s * self.grad[i];
  });
}

/// x[M,C] + b[C] broadcast over rows.
inline Var add_bias(const Var& x, const Var& b) {
  detail::require_rank(x, 2, "add_bias");
  const std::size_t m = x.rows(), c = x.cols();
  if (b.size() != c) throw DimensionError("add_bias: bias has " + std::to_string(b.size()) + " entries for " + std::to_string(c) + " columns");
  Tensor y = x.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < c; ++j) y.at(i, j) += b.value()[j];
  return Var::from_op("add_bias", std::move(y), {x, b}, [m, c](Node& self) {
    if (Tensor* g = self.parent_grad(0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (Tensor* g = self.parent_grad(1))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < c; ++j) (*g)[j] += self.grad.at(i, j);
  });
}

/// x·W (+ b). `bias` may be undefined.
inline Var linear(const Var& x, const Var& weight, const Var& bias = {}) {
  Var y = matmul(x, weight);
  return bias.defined() ? add_bias(y, bias) : y;
}

inline Var exp(const Var& x) {
  return detail::unary("exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Var softplus(const Var& x) {
  return detail::unary("softplus", x, detail::stable_softplus, [](double v, double) { return detail::stable_sigmoid(v); });
}

inline Var sigmoid(const Var& x) {
  return detail::unary("sigmoid", x, detail::stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

/// x·sigmoid(x).
inline Var silu(const Var& x) {
  return detail::unary(
      "silu", x, [](double v) { return v * detail::stable_sigmoid(v); },
      [](double v, double) {
        const double s = detail::stable_sigmoid(v);
        return s * (1.0 + v * (1.0 - s));
      });
}

/// Exact (erf) GELU.
inline Var gelu(const Var& x) {
  return detail::unary(
      "gelu", x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)); },
      [](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
        const double pdf = std::exp(-0.5 * v * v) * std::numbers::inv_sqrtpi / std::numbers::sqrt2;
        return cdf + v * pdf;
      });
}

/// Sigmoid-gated product x ⊙ silu(z).
inline Var gate(const Var& x, const Var& z) { return mul(x, silu(z)); }

/// Per-row normalization over the last axis of x[L,C].
inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
  detail::require_rank(x, 2, "layer_norm");
  const std::size_t l = x.rows(), c = x.cols();
  if (gamma.size() != c || beta.size() != c) throw DimensionError("layer_norm: affine parameters must have C entries");
  if (!(eps > 0.0)) throw DomainError("layer_norm: eps must be positive");
  Tensor xhat({l, c});
  std::vector<double> rstd(l);
  Tensor y({l, c});
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < l; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += xv.at(i, j);
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = xv.at(i, j) - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat.at(i, j) = (xv.at(i, j) - mean) * rstd[i];
      y.at(i, j) = xhat.at(i, j) * gamma.value()[j] + beta.value()[j];
    }
  }
  return Var::from_op("layer_norm", std::move(y), {x, gamma, beta},
                      [l, c, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
                        const Tensor& dy = self.grad;
                        const Tensor& gv = self.parent_value(1);
                        if (Tensor* gx = self.parent_grad(0)) {
                          for (std::size_t i = 0; i < l; ++i) {
                            double m1 = 0.0, m2 = 0.0;
                            for (std::size_t j = 0; j < c; ++j) {
                              const double dxh = dy.at(i, j) * gv[j];
                              m1 += dxh;
                              m2 += dxh * xhat.at(i, j);
                            }
                            m1 /= static_cast<double>(c);
                            m2 /= static_cast<double>(c);
                            for (std::size_t j = 0; j < c; ++j) {
                              const double dxh = dy.at(i, j) * gv[j];
                              gx->at(i, j) += rstd[i] * (dxh - m1 - xhat.at(i, j) * m2);
                            }
                          }
                        }
                        if (Tensor* gg = self.parent_grad(1))
                          for (std::size_t i = 0; i < l; ++i)
                            for (std::size_t j = 0; j < c; ++j) (*gg)[j] += dy.at(i, j) * xhat.at(i, j);
                        if (Tensor* gb = self.parent_grad(2))
                          for (std::size_t i = 0; i < l; ++i)
                            for (std::size_t j = 0; j < c; ++j) (*gb)[j] += dy.at(i, j);
                      });
}

/// Column-wise concatenation of row-aligned matrices.
inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = parts.front().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    detail::require_rank(p, 2, "concat_cols");
    if (p.rows() != m) throw DimensionError("concat_cols: row counts differ");
    widths.push_back(p.cols());
    total += p.cols();
  }
  Tensor y({m, total});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) y.at(i, off + j) = parts[k].value().at(i, j);
    off += widths[k];
  }
  return Var::from_op("concat_cols", std::move(y), parts, [m, total, widths](Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (Tensor* g = self.parent_grad(k))
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j) g->at(i, j) += self.grad[i * total + off + j];
      off += widths[k];
    }
  });
}

/// Columns [begin, begin+count) of x[M,C].
inline Var slice_cols(const Var& x, std::size_t begin, std::size_t count) {
  detail::require_rank(x, 2, "slice_cols");
  const std::size_t m = x.rows(), c = x.cols();
  if (count == 0 || begin + count > c) throw DimensionError("slice_cols: range out of bounds");
  Tensor y({m, count});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) y.at(i, j) = x.value().at(i, begin + j);
  return Var::from_op("slice_cols", std::move(y), {x}, [m, c, begin, count](Node& self) {
    if (Tensor* g = self.parent_grad(0))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < count; ++j) (*g)[i * c + begin + j] += self.grad.at(i, j);
  });
}

/// out[r] = x[index[r]]; the backward pass scatter-adds.
inline Var gather_rows(const Var& x, IndexVec index) {
  if (x.shape().empty()) throw DimensionError("gather_rows: rank-0 input");
  const std::size_t m = x.shape()[0];
  const std::size_t w = x.size() / m;
  if (index.empty()) throw DimensionError("gather_rows: empty index");
  for (std::int64_t r : index)
    if (r < 0 || static_cast<std::size_t>(r) >= m) throw RangeError("gather_rows: row index " + std::to_string(r) + " out of range");
  Shape shape = x.shape();
  shape[0] = index.size();
  Tensor y(shape);
  for (std::size_t r = 0; r < index.size(); ++r) {
    const double* src = x.value().data() + static_cast<std::size_t>(index[r]) * w;
    std::copy(src, src + w, y.data() + r * w);
  }
  return Var::from_op("gather_rows", std::move(y), {x}, [w, index = std::move(index)](Node& self) {
    if (Tensor* g = self.parent_grad(0))
      for (std::size_t r = 0; r < index.size(); ++r) {
        double* dst = g->data() + static_cast<std::size_t>(index[r]) * w;
        const double* src = self.grad.data() + r * w;
        for (std::size_t j = 0; j < w; ++j) dst[j] += src[j];
      }
  });
}

enum class Reduce { Mean, Max };

/// Reduces rows of x[M,C] into `num_segments` rows by segment id.
inline Var segment_reduce(const Var& x, const IndexVec& segment, std::size_t num_segments, Reduce reduce) {
  detail::require_rank(x, 2, "segment_reduce");
  const std::size_t m = x.rows(), c = x.cols();
  if (segment.size() != m) throw DimensionError("segment_reduce: one segment id per row required");
  std::vector<std::size_t> counts(num_segments, 0);
  for (std::int64_t s : segment) {
    if (s < 0 || static_cast<std::size_t>(s) >= num_segments) throw RangeError("segment_reduce: segment id out of range");
    ++counts[static_cast<std::size_t>(s)];
  }
  for (std::size_t cnt : counts)
    if (cnt == 0) throw ContractError("segment_reduce: empty segment");
  Tensor y({num_segments, c});
  const Tensor& xv = x.value();
  if (reduce == Reduce::Mean) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < c; ++j) y.at(static_cast<std::size_t>(segment[i]), j) += xv.at(i, j);
    for (std::size_t s = 0; s < num_segments; ++s)
      for (std::size_t j = 0; j < c; ++j) y.at(s, j) /= static_cast<double>(counts[s]);
    return Var::from_op("segment_mean", std::move(y), {x}, [segment, counts, c](Node& self) {
      if (Tensor* g = self.parent_grad(0))
        for (std::size_t i = 0; i < segment.size(); ++i) {
          const auto s = static_cast<std::size_t>(segment[i]);
          for (std::size_t j = 0; j < c; ++j) g->at(i, j) += self.grad.at(s, j) / static_cast<double>(counts[s]);
        }
    });
  }
  // Max: the first row (lowest index) attaining the maximum receives the gradient.
  std::vector<std::int64_t> arg(num_segments * c, -1);
  for (std::size_t i = 0; i < m; ++i) {
    const auto s = static_cast<std::size_t>(segment[i]);
    for (std::size_t j = 0; j < c; ++j) {
      std::int64_t& a = arg[s * c + j];
      if (a < 0 || xv.at(i, j) > xv.at(static_cast<std::size_t>(a), j)) a = static_cast<std::int64_t>(i);
    }
  }
  for (std::size_t s = 0; s < num_segments; ++s)
    for (std::size_t j = 0; j < c; ++j) y.at(s, j) = xv.at(static_cast<std::size_t>(arg[s * c + j]), j);
  return Var::from_op("segment_max", std::move(y), {x}, [arg = std::move(arg), c](Node& self) {
    if (Tensor* g = self.parent_grad(0))
      for (std::size_t k = 0; k < arg.size(); ++k) g->at(static_cast<std::size_t>(arg[k]), k % c) += self.grad[k];
  });
}

inline Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return Var::from_op("sum", Tensor::scalar(s), {x}, [](Node& self) {
    if (Tensor* g = self.parent_grad(0))
      for (double& v : g->storage()) v += self.grad[0];
  });
}

/// Σ w ⊙ x with a constant weight tensor of the same size.
inline Var weighted_sum(const Var& x, const Tensor& w) {
  if (w.size() != x.size()) throw DimensionError("weighted_sum: weight size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * x.value()[i];
  return Var::from_op("weighted_sum", Tensor::scalar(s), {x}, [w](Node& self) {
    if (Tensor* g = self.parent_grad(0))
      for (std::size_t i = 0; i < w.size(); ++i) (*g)[i] += self.grad[0] * w[i];
  });
}

/// Mean negative log-softmax over rows whose label is not `ignore_index`.
/// All rows ignored gives 0 with zero gradient.
inline Var cross_entropy_loss(const Var& logits, std::span<const int> labels, int ignore_index = -1) {
  detail::require_rank(logits, 2, "cross_entropy_loss");
  const std::size_t n = logits.rows(), k = logits.cols();
  if (labels.size() != n) throw DimensionError("cross_entropy_loss: one label per row required");
  Tensor prob({n, k});
  std::vector<int> lab(labels.begin(), labels.end());
  std::size_t counted = 0;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = lab[i];
    if (y == ignore_index) continue;
    if (y < 0 || static_cast<std::size_t>(y) >= k) throw RangeError("cross_entropy_loss: label " + std::to_string(y) + " out of range");
    const auto row = logits.value().row(i);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    total += lse - row[static_cast<std::size_t>(y)];
    for (std::size_t j = 0; j < k; ++j) prob.at(i, j) = std::exp(row[j] - lse);
    ++counted;
  }
  const double loss = counted ? total / static_cast<double>(counted) : 0.0;
  return Var::from_op("cross_entropy_loss", Tensor::scalar(loss), {logits},
                      [prob = std::move(prob), lab = std::move(lab), counted, ignore_index, k](Node& self) {
                        Tensor* g = self.parent_grad(0);
                        if (!g || counted == 0) return;
                        const double s = self.grad[0] / static_cast<double>(counted);
                        for (std::size_t i = 0; i < lab.size(); ++i) {
                          if (lab[i] == ignore_index) continue;
                          for (std::size_t j = 0; j < k; ++j) g->at(i, j) += s * prob.at(i, j);
                          g->at(i, static_cast<std::size_t>(lab[i])) -= s;
                        }
                      });
}

}  // namespace spm
