#include "dcp/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

#include "dcp/errors.hpp"
#include "op_support.hpp"

namespace dcp {

using detail::make_result;
using detail::Node;

namespace {

thread_local std::size_t t_degenerate_count = 0;
thread_local bool t_strict_degenerate = false;

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

std::size_t prod(const Shape& s, std::size_t begin, std::size_t end) {
  std::size_t n = 1;
  for (std::size_t i = begin; i < end; ++i) n *= s[i];
  return n;
}

std::size_t normalize_axis(int axis, std::size_t rank) {
  int r = static_cast<int>(rank);
  int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(a);
}

enum class BinOp { add, sub, mul };

Tensor binary(const Tensor& a, const Tensor& b, BinOp op, const char* name) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  bool a_big;
  if (sa == sb || is_suffix(sb, sa)) {
    a_big = true;
  } else if (is_suffix(sa, sb)) {
    a_big = false;
  } else {
    throw DimensionError(std::string(name) + ": incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
  }
  const Shape out_shape = a_big ? sa : sb;
  const std::size_t n = numel_of(out_shape);
  const std::size_t na = a.numel();
  const std::size_t nb = b.numel();
  const auto da = a.data();
  const auto db = b.data();
  std::vector<double> out(n);
  const std::size_t blk = a_big ? nb : na;
  for (std::size_t o = 0; o < n; o += blk) {
    for (std::size_t j = 0; j < blk; ++j) {
      const std::size_t i = o + j;
      const double x = da[a_big ? i : j];
      const double y = db[a_big ? j : i];
      out[i] = op == BinOp::add ? x + y : op == BinOp::sub ? x - y : x * y;
    }
  }
  return make_result(out_shape, std::move(out), {a, b}, [op, a_big, n, na, nb](Node& self) {
    Node& na_node = *self.inputs[0];
    Node& nb_node = *self.inputs[1];
    double* ga = na_node.grad_buffer();
    double* gb = nb_node.grad_buffer();
    const double* g = self.grad.data();
    const std::size_t blk = a_big ? nb : na;
    for (std::size_t o = 0; o < n; o += blk) {
      for (std::size_t j = 0; j < blk; ++j) {
        const std::size_t i = o + j;
        const std::size_t ia = a_big ? i : j;
        const std::size_t ib = a_big ? j : i;
        if (ga) ga[ia] += op == BinOp::mul ? g[i] * nb_node.data[ib] : g[i];
        if (gb) gb[ib] += op == BinOp::add ? g[i] : op == BinOp::sub ? -g[i] : g[i] * na_node.data[ia];
      }
    }
  });
}

// C[m x n] += A[m x k] * B[k x n]
void gemm_nn(const double* A, const double* B, double* C, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* c = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double a = A[i * k + p];
      const double* b = B + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += a * b[j];
    }
  }
}

// C[k x n] += A[m x k]^T * B[m x n]
void gemm_tn(const double* A, const double* B, double* C, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* b = B + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double a = A[i * k + p];
      double* c = C + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += a * b[j];
    }
  }
}

void transpose_into(const double* src, double* dst, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

double erf_gelu_cdf(double x) { return 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2)); }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::mul, "mul"); }

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  return make_result(a.shape(), std::move(out), {a}, [factor](Node& self) {
    double* ga = self.inputs[0]->grad_buffer();
    if (!ga) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * factor;
  });
}

Tensor add_scalar(const Tensor& a, double offset) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v += offset;
  return make_result(a.shape(), std::move(out), {a}, [](Node& self) {
    double* ga = self.inputs[0]->grad_buffer();
    if (!ga) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
  });
}

Tensor div_scalar(const Tensor& a, const Tensor& s) {
  if (s.numel() != 1) throw DimensionError("div_scalar: divisor must have one element, got " + shape_str(s.shape()));
  const double d = s.data()[0];
  if (d == 0.0) throw NumericError("div_scalar: division by zero");
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v /= d;
  return make_result(a.shape(), std::move(out), {a, s}, [](Node& self) {
    Node& an = *self.inputs[0];
    Node& sn = *self.inputs[1];
    const double d = sn.data[0];
    if (double* ga = an.grad_buffer()) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] / d;
    }
    if (double* gs = sn.grad_buffer()) {
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * an.data[i];
      gs[0] += -acc / (d * d);
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  auto mismatch = [&] {
    return DimensionError("matmul: shape mismatch " + shape_str(sa) + " x " + shape_str(sb));
  };
  if (sa.size() < 2 || sb.size() < 2) throw mismatch();
  const std::size_t m = sa[sa.size() - 2];
  const std::size_t k = sa[sa.size() - 1];
  if (sb[sb.size() - 2] != k) throw mismatch();
  const std::size_t n = sb[sb.size() - 1];
  const bool b_batched = sb.size() > 2;
  if (b_batched) {
    if (sb.size() != sa.size() || !std::equal(sa.begin(), sa.end() - 2, sb.begin())) throw mismatch();
  }
  const std::size_t batch = prod(sa, 0, sa.size() - 2);
  Shape out_shape(sa.begin(), sa.end() - 1);
  out_shape.push_back(n);
  std::vector<double> out(batch * m * n, 0.0);
  const double* A = a.data().data();
  const double* B = b.data().data();
  for (std::size_t t = 0; t < batch; ++t) {
    gemm_nn(A + t * m * k, B + (b_batched ? t * k * n : 0), out.data() + t * m * n, m, k, n);
  }
  return make_result(std::move(out_shape), std::move(out), {a, b}, [batch, m, k, n, b_batched](Node& self) {
    Node& an = *self.inputs[0];
    Node& bn = *self.inputs[1];
    const double* G = self.grad.data();
    if (double* ga = an.grad_buffer()) {
      std::vector<double> bt(k * n);
      for (std::size_t t = 0; t < batch; ++t) {
        if (t == 0 || b_batched) transpose_into(bn.data.data() + (b_batched ? t * k * n : 0), bt.data(), k, n);
        gemm_nn(G + t * m * n, bt.data(), ga + t * m * k, m, n, k);
      }
    }
    if (double* gb = bn.grad_buffer()) {
      for (std::size_t t = 0; t < batch; ++t) {
        gemm_tn(an.data.data() + t * m * k, G + t * m * n, gb + (b_batched ? t * k * n : 0), m, k, n);
      }
    }
  });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& perm) {
  const Shape& s = a.shape();
  const std::size_t r = s.size();
  if (perm.size() != r) throw DimensionError("permute: permutation rank mismatch for " + shape_str(s));
  std::vector<bool> seen(r, false);
  for (auto p : perm) {
    if (p >= r || seen[p]) throw DimensionError("permute: invalid permutation");
    seen[p] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = s[perm[i]];
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * s[i];
  // src_index[flat_out] mapping, shared by forward and backward.
  const std::size_t n = a.numel();
  auto index = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> counter(r, 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < r; ++i) src += counter[i] * in_stride[perm[i]];
    (*index)[flat] = src;
    for (std::size_t i = r; i-- > 0;) {
      if (++counter[i] < out_shape[i]) break;
      counter[i] = 0;
    }
  }
  std::vector<double> out(n);
  const auto d = a.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = d[(*index)[i]];
  return make_result(std::move(out_shape), std::move(out), {a}, [index](Node& self) {
    double* ga = self.inputs[0]->grad_buffer();
    if (!ga) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[(*index)[i]] += self.grad[i];
  });
}

Tensor transpose(const Tensor& a) {
  const std::size_t r = a.rank();
  if (r < 2) throw DimensionError("transpose: rank < 2 for " + shape_str(a.shape()));
  std::vector<std::size_t> perm(r);
  for (std::size_t i = 0; i < r; ++i) perm[i] = i;
  std::swap(perm[r - 1], perm[r - 2]);
  return permute(a, perm);
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel_of(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result(std::move(shape), std::move(out), {a}, [](Node& self) {
    double* ga = self.inputs[0]->grad_buffer();
    if (!ga) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
  });
}

Tensor softmax(const Tensor& x, int axis) {
  const Shape& s = x.shape();
  if (s.empty()) throw DimensionError("softmax: rank-0 input");
  const std::size_t ax = normalize_axis(axis, s.size());
  const std::size_t outer = prod(s, 0, ax);
  const std::size_t n = s[ax];
  const std::size_t inner = prod(s, ax + 1, s.size());
  const auto d = x.data();
  std::vector<double> out(d.size());
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = kNegInf;
      for (std::size_t j = 0; j < n; ++j) {
        const double v = d[base + j * inner];
        if (std::isnan(v) || v == std::numeric_limits<double>::infinity()) {
          throw NumericError("softmax: non-finite input");
        }
        mx = std::max(mx, v);
      }
      if (mx == kNegInf) throw NumericError("softmax: every entry of a row is masked");
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(d[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= total;
    }
  }
  return make_result(s, std::move(out), {x}, [outer, n, inner](Node& self) {
    double* gx = self.inputs[0]->grad_buffer();
    if (!gx) return;
    const double* y = self.data.data();
    const double* g = self.grad.data();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += g[base + j * inner] * y[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t i = base + j * inner;
          gx[i] += y[i] * (g[i] - dot);
        }
      }
    }
  });
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const Shape& s = x.shape();
  if (s.empty()) throw DimensionError("layernorm: rank-0 input");
  const std::size_t d = s.back();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw DimensionError("layernorm: gamma/beta " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                         " do not match " + shape_str(s));
  }
  const std::size_t rows = x.numel() / d;
  const auto xd = x.data();
  const auto gd = gamma.data();
  const auto bd = beta.data();
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * inv;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * gd[j] + bd[j];
    }
  }
  return make_result(s, std::move(out), {x, gamma, beta}, [xhat, rstd, rows, d](Node& self) {
    Node& xn = *self.inputs[0];
    Node& gn = *self.inputs[1];
    Node& bn = *self.inputs[2];
    const double* g = self.grad.data();
    double* gx = xn.grad_buffer();
    double* gg = gn.grad_buffer();
    double* gb = bn.grad_buffer();
    std::vector<double> gh(d);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* h = xhat->data() + r * d;
      const double* gr = g + r * d;
      if (gg)
        for (std::size_t j = 0; j < d; ++j) gg[j] += gr[j] * h[j];
      if (gb)
        for (std::size_t j = 0; j < d; ++j) gb[j] += gr[j];
      if (!gx) continue;
      double mean_gh = 0.0;
      double mean_ghh = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        gh[j] = gr[j] * gn.data[j];
        mean_gh += gh[j];
        mean_ghh += gh[j] * h[j];
      }
      mean_gh /= static_cast<double>(d);
      mean_ghh /= static_cast<double>(d);
      const double inv = (*rstd)[r];
      for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += inv * (gh[j] - mean_gh - h[j] * mean_ghh);
    }
  });
}

Tensor gelu(const Tensor& x) {
  const auto d = x.data();
  std::vector<double> out(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) out[i] = d[i] * erf_gelu_cdf(d[i]);
  return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
    Node& xn = *self.inputs[0];
    double* gx = xn.grad_buffer();
    if (!gx) return;
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double v = xn.data[i];
      const double dydx = erf_gelu_cdf(v) + v * std::exp(-0.5 * v * v) * inv_sqrt_2pi;
      gx[i] += self.grad[i] * dydx;
    }
  });
}

Tensor select_rows(const Tensor& x, std::span<const std::size_t> rows) {
  const Shape& s = x.shape();
  if (s.empty()) throw DimensionError("select_rows: rank-0 input");
  if (rows.empty()) throw DimensionError("select_rows: empty index list");
  const std::size_t n_rows = s[0];
  const std::size_t width = x.numel() / n_rows;
  for (auto r : rows) {
    if (r >= n_rows) {
      throw std::out_of_range("select_rows: index " + std::to_string(r) + " out of range for " + shape_str(s));
    }
  }
  Shape out_shape = s;
  out_shape[0] = rows.size();
  std::vector<double> out(rows.size() * width);
  const auto d = x.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(d.begin() + rows[i] * width, width, out.begin() + i * width);
  }
  auto idx = std::make_shared<std::vector<std::size_t>>(rows.begin(), rows.end());
  return make_result(std::move(out_shape), std::move(out), {x}, [idx, width](Node& self) {
    double* gx = self.inputs[0]->grad_buffer();
    if (!gx) return;
    for (std::size_t i = 0; i < idx->size(); ++i) {
      double* dst = gx + (*idx)[i] * width;
      const double* src = self.grad.data() + i * width;
      for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
    }
  });
}

Tensor embedding_lookup(const Tensor& table, std::span<const std::int64_t> ids, Shape index_shape) {
  if (table.rank() != 2) throw DimensionError("embedding_lookup: table must be 2-D, got " + shape_str(table.shape()));
  if (numel_of(index_shape) != ids.size()) {
    throw DimensionError("embedding_lookup: " + std::to_string(ids.size()) + " ids for index shape " +
                         shape_str(index_shape));
  }
  const auto vocab = static_cast<std::int64_t>(table.dim(0));
  std::vector<std::size_t> rows(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= vocab) {
      throw std::out_of_range("embedding_lookup: id " + std::to_string(ids[i]) + " outside vocabulary of " +
                              std::to_string(vocab));
    }
    rows[i] = static_cast<std::size_t>(ids[i]);
  }
  index_shape.push_back(table.dim(1));
  return reshape(select_rows(table, rows), std::move(index_shape));
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw DimensionError("concat: axis out of range for " + shape_str(s0));
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == s0[i];
    if (!ok) throw DimensionError("concat: incompatible shapes " + shape_str(s0) + " and " + shape_str(s));
    total += s[axis];
  }
  const std::size_t outer = prod(s0, 0, axis);
  const std::size_t inner = prod(s0, axis + 1, s0.size());
  Shape out_shape = s0;
  out_shape[axis] = total;
  std::vector<double> out(outer * total * inner);
  auto extents = std::make_shared<std::vector<std::size_t>>();
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t e = p.shape()[axis];
    extents->push_back(e);
    const auto d = p.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(d.begin() + o * e * inner, e * inner, out.begin() + (o * total + offset) * inner);
    }
    offset += e;
  }
  return make_result(std::move(out_shape), std::move(out), parts, [extents, outer, inner, total](Node& self) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      const std::size_t e = (*extents)[k];
      if (double* gp = self.inputs[k]->grad_buffer()) {
        for (std::size_t o = 0; o < outer; ++o) {
          const double* src = self.grad.data() + (o * total + offset) * inner;
          double* dst = gp + o * e * inner;
          for (std::size_t j = 0; j < e * inner; ++j) dst[j] += src[j];
        }
      }
      offset += e;
    }
  });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape& s = x.shape();
  if (axis >= s.size()) throw DimensionError("slice: axis out of range for " + shape_str(s));
  if (length == 0 || start + length > s[axis]) {
    throw DimensionError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") outside extent " + std::to_string(s[axis]));
  }
  const std::size_t outer = prod(s, 0, axis);
  const std::size_t inner = prod(s, axis + 1, s.size());
  const std::size_t full = s[axis];
  Shape out_shape = s;
  out_shape[axis] = length;
  std::vector<double> out(outer * length * inner);
  const auto d = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(d.begin() + (o * full + start) * inner, length * inner, out.begin() + o * length * inner);
  }
  return make_result(std::move(out_shape), std::move(out), {x}, [outer, inner, full, start, length](Node& self) {
    double* gx = self.inputs[0]->grad_buffer();
    if (!gx) return;
    for (std::size_t o = 0; o < outer; ++o) {
      const double* src = self.grad.data() + o * length * inner;
      double* dst = gx + (o * full + start) * inner;
      for (std::size_t j = 0; j < length * inner; ++j) dst[j] += src[j];
    }
  });
}

Tensor mean_pool(const Tensor& x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size()) throw DimensionError("mean_pool: axis out of range for " + shape_str(s));
  const std::size_t outer = prod(s, 0, axis);
  const std::size_t n = s[axis];
  const std::size_t inner = prod(s, axis + 1, s.size());
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out_shape.push_back(s[i]);
  std::vector<double> out(outer * inner, 0.0);
  const auto d = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < n; ++j) {
      const double* row = d.data() + (o * n + j) * inner;
      double* dst = out.data() + o * inner;
      for (std::size_t in = 0; in < inner; ++in) dst[in] += row[in];
    }
  }
  const double inv = 1.0 / static_cast<double>(n);
  for (auto& v : out) v *= inv;
  return make_result(std::move(out_shape), std::move(out), {x}, [outer, n, inner, inv](Node& self) {
    double* gx = self.inputs[0]->grad_buffer();
    if (!gx) return;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t in = 0; in < inner; ++in) gx[(o * n + j) * inner + in] += self.grad[o * inner + in] * inv;
  });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return make_result({}, {total}, {x}, [](Node& self) {
    double* gx = self.inputs[0]->grad_buffer();
    if (!gx) return;
    const double g = self.grad[0];
    for (std::size_t i = 0; i < self.inputs[0]->data.size(); ++i) gx[i] += g;
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> labels) {
  const Shape& s = logits.shape();
  if (s.empty()) throw DimensionError("cross_entropy: rank-0 logits");
  const std::size_t classes = s.back();
  const std::size_t rows = logits.numel() / classes;
  if (labels.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(rows) +
                         " rows of " + shape_str(s));
  }
  std::size_t count = 0;
  for (auto y : labels) {
    if (y < -1 || y >= static_cast<std::int64_t>(classes)) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
    }
    if (y >= 0) ++count;
  }
  if (count == 0) throw DimensionError("cross_entropy: no labeled rows");
  const auto d = logits.data();
  auto probs = std::make_shared<std::vector<double>>(logits.numel(), 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] < 0) continue;
    const double* z = d.data() + r * classes;
    double mx = z[0];
    for (std::size_t j = 0; j < classes; ++j) {
      if (!std::isfinite(z[j])) throw NumericError("cross_entropy: non-finite logit");
      mx = std::max(mx, z[j]);
    }
    double se = 0.0;
    for (std::size_t j = 0; j < classes; ++j) se += std::exp(z[j] - mx);
    const double lse = mx + std::log(se);
    for (std::size_t j = 0; j < classes; ++j) (*probs)[r * classes + j] = std::exp(z[j] - lse);
    total += lse - z[labels[r]];
  }
  const double inv = 1.0 / static_cast<double>(count);
  auto lab = std::make_shared<std::vector<std::int64_t>>(labels.begin(), labels.end());
  return make_result({}, {total * inv}, {logits}, [probs, lab, rows, classes, inv](Node& self) {
    double* gx = self.inputs[0]->grad_buffer();
    if (!gx) return;
    const double g = self.grad[0] * inv;
    for (std::size_t r = 0; r < rows; ++r) {
      const auto y = (*lab)[r];
      if (y < 0) continue;
      for (std::size_t j = 0; j < classes; ++j) {
        const double target = static_cast<std::int64_t>(j) == y ? 1.0 : 0.0;
        gx[r * classes + j] += g * ((*probs)[r * classes + j] - target);
      }
    }
  });
}

double cosine_value(std::span<const double> u, std::span<const double> v, bool* degenerate) {
  if (u.size() != v.size()) throw DimensionError("cosine: length mismatch");
  double dot = 0.0;
  double uu = 0.0;
  double vv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  if (uu == 0.0 || vv == 0.0) {
    if (degenerate) *degenerate = true;
    return 0.0;
  }
  if (degenerate) *degenerate = false;
  return std::clamp(dot / (std::sqrt(uu) * std::sqrt(vv)), -1.0, 1.0);
}

Tensor cosine_sim(const Tensor& a_in, const Tensor& b_in) {
  const bool swap = a_in.rank() < b_in.rank();
  const Tensor& a = swap ? b_in : a_in;
  const Tensor& b = swap ? a_in : b_in;
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.empty() || !(sa == sb || (sb.size() == 1 && sb[0] == sa.back()))) {
    throw DimensionError("cosine_sim: incompatible shapes " + shape_str(a_in.shape()) + " and " +
                         shape_str(b_in.shape()));
  }
  const std::size_t d = sa.back();
  const std::size_t rows = a.numel() / d;
  const bool b_shared = sb.size() == 1 && sa.size() > 1;
  Shape out_shape(sa.begin(), sa.end() - 1);
  auto norms = std::make_shared<std::vector<double>>(2 * rows);
  std::vector<double> out(rows);
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* u = ad.data() + r * d;
    const double* v = bd.data() + (b_shared ? 0 : r * d);
    bool degenerate = false;
    out[r] = cosine_value({u, d}, {v, d}, &degenerate);
    if (degenerate) {
      note_degenerate("cosine_sim");
      (*norms)[2 * r] = 0.0;
      (*norms)[2 * r + 1] = 0.0;
      continue;
    }
    double uu = 0.0;
    double vv = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      uu += u[i] * u[i];
      vv += v[i] * v[i];
    }
    (*norms)[2 * r] = std::sqrt(uu);
    (*norms)[2 * r + 1] = std::sqrt(vv);
  }
  return make_result(std::move(out_shape), std::move(out), {a, b}, [norms, rows, d, b_shared](Node& self) {
    Node& an = *self.inputs[0];
    Node& bn = *self.inputs[1];
    double* ga = an.grad_buffer();
    double* gb = bn.grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const double nu = (*norms)[2 * r];
      const double nv = (*norms)[2 * r + 1];
      if (nu == 0.0 || nv == 0.0) continue;
      const double* u = an.data.data() + r * d;
      const double* v = bn.data.data() + (b_shared ? 0 : r * d);
      double dot = 0.0;
      for (std::size_t i = 0; i < d; ++i) dot += u[i] * v[i];
      const double c = dot / (nu * nv);
      const double g = self.grad[r];
      if (ga) {
        for (std::size_t i = 0; i < d; ++i) ga[r * d + i] += g * (v[i] / (nu * nv) - c * u[i] / (nu * nu));
      }
      if (gb) {
        double* dst = gb + (b_shared ? 0 : r * d);
        for (std::size_t i = 0; i < d; ++i) dst[i] += g * (u[i] / (nu * nv) - c * v[i] / (nv * nv));
      }
    }
  });
}

Tensor l2_normalize(const Tensor& x) {
  const Shape& s = x.shape();
  if (s.empty()) throw DimensionError("l2_normalize: rank-0 input");
  const std::size_t d = s.back();
  const std::size_t rows = x.numel() / d;
  auto norms = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(x.numel(), 0.0);
  const auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t i = 0; i < d; ++i) ss += xd[r * d + i] * xd[r * d + i];
    const double nrm = std::sqrt(ss);
    (*norms)[r] = nrm;
    if (nrm == 0.0) {
      note_degenerate("l2_normalize");
      continue;
    }
    for (std::size_t i = 0; i < d; ++i) out[r * d + i] = xd[r * d + i] / nrm;
  }
  return make_result(s, std::move(out), {x}, [norms, rows, d](Node& self) {
    double* gx = self.inputs[0]->grad_buffer();
    if (!gx) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double nrm = (*norms)[r];
      if (nrm == 0.0) continue;
      const double* y = self.data.data() + r * d;
      const double* g = self.grad.data() + r * d;
      double gy = 0.0;
      for (std::size_t i = 0; i < d; ++i) gy += g[i] * y[i];
      for (std::size_t i = 0; i < d; ++i) gx[r * d + i] += (g[i] - y[i] * gy) / nrm;
    }
  });
}

std::size_t degenerate_count() { return t_degenerate_count; }
void reset_degenerate_count() { t_degenerate_count = 0; }

void note_degenerate(const char* where) {
  if (t_strict_degenerate) throw NumericError(std::string(where) + ": zero-norm operand");
  ++t_degenerate_count;
}

StrictDegenerateGuard::StrictDegenerateGuard() : previous_(t_strict_degenerate) { t_strict_degenerate = true; }
StrictDegenerateGuard::~StrictDegenerateGuard() { t_strict_degenerate = previous_; }

}  // namespace dcp
