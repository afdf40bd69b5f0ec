#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "dcp/tensor.hpp"

namespace dcp {

// Elementwise arithmetic. Operands must have identical shapes, or one shape
// must be a trailing suffix of the other (leading-axis batch broadcast).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);
/// a / s for a one-element tensor s; differentiable in both.
Tensor div_scalar(const Tensor& a, const Tensor& s);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double c) { return scale(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }

/// [..., m, k] x [k, n] -> [..., m, n], or batched [..., m, k] x [..., k, n]
/// with identical leading extents.
Tensor matmul(const Tensor& a, const Tensor& b);
/// Swaps the last two axes.
Tensor transpose(const Tensor& a);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& perm);
Tensor reshape(const Tensor& a, Shape shape);

/// Max-subtracted softmax along `axis` (negative counts from the end).
/// -inf entries are treated as masked (probability 0); NaN, +inf or a fully
/// masked row raise NumericError.
Tensor softmax(const Tensor& x, int axis = -1);
/// Normalizes over the last axis; gamma and beta have that axis' extent.
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
/// Exact (erf) GELU.
Tensor gelu(const Tensor& x);

/// Rows of `table` [V x d] gathered by `ids`, shaped index_shape + [d].
Tensor embedding_lookup(const Tensor& table, std::span<const std::int64_t> ids, Shape index_shape);
/// Gathers slices along axis 0; repeated indices are allowed.
Tensor select_rows(const Tensor& x, std::span<const std::size_t> rows);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
/// Mean over `axis`, which is removed from the shape.
Tensor mean_pool(const Tensor& x, std::size_t axis);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Mean softmax cross-entropy of rows of `logits` (last axis = classes)
/// over rows whose label is >= 0. Label -1 marks an ignored row.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> labels);

/// Row-wise cosine similarity over the last axis. `b` may have the full shape
/// of `a` or just its last extent. Zero-norm rows yield 0 and are reported
/// through the degenerate-input flag.
Tensor cosine_sim(const Tensor& a, const Tensor& b);
/// Row-wise unit normalization over the last axis (zero rows stay zero and
/// are flagged).
Tensor l2_normalize(const Tensor& x);

/// Plain cosine similarity; sets *degenerate when either norm is zero.
double cosine_value(std::span<const double> u, std::span<const double> v, bool* degenerate = nullptr);

// Degenerate-input flag for zero-norm cosine operands (thread-local).
std::size_t degenerate_count();
void reset_degenerate_count();
void note_degenerate(const char* where);

/// While alive, a zero-norm cosine operand throws NumericError instead of
/// returning 0.
class StrictDegenerateGuard {
 public:
  StrictDegenerateGuard();
  ~StrictDegenerateGuard();
  StrictDegenerateGuard(const StrictDegenerateGuard&) = delete;
  StrictDegenerateGuard& operator=(const StrictDegenerateGuard&) = delete;

 private:
  bool previous_;
};

}  // namespace dcp
