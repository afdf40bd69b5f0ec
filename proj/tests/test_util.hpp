#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "dcp/config.hpp"
#include "dcp/corpus.hpp"
#include "dcp/rng.hpp"
#include "dcp/tensor.hpp"

namespace testutil {

inline dcp::Tensor random_tensor(dcp::Rng& rng, dcp::Shape shape, bool grad = false, double lo = -1.0,
                                 double hi = 1.0) {
  std::vector<double> v(dcp::numel_of(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return dcp::Tensor(std::move(shape), std::move(v), grad);
}

inline std::vector<double> to_vec(const dcp::Tensor& t) { return {t.data().begin(), t.data().end()}; }

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return a.size() == b.size() ? m : INFINITY;
}

// Plain triple loop, independent of the library kernels.
inline std::vector<double> matmul_oracle(const std::vector<double>& a, const std::vector<double>& b, std::size_t m,
                                         std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = s;
    }
  return c;
}

inline std::vector<double> softmax_oracle(const std::vector<double>& x) {
  double mx = x[0];
  for (double v : x) mx = std::max(mx, v);
  std::vector<double> e(x.size());
  double z = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) z += (e[i] = std::exp(x[i] - mx));
  for (auto& v : e) v /= z;
  return e;
}

inline double cross_entropy_oracle(const std::vector<double>& logits, std::size_t classes,
                                   const std::vector<std::int64_t>& labels) {
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] < 0) continue;
    std::vector<double> row(logits.begin() + r * classes, logits.begin() + (r + 1) * classes);
    total += -std::log(softmax_oracle(row)[labels[r]]);
    ++count;
  }
  return total / static_cast<double>(count);
}

inline double cosine_oracle(const double* u, const double* v, std::size_t d) {
  double uv = 0.0, uu = 0.0, vv = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    uv += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  return uv / (std::sqrt(uu) * std::sqrt(vv));
}

// Small model for fast structural tests.
inline dcp::ModelConfig small_config() {
  dcp::ModelConfig c;
  c.d_text = 8;
  c.d_vision = 12;
  c.d_hidden = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 24;
  c.vocab_size = 40;
  c.max_text_len = 8;
  c.patch_count = 6;
  c.patch_dim = 5;
  c.pool_size_v = 10;
  c.pool_size_t = 12;
  c.prompt_len_v = 2;
  c.prompt_len_t = 3;
  c.n_sel = 2;
  c.decoder_layers = 1;
  c.decoder_heads = 2;
  c.context_len = 40;
  c.batch_size = 4;
  return c;
}

// Four concepts fit the six patch locations of small_config().
inline dcp::CorpusConfig small_corpus(const dcp::ModelConfig& c, std::size_t pairs) {
  dcp::CorpusConfig s = dcp::corpus_config_for(c);
  s.n_pairs = pairs;
  s.n_concepts = 4;
  s.n_fillers = 2;
  s.text_len = c.max_text_len;
  return s;
}

// Sort every similarity, highest first, lower index first among equals.
inline std::vector<std::size_t> selection_oracle(const std::vector<double>& keys, const std::vector<double>& query,
                                                 std::size_t pool, std::size_t n_sel) {
  const std::size_t d = query.size();
  std::vector<std::pair<double, std::size_t>> sims;
  for (std::size_t i = 0; i < pool; ++i) sims.push_back({cosine_oracle(&keys[i * d], query.data(), d), i});
  std::stable_sort(sims.begin(), sims.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < n_sel; ++i) out.push_back(sims[i].second);
  return out;
}

}  // namespace testutil
