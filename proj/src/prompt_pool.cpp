#include "dcp/prompt_pool.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dcp/errors.hpp"
#include "dcp/ops.hpp"

namespace dcp {

const char* modality_name(Modality m) { return m == Modality::visual ? "visual" : "textual"; }

PromptPool::PromptPool(Modality modality, std::size_t pool_size, std::size_t key_dim, std::size_t prompt_len,
                       Rng& rng)
    : modality_(modality), usage_(pool_size, 0) {
  if (pool_size == 0 || key_dim == 0 || prompt_len == 0) throw ConfigError("prompt pool extents must be positive");
  std::vector<double> keys(pool_size * key_dim);
  for (std::size_t i = 0; i < pool_size; ++i) {
    double* row = keys.data() + i * key_dim;
    double norm = 0.0;
    while (norm == 0.0) {
      double ss = 0.0;
      for (std::size_t j = 0; j < key_dim; ++j) {
        row[j] = rng.uniform(-0.5, 0.5);
        ss += row[j] * row[j];
      }
      norm = std::sqrt(ss);
    }
    for (std::size_t j = 0; j < key_dim; ++j) row[j] /= norm;
  }
  keys_ = Tensor({pool_size, key_dim}, std::move(keys), true);

  std::vector<double> values(pool_size * prompt_len * key_dim);
  for (auto& v : values) v = rng.normal(0.0, 0.02);
  values_ = Tensor({pool_size, prompt_len, key_dim}, std::move(values), true);

  for (auto& r : roles_) {
    std::vector<double> e(key_dim);
    for (auto& v : e) v = rng.normal(0.0, 0.02);
    r = Tensor({key_dim}, std::move(e), true);
  }
}

void PromptPool::record_selection(std::span<const std::size_t> indices) {
  for (auto i : indices) ++usage_.at(i);
  ++calls_;
}

void PromptPool::set_usage(std::vector<std::uint64_t> usage, std::uint64_t calls) {
  if (usage.size() != size()) throw DimensionError("prompt pool usage length mismatch");
  usage_ = std::move(usage);
  calls_ = calls;
}

void PromptPool::collect(ParameterList& out, const std::string& prefix) const {
  out.push_back({prefix + ".keys", keys_});
  out.push_back({prefix + ".values", values_});
  out.push_back({prefix + ".role_visual", roles_[0]});
  out.push_back({prefix + ".role_textual", roles_[1]});
}

Tensor query_fn(const Tensor& input_embedding, std::size_t key_dim) {
  if (input_embedding.rank() != 2) {
    throw DimensionError("query_fn: expected [seq_len x d], got " + shape_str(input_embedding.shape()));
  }
  if (input_embedding.dim(1) != key_dim) {
    throw DimensionError("query_fn: embedding dim " + std::to_string(input_embedding.dim(1)) +
                         " does not match key dim " + std::to_string(key_dim));
  }
  return mean_pool(input_embedding, 0);
}

Tensor cross_query(const Tensor& input_embedding, const PromptPool& target, const Tensor* projection) {
  if (input_embedding.rank() != 2) {
    throw DimensionError("cross_query: expected [seq_len x d], got " + shape_str(input_embedding.shape()));
  }
  const std::size_t d_in = input_embedding.dim(1);
  if (!projection) {
    if (d_in != target.key_dim()) {
      throw ConfigError("cross_query: no projection from dim " + std::to_string(d_in) + " to key dim " +
                        std::to_string(target.key_dim()));
    }
    return query_fn(input_embedding, d_in);
  }
  if (projection->shape() != Shape{d_in, target.key_dim()}) {
    throw DimensionError("cross_query: projection " + shape_str(projection->shape()) + " cannot map dim " +
                         std::to_string(d_in) + " to " + std::to_string(target.key_dim()));
  }
  Tensor q = query_fn(input_embedding, d_in);
  return reshape(matmul(reshape(q, {1, d_in}), *projection), {target.key_dim()});
}

SelectionResult select_prompts(PromptPool& pool, const Tensor& query, std::size_t n_sel) {
  if (n_sel == 0 || n_sel > pool.size()) {
    throw ConfigError("select_prompts: n_sel " + std::to_string(n_sel) + " invalid for pool of " +
                      std::to_string(pool.size()));
  }
  if (query.numel() != pool.key_dim()) {
    throw DimensionError("select_prompts: query of " + std::to_string(query.numel()) + " values for key dim " +
                         std::to_string(pool.key_dim()));
  }
  const std::size_t m = pool.size();
  const std::size_t d = pool.key_dim();
  const auto keys = pool.keys().data();
  std::vector<double> sims(m);
  bool any_degenerate = false;
  for (std::size_t i = 0; i < m; ++i) {
    bool degenerate = false;
    sims[i] = cosine_value(query.data(), keys.subspan(i * d, d), &degenerate);
    any_degenerate = any_degenerate || degenerate;
  }
  if (any_degenerate) note_degenerate("select_prompts");

  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_sel), order.end(),
                    [&](std::size_t a, std::size_t b) { return sims[a] > sims[b] || (sims[a] == sims[b] && a < b); });

  SelectionResult result;
  result.indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_sel));
  for (auto i : result.indices) result.similarities.push_back(sims[i]);
  result.query = query.rank() == 1 ? query : reshape(query, {d});
  result.keys = pool.keys();
  result.pool_size = m;
  result.modality = pool.modality();
  pool.record_selection(result.indices);
  return result;
}

Tensor surrogate_loss(std::span<const SelectionResult> selections) {
  if (selections.empty()) throw ConfigError("surrogate_loss: empty selection list");
  Tensor total;
  for (const auto& sel : selections) {
    if (sel.indices.empty()) throw ConfigError("surrogate_loss: selection without indices");
    Tensor chosen = select_rows(sel.keys, sel.indices);
    Tensor cos = cosine_sim(chosen, sel.query);
    // sum_j (1 - cos_j) = n - sum_j cos_j
    Tensor term = add_scalar(scale(sum(cos), -1.0), static_cast<double>(sel.indices.size()));
    total = total.defined() ? add(total, term) : term;
  }
  return scale(total, 1.0 / static_cast<double>(selections.size()));
}

Tensor assemble_prompt_tokens(const SelectionResult& selection, const PromptPool& pool, PromptRole role) {
  if (selection.pool_size != pool.size() || selection.modality != pool.modality() ||
      !selection.keys.same_node(pool.keys())) {
    throw IntegrityError("assemble_prompt_tokens: selection was made against a different pool (size " +
                         std::to_string(selection.pool_size) + " vs " + std::to_string(pool.size()) + ")");
  }
  for (auto i : selection.indices) {
    if (i >= pool.size()) throw IntegrityError("assemble_prompt_tokens: stale index " + std::to_string(i));
  }
  const std::size_t n = selection.indices.size();
  Tensor blocks = select_rows(pool.values(), selection.indices);
  Tensor tokens = reshape(blocks, {n * pool.prompt_len(), pool.key_dim()});
  return add(tokens, pool.role(role));
}

}  // namespace dcp
