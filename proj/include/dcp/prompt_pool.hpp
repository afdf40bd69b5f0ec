#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dcp/gradcheck.hpp"
#include "dcp/rng.hpp"
#include "dcp/tensor.hpp"

namespace dcp {

enum class Modality { visual, textual };

/// Which input a set of selected prompts accompanies. Prompts drawn to sit
/// beside an image carry the visual-context tag, prompts beside text the
/// textual-context tag, regardless of the pool they came from.
enum class PromptRole { as_visual_context = 0, as_textual_context = 1 };

const char* modality_name(Modality m);

struct SelectionResult {
  std::vector<std::size_t> indices;   // distinct, ordered by similarity
  std::vector<double> similarities;   // non-increasing
  Tensor query;                       // [key_dim], on the tape when the input was
  Tensor keys;                        // the pool's key matrix at selection time
  std::size_t pool_size = 0;
  Modality modality = Modality::visual;
};

/// One modality's key-value prompt store. Keys are [pool_size x key_dim],
/// values [pool_size x prompt_len x key_dim]; both trainable.
class PromptPool {
 public:
  PromptPool() = default;
  PromptPool(Modality modality, std::size_t pool_size, std::size_t key_dim, std::size_t prompt_len, Rng& rng);

  Modality modality() const { return modality_; }
  std::size_t size() const { return keys_.dim(0); }
  std::size_t key_dim() const { return keys_.dim(1); }
  std::size_t prompt_len() const { return values_.dim(1); }

  const Tensor& keys() const { return keys_; }
  const Tensor& values() const { return values_; }
  const Tensor& role(PromptRole r) const { return roles_[static_cast<std::size_t>(r)]; }
  Tensor& keys() { return keys_; }
  Tensor& values() { return values_; }
  Tensor& role(PromptRole r) { return roles_[static_cast<std::size_t>(r)]; }

  std::span<const std::uint64_t> usage() const { return usage_; }
  std::uint64_t selection_calls() const { return calls_; }
  void record_selection(std::span<const std::size_t> indices);
  void set_usage(std::vector<std::uint64_t> usage, std::uint64_t calls);

  void collect(ParameterList& out, const std::string& prefix) const;

 private:
  Modality modality_ = Modality::visual;
  Tensor keys_;
  Tensor values_;
  std::array<Tensor, 2> roles_;
  std::vector<std::uint64_t> usage_;
  std::uint64_t calls_ = 0;
};

/// Mean over the token axis of a [seq_len x d] embedding; d must equal
/// `key_dim`.
Tensor query_fn(const Tensor& input_embedding, std::size_t key_dim);

/// query_fn followed by a linear map into the target pool's key space.
/// `projection` is [d_in x target.key_dim()] and may be null only when the
/// two dimensions already agree.
Tensor cross_query(const Tensor& input_embedding, const PromptPool& target, const Tensor* projection);

/// The n_sel entries with the highest cosine similarity to `query`, lowest
/// index first among equal scores. Increments the pool's usage counters.
SelectionResult select_prompts(PromptPool& pool, const Tensor& query, std::size_t n_sel);

/// Mean over selections of sum_j (1 - cos(query, key_j)).
Tensor surrogate_loss(std::span<const SelectionResult> selections);

/// Selected value blocks concatenated in selection order plus the role
/// embedding: [(n_sel * prompt_len) x key_dim].
Tensor assemble_prompt_tokens(const SelectionResult& selection, const PromptPool& pool, PromptRole role);

}  // namespace dcp
