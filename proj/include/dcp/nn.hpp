#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>

#include "dcp/gradcheck.hpp"
#include "dcp/rng.hpp"
#include "dcp/tensor.hpp"

namespace dcp {

/// y = x W + b with W stored [in x out].
class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, bool bias = true);

  Tensor operator()(const Tensor& x) const;
  void collect(ParameterList& out, const std::string& prefix) const;
  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  Tensor weight;
  Tensor bias;  // undefined when constructed without bias
};

class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim);

  Tensor operator()(const Tensor& x) const;
  void collect(ParameterList& out, const std::string& prefix) const;

  Tensor gamma;
  Tensor beta;
};

/// Additive attention mask of shape [batch*heads x len x len]: 0 where a
/// query may attend a key, -inf otherwise. `key_valid` is [batch x len]
/// (empty = every key valid).
Tensor make_attention_mask(std::size_t batch, std::size_t heads, std::size_t len,
                           std::span<const std::uint8_t> key_valid, bool causal);

/// Pre-norm block: x + MHA(LN(x)), then + MLP(LN(.)).
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(std::size_t d_model, std::size_t heads, std::size_t d_ff, Rng& rng);

  /// x: [B x L x d]. `mask` from make_attention_mask or undefined. When
  /// `attention` is given it receives the [B*H x L x L] probabilities.
  Tensor forward(const Tensor& x, const Tensor& mask, Tensor* attention = nullptr) const;
  void collect(ParameterList& out, const std::string& prefix) const;
  /// Copies every parameter value from `other`; shapes must agree.
  void copy_from(const TransformerBlock& other);

  std::size_t heads = 1;
  LayerNorm ln1;
  Linear wq, wk, wv, wo;
  LayerNorm ln2;
  Linear ff1, ff2;
};

/// Overwrites every element of `dst` with `src`; shapes must agree.
void copy_values(Tensor& dst, const Tensor& src);

/// Marks every tensor in `params` trainable or frozen.
void set_trainable(const ParameterList& params, bool trainable);
void zero_grads(const ParameterList& params);

}  // namespace dcp
