#include "dcp/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dcp/errors.hpp"
#include "dcp/ops.hpp"

namespace dcp {

Linear::Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  std::vector<double> w(in * out);
  for (auto& v : w) v = rng.uniform(-limit, limit);
  weight = Tensor({in, out}, std::move(w), true);
  if (with_bias) bias = Tensor::zeros({out}, true);
}

Tensor Linear::operator()(const Tensor& x) const {
  Tensor y = matmul(x, weight);
  return bias.defined() ? add(y, bias) : y;
}

void Linear::collect(ParameterList& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight});
  if (bias.defined()) out.push_back({prefix + ".bias", bias});
}

LayerNorm::LayerNorm(std::size_t dim) : gamma(Tensor::full({dim}, 1.0, true)), beta(Tensor::zeros({dim}, true)) {}

Tensor LayerNorm::operator()(const Tensor& x) const { return layernorm(x, gamma, beta); }

void LayerNorm::collect(ParameterList& out, const std::string& prefix) const {
  out.push_back({prefix + ".gamma", gamma});
  out.push_back({prefix + ".beta", beta});
}

Tensor make_attention_mask(std::size_t batch, std::size_t heads, std::size_t len,
                           std::span<const std::uint8_t> key_valid, bool causal) {
  if (!key_valid.empty() && key_valid.size() != batch * len) {
    throw DimensionError("attention mask: expected " + std::to_string(batch * len) + " entries, got " +
                         std::to_string(key_valid.size()));
  }
  constexpr double kMasked = -std::numeric_limits<double>::infinity();
  std::vector<double> m(batch * heads * len * len, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      double* block = m.data() + (b * heads + h) * len * len;
      for (std::size_t q = 0; q < len; ++q) {
        for (std::size_t k = 0; k < len; ++k) {
          const bool valid = (key_valid.empty() || key_valid[b * len + k]) && (!causal || k <= q);
          if (!valid) block[q * len + k] = kMasked;
        }
      }
    }
  }
  return Tensor({batch * heads, len, len}, std::move(m));
}

TransformerBlock::TransformerBlock(std::size_t d_model, std::size_t n_heads, std::size_t d_ff, Rng& rng)
    : heads(n_heads),
      ln1(d_model),
      wq(d_model, d_model, rng),
      wk(d_model, d_model, rng),
      wv(d_model, d_model, rng),
      wo(d_model, d_model, rng),
      ln2(d_model),
      ff1(d_model, d_ff, rng),
      ff2(d_ff, d_model, rng) {
  if (n_heads == 0 || d_model % n_heads != 0) {
    throw ConfigError("transformer block: d_model " + std::to_string(d_model) + " not divisible by heads " +
                      std::to_string(n_heads));
  }
}

Tensor TransformerBlock::forward(const Tensor& x, const Tensor& mask, Tensor* attention) const {
  if (x.rank() != 3) throw DimensionError("transformer block expects [B x L x d], got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0);
  const std::size_t L = x.dim(1);
  const std::size_t d = x.dim(2);
  const std::size_t H = heads;
  const std::size_t dh = d / H;

  auto split = [&](const Tensor& t) {
    return reshape(permute(reshape(t, {B, L, H, dh}), {0, 2, 1, 3}), {B * H, L, dh});
  };
  Tensor h = ln1(x);
  Tensor q = split(wq(h));
  Tensor k = split(wk(h));
  Tensor v = split(wv(h));
  Tensor scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(dh)));
  if (mask.defined()) scores = add(scores, mask);
  Tensor probs = softmax(scores, -1);
  if (attention) *attention = probs;
  Tensor ctx = reshape(permute(reshape(matmul(probs, v), {B, H, L, dh}), {0, 2, 1, 3}), {B, L, d});
  Tensor y = add(x, wo(ctx));
  Tensor f = ff2(gelu(ff1(ln2(y))));
  return add(y, f);
}

void TransformerBlock::collect(ParameterList& out, const std::string& prefix) const {
  ln1.collect(out, prefix + ".ln1");
  wq.collect(out, prefix + ".attn.q");
  wk.collect(out, prefix + ".attn.k");
  wv.collect(out, prefix + ".attn.v");
  wo.collect(out, prefix + ".attn.o");
  ln2.collect(out, prefix + ".ln2");
  ff1.collect(out, prefix + ".ff1");
  ff2.collect(out, prefix + ".ff2");
}

void TransformerBlock::copy_from(const TransformerBlock& other) {
  ParameterList mine;
  ParameterList theirs;
  collect(mine, "");
  other.collect(theirs, "");
  if (mine.size() != theirs.size()) throw DimensionError("copy_from: block layouts differ");
  for (std::size_t i = 0; i < mine.size(); ++i) copy_values(mine[i].tensor, theirs[i].tensor);
}

void copy_values(Tensor& dst, const Tensor& src) {
  if (dst.shape() != src.shape()) {
    throw DimensionError("copy_values: " + shape_str(dst.shape()) + " vs " + shape_str(src.shape()));
  }
  auto out = dst.mutable_data();
  std::copy(src.data().begin(), src.data().end(), out.begin());
}

void set_trainable(const ParameterList& params, bool trainable) {
  for (auto p : params) p.tensor.set_requires_grad(trainable);
}

void zero_grads(const ParameterList& params) {
  for (auto p : params) p.tensor.zero_grad();
}

}  // namespace dcp
