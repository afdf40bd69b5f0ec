#include "dcp/config.hpp"

#include <cmath>

#include "dcp/errors.hpp"

namespace dcp {

namespace {
void require_positive(std::size_t v, const char* name) {
  if (v == 0) throw ConfigError(std::string("config: ") + name + " must be positive");
}
}  // namespace

void ModelConfig::validate() const {
  require_positive(d_text, "d_text");
  require_positive(d_vision, "d_vision");
  require_positive(d_hidden, "d_hidden");
  require_positive(n_heads, "n_heads");
  require_positive(d_ff, "d_ff");
  require_positive(vocab_size, "vocab_size");
  require_positive(max_text_len, "max_text_len");
  require_positive(patch_count, "patch_count");
  require_positive(patch_dim, "patch_dim");
  require_positive(pool_size_v, "pool_size_v");
  require_positive(pool_size_t, "pool_size_t");
  require_positive(prompt_len_v, "prompt_len_v");
  require_positive(prompt_len_t, "prompt_len_t");
  require_positive(n_sel, "n_sel");
  require_positive(decoder_heads, "decoder_heads");
  require_positive(context_len, "context_len");
  require_positive(batch_size, "batch_size");
  if (d_hidden % n_heads != 0) throw ConfigError("config: d_hidden must be divisible by n_heads");
  if (d_hidden % decoder_heads != 0) throw ConfigError("config: d_hidden must be divisible by decoder_heads");
  if (vocab_size < 4) throw ConfigError("config: vocab_size must leave room for special tokens");
  if (n_sel > pool_size_v || n_sel > pool_size_t) throw ConfigError("config: n_sel exceeds a pool size");
  if (!(mask_rate > 0.0 && mask_rate < 1.0)) throw ConfigError("config: mask_rate must lie in (0, 1)");
  if (!(temperature_init >= 1e-3 && temperature_init <= 1.0)) {
    throw ConfigError("config: temperature_init must lie in [1e-3, 1]");
  }
  for (auto [v, name] : {std::pair{sigma, "sigma"}, {lambda, "lambda"}, {beta, "beta"}}) {
    if (!std::isfinite(v) || v < 0.0) throw ConfigError(std::string("config: ") + name + " must be finite and >= 0");
  }
  if (!(lr >= 0.0) || !(finetune_lr >= 0.0) || !(weight_decay >= 0.0)) {
    throw ConfigError("config: learning rates and weight decay must be >= 0");
  }
}

const std::vector<std::string>& ModelConfig::geometry_names() {
  static const std::vector<std::string> names = {
      "d_text",      "d_vision",    "d_hidden",     "n_layers",     "n_heads",        "d_ff",
      "vocab_size",  "max_text_len", "patch_count", "patch_dim",    "pool_size_v",    "pool_size_t",
      "prompt_len_v", "prompt_len_t", "n_sel",      "decoder_layers", "decoder_heads", "context_len"};
  return names;
}

std::vector<double> ModelConfig::geometry() const {
  auto d = [](std::size_t v) { return static_cast<double>(v); };
  return {d(d_text),       d(d_vision),     d(d_hidden),    d(n_layers),       d(n_heads),
          d(d_ff),         d(vocab_size),   d(max_text_len), d(patch_count),   d(patch_dim),
          d(pool_size_v),  d(pool_size_t),  d(prompt_len_v), d(prompt_len_t),  d(n_sel),
          d(decoder_layers), d(decoder_heads), d(context_len)};
}

}  // namespace dcp
