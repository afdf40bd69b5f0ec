#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace dcp {

/// Every dimension, pool size, loss weight and schedule knob of a run.
/// Defaults are the desk-scale setting; large-scale values (6 layers,
/// 768 hidden, 12 heads, pools of 1024, top-5) are equally valid.
struct ModelConfig {
  // Embedding and encoder geometry.
  std::size_t d_text = 32;
  std::size_t d_vision = 48;
  std::size_t d_hidden = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t vocab_size = 256;
  std::size_t max_text_len = 16;
  std::size_t patch_count = 16;
  std::size_t patch_dim = 12;

  // Prompt pools.
  std::size_t pool_size_v = 64;
  std::size_t pool_size_t = 64;
  std::size_t prompt_len_v = 4;
  std::size_t prompt_len_t = 4;
  std::size_t n_sel = 5;

  // Pre-training objective: L = mlm + sigma*itm + lambda*itc + beta*prompt.
  double sigma = 0.9;
  double lambda = 0.8;
  double beta = 0.9;
  double mask_rate = 0.15;
  double temperature_init = 0.07;

  // Report decoder.
  std::size_t decoder_layers = 2;
  std::size_t decoder_heads = 4;
  std::size_t context_len = 64;

  // Schedule.
  double lr = 1e-3;
  double weight_decay = 5e-4;
  std::size_t batch_size = 8;
  std::size_t pretrain_steps = 500;
  std::size_t checkpoint_every = 100;
  std::size_t finetune_steps = 300;
  double finetune_lr = 1e-3;
  bool freeze_backbone = false;
  bool finetune_pools = true;

  std::uint64_t seed = 7;

  /// Throws ConfigError naming the first offending field.
  void validate() const;

  /// Extents that a checkpoint must agree with, in a fixed order.
  std::vector<double> geometry() const;
  static const std::vector<std::string>& geometry_names();
};

}  // namespace dcp
