#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "dcp/config.hpp"
#include "dcp/encoder.hpp"
#include "dcp/nn.hpp"
#include "dcp/optimizer.hpp"
#include "dcp/rng.hpp"

namespace dcp {

inline constexpr double kMinTemperature = 1e-3;
inline constexpr double kMaxTemperature = 1.0;

struct MlmHead {
  LayerNorm norm;
  Linear out;  // d_hidden -> vocab
  Tensor operator()(const Tensor& states) const { return out(norm(states)); }
};

/// Two-way matching head over concat(cls_visual, cls_textual).
struct ItmHead {
  LayerNorm norm;
  Linear out;  // 2*d_hidden -> 2
  Tensor operator()(const Tensor& pair) const { return out(norm(pair)); }
};

struct PretrainHeads {
  MlmHead mlm;
  ItmHead itm;
  Tensor temperature;  // scalar, clamped to [kMinTemperature, kMaxTemperature]

  void collect(ParameterList& out) const;
};

struct PretrainModel {
  explicit PretrainModel(const ModelConfig& config);

  ModelConfig config;
  UnifiedEncoder encoder;
  PretrainHeads heads;

  ParameterList parameters() const;
  /// Clamp learnable temperature back into its range.
  void clamp_temperature();
};

struct MaskingResult {
  std::vector<std::int64_t> corrupted;
  std::vector<std::int64_t> labels;  // original id at selected positions, -1 elsewhere
  std::size_t masked_count = 0;
};

/// Independently selects each non-special token with probability `rate`;
/// a selected token becomes [MASK] 80%, a random word 10%, unchanged 10%.
MaskingResult apply_mlm_masking(std::span<const std::int64_t> ids, double rate, std::size_t vocab_size, Rng& rng);

struct MlmLoss {
  Tensor loss;             // scalar; constant 0 when skipped
  std::size_t count = 0;   // labeled positions
  bool skipped = false;
};

/// Mean cross-entropy of the MLM head over labeled text positions only.
/// `labels` is [B x token_len] aligned with the text segment of `encoded`.
MlmLoss mlm_loss(const EncodedBatch& encoded, std::span<const std::int64_t> labels, const MlmHead& head);

Tensor itm_logits(const Tensor& cls_visual, const Tensor& cls_textual, const ItmHead& head);
/// Cross-entropy of the matching head; labels are 1 = matched, 0 = not.
Tensor itm_loss(const Tensor& cls_visual, const Tensor& cls_textual, std::span<const std::int64_t> labels,
                const ItmHead& head);

/// Symmetric InfoNCE over the B x B cosine similarity matrix divided by
/// the temperature; row i of each side is the positive for the other.
Tensor itc_loss(const Tensor& visual_reps, const Tensor& textual_reps, const Tensor& temperature);
Tensor itc_loss(const Tensor& visual_reps, const Tensor& textual_reps, double temperature);

/// Uniformly random permutation with no fixed point (Sattolo); n >= 2.
std::vector<std::size_t> derangement(std::size_t n, Rng& rng);

/// Everything random about one pre-training step, drawn up front so the
/// loss itself is a deterministic function of the parameters.
struct PreparedPretrainBatch {
  UnifiedBatch joint;        // positives then in-batch negatives, masked text
  UnifiedBatch image_only;   // clean images
  UnifiedBatch text_only;    // clean texts
  std::vector<std::int64_t> mlm_labels;  // [2B x text_len], negatives unlabeled
  std::vector<std::int64_t> itm_labels;  // 1 for the first B rows, 0 after
  std::vector<std::size_t> negative_text;  // text row paired with image i in negatives
  std::size_t pairs = 0;
  std::size_t masked_count = 0;
};

PreparedPretrainBatch prepare_pretrain_batch(const UnifiedBatch& pairs, const ModelConfig& config, Rng& rng);

struct PretrainLossReport {
  double l_mlm = 0.0;
  double l_itm = 0.0;
  double l_itc = 0.0;
  double l_p = 0.0;
  double l_total = 0.0;
  std::size_t masked_token_count = 0;
  std::size_t itm_pair_count = 0;
};

/// l_mlm + sigma*l_itm + lambda*l_itc + beta*l_p, evaluated left to right.
double recompose_total(const PretrainLossReport& report, const ModelConfig& config);

struct PretrainForward {
  PretrainLossReport report;
  Tensor total;
  Tensor mlm, itm, itc, prompt;
};

/// Selection, unification, encoding and the four losses for one prepared
/// batch of image-text pairs.
PretrainForward combined_pretrain_loss(const PreparedPretrainBatch& prepared, PretrainModel& model);

/// One forward/backward/update. Throws NumericError on a non-finite loss
/// before touching the parameters.
PretrainLossReport pretrain_step(const UnifiedBatch& pairs, PretrainModel& model, AdamW& optimizer, Rng& rng);

}  // namespace dcp
