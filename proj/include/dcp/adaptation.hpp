#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dcp/config.hpp"
#include "dcp/encoder.hpp"
#include "dcp/nn.hpp"
#include "dcp/optimizer.hpp"

namespace dcp {

enum class Task { vqa, pair_classify, image_classify, text_classify, retrieval, generation };

const char* task_name(Task task);
/// Throws ConfigError for an unknown task id.
Task parse_task(const std::string& name);
/// Batch kind a task's inputs must have.
BatchKind task_input_kind(Task task);
bool is_classification(Task task);

struct DecoderConfig {
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t context_len = 64;
  bool causal = true;
};

/// Causal transformer decoder with self-attention blocks only (no
/// cross-attention). The image prefix is fed as leading positions.
class ReportDecoder {
 public:
  ReportDecoder(const DecoderConfig& config, const ModelConfig& model, Rng& rng);

  const DecoderConfig& config() const { return config_; }
  /// Copies encoder block weights into decoder blocks where shapes agree.
  /// Returns the number of blocks copied.
  std::size_t init_from_encoder(const UnifiedEncoder& encoder);

  /// prefix [B x P x d_hidden], tokens [B x T] (T may be 0) ->
  /// logits [B x (P + T) x vocab]. Position t only sees positions <= t.
  Tensor logits(const Tensor& prefix, std::span<const std::int64_t> tokens, std::size_t token_len) const;

  void collect(ParameterList& out, const std::string& prefix) const;

  Tensor token_embed;  // [vocab x d_hidden]
  Tensor pos_embed;    // [context_len x d_hidden]
  std::vector<TransformerBlock> blocks;
  LayerNorm final_norm;
  Linear out;

 private:
  DecoderConfig config_;
};

/// Task-specific parameters on top of the unified encoder.
class TaskHead {
 public:
  /// `zero_output` zero-initializes the classifier output layer.
  static TaskHead create(Task task, std::size_t label_space, const ModelConfig& config, std::uint64_t seed,
                         bool zero_output = false);

  Task task = Task::pair_classify;
  std::size_t label_space = 0;
  LayerNorm norm;                        // classification tasks
  Linear out;                            // classification tasks
  Tensor temperature;                    // retrieval
  std::optional<ReportDecoder> decoder;  // generation

  /// d_hidden, or 2 * d_hidden for tasks reading both [CLS] states.
  std::size_t input_dim(const ModelConfig& config) const;
  ParameterList parameters() const;
};

struct FinetuneBatch {
  UnifiedBatch inputs;
  std::vector<std::int64_t> labels;                 // classification, one per row
  std::vector<std::vector<std::int64_t>> captions;  // generation, without end token
};

struct FinetuneOptions {
  bool freeze_backbone = false;
  bool train_pools = true;
};

/// Parameters an optimizer should own for fine-tuning under `options`;
/// also sets requires_grad accordingly on encoder, pools and head.
ParameterList prepare_finetune_parameters(UnifiedEncoder& encoder, const TaskHead& head,
                                          const FinetuneOptions& options);

/// Task loss of one batch (no parameter update).
Tensor task_loss(const FinetuneBatch& batch, UnifiedEncoder& encoder, const TaskHead& head);

/// One forward/backward/update; returns the loss before the update.
double finetune_step(const FinetuneBatch& batch, UnifiedEncoder& encoder, TaskHead& head, AdamW& optimizer);

/// Label distribution [B x label_space] from the task's [CLS] features.
Tensor classify(const UnifiedBatch& batch, UnifiedEncoder& encoder, const TaskHead& head);
/// Argmax per row, lowest label on ties.
std::vector<std::int64_t> predict_labels(const Tensor& probabilities);

struct RetrievalResult {
  std::vector<std::vector<std::size_t>> image_to_text;  // best-first candidate lists
  std::vector<std::vector<std::size_t>> text_to_image;
  std::vector<std::size_t> ks;
  std::vector<double> recall_i2t;
  std::vector<double> recall_t2i;
};

/// Cosine ranking in both directions; ties go to the lower index.
/// `pairing[i]` is the true text of image i (empty = identity).
/// Throws ConfigError when some k exceeds a candidate count.
RetrievalResult retrieval_rank(const Tensor& image_reps, const Tensor& text_reps,
                               std::span<const std::size_t> pairing, std::span<const std::size_t> ks);

/// Representations used for retrieval: [CLS] states of the single-modality
/// passes over the images and texts of an image_text batch.
std::pair<Tensor, Tensor> retrieval_representations(const UnifiedBatch& pairs, UnifiedEncoder& encoder);

/// Greedy decoding after the image prefix until the end token or
/// `max_len` tokens. Throws ConfigError on context overflow.
std::vector<std::vector<std::int64_t>> generate_report(const UnifiedBatch& images, UnifiedEncoder& encoder,
                                                       const TaskHead& head, std::size_t max_len);

/// Encoder states used as the decoder prefix: [B x P x d_hidden].
Tensor report_prefix(const UnifiedBatch& images, UnifiedEncoder& encoder);

}  // namespace dcp
