#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "dcp/config.hpp"
#include "dcp/nn.hpp"
#include "dcp/prompt_pool.hpp"
#include "dcp/tensor.hpp"

namespace dcp {

// Reserved token ids; ordinary words start at kFirstWordId.
inline constexpr std::int64_t kPadId = 0;
inline constexpr std::int64_t kMaskId = 1;
inline constexpr std::int64_t kEosId = 2;
inline constexpr std::int64_t kFirstWordId = 3;

inline bool is_special_token(std::int64_t id) { return id < kFirstWordId; }

enum class BatchKind { image_only, text_only, image_text };
const char* batch_kind_name(BatchKind kind);

/// Inputs of one modality combination. Text rows are right-padded with
/// kPadId; padded positions are excluded from attention and from queries.
struct UnifiedBatch {
  BatchKind kind = BatchKind::image_text;
  std::size_t size = 0;
  std::size_t text_len = 0;
  std::vector<std::int64_t> token_ids;   // [size x text_len]
  Tensor patch_features;                 // [size x L_v x patch_dim]
  std::vector<std::size_t> patch_positions;  // optional positional ids, length L_v
  std::vector<std::int64_t> mlm_labels;  // optional, [size x text_len], -1 = not a target

  static UnifiedBatch images(Tensor patches);
  static UnifiedBatch texts(std::vector<std::int64_t> ids, std::size_t size, std::size_t text_len);
  static UnifiedBatch pairs(Tensor patches, std::vector<std::int64_t> ids, std::size_t text_len);

  bool has_image() const { return kind != BatchKind::text_only; }
  bool has_text() const { return kind != BatchKind::image_only; }
  /// Throws ConfigError when present fields disagree with `kind` or `config`.
  void validate(const ModelConfig& config) const;
  /// 1 for real tokens, 0 for padding; [size x text_len].
  std::vector<std::uint8_t> text_valid() const;
  /// Rows [begin, begin + count) as a new batch of the same kind.
  UnifiedBatch rows(std::size_t begin, std::size_t count) const;
};

/// Offsets of each segment inside an assembled sequence. Segments that a
/// batch kind does not use have zero length (CLS slots hold npos).
struct SequenceLayout {
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);
  std::size_t cls_visual = npos;
  std::size_t patch_begin = 0, patch_len = 0;
  std::size_t vprompt_begin = 0, vprompt_len = 0;
  std::size_t tprompt_begin = 0, tprompt_len = 0;
  std::size_t cls_textual = npos;
  std::size_t token_begin = 0, token_len = 0;
  std::size_t length = 0;
};

struct AssembledInput {
  BatchKind kind = BatchKind::image_text;
  std::size_t batch = 0;
  Tensor sequence;                   // [B x L x d_hidden]
  std::vector<std::uint8_t> mask;    // [B x L], 1 = attendable key
  SequenceLayout layout;
  std::vector<SelectionResult> visual_selections;   // one per item, when drawn
  std::vector<SelectionResult> textual_selections;

  std::vector<SelectionResult> all_selections() const;
};

struct EncodedBatch {
  Tensor token_states;  // [B x L x d_hidden]
  Tensor cls_visual;    // [B x d_hidden]
  Tensor cls_textual;   // [B x d_hidden]
  SequenceLayout layout;
};

struct EncodeTrace {
  std::vector<Tensor> attention;  // per layer, [B*H x L x L]
};

/// Modality embeddings, both prompt pools, and the shared transformer stack.
class UnifiedEncoder {
 public:
  explicit UnifiedEncoder(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }

  /// Token lookup plus learned positions: [batch x len x d_text].
  Tensor embed_text(std::span<const std::int64_t> ids, std::size_t batch, std::size_t len) const;
  /// Linear patch projection plus learned positions: [B x L_v x d_vision].
  /// `positions` overrides the positional ids 0..L_v-1.
  Tensor embed_patches(const Tensor& features, std::span<const std::size_t> positions = {}) const;

  /// Builds the prompt-unified sequence:
  ///   image_only : [CLS_v] patches textual-prompts
  ///   text_only  : visual-prompts [CLS_t] tokens
  ///   image_text : [CLS_v] patches visual-prompts textual-prompts [CLS_t] tokens
  /// Same-modality prompts are queried directly; a missing modality is
  /// filled from the other pool through cross_query.
  AssembledInput unify_inputs(const UnifiedBatch& batch);

  /// Runs the stack. When a modality has no CLS slot its representation is
  /// the mean final state of the prompts standing in for it.
  EncodedBatch encode(const AssembledInput& input, EncodeTrace* trace = nullptr) const;

  EncodedBatch forward(const UnifiedBatch& batch, EncodeTrace* trace = nullptr);

  PromptPool& visual_pool() { return visual_pool_; }
  PromptPool& textual_pool() { return textual_pool_; }
  const PromptPool& visual_pool() const { return visual_pool_; }
  const PromptPool& textual_pool() const { return textual_pool_; }
  std::vector<TransformerBlock>& blocks() { return blocks_; }
  const std::vector<TransformerBlock>& blocks() const { return blocks_; }

  ParameterList parameters() const;
  ParameterList pool_parameters() const;

  // Exposed for tests and for checkpoint loading.
  Tensor text_embed;   // [vocab x d_text]
  Tensor text_pos;     // [max_text_len x d_text]
  Linear patch_proj;   // patch_dim -> d_vision
  Tensor patch_pos;    // [patch_count x d_vision]
  Tensor cls_visual;   // [d_hidden]
  Tensor cls_textual;  // [d_hidden]
  Linear vision_in;    // d_vision -> d_hidden
  Linear text_in;      // d_text -> d_hidden
  Tensor proj_v2t;     // [d_vision x d_text], undefined when dims agree
  Tensor proj_t2v;     // [d_text x d_vision], undefined when dims agree

 private:
  ModelConfig config_;
  PromptPool visual_pool_;
  PromptPool textual_pool_;
  std::vector<TransformerBlock> blocks_;
};

}  // namespace dcp
