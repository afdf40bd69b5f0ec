#include "dcp/encoder.hpp"

#include <cmath>

#include "dcp/errors.hpp"
#include "dcp/ops.hpp"

namespace dcp {

const char* batch_kind_name(BatchKind kind) {
  switch (kind) {
    case BatchKind::image_only: return "image_only";
    case BatchKind::text_only: return "text_only";
    case BatchKind::image_text: return "image_text";
  }
  return "?";
}

UnifiedBatch UnifiedBatch::images(Tensor patches) {
  UnifiedBatch b;
  b.kind = BatchKind::image_only;
  b.size = patches.rank() == 3 ? patches.dim(0) : 0;
  b.patch_features = std::move(patches);
  return b;
}

UnifiedBatch UnifiedBatch::texts(std::vector<std::int64_t> ids, std::size_t size, std::size_t text_len) {
  UnifiedBatch b;
  b.kind = BatchKind::text_only;
  b.size = size;
  b.text_len = text_len;
  b.token_ids = std::move(ids);
  return b;
}

UnifiedBatch UnifiedBatch::pairs(Tensor patches, std::vector<std::int64_t> ids, std::size_t text_len) {
  UnifiedBatch b;
  b.kind = BatchKind::image_text;
  b.size = patches.rank() == 3 ? patches.dim(0) : 0;
  b.text_len = text_len;
  b.token_ids = std::move(ids);
  b.patch_features = std::move(patches);
  return b;
}

void UnifiedBatch::validate(const ModelConfig& config) const {
  const std::string kind_name = batch_kind_name(kind);
  if (size == 0) throw ConfigError("batch (" + kind_name + "): empty batch");
  if (has_image()) {
    if (!patch_features.defined()) throw ConfigError("batch (" + kind_name + "): patch features required");
    const Shape& s = patch_features.shape();
    if (s.size() != 3 || s[0] != size || s[2] != config.patch_dim || s[1] > config.patch_count) {
      throw ConfigError("batch (" + kind_name + "): patch features " + shape_str(s) + " do not fit " +
                        std::to_string(size) + " x <=" + std::to_string(config.patch_count) + " x " +
                        std::to_string(config.patch_dim));
    }
    if (!patch_positions.empty()) {
      if (patch_positions.size() != s[1]) throw ConfigError("batch: patch_positions length mismatch");
      for (auto p : patch_positions)
        if (p >= config.patch_count) throw ConfigError("batch: patch position out of range");
    }
  } else if (patch_features.defined()) {
    throw ConfigError("batch (" + kind_name + "): unexpected patch features");
  }
  if (has_text()) {
    if (text_len == 0 || text_len > config.max_text_len) {
      throw ConfigError("batch (" + kind_name + "): text_len " + std::to_string(text_len) + " outside [1, " +
                        std::to_string(config.max_text_len) + "]");
    }
    if (token_ids.size() != size * text_len) throw ConfigError("batch (" + kind_name + "): token id count mismatch");
    for (std::size_t b = 0; b < size; ++b) {
      if (token_ids[b * text_len] == kPadId) {
        throw ConfigError("batch (" + kind_name + "): row " + std::to_string(b) + " has no tokens");
      }
    }
    if (!mlm_labels.empty() && mlm_labels.size() != token_ids.size()) {
      throw ConfigError("batch (" + kind_name + "): mlm label count mismatch");
    }
  } else if (!token_ids.empty() || !mlm_labels.empty()) {
    throw ConfigError("batch (" + kind_name + "): unexpected token ids");
  }
}

std::vector<std::uint8_t> UnifiedBatch::text_valid() const {
  std::vector<std::uint8_t> v(token_ids.size());
  for (std::size_t i = 0; i < token_ids.size(); ++i) v[i] = token_ids[i] != kPadId ? 1 : 0;
  return v;
}

UnifiedBatch UnifiedBatch::rows(std::size_t begin, std::size_t count) const {
  if (begin + count > size || count == 0) throw DimensionError("batch rows out of range");
  UnifiedBatch out;
  out.kind = kind;
  out.size = count;
  out.text_len = text_len;
  out.patch_positions = patch_positions;
  if (has_text()) {
    out.token_ids.assign(token_ids.begin() + begin * text_len, token_ids.begin() + (begin + count) * text_len);
    if (!mlm_labels.empty()) {
      out.mlm_labels.assign(mlm_labels.begin() + begin * text_len, mlm_labels.begin() + (begin + count) * text_len);
    }
  }
  if (has_image()) {
    const std::size_t per = patch_features.numel() / size;
    const auto d = patch_features.data();
    Shape s = patch_features.shape();
    s[0] = count;
    out.patch_features = Tensor(s, std::vector<double>(d.begin() + begin * per, d.begin() + (begin + count) * per));
  }
  return out;
}

std::vector<SelectionResult> AssembledInput::all_selections() const {
  std::vector<SelectionResult> out = visual_selections;
  out.insert(out.end(), textual_selections.begin(), textual_selections.end());
  return out;
}

namespace {

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return Tensor(std::move(shape), std::move(v), true);
}

Tensor projection_matrix(std::size_t in, std::size_t out, Rng& rng) {
  return normal_tensor({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
}

// CLS vector [d] repeated into [B x 1 x d].
Tensor repeat_token(const Tensor& token, std::size_t batch) {
  const std::size_t d = token.numel();
  std::vector<std::size_t> zeros(batch, 0);
  return select_rows(reshape(token, {1, 1, d}), zeros);
}

// Item b of a [B x L x d] tensor as [L x d].
Tensor item(const Tensor& x, std::size_t b) {
  return reshape(slice(x, 0, b, 1), {x.dim(1), x.dim(2)});
}

// Stack per-item [n x d] blocks into [B x n x d].
Tensor stack_items(const std::vector<Tensor>& items) {
  std::vector<Tensor> parts;
  parts.reserve(items.size());
  for (const auto& t : items) parts.push_back(reshape(t, {1, t.dim(0), t.dim(1)}));
  return parts.size() == 1 ? parts[0] : concat(parts, 0);
}

}  // namespace

UnifiedEncoder::UnifiedEncoder(const ModelConfig& config) : config_(config) {
  config_.validate();
  Rng rng(Rng::derive(config_.seed, 0x656e636f646572ULL));
  const auto& c = config_;
  text_embed = normal_tensor({c.vocab_size, c.d_text}, 1.0 / std::sqrt(static_cast<double>(c.d_text)), rng);
  text_pos = normal_tensor({c.max_text_len, c.d_text}, 0.02, rng);
  patch_proj = Linear(c.patch_dim, c.d_vision, rng);
  patch_pos = normal_tensor({c.patch_count, c.d_vision}, 0.02, rng);
  cls_visual = normal_tensor({c.d_hidden}, 0.02, rng);
  cls_textual = normal_tensor({c.d_hidden}, 0.02, rng);
  vision_in = Linear(c.d_vision, c.d_hidden, rng);
  text_in = Linear(c.d_text, c.d_hidden, rng);
  if (c.d_vision != c.d_text) {
    proj_v2t = projection_matrix(c.d_vision, c.d_text, rng);
    proj_t2v = projection_matrix(c.d_text, c.d_vision, rng);
  }
  visual_pool_ = PromptPool(Modality::visual, c.pool_size_v, c.d_vision, c.prompt_len_v, rng);
  textual_pool_ = PromptPool(Modality::textual, c.pool_size_t, c.d_text, c.prompt_len_t, rng);
  for (std::size_t i = 0; i < c.n_layers; ++i) blocks_.emplace_back(c.d_hidden, c.n_heads, c.d_ff, rng);
}

Tensor UnifiedEncoder::embed_text(std::span<const std::int64_t> ids, std::size_t batch, std::size_t len) const {
  if (len == 0 || len > config_.max_text_len) {
    throw DimensionError("embed_text: length " + std::to_string(len) + " exceeds max_text_len " +
                         std::to_string(config_.max_text_len));
  }
  Tensor tokens = embedding_lookup(text_embed, ids, {batch, len});
  return add(tokens, slice(text_pos, 0, 0, len));
}

Tensor UnifiedEncoder::embed_patches(const Tensor& features, std::span<const std::size_t> positions) const {
  if (features.rank() != 3 || features.dim(2) != config_.patch_dim || features.dim(1) > config_.patch_count) {
    throw DimensionError("embed_patches: features " + shape_str(features.shape()) + " do not match patch_dim " +
                         std::to_string(config_.patch_dim));
  }
  const std::size_t n = features.dim(1);
  Tensor pos;
  if (positions.empty()) {
    pos = slice(patch_pos, 0, 0, n);
  } else {
    if (positions.size() != n) throw DimensionError("embed_patches: positions length mismatch");
    pos = select_rows(patch_pos, positions);
  }
  return add(patch_proj(features), pos);
}

AssembledInput UnifiedEncoder::unify_inputs(const UnifiedBatch& batch) {
  batch.validate(config_);
  const std::size_t B = batch.size;
  const std::size_t n_sel = config_.n_sel;
  AssembledInput out;
  out.kind = batch.kind;
  out.batch = B;

  Tensor patch_emb;
  Tensor text_emb;
  std::vector<std::uint8_t> text_valid;
  std::vector<std::size_t> text_lengths(B, 0);
  if (batch.has_image()) patch_emb = embed_patches(batch.patch_features, batch.patch_positions);
  if (batch.has_text()) {
    text_emb = embed_text(batch.token_ids, B, batch.text_len);
    text_valid = batch.text_valid();
    for (std::size_t b = 0; b < B; ++b) {
      std::size_t n = 0;
      while (n < batch.text_len && text_valid[b * batch.text_len + n]) ++n;
      text_lengths[b] = n;
    }
  }
  auto text_item = [&](std::size_t b) { return slice(item(text_emb, b), 0, 0, text_lengths[b]); };

  std::vector<Tensor> vprompts;
  std::vector<Tensor> tprompts;
  for (std::size_t b = 0; b < B; ++b) {
    switch (batch.kind) {
      case BatchKind::image_text: {
        auto vsel = select_prompts(visual_pool_, query_fn(item(patch_emb, b), config_.d_vision), n_sel);
        vprompts.push_back(assemble_prompt_tokens(vsel, visual_pool_, PromptRole::as_visual_context));
        out.visual_selections.push_back(std::move(vsel));
        auto tsel = select_prompts(textual_pool_, query_fn(text_item(b), config_.d_text), n_sel);
        tprompts.push_back(assemble_prompt_tokens(tsel, textual_pool_, PromptRole::as_textual_context));
        out.textual_selections.push_back(std::move(tsel));
        break;
      }
      case BatchKind::image_only: {
        const Tensor* proj = proj_v2t.defined() ? &proj_v2t : nullptr;
        auto tsel = select_prompts(textual_pool_, cross_query(item(patch_emb, b), textual_pool_, proj), n_sel);
        tprompts.push_back(assemble_prompt_tokens(tsel, textual_pool_, PromptRole::as_visual_context));
        out.textual_selections.push_back(std::move(tsel));
        break;
      }
      case BatchKind::text_only: {
        const Tensor* proj = proj_t2v.defined() ? &proj_t2v : nullptr;
        auto vsel = select_prompts(visual_pool_, cross_query(text_item(b), visual_pool_, proj), n_sel);
        vprompts.push_back(assemble_prompt_tokens(vsel, visual_pool_, PromptRole::as_textual_context));
        out.visual_selections.push_back(std::move(vsel));
        break;
      }
    }
  }

  std::vector<Tensor> segments;
  SequenceLayout& lay = out.layout;
  std::size_t pos = 0;
  if (batch.has_image()) {
    lay.cls_visual = pos++;
    segments.push_back(repeat_token(cls_visual, B));
    lay.patch_begin = pos;
    lay.patch_len = patch_emb.dim(1);
    pos += lay.patch_len;
    segments.push_back(vision_in(patch_emb));
  }
  if (!vprompts.empty()) {
    Tensor v = stack_items(vprompts);
    lay.vprompt_begin = pos;
    lay.vprompt_len = v.dim(1);
    pos += lay.vprompt_len;
    segments.push_back(vision_in(v));
  }
  if (!tprompts.empty()) {
    Tensor t = stack_items(tprompts);
    lay.tprompt_begin = pos;
    lay.tprompt_len = t.dim(1);
    pos += lay.tprompt_len;
    segments.push_back(text_in(t));
  }
  if (batch.has_text()) {
    lay.cls_textual = pos++;
    segments.push_back(repeat_token(cls_textual, B));
    lay.token_begin = pos;
    lay.token_len = batch.text_len;
    pos += lay.token_len;
    segments.push_back(text_in(text_emb));
  }
  lay.length = pos;
  out.sequence = concat(segments, 1);

  out.mask.assign(B * pos, 1);
  if (batch.has_text()) {
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t j = 0; j < batch.text_len; ++j)
        out.mask[b * pos + lay.token_begin + j] = text_valid[b * batch.text_len + j];
  }
  return out;
}

EncodedBatch UnifiedEncoder::encode(const AssembledInput& input, EncodeTrace* trace) const {
  const Tensor& seq = input.sequence;
  if (seq.rank() != 3 || seq.dim(2) != config_.d_hidden) {
    throw DimensionError("encode: sequence " + shape_str(seq.shape()) + " is not [B x L x d_hidden]");
  }
  const std::size_t B = seq.dim(0);
  const std::size_t L = seq.dim(1);
  if (input.mask.size() != B * L) {
    throw DimensionError("encode: mask has " + std::to_string(input.mask.size()) + " entries for " +
                         shape_str(seq.shape()));
  }
  Tensor mask = make_attention_mask(B, config_.n_heads, L, input.mask, false);
  Tensor x = seq;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    Tensor attention;
    x = blocks_[i].forward(x, mask, trace ? &attention : nullptr);
    if (trace) trace->attention.push_back(attention);
    for (double v : x.data()) {
      if (!std::isfinite(v)) throw NumericError("encode: non-finite activation after layer " + std::to_string(i));
    }
  }
  const SequenceLayout& lay = input.layout;
  const std::size_t d = config_.d_hidden;
  auto token_at = [&](std::size_t p) { return reshape(slice(x, 1, p, 1), {B, d}); };
  auto segment_mean = [&](std::size_t begin, std::size_t len) {
    if (len == 0) throw DimensionError("encode: no segment to summarize");
    return mean_pool(slice(x, 1, begin, len), 1);
  };
  EncodedBatch out;
  out.token_states = x;
  out.layout = lay;
  out.cls_visual = lay.cls_visual != SequenceLayout::npos ? token_at(lay.cls_visual)
                                                          : segment_mean(lay.vprompt_begin, lay.vprompt_len);
  out.cls_textual = lay.cls_textual != SequenceLayout::npos ? token_at(lay.cls_textual)
                                                            : segment_mean(lay.tprompt_begin, lay.tprompt_len);
  return out;
}

EncodedBatch UnifiedEncoder::forward(const UnifiedBatch& batch, EncodeTrace* trace) {
  return encode(unify_inputs(batch), trace);
}

ParameterList UnifiedEncoder::parameters() const {
  ParameterList out;
  out.push_back({"enc.text_embed", text_embed});
  out.push_back({"enc.text_pos", text_pos});
  patch_proj.collect(out, "enc.patch_proj");
  out.push_back({"enc.patch_pos", patch_pos});
  out.push_back({"enc.cls_visual", cls_visual});
  out.push_back({"enc.cls_textual", cls_textual});
  vision_in.collect(out, "enc.vision_in");
  text_in.collect(out, "enc.text_in");
  if (proj_v2t.defined()) out.push_back({"enc.proj_v2t", proj_v2t});
  if (proj_t2v.defined()) out.push_back({"enc.proj_t2v", proj_t2v});
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(out, "enc.block" + std::to_string(i));
  auto pools = pool_parameters();
  out.insert(out.end(), pools.begin(), pools.end());
  return out;
}

ParameterList UnifiedEncoder::pool_parameters() const {
  ParameterList out;
  visual_pool_.collect(out, "pool.visual");
  textual_pool_.collect(out, "pool.textual");
  return out;
}

}  // namespace dcp
