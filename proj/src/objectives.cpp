#include "dcp/objectives.hpp"

#include <algorithm>
#include <cmath>

#include "dcp/errors.hpp"
#include "dcp/ops.hpp"

namespace dcp {

void PretrainHeads::collect(ParameterList& out) const {
  mlm.norm.collect(out, "head.mlm.norm");
  mlm.out.collect(out, "head.mlm.out");
  itm.norm.collect(out, "head.itm.norm");
  itm.out.collect(out, "head.itm.out");
  out.push_back({"head.temperature", temperature});
}

PretrainModel::PretrainModel(const ModelConfig& cfg) : config(cfg), encoder(cfg) {
  Rng rng(Rng::derive(config.seed, 0x6865616473ULL));
  heads.mlm.norm = LayerNorm(config.d_hidden);
  heads.mlm.out = Linear(config.d_hidden, config.vocab_size, rng);
  heads.itm.norm = LayerNorm(2 * config.d_hidden);
  heads.itm.out = Linear(2 * config.d_hidden, 2, rng);
  heads.temperature = Tensor::scalar(config.temperature_init, true);
}

ParameterList PretrainModel::parameters() const {
  ParameterList out = encoder.parameters();
  heads.collect(out);
  return out;
}

void PretrainModel::clamp_temperature() {
  auto t = heads.temperature.mutable_data();
  t[0] = std::clamp(t[0], kMinTemperature, kMaxTemperature);
}

MaskingResult apply_mlm_masking(std::span<const std::int64_t> ids, double rate, std::size_t vocab_size, Rng& rng) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw ConfigError("apply_mlm_masking: rate must lie in [0, 1]");
  if (vocab_size <= static_cast<std::size_t>(kFirstWordId)) throw ConfigError("apply_mlm_masking: vocabulary too small");
  MaskingResult out;
  out.corrupted.assign(ids.begin(), ids.end());
  out.labels.assign(ids.size(), -1);
  const std::size_t words = vocab_size - static_cast<std::size_t>(kFirstWordId);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (is_special_token(ids[i])) continue;
    if (!(rng.uniform() < rate)) continue;
    out.labels[i] = ids[i];
    ++out.masked_count;
    const double r = rng.uniform();
    if (r < 0.8) {
      out.corrupted[i] = kMaskId;
    } else if (r < 0.9) {
      out.corrupted[i] = kFirstWordId + static_cast<std::int64_t>(rng.below(words));
    }
  }
  return out;
}

MlmLoss mlm_loss(const EncodedBatch& encoded, std::span<const std::int64_t> labels, const MlmHead& head) {
  const SequenceLayout& lay = encoded.layout;
  const Tensor& states = encoded.token_states;
  const std::size_t B = states.dim(0);
  const std::size_t L = states.dim(1);
  const std::size_t d = states.dim(2);
  if (lay.token_len == 0) throw DimensionError("mlm_loss: batch has no text segment");
  if (labels.size() != B * lay.token_len) {
    throw DimensionError("mlm_loss: " + std::to_string(labels.size()) + " labels for " + std::to_string(B) + " x " +
                         std::to_string(lay.token_len) + " tokens");
  }
  std::vector<std::size_t> rows;
  std::vector<std::int64_t> targets;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t j = 0; j < lay.token_len; ++j) {
      const auto y = labels[b * lay.token_len + j];
      if (y < 0) continue;
      rows.push_back(b * L + lay.token_begin + j);
      targets.push_back(y);
    }
  }
  MlmLoss out;
  if (rows.empty()) {
    out.loss = Tensor::scalar(0.0);
    out.skipped = true;
    return out;
  }
  Tensor picked = select_rows(reshape(states, {B * L, d}), rows);
  out.loss = cross_entropy(head(picked), targets);
  out.count = rows.size();
  return out;
}

Tensor itm_logits(const Tensor& cls_visual, const Tensor& cls_textual, const ItmHead& head) {
  return head(concat({cls_visual, cls_textual}, 1));
}

Tensor itm_loss(const Tensor& cls_visual, const Tensor& cls_textual, std::span<const std::int64_t> labels,
                const ItmHead& head) {
  for (auto y : labels) {
    if (y != 0 && y != 1) throw ConfigError("itm_loss: labels must be 0 or 1");
  }
  return cross_entropy(itm_logits(cls_visual, cls_textual, head), labels);
}

Tensor itc_loss(const Tensor& visual_reps, const Tensor& textual_reps, const Tensor& temperature) {
  if (temperature.numel() != 1 || !(temperature.item() > 0.0)) {
    throw ConfigError("itc_loss: temperature must be a positive scalar");
  }
  if (visual_reps.rank() != 2 || visual_reps.shape() != textual_reps.shape()) {
    throw DimensionError("itc_loss: representation shapes " + shape_str(visual_reps.shape()) + " and " +
                         shape_str(textual_reps.shape()) + " must both be [B x d]");
  }
  const std::size_t B = visual_reps.dim(0);
  Tensor sims = matmul(l2_normalize(visual_reps), transpose(l2_normalize(textual_reps)));
  Tensor logits = div_scalar(sims, temperature);
  std::vector<std::int64_t> diag(B);
  for (std::size_t i = 0; i < B; ++i) diag[i] = static_cast<std::int64_t>(i);
  Tensor i2t = cross_entropy(logits, diag);
  Tensor t2i = cross_entropy(transpose(logits), diag);
  return scale(add(i2t, t2i), 0.5);
}

Tensor itc_loss(const Tensor& visual_reps, const Tensor& textual_reps, double temperature) {
  return itc_loss(visual_reps, textual_reps, Tensor::scalar(temperature));
}

std::vector<std::size_t> derangement(std::size_t n, Rng& rng) {
  if (n < 2) throw ConfigError("derangement: need at least two items to build negatives");
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  for (std::size_t i = n - 1; i > 0; --i) std::swap(p[i], p[rng.below(i)]);
  return p;
}

PreparedPretrainBatch prepare_pretrain_batch(const UnifiedBatch& pairs, const ModelConfig& config, Rng& rng) {
  if (pairs.kind != BatchKind::image_text) throw ConfigError("pre-training needs an image_text batch");
  pairs.validate(config);
  const std::size_t B = pairs.size;
  const std::size_t Lt = pairs.text_len;
  PreparedPretrainBatch out;
  out.pairs = B;

  MaskingResult masked = apply_mlm_masking(pairs.token_ids, config.mask_rate, config.vocab_size, rng);
  out.masked_count = masked.masked_count;
  out.negative_text = derangement(B, rng);

  std::vector<std::int64_t> joint_ids = masked.corrupted;
  out.mlm_labels = masked.labels;
  for (std::size_t i = 0; i < B; ++i) {
    const std::size_t src = out.negative_text[i];
    joint_ids.insert(joint_ids.end(), masked.corrupted.begin() + src * Lt, masked.corrupted.begin() + (src + 1) * Lt);
  }
  out.mlm_labels.resize(2 * B * Lt, -1);
  std::vector<double> joint_patches(pairs.patch_features.data().begin(), pairs.patch_features.data().end());
  joint_patches.insert(joint_patches.end(), pairs.patch_features.data().begin(), pairs.patch_features.data().end());
  Shape ps = pairs.patch_features.shape();
  ps[0] = 2 * B;
  out.joint = UnifiedBatch::pairs(Tensor(ps, std::move(joint_patches)), std::move(joint_ids), Lt);
  out.joint.patch_positions = pairs.patch_positions;
  out.itm_labels.assign(2 * B, 0);
  std::fill(out.itm_labels.begin(), out.itm_labels.begin() + static_cast<std::ptrdiff_t>(B), 1);

  out.image_only = UnifiedBatch::images(pairs.patch_features);
  out.image_only.patch_positions = pairs.patch_positions;
  out.text_only = UnifiedBatch::texts(pairs.token_ids, B, Lt);
  return out;
}

double recompose_total(const PretrainLossReport& r, const ModelConfig& c) {
  return r.l_mlm + c.sigma * r.l_itm + c.lambda * r.l_itc + c.beta * r.l_p;
}

PretrainForward combined_pretrain_loss(const PreparedPretrainBatch& prepared, PretrainModel& model) {
  const ModelConfig& c = model.config;
  const std::size_t B = prepared.pairs;
  UnifiedEncoder& enc = model.encoder;

  AssembledInput joint = enc.unify_inputs(prepared.joint);
  EncodedBatch joint_out = enc.encode(joint);
  MlmLoss mlm = mlm_loss(joint_out, prepared.mlm_labels, model.heads.mlm);
  Tensor itm = itm_loss(joint_out.cls_visual, joint_out.cls_textual, prepared.itm_labels, model.heads.itm);

  AssembledInput img = enc.unify_inputs(prepared.image_only);
  AssembledInput txt = enc.unify_inputs(prepared.text_only);
  EncodedBatch img_out = enc.encode(img);
  EncodedBatch txt_out = enc.encode(txt);
  Tensor itc = itc_loss(img_out.cls_visual, txt_out.cls_textual, model.heads.temperature);

  // Positive pairs and both single-modality passes contribute to the
  // key-pulling loss; negatives would only repeat the positives' queries.
  std::vector<SelectionResult> selections;
  for (std::size_t i = 0; i < B; ++i) {
    selections.push_back(joint.visual_selections[i]);
    selections.push_back(joint.textual_selections[i]);
  }
  for (const auto& s : img.textual_selections) selections.push_back(s);
  for (const auto& s : txt.visual_selections) selections.push_back(s);
  Tensor lp = surrogate_loss(selections);

  PretrainForward out;
  out.mlm = mlm.loss;
  out.itm = itm;
  out.itc = itc;
  out.prompt = lp;
  out.total = add(add(add(mlm.loss, scale(itm, c.sigma)), scale(itc, c.lambda)), scale(lp, c.beta));
  out.report.l_mlm = mlm.loss.item();
  out.report.l_itm = itm.item();
  out.report.l_itc = itc.item();
  out.report.l_p = lp.item();
  out.report.l_total = out.total.item();
  out.report.masked_token_count = mlm.count;
  out.report.itm_pair_count = prepared.itm_labels.size();
  return out;
}

PretrainLossReport pretrain_step(const UnifiedBatch& pairs, PretrainModel& model, AdamW& optimizer, Rng& rng) {
  PreparedPretrainBatch prepared = prepare_pretrain_batch(pairs, model.config, rng);
  optimizer.zero_grad();
  Tape::current().clear();
  PretrainForward fwd = combined_pretrain_loss(prepared, model);
  const auto& r = fwd.report;
  if (!std::isfinite(r.l_total)) {
    Tape::current().clear();
    throw NumericError("pretrain_step: non-finite loss (mlm " + std::to_string(r.l_mlm) + ", itm " +
                       std::to_string(r.l_itm) + ", itc " + std::to_string(r.l_itc) + ", prompt " +
                       std::to_string(r.l_p) + ")");
  }
  backward(fwd.total);
  optimizer.step();
  model.clamp_temperature();
  return r;
}

}  // namespace dcp
