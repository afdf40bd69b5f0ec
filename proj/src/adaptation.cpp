#include "dcp/adaptation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dcp/errors.hpp"
#include "dcp/objectives.hpp"
#include "dcp/ops.hpp"

namespace dcp {

const char* task_name(Task task) {
  switch (task) {
    case Task::vqa: return "vqa";
    case Task::pair_classify: return "pair_classify";
    case Task::image_classify: return "image_classify";
    case Task::text_classify: return "text_classify";
    case Task::retrieval: return "retrieval";
    case Task::generation: return "generation";
  }
  return "?";
}

Task parse_task(const std::string& name) {
  for (Task t : {Task::vqa, Task::pair_classify, Task::image_classify, Task::text_classify, Task::retrieval,
                 Task::generation}) {
    if (name == task_name(t)) return t;
  }
  throw ConfigError("unknown task id '" + name + "'");
}

BatchKind task_input_kind(Task task) {
  switch (task) {
    case Task::image_classify:
    case Task::generation: return BatchKind::image_only;
    case Task::text_classify: return BatchKind::text_only;
    default: return BatchKind::image_text;
  }
}

bool is_classification(Task task) {
  return task == Task::vqa || task == Task::pair_classify || task == Task::image_classify ||
         task == Task::text_classify;
}

ReportDecoder::ReportDecoder(const DecoderConfig& config, const ModelConfig& model, Rng& rng) : config_(config) {
  if (!config.causal) throw ConfigError("report decoder is always causal");
  if (config.context_len == 0) throw ConfigError("decoder context_len must be positive");
  const std::size_t d = model.d_hidden;
  std::vector<double> tok(model.vocab_size * d);
  for (auto& v : tok) v = rng.normal(0.0, 1.0 / std::sqrt(static_cast<double>(d)));
  token_embed = Tensor({model.vocab_size, d}, std::move(tok), true);
  std::vector<double> pos(config.context_len * d);
  for (auto& v : pos) v = rng.normal(0.0, 0.02);
  pos_embed = Tensor({config.context_len, d}, std::move(pos), true);
  for (std::size_t i = 0; i < config.n_layers; ++i) blocks.emplace_back(d, config.n_heads, model.d_ff, rng);
  final_norm = LayerNorm(d);
  out = Linear(d, model.vocab_size, rng);
}

std::size_t ReportDecoder::init_from_encoder(const UnifiedEncoder& encoder) {
  std::size_t copied = 0;
  const auto& src = encoder.blocks();
  for (std::size_t i = 0; i < blocks.size() && i < src.size(); ++i) {
    ParameterList mine;
    ParameterList theirs;
    blocks[i].collect(mine, "");
    src[i].collect(theirs, "");
    bool same = mine.size() == theirs.size();
    for (std::size_t k = 0; same && k < mine.size(); ++k) same = mine[k].tensor.shape() == theirs[k].tensor.shape();
    if (!same) continue;
    blocks[i].copy_from(src[i]);
    ++copied;
  }
  return copied;
}

Tensor ReportDecoder::logits(const Tensor& prefix, std::span<const std::int64_t> tokens, std::size_t token_len) const {
  if (prefix.rank() != 3 || prefix.dim(2) != token_embed.dim(1)) {
    throw DimensionError("decoder: prefix " + shape_str(prefix.shape()) + " is not [B x P x d_hidden]");
  }
  const std::size_t B = prefix.dim(0);
  const std::size_t P = prefix.dim(1);
  const std::size_t L = P + token_len;
  if (L > config_.context_len) {
    throw ConfigError("decoder: context overflow, " + std::to_string(L) + " positions exceed context_len " +
                      std::to_string(config_.context_len));
  }
  if (tokens.size() != B * token_len) throw DimensionError("decoder: token count mismatch");
  Tensor x = prefix;
  if (token_len > 0) x = concat({prefix, embedding_lookup(token_embed, tokens, {B, token_len})}, 1);
  x = add(x, slice(pos_embed, 0, 0, L));
  Tensor mask = make_attention_mask(B, config_.n_heads, L, {}, true);
  for (const auto& block : blocks) x = block.forward(x, mask);
  return out(final_norm(x));
}

void ReportDecoder::collect(ParameterList& params, const std::string& prefix) const {
  params.push_back({prefix + ".token_embed", token_embed});
  params.push_back({prefix + ".pos_embed", pos_embed});
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(params, prefix + ".block" + std::to_string(i));
  final_norm.collect(params, prefix + ".final_norm");
  out.collect(params, prefix + ".out");
}

TaskHead TaskHead::create(Task task, std::size_t label_space, const ModelConfig& config, std::uint64_t seed,
                          bool zero_output) {
  Rng rng(Rng::derive(seed, 0x7461736bULL + static_cast<std::uint64_t>(task)));
  TaskHead head;
  head.task = task;
  if (is_classification(task)) {
    if (label_space == 0) throw ConfigError("classification head needs a positive label space");
    head.label_space = label_space;
    const std::size_t in = head.input_dim(config);
    head.norm = LayerNorm(in);
    head.out = Linear(in, label_space, rng);
    if (zero_output) {
      auto w = head.out.weight.mutable_data();
      std::fill(w.begin(), w.end(), 0.0);
    }
  } else if (task == Task::retrieval) {
    head.temperature = Tensor::scalar(config.temperature_init, true);
  } else {
    head.label_space = config.vocab_size;
    DecoderConfig dc{config.decoder_layers, config.decoder_heads, config.context_len, true};
    head.decoder.emplace(dc, config, rng);
  }
  return head;
}

std::size_t TaskHead::input_dim(const ModelConfig& config) const {
  return task == Task::vqa || task == Task::pair_classify ? 2 * config.d_hidden : config.d_hidden;
}

ParameterList TaskHead::parameters() const {
  ParameterList out_params;
  const std::string prefix = std::string("task.") + task_name(task);
  if (is_classification(task)) {
    norm.collect(out_params, prefix + ".norm");
    out.collect(out_params, prefix + ".out");
  } else if (task == Task::retrieval) {
    out_params.push_back({prefix + ".temperature", temperature});
  } else if (decoder) {
    decoder->collect(out_params, prefix + ".decoder");
  }
  return out_params;
}

ParameterList prepare_finetune_parameters(UnifiedEncoder& encoder, const TaskHead& head,
                                          const FinetuneOptions& options) {
  ParameterList trainable;
  ParameterList pools = encoder.pool_parameters();
  for (const auto& p : encoder.parameters()) {
    const bool is_pool = std::any_of(pools.begin(), pools.end(), [&](const NamedTensor& q) { return q.tensor.same_node(p.tensor); });
    bool on = !options.freeze_backbone && (!is_pool || options.train_pools);
    Tensor t = p.tensor;
    t.set_requires_grad(on);
    t.zero_grad();
    if (on) trainable.push_back(p);
  }
  for (const auto& p : head.parameters()) {
    Tensor t = p.tensor;
    t.set_requires_grad(true);
    t.zero_grad();
    trainable.push_back(p);
  }
  return trainable;
}

namespace {

UnifiedBatch images_of(const UnifiedBatch& batch) {
  if (!batch.has_image()) throw ConfigError("batch has no images");
  UnifiedBatch out = UnifiedBatch::images(batch.patch_features);
  out.patch_positions = batch.patch_positions;
  return out;
}

UnifiedBatch texts_of(const UnifiedBatch& batch) {
  if (!batch.has_text()) throw ConfigError("batch has no text");
  return UnifiedBatch::texts(batch.token_ids, batch.size, batch.text_len);
}

Tensor head_logits(const UnifiedBatch& batch, UnifiedEncoder& encoder, const TaskHead& head) {
  if (!is_classification(head.task)) {
    throw ConfigError(std::string("classify: task ") + task_name(head.task) + " is not a classification task");
  }
  if (batch.kind != task_input_kind(head.task)) {
    throw ConfigError(std::string("classify: task ") + task_name(head.task) + " expects " +
                      batch_kind_name(task_input_kind(head.task)) + " input, got " + batch_kind_name(batch.kind));
  }
  EncodedBatch enc = encoder.forward(batch);
  Tensor features;
  switch (head.task) {
    case Task::image_classify: features = enc.cls_visual; break;
    case Task::text_classify: features = enc.cls_textual; break;
    default: features = concat({enc.cls_visual, enc.cls_textual}, 1); break;
  }
  return head.out(head.norm(features));
}

// Teacher-forced inputs and targets: the last prefix position predicts the
// first caption token, and the position of the last caption token predicts
// the end token.
struct TeacherForcing {
  std::vector<std::int64_t> tokens;
  std::size_t token_len = 0;
  std::vector<std::int64_t> labels;
};

TeacherForcing teacher_forcing(const std::vector<std::vector<std::int64_t>>& captions, std::size_t prefix_len) {
  TeacherForcing tf;
  const std::size_t B = captions.size();
  for (const auto& c : captions) tf.token_len = std::max(tf.token_len, c.size());
  const std::size_t L = prefix_len + tf.token_len;
  tf.tokens.assign(B * tf.token_len, kPadId);
  tf.labels.assign(B * L, -1);
  for (std::size_t b = 0; b < B; ++b) {
    const auto& c = captions[b];
    for (std::size_t i = 0; i < c.size(); ++i) tf.tokens[b * tf.token_len + i] = c[i];
    for (std::size_t i = 0; i <= c.size(); ++i) {
      tf.labels[b * L + prefix_len - 1 + i] = i < c.size() ? c[i] : kEosId;
    }
  }
  return tf;
}

}  // namespace

Tensor report_prefix(const UnifiedBatch& images, UnifiedEncoder& encoder) {
  return encoder.forward(images.kind == BatchKind::image_only ? images : images_of(images)).token_states;
}

Tensor task_loss(const FinetuneBatch& batch, UnifiedEncoder& encoder, const TaskHead& head) {
  if (is_classification(head.task)) {
    if (batch.labels.size() != batch.inputs.size) throw ConfigError("task_loss: one label per row required");
    for (auto y : batch.labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= head.label_space) throw ConfigError("task_loss: label out of range");
    }
    return cross_entropy(head_logits(batch.inputs, encoder, head), batch.labels);
  }
  if (head.task == Task::retrieval) {
    auto [img, txt] = retrieval_representations(batch.inputs, encoder);
    return itc_loss(img, txt, head.temperature);
  }
  if (!head.decoder) throw ConfigError("task_loss: generation head without decoder");
  if (batch.captions.size() != batch.inputs.size) throw ConfigError("task_loss: one caption per row required");
  Tensor prefix = report_prefix(batch.inputs, encoder);
  TeacherForcing tf = teacher_forcing(batch.captions, prefix.dim(1));
  Tensor logits = head.decoder->logits(prefix, tf.tokens, tf.token_len);
  return cross_entropy(logits, tf.labels);
}

double finetune_step(const FinetuneBatch& batch, UnifiedEncoder& encoder, TaskHead& head, AdamW& optimizer) {
  optimizer.zero_grad();
  Tape::current().clear();
  Tensor loss = task_loss(batch, encoder, head);
  const double value = loss.item();
  if (!std::isfinite(value)) {
    Tape::current().clear();
    throw NumericError(std::string("finetune_step: non-finite loss for task ") + task_name(head.task));
  }
  backward(loss);
  optimizer.step();
  if (head.temperature.defined()) {
    auto t = head.temperature.mutable_data();
    t[0] = std::clamp(t[0], kMinTemperature, kMaxTemperature);
  }
  return value;
}

Tensor classify(const UnifiedBatch& batch, UnifiedEncoder& encoder, const TaskHead& head) {
  return softmax(head_logits(batch, encoder, head), -1);
}

std::vector<std::int64_t> predict_labels(const Tensor& probabilities) {
  const std::size_t k = probabilities.shape().back();
  const std::size_t rows = probabilities.numel() / k;
  const auto p = probabilities.data();
  std::vector<std::int64_t> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (p[r * k + j] > p[r * k + best]) best = j;
    out[r] = static_cast<std::int64_t>(best);
  }
  return out;
}

RetrievalResult retrieval_rank(const Tensor& image_reps, const Tensor& text_reps, std::span<const std::size_t> pairing,
                               std::span<const std::size_t> ks) {
  if (image_reps.rank() != 2 || text_reps.rank() != 2 || image_reps.dim(1) != text_reps.dim(1)) {
    throw DimensionError("retrieval_rank: representations " + shape_str(image_reps.shape()) + " and " +
                         shape_str(text_reps.shape()) + " must be [N x d] with equal d");
  }
  const std::size_t ni = image_reps.dim(0);
  const std::size_t nt = text_reps.dim(0);
  const std::size_t d = image_reps.dim(1);
  std::vector<std::size_t> truth(ni);
  if (pairing.empty()) {
    if (ni != nt) throw ConfigError("retrieval_rank: identity pairing needs equal image and text counts");
    std::iota(truth.begin(), truth.end(), 0);
  } else {
    if (pairing.size() != ni) throw ConfigError("retrieval_rank: pairing length must equal image count");
    for (auto t : pairing)
      if (t >= nt) throw ConfigError("retrieval_rank: pairing index out of range");
    truth.assign(pairing.begin(), pairing.end());
  }
  for (auto k : ks) {
    if (k == 0 || k > nt || k > ni) {
      throw ConfigError("retrieval_rank: k = " + std::to_string(k) + " exceeds candidate count (" +
                        std::to_string(ni) + " images, " + std::to_string(nt) + " texts)");
    }
  }
  const auto id = image_reps.data();
  const auto td = text_reps.data();
  std::vector<double> sim(ni * nt);
  for (std::size_t i = 0; i < ni; ++i)
    for (std::size_t j = 0; j < nt; ++j) sim[i * nt + j] = cosine_value(id.subspan(i * d, d), td.subspan(j * d, d));

  auto rank = [](std::size_t n, auto score) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score(a) > score(b); });
    return order;
  };
  RetrievalResult out;
  out.ks.assign(ks.begin(), ks.end());
  for (std::size_t i = 0; i < ni; ++i) out.image_to_text.push_back(rank(nt, [&](std::size_t j) { return sim[i * nt + j]; }));
  for (std::size_t j = 0; j < nt; ++j) out.text_to_image.push_back(rank(ni, [&](std::size_t i) { return sim[i * nt + j]; }));

  for (auto k : ks) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < ni; ++i) {
      const auto& r = out.image_to_text[i];
      if (std::find(r.begin(), r.begin() + static_cast<std::ptrdiff_t>(k), truth[i]) != r.begin() + static_cast<std::ptrdiff_t>(k)) ++hits;
    }
    out.recall_i2t.push_back(static_cast<double>(hits) / static_cast<double>(ni));

    std::size_t queries = 0;
    hits = 0;
    for (std::size_t j = 0; j < nt; ++j) {
      bool is_target = false;
      bool hit = false;
      const auto& r = out.text_to_image[j];
      for (std::size_t i = 0; i < ni; ++i) {
        if (truth[i] != j) continue;
        is_target = true;
        if (std::find(r.begin(), r.begin() + static_cast<std::ptrdiff_t>(k), i) != r.begin() + static_cast<std::ptrdiff_t>(k)) hit = true;
      }
      if (!is_target) continue;
      ++queries;
      if (hit) ++hits;
    }
    out.recall_t2i.push_back(queries ? static_cast<double>(hits) / static_cast<double>(queries) : 0.0);
  }
  return out;
}

std::pair<Tensor, Tensor> retrieval_representations(const UnifiedBatch& pairs, UnifiedEncoder& encoder) {
  if (pairs.kind != BatchKind::image_text) throw ConfigError("retrieval expects an image_text batch");
  EncodedBatch img = encoder.forward(images_of(pairs));
  EncodedBatch txt = encoder.forward(texts_of(pairs));
  return {img.cls_visual, txt.cls_textual};
}

std::vector<std::vector<std::int64_t>> generate_report(const UnifiedBatch& images, UnifiedEncoder& encoder,
                                                       const TaskHead& head, std::size_t max_len) {
  if (!head.decoder) throw ConfigError("generate_report: head has no decoder");
  NoGradGuard no_grad;
  const UnifiedBatch input = images.kind == BatchKind::image_only ? images : images_of(images);
  input.validate(encoder.config());
  const std::size_t prefix_len = 1 + input.patch_features.dim(1) + encoder.config().n_sel * encoder.config().prompt_len_t;
  if (prefix_len + max_len > head.decoder->config().context_len) {
    throw ConfigError("generate_report: context overflow, prefix " + std::to_string(prefix_len) + " + max_len " +
                      std::to_string(max_len) + " exceeds context_len " +
                      std::to_string(head.decoder->config().context_len));
  }
  Tensor prefix = report_prefix(input, encoder);
  const std::size_t B = prefix.dim(0);
  const std::size_t vocab = head.decoder->out.out_features();
  std::vector<std::vector<std::int64_t>> outputs(B);
  for (std::size_t b = 0; b < B; ++b) {
    Tensor p = slice(prefix, 0, b, 1);
    std::vector<std::int64_t>& seq = outputs[b];
    while (seq.size() < max_len) {
      Tensor logits = head.decoder->logits(p, seq, seq.size());
      const std::size_t last = logits.dim(1) - 1;
      const auto row = logits.data().subspan(last * vocab, vocab);
      std::size_t best = 0;
      for (std::size_t j = 1; j < vocab; ++j)
        if (row[j] > row[best]) best = j;
      if (static_cast<std::int64_t>(best) == kEosId) break;
      seq.push_back(static_cast<std::int64_t>(best));
    }
  }
  return outputs;
}

}  // namespace dcp
