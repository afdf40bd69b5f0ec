#include "dcp/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <type_traits>
#include <variant>

#include "dcp/bleu.hpp"
#include "dcp/errors.hpp"
#include "dcp/ops.hpp"
#include "dcp/rng.hpp"
#include "json.hpp"

namespace dcp {

using nlohmann::json;

namespace {

static_assert(std::is_same_v<std::uint64_t, std::size_t>, "seed is stored through a size_t field");

// Stream tags for Rng::derive so independent consumers never share draws.
constexpr std::uint64_t kShuffleStream = 0x73687566ULL;
constexpr std::uint64_t kMaskStream = 0x6d61736bULL;
constexpr std::uint64_t kEvalStream = 0x6576616cULL;
constexpr std::uint64_t kFinetuneStream = 0x66696e65ULL;
constexpr std::uint64_t kHeadStream = 0x68656164ULL;

using FieldPtr = std::variant<std::size_t*, double*, bool*>;

struct Field {
  const char* key;
  FieldPtr ptr;
};

struct Section {
  const char* name;
  std::vector<Field> fields;
};

std::vector<Section> sections(RunConfig& c) {
  ModelConfig& m = c.model;
  CorpusConfig& s = c.corpus;
  return {
      {"model",
       {{"d_text", &m.d_text},
        {"d_vision", &m.d_vision},
        {"d_hidden", &m.d_hidden},
        {"n_layers", &m.n_layers},
        {"n_heads", &m.n_heads},
        {"d_ff", &m.d_ff},
        {"vocab_size", &m.vocab_size},
        {"max_text_len", &m.max_text_len},
        {"patch_count", &m.patch_count},
        {"patch_dim", &m.patch_dim}}},
      {"pools",
       {{"pool_size_v", &m.pool_size_v},
        {"pool_size_t", &m.pool_size_t},
        {"prompt_len_v", &m.prompt_len_v},
        {"prompt_len_t", &m.prompt_len_t},
        {"n_sel", &m.n_sel}}},
      {"loss",
       {{"sigma", &m.sigma},
        {"lambda", &m.lambda},
        {"beta", &m.beta},
        {"mask_rate", &m.mask_rate},
        {"temperature_init", &m.temperature_init}}},
      {"decoder", {{"layers", &m.decoder_layers}, {"heads", &m.decoder_heads}, {"context_len", &m.context_len}}},
      {"train",
       {{"lr", &m.lr},
        {"weight_decay", &m.weight_decay},
        {"batch_size", &m.batch_size},
        {"pretrain_steps", &m.pretrain_steps},
        {"checkpoint_every", &m.checkpoint_every},
        {"finetune_steps", &m.finetune_steps},
        {"finetune_lr", &m.finetune_lr},
        {"freeze_backbone", &m.freeze_backbone},
        {"finetune_pools", &m.finetune_pools}}},
      {"corpus",
       {{"n_pairs", &s.n_pairs},
        {"n_concepts", &s.n_concepts},
        {"concepts_per_pair", &s.concepts_per_pair},
        {"text_len", &s.text_len},
        {"n_answers", &s.n_answers},
        {"n_fillers", &s.n_fillers},
        {"noise", &s.noise}}},
  };
}

void read_field(const json& v, const std::string& where, const FieldPtr& ptr) {
  std::visit(
      [&](auto* dst) {
        using T = std::remove_pointer_t<decltype(dst)>;
        if constexpr (std::is_same_v<T, bool>) {
          if (!v.is_boolean()) throw ConfigError("config: " + where + " must be a boolean");
          *dst = v.get<bool>();
        } else if constexpr (std::is_same_v<T, double>) {
          if (!v.is_number()) throw ConfigError("config: " + where + " must be a number");
          *dst = v.get<double>();
        } else {
          if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
            throw ConfigError("config: " + where + " must be a non-negative integer");
          }
          *dst = v.get<std::size_t>();
        }
      },
      ptr);
}

void sync_corpus(RunConfig& c) {
  c.corpus.patch_count = c.model.patch_count;
  c.corpus.patch_dim = c.model.patch_dim;
  c.corpus.seed = c.model.seed;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

class CsvFile {
 public:
  explicit CsvFile(const std::filesystem::path& path) : path_(path), out_(path, std::ios::trunc) {
    if (!out_) throw IoError("cannot open " + path.string() + " for writing");
  }
  void line(const std::string& s) {
    out_ << s << '\n';
    out_.flush();
    if (!out_) throw IoError("failed writing " + path_.string());
  }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

void write_checkpoint_atomic(const std::filesystem::path& path, const Checkpoint& ckpt) {
  auto tmp = path;
  tmp += ".tmp";
  write_checkpoint(tmp, ckpt);
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

// Restores pool usage counters when an evaluation is done.
class UsageGuard {
 public:
  explicit UsageGuard(UnifiedEncoder& enc) : enc_(enc) {
    for (PromptPool* p : {&enc.visual_pool(), &enc.textual_pool()}) {
      usage_.emplace_back(p->usage().begin(), p->usage().end());
      calls_.push_back(p->selection_calls());
    }
  }
  ~UsageGuard() {
    enc_.visual_pool().set_usage(usage_[0], calls_[0]);
    enc_.textual_pool().set_usage(usage_[1], calls_[1]);
  }
  UsageGuard(const UsageGuard&) = delete;
  UsageGuard& operator=(const UsageGuard&) = delete;

 private:
  UnifiedEncoder& enc_;
  std::vector<std::vector<std::uint64_t>> usage_;
  std::vector<std::uint64_t> calls_;
};

// Contiguous chunks of at least two items (derangements need two).
std::vector<std::pair<std::size_t, std::size_t>> chunks(std::size_t n, std::size_t size) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t b = 0; b < n; b += size) out.emplace_back(b, std::min(size, n - b));
  if (out.size() > 1 && out.back().second < 2) {
    out[out.size() - 2].second += out.back().second;
    out.pop_back();
  }
  return out;
}

// Cycles through a seeded permutation of 0..n-1, reshuffling per epoch.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch, std::uint64_t seed)
      : order_(all_indices(n)), batch_(std::min(batch, n)), rng_(seed) {
    rng_.shuffle(order_);
  }
  std::vector<std::size_t> next() {
    if (pos_ + batch_ > order_.size()) {
      rng_.shuffle(order_);
      pos_ = 0;
    }
    std::vector<std::size_t> out(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(pos_ + batch_));
    pos_ += batch_;
    return out;
  }

 private:
  std::vector<std::size_t> order_;
  std::size_t batch_;
  std::size_t pos_ = 0;
  Rng rng_;
};

std::vector<std::int64_t> labels_for(Task task, const SyntheticCorpus& corpus, std::span<const std::size_t> idx) {
  std::vector<std::int64_t> out;
  for (auto i : idx) out.push_back(task == Task::vqa ? corpus.pairs()[i].answer : corpus.pairs()[i].class_label);
  return out;
}

UnifiedBatch inputs_for(Task task, const SyntheticCorpus& corpus, std::span<const std::size_t> idx) {
  switch (task_input_kind(task)) {
    case BatchKind::image_only: return corpus.image_batch(idx);
    case BatchKind::text_only: return corpus.text_batch(idx);
    default: return corpus.pair_batch(idx);
  }
}

std::size_t default_eval_items(Task task, const SyntheticCorpus& corpus) {
  if (task == Task::retrieval) return std::min(kRetrievalPairs, corpus.size());
  if (task == Task::generation) return std::min(kGenerationPairs, corpus.size());
  return corpus.size();
}

FinetuneBatch training_batch(Task task, const SyntheticCorpus& corpus, BatchSampler& sampler, std::uint64_t seed,
                             std::size_t step) {
  FinetuneBatch fb;
  if (task == Task::retrieval || task == Task::generation) {
    const auto idx = corpus.distinct_indices(default_eval_items(task, corpus));
    fb.inputs = task == Task::retrieval ? corpus.pair_batch(idx) : corpus.image_batch(idx);
    if (task == Task::generation)
      for (auto i : idx) fb.captions.push_back(corpus.caption(i));
    return fb;
  }
  const auto idx = sampler.next();
  if (task == Task::pair_classify) {
    auto [batch, labels] = corpus.matching_batch(idx, Rng::derive(seed, step));
    fb.inputs = std::move(batch);
    fb.labels = std::move(labels);
    return fb;
  }
  fb.inputs = inputs_for(task, corpus, idx);
  fb.labels = labels_for(task, corpus, idx);
  return fb;
}

void write_eval_csv(const std::filesystem::path& path, Task task, const std::vector<EvalRow>& rows) {
  std::string out = "task,metric,value\n";
  for (const auto& r : rows) out += std::string(task_name(task)) + "," + r.metric + "," + fmt(r.value) + "\n";
  write_text_file(path, out);
}

TaskHead make_head(Task task, const RunConfig& config) {
  return TaskHead::create(task, task_label_space(task, config.corpus), config.model,
                          Rng::derive(config.model.seed, kHeadStream + static_cast<std::uint64_t>(task)));
}

ParameterList concat_params(ParameterList a, const ParameterList& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  corpus.validate(model);
  if (model.batch_size < 2) throw ConfigError("config: train.batch_size must be at least 2 (negatives need a partner)");
}

RunConfig parse_config(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw ConfigError("config: top level must be an object");
  RunConfig cfg;
  auto secs = sections(cfg);
  for (const auto& [key, value] : doc.items()) {
    if (key == "seed") {
      read_field(value, "seed", &cfg.model.seed);
      continue;
    }
    auto it = std::find_if(secs.begin(), secs.end(), [&](const Section& s) { return key == s.name; });
    if (it == secs.end()) throw ConfigError("config: unknown section '" + key + "'");
    if (!value.is_object()) throw ConfigError("config: section '" + key + "' must be an object");
    for (const auto& [fkey, fvalue] : value.items()) {
      auto f = std::find_if(it->fields.begin(), it->fields.end(), [&](const Field& x) { return fkey == x.key; });
      if (f == it->fields.end()) throw ConfigError("config: unknown key '" + key + "." + fkey + "'");
      read_field(fvalue, key + "." + fkey, f->ptr);
    }
  }
  sync_corpus(cfg);
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) { return parse_config(read_text_file(path)); }

std::string config_to_json(const RunConfig& config) {
  RunConfig copy = config;
  json doc = json::object();
  for (const auto& s : sections(copy)) {
    json sec = json::object();
    for (const auto& f : s.fields) std::visit([&](auto* p) { sec[f.key] = *p; }, f.ptr);
    doc[s.name] = sec;
  }
  doc["seed"] = config.model.seed;
  return doc.dump(2) + "\n";
}

void apply_seed(RunConfig& config, std::uint64_t seed) {
  config.model.seed = seed;
  config.corpus.seed = seed;
}

std::string metrics_row(std::size_t step, const PretrainLossReport& r, double lr) {
  return std::to_string(step) + "," + fmt(r.l_mlm) + "," + fmt(r.l_itm) + "," + fmt(r.l_itc) + "," + fmt(r.l_p) + "," +
         fmt(r.l_total) + "," + std::to_string(r.masked_token_count) + "," + fmt(lr);
}

PretrainLossReport parse_metrics_row(const std::string& line, std::size_t* step, double* lr) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (cells.size() != 8) throw ConfigError("metrics row has " + std::to_string(cells.size()) + " fields, expected 8");
  try {
    PretrainLossReport r;
    if (step) *step = std::stoull(cells[0]);
    r.l_mlm = std::stod(cells[1]);
    r.l_itm = std::stod(cells[2]);
    r.l_itc = std::stod(cells[3]);
    r.l_p = std::stod(cells[4]);
    r.l_total = std::stod(cells[5]);
    r.masked_token_count = std::stoull(cells[6]);
    if (lr) *lr = std::stod(cells[7]);
    return r;
  } catch (const std::logic_error&) {
    throw ConfigError("metrics row is not numeric: " + line);
  }
}

double evaluate_pretrain_loss(PretrainModel& model, const SyntheticCorpus& corpus, std::uint64_t seed) {
  UsageGuard keep(model.encoder);
  NoGradGuard no_grad;
  Rng rng(Rng::derive(seed, kEvalStream));
  const auto idx = all_indices(corpus.size());
  double total = 0.0;
  for (auto [begin, count] : chunks(corpus.size(), std::max<std::size_t>(2, model.config.batch_size))) {
    std::span<const std::size_t> part(idx.data() + begin, count);
    auto prepared = prepare_pretrain_batch(corpus.pair_batch(part), model.config, rng);
    total += combined_pretrain_loss(prepared, model).report.l_total * static_cast<double>(count);
  }
  return total / static_cast<double>(corpus.size());
}

PretrainSummary run_pretrain(const RunConfig& config, const SyntheticCorpus& corpus, PretrainModel& model,
                             const std::filesystem::path& out_dir) {
  config.validate();
  ensure_dir(out_dir);
  const ModelConfig& c = model.config;
  PretrainSummary summary;
  summary.checkpoint = out_dir / "checkpoint.bin";
  summary.metrics = out_dir / "metrics.csv";

  AdamW optimizer(model.parameters(), {c.lr, 0.9, 0.999, 1e-8, c.weight_decay});
  BatchSampler sampler(corpus.size(), c.batch_size, Rng::derive(c.seed, kShuffleStream));
  Rng mask_rng(Rng::derive(c.seed, kMaskStream));

  summary.initial_eval = evaluate_pretrain_loss(model, corpus, c.seed);
  write_checkpoint_atomic(summary.checkpoint, capture_state(c, model.parameters(), model.encoder));

  CsvFile metrics(summary.metrics);
  metrics.line(kMetricsHeader);
  for (std::size_t step = 1; step <= c.pretrain_steps; ++step) {
    const auto idx = sampler.next();
    PretrainLossReport r;
    try {
      r = pretrain_step(corpus.pair_batch(idx), model, optimizer, mask_rng);
    } catch (const NumericError& e) {
      throw NumericError("pre-training aborted at step " + std::to_string(step) + ": " + e.what() +
                         "; last good checkpoint kept at " + summary.checkpoint.string());
    }
    metrics.line(metrics_row(step, r, optimizer.lr()));
    summary.reports.push_back(r);
    ++summary.steps;
    if (c.checkpoint_every > 0 && step % c.checkpoint_every == 0) {
      write_checkpoint_atomic(summary.checkpoint, capture_state(c, model.parameters(), model.encoder));
    }
  }
  write_checkpoint_atomic(summary.checkpoint, capture_state(c, model.parameters(), model.encoder));
  summary.final_eval = evaluate_pretrain_loss(model, corpus, c.seed);

  json s = {{"steps", summary.steps}, {"initial_eval_l_total", summary.initial_eval},
            {"final_eval_l_total", summary.final_eval}};
  write_text_file(out_dir / "pretrain_summary.json", s.dump(2) + "\n");
  return summary;
}

std::size_t task_label_space(Task task, const CorpusConfig& corpus) {
  switch (task) {
    case Task::vqa: return corpus.n_answers;
    case Task::pair_classify: return 2;
    case Task::image_classify:
    case Task::text_classify: return corpus.n_concepts;
    default: return 0;
  }
}

std::vector<EvalRow> evaluate_task(const RunConfig& config, const SyntheticCorpus& corpus, UnifiedEncoder& encoder,
                                   const TaskHead& head, const EvalOptions& options,
                                   std::vector<std::string>* predictions) {
  UsageGuard keep(encoder);
  NoGradGuard no_grad;
  const Task task = head.task;
  std::size_t n = options.items ? options.items : default_eval_items(task, corpus);
  if (n > corpus.size()) throw ConfigError("eval: " + std::to_string(n) + " items requested, corpus has " +
                                           std::to_string(corpus.size()));
  std::vector<EvalRow> rows;

  if (is_classification(task)) {
    const auto idx = std::vector<std::size_t>(all_indices(n));
    UnifiedBatch inputs;
    std::vector<std::int64_t> labels;
    if (task == Task::pair_classify) {
      auto [b, l] = corpus.matching_batch(idx, Rng::derive(config.model.seed, kEvalStream));
      inputs = std::move(b);
      labels = std::move(l);
    } else {
      inputs = inputs_for(task, corpus, idx);
      labels = labels_for(task, corpus, idx);
    }
    const auto pred = predict_labels(classify(inputs, encoder, head));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (pred[i] == labels[i]) ++correct;
      if (predictions) {
        json rec = {{"row", i}, {"label", labels[i]}, {"prediction", pred[i]}};
        predictions->push_back(rec.dump());
      }
    }
    rows.push_back({"accuracy", static_cast<double>(correct) / static_cast<double>(pred.size())});
    rows.push_back({"items", static_cast<double>(pred.size())});
    return rows;
  }

  const auto idx = corpus.distinct_indices(n);
  if (task == Task::retrieval) {
    auto [img, txt] = retrieval_representations(corpus.pair_batch(idx), encoder);
    std::vector<std::size_t> ks;
    for (std::size_t k : {1, 5, 10})
      if (k <= n) ks.push_back(k);
    RetrievalResult r = retrieval_rank(img, txt, {}, ks);
    for (std::size_t i = 0; i < ks.size(); ++i) {
      rows.push_back({"i2t_r@" + std::to_string(ks[i]), r.recall_i2t[i]});
      rows.push_back({"t2i_r@" + std::to_string(ks[i]), r.recall_t2i[i]});
    }
    if (predictions) {
      for (std::size_t i = 0; i < r.image_to_text.size(); ++i) {
        json rec = {{"image", i}, {"ranked_texts", r.image_to_text[i]}};
        predictions->push_back(rec.dump());
      }
    }
    rows.push_back({"items", static_cast<double>(n)});
    return rows;
  }

  const auto outputs = generate_report(corpus.image_batch(idx), encoder, head, corpus.config().text_len);
  std::vector<double> bleu_sum(4, 0.0);
  std::size_t exact = 0;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto ref = corpus.caption(idx[i]);
    const auto s = bleu(outputs[i], ref, 4);
    for (std::size_t k = 0; k < 4; ++k) bleu_sum[k] += s.scores[k];
    if (outputs[i] == ref) ++exact;
    if (predictions) {
      json rec = {{"pair", idx[i]}, {"reference", ref}, {"generated", outputs[i]}};
      predictions->push_back(rec.dump());
    }
  }
  for (std::size_t k = 0; k < 4; ++k) {
    rows.push_back({"bleu" + std::to_string(k + 1), bleu_sum[k] / static_cast<double>(idx.size())});
  }
  rows.push_back({"exact_match", static_cast<double>(exact) / static_cast<double>(idx.size())});
  rows.push_back({"items", static_cast<double>(idx.size())});
  return rows;
}

FinetuneSummary run_finetune(const RunConfig& config, const SyntheticCorpus& corpus, const Checkpoint& pretrained,
                             Task task, const std::filesystem::path& out_dir) {
  config.validate();
  ensure_dir(out_dir);
  const ModelConfig& c = config.model;
  UnifiedEncoder encoder(c);
  restore_state(pretrained, c, encoder.parameters(), encoder);
  TaskHead head = make_head(task, config);
  if (head.decoder) head.decoder->init_from_encoder(encoder);

  FinetuneOptions opts{c.freeze_backbone, c.finetune_pools};
  ParameterList trainable = prepare_finetune_parameters(encoder, head, opts);
  AdamW optimizer(trainable, {c.finetune_lr, 0.9, 0.999, 1e-8, c.weight_decay});
  BatchSampler sampler(corpus.size(), c.batch_size, Rng::derive(c.seed, kFinetuneStream));

  FinetuneSummary summary;
  summary.task = task;
  summary.metrics = out_dir / (std::string("finetune_") + task_name(task) + ".csv");
  summary.checkpoint = out_dir / (std::string("finetune_") + task_name(task) + ".bin");
  CsvFile metrics(summary.metrics);
  metrics.line("step,task,loss,lr");
  for (std::size_t step = 1; step <= c.finetune_steps; ++step) {
    FinetuneBatch batch = training_batch(task, corpus, sampler, Rng::derive(c.seed, kFinetuneStream + 1), step);
    double loss = 0.0;
    try {
      loss = finetune_step(batch, encoder, head, optimizer);
    } catch (const NumericError& e) {
      throw NumericError("fine-tuning aborted at step " + std::to_string(step) + ": " + e.what());
    }
    summary.losses.push_back(loss);
    metrics.line(std::to_string(step) + "," + task_name(task) + "," + fmt(loss) + "," + fmt(optimizer.lr()));
  }
  write_checkpoint_atomic(summary.checkpoint, capture_state(c, concat_params(encoder.parameters(), head.parameters()), encoder));

  std::vector<std::string> preds;
  summary.eval = evaluate_task(config, corpus, encoder, head, {}, &preds);
  write_eval_csv(out_dir / (std::string("eval_") + task_name(task) + ".csv"), task, summary.eval);
  return summary;
}

std::vector<EvalRow> run_eval(const RunConfig& config, const SyntheticCorpus& corpus, const Checkpoint& finetuned,
                              Task task, const std::filesystem::path& out_dir, const EvalOptions& options) {
  config.validate();
  ensure_dir(out_dir);
  const ModelConfig& c = config.model;
  UnifiedEncoder encoder(c);
  TaskHead head = make_head(task, config);
  const ParameterList head_params = head.parameters();
  if (!head_params.empty() && !finetuned.find(head_params.front().name)) {
    throw ConfigError(std::string("checkpoint holds no fine-tuned head for task ") + task_name(task));
  }
  restore_state(finetuned, c, concat_params(encoder.parameters(), head_params), encoder);
  std::vector<std::string> preds;
  auto rows = evaluate_task(config, corpus, encoder, head, options, options.dump_predictions ? &preds : nullptr);
  write_eval_csv(out_dir / (std::string("eval_") + task_name(task) + ".csv"), task, rows);
  if (options.dump_predictions) {
    std::string body;
    for (const auto& p : preds) body += p + "\n";
    write_text_file(out_dir / (std::string("predictions_") + task_name(task) + ".jsonl"), body);
  }
  return rows;
}

void run_inspect_pool(const RunConfig& config, const Checkpoint& ckpt, const std::filesystem::path& out_dir) {
  ensure_dir(out_dir);
  UnifiedEncoder encoder(config.model);
  restore_state(ckpt, config.model, encoder.parameters(), encoder);
  for (const PromptPool* pool : {&encoder.visual_pool(), &encoder.textual_pool()}) {
    const std::string name = modality_name(pool->modality());
    const std::size_t n = pool->size();
    const std::size_t d = pool->key_dim();
    const auto keys = pool->keys().data();
    std::string out = "index,usage";
    for (std::size_t j = 0; j < d; ++j) out += ",k" + std::to_string(j);
    out += "\n";
    for (std::size_t i = 0; i < n; ++i) {
      out += std::to_string(i) + "," + std::to_string(pool->usage()[i]);
      for (std::size_t j = 0; j < d; ++j) out += "," + fmt(keys[i * d + j]);
      out += "\n";
    }
    write_text_file(out_dir / ("pool_" + name + ".csv"), out);

    std::string cos;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (j) cos += ",";
        cos += fmt(cosine_value(keys.subspan(i * d, d), keys.subspan(j * d, d)));
      }
      cos += "\n";
    }
    write_text_file(out_dir / ("pool_" + name + "_cosine.csv"), cos);
  }
}

void write_corpus(const SyntheticCorpus& corpus, const std::filesystem::path& out_dir) {
  ensure_dir(out_dir);
  std::string body;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& p = corpus.pairs()[i];
    json rec = {{"index", i},         {"concepts", p.concepts},       {"tokens", p.tokens},
                {"answer", p.answer}, {"class_label", p.class_label}, {"patches", p.patches}};
    body += rec.dump() + "\n";
  }
  write_text_file(out_dir / "corpus.jsonl", body);
}

void write_text_file(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) ensure_dir(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out << content;
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace dcp
