#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dcp/adaptation.hpp"
#include "dcp/checkpoint.hpp"
#include "dcp/config.hpp"
#include "dcp/corpus.hpp"
#include "dcp/objectives.hpp"

namespace dcp {

struct RunConfig {
  ModelConfig model;
  CorpusConfig corpus;

  /// Validates both halves and their compatibility.
  void validate() const;
};

/// JSON with optional sections "model", "pools", "loss", "decoder",
/// "train", "corpus" and a top-level "seed". Missing keys keep defaults;
/// unknown keys and wrongly typed values throw ConfigError.
RunConfig parse_config(const std::string& json_text);
/// Throws IoError when the file cannot be read.
RunConfig load_config(const std::filesystem::path& path);
std::string config_to_json(const RunConfig& config);
/// Overrides the model and corpus seeds.
void apply_seed(RunConfig& config, std::uint64_t seed);

inline constexpr const char* kMetricsHeader = "step,l_mlm,l_itm,l_itc,l_p,l_total,masked_tokens,lr";

std::string metrics_row(std::size_t step, const PretrainLossReport& report, double lr);
/// Inverse of metrics_row. Throws ConfigError on a malformed line.
PretrainLossReport parse_metrics_row(const std::string& line, std::size_t* step = nullptr, double* lr = nullptr);

/// Mean l_total over the whole corpus with a fixed masking stream, without
/// gradients. Pool usage counters are left as they were.
double evaluate_pretrain_loss(PretrainModel& model, const SyntheticCorpus& corpus, std::uint64_t seed);

struct PretrainSummary {
  std::size_t steps = 0;
  double initial_eval = 0.0;
  double final_eval = 0.0;
  std::vector<PretrainLossReport> reports;
  std::filesystem::path checkpoint;
  std::filesystem::path metrics;
};

/// Seeded-shuffle training loop. Writes <out>/metrics.csv (one row per
/// step) and <out>/checkpoint.bin at the start, every checkpoint_every
/// steps, and at the end. A non-finite loss throws NumericError after the
/// metrics are flushed; the checkpoint on disk is the last good one.
PretrainSummary run_pretrain(const RunConfig& config, const SyntheticCorpus& corpus, PretrainModel& model,
                             const std::filesystem::path& out_dir);

struct EvalRow {
  std::string metric;
  double value = 0.0;
};

struct EvalOptions {
  std::size_t items = 0;  // evaluation set size override (0 = task default)
  bool dump_predictions = true;
};

struct FinetuneSummary {
  Task task = Task::pair_classify;
  std::vector<double> losses;
  std::vector<EvalRow> eval;
  std::filesystem::path checkpoint;
  std::filesystem::path metrics;
};

/// Number of pairs in the default retrieval and generation sets.
inline constexpr std::size_t kRetrievalPairs = 16;
inline constexpr std::size_t kGenerationPairs = 4;

/// Label space of a classification task on this corpus (0 otherwise).
std::size_t task_label_space(Task task, const CorpusConfig& corpus);

/// Loads encoder weights from `pretrained`, trains a fresh head for
/// config.model.finetune_steps steps, evaluates, and writes
/// <out>/finetune_<task>.csv, <out>/finetune_<task>.bin and
/// <out>/eval_<task>.csv.
FinetuneSummary run_finetune(const RunConfig& config, const SyntheticCorpus& corpus, const Checkpoint& pretrained,
                             Task task, const std::filesystem::path& out_dir);

/// Evaluates a fine-tuned checkpoint: accuracy, recall@k or BLEU rows in
/// <out>/eval_<task>.csv (and predictions_<task>.jsonl).
std::vector<EvalRow> run_eval(const RunConfig& config, const SyntheticCorpus& corpus, const Checkpoint& finetuned,
                              Task task, const std::filesystem::path& out_dir, const EvalOptions& options = {});

/// Same evaluation on in-memory modules; writes nothing.
std::vector<EvalRow> evaluate_task(const RunConfig& config, const SyntheticCorpus& corpus, UnifiedEncoder& encoder,
                                   const TaskHead& head, const EvalOptions& options = {},
                                   std::vector<std::string>* predictions = nullptr);

/// Writes pool_<modality>.csv (index, usage, key coordinates) and
/// pool_<modality>_cosine.csv (pairwise key cosines) for both pools.
void run_inspect_pool(const RunConfig& config, const Checkpoint& ckpt, const std::filesystem::path& out_dir);

/// One JSON record per pair in <out>/corpus.jsonl.
void write_corpus(const SyntheticCorpus& corpus, const std::filesystem::path& out_dir);

/// Writes bytes atomically (temporary file then rename). Throws IoError.
void write_text_file(const std::filesystem::path& path, const std::string& content);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace dcp
