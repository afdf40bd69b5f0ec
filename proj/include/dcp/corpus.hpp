#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "dcp/config.hpp"
#include "dcp/encoder.hpp"

namespace dcp {

/// Knobs of the latent-concept corpus. Every concept owns one patch
/// location with a fixed +-1 motif and one token trigram; a pair draws
/// `concepts_per_pair` concepts and shows them in both modalities.
struct CorpusConfig {
  std::size_t n_pairs = 32;
  std::size_t n_concepts = 8;
  std::size_t concepts_per_pair = 2;
  std::size_t text_len = 8;
  std::size_t patch_count = 16;
  std::size_t patch_dim = 12;
  std::size_t n_answers = 4;
  std::size_t n_fillers = 4;
  double noise = 0.1;
  std::uint64_t seed = 7;

  /// Throws ConfigError. With a model config, also checks that tokens and
  /// patches fit its vocabulary and geometry.
  void validate() const;
  void validate(const ModelConfig& model) const;
};

/// Corpus settings matching a model's patch geometry and seed.
CorpusConfig corpus_config_for(const ModelConfig& model);

struct ConceptMotif {
  std::size_t location = 0;
  std::vector<double> pattern;          // [patch_dim], entries +-1
  std::array<std::int64_t, 3> ngram{};  // token ids
};

struct CorpusPair {
  std::vector<std::size_t> concepts;  // ascending
  std::vector<double> patches;        // [patch_count x patch_dim]
  std::vector<std::int64_t> tokens;   // [text_len], PAD-terminated
  std::int64_t answer = 0;
  std::int64_t class_label = 0;
};

class SyntheticCorpus {
 public:
  static SyntheticCorpus generate(const CorpusConfig& cc);

  const CorpusConfig& config() const { return config_; }
  const std::vector<ConceptMotif>& motifs() const { return motifs_; }
  const std::vector<CorpusPair>& pairs() const { return pairs_; }
  std::size_t size() const { return pairs_.size(); }

  UnifiedBatch pair_batch(std::span<const std::size_t> idx) const;
  UnifiedBatch image_batch(std::span<const std::size_t> idx) const;
  UnifiedBatch text_batch(std::span<const std::size_t> idx) const;
  /// Non-padding tokens of pair i.
  std::vector<std::int64_t> caption(std::size_t i) const;

  /// Inverse of the generator: concepts whose motif is visible at their
  /// location, and concepts whose trigram appears in the text.
  std::vector<std::size_t> image_concepts(std::span<const double> patches) const;
  std::vector<std::size_t> text_concepts(std::span<const std::int64_t> tokens) const;

  /// First `n` pair indices with pairwise distinct concept sets.
  /// Throws ConfigError when fewer exist.
  std::vector<std::size_t> distinct_indices(std::size_t n) const;

  /// Matched and mismatched pairs for matching-style tasks: the first half
  /// of the returned batch is positives, the second half pairs image i with
  /// the text of a different concept set. Labels are 1 then 0.
  std::pair<UnifiedBatch, std::vector<std::int64_t>> matching_batch(std::span<const std::size_t> idx,
                                                                    std::uint64_t seed) const;

 private:
  CorpusConfig config_;
  std::vector<ConceptMotif> motifs_;
  std::vector<CorpusPair> pairs_;
};

/// Every index 0..n-1.
std::vector<std::size_t> all_indices(std::size_t n);

}  // namespace dcp
