#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace dcp {

inline constexpr double kBleuEpsilon = 1e-9;

struct BleuScores {
  std::vector<double> precisions;  // clipped n-gram precision, n = 1..n_max (unsmoothed)
  std::vector<double> scores;      // cumulative BLEU-n including the brevity penalty
  double brevity_penalty = 0.0;
  std::size_t candidate_length = 0;
  std::size_t reference_length = 0;
};

/// Sentence BLEU with clipped counts, geometric mean and brevity penalty.
/// A zero precision is replaced by kBleuEpsilon before taking the log.
/// An empty candidate scores zero everywhere; an empty reference throws.
BleuScores bleu(std::span<const std::int64_t> candidate, std::span<const std::int64_t> reference,
                std::size_t n_max = 4);
BleuScores bleu(std::span<const std::string> candidate, std::span<const std::string> reference,
                std::size_t n_max = 4);

/// Whitespace tokenization helper for word-level fixtures.
std::vector<std::string> split_words(const std::string& text);

}  // namespace dcp
