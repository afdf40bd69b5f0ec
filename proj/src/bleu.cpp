#include "dcp/bleu.hpp"

#include <cmath>
#include <map>
#include <sstream>

#include "dcp/errors.hpp"

namespace dcp {

namespace {

template <typename Token>
std::map<std::vector<Token>, std::size_t> ngram_counts(std::span<const Token> seq, std::size_t n) {
  std::map<std::vector<Token>, std::size_t> counts;
  if (seq.size() < n) return counts;
  for (std::size_t i = 0; i + n <= seq.size(); ++i) ++counts[std::vector<Token>(seq.begin() + i, seq.begin() + i + n)];
  return counts;
}

template <typename Token>
BleuScores bleu_impl(std::span<const Token> candidate, std::span<const Token> reference, std::size_t n_max) {
  if (reference.empty()) throw ConfigError("bleu: empty reference");
  if (n_max == 0) throw ConfigError("bleu: n_max must be positive");
  BleuScores out;
  out.candidate_length = candidate.size();
  out.reference_length = reference.size();
  out.precisions.assign(n_max, 0.0);
  out.scores.assign(n_max, 0.0);
  if (candidate.empty()) return out;

  const double c = static_cast<double>(candidate.size());
  const double r = static_cast<double>(reference.size());
  out.brevity_penalty = c > r ? 1.0 : std::exp(1.0 - r / c);

  double log_sum = 0.0;
  for (std::size_t n = 1; n <= n_max; ++n) {
    auto cand = ngram_counts(candidate, n);
    auto ref = ngram_counts(reference, n);
    std::size_t total = 0;
    std::size_t matched = 0;
    for (const auto& [gram, count] : cand) {
      total += count;
      auto it = ref.find(gram);
      if (it != ref.end()) matched += std::min(count, it->second);
    }
    const double p = total == 0 ? 0.0 : static_cast<double>(matched) / static_cast<double>(total);
    out.precisions[n - 1] = p;
    log_sum += std::log(p > 0.0 ? p : kBleuEpsilon);
    out.scores[n - 1] = out.brevity_penalty * std::exp(log_sum / static_cast<double>(n));
  }
  return out;
}

}  // namespace

BleuScores bleu(std::span<const std::int64_t> candidate, std::span<const std::int64_t> reference, std::size_t n_max) {
  return bleu_impl(candidate, reference, n_max);
}

BleuScores bleu(std::span<const std::string> candidate, std::span<const std::string> reference, std::size_t n_max) {
  return bleu_impl(candidate, reference, n_max);
}

std::vector<std::string> split_words(const std::string& text) {
  std::istringstream is(text);
  std::vector<std::string> words;
  for (std::string w; is >> w;) words.push_back(w);
  return words;
}

}  // namespace dcp
