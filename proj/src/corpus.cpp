#include "dcp/corpus.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "dcp/errors.hpp"
#include "dcp/objectives.hpp"
#include "dcp/rng.hpp"

namespace dcp {

namespace {

constexpr std::size_t kMaxEnumeratedSubsets = 4096;

std::int64_t first_filler(const CorpusConfig& cc) {
  return kFirstWordId + static_cast<std::int64_t>(3 * cc.n_concepts);
}

std::size_t words_needed(const CorpusConfig& cc) {
  return static_cast<std::size_t>(kFirstWordId) + 3 * cc.n_concepts + cc.n_fillers;
}

// Number of k-subsets of n, saturating at `cap + 1`.
std::size_t capped_binomial(std::size_t n, std::size_t k, std::size_t cap) {
  double c = 1.0;
  for (std::size_t i = 0; i < k; ++i) {
    c = c * static_cast<double>(n - i) / static_cast<double>(i + 1);
    if (c > static_cast<double>(cap)) return cap + 1;
  }
  return static_cast<std::size_t>(c + 0.5);
}

std::vector<std::vector<std::size_t>> concept_sets(const CorpusConfig& cc, Rng& rng) {
  const std::size_t n = cc.n_concepts;
  const std::size_t k = cc.concepts_per_pair;
  std::vector<std::vector<std::size_t>> sets;
  if (capped_binomial(n, k, kMaxEnumeratedSubsets) <= kMaxEnumeratedSubsets) {
    std::vector<std::size_t> cur(k);
    std::iota(cur.begin(), cur.end(), 0);
    while (true) {
      sets.push_back(cur);
      std::size_t i = k;
      while (i > 0 && cur[i - 1] == n - k + i - 1) --i;
      if (i == 0) break;
      ++cur[i - 1];
      for (std::size_t j = i; j < k; ++j) cur[j] = cur[j - 1] + 1;
    }
    rng.shuffle(sets);
  } else {
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), 0);
    for (std::size_t i = 0; i < cc.n_pairs; ++i) {
      rng.shuffle(all);
      std::vector<std::size_t> s(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k));
      std::sort(s.begin(), s.end());
      sets.push_back(std::move(s));
    }
  }
  return sets;
}

}  // namespace

void CorpusConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("corpus: " + msg); };
  if (n_pairs == 0) fail("n_pairs must be positive");
  if (n_concepts == 0) fail("n_concepts must be positive");
  if (concepts_per_pair == 0 || concepts_per_pair > n_concepts) fail("concepts_per_pair must lie in [1, n_concepts]");
  if (n_concepts > patch_count) fail("n_concepts must not exceed patch_count (one motif location per concept)");
  if (patch_dim == 0) fail("patch_dim must be positive");
  if (n_answers == 0) fail("n_answers must be positive");
  if (n_fillers == 0) fail("n_fillers must be positive");
  if (text_len < 3 * concepts_per_pair + 1) fail("text_len too short for the concept trigrams plus a filler word");
  if (!(noise >= 0.0)) fail("noise must be non-negative");
}

void CorpusConfig::validate(const ModelConfig& model) const {
  validate();
  if (patch_count != model.patch_count || patch_dim != model.patch_dim) {
    throw ConfigError("corpus: patch geometry does not match the model config");
  }
  if (text_len > model.max_text_len) throw ConfigError("corpus: text_len exceeds max_text_len");
  if (words_needed(*this) > model.vocab_size) {
    throw ConfigError("corpus: vocabulary of " + std::to_string(model.vocab_size) + " cannot hold " +
                      std::to_string(words_needed(*this)) + " token ids");
  }
}

CorpusConfig corpus_config_for(const ModelConfig& model) {
  CorpusConfig cc;
  cc.patch_count = model.patch_count;
  cc.patch_dim = model.patch_dim;
  cc.text_len = std::min(cc.text_len, model.max_text_len);
  cc.seed = model.seed;
  return cc;
}

SyntheticCorpus SyntheticCorpus::generate(const CorpusConfig& cc) {
  cc.validate();
  SyntheticCorpus c;
  c.config_ = cc;
  Rng rng(Rng::derive(cc.seed, 0x636f72707573ULL));

  std::vector<std::size_t> locations(cc.patch_count);
  std::iota(locations.begin(), locations.end(), 0);
  rng.shuffle(locations);
  for (std::size_t k = 0; k < cc.n_concepts; ++k) {
    ConceptMotif m;
    m.location = locations[k];
    m.pattern.resize(cc.patch_dim);
    for (auto& v : m.pattern) v = rng.uniform() < 0.5 ? -1.0 : 1.0;
    for (std::size_t j = 0; j < 3; ++j) m.ngram[j] = kFirstWordId + static_cast<std::int64_t>(3 * k + j);
    c.motifs_.push_back(std::move(m));
  }

  const auto sets = concept_sets(cc, rng);
  const std::size_t D = cc.patch_dim;
  for (std::size_t i = 0; i < cc.n_pairs; ++i) {
    // Per-sample stream so each pair depends only on (seed, index).
    Rng sample(Rng::derive(cc.seed, i + 1));
    CorpusPair p;
    p.concepts = sets[i % sets.size()];
    p.patches.resize(cc.patch_count * D);
    for (auto& v : p.patches) v = sample.normal(0.0, cc.noise);
    for (auto k : p.concepts) {
      const auto& m = c.motifs_[k];
      for (std::size_t j = 0; j < D; ++j) p.patches[m.location * D + j] += m.pattern[j];
    }
    std::size_t sum = 0;
    for (auto k : p.concepts) {
      const auto& m = c.motifs_[k];
      p.tokens.insert(p.tokens.end(), m.ngram.begin(), m.ngram.end());
      sum += k;
    }
    p.tokens.push_back(first_filler(cc) + static_cast<std::int64_t>(sum % cc.n_fillers));
    p.tokens.resize(cc.text_len, kPadId);
    p.answer = static_cast<std::int64_t>(sum % cc.n_answers);
    p.class_label = static_cast<std::int64_t>(p.concepts.front());
    c.pairs_.push_back(std::move(p));
  }
  return c;
}

UnifiedBatch SyntheticCorpus::pair_batch(std::span<const std::size_t> idx) const {
  UnifiedBatch images = image_batch(idx);
  UnifiedBatch texts = text_batch(idx);
  return UnifiedBatch::pairs(images.patch_features, std::move(texts.token_ids), config_.text_len);
}

UnifiedBatch SyntheticCorpus::image_batch(std::span<const std::size_t> idx) const {
  std::vector<double> data;
  data.reserve(idx.size() * config_.patch_count * config_.patch_dim);
  for (auto i : idx) {
    const auto& p = pairs_.at(i).patches;
    data.insert(data.end(), p.begin(), p.end());
  }
  return UnifiedBatch::images(Tensor({idx.size(), config_.patch_count, config_.patch_dim}, std::move(data)));
}

UnifiedBatch SyntheticCorpus::text_batch(std::span<const std::size_t> idx) const {
  std::vector<std::int64_t> ids;
  ids.reserve(idx.size() * config_.text_len);
  for (auto i : idx) {
    const auto& t = pairs_.at(i).tokens;
    ids.insert(ids.end(), t.begin(), t.end());
  }
  return UnifiedBatch::texts(std::move(ids), idx.size(), config_.text_len);
}

std::vector<std::int64_t> SyntheticCorpus::caption(std::size_t i) const {
  std::vector<std::int64_t> out;
  for (auto t : pairs_.at(i).tokens) {
    if (t == kPadId) break;
    out.push_back(t);
  }
  return out;
}

std::vector<std::size_t> SyntheticCorpus::image_concepts(std::span<const double> patches) const {
  const std::size_t D = config_.patch_dim;
  if (patches.size() != config_.patch_count * D) throw DimensionError("image_concepts: wrong patch grid size");
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < motifs_.size(); ++k) {
    const auto& m = motifs_[k];
    double dot = 0.0;
    for (std::size_t j = 0; j < D; ++j) dot += patches[m.location * D + j] * m.pattern[j];
    if (dot / static_cast<double>(D) > 0.5) out.push_back(k);
  }
  return out;
}

std::vector<std::size_t> SyntheticCorpus::text_concepts(std::span<const std::int64_t> tokens) const {
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < motifs_.size(); ++k) {
    const auto& g = motifs_[k].ngram;
    for (std::size_t i = 0; i + 3 <= tokens.size(); ++i) {
      if (tokens[i] == g[0] && tokens[i + 1] == g[1] && tokens[i + 2] == g[2]) {
        out.push_back(k);
        break;
      }
    }
  }
  return out;
}

std::vector<std::size_t> SyntheticCorpus::distinct_indices(std::size_t n) const {
  std::vector<std::size_t> out;
  std::vector<const std::vector<std::size_t>*> seen;
  for (std::size_t i = 0; i < pairs_.size() && out.size() < n; ++i) {
    const auto& s = pairs_[i].concepts;
    if (std::any_of(seen.begin(), seen.end(), [&](const auto* q) { return *q == s; })) continue;
    seen.push_back(&s);
    out.push_back(i);
  }
  if (out.size() < n) {
    throw ConfigError("corpus holds only " + std::to_string(out.size()) + " distinct concept sets, " +
                      std::to_string(n) + " requested");
  }
  return out;
}

std::pair<UnifiedBatch, std::vector<std::int64_t>> SyntheticCorpus::matching_batch(std::span<const std::size_t> idx,
                                                                                   std::uint64_t seed) const {
  const std::size_t n = idx.size();
  Rng rng(seed);
  std::vector<std::size_t> perm = derangement(n, rng);
  std::vector<std::size_t> images(idx.begin(), idx.end());
  std::vector<std::size_t> texts(idx.begin(), idx.end());
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t j = perm[i];
    std::size_t tries = 0;
    while (pairs_[idx[j]].concepts == pairs_[idx[i]].concepts) {
      j = (j + 1) % n;
      if (++tries > n) throw ConfigError("matching_batch: every pair shares one concept set, no negatives exist");
    }
    images.push_back(idx[i]);
    texts.push_back(idx[j]);
  }
  UnifiedBatch img = image_batch(images);
  UnifiedBatch txt = text_batch(texts);
  std::vector<std::int64_t> labels(2 * n, 0);
  std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n), 1);
  return {UnifiedBatch::pairs(img.patch_features, std::move(txt.token_ids), config_.text_len), std::move(labels)};
}

std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> out(n);
  std::iota(out.begin(), out.end(), 0);
  return out;
}

}  // namespace dcp
