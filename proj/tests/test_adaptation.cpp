#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "dcp/adaptation.hpp"
#include "dcp/bleu.hpp"
#include "dcp/corpus.hpp"
#include "dcp/errors.hpp"
#include "dcp/ops.hpp"
#include "test_util.hpp"

using namespace dcp;
using testutil::random_tensor;
using testutil::small_corpus;
using testutil::to_vec;

namespace {

std::vector<std::vector<double>> snapshot(const ParameterList& p) {
  std::vector<std::vector<double>> out;
  for (const auto& e : p) out.push_back(to_vec(e.tensor));
  return out;
}

FinetuneBatch classify_batch(const SyntheticCorpus& corpus, Task task, std::span<const std::size_t> idx) {
  FinetuneBatch b;
  b.inputs = task == Task::image_classify ? corpus.image_batch(idx)
             : task == Task::text_classify ? corpus.text_batch(idx)
                                           : corpus.pair_batch(idx);
  for (auto i : idx)
    b.labels.push_back(task == Task::vqa ? corpus.pairs()[i].answer : corpus.pairs()[i].class_label);
  return b;
}

double accuracy(const FinetuneBatch& b, UnifiedEncoder& enc, const TaskHead& head) {
  auto pred = predict_labels(classify(b.inputs, enc, head));
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == b.labels[i];
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

// Recall@k from a full sort of every similarity row; lower index wins ties.
double recall_oracle(const std::vector<double>& a, const std::vector<double>& b, std::size_t n, std::size_t d,
                     std::size_t k, bool image_to_text) {
  std::size_t hits = 0;
  for (std::size_t q = 0; q < n; ++q) {
    std::vector<std::pair<double, std::size_t>> row;
    for (std::size_t c = 0; c < n; ++c) {
      const double* u = image_to_text ? &a[q * d] : &a[c * d];
      const double* v = image_to_text ? &b[c * d] : &b[q * d];
      row.push_back({testutil::cosine_oracle(u, v, d), c});
    }
    std::stable_sort(row.begin(), row.end(), [](const auto& x, const auto& y) { return x.first > y.first; });
    for (std::size_t r = 0; r < k; ++r) hits += row[r].second == q;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

}  // namespace

TEST(Tasks, ParsingAndInputKinds) {
  for (Task t : {Task::vqa, Task::pair_classify, Task::image_classify, Task::text_classify, Task::retrieval,
                 Task::generation})
    EXPECT_EQ(parse_task(task_name(t)), t);
  EXPECT_THROW(parse_task("segmentation"), ConfigError);
  EXPECT_EQ(task_input_kind(Task::image_classify), BatchKind::image_only);
  EXPECT_EQ(task_input_kind(Task::generation), BatchKind::image_only);
  EXPECT_EQ(task_input_kind(Task::text_classify), BatchKind::text_only);
  EXPECT_EQ(task_input_kind(Task::vqa), BatchKind::image_text);
  EXPECT_EQ(task_input_kind(Task::retrieval), BatchKind::image_text);
}

TEST(TaskHead, InputDimsAndParameterNames) {
  const auto c = testutil::small_config();
  EXPECT_EQ(TaskHead::create(Task::vqa, 4, c, 1).out.in_features(), 2 * c.d_hidden);
  EXPECT_EQ(TaskHead::create(Task::pair_classify, 2, c, 1).out.in_features(), 2 * c.d_hidden);
  EXPECT_EQ(TaskHead::create(Task::image_classify, 3, c, 1).out.in_features(), c.d_hidden);
  EXPECT_EQ(TaskHead::create(Task::text_classify, 3, c, 1).out.out_features(), 3u);
  EXPECT_THROW(TaskHead::create(Task::vqa, 0, c, 1), ConfigError);
  auto gen = TaskHead::create(Task::generation, 0, c, 1);
  ASSERT_TRUE(gen.decoder.has_value());
  EXPECT_TRUE(gen.decoder->config().causal);
  EXPECT_EQ(gen.decoder->blocks.size(), c.decoder_layers);
  for (const auto& p : gen.parameters()) EXPECT_EQ(p.name.rfind("task.generation.", 0), 0u) << p.name;
  UnifiedEncoder enc(c);
  EXPECT_EQ(gen.decoder->init_from_encoder(enc), std::min(c.decoder_layers, c.n_layers));
  EXPECT_EQ(to_vec(gen.decoder->blocks[0].wq.weight), to_vec(enc.blocks()[0].wq.weight));
}

TEST(Classify, SingleClassAndZeroInitHead) {
  const auto c = testutil::small_config();
  UnifiedEncoder enc(c);
  auto corpus = SyntheticCorpus::generate(small_corpus(c, 8));
  auto batch = corpus.pair_batch(all_indices(5));
  auto one = classify(batch, enc, TaskHead::create(Task::vqa, 1, c, 2));
  for (double p : to_vec(one)) EXPECT_EQ(p, 1.0);

  auto zero = classify(batch, enc, TaskHead::create(Task::vqa, 4, c, 2, true));
  for (double p : to_vec(zero)) EXPECT_EQ(p, 0.25);
  EXPECT_THROW(classify(corpus.image_batch(all_indices(2)), enc, TaskHead::create(Task::vqa, 4, c, 2)), ConfigError);
  EXPECT_THROW(classify(batch, enc, TaskHead::create(Task::retrieval, 0, c, 2)), ConfigError);
}

TEST(Classify, ArgmaxMatchesBruteForce) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t rows = 1 + rng.below(6), k = 1 + rng.below(7);
    std::vector<double> p(rows * k);
    for (auto& v : p) v = static_cast<double>(rng.below(5));  // coarse values force ties
    auto got = predict_labels(Tensor({rows, k}, p));
    for (std::size_t r = 0; r < rows; ++r) {
      std::size_t best = 0;
      for (std::size_t j = 0; j < k; ++j)
        if (p[r * k + j] > p[r * k + best]) best = j;
      EXPECT_EQ(got[r], static_cast<std::int64_t>(best));
    }
  }
}

TEST(Finetune, ZeroLearningRateChangesNothing) {
  const auto c = testutil::small_config();
  UnifiedEncoder enc(c);
  auto head = TaskHead::create(Task::vqa, 4, c, 5);
  auto corpus = SyntheticCorpus::generate(small_corpus(c, 8));
  auto params = prepare_finetune_parameters(enc, head, {});
  AdamW opt(params, {.lr = 0.0});
  auto before = snapshot(params);
  auto batch = classify_batch(corpus, Task::vqa, all_indices(4));
  for (int i = 0; i < 3; ++i) finetune_step(batch, enc, head, opt);
  EXPECT_EQ(snapshot(params), before);
}

TEST(Finetune, FirstStepLossEqualsFrozenEvaluation) {
  const auto c = testutil::small_config();
  auto corpus = SyntheticCorpus::generate(small_corpus(c, 8));
  for (Task task : {Task::vqa, Task::image_classify, Task::text_classify, Task::retrieval, Task::generation}) {
    UnifiedEncoder enc(c);
    auto head = TaskHead::create(task, 4, c, 6);
    FinetuneBatch batch;
    if (task == Task::retrieval) {
      batch.inputs = corpus.pair_batch(all_indices(4));
    } else if (task == Task::generation) {
      batch.inputs = corpus.image_batch(all_indices(3));
      for (std::size_t i = 0; i < 3; ++i) batch.captions.push_back(corpus.caption(i));
    } else {
      batch = classify_batch(corpus, task, all_indices(4));
    }
    double frozen;
    {
      NoGradGuard ng;
      frozen = task_loss(batch, enc, head).item();
    }
    AdamW opt(prepare_finetune_parameters(enc, head, {}), {});
    EXPECT_NEAR(finetune_step(batch, enc, head, opt), frozen, 1e-12) << task_name(task);
  }
}

TEST(Finetune, EightSeparableItemsReachFullTrainAccuracy) {
  const auto c = testutil::small_config();
  auto corpus = SyntheticCorpus::generate(small_corpus(c, 8));
  UnifiedEncoder enc(c);
  auto head = TaskHead::create(Task::image_classify, corpus.config().n_concepts, c, 7);
  AdamW opt(prepare_finetune_parameters(enc, head, {}), {.lr = 1e-3});
  auto batch = classify_batch(corpus, Task::image_classify, all_indices(8));
  int reached = -1;
  for (int step = 1; step <= 300; ++step) {
    finetune_step(batch, enc, head, opt);
    if (step % 10 == 0 && accuracy(batch, enc, head) == 1.0) {
      reached = step;
      break;
    }
  }
  EXPECT_GT(reached, 0) << "final accuracy " << accuracy(batch, enc, head);
}

TEST(Finetune, FrozenBackboneOnlyMovesTheHead) {
  const auto c = testutil::small_config();
  auto corpus = SyntheticCorpus::generate(small_corpus(c, 8));
  UnifiedEncoder enc(c);
  auto head = TaskHead::create(Task::vqa, 4, c, 8);
  auto trainable = prepare_finetune_parameters(enc, head, {.freeze_backbone = true});
  EXPECT_EQ(trainable.size(), head.parameters().size());
  AdamW opt(trainable, {.lr = 1e-2});
  const auto enc_before = snapshot(enc.parameters());
  const auto head_before = snapshot(head.parameters());
  auto batch = classify_batch(corpus, Task::vqa, all_indices(6));
  for (int i = 0; i < 5; ++i) finetune_step(batch, enc, head, opt);
  EXPECT_EQ(snapshot(enc.parameters()), enc_before);
  for (const auto& p : enc.parameters()) {
    for (double g : p.tensor.grad()) EXPECT_EQ(g, 0.0) << p.name;
  }
  EXPECT_NE(snapshot(head.parameters()), head_before);
}

TEST(Finetune, PoolFlagFreezesOnlyThePools) {
  const auto c = testutil::small_config();
  auto corpus = SyntheticCorpus::generate(small_corpus(c, 8));
  UnifiedEncoder enc(c);
  auto head = TaskHead::create(Task::vqa, 4, c, 9);
  AdamW opt(prepare_finetune_parameters(enc, head, {.train_pools = false}), {.lr = 1e-2});
  const auto pools_before = snapshot(enc.pool_parameters());
  const auto blocks_before = to_vec(enc.blocks()[0].wq.weight);
  auto batch = classify_batch(corpus, Task::vqa, all_indices(6));
  for (int i = 0; i < 3; ++i) finetune_step(batch, enc, head, opt);
  EXPECT_EQ(snapshot(enc.pool_parameters()), pools_before);
  EXPECT_NE(to_vec(enc.blocks()[0].wq.weight), blocks_before);
}

TEST(Retrieval, IdentityAndPermutedOrthonormalPairings) {
  Rng rng(10);
  Tensor reps = random_tensor(rng, {6, 5});
  std::vector<std::size_t> ks{1, 3, 6};
  auto r = retrieval_rank(reps, reps, {}, ks);
  EXPECT_EQ(r.recall_i2t[0], 1.0);
  EXPECT_EQ(r.recall_t2i[0], 1.0);

  Tensor eye = Tensor::zeros({5, 5});
  for (std::size_t i = 0; i < 5; ++i) eye.mutable_data()[i * 5 + i] = 1.0;
  std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  std::vector<double> texts(25, 0.0);
  for (std::size_t i = 0; i < 5; ++i) texts[perm[i] * 5 + i] = 1.0;  // text perm[i] equals image i
  std::vector<std::size_t> k1{1};
  auto p = retrieval_rank(eye, Tensor({5, 5}, texts), perm, k1);
  EXPECT_EQ(p.recall_i2t[0], 1.0);
  EXPECT_EQ(p.recall_t2i[0], 1.0);
  auto wrong = retrieval_rank(eye, Tensor({5, 5}, texts), {}, k1);
  EXPECT_LT(wrong.recall_i2t[0], 1.0);
}

TEST(Retrieval, TiesGoToTheLowerIndexAndKIsBounded) {
  Tensor img({1, 2}, {1, 0});
  Tensor txt({3, 2}, {0, 1, 1, 0, 1, 0});
  std::vector<std::size_t> pairing{2}, k1{1};
  auto r = retrieval_rank(img, txt, pairing, k1);
  EXPECT_EQ(r.image_to_text[0], (std::vector<std::size_t>{1, 2, 0}));
  EXPECT_EQ(r.recall_i2t[0], 0.0);
  std::vector<std::size_t> k4{4};
  EXPECT_THROW(retrieval_rank(txt, txt, {}, k4), ConfigError);
}

TEST(Retrieval, MatchesFullSortOracleAndIsMonotoneInK) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed + 500);
    const std::size_t n = 8, d = 4;
    Tensor a = random_tensor(rng, {n, d}), b = random_tensor(rng, {n, d});
    std::vector<std::size_t> ks{1, 2, 3, 5, 8};
    auto r = retrieval_rank(a, b, {}, ks);
    for (std::size_t i = 0; i < ks.size(); ++i) {
      EXPECT_NEAR(r.recall_i2t[i], recall_oracle(to_vec(a), to_vec(b), n, d, ks[i], true), 1e-12);
      EXPECT_NEAR(r.recall_t2i[i], recall_oracle(to_vec(a), to_vec(b), n, d, ks[i], false), 1e-12);
      if (i > 0) {
        EXPECT_GE(r.recall_i2t[i], r.recall_i2t[i - 1]);
        EXPECT_GE(r.recall_t2i[i], r.recall_t2i[i - 1]);
      }
    }
    EXPECT_EQ(r.recall_i2t.back(), 1.0);
  }
}

TEST(Generation, ForcedEndTokenGivesEmptyOutput) {
  const auto c = testutil::small_config();
  UnifiedEncoder enc(c);
  auto head = TaskHead::create(Task::generation, 0, c, 11);
  for (double& w : head.decoder->out.weight.mutable_data()) w = 0.0;
  head.decoder->out.bias.mutable_data()[kEosId] = 30.0;
  auto corpus = SyntheticCorpus::generate(small_corpus(c, 8));
  auto out = generate_report(corpus.image_batch(all_indices(3)), enc, head, 5);
  ASSERT_EQ(out.size(), 3u);
  for (const auto& s : out) EXPECT_TRUE(s.empty());
}

TEST(Generation, DeterministicAndContextChecked) {
  const auto c = testutil::small_config();
  UnifiedEncoder enc(c);
  auto head = TaskHead::create(Task::generation, 0, c, 12);
  auto corpus = SyntheticCorpus::generate(small_corpus(c, 8));
  auto images = corpus.image_batch(all_indices(3));
  auto a = generate_report(images, enc, head, 6);
  auto b = generate_report(images, enc, head, 6);
  EXPECT_EQ(a, b);
  const std::size_t prefix = 1 + c.patch_count + c.n_sel * c.prompt_len_t;
  EXPECT_EQ(report_prefix(images, enc).dim(1), prefix);
  EXPECT_NO_THROW(generate_report(images, enc, head, c.context_len - prefix));
  EXPECT_THROW(generate_report(images, enc, head, c.context_len - prefix + 1), ConfigError);
}

TEST(Generation, DecoderNeverSeesTheFuture) {
  const auto c = testutil::small_config();
  auto head = TaskHead::create(Task::generation, 0, c, 13);
  const auto& dec = *head.decoder;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed + 60);
    const std::size_t P = 4, T = 6;
    Tensor prefix = random_tensor(rng, {2, P, c.d_hidden});
    std::vector<std::int64_t> tokens(2 * T);
    for (auto& t : tokens) t = kFirstWordId + static_cast<std::int64_t>(rng.below(c.vocab_size - kFirstWordId));
    const auto base = to_vec(dec.logits(prefix, tokens, T));
    const std::size_t cut = rng.below(T);
    auto changed = tokens;
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t j = cut; j < T; ++j) changed[b * T + j] = kPadId;
    const auto moved = to_vec(dec.logits(prefix, changed, T));
    const std::size_t V = c.vocab_size, L = P + T;
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t pos = 0; pos < P + cut; ++pos)
        for (std::size_t v = 0; v < V; ++v) EXPECT_EQ(moved[(b * L + pos) * V + v], base[(b * L + pos) * V + v]);
  }
}

TEST(Generation, OverfitsFourCaptions) {
  auto c = testutil::small_config();
  auto corpus = SyntheticCorpus::generate(small_corpus(c, 8));
  UnifiedEncoder enc(c);
  auto head = TaskHead::create(Task::generation, 0, c, 14);
  head.decoder->init_from_encoder(enc);
  const auto idx = corpus.distinct_indices(4);
  FinetuneBatch batch;
  batch.inputs = corpus.image_batch(idx);
  for (auto i : idx) batch.captions.push_back(corpus.caption(i));
  AdamW opt(prepare_finetune_parameters(enc, head, {}), {.lr = 1e-3});
  for (int step = 0; step < 500; ++step) finetune_step(batch, enc, head, opt);
  auto out = generate_report(batch.inputs, enc, head, corpus.config().text_len);
  EXPECT_EQ(out, batch.captions);
}

TEST(Bleu, Fixtures) {
  auto same = split_words("the cat sat on the mat");
  auto s = bleu(std::span<const std::string>(same), std::span<const std::string>(same));
  for (double v : s.scores) EXPECT_EQ(v, 1.0);
  EXPECT_EQ(s.brevity_penalty, 1.0);

  auto a = split_words("alpha beta gamma delta"), b = split_words("one two three four");
  auto d = bleu(std::span<const std::string>(a), std::span<const std::string>(b));
  for (double v : d.scores) EXPECT_LT(v, 1e-8);

  auto cand = split_words("the cat sat"), ref = split_words("the cat sat down");
  auto bp = bleu(std::span<const std::string>(cand), std::span<const std::string>(ref));
  EXPECT_EQ(bp.precisions[0], 1.0);
  EXPECT_NEAR(bp.brevity_penalty, 0.716531, 1e-6);
  EXPECT_NEAR(bp.brevity_penalty, std::exp(1.0 - 4.0 / 3.0), 1e-15);
  EXPECT_EQ(bp.scores[0], bp.brevity_penalty);

  std::vector<std::int64_t> ids{5, 6, 7}, none;
  auto empty = bleu(std::span<const std::int64_t>(none), std::span<const std::int64_t>(ids));
  for (double v : empty.scores) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(bleu(std::span<const std::int64_t>(ids), std::span<const std::int64_t>(none)), ConfigError);
}
