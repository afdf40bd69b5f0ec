// Acceptance suite: one PASS/FAIL line per criterion, exit 1 if any fails.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <unistd.h>
#include <vector>

#include "dcp/adaptation.hpp"
#include "dcp/bleu.hpp"
#include "dcp/checkpoint.hpp"
#include "dcp/corpus.hpp"
#include "dcp/gradcheck_suite.hpp"
#include "dcp/harness.hpp"
#include "dcp/objectives.hpp"
#include "dcp/ops.hpp"
#include "dcp/optimizer.hpp"
#include "dcp/prompt_pool.hpp"
#include "test_util.hpp"

using namespace dcp;
using testutil::random_tensor;
using testutil::to_vec;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool ok = true;
  std::string detail;
  std::string failure;

  void expect(bool cond, const std::string& what) {
    if (!cond && ok) {
      ok = false;
      failure = what;
    }
  }
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("dcp_acceptance_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) { return read_text_file(p); }

std::vector<std::vector<double>> snapshot(const ParameterList& params) {
  std::vector<std::vector<double>> out;
  for (const auto& p : params) out.push_back(to_vec(p.tensor));
  return out;
}

PromptPool make_pool(std::size_t size, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  return PromptPool(Modality::visual, size, dim, 1, rng);
}

Verdict gradient_correctness() {
  Verdict v;
  const auto t0 = Clock::now();
  std::size_t cases = 0;
  auto report = run_gradcheck_suite(100, 1, 1e-5, 1e-5, [&](const GradCheckCaseResult& r) {
    ++cases;
    v.expect(r.failures == 0, r.name + " failed on " + std::to_string(r.failures) + " seeds, worst rel err " +
                                  fmt("%.3e", r.max_rel_error) + " at " + r.worst_param);
  });
  const double secs = seconds_since(t0);
  bool has_end_to_end = false;
  for (const auto& c : report.cases) has_end_to_end |= c.name == "combined_pretrain_loss";
  v.expect(report.passed, "suite reported failure");
  v.expect(has_end_to_end, "end-to-end combined loss case missing");
  v.expect(gradcheck_model_config().n_layers == 2, "end-to-end config is not 2 layers");
  v.expect(secs < 120.0, "runtime " + fmt("%.1f", secs) + " s exceeds 120 s");
  v.detail = std::to_string(cases) + " cases x 100 seeds, h=1e-5, tol=1e-5, " + fmt("%.1f", secs) + " s";
  return v;
}

Verdict selection_oracle() {
  Verdict v;
  Rng rng(90210);
  std::size_t tie_cases = 0;
  for (int c = 0; c < 1000; ++c) {
    const std::size_t size = 1 + rng.below(64);
    const std::size_t n_sel = 1 + rng.below(std::min<std::size_t>(8, size));
    const std::size_t d = 2 + rng.below(7);
    PromptPool pool = make_pool(size, d, rng.next());
    std::vector<double> keys = to_vec(pool.keys());
    if (size > 1 && c % 2 == 0) {
      // Duplicated key rows give exact similarity ties.
      const std::size_t copies = 1 + rng.below(3);
      for (std::size_t k = 0; k < copies; ++k) {
        const std::size_t src = rng.below(size), dst = rng.below(size);
        std::copy_n(keys.begin() + src * d, d, keys.begin() + dst * d);
      }
      auto km = pool.keys().mutable_data();
      std::copy(keys.begin(), keys.end(), km.begin());
    }
    Tensor q = random_tensor(rng, {d});
    if (c % 5 == 1 && size > 1) {
      // Query on the bisector of two keys: both score the same cosine.
      auto qm = q.mutable_data();
      for (std::size_t j = 0; j < d; ++j) qm[j] = keys[j] + keys[d + j];
    }
    auto want = testutil::selection_oracle(keys, to_vec(q), size, n_sel);
    auto got = select_prompts(pool, q, n_sel);
    bool tie = false;
    for (std::size_t i = 1; i < got.similarities.size(); ++i) tie |= got.similarities[i] == got.similarities[i - 1];
    tie_cases += tie;
    v.expect(got.indices == want, "case " + std::to_string(c) + " differs from the full-sort oracle");
  }
  v.expect(tie_cases >= 100, "too few tie cases exercised");
  v.detail = "1000 cases, pool<=64, n_sel<=8, " + std::to_string(tie_cases) + " with exact ties";
  return v;
}

Verdict scale_invariance() {
  Verdict v;
  std::size_t checked = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng(seed * 7 + 3);
    const std::size_t size = 4 + rng.below(61);
    const std::size_t d = 2 + rng.below(10);
    const std::size_t n_sel = 1 + rng.below(std::min<std::size_t>(8, size));
    PromptPool pool = make_pool(size, d, seed);
    Tensor input = random_tensor(rng, {1 + rng.below(6), d});
    const std::size_t d_other = 2 + rng.below(10);
    Tensor other = random_tensor(rng, {3, d_other});
    Tensor proj = random_tensor(rng, {d_other, d});
    std::vector<std::size_t> base, base_cross;
    for (double c : {1e-3, 1.0, 1e3}) {
      auto own = select_prompts(pool, query_fn(scale(input, c), d), n_sel).indices;
      auto cross = select_prompts(pool, cross_query(scale(other, c), pool, &proj), n_sel).indices;
      if (c == 1e-3) {
        base = own;
        base_cross = cross;
        continue;
      }
      v.expect(own == base, "seed " + std::to_string(seed) + " own-modality selection changed at c=" + fmt("%g", c));
      v.expect(cross == base_cross, "seed " + std::to_string(seed) + " cross-modal selection changed at c=" + fmt("%g", c));
      checked += 2;
    }
  }
  v.detail = std::to_string(checked) + " scaled selections compared, c in {1e-3, 1, 1e3}";
  return v;
}

Verdict recomposition() {
  Verdict v;
  ModelConfig defaults;
  v.expect(defaults.lambda == 0.8 && defaults.beta == 0.9 && defaults.sigma == 0.9, "default weights are not 0.8/0.9/0.9");
  auto c = testutil::small_config();
  auto corpus = SyntheticCorpus::generate(testutil::small_corpus(c, 8));
  double worst = 0.0;
  std::size_t steps = 0;
  {
    PretrainModel model(c);
    AdamW opt(model.parameters(), {.lr = c.lr, .weight_decay = c.weight_decay});
    Rng rng(11);
    for (int s = 0; s < 40; ++s) {
      auto idx = all_indices(corpus.size());
      rng.shuffle(idx);
      idx.resize(std::min(idx.size(), c.batch_size));
      auto r = pretrain_step(corpus.pair_batch(idx), model, opt, rng);
      const double want = r.l_mlm + 0.9 * r.l_itm + 0.8 * r.l_itc + 0.9 * r.l_p;
      worst = std::max(worst, std::abs(r.l_total - want));
      ++steps;
    }
  }
  v.expect(worst <= 1e-12, "recomposition error " + fmt("%.3e", worst));
  c.sigma = c.lambda = c.beta = 0.0;
  {
    PretrainModel model(c);
    AdamW opt(model.parameters(), {.lr = c.lr, .weight_decay = c.weight_decay});
    Rng rng(12);
    for (int s = 0; s < 20; ++s) {
      auto idx = all_indices(corpus.size());
      rng.shuffle(idx);
      idx.resize(std::min(idx.size(), c.batch_size));
      auto r = pretrain_step(corpus.pair_batch(idx), model, opt, rng);
      v.expect(r.l_total == r.l_mlm, "zero weights: l_total != l_mlm at step " + std::to_string(s));
      v.expect(r.l_itm > 0.0 && r.l_itc > 0.0 && r.l_p > 0.0, "zero weights: component losses not computed");
      ++steps;
    }
  }
  v.detail = std::to_string(steps) + " steps, max |l_total - sum| = " + fmt("%.2e", worst);
  return v;
}

Verdict masking_rate() {
  Verdict v;
  const ModelConfig c;
  v.expect(c.mask_rate == 0.15, "default mask rate is not 0.15");
  double lo = 1.0, hi = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed + 500);
    std::vector<std::int64_t> ids(12000);
    for (auto& id : ids) id = kFirstWordId + static_cast<std::int64_t>(rng.below(c.vocab_size - kFirstWordId));
    auto m = apply_mlm_masking(ids, c.mask_rate, c.vocab_size, rng);
    const double frac = static_cast<double>(m.masked_count) / static_cast<double>(ids.size());
    lo = std::min(lo, frac);
    hi = std::max(hi, frac);
    v.expect(frac >= 0.135 && frac <= 0.165, "seed " + std::to_string(seed) + " fraction " + fmt("%.4f", frac));
  }
  // Through the pre-training batch path on the synthetic corpus.
  auto corpus = SyntheticCorpus::generate(corpus_config_for(c));
  Rng rng(77);
  std::size_t tokens = 0, masked = 0;
  while (tokens < 10000) {
    auto pairs = corpus.pair_batch(all_indices(corpus.size()));
    auto p = prepare_pretrain_batch(pairs, c, rng);
    for (std::size_t i = 0; i < pairs.token_ids.size(); ++i) {
      if (is_special_token(pairs.token_ids[i])) continue;
      ++tokens;
      masked += p.mlm_labels[i] >= 0;
    }
  }
  const double corpus_frac = static_cast<double>(masked) / static_cast<double>(tokens);
  v.expect(corpus_frac >= 0.135 && corpus_frac <= 0.165, "corpus fraction " + fmt("%.4f", corpus_frac));
  v.detail = "10 x 12000 tokens in [" + fmt("%.4f", lo) + ", " + fmt("%.4f", hi) + "], corpus path " +
             fmt("%.4f", corpus_frac) + " over " + std::to_string(tokens) + " tokens";
  return v;
}

Verdict gradient_isolation() {
  Verdict v;
  const auto c = testutil::small_config();
  auto corpus = SyntheticCorpus::generate(testutil::small_corpus(c, 8));
  std::size_t unused_total = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto mc = c;
    mc.seed = seed;
    PretrainModel model(mc);
    Rng rng(seed + 40);
    auto prepared = prepare_pretrain_batch(corpus.pair_batch(all_indices(3)), mc, rng);
    const auto params = model.parameters();
    zero_grads(params);
    Tape::current().clear();
    backward(combined_pretrain_loss(prepared, model).total);
    std::vector<bool> used_v(mc.pool_size_v, false), used_t(mc.pool_size_t, false);
    {
      NoGradGuard ng;
      for (const auto* b : {&prepared.joint, &prepared.image_only, &prepared.text_only}) {
        auto a = model.encoder.unify_inputs(*b);
        for (const auto& s : a.visual_selections)
          for (auto i : s.indices) used_v[i] = true;
        for (const auto& s : a.textual_selections)
          for (auto i : s.indices) used_t[i] = true;
      }
    }
    auto check = [&](PromptPool& pool, const std::vector<bool>& used) {
      const std::size_t kd = pool.key_dim(), block = pool.prompt_len() * kd;
      auto gk = pool.keys().grad();
      auto gv = pool.values().grad();
      for (std::size_t i = 0; i < pool.size(); ++i) {
        if (used[i]) continue;
        ++unused_total;
        for (std::size_t j = 0; j < kd; ++j) v.expect(gk[i * kd + j] == 0.0, "unselected key received gradient");
        for (std::size_t j = 0; j < block; ++j) v.expect(gv[i * block + j] == 0.0, "unselected value received gradient");
      }
    };
    check(model.encoder.visual_pool(), used_v);
    check(model.encoder.textual_pool(), used_t);

    UnifiedEncoder enc(mc);
    auto head = TaskHead::create(Task::vqa, task_label_space(Task::vqa, corpus.config()), mc, seed + 1);
    auto trainable = prepare_finetune_parameters(enc, head, {.freeze_backbone = true});
    AdamW opt(trainable, {.lr = 1e-2});
    const auto enc_before = snapshot(enc.parameters());
    const auto head_before = snapshot(head.parameters());
    FinetuneBatch batch;
    auto idx = all_indices(6);
    batch.inputs = corpus.pair_batch(idx);
    for (auto i : idx) batch.labels.push_back(corpus.pairs()[i].answer);
    for (int s = 0; s < 5; ++s) finetune_step(batch, enc, head, opt);
    v.expect(snapshot(enc.parameters()) == enc_before, "frozen backbone changed");
    auto head_after = snapshot(head.parameters());
    for (std::size_t i = 0; i < head_after.size(); ++i)
      v.expect(head_after[i] != head_before[i], "head parameter " + head.parameters()[i].name + " did not move");
  }
  v.expect(unused_total > 0, "no unselected entries to check");
  v.detail = std::to_string(unused_total) + " unselected entries with zero gradient over 5 seeds; frozen backbone bit-identical";
  return v;
}

double eval_value(const std::vector<EvalRow>& rows, const std::string& metric) {
  for (const auto& r : rows)
    if (r.metric == metric) return r.value;
  return std::nan("");
}

Verdict toy_learnability() {
  Verdict v;
  const auto t0 = Clock::now();
  RunConfig rc;  // 32 pairs, 2 layers, d_hidden 64, 500 pre-training steps
  rc.validate();
  v.expect(rc.corpus.n_pairs == 32 && rc.model.n_layers == 2 && rc.model.d_hidden == 64 &&
               rc.model.pretrain_steps == 500,
           "default configuration does not match the toy setting");
  const fs::path dir = scratch("learn");
  auto corpus = SyntheticCorpus::generate(rc.corpus);
  PretrainModel model(rc.model);
  auto pre = run_pretrain(rc, corpus, model, dir);
  v.expect(pre.final_eval <= 0.5 * pre.initial_eval,
           "l_total " + fmt("%.4f", pre.initial_eval) + " -> " + fmt("%.4f", pre.final_eval) + " not halved");
  auto ck = read_checkpoint(pre.checkpoint);
  auto itm = run_finetune(rc, corpus, ck, Task::pair_classify, dir);
  auto ret = run_finetune(rc, corpus, ck, Task::retrieval, dir);
  auto gen = run_finetune(rc, corpus, ck, Task::generation, dir);
  const double acc = eval_value(itm.eval, "accuracy");
  const double i2t = eval_value(ret.eval, "i2t_r@1"), t2i = eval_value(ret.eval, "t2i_r@1");
  const double ret_items = eval_value(ret.eval, "items");
  const double exact = eval_value(gen.eval, "exact_match"), gen_items = eval_value(gen.eval, "items");
  const double secs = seconds_since(t0);
  v.expect(acc >= 0.95, "ITM accuracy " + fmt("%.4f", acc));
  v.expect(i2t == 1.0 && t2i == 1.0, "R@1 " + fmt("%.4f", i2t) + "/" + fmt("%.4f", t2i));
  v.expect(ret_items == 16.0, "retrieval set is not 16 pairs");
  v.expect(exact == 1.0, "exact caption match " + fmt("%.4f", exact));
  v.expect(gen_items == 4.0, "generation fixture is not 4 pairs");
  v.expect(secs < 300.0, "wall time " + fmt("%.1f", secs) + " s exceeds 300 s");
  v.detail = "l_total " + fmt("%.3f", pre.initial_eval) + " -> " + fmt("%.3f", pre.final_eval) + ", ITM acc " +
             fmt("%.3f", acc) + ", R@1 " + fmt("%.2f", i2t) + "/" + fmt("%.2f", t2i) + ", exact " + fmt("%.2f", exact) +
             ", " + fmt("%.1f", secs) + " s";
  fs::remove_all(dir);
  return v;
}

Verdict determinism_and_persistence() {
  Verdict v;
  RunConfig rc;
  rc.model = testutil::small_config();
  rc.model.pretrain_steps = 12;
  rc.model.checkpoint_every = 5;
  rc.model.finetune_steps = 6;
  rc.corpus = testutil::small_corpus(rc.model, 8);
  rc.validate();
  const fs::path a = scratch("det_a"), b = scratch("det_b");
  for (const auto& dir : {a, b}) {
    auto corpus = SyntheticCorpus::generate(rc.corpus);
    PretrainModel model(rc.model);
    auto pre = run_pretrain(rc, corpus, model, dir);
    run_finetune(rc, corpus, read_checkpoint(pre.checkpoint), Task::pair_classify, dir);
  }
  std::size_t compared = 0;
  for (const char* f : {"checkpoint.bin", "metrics.csv", "finetune_pair_classify.bin", "finetune_pair_classify.csv",
                        "eval_pair_classify.csv"}) {
    v.expect(slurp(a / f) == slurp(b / f), std::string(f) + " differs between identical runs");
    ++compared;
  }

  auto corpus = SyntheticCorpus::generate(rc.corpus);
  PretrainModel model(rc.model);
  AdamW opt(model.parameters(), {});
  Rng rng(3);
  for (int i = 0; i < 4; ++i) pretrain_step(corpus.pair_batch(all_indices(4)), model, opt, rng);
  write_checkpoint(a / "rt.bin", capture_state(rc.model, model.parameters(), model.encoder));
  PretrainModel fresh(rc.model);
  restore_state(read_checkpoint(a / "rt.bin"), rc.model, fresh.parameters(), fresh.encoder);
  std::size_t values = 0;
  for (auto batch : {corpus.pair_batch(all_indices(8)), corpus.image_batch(all_indices(8)), corpus.text_batch(all_indices(8))}) {
    auto x = model.encoder.forward(batch);
    auto y = fresh.encoder.forward(batch);
    for (auto [p, q] : {std::pair{&x.token_states, &y.token_states}, std::pair{&x.cls_visual, &y.cls_visual},
                        std::pair{&x.cls_textual, &y.cls_textual}}) {
      auto pv = to_vec(*p), qv = to_vec(*q);
      v.expect(pv.size() == qv.size(), "restored forward has a different shape");
      for (std::size_t i = 0; i < pv.size() && i < qv.size(); ++i) {
        v.expect(std::bit_cast<std::uint64_t>(pv[i]) == std::bit_cast<std::uint64_t>(qv[i]),
                 "restored forward differs in the last place");
        ++values;
      }
    }
  }
  fs::remove_all(a.parent_path());
  v.detail = std::to_string(compared) + " artifacts byte-identical, " + std::to_string(values) +
             " restored forward values at 0 ulps";
  return v;
}

Verdict bleu_fixtures() {
  Verdict v;
  auto words = [](const char* s) { return split_words(s); };
  auto score = [](const std::vector<std::string>& c, const std::vector<std::string>& r) {
    return bleu(std::span<const std::string>(c), std::span<const std::string>(r));
  };
  auto same = score(words("the cat sat on the mat"), words("the cat sat on the mat"));
  for (double s : same.scores) v.expect(s == 1.0, "identical sentence BLEU != 1");
  auto disjoint = score(words("alpha beta gamma delta"), words("one two three four"));
  for (double s : disjoint.scores) v.expect(s < 1e-6, "disjoint BLEU not ~0");
  auto bp = score(words("the cat sat"), words("the cat sat down"));
  v.expect(bp.precisions[0] == 1.0, "BLEU-1 clipped precision != 1");
  v.expect(std::abs(bp.brevity_penalty - 0.716531) <= 1e-6, "brevity penalty " + fmt("%.8f", bp.brevity_penalty));
  v.detail = "identical 1.0, disjoint " + fmt("%.1e", disjoint.scores.back()) + ", brevity penalty " +
             fmt("%.6f", bp.brevity_penalty);
  return v;
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria{
      {"gradient correctness", gradient_correctness},
      {"selection oracle", selection_oracle},
      {"selection scale invariance", scale_invariance},
      {"loss recomposition", recomposition},
      {"masking rate", masking_rate},
      {"gradient isolation", gradient_isolation},
      {"toy learnability", toy_learnability},
      {"determinism and persistence", determinism_and_persistence},
      {"BLEU fixtures", bleu_fixtures},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v.ok = false;
      v.failure = std::string("exception: ") + e.what();
    }
    failed += !v.ok;
    std::printf("criterion %zu: %s  %s  (%s)\n", i + 1, v.ok ? "PASS" : "FAIL", criteria[i].first,
                v.ok ? v.detail.c_str() : v.failure.c_str());
    std::fflush(stdout);
  }
  std::printf("%zu/%zu criteria passed\n", criteria.size() - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
