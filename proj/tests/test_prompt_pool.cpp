#include <gtest/gtest.h>

#include <numeric>

#include "dcp/errors.hpp"
#include "dcp/gradcheck.hpp"
#include "dcp/ops.hpp"
#include "dcp/prompt_pool.hpp"
#include "test_util.hpp"

using namespace dcp;
using testutil::random_tensor;
using testutil::to_vec;

namespace {

PromptPool make_pool(std::size_t size, std::size_t dim, std::size_t len, std::uint64_t seed,
                     Modality m = Modality::visual) {
  Rng rng(seed);
  return PromptPool(m, size, dim, len, rng);
}

void set_keys(PromptPool& pool, const std::vector<double>& keys) {
  auto k = pool.keys().mutable_data();
  std::copy(keys.begin(), keys.end(), k.begin());
}

}  // namespace

TEST(PromptPool, InitializationInvariants) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    PromptPool pool = make_pool(64, 16, 4, seed);
    EXPECT_EQ(pool.keys().shape(), (Shape{64, 16}));
    EXPECT_EQ(pool.values().shape(), (Shape{64, 4, 16}));
    EXPECT_EQ(pool.role(PromptRole::as_visual_context).shape(), (Shape{16}));
    EXPECT_EQ(pool.role(PromptRole::as_textual_context).shape(), (Shape{16}));
    const auto k = pool.keys().data();
    for (std::size_t i = 0; i < 64; ++i) {
      double n = 0.0;
      for (std::size_t j = 0; j < 16; ++j) n += k[i * 16 + j] * k[i * 16 + j];
      EXPECT_NEAR(n, 1.0, 1e-12);
    }
    ParameterList params;
    pool.collect(params, "pool");
    EXPECT_EQ(params.size(), 4u);
  }
}

TEST(QueryFn, SingleTokenAndSymmetricPair) {
  Tensor one({1, 3}, {0.5, -2.0, 4.0});
  EXPECT_EQ(to_vec(query_fn(one, 3)), (std::vector<double>{0.5, -2.0, 4.0}));
  Tensor pair({2, 3}, {0.5, -2.0, 4.0, -0.5, 2.0, -4.0});
  for (double v : to_vec(query_fn(pair, 3))) EXPECT_EQ(v, 0.0);
}

TEST(QueryFn, MatchesColumnMeanOracle) {
  Rng rng(12);
  Tensor x = random_tensor(rng, {5, 8});
  auto xv = to_vec(x);
  auto q = to_vec(query_fn(x, 8));
  for (std::size_t j = 0; j < 8; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < 5; ++i) s += xv[i * 8 + j];
    EXPECT_NEAR(q[j], s / 5.0, 1e-12);
  }
  EXPECT_THROW(query_fn(x, 7), DimensionError);
}

TEST(CrossQuery, IdentityZeroAndOracle) {
  PromptPool target = make_pool(6, 4, 2, 1, Modality::textual);
  Rng rng(3);
  Tensor x = random_tensor(rng, {3, 4});
  Tensor eye = Tensor::zeros({4, 4});
  for (std::size_t i = 0; i < 4; ++i) eye.mutable_data()[i * 4 + i] = 1.0;
  EXPECT_LE(testutil::max_abs_diff(to_vec(cross_query(x, target, &eye)), to_vec(query_fn(x, 4))), 1e-15);
  EXPECT_EQ(to_vec(cross_query(x, target, nullptr)), to_vec(query_fn(x, 4)));

  Tensor proj = random_tensor(rng, {5, 4});
  for (double v : to_vec(cross_query(Tensor::zeros({3, 5}), target, &proj))) EXPECT_EQ(v, 0.0);

  Tensor y = random_tensor(rng, {3, 5});
  auto yv = to_vec(y);
  std::vector<double> mean(5, 0.0);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 5; ++j) mean[j] += yv[i * 5 + j] / 3.0;
  auto want = testutil::matmul_oracle(mean, to_vec(proj), 1, 5, 4);
  EXPECT_LE(testutil::max_abs_diff(to_vec(cross_query(y, target, &proj)), want), 1e-12);
  EXPECT_THROW(cross_query(y, target, nullptr), ConfigError);
}

TEST(SelectPrompts, OrthonormalKeys) {
  PromptPool pool = make_pool(3, 3, 1, 0);
  set_keys(pool, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto sel = select_prompts(pool, Tensor({3}, {0, 1, 0}), 1);
  EXPECT_EQ(sel.indices, (std::vector<std::size_t>{1}));
  EXPECT_EQ(sel.similarities, (std::vector<double>{1.0}));
}

TEST(SelectPrompts, EquidistantQueryPrefersLowerIndex) {
  PromptPool pool = make_pool(3, 2, 1, 0);
  set_keys(pool, {0, 1, 1, 0, -1, 0});
  auto sel = select_prompts(pool, Tensor({2}, {1, 1}), 1);
  EXPECT_EQ(sel.indices, (std::vector<std::size_t>{0}));
  auto two = select_prompts(pool, Tensor({2}, {1, 1}), 2);
  EXPECT_EQ(two.indices, (std::vector<std::size_t>{0, 1}));
}

TEST(SelectPrompts, MatchesFullSortOracle) {
  Rng rng(2024);
  for (int c = 0; c < 300; ++c) {
    const std::size_t size = 1 + rng.below(64);
    const std::size_t n_sel = 1 + rng.below(std::min<std::size_t>(8, size));
    const std::size_t d = 2 + rng.below(7);
    PromptPool pool = make_pool(size, d, 1, rng.next());
    std::vector<double> keys = to_vec(pool.keys());
    if (size > 2 && c % 3 == 0) {  // duplicated rows force exact ties
      const std::size_t src = rng.below(size), dst = rng.below(size);
      std::copy_n(keys.begin() + src * d, d, keys.begin() + dst * d);
      set_keys(pool, keys);
    }
    Tensor q = random_tensor(rng, {d});
    auto sel = select_prompts(pool, q, n_sel);
    EXPECT_EQ(sel.indices, testutil::selection_oracle(keys, to_vec(q), size, n_sel)) << "case " << c;
    for (std::size_t i = 1; i < sel.similarities.size(); ++i) EXPECT_GE(sel.similarities[i - 1], sel.similarities[i]);
  }
}

TEST(SelectPrompts, ErrorsAndUsage) {
  PromptPool pool = make_pool(5, 3, 2, 4);
  EXPECT_THROW(select_prompts(pool, Tensor({3}, {1, 0, 0}), 6), ConfigError);
  EXPECT_THROW(select_prompts(pool, Tensor({2}, {1, 0}), 1), DimensionError);
  Rng rng(1);
  for (int i = 0; i < 7; ++i) select_prompts(pool, random_tensor(rng, {3}), 3);
  const auto usage = pool.usage();
  EXPECT_EQ(std::accumulate(usage.begin(), usage.end(), std::uint64_t{0}), pool.selection_calls() * 3);
  EXPECT_EQ(pool.selection_calls(), 7u);
}

TEST(SelectPrompts, ScaleInvariantAndDeterministic) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    PromptPool pool = make_pool(32, 6, 2, seed);
    Rng rng(seed + 100);
    Tensor input = random_tensor(rng, {5, 6});
    auto base = select_prompts(pool, query_fn(input, 6), 5);
    for (double c : {1e-3, 1.0, 1e3, 0.37}) {
      auto scaled = select_prompts(pool, query_fn(scale(input, c), 6), 5);
      EXPECT_EQ(scaled.indices, base.indices);
    }
    auto again = select_prompts(pool, query_fn(input, 6), 5);
    EXPECT_EQ(again.indices, base.indices);
    EXPECT_EQ(again.similarities, base.similarities);
  }
}

TEST(SurrogateLoss, AlignedAndOrthogonalKeys) {
  PromptPool pool = make_pool(5, 5, 1, 0);
  std::vector<double> eye(25, 0.0);
  for (std::size_t i = 0; i < 5; ++i) eye[i * 5 + i] = 1.0;
  set_keys(pool, eye);
  auto aligned = select_prompts(pool, Tensor({5}, {0, 0, 3, 0, 0}), 1);
  EXPECT_NEAR(surrogate_loss(std::vector<SelectionResult>{aligned}).item(), 0.0, 1e-15);

  // Ten-dimensional keys; the query lives in the last five coordinates.
  PromptPool wide = make_pool(5, 10, 1, 0);
  std::vector<double> keys(50, 0.0);
  for (std::size_t i = 0; i < 5; ++i) keys[i * 10 + i] = 1.0;
  set_keys(wide, keys);
  auto ortho = select_prompts(wide, Tensor({10}, {0, 0, 0, 0, 0, 1, 1, 0, 0, 0}), 5);
  EXPECT_NEAR(surrogate_loss(std::vector<SelectionResult>{ortho}).item(), 5.0, 1e-15);
  EXPECT_THROW(surrogate_loss(std::vector<SelectionResult>{}), ConfigError);
}

TEST(SurrogateLoss, MatchesComposedOracleAndFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    PromptPool pool = make_pool(12, 6, 2, seed);
    Rng rng(seed + 7);
    Tensor x1 = random_tensor(rng, {4, 6}, true);
    Tensor x2 = random_tensor(rng, {3, 6}, true);
    std::vector<SelectionResult> sel{select_prompts(pool, query_fn(x1, 6), 3), select_prompts(pool, query_fn(x2, 6), 3)};
    const double got = surrogate_loss(sel).item();
    auto keys = to_vec(pool.keys());
    double want = 0.0;
    for (const auto& s : sel) {
      auto q = to_vec(s.query);
      for (auto i : s.indices) want += 1.0 - testutil::cosine_oracle(&keys[i * 6], q.data(), 6);
    }
    EXPECT_NEAR(got, want / 2.0, 1e-12);

    ParameterList params{{"x1", x1}, {"x2", x2}};
    pool.collect(params, "pool");
    auto f = [&] {
      std::vector<SelectionResult> s{select_prompts(pool, query_fn(x1, 6), 3), select_prompts(pool, query_fn(x2, 6), 3)};
      return surrogate_loss(s);
    };
    auto report = fd_check(f, params, 1e-5, 1e-5);
    EXPECT_TRUE(report.passed) << report.max_rel_error;
  }
}

TEST(SurrogateLoss, UnselectedKeysGetExactlyZeroGradient) {
  PromptPool pool = make_pool(16, 5, 2, 3);
  Rng rng(5);
  Tensor x = random_tensor(rng, {4, 5});
  Tape::current().clear();
  pool.keys().zero_grad();
  auto sel = select_prompts(pool, query_fn(x, 5), 3);
  backward(surrogate_loss(std::vector<SelectionResult>{sel}));
  const auto g = pool.keys().grad();
  for (std::size_t i = 0; i < 16; ++i) {
    const bool chosen = std::find(sel.indices.begin(), sel.indices.end(), i) != sel.indices.end();
    double mag = 0.0;
    for (std::size_t j = 0; j < 5; ++j) mag += std::abs(g[i * 5 + j]);
    if (chosen) {
      EXPECT_GT(mag, 0.0) << i;
    } else {
      EXPECT_EQ(mag, 0.0) << i;
    }
  }
}

TEST(SurrogateLoss, GradientStepsDoNotIncreaseLoss) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    PromptPool pool = make_pool(20, 6, 2, seed);
    Rng rng(seed + 50);
    std::vector<Tensor> queries;
    for (int i = 0; i < 4; ++i) queries.push_back(random_tensor(rng, {6}));
    auto loss_of = [&] {
      std::vector<SelectionResult> s;
      for (const auto& q : queries) s.push_back(select_prompts(pool, q, 3));
      return surrogate_loss(s);
    };
    auto value = [&] {
      NoGradGuard ng;
      return loss_of().item();
    };
    double prev = value();
    for (int step = 0; step < 10; ++step) {
      Tape::current().clear();
      pool.keys().zero_grad();
      backward(loss_of());
      auto k = pool.keys().mutable_data();
      auto g = pool.keys().grad();
      for (std::size_t i = 0; i < k.size(); ++i) k[i] -= 1e-3 * g[i];
      const double now = value();
      EXPECT_LE(now, prev) << "seed " << seed << " step " << step;
      prev = now;
    }
  }
}

TEST(AssemblePromptTokens, ShapeRoleAndGatherOracle) {
  PromptPool small = make_pool(4, 3, 2, 9);
  auto sel1 = select_prompts(small, Tensor({3}, {1, 0, 0}), 1);
  EXPECT_EQ(assemble_prompt_tokens(sel1, small, PromptRole::as_visual_context).shape(), (Shape{2, 3}));

  PromptPool pool = make_pool(10, 5, 4, 2);
  Rng rng(6);
  Tensor q = random_tensor(rng, {5});
  auto sel = select_prompts(pool, q, 3);
  for (double& v : pool.role(PromptRole::as_textual_context).mutable_data()) v = 0.0;
  Tensor raw = assemble_prompt_tokens(sel, pool, PromptRole::as_textual_context);
  auto values = to_vec(pool.values());
  std::vector<double> gathered;
  for (auto i : sel.indices) gathered.insert(gathered.end(), values.begin() + i * 20, values.begin() + (i + 1) * 20);
  EXPECT_EQ(to_vec(raw), gathered);

  auto role = to_vec(pool.role(PromptRole::as_visual_context));
  Tensor tagged = assemble_prompt_tokens(sel, pool, PromptRole::as_visual_context);
  auto t = to_vec(tagged);
  EXPECT_EQ(tagged.shape(), (Shape{12, 5}));
  for (std::size_t r = 0; r < 12; ++r)
    for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(t[r * 5 + j], gathered[r * 5 + j] + role[j], 1e-12);
}

TEST(AssemblePromptTokens, ForeignSelectionIsIntegrityError) {
  PromptPool a = make_pool(6, 3, 2, 1);
  PromptPool b = make_pool(8, 3, 2, 2);
  auto sel = select_prompts(a, Tensor({3}, {1, 2, 3}), 2);
  EXPECT_THROW(assemble_prompt_tokens(sel, b, PromptRole::as_visual_context), IntegrityError);
  SelectionResult stale = sel;
  stale.indices[0] = 99;
  EXPECT_THROW(assemble_prompt_tokens(stale, a, PromptRole::as_visual_context), IntegrityError);
}
