#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <numeric>
#include <vector>

#include "testutil.hpp"
#include "usdc/grouping.hpp"

using namespace usdc;
using testutil::rand_tensor;

namespace {

// Independent statement of the halving rule, written recursively: emit the
// larger half, recurse on the smaller, a lone sample is its own group.
void ref_split(int b, std::vector<int>& out) {
  if (b == 1) {
    out.push_back(1);
    return;
  }
  out.push_back(b - b / 2);
  ref_split(b / 2, out);
}

}  // namespace

TEST_CASE("recursive split pinned examples", "[grouping]") {
  REQUIRE(recursive_log2_split(1) == std::vector<int>{1});
  REQUIRE(recursive_log2_split(6) == std::vector<int>{3, 2, 1});
  REQUIRE(recursive_log2_split(8) == std::vector<int>{4, 2, 1, 1});
  REQUIRE(recursive_log2_split(16) == std::vector<int>{8, 4, 2, 1, 1});
  REQUIRE(recursive_log2_split(2) == std::vector<int>{1, 1});
  REQUIRE_THROWS_AS(recursive_log2_split(0), ValueError);
  REQUIRE_THROWS_AS(recursive_log2_split(-3), ValueError);
}

TEST_CASE("recursive split matches the rule enumeration for B=1..200", "[grouping]") {
  for (int b = 1; b <= 200; ++b) {
    std::vector<int> expect;
    ref_split(b, expect);
    auto got = recursive_log2_split(b);
    REQUIRE(got == expect);
    REQUIRE(std::accumulate(got.begin(), got.end(), 0) == b);
    for (size_t i = 0; i < got.size(); ++i) {
      REQUIRE(got[i] >= 1);
      if (i > 0) REQUIRE(got[i] <= got[i - 1]);
    }
  }
}

TEST_CASE("build_plan fixed strategies", "[grouping]") {
  RngState rng(1);
  auto batch = build_plan(32, GroupStrategy::Batch, rng);
  REQUIRE(batch.group_sizes == std::vector<int>{32});
  std::vector<int> identity(32);
  std::iota(identity.begin(), identity.end(), 0);
  REQUIRE(batch.permutation == identity);

  auto sample = build_plan(3, GroupStrategy::Sample, rng);
  REQUIRE(sample.group_sizes == std::vector<int>{1, 1, 1});
  REQUIRE(sample.permutation == std::vector<int>{0, 1, 2});

  auto avg = build_plan(20, GroupStrategy::GroupAvgK, rng, 8);
  REQUIRE(avg.group_sizes == std::vector<int>{8, 8, 4});
  REQUIRE_THROWS_AS(build_plan(20, GroupStrategy::GroupAvgK, rng, 0), ValueError);
  REQUIRE_THROWS_AS(build_plan(0, GroupStrategy::Batch, rng), ValueError);
}

TEST_CASE("build_plan random strategies are valid partitions", "[grouping]") {
  RngState rng(2);
  RngState pick(3);
  for (int trial = 0; trial < 50; ++trial) {
    const int b = 1 + static_cast<int>(pick.uniform_int(150));
    const auto strategy = trial % 2 == 0 ? GroupStrategy::GroupRecursive : GroupStrategy::GroupRandom;
    auto plan = build_plan(b, strategy, rng);
    REQUIRE_NOTHROW(plan.validate());
    REQUIRE(plan.batch() == b);
    if (strategy == GroupStrategy::GroupRandom) {
      for (int n : plan.group_sizes) {
        REQUIRE(n >= 1);
        REQUIRE(n <= 64);
      }
    }
  }
}

TEST_CASE("build_plan is deterministic given the rng state", "[grouping]") {
  RngState a(7), b(7);
  auto pa = build_plan(33, GroupStrategy::GroupRecursive, a);
  auto pb = build_plan(33, GroupStrategy::GroupRecursive, b);
  REQUIRE(pa.permutation == pb.permutation);
  REQUIRE(pa.group_sizes == pb.group_sizes);
  // and the shuffle really permutes: different seed, (almost surely) different order
  RngState c(8);
  auto pc = build_plan(33, GroupStrategy::GroupRecursive, c);
  REQUIRE(pc.permutation != pa.permutation);
}

TEST_CASE("apply_plan with one group writes the column mean everywhere", "[grouping]") {
  RngState rng(4);
  auto x = rand_tensor({6, 4}, rng);
  RngState prng(5);
  auto out = apply_plan(x, build_plan(6, GroupStrategy::Batch, prng));
  for (int j = 0; j < 4; ++j) {
    double m = 0;
    for (int i = 0; i < 6; ++i) m += x.value()[static_cast<size_t>(i * 4 + j)];
    m /= 6;
    for (int i = 0; i < 6; ++i) {
      REQUIRE(out.value()[static_cast<size_t>(i * 4 + j)] == Catch::Approx(m).epsilon(1e-12));
    }
  }
}

TEST_CASE("apply_plan with singleton groups is the identity", "[grouping]") {
  RngState rng(6);
  auto x = rand_tensor({5, 4}, rng);
  RngState prng(7);
  auto out = apply_plan(x, build_plan(5, GroupStrategy::Sample, prng));
  REQUIRE(out.value() == x.value());
}

TEST_CASE("apply_plan leaves constant groups unchanged", "[grouping]") {
  Tensor<double> x({4, 2});
  const double a0 = 0.3, a1 = -1.7, b0 = 2.5, b1 = 0.1;
  x.value() = {a0, a1, a0, a1, b0, b1, b0, b1};
  GroupPlan plan;
  plan.permutation = {0, 1, 2, 3};
  plan.group_sizes = {2, 2};
  auto out = apply_plan(x, plan);
  REQUIRE(out.value() == x.value());  // mean of two equal rows is exact
}

TEST_CASE("apply_plan is idempotent and preserves the batch mean", "[grouping]") {
  RngState rng(8);
  RngState prng(9);
  RngState pick(10);
  for (int trial = 0; trial < 30; ++trial) {
    const int b = 1 + static_cast<int>(pick.uniform_int(40));
    auto x = rand_tensor({b, 4}, rng);
    auto plan = build_plan(b, trial % 2 == 0 ? GroupStrategy::GroupRecursive : GroupStrategy::GroupRandom,
                           prng);
    auto once = apply_plan(x, plan);
    auto twice = apply_plan(once, plan);
    for (size_t i = 0; i < once.value().size(); ++i) {
      REQUIRE(twice.value()[i] == Catch::Approx(once.value()[i]).margin(1e-13));
    }
    for (int j = 0; j < 4; ++j) {
      double before = 0, after = 0;
      for (int i = 0; i < b; ++i) {
        before += x.value()[static_cast<size_t>(i * 4 + j)];
        after += once.value()[static_cast<size_t>(i * 4 + j)];
      }
      REQUIRE(after / b == Catch::Approx(before / b).margin(1e-13));
    }
  }
}

TEST_CASE("apply_plan groups agree row-wise under shuffled permutations", "[grouping]") {
  RngState rng(11);
  auto x = rand_tensor({13, 4}, rng);
  RngState prng(12);
  auto plan = build_plan(13, GroupStrategy::GroupRecursive, prng);
  auto out = apply_plan(x, plan);
  size_t start = 0;
  for (int n : plan.group_sizes) {
    const int lead = plan.permutation[start];
    for (int i = 1; i < n; ++i) {
      const int member = plan.permutation[start + static_cast<size_t>(i)];
      for (int j = 0; j < 4; ++j) {
        REQUIRE(out.value()[static_cast<size_t>(member * 4 + j)] ==
                out.value()[static_cast<size_t>(lead * 4 + j)]);
      }
    }
    start += static_cast<size_t>(n);
  }
}

TEST_CASE("apply_plan rejects mismatched plans and shapes", "[grouping]") {
  RngState prng(13);
  auto plan = build_plan(8, GroupStrategy::GroupRecursive, prng);
  REQUIRE_THROWS_AS(apply_plan(Tensor<double>::zeros({9, 4}), plan), ShapeError);
  REQUIRE_THROWS_AS(apply_plan(Tensor<double>::zeros({8}), plan), ShapeError);
  GroupPlan broken = plan;
  broken.group_sizes.back() += 1;
  REQUIRE_THROWS_AS(apply_plan(Tensor<double>::zeros({8, 4}), broken), ValueError);
  GroupPlan twisted = plan;
  twisted.permutation[0] = twisted.permutation[1];
  REQUIRE_THROWS_AS(apply_plan(Tensor<double>::zeros({8, 4}), twisted), ValueError);
}

TEST_CASE("apply_plan gradient spreads uniformly over each group", "[grouping]") {
  RngState rng(14);
  auto x = rand_tensor({11, 4}, rng);
  RngState prng(15);
  auto plan = build_plan(11, GroupStrategy::GroupRecursive, prng);

  // ones oracle: the group means recombine each sample with total weight 1
  x.set_requires_grad(true);
  x.zero_grad();
  {
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    auto loss = sum(apply_plan(x, plan));
    tape.backward(loss);
  }
  for (double g : x.grad()) REQUIRE(g == Catch::Approx(1.0).margin(1e-12));

  // full finite-difference check through a weighted loss
  auto w = rand_tensor({11, 4}, rng);
  auto rep = testutil::fd_check([&] { return sum(mul(apply_plan(x, plan), w)); }, {&x});
  REQUIRE(rep.max_rel_err < 1e-6);
}
