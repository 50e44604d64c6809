#pragma once

// Batch group plans for gate sharing: how the samples of a mini-batch are
// partitioned into groups that must agree on one skip decision. Sharing is
// what makes skipping batchable on real hardware — samples in a group take
// the same computational path — while small groups preserve per-sample
// adaptivity. The recursive power-of-two split mixes both regimes inside
// every batch.

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "usdc/rng.hpp"
#include "usdc/tensor.hpp"

namespace usdc {

enum class GroupStrategy {
  Sample,          // every sample decides alone (group size 1)
  Batch,           // whole batch shares one decision
  GroupRecursive,  // shuffled groups of sizes [⌈B/2⌉, ⌈B/4⌉, …, 1]
  GroupAvgK,       // shuffled groups of a fixed size k (last one truncated)
  GroupRandom,     // shuffled groups of i.i.d. sizes in [1,64], truncated
};

inline const char* group_strategy_name(GroupStrategy s) {
  switch (s) {
    case GroupStrategy::Sample: return "sample";
    case GroupStrategy::Batch: return "batch";
    case GroupStrategy::GroupRecursive: return "group-recursive";
    case GroupStrategy::GroupAvgK: return "group-avg-k";
    case GroupStrategy::GroupRandom: return "group-random";
  }
  return "?";
}

inline GroupStrategy parse_group_strategy(const std::string& name) {
  for (GroupStrategy s : {GroupStrategy::Sample, GroupStrategy::Batch, GroupStrategy::GroupRecursive,
                          GroupStrategy::GroupAvgK, GroupStrategy::GroupRandom}) {
    if (name == group_strategy_name(s)) return s;
  }
  throw ValueError("unknown group strategy '" + name + "'");
}

// A concrete partition of one mini-batch: `permutation` shuffles the sample
// indices, then consecutive runs of `group_sizes` form the groups.
struct GroupPlan {
  std::vector<int> permutation;
  std::vector<int> group_sizes;
  GroupStrategy strategy = GroupStrategy::Batch;

  int batch() const {
    return static_cast<int>(permutation.size());
  }

  void validate() const {
    std::vector<char> seen(permutation.size(), 0);
    for (int p : permutation) {
      if (p < 0 || p >= batch() || seen[static_cast<size_t>(p)]) {
        throw ValueError("group plan permutation is not a bijection");
      }
      seen[static_cast<size_t>(p)] = 1;
    }
    long long total = 0;
    for (int n : group_sizes) {
      if (n <= 0) throw ValueError("group plan has a non-positive group size");
      total += n;
    }
    if (total != batch()) {
      throw ValueError("group sizes sum to " + std::to_string(total) + ", batch is " +
                       std::to_string(batch()));
    }
  }
};

// Split B into groups by repeated halving: peel off the larger half, recurse
// on the rest, and emit the final singleton as its own group. A power-of-two
// batch gives [B/2, B/4, …, 2, 1, 1]; B=6 gives [3, 2, 1]. Every batch is
// covered by group sizes ranging from ~B/2 down to 1, so batch-like and
// per-sample gating are both rehearsed in each step.
inline std::vector<int> recursive_log2_split(int b) {
  if (b < 1) throw ValueError("recursive_log2_split: batch size must be positive");
  std::vector<int> sizes;
  int r = b;
  while (r > 1) {
    sizes.push_back((r + 1) / 2);
    r /= 2;
  }
  sizes.push_back(1);
  return sizes;
}

// Draw the plan used for one training step. Sample/batch strategies are
// deterministic (identity permutation); the group strategies shuffle.
inline GroupPlan build_plan(int b, GroupStrategy strategy, RngState& rng, int avg_k = 8) {
  if (b < 1) throw ValueError("build_plan: batch size must be positive");
  GroupPlan plan;
  plan.strategy = strategy;
  plan.permutation.resize(static_cast<size_t>(b));
  std::iota(plan.permutation.begin(), plan.permutation.end(), 0);
  switch (strategy) {
    case GroupStrategy::Sample:
      plan.group_sizes.assign(static_cast<size_t>(b), 1);
      break;
    case GroupStrategy::Batch:
      plan.group_sizes = {b};
      break;
    case GroupStrategy::GroupRecursive:
      plan.group_sizes = recursive_log2_split(b);
      rng.shuffle(plan.permutation.begin(), plan.permutation.end());
      break;
    case GroupStrategy::GroupAvgK: {
      if (avg_k < 1) throw ValueError("build_plan: fixed group size must be positive");
      for (int r = b; r > 0; r -= std::min(r, avg_k)) {
        plan.group_sizes.push_back(std::min(r, avg_k));
      }
      rng.shuffle(plan.permutation.begin(), plan.permutation.end());
      break;
    }
    case GroupStrategy::GroupRandom: {
      for (int r = b; r > 0;) {
        const int n = std::min(r, 1 + static_cast<int>(rng.uniform_int(64)));
        plan.group_sizes.push_back(n);
        r -= n;
      }
      rng.shuffle(plan.permutation.begin(), plan.permutation.end());
      break;
    }
  }
  return plan;
}

// Replace each sample's gate logits with the mean over its group, so every
// member of a group ends up with identical logits (and therefore identical
// skip decisions once sampled). Differentiable: the backward spreads each
// row's gradient uniformly over its group. Accumulation runs in double so
// group means are stable regardless of the tensor scalar type.
template <typename T>
Tensor<T> apply_plan(const Tensor<T>& logits, const GroupPlan& plan) {
  if (logits.rank() != 2) {
    throw ShapeError("apply_plan expects [batch, logits], got " + shape_str(logits.shape()));
  }
  plan.validate();
  const int b = logits.dim(0), c = logits.dim(1);
  if (plan.batch() != b) {
    throw ShapeError("group plan covers " + std::to_string(plan.batch()) + " samples, batch has " +
                     std::to_string(b));
  }
  Tensor<T> out(logits.shape());
  size_t start = 0;
  for (int n : plan.group_sizes) {
    for (int j = 0; j < c; ++j) {
      double acc = 0;
      for (int i = 0; i < n; ++i) {
        acc += logits.value()[static_cast<size_t>(plan.permutation[start + static_cast<size_t>(i)]) *
                                  static_cast<size_t>(c) +
                              static_cast<size_t>(j)];
      }
      const T m = static_cast<T>(acc / n);
      for (int i = 0; i < n; ++i) {
        out.value()[static_cast<size_t>(plan.permutation[start + static_cast<size_t>(i)]) *
                        static_cast<size_t>(c) +
                    static_cast<size_t>(j)] = m;
      }
    }
    start += static_cast<size_t>(n);
  }
  if (detail::track<T>({&logits})) {
    out.set_requires_grad(true);
    detail::record<T>([logits, out, plan]() mutable {
      const int cols = logits.dim(1);
      size_t first = 0;
      for (int n : plan.group_sizes) {
        for (int j = 0; j < cols; ++j) {
          double acc = 0;
          for (int i = 0; i < n; ++i) {
            acc += out.grad()[static_cast<size_t>(plan.permutation[first + static_cast<size_t>(i)]) *
                                  static_cast<size_t>(cols) +
                              static_cast<size_t>(j)];
          }
          const T m = static_cast<T>(acc / n);
          for (int i = 0; i < n; ++i) {
            logits.grad()[static_cast<size_t>(plan.permutation[first + static_cast<size_t>(i)]) *
                              static_cast<size_t>(cols) +
                          static_cast<size_t>(j)] += m;
          }
        }
        first += static_cast<size_t>(n);
      }
    });
  }
  return out;
}

}  // namespace usdc
