#pragma once

#include <map>
#include <string>
#include <vector>

#include "fundus/errors.hpp"
#include "fundus/rng.hpp"

namespace fundus {

/// Partition of ids into k validation folds.
struct FoldPlan {
  std::size_t k = 0;
  std::uint64_t seed = 0;
  std::map<std::string, std::size_t> assignments;

  std::size_t fold_of(const std::string& id) const {
    auto it = assignments.find(id);
    if (it == assignments.end()) throw DataError("fold plan has no id '" + id + "'");
    return it->second;
  }

  /// Ids in fold f, in the order of `ids`.
  std::vector<std::string> validation(std::size_t f, const std::vector<std::string>& ids) const {
    std::vector<std::string> out;
    for (const auto& id : ids)
      if (fold_of(id) == f) out.push_back(id);
    return out;
  }
  std::vector<std::string> training(std::size_t f, const std::vector<std::string>& ids) const {
    std::vector<std::string> out;
    for (const auto& id : ids)
      if (fold_of(id) != f) out.push_back(id);
    return out;
  }
};

/// Fisher-Yates shuffle under the seed, then round-robin assignment.
inline FoldPlan make_folds(const std::vector<std::string>& ids, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("make_folds: k must be at least 2");
  if (ids.size() < k) throw DataError("make_folds: " + std::to_string(ids.size()) + " ids cannot fill " + std::to_string(k) + " folds");
  std::vector<std::string> order = ids;
  Rng rng = derive_rng(seed, "folds");
  for (std::size_t i = order.size(); i-- > 1;) std::swap(order[i], order[rng() % (i + 1)]);
  FoldPlan plan{k, seed, {}};
  for (std::size_t i = 0; i < order.size(); ++i)
    if (!plan.assignments.emplace(order[i], i % k).second) throw DataError("make_folds: duplicate id '" + order[i] + "'");
  return plan;
}

}  // namespace fundus
