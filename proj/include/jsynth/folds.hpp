#pragma once

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "jsynth/common.hpp"
#include "jsynth/rng.hpp"

namespace jsynth {

struct FoldPlan {
    int fold = 0;
    std::vector<std::string> train_ids, val_ids, test_ids;
};

// Seeded shuffle, contiguous test blocks, per-fold seeded validation draw from
// the remainder. Every id lands in exactly one test set.
inline std::vector<FoldPlan> plan_folds(std::vector<std::string> ids, int n_folds, int n_test,
                                        int n_val, std::uint64_t seed) {
    const auto total = static_cast<Dim>(ids.size());
    if (n_folds < 1 || n_test < 1)
        throw ConfigError(detail::msg("plan_folds: n_folds ", n_folds, " / n_test ", n_test,
                                      " must be >= 1"));
    if (static_cast<Dim>(n_folds) * n_test != total)
        throw ConfigError(detail::msg("plan_folds: n_folds * n_test = ", n_folds * n_test,
                                      " != cohort size ", total));
    if (n_val < 1 || static_cast<Dim>(n_val) >= total - n_test)
        throw ConfigError(detail::msg("plan_folds: n_val ", n_val, " must be in [1, ",
                                      total - n_test, ")"));

    Rng rng(derive_seed(seed, "folds"));
    rng.shuffle(ids);

    std::vector<FoldPlan> plans;
    for (int fold = 0; fold < n_folds; ++fold) {
        FoldPlan plan;
        plan.fold = fold;
        const auto begin = static_cast<std::size_t>(fold) * static_cast<std::size_t>(n_test);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (i >= begin && i < begin + static_cast<std::size_t>(n_test))
                plan.test_ids.push_back(ids[i]);
            else
                plan.train_ids.push_back(ids[i]);  // provisional: val drawn below
        }
        std::vector<std::string>& rest = plan.train_ids;
        for (int v = 0; v < n_val; ++v) {
            const auto j = static_cast<std::size_t>(
                rng.uniform_int(v, static_cast<std::int64_t>(rest.size()) - 1));
            std::swap(rest[static_cast<std::size_t>(v)], rest[j]);
        }
        plan.val_ids.assign(rest.begin(), rest.begin() + n_val);
        rest.erase(rest.begin(), rest.begin() + n_val);
        plans.push_back(std::move(plan));
    }
    return plans;
}

// plain-text serialization: one `fold,role,subject_id` line per membership
inline std::string fold_plans_to_text(const std::vector<FoldPlan>& plans) {
    std::ostringstream os;
    for (const auto& plan : plans) {
        for (const auto& id : plan.train_ids) os << plan.fold << ",train," << id << "\n";
        for (const auto& id : plan.val_ids) os << plan.fold << ",val," << id << "\n";
        for (const auto& id : plan.test_ids) os << plan.fold << ",test," << id << "\n";
    }
    return os.str();
}

inline std::vector<FoldPlan> fold_plans_from_text(const std::string& text) {
    std::vector<FoldPlan> plans;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto c1 = line.find(',');
        const auto c2 = line.find(',', c1 + 1);
        if (c1 == std::string::npos || c2 == std::string::npos)
            throw DataError(detail::msg("fold plan: malformed line '", line, "'"));
        const int fold = std::stoi(line.substr(0, c1));
        const std::string role = line.substr(c1 + 1, c2 - c1 - 1);
        const std::string id = line.substr(c2 + 1);
        if (fold < 0) throw DataError("fold plan: negative fold index");
        if (plans.size() <= static_cast<std::size_t>(fold))
            plans.resize(static_cast<std::size_t>(fold) + 1);
        auto& plan = plans[static_cast<std::size_t>(fold)];
        plan.fold = fold;
        if (role == "train")
            plan.train_ids.push_back(id);
        else if (role == "val")
            plan.val_ids.push_back(id);
        else if (role == "test")
            plan.test_ids.push_back(id);
        else
            throw DataError(detail::msg("fold plan: unknown role '", role, "'"));
    }
    return plans;
}

inline void write_fold_plans(const std::vector<FoldPlan>& plans, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError(detail::msg("cannot open '", path, "' for writing"));
    f << fold_plans_to_text(plans);
}

// sanity of an arbitrary plan set against a cohort: disjoint roles per fold,
// full coverage per fold, and exactly one test appearance overall
inline void check_fold_plans(const std::vector<FoldPlan>& plans,
                             const std::vector<std::string>& cohort) {
    std::set<std::string> all(cohort.begin(), cohort.end());
    std::multiset<std::string> tested;
    for (const auto& plan : plans) {
        std::set<std::string> seen;
        const auto add = [&](const std::vector<std::string>& ids, const char* role) {
            for (const auto& id : ids) {
                if (!all.count(id))
                    throw DataError(detail::msg("fold ", plan.fold, ": unknown id '", id, "'"));
                if (!seen.insert(id).second)
                    throw DataError(detail::msg("fold ", plan.fold, ": id '", id,
                                                "' appears in two roles (", role, ")"));
            }
        };
        add(plan.train_ids, "train");
        add(plan.val_ids, "val");
        add(plan.test_ids, "test");
        if (seen.size() != all.size())
            throw DataError(detail::msg("fold ", plan.fold, ": covers ", seen.size(), " of ",
                                        all.size(), " subjects"));
        for (const auto& id : plan.test_ids) tested.insert(id);
    }
    for (const auto& id : all)
        if (tested.count(id) != 1)
            throw DataError(detail::msg("id '", id, "' tested ", tested.count(id),
                                        " times across folds"));
}

}  // namespace jsynth
