#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "dataset.hpp"
#include "errors.hpp"
#include "rng.hpp"

namespace fedsim {

/// Pairwise-disjoint, non-empty index sets assigning samples to clients.
struct Partition {
    std::vector<std::vector<std::size_t>> shards;
    std::optional<double> alpha;

    std::size_t clients() const { return shards.size(); }
};

/// Round-robin assignment by sample index; shard sizes differ by at most one.
inline Partition partition_even(const Dataset& ds, std::size_t n_clients) {
    if (n_clients == 0 || n_clients > ds.size())
        throw TooManyClients("partition_even: " + std::to_string(n_clients) + " clients for " +
                             std::to_string(ds.size()) + " samples");
    Partition p;
    p.shards.resize(n_clients);
    for (std::size_t i = 0; i < ds.size(); ++i) p.shards[i % n_clients].push_back(i);
    return p;
}

/// Label-skew partition: for each class, proportions are drawn from
/// Dirichlet(alpha * 1_N) and the class's samples are split by largest
/// remainder. Each class uses an independent stream keyed by (seed, label),
/// so the result does not depend on class iteration order. Any empty shard
/// is repaired by moving one sample from the largest shard.
inline Partition partition_dirichlet(const Dataset& ds, std::size_t n_clients, double alpha,
                                     std::uint64_t seed) {
    if (!(alpha > 0.0) || !std::isfinite(alpha))
        throw InvalidAlpha("partition_dirichlet: alpha must be positive and finite");
    if (n_clients == 0 || n_clients > ds.size())
        throw TooManyClients("partition_dirichlet: " + std::to_string(n_clients) +
                             " clients for " + std::to_string(ds.size()) + " samples");

    Partition p;
    p.alpha = alpha;
    p.shards.resize(n_clients);
    if (n_clients == 1) {
        for (std::size_t i = 0; i < ds.size(); ++i) p.shards[0].push_back(i);
        return p;
    }

    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.labels[i]].push_back(i);

    for (const auto& [label, members] : by_class) {
        Rng rng(seed, {0xd1f, static_cast<std::uint64_t>(static_cast<std::int64_t>(label))});
        std::vector<double> props(n_clients);
        double total = 0.0;
        for (double& g : props) {
            g = rng.gamma(alpha);
            total += g;
        }
        if (!(total > 0.0)) {
            for (double& g : props) g = 1.0;
            total = static_cast<double>(n_clients);
        }
        for (double& g : props) g /= total;

        // Largest-remainder rounding of proportions to integer counts.
        const std::size_t m = members.size();
        std::vector<std::size_t> counts(n_clients);
        std::vector<std::pair<double, std::size_t>> rema(n_clients);
        std::size_t assigned = 0;
        for (std::size_t c = 0; c < n_clients; ++c) {
            double exact = props[c] * static_cast<double>(m);
            counts[c] = static_cast<std::size_t>(exact);
            rema[c] = {exact - static_cast<double>(counts[c]), c};
            assigned += counts[c];
        }
        std::sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        for (std::size_t k = 0; assigned < m; ++k, ++assigned) counts[rema[k % n_clients].second]++;

        std::size_t cursor = 0;
        for (std::size_t c = 0; c < n_clients; ++c)
            for (std::size_t k = 0; k < counts[c]; ++k) p.shards[c].push_back(members[cursor++]);
    }

    for (auto& shard : p.shards) std::sort(shard.begin(), shard.end());

    // Every client must hold data; move one sample out of the largest shard.
    for (std::size_t c = 0; c < n_clients; ++c) {
        if (!p.shards[c].empty()) continue;
        std::size_t donor = 0;
        for (std::size_t j = 1; j < n_clients; ++j)
            if (p.shards[j].size() > p.shards[donor].size()) donor = j;
        if (p.shards[donor].size() < 2)
            throw TooManyClients("partition_dirichlet: not enough samples to repair empty shards");
        p.shards[c].push_back(p.shards[donor].back());
        p.shards[donor].pop_back();
    }
    return p;
}

}  // namespace fedsim
