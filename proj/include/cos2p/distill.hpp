// Multi-exit classifier placement: one exit per federation depth budget that
// fits inside the client's window; the deepest exit teaches the others.
#pragma once

#include <algorithm>
#include <set>
#include <vector>

#include "cos2p/model.hpp"

namespace cos2p {

struct ExitSet {
    std::vector<size_t> depths;  // sorted ascending, all in (s, s+w]
    double lambda2 = 0.2;
    double temperature = 3.0;

    size_t teacher() const { return depths.back(); }
    size_t count() const { return depths.size(); }
};

// depths = { s + floor(L * r_i) : r_i <= r_n }, deduplicated and clipped to
// the window top.
inline ExitSet classifier_depths(const std::vector<double>& budget_set, double r_n,
                                 const DepthWindow& win, size_t L, double lambda2,
                                 double temperature) {
    require(!budget_set.empty(), "classifier_depths: empty budget set");
    require(temperature > 0.0, "classifier_depths: temperature must be positive");
    std::set<size_t> depths;
    for (double r : budget_set) {
        if (r > r_n + 1e-12) continue;
        const size_t w = static_cast<size_t>(std::floor(static_cast<double>(L) * r));
        if (w < 1) continue;
        depths.insert(std::min(win.frozen_end + w, win.train_end));
    }
    require(!depths.empty(), "classifier_depths: no exit fits the window");
    ExitSet e;
    e.depths.assign(depths.begin(), depths.end());
    e.lambda2 = lambda2;
    e.temperature = temperature;
    return e;
}

}  // namespace cos2p
