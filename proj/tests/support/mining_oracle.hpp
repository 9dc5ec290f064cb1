#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "support/oracle.hpp"

namespace stgl::oracle {

struct Mined {
    std::int64_t positive;
    std::vector<std::int64_t> negatives;
};

// Exhaustive: rank every geo-valid candidate and take the head.
inline std::optional<Mined> mine(const Db& db, const std::vector<float>& q, const Vec2& qpos, double pos_r,
                                 double neg_r, int n_neg) {
    std::vector<Hit> pos, neg;
    for (std::size_t i = 0; i < db.rows.size(); ++i) {
        const double g = std::hypot(db.pos[i].x - qpos.x, db.pos[i].y - qpos.y);
        const Hit h{db.ids[i], db.pos[i], dist(q, db.rows[i])};
        if (g <= pos_r) pos.push_back(h);
        if (g > neg_r) neg.push_back(h);
    }
    if (pos.empty()) return std::nullopt;
    auto by = [](const Hit& a, const Hit& b) { return a.dist < b.dist || (a.dist == b.dist && a.id < b.id); };
    std::sort(pos.begin(), pos.end(), by);
    std::sort(neg.begin(), neg.end(), by);
    Mined m{pos.front().id, {}};
    for (int i = 0; i < n_neg && i < static_cast<int>(neg.size()); ++i) m.negatives.push_back(neg[i].id);
    return m;
}

} // namespace stgl::oracle
