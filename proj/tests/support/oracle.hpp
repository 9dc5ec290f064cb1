#pragma once

// Brute-force references the library is compared against.
// Deliberately naive: full sorts over every row, no shared helpers with src/.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "stgl/geodata.hpp"
#include "stgl/rng.hpp"

namespace stgl::oracle {

struct Db {
    int dim = 0;
    std::vector<std::vector<float>> rows;
    std::vector<Vec2> pos;
    std::vector<std::int64_t> ids;
};

struct Hit {
    std::int64_t id;
    Vec2 pos;
    double dist;
};

inline double dist(const std::vector<float>& a, const std::vector<float>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (double(a[i]) - double(b[i])) * (double(a[i]) - double(b[i]));
    return std::sqrt(s);
}

inline std::vector<Hit> ranked(const Db& db, const std::vector<float>& q, int k, std::optional<Vec2> center = {},
                               double radius = 0.0) {
    std::vector<Hit> all;
    for (std::size_t i = 0; i < db.rows.size(); ++i) {
        if (center && std::hypot(db.pos[i].x - center->x, db.pos[i].y - center->y) > radius) continue;
        all.push_back({db.ids[i], db.pos[i], dist(q, db.rows[i])});
    }
    std::sort(all.begin(), all.end(), [](const Hit& a, const Hit& b) {
        if (a.dist < b.dist) return true;
        if (b.dist < a.dist) return false;
        return a.id < b.id;
    });
    if (static_cast<int>(all.size()) > k) all.resize(k);
    return all;
}

inline double recall(const std::vector<std::vector<Hit>>& res, const std::vector<Vec2>& truth, int n,
                     double radius = 50.0) {
    if (res.empty()) return 0.0;
    int hits = 0;
    for (std::size_t q = 0; q < res.size(); ++q) {
        bool ok = false;
        for (int r = 0; r < n && r < static_cast<int>(res[q].size()); ++r)
            ok = ok || std::hypot(res[q][r].pos.x - truth[q].x, res[q][r].pos.y - truth[q].y) <= radius;
        hits += ok;
    }
    return 100.0 * hits / res.size();
}

inline std::vector<float> random_unit(Rng& rng, int dim) {
    std::vector<float> v(dim);
    double n = 0.0;
    for (auto& x : v) {
        x = static_cast<float>(rng.normal());
        n += double(x) * x;
    }
    n = std::sqrt(n);
    for (auto& x : v) x = static_cast<float>(x / n);
    return v;
}

} // namespace stgl::oracle
