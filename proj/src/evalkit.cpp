#include "stgl/evalkit.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <chrono>
#include <fstream>
#include <limits>
#include <numeric>

#include "stgl/error.hpp"
#include "stgl/image.hpp"

namespace stgl {

namespace {

void check_pairing(std::size_t results, std::size_t truths) {
    if (results != truths) {
        throw InputError("evaluation: " + std::to_string(results) + " results for " + std::to_string(truths) +
                         " ground-truth positions");
    }
}

} // namespace

double recall_at_n(const std::vector<RetrievalResult>& results, const std::vector<Vec2>& truths, int n,
                   double success_radius_m) {
    if (n < 1) throw InputError("recall_at_n: n must be >= 1");
    check_pairing(results.size(), truths.size());
    if (results.empty()) return 0.0;
    std::size_t hits = 0;
    for (std::size_t q = 0; q < results.size(); ++q) {
        const auto& nb = results[q].neighbors;
        const std::size_t top = std::min(nb.size(), static_cast<std::size_t>(n));
        hits += std::any_of(nb.begin(), nb.begin() + top,
                            [&](const Neighbor& x) { return distance(x.position, truths[q]) <= success_radius_m; });
    }
    return 100.0 * static_cast<double>(hits) / static_cast<double>(results.size());
}

std::vector<RetrievalResult> prior_results(const DescriptorIndex& index, const std::vector<sgm::Descriptor>& queries,
                                           const std::vector<Vec2>& truths, int k, double d_m) {
    check_pairing(queries.size(), truths.size());
    std::vector<RetrievalResult> out;
    out.reserve(queries.size());
    for (std::size_t q = 0; q < queries.size(); ++q) out.push_back(knn_within(index, queries[q].values, k, truths[q], d_m));
    return out;
}

double recall_prior(const DescriptorIndex& index, const std::vector<sgm::Descriptor>& queries,
                    const std::vector<Vec2>& truths, int n, double d_m, int* skipped) {
    const auto results = prior_results(index, queries, truths, n, d_m);
    if (skipped) *skipped = static_cast<int>(std::count_if(results.begin(), results.end(),
                                                             [](const RetrievalResult& r) { return r.empty_prior; }));
    return recall_at_n(results, truths, n);
}

L2Error l2_error_from_results(const std::vector<RetrievalResult>& results, const std::vector<Vec2>& truths) {
    check_pairing(results.size(), truths.size());
    L2Error e;
    for (std::size_t q = 0; q < results.size(); ++q) {
        if (results[q].neighbors.empty()) {
            ++e.skipped;
            continue;
        }
        e.per_query.push_back(distance(results[q].neighbors.front().position, truths[q]));
    }
    if (!e.per_query.empty()) {
        e.mean = std::accumulate(e.per_query.begin(), e.per_query.end(), 0.0) / static_cast<double>(e.per_query.size());
    }
    return e;
}

L2Error l2_error_prior(const DescriptorIndex& index, const std::vector<sgm::Descriptor>& queries,
                       const std::vector<Vec2>& truths, double d_m) {
    return l2_error_from_results(prior_results(index, queries, truths, 1, d_m), truths);
}

std::size_t Histogram::total() const { return std::accumulate(counts.begin(), counts.end(), overflow); }

Histogram error_histogram(const std::vector<double>& errors, const std::vector<double>& edges) {
    if (edges.size() < 2) throw InputError("error_histogram: need at least two bin edges");
    for (std::size_t i = 1; i < edges.size(); ++i) {
        if (!(edges[i] > edges[i - 1])) throw InputError("error_histogram: bin edges must be strictly increasing");
    }
    Histogram h{edges, std::vector<std::size_t>(edges.size() - 1, 0), 0};
    for (double e : errors) {
        if (!(e < edges.back())) {
            ++h.overflow;
            continue;
        }
        const auto it = std::upper_bound(edges.begin(), edges.end(), e);
        const std::size_t bin = it == edges.begin() ? 0 : static_cast<std::size_t>(it - edges.begin()) - 1;
        ++h.counts[bin];
    }
    return h;
}

EvalReport evaluate(const DescriptorIndex& index, const std::vector<sgm::Descriptor>& queries,
                    const std::vector<Vec2>& truths, const std::vector<int>& ns, const std::vector<int>& prior_radii) {
    check_pairing(queries.size(), truths.size());
    if (ns.empty()) throw InputError("evaluate: no recall cut-offs");
    EvalReport rep;
    rep.queries = static_cast<int>(queries.size());
    const int kmax = *std::max_element(ns.begin(), ns.end());

    const auto t0 = std::chrono::steady_clock::now();
    std::vector<RetrievalResult> global;
    global.reserve(queries.size());
    for (const auto& q : queries) global.push_back(knn(index, q.values, kmax));
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    rep.match_ms_per_query = queries.empty() ? 0.0 : ms / static_cast<double>(queries.size());
    for (int n : ns) rep.r_at[n] = recall_at_n(global, truths, n);

    for (std::size_t i = 0; i < prior_radii.size(); ++i) {
        const int d = prior_radii[i];
        const auto prior = prior_results(index, queries, truths, kmax, d);
        for (int n : ns) rep.r_prior_at[{d, n}] = recall_at_n(prior, truths, n);
        const auto l2 = l2_error_from_results(prior, truths);
        rep.l2_prior[d] = l2.mean;
        if (i == 0) {
            rep.per_query_errors = l2.per_query;
            rep.skipped = l2.skipped;
        }
    }
    return rep;
}

std::string format_table(const std::vector<EvalReport>& rows) {
    if (rows.empty()) return {};
    const auto& first = rows.front();
    std::vector<std::string> heads{"setting"};
    for (const auto& [n, v] : first.r_at) heads.push_back(fmt::format("R@{}", n));
    for (const auto& [key, v] : first.r_prior_at) heads.push_back(fmt::format("R_{}@{}", key.first, key.second));
    for (const auto& [d, v] : first.l2_prior) heads.push_back(fmt::format("L2^{} (m)", d));
    heads.push_back("queries");
    heads.push_back("skipped");

    std::vector<std::vector<std::string>> cells{heads};
    for (const auto& r : rows) {
        std::vector<std::string> c{r.label.empty() ? "-" : r.label};
        for (const auto& [n, v] : r.r_at) c.push_back(fmt::format("{:.1f}", v));
        for (const auto& [k, v] : r.r_prior_at) c.push_back(fmt::format("{:.1f}", v));
        for (const auto& [d, v] : r.l2_prior) c.push_back(fmt::format("{:.1f}", v));
        c.push_back(std::to_string(r.queries));
        c.push_back(std::to_string(r.skipped));
        cells.push_back(std::move(c));
    }
    std::vector<std::size_t> width(heads.size(), 0);
    for (const auto& row : cells)
        for (std::size_t i = 0; i < row.size() && i < width.size(); ++i) width[i] = std::max(width[i], row[i].size());
    std::string out;
    for (std::size_t r = 0; r < cells.size(); ++r) {
        for (std::size_t i = 0; i < cells[r].size() && i < width.size(); ++i) {
            out += i == 0 ? fmt::format("{:<{}}", cells[r][i], width[i]) : fmt::format("  {:>{}}", cells[r][i], width[i]);
        }
        out += '\n';
        if (r == 0) {
            std::size_t total = 0;
            for (auto w : width) total += w + 2;
            out += std::string(total - 2, '-') + '\n';
        }
    }
    return out;
}

void write_report_kv(const std::filesystem::path& path, const EvalReport& r) {
    std::ofstream out(path);
    if (!out) throw FormatError("cannot write report " + path.string());
    out << "label = " << r.label << '\n' << "queries = " << r.queries << '\n' << "skipped = " << r.skipped << '\n';
    for (const auto& [n, v] : r.r_at) out << fmt::format("R@{} = {:.6f}\n", n, v);
    for (const auto& [k, v] : r.r_prior_at) out << fmt::format("R_{}@{} = {:.6f}\n", k.first, k.second, v);
    for (const auto& [d, v] : r.l2_prior) out << fmt::format("L2^{} = {:.6f}\n", d, v);
    out << fmt::format("embed_ms_per_query = {:.4f}\n", r.embed_ms_per_query);
    out << fmt::format("match_ms_per_query = {:.4f}\n", r.match_ms_per_query);
    out << "config = " << r.config.dump() << '\n';
}

void write_histogram_csv(const std::filesystem::path& path, const Histogram& h) {
    std::ofstream out(path);
    if (!out) throw FormatError("cannot write histogram " + path.string());
    out << "bin_edge,count\n";
    for (std::size_t i = 0; i < h.counts.size(); ++i) out << fmt::format("{},{}\n", h.edges[i], h.counts[i]);
    out << fmt::format("{},{}\n", h.edges.back(), h.overflow);
}

void render_histogram_ppm(const std::filesystem::path& path, const Histogram& h, int width, int height) {
    Image img(3, height, width, 1.0);
    std::vector<std::size_t> bars = h.counts;
    bars.push_back(h.overflow);
    const std::size_t peak = std::max<std::size_t>(1, *std::max_element(bars.begin(), bars.end()));
    const int slot = std::max(1, width / static_cast<int>(bars.size()));
    for (std::size_t b = 0; b < bars.size(); ++b) {
        const int bar_h = static_cast<int>(std::lround((height - 4) * static_cast<double>(bars[b]) / peak));
        const bool overflow = b + 1 == bars.size();
        for (int x = static_cast<int>(b) * slot + 1; x < std::min(width, (static_cast<int>(b) + 1) * slot - 1); ++x) {
            for (int y = height - bar_h; y < height; ++y) {
                img.at(0, y, x) = overflow ? 0.80 : 0.25;
                img.at(1, y, x) = overflow ? 0.30 : 0.45;
                img.at(2, y, x) = overflow ? 0.25 : 0.75;
            }
        }
    }
    write_pnm(path, img, 8);
}

} // namespace stgl
