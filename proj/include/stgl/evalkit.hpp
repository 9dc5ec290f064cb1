#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "stgl/retrieval.hpp"

namespace stgl {

inline constexpr double kSuccessRadiusM = 50.0;
inline constexpr double kPriorRadiusM = 512.0;

// Percentage of queries with at least one of the top-n within success_radius_m of truth.
double recall_at_n(const std::vector<RetrievalResult>& results, const std::vector<Vec2>& truths, int n,
                   double success_radius_m = kSuccessRadiusM);

// knn_within centred on each query's true position. Queries without any
// candidate in range have empty_prior set.
std::vector<RetrievalResult> prior_results(const DescriptorIndex& index, const std::vector<sgm::Descriptor>& queries,
                                           const std::vector<Vec2>& truths, int k, double d_m = kPriorRadiusM);

// Empty candidate sets count as failures; their number goes to *skipped.
double recall_prior(const DescriptorIndex& index, const std::vector<sgm::Descriptor>& queries,
                    const std::vector<Vec2>& truths, int n, double d_m = kPriorRadiusM, int* skipped = nullptr);

struct L2Error {
    double mean = 0.0;                // over evaluated queries; 0 when none
    std::vector<double> per_query;    // evaluated queries only, in query order
    int skipped = 0;
};

L2Error l2_error_from_results(const std::vector<RetrievalResult>& results, const std::vector<Vec2>& truths);
L2Error l2_error_prior(const DescriptorIndex& index, const std::vector<sgm::Descriptor>& queries,
                       const std::vector<Vec2>& truths, double d_m = kPriorRadiusM);

// Bins [e_i, e_{i+1}); values >= the last edge go to overflow, values below
// the first edge are counted in the first bin.
struct Histogram {
    std::vector<double> edges;
    std::vector<std::size_t> counts; // edges.size() - 1 entries
    std::size_t overflow = 0;
    std::size_t total() const;
};

Histogram error_histogram(const std::vector<double>& errors, const std::vector<double>& edges);

struct EvalReport {
    std::string label;
    int queries = 0;
    std::map<int, double> r_at;
    std::map<std::pair<int, int>, double> r_prior_at; // (d_m, N)
    std::map<int, double> l2_prior;                   // d_m -> mean meters
    std::vector<double> per_query_errors;             // at the first prior radius
    int skipped = 0;                                  // at the first prior radius
    double embed_ms_per_query = 0.0;
    double match_ms_per_query = 0.0;
    nlohmann::json config = nlohmann::json::object();
};

EvalReport evaluate(const DescriptorIndex& index, const std::vector<sgm::Descriptor>& queries,
                    const std::vector<Vec2>& truths, const std::vector<int>& ns = {1, 5},
                    const std::vector<int>& prior_radii = {512});

std::string format_table(const std::vector<EvalReport>& rows);
void write_report_kv(const std::filesystem::path& path, const EvalReport& report);
void write_histogram_csv(const std::filesystem::path& path, const Histogram& hist);
// Bar chart as a binary PPM, one bar per bin plus overflow.
void render_histogram_ppm(const std::filesystem::path& path, const Histogram& hist, int width = 480,
                          int height = 240);

} // namespace stgl
