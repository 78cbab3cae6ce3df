#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "spectraseg/common.hpp"

namespace spectraseg {

enum class RankDirection { Maximize, Minimize };

// dsc / nsd rank descending, asd ascending.
RankDirection direction_for_metric(const std::string& metric);

// One metric value per test subject. All algorithms entering a comparison
// share the same subject order.
struct AlgorithmScores {
    std::string algorithm; // "<kind>#<modality>"
    std::vector<double> per_subject;
};

// Fractional ranks, 1 = best; tied values share the mean of their positions.
std::vector<double> rank_scores(const std::vector<double>& values, RankDirection dir);

struct RankSummary {
    std::string algorithm;
    std::vector<double> sample_ranks; // one per bootstrap sample
    double median = 0.0;
    double lo = 0.0; // 2.5th percentile (nearest rank)
    double hi = 0.0; // 97.5th percentile

    // (rank, frequency) pairs sorted by rank; frequencies sum to the sample
    // count. Tied ranks are fractional, so the axis is not always integral.
    std::vector<std::pair<double, int64_t>> histogram() const;
};

struct RankingTable {
    std::vector<RankSummary> rows; // input algorithm order
    int sample_size = 0;
};

// Subject indices drawn with replacement, one derived rng stream per sample
// so the set is reproducible regardless of evaluation order.
std::vector<std::vector<int>> draw_bootstrap_samples(int n_subjects, int n_boot, int sample_size,
                                                     uint64_t seed);

// Per sample: mean score over the drawn subjects per algorithm, then rank.
RankingTable bootstrap_ranks(const std::vector<AlgorithmScores>& scores,
                             const std::vector<std::vector<int>>& samples, RankDirection dir);
RankingTable bootstrap_ranks(const std::vector<AlgorithmScores>& scores, int n_boot,
                             int sample_size, uint64_t seed, RankDirection dir);

// --- deterministic cross-metric ranking ------------------------------------------

struct MetricBlock {
    std::string metric;
    RankDirection direction = RankDirection::Maximize;
    std::vector<AlgorithmScores> scores; // same algorithms in the same order
};

struct CrossMetricRanks {
    std::vector<std::string> algorithms;
    std::vector<std::string> metrics;
    std::vector<std::vector<double>> ranks; // [metric][algorithm]
};

// Mean over subjects per algorithm, then rank within each metric with that
// metric's direction. Requires a complete, finite score matrix.
CrossMetricRanks mean_then_rank(const std::vector<MetricBlock>& blocks);

// --- report data ------------------------------------------------------------------

// "algorithm,rank,frequency" rows (blob-plot data).
void write_rank_histogram_csv(const RankingTable& table, const std::filesystem::path& path);

// "metric,algorithm,rank" rows (line-plot data).
void write_cross_metric_csv(const CrossMetricRanks& cm, const std::filesystem::path& path);

} // namespace spectraseg
