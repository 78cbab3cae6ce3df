#include "spectraseg/ranking.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace spectraseg {

namespace {

constexpr uint64_t kStreamBoot = 0x424f4f54; // "BOOT"

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

void check_scores(const std::vector<AlgorithmScores>& scores) {
    if (scores.empty()) throw ConfigError("ranking: no algorithms");
    size_t n = scores.front().per_subject.size();
    if (n == 0) throw ConfigError("ranking: no subjects");
    for (const AlgorithmScores& a : scores) {
        if (a.per_subject.size() != n)
            throw ConfigError("ranking: '" + a.algorithm + "' disagrees on the subject count");
        for (double v : a.per_subject)
            if (!std::isfinite(v))
                throw ConfigError("ranking: non-finite score for '" + a.algorithm + "'");
    }
}

double mean_over(const std::vector<double>& values, const std::vector<int>& subjects) {
    double sum = 0.0;
    for (int s : subjects) sum += values[static_cast<size_t>(s)];
    return sum / static_cast<double>(subjects.size());
}

// Nearest-rank percentile on a sorted vector; the median averages the two
// central order statistics for even n.
double percentile(const std::vector<double>& sorted, double q) {
    size_t n = sorted.size();
    size_t idx = static_cast<size_t>(std::ceil(q * static_cast<double>(n)));
    return sorted[std::min(idx == 0 ? 0 : idx - 1, n - 1)];
}

double median_of(const std::vector<double>& sorted) {
    size_t n = sorted.size();
    if (n % 2 == 1) return sorted[n / 2];
    return 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
}

std::ofstream open_csv(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError(IoError::Kind::MissingFile, "cannot open for writing: " + path.string());
    return out;
}

} // namespace

RankDirection direction_for_metric(const std::string& metric) {
    if (metric == "dsc" || metric == "nsd") return RankDirection::Maximize;
    if (metric == "asd") return RankDirection::Minimize;
    throw ConfigError("ranking: unknown metric '" + metric + "'");
}

std::vector<double> rank_scores(const std::vector<double>& values, RankDirection dir) {
    size_t n = values.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        if (values[a] != values[b])
            return dir == RankDirection::Maximize ? values[a] > values[b] : values[a] < values[b];
        return a < b;
    });

    std::vector<double> ranks(n, 0.0);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
        double shared = 0.5 * static_cast<double>(i + j) + 1.0; // mean of positions i..j, 1-based
        for (size_t k = i; k <= j; ++k) ranks[order[k]] = shared;
        i = j + 1;
    }
    return ranks;
}

std::vector<std::pair<double, int64_t>> RankSummary::histogram() const {
    std::vector<double> sorted = sample_ranks;
    std::sort(sorted.begin(), sorted.end());
    std::vector<std::pair<double, int64_t>> bins;
    for (double r : sorted) {
        if (bins.empty() || bins.back().first != r)
            bins.emplace_back(r, 0);
        ++bins.back().second;
    }
    return bins;
}

std::vector<std::vector<int>> draw_bootstrap_samples(int n_subjects, int n_boot, int sample_size,
                                                     uint64_t seed) {
    if (n_subjects <= 0) throw ConfigError("ranking: no subjects to draw from");
    if (n_boot <= 0 || sample_size <= 0)
        throw ConfigError("ranking: sample counts must be positive");
    std::vector<std::vector<int>> samples(static_cast<size_t>(n_boot));
    for (int s = 0; s < n_boot; ++s) {
        Rng rng(Rng::mix(seed, {kStreamBoot, static_cast<uint64_t>(s)}));
        samples[static_cast<size_t>(s)].resize(static_cast<size_t>(sample_size));
        for (int j = 0; j < sample_size; ++j)
            samples[static_cast<size_t>(s)][static_cast<size_t>(j)] =
                static_cast<int>(rng.below(static_cast<uint64_t>(n_subjects)));
    }
    return samples;
}

RankingTable bootstrap_ranks(const std::vector<AlgorithmScores>& scores,
                             const std::vector<std::vector<int>>& samples, RankDirection dir) {
    check_scores(scores);
    if (samples.empty()) throw ConfigError("ranking: no bootstrap samples");
    int n_subjects = static_cast<int>(scores.front().per_subject.size());
    for (const std::vector<int>& sample : samples) {
        if (sample.empty()) throw ConfigError("ranking: empty bootstrap sample");
        for (int s : sample)
            if (s < 0 || s >= n_subjects)
                throw ConfigError("ranking: sample index out of range");
    }

    RankingTable table;
    table.sample_size = static_cast<int>(samples.front().size());
    table.rows.resize(scores.size());
    for (size_t a = 0; a < scores.size(); ++a) {
        table.rows[a].algorithm = scores[a].algorithm;
        table.rows[a].sample_ranks.reserve(samples.size());
    }

    std::vector<double> means(scores.size());
    for (const std::vector<int>& sample : samples) {
        for (size_t a = 0; a < scores.size(); ++a)
            means[a] = mean_over(scores[a].per_subject, sample);
        std::vector<double> ranks = rank_scores(means, dir);
        for (size_t a = 0; a < scores.size(); ++a)
            table.rows[a].sample_ranks.push_back(ranks[a]);
    }

    for (RankSummary& row : table.rows) {
        std::vector<double> sorted = row.sample_ranks;
        std::sort(sorted.begin(), sorted.end());
        row.median = median_of(sorted);
        row.lo = percentile(sorted, 0.025);
        row.hi = percentile(sorted, 0.975);
    }
    return table;
}

RankingTable bootstrap_ranks(const std::vector<AlgorithmScores>& scores, int n_boot,
                             int sample_size, uint64_t seed, RankDirection dir) {
    check_scores(scores);
    int n_subjects = static_cast<int>(scores.front().per_subject.size());
    return bootstrap_ranks(scores, draw_bootstrap_samples(n_subjects, n_boot, sample_size, seed),
                           dir);
}

CrossMetricRanks mean_then_rank(const std::vector<MetricBlock>& blocks) {
    if (blocks.empty()) throw ConfigError("ranking: no metric blocks");
    CrossMetricRanks cm;
    for (const AlgorithmScores& a : blocks.front().scores) cm.algorithms.push_back(a.algorithm);
    for (const MetricBlock& block : blocks) {
        check_scores(block.scores);
        if (block.scores.size() != cm.algorithms.size())
            throw ConfigError("ranking: metric '" + block.metric +
                              "' disagrees on the algorithm list");
        std::vector<double> means(block.scores.size());
        for (size_t a = 0; a < block.scores.size(); ++a) {
            if (block.scores[a].algorithm != cm.algorithms[a])
                throw ConfigError("ranking: metric '" + block.metric +
                                  "' disagrees on the algorithm list");
            const std::vector<double>& v = block.scores[a].per_subject;
            means[a] = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
        }
        cm.metrics.push_back(block.metric);
        cm.ranks.push_back(rank_scores(means, block.direction));
    }
    return cm;
}

void write_rank_histogram_csv(const RankingTable& table, const std::filesystem::path& path) {
    std::ofstream out = open_csv(path);
    out << "algorithm,rank,frequency\n";
    for (const RankSummary& row : table.rows)
        for (const auto& [rank, freq] : row.histogram())
            out << row.algorithm << ',' << fmt(rank) << ',' << freq << '\n';
    if (!out.flush()) throw IoError(IoError::Kind::MissingFile, "write failed: " + path.string());
}

void write_cross_metric_csv(const CrossMetricRanks& cm, const std::filesystem::path& path) {
    std::ofstream out = open_csv(path);
    out << "metric,algorithm,rank\n";
    for (size_t m = 0; m < cm.metrics.size(); ++m)
        for (size_t a = 0; a < cm.algorithms.size(); ++a)
            out << cm.metrics[m] << ',' << cm.algorithms[a] << ',' << fmt(cm.ranks[m][a]) << '\n';
    if (!out.flush()) throw IoError(IoError::Kind::MissingFile, "write failed: " + path.string());
}

} // namespace spectraseg
