#include "protosal/stats.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>

#include <boost/math/distributions/fisher_f.hpp>

#include "protosal/common.hpp"

namespace protosal {

namespace {

// Midranks of `vals`, rank 1 for the smallest when ascending.
std::vector<double> midranks(const std::vector<double>& vals, bool ascending) {
    std::size_t n = vals.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t(0));
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return ascending ? vals[a] < vals[b] : vals[a] > vals[b];
    });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && vals[order[j + 1]] == vals[order[i]]) ++j;
        double shared = 0.5 * double(i + j) + 1.0;  // mean of positions i..j, 1-based
        for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = shared;
        i = j + 1;
    }
    return ranks;
}

void check_table(const ScoreTable& t) {
    if (t.k < 2) throw ConfigError("rank_methods: need at least two methods");
    if (t.n < 1) throw ConfigError("rank_methods: need at least one context");
    if (t.values.size() != std::size_t(t.k) * std::size_t(t.n))
        throw ConfigError("rank_methods: values size does not match k*n");
    if (t.orientations.size() != std::size_t(t.n))
        throw ConfigError("rank_methods: one orientation per context required");
    if (!t.method_names.empty() && t.method_names.size() != std::size_t(t.k))
        throw ConfigError("rank_methods: method_names size mismatch");
    if (!t.context_names.empty() && t.context_names.size() != std::size_t(t.n))
        throw ConfigError("rank_methods: context_names size mismatch");
}

}  // namespace

PerformanceMetrics performance_metrics(const std::vector<double>& probabilities,
                                       const std::vector<int>& labels) {
    if (probabilities.size() != labels.size())
        throw ConfigError("performance_metrics: probabilities and labels differ in length");
    if (probabilities.empty())
        throw ConfigError("performance_metrics: empty input");
    for (int l : labels)
        if (l != 0 && l != 1)
            throw ConfigError("performance_metrics: labels must be 0 or 1");
    for (double p : probabilities)
        if (!std::isfinite(p))
            throw NumericError("performance_metrics: non-finite probability");

    double tp = 0, fp = 0, tn = 0, fn = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        bool pred = probabilities[i] >= 0.5;
        if (labels[i] == 1)
            (pred ? tp : fn) += 1;
        else
            (pred ? fp : tn) += 1;
    }
    PerformanceMetrics m;
    m.accuracy = (tp + tn) / double(labels.size());
    if (tp + fp > 0) {
        m.precision = tp / (tp + fp);
        m.precision_defined = true;
    }
    if (tp + fn > 0) {
        m.recall = tp / (tp + fn);
        m.recall_defined = true;
    }
    double pos = tp + fn, neg = fp + tn;
    if (pos > 0 && neg > 0) {
        std::vector<double> ranks = midranks(probabilities, /*ascending=*/true);
        double rank_sum = 0.0;
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == 1) rank_sum += ranks[i];
        m.auc = (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
        m.auc_defined = true;
    }
    return m;
}

PerformanceMetrics model_agreement(const std::vector<double>& predictions_a,
                                   const std::vector<double>& predictions_b) {
    if (predictions_a.size() != predictions_b.size())
        throw ConfigError("model_agreement: prediction vectors differ in length");
    std::vector<int> labels(predictions_a.size());
    for (std::size_t i = 0; i < labels.size(); ++i)
        labels[i] = predictions_a[i] >= 0.5 ? 1 : 0;
    return performance_metrics(predictions_b, labels);
}

RankTable rank_methods(const ScoreTable& scores) {
    check_table(scores);
    std::vector<int> kept, dropped;
    for (int c = 0; c < scores.n; ++c) {
        bool complete = true;
        for (int m = 0; m < scores.k; ++m)
            if (!std::isfinite(scores.at(m, c))) complete = false;
        (complete ? kept : dropped).push_back(c);
    }
    if (kept.empty())
        throw NumericError("rank_methods: every context has a missing cell");

    RankTable out;
    out.k = scores.k;
    out.n = int(kept.size());
    out.method_names = scores.method_names;
    out.dropped_columns = dropped;
    out.ranks.resize(std::size_t(out.k) * std::size_t(out.n));
    out.average_rank.assign(std::size_t(out.k), 0.0);
    std::vector<double> col(std::size_t(scores.k));
    for (int j = 0; j < out.n; ++j) {
        int c = kept[std::size_t(j)];
        if (!scores.context_names.empty())
            out.context_names.push_back(scores.context_names[std::size_t(c)]);
        for (int m = 0; m < scores.k; ++m) col[std::size_t(m)] = scores.at(m, c);
        // similarity: the largest score earns rank 1
        bool ascending = scores.orientations[std::size_t(c)] == Orientation::Dissimilarity;
        std::vector<double> r = midranks(col, ascending);
        for (int m = 0; m < scores.k; ++m) {
            out.ranks[std::size_t(m) * std::size_t(out.n) + std::size_t(j)] =
                r[std::size_t(m)];
            out.average_rank[std::size_t(m)] += r[std::size_t(m)];
        }
    }
    for (double& a : out.average_rank) a /= double(out.n);
    return out;
}

FriedmanResult friedman_test(const RankTable& ranks) {
    if (ranks.k < 2) throw ConfigError("friedman_test: need at least two methods");
    if (ranks.n < 2) throw ConfigError("friedman_test: need at least two contexts");
    if (ranks.ranks.size() != std::size_t(ranks.k) * std::size_t(ranks.n))
        throw ConfigError("friedman_test: ranks size does not match k*n");

    double k = double(ranks.k), n = double(ranks.n);
    double sum_sq = 0.0;
    for (int m = 0; m < ranks.k; ++m) {
        double mean = 0.0;
        for (int c = 0; c < ranks.n; ++c) mean += ranks.at(m, c);
        mean /= n;
        sum_sq += mean * mean;
    }
    FriedmanResult out;
    out.chi_square =
        std::max(0.0, 12.0 * n / (k * (k + 1.0)) * (sum_sq - k * (k + 1.0) * (k + 1.0) / 4.0));
    out.df1 = ranks.k - 1;
    out.df2 = (ranks.k - 1) * (ranks.n - 1);

    double denom = n * (k - 1.0) - out.chi_square;
    if (denom <= 1e-12) {
        out.degenerate = true;
        out.f_statistic = std::numeric_limits<double>::infinity();
        out.p_value = 0.0;
        return out;
    }
    out.f_statistic = (n - 1.0) * out.chi_square / denom;
    boost::math::fisher_f_distribution<double> dist(double(out.df1), double(out.df2));
    out.p_value = boost::math::cdf(boost::math::complement(dist, out.f_statistic));
    return out;
}

double nemenyi_q(int k, double alpha) {
    // q_alpha(k) for the two-tailed Nemenyi test, k = 2..10
    static const double kQ05[9] = {1.959964, 2.343701, 2.569032, 2.727774, 2.849705,
                                   2.948320, 3.030878, 3.101730, 3.163684};
    static const double kQ10[9] = {1.644854, 2.052293, 2.291341, 2.459516, 2.588521,
                                   2.692732, 2.779884, 2.854606, 2.919889};
    if (k < 2 || k > 10)
        throw ConfigError("nemenyi: q table covers 2 to 10 methods");
    if (std::abs(alpha - 0.05) < 1e-9) return kQ05[k - 2];
    if (std::abs(alpha - 0.10) < 1e-9) return kQ10[k - 2];
    throw ConfigError("nemenyi: alpha must be 0.05 or 0.10");
}

NemenyiResult nemenyi_cd(int k, int n, double alpha) {
    if (n < 1) throw ConfigError("nemenyi: need at least one context");
    NemenyiResult out;
    out.alpha = alpha;
    out.q_critical = nemenyi_q(k, alpha);
    out.cd = out.q_critical * std::sqrt(double(k) * (k + 1.0) / (6.0 * double(n)));
    return out;
}

NemenyiResult nemenyi_test(const RankTable& ranks, double alpha) {
    if (ranks.average_rank.size() != std::size_t(ranks.k))
        throw ConfigError("nemenyi: average_rank size does not match k");
    NemenyiResult out = nemenyi_cd(ranks.k, ranks.n, alpha);
    for (int i = 0; i < ranks.k; ++i)
        for (int j = i + 1; j < ranks.k; ++j)
            if (std::abs(ranks.average_rank[std::size_t(i)] -
                         ranks.average_rank[std::size_t(j)]) > out.cd)
                out.significant_pairs.emplace_back(i, j);
    return out;
}

}  // namespace protosal
