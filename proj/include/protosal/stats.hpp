#pragma once

#include <string>
#include <utility>
#include <vector>

#include "protosal/metrics.hpp"

namespace protosal {

// k methods scored over n contexts (metric x prototype cells). NaN marks a
// missing cell; ranking drops the whole column to keep ranks comparable.
struct ScoreTable {
    int k = 0, n = 0;
    std::vector<std::string> method_names;   // size k or empty
    std::vector<std::string> context_names;  // size n or empty
    std::vector<Orientation> orientations;   // size n
    std::vector<double> values;              // k*n row-major

    double at(int method, int context) const {
        return values[std::size_t(method) * std::size_t(n) + std::size_t(context)];
    }
};

struct RankTable {
    int k = 0, n = 0;
    std::vector<std::string> method_names;
    std::vector<std::string> context_names;
    std::vector<double> ranks;          // k*n row-major, midranks, 1 = best
    std::vector<double> average_rank;   // size k
    std::vector<int> dropped_columns;   // score columns dropped for missing cells

    double at(int method, int context) const {
        return ranks[std::size_t(method) * std::size_t(n) + std::size_t(context)];
    }
};

struct PerformanceMetrics {
    double accuracy = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double auc = 0.0;
    bool precision_defined = false;  // at least one predicted positive
    bool recall_defined = false;     // at least one actual positive
    bool auc_defined = false;        // both classes present
};

struct FriedmanResult {
    double chi_square = 0.0;
    double f_statistic = 0.0;  // Iman-Davenport correction
    int df1 = 0, df2 = 0;
    double p_value = 1.0;
    bool degenerate = false;   // chi_square reached n*(k-1); p reported as 0
};

struct NemenyiResult {
    double alpha = 0.05;
    double q_critical = 0.0;
    double cd = 0.0;
    std::vector<std::pair<int, int>> significant_pairs;  // method indices, i < j
};

// Probabilities thresholded at 0.5 (>= counts as positive); AUC is the
// midrank Mann-Whitney statistic over the probabilities.
PerformanceMetrics performance_metrics(const std::vector<double>& probabilities,
                                       const std::vector<int>& labels);

// Model A's hard labels act as ground truth for model B's probabilities.
PerformanceMetrics model_agreement(const std::vector<double>& predictions_a,
                                   const std::vector<double>& predictions_b);

// Similarity columns rank descending (1 = highest score), dissimilarity
// ascending; ties get midranks, so every column sums to k(k+1)/2.
RankTable rank_methods(const ScoreTable& scores);

FriedmanResult friedman_test(const RankTable& ranks);

// Tabulated two-tailed studentized-range quantile / sqrt(2), k in [2, 10],
// alpha in {0.05, 0.10}.
double nemenyi_q(int k, double alpha);
NemenyiResult nemenyi_cd(int k, int n, double alpha);
NemenyiResult nemenyi_test(const RankTable& ranks, double alpha);

}  // namespace protosal
