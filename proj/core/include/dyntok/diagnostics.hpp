// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "dyntok/tensor.hpp"

namespace dyntok {

struct ReconMetrics {
    double mel_mae = 0.0;
    double mel_corr = 0.0;
    double delta_mae = 0.0;
    double flux_mae = 0.0;
    double duration_ratio = 1.0;
    bool corr_degenerate = false;  // zero variance on either side
};

struct AggregateStat {
    double median = 0.0;
    double q1 = 0.0;
    double q3 = 0.0;
};

struct AggregateReport {
    AggregateStat mel_mae, mel_corr, delta_mae, flux_mae, duration_ratio;
    int count = 0;
};

// Levenshtein distance with unit costs
int edit_distance(const std::vector<int>& a, const std::vector<int>& b);

// edit distance / |ref|; ref must be non-empty
double cer(const std::vector<int>& ref, const std::vector<int>& hyp);

// Frame-wise and micro-dynamics reconstruction metrics. Mismatched lengths
// are compared on the overlapping prefix; duration_ratio keeps the raw
// length ratio.
ReconMetrics mel_metrics(const Tensor& mel_hat, const Tensor& mel_ref);

// medians and quartiles by linear interpolation between order statistics
AggregateReport aggregate(const std::vector<ReconMetrics>& reports);

// quantile of an unsorted sample, p in [0,1]; exposed for tests
double quantile(std::vector<double> xs, double p);

}  // namespace dyntok
