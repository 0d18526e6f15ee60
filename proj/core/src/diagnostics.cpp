// SPDX-License-Identifier: Apache-2.0

#include "dyntok/diagnostics.hpp"

#include <algorithm>
#include <cmath>

#include "dyntok/errors.hpp"

namespace dyntok {

int edit_distance(const std::vector<int>& a, const std::vector<int>& b) {
    const size_t n = a.size(), m = b.size();
    std::vector<int> prev(m + 1), cur(m + 1);
    for (size_t j = 0; j <= m; ++j) prev[j] = static_cast<int>(j);
    for (size_t i = 1; i <= n; ++i) {
        cur[0] = static_cast<int>(i);
        for (size_t j = 1; j <= m; ++j) {
            const int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    return prev[m];
}

double cer(const std::vector<int>& ref, const std::vector<int>& hyp) {
    if (ref.empty()) throw input_error("cer: empty reference");
    return static_cast<double>(edit_distance(ref, hyp)) / ref.size();
}

namespace {

// mean positive-rectified spectral increase per frame, frames [1, T)
std::vector<double> spectral_flux(const Tensor& mel, int t_limit) {
    std::vector<double> flux;
    flux.reserve(std::max(0, t_limit - 1));
    for (int t = 1; t < t_limit; ++t) {
        double s = 0.0;
        for (int f = 0; f < mel.cols; ++f)
            s += std::max(0.0, mel.at(t, f) - mel.at(t - 1, f));
        flux.push_back(s / mel.cols);
    }
    return flux;
}

}  // namespace

ReconMetrics mel_metrics(const Tensor& mel_hat, const Tensor& mel_ref) {
    if (mel_hat.rows < 1 || mel_ref.rows < 1) throw input_error("mel_metrics: empty input");
    if (mel_hat.cols != mel_ref.cols) throw input_error("mel_metrics: band count mismatch");
    const int to = std::min(mel_hat.rows, mel_ref.rows);
    const int f = mel_ref.cols;

    ReconMetrics m;
    m.duration_ratio = static_cast<double>(mel_hat.rows) / mel_ref.rows;

    double mae = 0.0;
    for (int t = 0; t < to; ++t)
        for (int c = 0; c < f; ++c) mae += std::fabs(mel_hat.at(t, c) - mel_ref.at(t, c));
    m.mel_mae = mae / (static_cast<double>(to) * f);

    // Pearson over the flattened overlap
    const double n = static_cast<double>(to) * f;
    double sx = 0.0, sy = 0.0, sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (int t = 0; t < to; ++t)
        for (int c = 0; c < f; ++c) {
            const double x = mel_hat.at(t, c), y = mel_ref.at(t, c);
            sx += x;
            sy += y;
            sxx += x * x;
            syy += y * y;
            sxy += x * y;
        }
    const double vx = sxx - sx * sx / n;
    const double vy = syy - sy * sy / n;
    if (vx <= 1e-12 || vy <= 1e-12) {
        m.mel_corr = 0.0;
        m.corr_degenerate = true;
    } else {
        m.mel_corr = (sxy - sx * sy / n) / std::sqrt(vx * vy);
    }

    if (to >= 2) {
        double dmae = 0.0;
        for (int t = 1; t < to; ++t)
            for (int c = 0; c < f; ++c) {
                const double dh = mel_hat.at(t, c) - mel_hat.at(t - 1, c);
                const double dr = mel_ref.at(t, c) - mel_ref.at(t - 1, c);
                dmae += std::fabs(dh - dr);
            }
        m.delta_mae = dmae / (static_cast<double>(to - 1) * f);

        const auto fh = spectral_flux(mel_hat, to);
        const auto fr = spectral_flux(mel_ref, to);
        double fmae = 0.0;
        for (size_t t = 0; t < fh.size(); ++t) fmae += std::fabs(fh[t] - fr[t]);
        m.flux_mae = fmae / fh.size();
    }
    return m;
}

double quantile(std::vector<double> xs, double p) {
    if (xs.empty()) throw input_error("quantile: empty sample");
    std::sort(xs.begin(), xs.end());
    const double pos = p * (xs.size() - 1);
    const size_t lo = static_cast<size_t>(std::floor(pos));
    const size_t hi = static_cast<size_t>(std::ceil(pos));
    const double frac = pos - lo;
    return xs[lo] + frac * (xs[hi] - xs[lo]);
}

namespace {
AggregateStat stat_of(const std::vector<double>& xs) {
    AggregateStat s;
    s.median = quantile(xs, 0.5);
    s.q1 = quantile(xs, 0.25);
    s.q3 = quantile(xs, 0.75);
    return s;
}
}  // namespace

AggregateReport aggregate(const std::vector<ReconMetrics>& reports) {
    if (reports.empty()) throw input_error("aggregate: empty report list");
    std::vector<double> a, b, c, d, e;
    for (const auto& r : reports) {
        a.push_back(r.mel_mae);
        b.push_back(r.mel_corr);
        c.push_back(r.delta_mae);
        d.push_back(r.flux_mae);
        e.push_back(r.duration_ratio);
    }
    AggregateReport rep;
    rep.mel_mae = stat_of(a);
    rep.mel_corr = stat_of(b);
    rep.delta_mae = stat_of(c);
    rep.flux_mae = stat_of(d);
    rep.duration_ratio = stat_of(e);
    rep.count = static_cast<int>(reports.size());
    return rep;
}

}  // namespace dyntok
