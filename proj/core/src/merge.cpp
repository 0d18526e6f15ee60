// SPDX-License-Identifier: Apache-2.0

#include "dyntok/merge.hpp"

#include <cmath>

#include "dyntok/errors.hpp"

namespace dyntok {

int target_length(int t_frames, double ratio) {
    if (t_frames < 1) throw input_error("target_length: T must be >= 1");
    if (ratio < 1.0) throw config_error("target_length: ratio must be >= 1");
    const int n = static_cast<int>(std::floor(t_frames / ratio + 0.5));
    return n < 1 ? 1 : n;
}

void MergePredictor::init(ParamStore& ps, Rng& rng) const {
    init_conv1d(ps, rng, "merge.conv", cfg_.predictor_kernel, dim_, cfg_.predictor_hidden);
    if (cfg_.delta_init) {
        // temporal-difference prior: each hidden channel starts as an
        // antisymmetric filter over a random channel mix, so the predictor
        // responds to spectral transitions from the first step
        Tensor& w = ps.get("merge.conv.w");
        const int k = cfg_.predictor_kernel;
        Rng mix_rng = rng.fork(0xDE17A);
        std::vector<double> mix(static_cast<size_t>(dim_) * cfg_.predictor_hidden);
        for (auto& m : mix) m = mix_rng.normal(0.0, 1.0 / std::sqrt(static_cast<double>(dim_)));
        for (int kk = 0; kk < k; ++kk) {
            const double d = (kk - (k - 1) / 2.0) / k;
            for (int ci = 0; ci < dim_; ++ci)
                for (int co = 0; co < cfg_.predictor_hidden; ++co)
                    w.at(kk * dim_ + ci, co) =
                        d * mix[static_cast<size_t>(ci) * cfg_.predictor_hidden + co];
        }
    }
    init_linear(ps, rng, "merge.proj", cfg_.predictor_hidden, 1, cfg_.predictor_bias_init);
}

Value MergePredictor::forward(Binder& P, Value h) const {
    Graph& g = P.graph();
    Value c = conv1d_layer(P, h, "merge.conv", cfg_.predictor_kernel, 1,
                           (cfg_.predictor_kernel - 1) / 2);
    Value logits = linear(P, c, "merge.proj");  // T x 1
    Value a = g.sigmoid(logits);
    if (cfg_.lambda_smooth != 1.0) a = g.scale(a, cfg_.lambda_smooth);
    if (cfg_.lambda_noise != 0.0) a = g.add_scalar(a, -cfg_.lambda_noise);
    return g.relu(a);
}

Value scale_weights(Graph& g, Value alpha, int n_target) {
    if (n_target < 1) throw input_error("scale_weights: N must be >= 1");
    Value s = g.sum_all(alpha);
    if (s->val.item() < 1e-8) {
        // Eq. 2 undefined at zero mass; fall back to uniform weights. The
        // constant carries no gradient, matching the true (zero) derivative.
        const int t = alpha->val.rows;
        return g.constant(Tensor::full(t, 1, static_cast<double>(n_target) / t));
    }
    Value factor = g.scale(g.recip(s), static_cast<double>(n_target));
    return g.mul_scalar_node(alpha, factor);
}

std::vector<double> scale_weights(const std::vector<double>& alpha, int n_target) {
    if (n_target < 1) throw input_error("scale_weights: N must be >= 1");
    double s = 0.0;
    for (double a : alpha) s += a;
    std::vector<double> out(alpha.size());
    if (s < 1e-8) {
        const double u = static_cast<double>(n_target) / alpha.size();
        for (auto& x : out) x = u;
        return out;
    }
    const double k = n_target / s;
    for (size_t i = 0; i < alpha.size(); ++i) out[i] = alpha[i] * k;
    return out;
}

namespace {

std::vector<int> boundaries_from_allocation(const Tensor& w) {
    std::vector<int> b(w.cols, -1);
    for (int j = 0; j < w.cols; ++j)
        for (int t = w.rows - 1; t >= 0; --t)
            if (w.at(t, j) > 0.0) {
                b[j] = t;
                break;
            }
    // tokens that received only zero-weight frames complete with their
    // predecessor's frame
    for (int j = 0; j < w.cols; ++j)
        if (b[j] < 0) b[j] = j > 0 ? b[j - 1] : 0;
    return b;
}

}  // namespace

FireResult integrate_and_fire(Graph& g, Value h, Value alpha_hat, int n_tokens, double theta) {
    FireResult r;
    r.allocation = g.fire_allocation(alpha_hat, theta, n_tokens);
    r.tokens = g.matmul(g.transpose(r.allocation), h);
    r.boundaries = boundaries_from_allocation(r.allocation->val);
    return r;
}

MergedSequence integrate_and_fire(const Tensor& h, const std::vector<double>& alpha_hat,
                                  int n_tokens, double theta) {
    Graph g;
    Value hv = g.constant(h);
    Value av = g.constant(Tensor::col_vec(alpha_hat));
    FireResult r = integrate_and_fire(g, hv, av, n_tokens, theta);
    MergedSequence m;
    m.tokens = r.tokens->val;
    m.allocation = r.allocation->val;
    m.boundaries = std::move(r.boundaries);
    return m;
}

FrameWeightTrace make_trace(const std::vector<double>& alpha, int n_target) {
    FrameWeightTrace tr;
    tr.alpha = alpha;
    tr.alpha_hat = scale_weights(alpha, n_target);
    tr.s_hat.resize(alpha.size());
    double s = 0.0;
    for (size_t t = 0; t < tr.alpha_hat.size(); ++t) {
        s += tr.alpha_hat[t];
        tr.s_hat[t] = s;
    }
    tr.n_target = n_target;
    return tr;
}

FrameWeightTrace uniform_trace(int t_frames, int n_target) {
    std::vector<double> alpha(t_frames, 1.0);
    return make_trace(alpha, n_target);
}

std::vector<int> upsample_indices(const std::vector<double>& s_hat, int n_tokens,
                                  double theta) {
    std::vector<int> idx(s_hat.size());
    for (size_t t = 0; t < s_hat.size(); ++t) {
        // 1e-9 absorbs float fuzz around exact band edges
        int j = static_cast<int>(std::ceil(s_hat[t] / theta - 1e-9));
        if (j < 1) j = 1;
        if (j > n_tokens) j = n_tokens;
        idx[t] = j - 1;
    }
    return idx;
}

Value oracle_upsample(Graph& g, Value tokens, const std::vector<double>& s_hat, double theta) {
    return g.gather_rows(tokens, upsample_indices(s_hat, tokens->val.rows, theta));
}

std::vector<int64_t> oracle_upsample(const std::vector<int64_t>& token_ids,
                                     const std::vector<double>& s_hat, double theta) {
    const auto idx = upsample_indices(s_hat, static_cast<int>(token_ids.size()), theta);
    std::vector<int64_t> out(idx.size());
    for (size_t t = 0; t < idx.size(); ++t) out[t] = token_ids[idx[t]];
    return out;
}

double loss_quantity(const std::vector<double>& raw_sums, const std::vector<int>& targets) {
    if (raw_sums.empty() || raw_sums.size() != targets.size())
        throw input_error("loss_quantity: empty or mismatched batch");
    double num = 0.0;
    int64_t den = 0;
    for (size_t i = 0; i < raw_sums.size(); ++i) {
        num += std::fabs(raw_sums[i] - targets[i]);
        den += targets[i];
    }
    return num / den;
}

Value quantity_term(Graph& g, Value alpha, int n_target) {
    return g.abs_(g.add_scalar(g.sum_all(alpha), -static_cast<double>(n_target)));
}

}  // namespace dyntok
