// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "dyntok/encoder.hpp"
#include "dyntok/nn.hpp"

namespace dyntok {

struct MergeConfig {
    double ratio = 10.0;          // global compression ratio R
    double theta = 1.0;           // firing threshold
    double lambda_smooth = 1.0;   // weight scale inside Eq. 1
    double lambda_noise = 0.0;    // noise threshold inside Eq. 1
    int predictor_kernel = 5;
    int predictor_hidden = 32;
    double predictor_bias_init = -1.5;
    // start the predictor conv as a temporal-difference filter bank
    bool delta_init = true;
    bool scale_in_training = true;
};

struct FrameWeightTrace {
    std::vector<double> alpha;      // raw weights, in [0, lambda_smooth)
    std::vector<double> alpha_hat;  // scaled weights, sum N
    std::vector<double> s_hat;      // prefix sums of alpha_hat
    int n_target = 0;
};

struct MergedSequence {
    Tensor tokens;               // N x D
    Tensor allocation;           // T x N, row t sums to alpha_hat[t], col j to theta
    std::vector<int> boundaries; // 0-based frame index where each token completes
};

// N = max(1, round-half-up(T / R))
int target_length(int t_frames, double ratio);

// Frame weight predictor, Eq. alpha_t = ReLU(sigmoid(conv(H)W + b) * ls - ln).
class MergePredictor {
public:
    MergePredictor(MergeConfig cfg, int feature_dim) : cfg_(cfg), dim_(feature_dim) {}

    void init(ParamStore& ps, Rng& rng) const;
    // H: (T x D) -> alpha (T x 1)
    Value forward(Binder& P, Value h) const;

    const MergeConfig& config() const { return cfg_; }

private:
    MergeConfig cfg_;
    int dim_;
};

// alpha_hat = alpha * N / sum(alpha); uniform N/T fallback below sum 1e-8
Value scale_weights(Graph& g, Value alpha, int n_target);
std::vector<double> scale_weights(const std::vector<double>& alpha, int n_target);

// Soft integrate-and-fire aggregation. alpha_hat must sum to n_tokens*theta.
// Returns merged tokens C = W^T H together with the allocation matrix.
struct FireResult {
    Value tokens;
    Value allocation;
    std::vector<int> boundaries;
};
FireResult integrate_and_fire(Graph& g, Value h, Value alpha_hat, int n_tokens,
                              double theta = 1.0);
MergedSequence integrate_and_fire(const Tensor& h, const std::vector<double>& alpha_hat,
                                  int n_tokens, double theta = 1.0);

FrameWeightTrace make_trace(const std::vector<double>& alpha, int n_target);

// uniform trace used by the fixed-stride baseline: s_hat[t] = (t+1) * N / T
FrameWeightTrace uniform_trace(int t_frames, int n_target);

// token index per frame, 0-based: clamp(ceil(s_hat/theta), 1, N) - 1.
// A prefix sum sitting exactly on a band edge closes the lower token.
std::vector<int> upsample_indices(const std::vector<double>& s_hat, int n_tokens,
                                  double theta = 1.0);

// U[t] = tokens[idx[t]] (gradient flows into the token vectors)
Value oracle_upsample(Graph& g, Value tokens, const std::vector<double>& s_hat,
                      double theta = 1.0);
std::vector<int64_t> oracle_upsample(const std::vector<int64_t>& token_ids,
                                     const std::vector<double>& s_hat, double theta = 1.0);

// L_Qua = (1/sum N) * sum |sum_t alpha_t - N|
double loss_quantity(const std::vector<double>& raw_sums, const std::vector<int>& targets);
// graph form for one utterance's contribution: |sum(alpha) - n| (caller
// divides by the batch token total)
Value quantity_term(Graph& g, Value alpha, int n_target);

}  // namespace dyntok
