// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>

#include "dyntok/corpus.hpp"
#include "dyntok/nn.hpp"

namespace dyntok {

struct FeatureSequence {
    Tensor frames;  // T x D
    double frame_rate = 50.0;
};

struct EncoderConfig {
    int input_downsample = 2;
    int n_layers = 2;
    int hidden_dim = 64;
    enum class Mixing { kConv, kSelfAttention };
    Mixing mixing = Mixing::kConv;
    int n_heads = 2;  // self-attention mixing only
    // fixed affine applied before the first convolution, mapping the log-mel
    // range (log floor .. bump peaks) to roughly [-1, 1]
    double input_offset = -11.512925464970229;  // log floor / 2
    double input_scale = 11.512925464970229;
};

// Strided input convolution (ceil(T/s) frames) followed by temporal mixing
// blocks and an output projection.
class Encoder {
public:
    Encoder(EncoderConfig cfg, int n_mels) : cfg_(cfg), n_mels_(n_mels) {}

    void init(ParamStore& ps, Rng& rng) const;
    // mel: (T_mel x F) -> features (ceil(T_mel / downsample) x D)
    Value forward(Binder& P, Value mel) const;

    FeatureSequence encode(const ParamStore& ps, const MelSpectrogram& mel) const;

    const EncoderConfig& config() const { return cfg_; }
    int n_mels() const { return n_mels_; }

private:
    EncoderConfig cfg_;
    int n_mels_;
};

// Rate-matched mean-pooling baseline. Window boundaries are floor(j*T/N) so
// windows differ in size by at most one frame; N = target_length(T, R).
FeatureSequence fixed_stride_pool(const FeatureSequence& h, double ratio);

// (N x T) row-normalized pooling matrix used by the baseline variant
Tensor fixed_stride_matrix(int t_frames, double ratio);

}  // namespace dyntok
