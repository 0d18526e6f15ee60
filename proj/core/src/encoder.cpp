// SPDX-License-Identifier: Apache-2.0

#include "dyntok/encoder.hpp"

#include <cmath>

#include "dyntok/errors.hpp"
#include "dyntok/merge.hpp"

namespace dyntok {

void Encoder::init(ParamStore& ps, Rng& rng) const {
    const int s = cfg_.input_downsample;
    init_conv1d(ps, rng, "enc.in", 2 * s - 1, n_mels_, cfg_.hidden_dim);
    for (int l = 0; l < cfg_.n_layers; ++l) {
        const std::string p = "enc.mix" + std::to_string(l);
        if (cfg_.mixing == EncoderConfig::Mixing::kConv) {
            init_conv1d(ps, rng, p, 3, cfg_.hidden_dim, cfg_.hidden_dim);
        } else {
            init_layer_norm(ps, p + ".ln", cfg_.hidden_dim);
            init_attention(ps, rng, p + ".attn", cfg_.hidden_dim);
        }
    }
    init_linear(ps, rng, "enc.out", cfg_.hidden_dim, cfg_.hidden_dim);
}

Value Encoder::forward(Binder& P, Value mel) const {
    if (mel->val.rows < 1) throw input_error("encode: empty mel");
    if (mel->val.cols != n_mels_) throw input_error("encode: mel band count mismatch");
    Graph& g = P.graph();
    const int s = cfg_.input_downsample;
    Value norm = g.scale(g.add_scalar(mel, -cfg_.input_offset), 1.0 / cfg_.input_scale);
    // kernel 2s-1 with pad s-1 gives exactly ceil(T/s) output frames
    Value x = g.relu(conv1d_layer(P, norm, "enc.in", 2 * s - 1, s, s - 1));
    for (int l = 0; l < cfg_.n_layers; ++l) {
        const std::string p = "enc.mix" + std::to_string(l);
        if (cfg_.mixing == EncoderConfig::Mixing::kConv) {
            x = g.add(x, g.relu(conv1d_layer(P, x, p, 3, 1, 1)));
        } else {
            x = g.add(x, attention(P, layer_norm_layer(P, x, p + ".ln"), x, p + ".attn",
                                   cfg_.n_heads, false));
        }
    }
    return linear(P, x, "enc.out");
}

FeatureSequence Encoder::encode(const ParamStore& ps, const MelSpectrogram& mel) const {
    Graph g;
    Binder P(g, ps, /*trainable=*/false);
    Value out = forward(P, g.constant(mel.frames));
    FeatureSequence fs;
    fs.frames = out->val;
    fs.frame_rate = mel.frame_rate / cfg_.input_downsample;
    return fs;
}

Tensor fixed_stride_matrix(int t_frames, double ratio) {
    if (ratio < 1.0) throw config_error("fixed_stride_pool: ratio must be >= 1");
    const int n = target_length(t_frames, ratio);
    Tensor m(n, t_frames);
    for (int j = 0; j < n; ++j) {
        const int lo = static_cast<int>(static_cast<int64_t>(j) * t_frames / n);
        const int hi = static_cast<int>(static_cast<int64_t>(j + 1) * t_frames / n);
        const double w = 1.0 / (hi - lo);
        for (int t = lo; t < hi; ++t) m.at(j, t) = w;
    }
    return m;
}

FeatureSequence fixed_stride_pool(const FeatureSequence& h, double ratio) {
    const Tensor m = fixed_stride_matrix(h.frames.rows, ratio);
    FeatureSequence out;
    out.frames = Tensor(m.rows, h.frames.cols);
    for (int j = 0; j < m.rows; ++j)
        for (int t = 0; t < m.cols; ++t) {
            const double w = m.at(j, t);
            if (w == 0.0) continue;
            for (int c = 0; c < h.frames.cols; ++c)
                out.frames.at(j, c) += w * h.frames.at(t, c);
        }
    out.frame_rate = h.frame_rate * m.rows / h.frames.rows;
    return out;
}

}  // namespace dyntok
