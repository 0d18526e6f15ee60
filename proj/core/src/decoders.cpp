// SPDX-License-Identifier: Apache-2.0

#include "dyntok/decoders.hpp"

#include <cmath>

#include "dyntok/errors.hpp"

namespace dyntok {

// ---------------------------------------------------------------------------
// CTC
// ---------------------------------------------------------------------------

void CtcHead::init(ParamStore& ps, Rng& rng) const {
    init_linear(ps, rng, "ctc.h", in_dim_, hidden_);
    init_linear(ps, rng, "ctc.o", hidden_, vocab_.ctc_classes());
}

Value CtcHead::logits(Binder& P, Value latents) const {
    Graph& g = P.graph();
    Value h = g.relu(linear(P, latents, "ctc.h"));
    return g.row_log_softmax(linear(P, h, "ctc.o"));
}

Value loss_ctc(Graph& g, Value log_probs, const std::vector<int>& target, int blank) {
    return g.ctc_loss(log_probs, target, blank);
}

std::vector<int> ctc_greedy_decode(const Tensor& log_probs, int blank) {
    std::vector<int> out;
    int prev = -1;
    for (int t = 0; t < log_probs.rows; ++t) {
        int best = 0;
        for (int k = 1; k < log_probs.cols; ++k)
            if (log_probs.at(t, k) > log_probs.at(t, best)) best = k;
        if (best != blank && best != prev) out.push_back(best);
        prev = best;
    }
    return out;
}

// ---------------------------------------------------------------------------
// attention decoder
// ---------------------------------------------------------------------------

void AttentionDecoder::init(ParamStore& ps, Rng& rng) const {
    init_embedding(ps, rng, "attn.embed", vocab_.attn_classes(), cfg_.dim);
    for (int l = 0; l < cfg_.n_layers; ++l) {
        const std::string p = "attn.layer" + std::to_string(l);
        init_layer_norm(ps, p + ".ln1", cfg_.dim);
        init_attention(ps, rng, p + ".self", cfg_.dim);
        init_layer_norm(ps, p + ".ln2", cfg_.dim);
        init_attention(ps, rng, p + ".cross", cfg_.dim);
        init_layer_norm(ps, p + ".ln3", cfg_.dim);
        init_linear(ps, rng, p + ".ffn1", cfg_.dim, cfg_.ffn_mult * cfg_.dim);
        init_linear(ps, rng, p + ".ffn2", cfg_.ffn_mult * cfg_.dim, cfg_.dim);
    }
    init_layer_norm(ps, "attn.ln_out", cfg_.dim);
    init_linear(ps, rng, "attn.out", cfg_.dim, vocab_.attn_classes());
}

Value AttentionDecoder::loss(Binder& P, Value memory, const std::vector<int>& target,
                             int n_pad) const {
    if (target.empty()) throw input_error("attention_decode_loss: empty target");
    for (int s : target)
        if (s < 0 || s >= vocab_.n_symbols)
            throw input_error("attention_decode_loss: symbol out of vocabulary");
    Graph& g = P.graph();

    // teacher forcing: input <sot> y1..yk (+pads), predict y1..yk <eot>
    std::vector<int> in_ids;
    in_ids.reserve(target.size() + 1 + n_pad);
    in_ids.push_back(vocab_.sot_id());
    in_ids.insert(in_ids.end(), target.begin(), target.end());
    for (int i = 0; i < n_pad; ++i) in_ids.push_back(vocab_.eot_id());
    std::vector<int> out_ids(target);
    out_ids.push_back(vocab_.eot_id());
    const int n_positions = static_cast<int>(out_ids.size());

    const int len = static_cast<int>(in_ids.size());
    if (len > cfg_.max_positions) throw input_error("attention_decode_loss: target too long");
    Value x = embedding_lookup(P, "attn.embed", in_ids);
    x = g.add(x, g.constant(sinusoidal_positions(len, cfg_.dim)));
    for (int l = 0; l < cfg_.n_layers; ++l) {
        const std::string p = "attn.layer" + std::to_string(l);
        Value h = layer_norm_layer(P, x, p + ".ln1");
        x = g.add(x, attention(P, h, h, p + ".self", cfg_.n_heads, /*causal=*/true));
        x = g.add(x, attention(P, layer_norm_layer(P, x, p + ".ln2"), memory, p + ".cross",
                               cfg_.n_heads, /*causal=*/false));
        Value f = g.relu(linear(P, layer_norm_layer(P, x, p + ".ln3"), p + ".ffn1"));
        x = g.add(x, linear(P, f, p + ".ffn2"));
    }
    Value logits = linear(P, layer_norm_layer(P, x, "attn.ln_out"), "attn.out");
    Value logp = g.row_log_softmax(logits);
    return g.nll_from_log_probs(logp, out_ids, n_positions);
}

// ---------------------------------------------------------------------------
// recon decoder
// ---------------------------------------------------------------------------

void ReconDecoder::init(ParamStore& ps, Rng& rng) const {
    init_linear(ps, rng, "recon.in", in_dim_, cfg_.hidden);
    for (int b = 0; b < cfg_.n_blocks; ++b) {
        const std::string p = "recon.block" + std::to_string(b);
        init_snake(ps, p + ".snake1", cfg_.hidden);
        init_conv1d(ps, rng, p + ".conv1", 3, cfg_.hidden, cfg_.hidden);
        init_snake(ps, p + ".snake2", cfg_.hidden);
        init_conv1d(ps, rng, p + ".conv2", 3, cfg_.hidden, cfg_.hidden);
    }
    for (size_t u = 0; u < cfg_.upsample_strides.size(); ++u) {
        const int s = cfg_.upsample_strides[u];
        const int kernel = (s % 2 == 0) ? 2 * s : s;
        init_conv1d(ps, rng, "recon.up" + std::to_string(u), kernel, cfg_.hidden, cfg_.hidden);
        init_snake(ps, "recon.up" + std::to_string(u) + ".snake", cfg_.hidden);
        (void)kernel;
    }
    init_conv1d(ps, rng, "recon.head", 3, cfg_.hidden, n_mels_);
}

Value ReconDecoder::forward(Binder& P, Value u) const {
    if (u->val.rows < 1) throw input_error("recon_decode: empty input");
    if (u->val.cols != in_dim_) throw input_error("recon_decode: feature width mismatch");
    Graph& g = P.graph();
    Value x = linear(P, u, "recon.in");
    for (int b = 0; b < cfg_.n_blocks; ++b) {
        const std::string p = "recon.block" + std::to_string(b);
        Value h = conv1d_layer(P, snake(P, x, p + ".snake1"), p + ".conv1", 3, 1, 1);
        h = conv1d_layer(P, snake(P, h, p + ".snake2"), p + ".conv2", 3, 1, 1);
        x = g.add(x, h);
    }
    for (size_t i = 0; i < cfg_.upsample_strides.size(); ++i) {
        const int s = cfg_.upsample_strides[i];
        const std::string p = "recon.up" + std::to_string(i);
        if (s % 2 == 0) {
            // kernel 2s, pad s/2: output length is exactly T*s
            x = conv1d_transpose_layer(P, x, p, 2 * s, s, s / 2);
        } else {
            // odd strides use non-overlapping kernels
            x = conv1d_transpose_layer(P, x, p, s, s, 0);
        }
        x = snake(P, x, p + ".snake");
    }
    Value head = conv1d_layer(P, x, "recon.head", 3, 1, 1);
    return g.add_scalar(g.scale(head, cfg_.out_scale), cfg_.out_offset);
}

// ---------------------------------------------------------------------------
// reconstruction loss
// ---------------------------------------------------------------------------

Value loss_recon(Graph& g, Value mel_hat, Value mel_ref) {
    if (!mel_hat->val.same_shape(mel_ref->val))
        throw input_error("loss_recon: shape mismatch");
    Value d = g.sub(mel_hat, mel_ref);
    return g.mean_all(g.mul(d, d));
}

double loss_recon(const Tensor& mel_hat, const Tensor& mel_ref) {
    if (!mel_hat.same_shape(mel_ref)) throw input_error("loss_recon: shape mismatch");
    double s = 0.0;
    for (int64_t i = 0; i < mel_hat.numel(); ++i) {
        const double d = mel_hat.v[i] - mel_ref.v[i];
        s += d * d;
    }
    return s / mel_hat.numel();
}

}  // namespace dyntok
