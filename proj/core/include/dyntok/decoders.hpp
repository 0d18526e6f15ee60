// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "dyntok/corpus.hpp"
#include "dyntok/nn.hpp"

namespace dyntok {

// Symbol id layout shared by both semantic heads. Corpus symbols occupy
// [0, n_symbols); CTC appends a blank; the attention decoder appends
// start/end markers instead.
struct VocabConfig {
    int n_symbols = 0;

    int blank_id() const { return n_symbols; }
    int ctc_classes() const { return n_symbols + 1; }
    int sot_id() const { return n_symbols; }
    int eot_id() const { return n_symbols + 1; }
    int attn_classes() const { return n_symbols + 2; }
};

// Per-frame classifier producing log-softmax rows over symbols + blank.
class CtcHead {
public:
    CtcHead(VocabConfig vocab, int in_dim, int hidden = 64)
        : vocab_(vocab), in_dim_(in_dim), hidden_(hidden) {}

    void init(ParamStore& ps, Rng& rng) const;
    // latents: (L x D) -> (L x (V+1)) log-probabilities
    Value logits(Binder& P, Value latents) const;

    const VocabConfig& vocab() const { return vocab_; }

private:
    VocabConfig vocab_;
    int in_dim_;
    int hidden_;
};

// -log P(target | log_probs) by the forward DP; throws input_error when the
// target cannot fit in L frames.
Value loss_ctc(Graph& g, Value log_probs, const std::vector<int>& target, int blank);

// argmax path, collapse adjacent repeats, drop blanks
std::vector<int> ctc_greedy_decode(const Tensor& log_probs, int blank);

// Small causal transformer decoder with cross-attention over token
// embeddings; teacher-forced next-symbol cross-entropy.
class AttentionDecoder {
public:
    struct Config {
        int dim = 64;
        int n_layers = 2;
        int n_heads = 2;
        int ffn_mult = 2;
        int max_positions = 512;
    };

    AttentionDecoder(VocabConfig vocab, Config cfg) : vocab_(vocab), cfg_(cfg) {}

    void init(ParamStore& ps, Rng& rng) const;
    // memory: (N x D) token embeddings. n_pad masked positions may be
    // appended after the end marker without changing the loss.
    Value loss(Binder& P, Value memory, const std::vector<int>& target, int n_pad = 0) const;

    const Config& config() const { return cfg_; }

private:
    VocabConfig vocab_;
    Config cfg_;
};

// 1D ResNet with snake activations and transposed-conv upsampling.
struct ReconConfig {
    int n_blocks = 3;
    std::vector<int> upsample_strides = {2};
    int hidden = 64;
    // fixed affine mapping the head's roughly unit-scale output back to
    // log-mel units; mirrors the encoder input normalization
    double out_offset = -11.512925464970229;
    double out_scale = 11.512925464970229;

    int total_upsample() const {
        int p = 1;
        for (int s : upsample_strides) p *= s;
        return p;
    }
};

class ReconDecoder {
public:
    ReconDecoder(ReconConfig cfg, int in_dim, int n_mels)
        : cfg_(cfg), in_dim_(in_dim), n_mels_(n_mels) {}

    void init(ParamStore& ps, Rng& rng) const;
    // u: (T x D) oracle-upsampled sequence -> (T * prod(strides)) x F mel
    Value forward(Binder& P, Value u) const;

    const ReconConfig& config() const { return cfg_; }

private:
    ReconConfig cfg_;
    int in_dim_;
    int n_mels_;
};

// mean squared error over all bins; shapes must match exactly
Value loss_recon(Graph& g, Value mel_hat, Value mel_ref);
double loss_recon(const Tensor& mel_hat, const Tensor& mel_ref);

}  // namespace dyntok
