// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dyntok/nn.hpp"

namespace dyntok {

struct FsqConfig {
    std::vector<int> levels = {4, 4, 4, 4, 4, 4, 4};

    int dim() const { return static_cast<int>(levels.size()); }
    int64_t codebook_size() const {
        int64_t n = 1;
        for (int l : levels) n *= l;
        return n;
    }
    void validate() const;
};

struct TokenSequence {
    std::vector<int64_t> ids;  // in [0, codebook_size)
    int n_tokens = 0;          // N
    double ratio = 1.0;        // R
    int t_frames = 0;          // source feature frame count
    std::string utterance_id;
};

// mixed-radix code indexing, dimension 0 least significant
int64_t digits_to_id(const std::vector<int>& digits, const FsqConfig& cfg);
std::vector<int> id_to_digits(int64_t id, const FsqConfig& cfg);

// rounding stage on bounded values: round-half-up clamped to [0, L-1].
// Idempotent on the digit grid.
std::vector<int> quantize_bounded(const std::vector<double>& bounded, const FsqConfig& cfg);

struct QuantizeResult {
    std::vector<int> digits;
    Tensor code_vector;  // 1 x model_dim, after the output projection
    int64_t id = 0;
};

// FSQ bottleneck: model_dim -> levels.size() projection, tanh bound to
// [0, L-1] per dimension, straight-through rounding, output projection back.
class Fsq {
public:
    Fsq(FsqConfig cfg, int model_dim) : cfg_(cfg), dim_(model_dim) { cfg_.validate(); }

    void init(ParamStore& ps, Rng& rng) const;

    struct SeqResult {
        Value codes;                // N x model_dim, straight-through gradient
        std::vector<int64_t> ids;   // N
    };
    // c: (N x model_dim) merged vectors. With quantized=false the rounding is
    // skipped and the bounded values pass through directly (the smooth model
    // whose gradient the straight-through estimator copies); ids are still
    // the rounded codes.
    SeqResult forward(Binder& P, Value c, bool quantized = true) const;

    QuantizeResult quantize(const ParamStore& ps, const std::vector<double>& c) const;
    // digit grid point -> output projection; deterministic
    std::vector<double> dequantize(const ParamStore& ps, int64_t id) const;

    const FsqConfig& config() const { return cfg_; }
    int model_dim() const { return dim_; }

private:
    Value bound(Graph& g, Value x) const;  // tanh -> [0, L-1] per dimension
    FsqConfig cfg_;
    int dim_;
};

}  // namespace dyntok
