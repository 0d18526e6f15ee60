// SPDX-License-Identifier: Apache-2.0

#include "dyntok/fsq.hpp"

#include <cmath>

#include "dyntok/errors.hpp"

namespace dyntok {

void FsqConfig::validate() const {
    if (levels.empty()) throw config_error("fsq: empty level list");
    for (int l : levels)
        if (l < 2) throw config_error("fsq: every level count must be >= 2");
}

int64_t digits_to_id(const std::vector<int>& digits, const FsqConfig& cfg) {
    if (digits.size() != cfg.levels.size()) throw input_error("fsq: digit count mismatch");
    int64_t id = 0;
    int64_t radix = 1;
    for (size_t i = 0; i < digits.size(); ++i) {
        if (digits[i] < 0 || digits[i] >= cfg.levels[i])
            throw input_error("fsq: digit out of range");
        id += digits[i] * radix;
        radix *= cfg.levels[i];
    }
    return id;
}

std::vector<int> id_to_digits(int64_t id, const FsqConfig& cfg) {
    if (id < 0 || id >= cfg.codebook_size()) throw input_error("fsq: id out of range");
    std::vector<int> digits(cfg.levels.size());
    for (size_t i = 0; i < cfg.levels.size(); ++i) {
        digits[i] = static_cast<int>(id % cfg.levels[i]);
        id /= cfg.levels[i];
    }
    return digits;
}

std::vector<int> quantize_bounded(const std::vector<double>& bounded, const FsqConfig& cfg) {
    if (bounded.size() != cfg.levels.size()) throw input_error("fsq: bounded size mismatch");
    std::vector<int> digits(bounded.size());
    for (size_t i = 0; i < bounded.size(); ++i) {
        int d = static_cast<int>(std::floor(bounded[i] + 0.5));
        if (d < 0) d = 0;
        if (d >= cfg.levels[i]) d = cfg.levels[i] - 1;
        digits[i] = d;
    }
    return digits;
}

void Fsq::init(ParamStore& ps, Rng& rng) const {
    init_linear(ps, rng, "fsq.in", dim_, cfg_.dim());
    init_linear(ps, rng, "fsq.out", cfg_.dim(), dim_);
}

Value Fsq::bound(Graph& g, Value x) const {
    Tensor half_span(1, cfg_.dim());
    for (int i = 0; i < cfg_.dim(); ++i) half_span.at(0, i) = (cfg_.levels[i] - 1) / 2.0;
    return g.mul_rowvec(g.add_scalar(g.tanh_(x), 1.0), g.constant(std::move(half_span)));
}

Fsq::SeqResult Fsq::forward(Binder& P, Value c, bool quantized) const {
    Graph& g = P.graph();
    Value bounded = bound(g, linear(P, c, "fsq.in"));
    Value digits = quantized ? g.round_half_up_ste(bounded) : bounded;
    SeqResult r;
    r.codes = linear(P, digits, "fsq.out");
    r.ids.resize(bounded->val.rows);
    std::vector<int> d(cfg_.dim());
    for (int j = 0; j < bounded->val.rows; ++j) {
        for (int i = 0; i < cfg_.dim(); ++i) {
            int di = static_cast<int>(std::floor(bounded->val.at(j, i) + 0.5));
            if (di < 0) di = 0;
            if (di >= cfg_.levels[i]) di = cfg_.levels[i] - 1;
            d[i] = di;
        }
        r.ids[j] = digits_to_id(d, cfg_);
    }
    return r;
}

QuantizeResult Fsq::quantize(const ParamStore& ps, const std::vector<double>& c) const {
    if (static_cast<int>(c.size()) != dim_) throw input_error("fsq: vector width mismatch");
    Graph g;
    Binder P(g, ps, /*trainable=*/false);
    Tensor row(1, dim_);
    for (int i = 0; i < dim_; ++i) row.at(0, i) = c[i];
    SeqResult r = forward(P, g.constant(std::move(row)));
    QuantizeResult q;
    q.id = r.ids[0];
    q.digits = id_to_digits(q.id, cfg_);
    q.code_vector = r.codes->val;
    return q;
}

std::vector<double> Fsq::dequantize(const ParamStore& ps, int64_t id) const {
    const auto digits = id_to_digits(id, cfg_);  // validates range
    Graph g;
    Binder P(g, ps, /*trainable=*/false);
    Tensor row(1, cfg_.dim());
    for (int i = 0; i < cfg_.dim(); ++i) row.at(0, i) = digits[i];
    Value out = linear(P, g.constant(std::move(row)), "fsq.out");
    return out->val.v;
}

}  // namespace dyntok
