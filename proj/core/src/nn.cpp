// SPDX-License-Identifier: Apache-2.0

#include "dyntok/nn.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "dyntok/errors.hpp"

namespace dyntok {

// ---------------------------------------------------------------------------
// ParamStore
// ---------------------------------------------------------------------------

Tensor& ParamStore::add(const std::string& name, Tensor init) {
    if (map_.count(name)) throw config_error("duplicate parameter: " + name);
    order_.push_back(name);
    Entry e;
    e.m = Tensor::zeros(init.rows, init.cols);
    e.v = Tensor::zeros(init.rows, init.cols);
    e.value = std::move(init);
    auto [it, ok] = map_.emplace(name, std::move(e));
    (void)ok;
    return it->second.value;
}

Tensor& ParamStore::get(const std::string& name) {
    auto it = map_.find(name);
    if (it == map_.end()) throw config_error("unknown parameter: " + name);
    return it->second.value;
}

const Tensor& ParamStore::get(const std::string& name) const {
    auto it = map_.find(name);
    if (it == map_.end()) throw config_error("unknown parameter: " + name);
    return it->second.value;
}

ParamStore::Entry& ParamStore::entry(const std::string& name) {
    auto it = map_.find(name);
    if (it == map_.end()) throw config_error("unknown parameter: " + name);
    return it->second;
}

int64_t ParamStore::scalar_count() const {
    int64_t n = 0;
    for (const auto& name : order_) n += map_.at(name).value.numel();
    return n;
}

uint64_t ParamStore::checksum() const { return checksum(""); }

uint64_t ParamStore::checksum(const std::string& prefix) const {
    uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const void* p, size_t n) {
        const unsigned char* b = static_cast<const unsigned char*>(p);
        for (size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 1099511628211ULL;
        }
    };
    for (const auto& name : order_) {
        if (name.rfind(prefix, 0) != 0) continue;
        mix(name.data(), name.size());
        const Tensor& t = map_.at(name).value;
        mix(t.v.data(), t.v.size() * sizeof(double));
    }
    return h;
}

// ---------------------------------------------------------------------------
// GradMap
// ---------------------------------------------------------------------------

void GradMap::add(const std::string& name, const Tensor& g) {
    auto it = g_.find(name);
    if (it == g_.end()) {
        g_.emplace(name, g);
        return;
    }
    if (!it->second.same_shape(g)) throw config_error("grad shape mismatch: " + name);
    for (int64_t i = 0; i < g.numel(); ++i) it->second.v[i] += g.v[i];
}

void GradMap::add_scaled(const GradMap& other, double k) {
    for (const auto& [name, g] : other.g_) {
        auto it = g_.find(name);
        if (it == g_.end()) {
            Tensor t = g;
            for (auto& x : t.v) x *= k;
            g_.emplace(name, std::move(t));
        } else {
            for (int64_t i = 0; i < g.numel(); ++i) it->second.v[i] += k * g.v[i];
        }
    }
}

Tensor* GradMap::find(const std::string& name) {
    auto it = g_.find(name);
    return it == g_.end() ? nullptr : &it->second;
}

double GradMap::global_norm() const {
    double s = 0.0;
    for (const auto& [name, g] : g_)
        for (double x : g.v) s += x * x;
    return std::sqrt(s);
}

void GradMap::scale(double k) {
    for (auto& [name, g] : g_)
        for (auto& x : g.v) x *= k;
}

// ---------------------------------------------------------------------------
// Binder
// ---------------------------------------------------------------------------

Value Binder::operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    Value v = g_.input(store_.get(name), trainable_);
    bound_.emplace(name, v);
    return v;
}

void Binder::collect(GradMap& out) const {
    for (const auto& [name, node] : bound_)
        if (node->needs_grad) out.add(name, node->grad);
}

// ---------------------------------------------------------------------------
// initializers
// ---------------------------------------------------------------------------

namespace {
Tensor normal_init(Rng& rng, int rows, int cols, double stddev) {
    Tensor t(rows, cols);
    for (auto& x : t.v) x = rng.normal(0.0, stddev);
    return t;
}
}  // namespace

void init_linear(ParamStore& ps, Rng& rng, const std::string& prefix, int in, int out,
                 double bias_init) {
    ps.add(prefix + ".w", normal_init(rng, in, out, 1.0 / std::sqrt(static_cast<double>(in))));
    ps.add(prefix + ".b", Tensor::full(1, out, bias_init));
}

void init_conv1d(ParamStore& ps, Rng& rng, const std::string& prefix, int kernel, int cin,
                 int cout, double bias_init) {
    ps.add(prefix + ".w",
           normal_init(rng, kernel * cin, cout, 1.0 / std::sqrt(static_cast<double>(kernel * cin))));
    ps.add(prefix + ".b", Tensor::full(1, cout, bias_init));
}

void init_layer_norm(ParamStore& ps, const std::string& prefix, int dim) {
    ps.add(prefix + ".g", Tensor::full(1, dim, 1.0));
    ps.add(prefix + ".b", Tensor::zeros(1, dim));
}

void init_embedding(ParamStore& ps, Rng& rng, const std::string& prefix, int vocab, int dim) {
    ps.add(prefix + ".table", normal_init(rng, vocab, dim, 0.02));
}

void init_snake(ParamStore& ps, const std::string& prefix, int dim) {
    ps.add(prefix + ".a", Tensor::full(1, dim, 1.0));
}

void init_attention(ParamStore& ps, Rng& rng, const std::string& prefix, int dim) {
    init_linear(ps, rng, prefix + ".q", dim, dim);
    init_linear(ps, rng, prefix + ".k", dim, dim);
    init_linear(ps, rng, prefix + ".v", dim, dim);
    init_linear(ps, rng, prefix + ".o", dim, dim);
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

Value linear(Binder& P, Value x, const std::string& prefix) {
    Graph& g = P.graph();
    return g.add_rowvec(g.matmul(x, P(prefix + ".w")), P(prefix + ".b"));
}

Value conv1d_layer(Binder& P, Value x, const std::string& prefix, int kernel, int stride,
                   int pad) {
    Graph& g = P.graph();
    return g.conv1d(x, P(prefix + ".w"), P(prefix + ".b"), kernel, stride, pad);
}

Value conv1d_transpose_layer(Binder& P, Value x, const std::string& prefix, int kernel,
                             int stride, int pad) {
    Graph& g = P.graph();
    return g.conv1d_transpose(x, P(prefix + ".w"), P(prefix + ".b"), kernel, stride, pad);
}

Value layer_norm_layer(Binder& P, Value x, const std::string& prefix) {
    Graph& g = P.graph();
    return g.layer_norm(x, P(prefix + ".g"), P(prefix + ".b"));
}

Value embedding_lookup(Binder& P, const std::string& prefix, const std::vector<int>& ids) {
    Graph& g = P.graph();
    return g.gather_rows(P(prefix + ".table"), ids);
}

Value snake(Binder& P, Value x, const std::string& prefix) {
    Graph& g = P.graph();
    Value a = P(prefix + ".a");
    Value s = g.sin_(g.mul_rowvec(x, a));
    return g.add(x, g.mul_rowvec(g.mul(s, s), g.recip(a)));
}

Value attention(Binder& P, Value xq, Value xkv, const std::string& prefix, int n_heads,
                bool causal) {
    Graph& g = P.graph();
    const int d = xq->val.cols;
    if (d % n_heads != 0) throw config_error("attention: dim not divisible by heads");
    const int dh = d / n_heads;
    Value q = linear(P, xq, prefix + ".q");
    Value k = linear(P, xkv, prefix + ".k");
    Value v = linear(P, xkv, prefix + ".v");
    const int tq = q->val.rows, tk = k->val.rows;
    Tensor mask = Tensor::full(tq, tk, 1.0);
    if (causal) {
        if (tq != tk) throw config_error("causal attention needs square mask");
        for (int i = 0; i < tq; ++i)
            for (int j = i + 1; j < tk; ++j) mask.at(i, j) = 0.0;
    }
    std::vector<Value> heads;
    heads.reserve(n_heads);
    for (int h = 0; h < n_heads; ++h) {
        Value qh = g.slice_cols(q, h * dh, (h + 1) * dh);
        Value kh = g.slice_cols(k, h * dh, (h + 1) * dh);
        Value vh = g.slice_cols(v, h * dh, (h + 1) * dh);
        Value scores = g.scale(g.matmul(qh, g.transpose(kh)), 1.0 / std::sqrt(double(dh)));
        Value probs = g.row_softmax_masked(scores, mask);
        heads.push_back(g.matmul(probs, vh));
    }
    return linear(P, g.concat_cols(heads), prefix + ".o");
}

Tensor sinusoidal_positions(int T, int D) {
    if (D % 2 != 0) throw config_error("positional table needs even dim");
    Tensor t(T, D);
    for (int pos = 0; pos < T; ++pos) {
        for (int i = 0; i < D / 2; ++i) {
            const double rate = std::pow(10000.0, -2.0 * i / D);
            t.at(pos, 2 * i) = std::sin(pos * rate);
            t.at(pos, 2 * i + 1) = std::cos(pos * rate);
        }
    }
    return t;
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

void Adam::step(ParamStore& ps, const GradMap& grads, double lr,
                const std::function<double(const std::string&)>& lr_scale) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (const auto& [name, g] : grads.entries()) {
        auto& e = ps.entry(name);
        if (!e.value.same_shape(g)) throw config_error("adam shape mismatch: " + name);
        const double rate = lr_scale ? lr * lr_scale(name) : lr;
        for (int64_t i = 0; i < g.numel(); ++i) {
            e.m.v[i] = cfg_.beta1 * e.m.v[i] + (1.0 - cfg_.beta1) * g.v[i];
            e.v.v[i] = cfg_.beta2 * e.v.v[i] + (1.0 - cfg_.beta2) * g.v[i] * g.v[i];
            const double mhat = e.m.v[i] / bc1;
            const double vhat = e.v.v[i] / bc2;
            e.value.v[i] -= rate * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
}

double clip_global_norm(GradMap& grads, double clip) {
    const double norm = grads.global_norm();
    if (norm > clip && norm > 0.0) grads.scale(clip / norm);
    return norm;
}

}  // namespace dyntok
