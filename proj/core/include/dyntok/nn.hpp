// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "dyntok/autograd.hpp"
#include "dyntok/rng.hpp"
#include "dyntok/tensor.hpp"

namespace dyntok {

// Named parameter tensors plus Adam moment slots. Registration order is fixed
// by construction order, which makes init and updates deterministic.
class ParamStore {
public:
    struct Entry {
        Tensor value;
        Tensor m;  // Adam first moment
        Tensor v;  // Adam second moment
    };

    Tensor& add(const std::string& name, Tensor init);
    Tensor& get(const std::string& name);
    const Tensor& get(const std::string& name) const;
    Entry& entry(const std::string& name);
    bool has(const std::string& name) const { return map_.count(name) != 0; }

    const std::vector<std::string>& names() const { return order_; }
    int64_t scalar_count() const;

    // FNV-1a over the exact value bytes; used for freeze contracts.
    uint64_t checksum() const;
    // checksum restricted to names with the given prefix
    uint64_t checksum(const std::string& prefix) const;

private:
    std::vector<std::string> order_;
    std::unordered_map<std::string, Entry> map_;
};

// Gradient accumulator keyed by parameter name.
class GradMap {
public:
    void add(const std::string& name, const Tensor& g);
    void add_scaled(const GradMap& other, double k);
    Tensor* find(const std::string& name);
    const std::map<std::string, Tensor>& entries() const { return g_; }
    double global_norm() const;
    void scale(double k);
    void clear() { g_.clear(); }

private:
    std::map<std::string, Tensor> g_;
};

// Binds store parameters into a graph as leaf nodes (one node per name) and
// collects their grads after backward().
class Binder {
public:
    Binder(Graph& g, const ParamStore& store, bool trainable = true)
        : g_(g), store_(store), trainable_(trainable) {}

    Value operator()(const std::string& name);
    void collect(GradMap& out) const;

    Graph& graph() { return g_; }

private:
    Graph& g_;
    const ParamStore& store_;
    bool trainable_;
    std::map<std::string, Value> bound_;
};

// ---------------------------------------------------------------------------
// initializers (registration order = call order)
// ---------------------------------------------------------------------------

void init_linear(ParamStore& ps, Rng& rng, const std::string& prefix, int in, int out,
                 double bias_init = 0.0);
void init_conv1d(ParamStore& ps, Rng& rng, const std::string& prefix, int kernel, int cin,
                 int cout, double bias_init = 0.0);
void init_layer_norm(ParamStore& ps, const std::string& prefix, int dim);
void init_embedding(ParamStore& ps, Rng& rng, const std::string& prefix, int vocab, int dim);

// ---------------------------------------------------------------------------
// graph-building layer helpers
// ---------------------------------------------------------------------------

Value linear(Binder& P, Value x, const std::string& prefix);
Value conv1d_layer(Binder& P, Value x, const std::string& prefix, int kernel, int stride,
                   int pad);
Value conv1d_transpose_layer(Binder& P, Value x, const std::string& prefix, int kernel,
                             int stride, int pad);
Value layer_norm_layer(Binder& P, Value x, const std::string& prefix);
Value embedding_lookup(Binder& P, const std::string& prefix, const std::vector<int>& ids);

// Multi-head attention block: queries from xq (Tq x D), keys/values from xkv
// (Tk x D). If causal, position i may attend only to j <= i (requires Tq==Tk).
Value attention(Binder& P, Value xq, Value xkv, const std::string& prefix, int n_heads,
                bool causal);

void init_attention(ParamStore& ps, Rng& rng, const std::string& prefix, int dim);

// Snake activation x + sin^2(a*x)/a with per-channel trainable a.
Value snake(Binder& P, Value x, const std::string& prefix);
void init_snake(ParamStore& ps, const std::string& prefix, int dim);

// Fixed sinusoidal positional table (T x D), D even.
Tensor sinusoidal_positions(int T, int D);

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}
    // applies one update with the given learning rate; increments step count.
    // lr_scale, when given, multiplies the rate per parameter name.
    void step(ParamStore& ps, const GradMap& grads, double lr,
              const std::function<double(const std::string&)>& lr_scale = {});
    int64_t steps_taken() const { return t_; }

private:
    AdamConfig cfg_;
    int64_t t_ = 0;
};

// Rescales grads in place so the post-clip global norm is exactly min(norm,
// clip). Returns the pre-clip norm.
double clip_global_norm(GradMap& grads, double clip);

}  // namespace dyntok
