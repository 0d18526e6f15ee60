// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "dyntok/tensor.hpp"

namespace dyntok {

// One node of a reverse-mode tape. Values are computed eagerly when the op is
// built; backward closures accumulate into parent grads.
struct Node {
    Tensor val;
    Tensor grad;  // allocated only when needs_grad
    bool needs_grad = false;
    std::function<void()> back;
};

using Value = Node*;

// A single-use computation graph (tape). Creation order is a topological
// order, so backward() is a reverse sweep. Graphs are cheap and rebuilt per
// forward pass; they are not thread-safe, but independent graphs may be used
// concurrently.
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Value constant(Tensor t) { return make(std::move(t), false); }
    Value input(Tensor t, bool needs_grad) { return make(std::move(t), needs_grad); }

    // --- elementwise ---
    Value add(Value a, Value b);
    Value sub(Value a, Value b);
    Value mul(Value a, Value b);
    Value scale(Value a, double k);
    Value add_scalar(Value a, double k);
    // out = x * s elementwise where s is a (1 x 1) node
    Value mul_scalar_node(Value x, Value s);
    Value relu(Value a);
    Value sigmoid(Value a);
    Value tanh_(Value a);
    Value exp_(Value a);
    Value log_(Value a);
    Value sin_(Value a);
    Value abs_(Value a);
    Value recip(Value a);

    // --- shape / selection ---
    Value transpose(Value a);
    Value slice_rows(Value a, int r0, int r1);
    Value slice_cols(Value a, int c0, int c1);
    Value concat_cols(const std::vector<Value>& xs);
    Value concat_rows(const std::vector<Value>& xs);
    Value gather_rows(Value a, std::vector<int> idx);

    // --- broadcast over rows (v is 1 x C) ---
    Value add_rowvec(Value x, Value v);
    Value mul_rowvec(Value x, Value v);

    // --- reductions ---
    Value sum_all(Value a);
    Value mean_all(Value a);
    Value mean_over_rows(Value a);  // (T x C) -> (1 x C)
    Value cumsum_rows(Value a);     // column vector prefix sums

    // --- linear algebra ---
    Value matmul(Value a, Value b);

    // --- neural net ---
    // x: (T x Cin), w: ((K*Cin) x Cout), b: (1 x Cout)
    Value conv1d(Value x, Value w, Value b, int kernel, int stride, int pad);
    // out rows = (T-1)*stride + kernel - 2*pad
    Value conv1d_transpose(Value x, Value w, Value b, int kernel, int stride, int pad);
    Value row_log_softmax(Value a);
    // mask: (rows x cols) of 0/1; masked-out entries get zero probability.
    Value row_softmax_masked(Value a, Tensor mask);
    Value layer_norm(Value x, Value gain, Value bias, double eps = 1e-5);
    // -(1/count) * sum_{i<count} logp[i, ids[i]]
    Value nll_from_log_probs(Value logp, std::vector<int> ids, int count);

    // --- domain-specific ---
    // Straight-through round-half-up: forward floor(x+0.5), backward identity.
    Value round_half_up_ste(Value a);
    // Soft integrate-and-fire frame->token allocation. alpha_hat: (T x 1)
    // scaled weights summing to n_tokens*theta. Returns W: (T x n_tokens);
    // W[t][j] is the overlap of frame t's mass interval with token j's band.
    Value fire_allocation(Value alpha_hat, double theta, int n_tokens);
    // CTC negative log-likelihood via the forward DP in log space.
    // log_probs: (L x K) log-softmax rows; blank is a class index.
    Value ctc_loss(Value log_probs, std::vector<int> target, int blank);

    void backward(Value loss);

    size_t size() const { return nodes_.size(); }

private:
    Value make(Tensor val, bool needs_grad);
    std::vector<std::unique_ptr<Node>> nodes_;
};

}  // namespace dyntok
