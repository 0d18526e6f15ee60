// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>

#include "dyntok/decoders.hpp"
#include "dyntok/errors.hpp"
#include "test_util.hpp"

using namespace dyntok;
using namespace dyntok::testutil;

namespace {

std::vector<int> collapse_path(const std::vector<int>& path, int blank) {
    std::vector<int> out;
    int prev = -1;
    for (int p : path) {
        if (p != blank && p != prev) out.push_back(p);
        prev = p;
    }
    return out;
}

// exhaustive path enumeration: P(target) = sum over all frame paths whose
// collapse equals the target
double brute_force_ctc(const Tensor& log_probs, const std::vector<int>& target, int blank) {
    const int l = log_probs.rows;
    const int k = log_probs.cols;
    int64_t n_paths = 1;
    for (int t = 0; t < l; ++t) n_paths *= k;
    double total = 0.0;
    std::vector<int> path(l);
    for (int64_t code = 0; code < n_paths; ++code) {
        int64_t c = code;
        double lp = 0.0;
        for (int t = 0; t < l; ++t) {
            path[t] = static_cast<int>(c % k);
            c /= k;
            lp += log_probs.at(t, path[t]);
        }
        if (collapse_path(path, blank) == target) total += std::exp(lp);
    }
    return -std::log(total);
}

Tensor random_log_probs(int l, int k, Rng& rng) {
    Graph g;
    return g.row_log_softmax(g.constant(random_tensor(l, k, rng)))->val;
}

double graph_ctc(const Tensor& log_probs, const std::vector<int>& target, int blank) {
    Graph g;
    return g.ctc_loss(g.constant(log_probs), target, blank)->val.item();
}

}  // namespace

TEST_CASE("single-frame uniform ctc equals ln 3") {
    Tensor lp = Tensor::full(1, 3, std::log(1.0 / 3.0));
    CHECK(graph_ctc(lp, {0}, 2) == doctest::Approx(std::log(3.0)).epsilon(1e-12));
}

TEST_CASE("probability-one alignment gives zero loss") {
    // frames emit a, blank, blank with certainty
    Tensor lp = Tensor::full(3, 3, -1e9);
    lp.at(0, 0) = 0.0;
    lp.at(1, 2) = 0.0;
    lp.at(2, 2) = 0.0;
    CHECK(graph_ctc(lp, {0}, 2) == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("forward DP matches exhaustive enumeration on random small instances") {
    Rng rng(31);
    int checked = 0;
    while (checked < 200) {
        const int l = static_cast<int>(rng.uniform_int(1, 6));
        const int v = static_cast<int>(rng.uniform_int(1, 3));  // symbols, blank = v
        const int tgt_len = static_cast<int>(rng.uniform_int(1, 3));
        std::vector<int> target(tgt_len);
        for (auto& s : target) s = static_cast<int>(rng.uniform_int(0, v - 1));
        int required = tgt_len;
        for (int i = 1; i < tgt_len; ++i)
            if (target[i] == target[i - 1]) ++required;
        const Tensor lp = random_log_probs(l, v + 1, rng);
        if (l < required) {
            CHECK_THROWS_AS(graph_ctc(lp, target, v), input_error);
            continue;
        }
        const double dp = graph_ctc(lp, target, v);
        const double brute = brute_force_ctc(lp, target, v);
        CHECK(dp == doctest::Approx(brute).epsilon(1e-8));
        ++checked;
    }
}

TEST_CASE("ctc gradient matches finite differences") {
    Rng rng(32);
    const Tensor logits = random_tensor(5, 4, rng);
    const std::vector<int> target{0, 2, 0};
    const auto rep = fd_check_inputs(
        [&target](Graph& g, std::vector<Value>& in) {
            Value lp = g.row_log_softmax(in[0]);
            return g.ctc_loss(lp, target, 3);
        },
        {logits});
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("greedy decode collapses repeats and drops blanks") {
    const int blank = 2;
    auto from_path = [&](const std::vector<int>& path) {
        Tensor lp = Tensor::full(static_cast<int>(path.size()), 3, -10.0);
        for (size_t t = 0; t < path.size(); ++t) lp.at(static_cast<int>(t), path[t]) = -0.1;
        return ctc_greedy_decode(lp, blank);
    };
    CHECK(from_path({0, 0, 2, 1}) == std::vector<int>{0, 1});
    CHECK(from_path({2, 2, 2}) == std::vector<int>{});
    CHECK(from_path({0, 2, 0}) == std::vector<int>{0, 0});
}

TEST_CASE("ctc head rows are normalized; zero head is uniform") {
    VocabConfig vocab{4};
    CtcHead head(vocab, 6, 8);
    ParamStore ps;
    Rng rng(33);
    head.init(ps, rng);

    Graph g;
    Binder P(g, ps, false);
    Value lp = head.logits(P, g.constant(random_tensor(9, 6, rng)));
    REQUIRE(lp->val.cols == 5);
    for (int r = 0; r < lp->val.rows; ++r) {
        double s = 0.0;
        for (int c = 0; c < lp->val.cols; ++c) s += std::exp(lp->val.at(r, c));
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }

    for (const auto& name : ps.names())
        for (auto& x : ps.get(name).v) x = 0.0;
    Graph g2;
    Binder P2(g2, ps, false);
    Value lp2 = head.logits(P2, g2.constant(random_tensor(4, 6, rng)));
    for (double x : lp2->val.v) CHECK(x == doctest::Approx(-std::log(5.0)).epsilon(1e-12));
}

// ---------------------------------------------------------------------------
// attention decoder
// ---------------------------------------------------------------------------

namespace {
AttentionDecoder::Config tiny_attn() {
    AttentionDecoder::Config cfg;
    cfg.dim = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.ffn_mult = 2;
    return cfg;
}
}  // namespace

TEST_CASE("zeroed output head gives the uniform cross-entropy") {
    VocabConfig vocab{4};  // V+2 = 6 classes
    AttentionDecoder dec(vocab, tiny_attn());
    ParamStore ps;
    Rng rng(34);
    dec.init(ps, rng);
    for (auto& x : ps.get("attn.out.w").v) x = 0.0;
    for (auto& x : ps.get("attn.out.b").v) x = 0.0;
    Graph g;
    Binder P(g, ps, false);
    Value memory = g.constant(random_tensor(5, 8, rng));
    Value loss = dec.loss(P, memory, {0, 2, 1});
    CHECK(loss->val.item() == doctest::Approx(std::log(6.0)).epsilon(1e-12));
}

TEST_CASE("attention loss ignores masked padding after the end marker") {
    VocabConfig vocab{4};
    AttentionDecoder dec(vocab, tiny_attn());
    ParamStore ps;
    Rng rng(35);
    dec.init(ps, rng);
    Graph g;
    Binder P(g, ps, false);
    Value memory = g.constant(random_tensor(6, 8, rng));
    const std::vector<int> target{1, 3, 0, 2};
    const double plain = dec.loss(P, memory, target, 0)->val.item();
    const double padded = dec.loss(P, memory, target, 3)->val.item();
    CHECK(plain == padded);  // bitwise: pads sit behind the causal mask
}

TEST_CASE("attention loss rejects empty or out-of-vocab targets") {
    VocabConfig vocab{4};
    AttentionDecoder dec(vocab, tiny_attn());
    ParamStore ps;
    Rng rng(36);
    dec.init(ps, rng);
    Graph g;
    Binder P(g, ps, false);
    Value memory = g.constant(random_tensor(3, 8, rng));
    CHECK_THROWS_AS(dec.loss(P, memory, {}), input_error);
    CHECK_THROWS_AS(dec.loss(P, memory, {4}), input_error);  // start marker id
}

TEST_CASE("attention loss differentiates through memory and parameters") {
    VocabConfig vocab{3};
    AttentionDecoder dec(vocab, tiny_attn());
    ParamStore ps;
    Rng rng(37);
    dec.init(ps, rng);
    const Tensor memory = random_tensor(4, 8, rng, 0.5);
    const std::vector<int> target{0, 2};

    auto rep = fd_check_params(
        [&](Graph& g, Binder& P) { return dec.loss(P, g.constant(memory), target); }, ps, 1e-6);
    CHECK(rep.max_rel_err < 1e-4);

    auto rep2 = fd_check_inputs(
        [&](Graph& g, std::vector<Value>& in) {
            Binder P(g, ps, false);
            return dec.loss(P, in[0], target);
        },
        {memory});
    CHECK(rep2.max_rel_err < 1e-4);
}

// ---------------------------------------------------------------------------
// recon decoder
// ---------------------------------------------------------------------------

TEST_CASE("recon decoder length contract") {
    ReconConfig cfg;
    cfg.hidden = 8;
    cfg.n_blocks = 1;
    cfg.upsample_strides = {2};
    ReconDecoder dec(cfg, 6, 4);
    ParamStore ps;
    Rng rng(38);
    dec.init(ps, rng);
    Graph g;
    Binder P(g, ps, false);
    for (int t : {1, 2, 3, 7, 50}) {
        Value out = dec.forward(P, g.constant(random_tensor(t, 6, rng)));
        CHECK(out->val.rows == 2 * t);
        CHECK(out->val.cols == 4);
    }

    ReconConfig triple;
    triple.hidden = 8;
    triple.n_blocks = 1;
    triple.upsample_strides = {2, 2, 2};
    CHECK(triple.total_upsample() == 8);
    ReconDecoder dec8(triple, 6, 4);
    ParamStore ps8;
    dec8.init(ps8, rng);
    Graph g8;
    Binder P8(g8, ps8, false);
    CHECK(dec8.forward(P8, g8.constant(random_tensor(5, 6, rng)))->val.rows == 40);
}

TEST_CASE("zero final layer emits a constant") {
    ReconConfig cfg;
    cfg.hidden = 8;
    cfg.n_blocks = 1;
    cfg.out_scale = 1.0;
    cfg.out_offset = 0.0;
    ReconDecoder dec(cfg, 6, 4);
    ParamStore ps;
    Rng rng(39);
    dec.init(ps, rng);
    for (auto& x : ps.get("recon.head.w").v) x = 0.0;
    Tensor& b = ps.get("recon.head.b");
    for (int c = 0; c < 4; ++c) b.at(0, c) = 0.25 * c;
    Graph g;
    Binder P(g, ps, false);
    Value out = dec.forward(P, g.constant(random_tensor(6, 6, rng)));
    for (int r = 0; r < out->val.rows; ++r)
        for (int c = 0; c < 4; ++c) CHECK(out->val.at(r, c) == doctest::Approx(0.25 * c));
}

TEST_CASE("recon gradient w.r.t. input matches finite differences") {
    ReconConfig cfg;
    cfg.hidden = 6;
    cfg.n_blocks = 1;
    ReconDecoder dec(cfg, 5, 3);
    ParamStore ps;
    Rng rng(40);
    dec.init(ps, rng);
    const Tensor u = random_tensor(5, 5, rng, 0.5);
    auto rep = fd_check_inputs(
        [&](Graph& g, std::vector<Value>& in) {
            Binder P(g, ps, false);
            Value out = dec.forward(P, in[0]);
            return g.mean_all(g.mul(out, out));
        },
        {u});
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("loss_recon identities") {
    Rng rng(41);
    const Tensor a = random_tensor(6, 4, rng);
    Tensor b = a;
    CHECK(loss_recon(a, b) == 0.0);
    for (auto& x : b.v) x += 1.0;
    CHECK(loss_recon(b, a) == doctest::Approx(1.0).epsilon(1e-12));
    // MSE is quadratic in the residual
    Tensor c = a, d = a;
    for (int64_t i = 0; i < a.numel(); ++i) {
        c.v[i] += 0.5;
        d.v[i] += 1.0;
    }
    CHECK(loss_recon(d, a) == doctest::Approx(4.0 * loss_recon(c, a)).epsilon(1e-12));
    CHECK_THROWS_AS(loss_recon(Tensor(2, 3), Tensor(3, 2)), input_error);
}
