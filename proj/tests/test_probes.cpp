// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <map>
#include <set>

#include "dyntok/corpus.hpp"
#include "dyntok/errors.hpp"
#include "dyntok/probes.hpp"
#include "test_util.hpp"

using namespace dyntok;
using namespace dyntok::testutil;

// ---------------------------------------------------------------------------
// flow matching
// ---------------------------------------------------------------------------

TEST_CASE("euler recovers x1 exactly under the constant oracle field") {
    Rng rng(61);
    const Tensor x1 = random_tensor(6, 3, rng);
    const Tensor x0 = random_tensor(6, 3, rng);
    Tensor diff(6, 3);
    for (int64_t i = 0; i < diff.numel(); ++i) diff.v[i] = x1.v[i] - x0.v[i];
    FieldFn oracle = [&diff](const Tensor&, double, const Tensor&) { return diff; };
    for (int steps : {1, 3, 7, 32}) {
        const Tensor out = fm_sample(oracle, x0, Tensor(), steps);
        for (int64_t i = 0; i < out.numel(); ++i)
            CHECK(out.v[i] == doctest::Approx(x1.v[i]).epsilon(1e-12));
    }
}

TEST_CASE("single euler step is x0 plus the field at the origin") {
    Rng rng(62);
    const Tensor x0 = random_tensor(2, 2, rng);
    FieldFn field = [](const Tensor& x, double t, const Tensor&) {
        Tensor v = x;
        for (auto& e : v.v) e = 2.0 * e + t;
        return v;
    };
    const Tensor out = fm_sample(field, x0, Tensor(), 1);
    for (int64_t i = 0; i < out.numel(); ++i)
        CHECK(out.v[i] == doctest::Approx(x0.v[i] + 2.0 * x0.v[i]).epsilon(1e-12));
    CHECK_THROWS_AS(fm_sample(field, x0, Tensor(), 0), input_error);
}

TEST_CASE("fm_loss is deterministic under a fixed seed and penalizes the zero field") {
    FlowFieldConfig cfg;
    cfg.x_dim = 4;
    cfg.hidden = 8;
    FlowField field(cfg);
    ParamStore ps;
    Rng rng(63);
    field.init(ps, rng);
    const Tensor x1 = random_tensor(5, 4, rng);

    auto eval = [&] {
        Graph g;
        Binder P(g, ps, false);
        return fm_loss(P, field, Tensor(), x1, 99)->val.item();
    };
    CHECK(eval() == eval());

    // zero parameters give v == 0, so the loss is mean ||x1 - x0||^2 at the
    // seeded draw
    for (const auto& name : ps.names())
        for (auto& x : ps.get(name).v) x = 0.0;
    Rng noise(99);
    const double t = noise.uniform();
    (void)t;
    Tensor x0(5, 4);
    for (auto& e : x0.v) e = noise.normal();
    double expect = 0.0;
    for (int64_t i = 0; i < x1.numel(); ++i) {
        const double d = x1.v[i] - x0.v[i];
        expect += d * d;
    }
    expect /= x1.numel();
    CHECK(eval() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("fm_loss rejects mismatched condition grids") {
    FlowFieldConfig cfg;
    cfg.x_dim = 3;
    cfg.cond_dim = 2;
    cfg.hidden = 8;
    FlowField field(cfg);
    ParamStore ps;
    Rng rng(64);
    field.init(ps, rng);
    Graph g;
    Binder P(g, ps, false);
    const Tensor x1 = random_tensor(4, 3, rng);
    CHECK_THROWS_AS(fm_loss(P, field, random_tensor(5, 2, rng), x1, 1), input_error);
    CHECK_THROWS_AS(fm_loss(P, field, random_tensor(4, 3, rng), x1, 1), input_error);
}

TEST_CASE("fm_loss gradient matches finite differences at fixed noise") {
    FlowFieldConfig cfg;
    cfg.x_dim = 3;
    cfg.cond_dim = 2;
    cfg.hidden = 6;
    FlowField field(cfg);
    ParamStore ps;
    Rng rng(65);
    field.init(ps, rng);
    const Tensor x1 = random_tensor(4, 3, rng);
    const Tensor cond = random_tensor(4, 2, rng);
    const auto rep = fd_check_params(
        [&](Graph& g, Binder& P) { return fm_loss(P, field, cond, x1, 1234); }, ps);
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("fm_sample with trained parameters is deterministic in the seed") {
    FlowFieldConfig cfg;
    cfg.x_dim = 2;
    cfg.hidden = 8;
    FlowField field(cfg);
    ParamStore ps;
    Rng rng(66);
    field.init(ps, rng);
    const Tensor a = fm_sample(ps, field, Tensor(), 3, 8, 42);
    const Tensor b = fm_sample(ps, field, Tensor(), 3, 8, 42);
    const Tensor c = fm_sample(ps, field, Tensor(), 3, 8, 43);
    CHECK(a.v == b.v);
    bool any_diff = false;
    for (int64_t i = 0; i < a.numel(); ++i)
        if (a.v[i] != c.v[i]) any_diff = true;
    CHECK(any_diff);
}

TEST_CASE("trained conditional field depends on its condition") {
    // tiny deterministic dataset: the condition row fixes the target row
    Rng rng(67);
    const int t_frames = 10, x_dim = 4, n = 48;
    std::vector<FlowSample> data;
    for (int i = 0; i < n; ++i) {
        FlowSample s;
        s.cond = Tensor(t_frames, x_dim);
        s.x1 = Tensor(t_frames, x_dim);
        for (int t = 0; t < t_frames; ++t) {
            const int bump = static_cast<int>(rng.uniform_int(0, x_dim - 1));
            for (int c = 0; c < x_dim; ++c) {
                s.cond.at(t, c) = c == bump ? 1.0 : 0.0;
                s.x1.at(t, c) = (c == bump ? 3.0 : -1.0) + rng.normal(0.0, 0.05);
            }
        }
        data.push_back(std::move(s));
    }
    std::vector<FlowSample> train(data.begin(), data.begin() + 36);
    std::vector<FlowSample> held(data.begin() + 36, data.end());

    FlowFieldConfig cfg;
    cfg.x_dim = x_dim;
    cfg.cond_dim = x_dim;
    cfg.hidden = 16;
    FlowField field(cfg);
    ParamStore ps;
    Rng init_rng(68);
    field.init(ps, init_rng);
    FlowTrainConfig tc;
    tc.steps = 400;
    tc.batch = 8;
    tc.lr = 3e-3;
    tc.seed = 5;
    train_flow_matching(ps, field, train, tc);

    const double matched = mean_fm_loss(ps, field, held, 77);
    auto permuted = held;
    for (size_t i = 0; i < permuted.size(); ++i) permuted[i].cond = held[(i + 1) % held.size()].cond;
    const double mismatched = mean_fm_loss(ps, field, permuted, 77);
    CHECK(mismatched > matched);
}

// ---------------------------------------------------------------------------
// discriminative probe
// ---------------------------------------------------------------------------

namespace {

// transcript-only utterances are enough for task construction
std::vector<Utterance> fake_corpus(int n, int n_symbols, uint64_t seed) {
    Rng rng(seed);
    std::vector<Utterance> out;
    for (int i = 0; i < n; ++i) {
        Utterance u;
        u.id = "fake" + std::to_string(i);
        u.seed = mix_seed(seed, i);
        const int len = static_cast<int>(rng.uniform_int(4, 9));
        for (int k = 0; k < len; ++k)
            u.transcript.push_back(static_cast<int>(rng.uniform_int(0, n_symbols - 1)));
        out.push_back(std::move(u));
    }
    return out;
}

}  // namespace

TEST_CASE("majority tasks have a unique correct option at a balanced position") {
    const auto corpus = fake_corpus(1400, 8, 9);
    const auto tasks = make_majority_tasks(corpus, 4, 8, 3);
    REQUIRE(tasks.size() > 500);
    std::vector<int> position_counts(4, 0);
    for (const auto& t : tasks) {
        REQUIRE(t.options.size() == 4);
        ++position_counts[t.correct_index];
        // options are distinct and contain the majority symbol exactly once
        std::set<int> seen(t.options.begin(), t.options.end());
        CHECK(seen.size() == 4);
        const Utterance* utt = nullptr;
        for (const auto& u : corpus)
            if (u.id == t.utterance_id) utt = &u;
        REQUIRE(utt != nullptr);
        std::vector<int> counts(8, 0);
        for (int s : utt->transcript) ++counts[s];
        const int correct = t.options[t.correct_index];
        for (int s = 0; s < 8; ++s)
            if (s != correct) CHECK(counts[s] < counts[correct]);
    }
    for (int k = 0; k < 4; ++k) {
        CHECK(position_counts[k] > tasks.size() / 4.0 - 3.0 * std::sqrt(tasks.size() * 0.25));
        CHECK(position_counts[k] < tasks.size() / 4.0 + 3.0 * std::sqrt(tasks.size() * 0.25));
    }
}

TEST_CASE("audio projection is deterministic with the contracted width") {
    DiscrimProbeConfig cfg;
    cfg.codebook_size = 64;
    cfg.d_embed = 8;
    cfg.d_lm = 16;
    DiscrimProbe probe(cfg);
    ParamStore ps;
    Rng rng(70);
    probe.init_trainable(ps, rng);
    Graph g;
    Binder P(g, ps, false);
    const std::vector<int64_t> ids{1, 5, 9, 5};
    Value a = probe.audio_project(P, ids);
    Value b = probe.audio_project(P, ids);
    CHECK(a->val.v == b->val.v);
    CHECK(a->val.rows == 4);
    CHECK(a->val.cols == 16);
    CHECK_THROWS_AS(probe.audio_project(P, {64}), input_error);
    CHECK_THROWS_AS(probe.audio_project(P, {}), input_error);
}

TEST_CASE("gradients reach the projector but never the backbone") {
    DiscrimProbeConfig cfg;
    cfg.codebook_size = 32;
    cfg.d_embed = 8;
    cfg.d_lm = 16;
    cfg.n_symbols = 6;
    DiscrimProbe probe(cfg);
    ParamStore ps;
    Rng rng(71);
    probe.init_backbone(ps, rng);
    probe.init_trainable(ps, rng);

    Graph g;
    Binder trainP(g, ps, true);
    Binder frozenP(g, ps, false);
    Value e = probe.audio_project(trainP, {3, 7, 1});
    Value pooled = g.mean_over_rows(probe.backbone_forward(frozenP, e));
    Value scores = probe.option_scores(trainP, pooled, {0, 2, 4, 5});
    g.backward(g.nll_from_log_probs(g.row_log_softmax(scores), {1}, 1));
    GradMap grads;
    trainP.collect(grads);
    frozenP.collect(grads);
    double proj_norm = 0.0;
    bool backbone_grads = false;
    for (const auto& [name, t] : grads.entries()) {
        if (name.rfind("backbone.", 0) == 0) backbone_grads = true;
        if (name.rfind("proj.", 0) == 0)
            for (double x : t.v) proj_norm += x * x;
    }
    CHECK_FALSE(backbone_grads);
    CHECK(proj_norm > 0.0);
}

TEST_CASE("untrained probe sits at chance on balanced tasks and never touches the backbone") {
    const int n_symbols = 8;
    const auto corpus = fake_corpus(1400, n_symbols, 21);
    const auto tasks = make_majority_tasks(corpus, 4, n_symbols, 4);
    REQUIRE(tasks.size() >= 500);
    DiscrimProbeConfig cfg;
    cfg.codebook_size = 512;
    cfg.n_symbols = n_symbols;
    cfg.holdout_fraction = 1.0;  // evaluate on everything
    std::map<std::string, std::vector<int64_t>> tokens;
    Rng rng(22);
    for (const auto& u : corpus) {
        std::vector<int64_t> ids(6);
        for (auto& id : ids) id = rng.uniform_int(0, 511);
        tokens[u.id] = ids;
    }
    const auto res = probe_train_eval(tasks, tokens, cfg, 5, /*train=*/false);
    CHECK(res.backbone_checksum_before == res.backbone_checksum_after);
    CHECK(res.accuracy > 0.20);
    CHECK(res.accuracy < 0.30);
}

TEST_CASE("probe learns token-recoverable answers with a frozen backbone") {
    // token ids equal the symbol sequence, so the majority symbol is fully
    // recoverable from the ids
    const int n_symbols = 8;
    const auto corpus = fake_corpus(240, n_symbols, 31);
    const auto tasks = make_majority_tasks(corpus, 4, n_symbols, 6);
    std::map<std::string, std::vector<int64_t>> tokens;
    for (const auto& u : corpus)
        tokens[u.id] = std::vector<int64_t>(u.transcript.begin(), u.transcript.end());
    DiscrimProbeConfig cfg;
    cfg.codebook_size = n_symbols;
    cfg.n_symbols = n_symbols;
    cfg.d_embed = 16;
    cfg.d_lm = 32;
    cfg.train_steps = 250;
    cfg.batch = 16;
    const auto res = probe_train_eval(tasks, tokens, cfg, 9);
    CHECK(res.backbone_checksum_before == res.backbone_checksum_after);
    CHECK(res.accuracy > 0.6);
}

TEST_CASE("probe rejects malformed configurations") {
    const auto corpus = fake_corpus(20, 4, 41);
    const auto tasks = make_majority_tasks(corpus, 4, 4, 1);
    DiscrimProbeConfig cfg;
    cfg.n_symbols = 4;
    cfg.n_options = 3;  // mismatch with the generated tasks
    std::map<std::string, std::vector<int64_t>> tokens;
    for (const auto& u : corpus) tokens[u.id] = {1, 2};
    CHECK_THROWS_AS(probe_train_eval(tasks, tokens, cfg, 1), config_error);
    CHECK_THROWS_AS(make_majority_tasks(corpus, 5, 4, 1), config_error);
}
