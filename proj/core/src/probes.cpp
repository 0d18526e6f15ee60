// SPDX-License-Identifier: Apache-2.0

#include "dyntok/probes.hpp"

#include <algorithm>
#include <cmath>

#include "dyntok/errors.hpp"

namespace dyntok {

// ---------------------------------------------------------------------------
// flow matching
// ---------------------------------------------------------------------------

namespace {

Tensor time_features(int t_frames, double t, int time_dim) {
    Tensor f(t_frames, time_dim);
    for (int r = 0; r < t_frames; ++r) {
        f.at(r, 0) = t;
        f.at(r, 1) = 1.0 - t;
        for (int i = 2; i < time_dim; i += 2) {
            const double w = 2.0 * M_PI * (1 << (i / 2 - 1));
            f.at(r, i) = std::sin(w * t);
            if (i + 1 < time_dim) f.at(r, i + 1) = std::cos(w * t);
        }
    }
    return f;
}

Tensor gaussian_like(int rows, int cols, Rng& rng) {
    Tensor t(rows, cols);
    for (auto& x : t.v) x = rng.normal();
    return t;
}

}  // namespace

void FlowField::init(ParamStore& ps, Rng& rng) const {
    const int in = cfg_.x_dim + cfg_.cond_dim + cfg_.time_dim;
    init_linear(ps, rng, "fm.l1", in, cfg_.hidden);
    init_conv1d(ps, rng, "fm.conv", 3, cfg_.hidden, cfg_.hidden);
    init_linear(ps, rng, "fm.l2", cfg_.hidden, cfg_.x_dim);
}

Value FlowField::forward(Binder& P, Value xt, double t, const Tensor* cond) const {
    Graph& g = P.graph();
    if (xt->val.cols != cfg_.x_dim) throw input_error("flow field: x width mismatch");
    std::vector<Value> parts{xt};
    if (cfg_.cond_dim > 0) {
        if (cond == nullptr || cond->rows != xt->val.rows || cond->cols != cfg_.cond_dim)
            throw input_error("flow field: condition grid mismatch");
        parts.push_back(g.constant(*cond));
    }
    parts.push_back(g.constant(time_features(xt->val.rows, t, cfg_.time_dim)));
    Value h = g.relu(linear(P, g.concat_cols(parts), "fm.l1"));
    h = g.relu(conv1d_layer(P, h, "fm.conv", 3, 1, 1));
    return linear(P, h, "fm.l2");
}

Value fm_loss(Binder& P, const FlowField& field, const Tensor& cond, const Tensor& x1,
              uint64_t noise_seed) {
    Graph& g = P.graph();
    if (field.config().cond_dim > 0 &&
        (cond.rows != x1.rows || cond.cols != field.config().cond_dim))
        throw input_error("fm_loss: condition grid mismatch");
    Rng rng(noise_seed);
    const double t = rng.uniform();
    const Tensor x0 = gaussian_like(x1.rows, x1.cols, rng);
    Tensor xt(x1.rows, x1.cols);
    Tensor target(x1.rows, x1.cols);
    for (int64_t i = 0; i < x1.numel(); ++i) {
        xt.v[i] = (1.0 - t) * x0.v[i] + t * x1.v[i];
        target.v[i] = x1.v[i] - x0.v[i];
    }
    Value v = field.forward(P, g.constant(std::move(xt)), t,
                            field.config().cond_dim > 0 ? &cond : nullptr);
    Value d = g.sub(v, g.constant(std::move(target)));
    return g.mean_all(g.mul(d, d));
}

Tensor fm_sample(const FieldFn& field, Tensor x0, const Tensor& cond, int steps) {
    if (steps < 1) throw input_error("fm_sample: steps must be >= 1");
    const double dt = 1.0 / steps;
    Tensor x = std::move(x0);
    for (int k = 0; k < steps; ++k) {
        const Tensor v = field(x, k * dt, cond);
        if (!v.same_shape(x)) throw input_error("fm_sample: field shape mismatch");
        for (int64_t i = 0; i < x.numel(); ++i) x.v[i] += dt * v.v[i];
    }
    return x;
}

Tensor fm_sample(const ParamStore& ps, const FlowField& field, const Tensor& cond,
                 int t_frames, int steps, uint64_t seed) {
    Rng rng(seed);
    Tensor x0 = gaussian_like(t_frames, field.config().x_dim, rng);
    FieldFn fn = [&ps, &field](const Tensor& x, double t, const Tensor& c) {
        Graph g;
        Binder P(g, ps, /*trainable=*/false);
        Value v = field.forward(P, g.constant(x), t,
                                field.config().cond_dim > 0 ? &c : nullptr);
        return v->val;
    };
    return fm_sample(fn, std::move(x0), cond, steps);
}

void train_flow_matching(ParamStore& ps, const FlowField& field,
                         const std::vector<FlowSample>& data, const FlowTrainConfig& cfg) {
    if (data.empty()) throw input_error("train_flow_matching: empty dataset");
    Adam opt;
    Rng order(mix_seed(cfg.seed, 0xF10));
    for (int step = 0; step < cfg.steps; ++step) {
        Graph g;
        Binder P(g, ps, /*trainable=*/true);
        std::vector<Value> losses;
        losses.reserve(cfg.batch);
        for (int b = 0; b < cfg.batch; ++b) {
            const auto& s = data[order.uniform_int(0, static_cast<int64_t>(data.size()) - 1)];
            losses.push_back(
                fm_loss(P, field, s.cond, s.x1, mix_seed(cfg.seed, step * 131071ULL + b)));
        }
        Value total = losses[0];
        for (size_t i = 1; i < losses.size(); ++i) total = g.add(total, losses[i]);
        total = g.scale(total, 1.0 / losses.size());
        g.backward(total);
        GradMap grads;
        P.collect(grads);
        clip_global_norm(grads, cfg.grad_clip);
        opt.step(ps, grads, cfg.lr);
    }
}

double mean_fm_loss(const ParamStore& ps, const FlowField& field,
                    const std::vector<FlowSample>& data, uint64_t seed) {
    if (data.empty()) throw input_error("mean_fm_loss: empty dataset");
    double total = 0.0;
    for (size_t i = 0; i < data.size(); ++i) {
        Graph g;
        Binder P(g, ps, /*trainable=*/false);
        total += fm_loss(P, field, data[i].cond, data[i].x1, mix_seed(seed, i))->val.item();
    }
    return total / data.size();
}

// ---------------------------------------------------------------------------
// discriminative probe
// ---------------------------------------------------------------------------

std::vector<ProbeTask> make_majority_tasks(const std::vector<Utterance>& corpus,
                                           int n_options, int n_symbols, uint64_t seed) {
    if (n_options < 2 || n_options > n_symbols)
        throw config_error("make_majority_tasks: need 2 <= K <= vocabulary size");
    std::vector<ProbeTask> tasks;
    int qid = 0;
    for (const auto& utt : corpus) {
        std::vector<int> counts(n_symbols, 0);
        for (int s : utt.transcript) ++counts[s];
        int best = 0;
        for (int s = 1; s < n_symbols; ++s)
            if (counts[s] > counts[best]) best = s;
        bool unique = true;
        for (int s = 0; s < n_symbols; ++s)
            if (s != best && counts[s] == counts[best]) unique = false;
        if (!unique) continue;

        Rng rng(mix_seed(seed, utt.seed));
        std::vector<int> pool;
        for (int s = 0; s < n_symbols; ++s)
            if (s != best) pool.push_back(s);
        // Fisher-Yates prefix
        for (int i = 0; i < n_options - 1; ++i) {
            const int j = static_cast<int>(rng.uniform_int(i, static_cast<int64_t>(pool.size()) - 1));
            std::swap(pool[i], pool[j]);
        }
        ProbeTask task;
        task.utterance_id = utt.id;
        task.question_id = qid++;
        task.options.assign(pool.begin(), pool.begin() + (n_options - 1));
        const int pos = static_cast<int>(rng.uniform_int(0, n_options - 1));
        task.options.insert(task.options.begin() + pos, best);
        task.correct_index = pos;
        tasks.push_back(std::move(task));
    }
    return tasks;
}

void DiscrimProbe::init_trainable(ParamStore& ps, Rng& rng) const {
    init_embedding(ps, rng, "proj.embed", static_cast<int>(cfg_.codebook_size), cfg_.d_embed);
    init_linear(ps, rng, "proj.l1", cfg_.d_embed, cfg_.d_lm);
    init_linear(ps, rng, "proj.l2", cfg_.d_lm, cfg_.d_lm);
    init_linear(ps, rng, "head.map", cfg_.d_lm, cfg_.d_lm);
    init_embedding(ps, rng, "head.opt", cfg_.n_symbols, cfg_.d_lm);
    ps.add("head.opt_b", Tensor::zeros(cfg_.n_symbols, 1));
}

void DiscrimProbe::init_backbone(ParamStore& ps, Rng& rng) const {
    for (int l = 0; l < cfg_.backbone_layers; ++l)
        init_conv1d(ps, rng, "backbone.mix" + std::to_string(l), 3, cfg_.d_lm, cfg_.d_lm);
}

Value DiscrimProbe::audio_project(Binder& P, const std::vector<int64_t>& token_ids) const {
    if (token_ids.empty()) throw input_error("audio_project: empty token sequence");
    std::vector<int> idx(token_ids.size());
    for (size_t i = 0; i < token_ids.size(); ++i) {
        if (token_ids[i] < 0 || token_ids[i] >= cfg_.codebook_size)
            throw input_error("audio_project: token id out of range");
        idx[i] = static_cast<int>(token_ids[i]);
    }
    Graph& g = P.graph();
    Value e = g.gather_rows(P("proj.embed.table"), idx);
    Value h = g.relu(linear(P, e, "proj.l1"));
    return linear(P, h, "proj.l2");
}

Value DiscrimProbe::backbone_forward(Binder& frozen, Value x) const {
    Graph& g = frozen.graph();
    for (int l = 0; l < cfg_.backbone_layers; ++l)
        x = g.add(x, g.relu(conv1d_layer(frozen, x, "backbone.mix" + std::to_string(l), 3, 1, 1)));
    return x;
}

Value DiscrimProbe::option_scores(Binder& P, Value pooled, const std::vector<int>& options) const {
    Graph& g = P.graph();
    Value h = linear(P, pooled, "head.map");                    // 1 x d_lm
    Value opts = g.gather_rows(P("head.opt.table"), options);   // K x d_lm
    Value bias = g.gather_rows(P("head.opt_b"), options);       // K x 1
    return g.transpose(g.add(g.matmul(opts, g.transpose(h)), bias));  // 1 x K
}

namespace {

int predict_option(const DiscrimProbe& probe, const ParamStore& ps, const ProbeTask& task,
                   const std::vector<int64_t>& token_ids) {
    Graph g;
    Binder train(g, ps, /*trainable=*/false);
    Binder frozen(g, ps, /*trainable=*/false);
    Value e = probe.audio_project(train, token_ids);
    Value pooled = g.mean_over_rows(probe.backbone_forward(frozen, e));
    Value scores = probe.option_scores(train, pooled, task.options);
    int best = 0;
    for (int k = 1; k < scores->val.cols; ++k)
        if (scores->val.at(0, k) > scores->val.at(0, best)) best = k;
    return best;
}

}  // namespace

ProbeEvalResult probe_train_eval(const std::vector<ProbeTask>& tasks,
                                 const std::map<std::string, std::vector<int64_t>>& tokens,
                                 const DiscrimProbeConfig& cfg, uint64_t seed, bool train) {
    if (tasks.size() < 2) throw config_error("probe_train_eval: not enough tasks");
    for (const auto& t : tasks) {
        if (static_cast<int>(t.options.size()) != cfg.n_options)
            throw config_error("probe_train_eval: task option count mismatch");
        if (!tokens.count(t.utterance_id))
            throw config_error("probe_train_eval: missing tokens for " + t.utterance_id);
    }

    DiscrimProbe probe(cfg);
    ParamStore ps;
    Rng rng(seed);
    Rng backbone_rng = rng.fork(0xBAC);
    Rng trainable_rng = rng.fork(0x9E0);
    probe.init_backbone(ps, backbone_rng);
    probe.init_trainable(ps, trainable_rng);

    // seeded split
    std::vector<int> perm(tasks.size());
    for (size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
    Rng shuffle = rng.fork(0x5117);
    for (size_t i = perm.size(); i > 1; --i)
        std::swap(perm[i - 1], perm[shuffle.uniform_int(0, static_cast<int64_t>(i) - 1)]);
    const int n_eval = std::max(1, static_cast<int>(tasks.size() * cfg.holdout_fraction));
    std::vector<int> eval_idx(perm.begin(), perm.begin() + n_eval);
    std::vector<int> train_idx(perm.begin() + n_eval, perm.end());

    ProbeEvalResult res;
    res.backbone_checksum_before = ps.checksum("backbone.");
    res.n_train = static_cast<int>(train_idx.size());
    res.n_eval = static_cast<int>(eval_idx.size());

    if (train && !train_idx.empty()) {
        Adam opt;
        Rng order = rng.fork(0x0D3);
        for (int step = 0; step < cfg.train_steps; ++step) {
            Graph g;
            Binder trainP(g, ps, /*trainable=*/true);
            Binder frozenP(g, ps, /*trainable=*/false);
            Value total = nullptr;
            for (int b = 0; b < cfg.batch; ++b) {
                const ProbeTask& task =
                    tasks[train_idx[order.uniform_int(0, static_cast<int64_t>(train_idx.size()) - 1)]];
                Value e = probe.audio_project(trainP, tokens.at(task.utterance_id));
                Value pooled = g.mean_over_rows(probe.backbone_forward(frozenP, e));
                Value scores = probe.option_scores(trainP, pooled, task.options);
                Value nll = g.nll_from_log_probs(g.row_log_softmax(scores),
                                                 {task.correct_index}, 1);
                total = total ? g.add(total, nll) : nll;
            }
            total = g.scale(total, 1.0 / cfg.batch);
            g.backward(total);
            GradMap grads;
            trainP.collect(grads);
            clip_global_norm(grads, cfg.grad_clip);
            opt.step(ps, grads, cfg.lr);
        }
    }

    int correct = 0;
    for (int i : eval_idx)
        if (predict_option(probe, ps, tasks[i], tokens.at(tasks[i].utterance_id)) ==
            tasks[i].correct_index)
            ++correct;
    res.accuracy = static_cast<double>(correct) / eval_idx.size();

    if (!train_idx.empty()) {
        int tc = 0;
        for (int i : train_idx)
            if (predict_option(probe, ps, tasks[i], tokens.at(tasks[i].utterance_id)) ==
                tasks[i].correct_index)
                ++tc;
        res.train_accuracy = static_cast<double>(tc) / train_idx.size();
    }

    res.backbone_checksum_after = ps.checksum("backbone.");
    return res;
}

}  // namespace dyntok
