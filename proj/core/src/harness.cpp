// SPDX-License-Identifier: Apache-2.0

#include "dyntok/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "dyntok/errors.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace dyntok {

// ---------------------------------------------------------------------------
// variants & config
// ---------------------------------------------------------------------------

std::string variant_name(Variant v) {
    switch (v) {
        case Variant::kDynamic: return "dynamic";
        case Variant::kFixedStride: return "fixed-stride";
        case Variant::kPureSemantic: return "pure-semantic";
        case Variant::kWithRecon: return "with-recon";
        case Variant::kReconControlR1: return "recon-control-r1";
    }
    return "dynamic";
}

Variant variant_from_name(const std::string& name) {
    if (name == "dynamic") return Variant::kDynamic;
    if (name == "fixed-stride") return Variant::kFixedStride;
    if (name == "pure-semantic") return Variant::kPureSemantic;
    if (name == "with-recon") return Variant::kWithRecon;
    if (name == "recon-control-r1") return Variant::kReconControlR1;
    throw config_error("unknown variant: " + name);
}

void RunConfig::validate() const {
    if (corpus.n_symbols < 2) throw config_error("config: need at least 2 symbols");
    if (corpus.n_mels < 4) throw config_error("config: need at least 4 mel bands");
    if (merge.ratio < 1.0) throw config_error("config: compression ratio must be >= 1");
    if (merge.theta <= 0.0) throw config_error("config: firing threshold must be > 0");
    if (merge.lambda_smooth <= 0.0) throw config_error("config: lambda_smooth must be > 0");
    if (merge.lambda_noise < 0.0) throw config_error("config: lambda_noise must be >= 0");
    if (lambda_qua < 0.0 || lambda_recon < 0.0)
        throw config_error("config: loss weights must be >= 0");
    if (encoder.input_downsample < 1 || encoder.n_layers < 1)
        throw config_error("config: bad encoder shape");
    if (attn.dim != encoder.hidden_dim)
        throw config_error("config: attention decoder width must match the feature width");
    fsq.validate();
    if (variant == Variant::kPureSemantic && lambda_recon != 0.0)
        throw config_error("config: pure-semantic variant requires lambda_recon = 0");
    if (uses_recon() && recon.total_upsample() != encoder.input_downsample)
        throw config_error(
            "config: recon upsampling must invert the encoder downsample "
            "(feature rate * prod(strides) must equal the mel rate)");
    if (optim.steps < 1 || optim.warmup_steps < 1 || optim.max_frames_per_batch < 1)
        throw config_error("config: bad optimizer settings");
}

RunConfig RunConfig::with_variant(Variant v) const {
    RunConfig c = *this;
    c.variant = v;
    switch (v) {
        case Variant::kDynamic:
            break;
        case Variant::kFixedStride:
            break;
        case Variant::kWithRecon:
            if (c.lambda_recon <= 0.0) c.lambda_recon = 1.0;
            break;
        case Variant::kPureSemantic:
            c.lambda_recon = 0.0;
            break;
        case Variant::kReconControlR1:
            c.merge.ratio = 1.0;
            if (c.lambda_recon <= 0.0) c.lambda_recon = 1.0;
            break;
    }
    return c;
}

namespace {

json encoder_to_json(const EncoderConfig& e) {
    return {{"input_downsample", e.input_downsample},
            {"n_layers", e.n_layers},
            {"hidden_dim", e.hidden_dim},
            {"mixing", e.mixing == EncoderConfig::Mixing::kConv ? "conv" : "self-attention"},
            {"n_heads", e.n_heads},
            {"input_offset", e.input_offset},
            {"input_scale", e.input_scale}};
}

EncoderConfig encoder_from_json(const json& j) {
    EncoderConfig e;
    e.input_downsample = j.value("input_downsample", e.input_downsample);
    e.n_layers = j.value("n_layers", e.n_layers);
    e.hidden_dim = j.value("hidden_dim", e.hidden_dim);
    const std::string mixing = j.value("mixing", "conv");
    e.mixing = mixing == "self-attention" ? EncoderConfig::Mixing::kSelfAttention
                                          : EncoderConfig::Mixing::kConv;
    e.n_heads = j.value("n_heads", e.n_heads);
    e.input_offset = j.value("input_offset", e.input_offset);
    e.input_scale = j.value("input_scale", e.input_scale);
    return e;
}

}  // namespace

std::string run_config_to_json(const RunConfig& cfg) {
    json j;
    j["corpus"] = {{"n_symbols", cfg.corpus.n_symbols},
                   {"n_mels", cfg.corpus.n_mels},
                   {"n_utts", cfg.corpus.n_utts},
                   {"min_len", cfg.corpus.min_len},
                   {"max_len", cfg.corpus.max_len},
                   {"noise_sigma", cfg.corpus.noise_sigma},
                   {"max_edge_silence", cfg.corpus.max_edge_silence},
                   {"frame_rate", cfg.corpus.frame_rate},
                   {"holdout_fraction", cfg.corpus.holdout_fraction}};
    j["encoder"] = encoder_to_json(cfg.encoder);
    j["merge"] = {{"ratio", cfg.merge.ratio},
                  {"theta", cfg.merge.theta},
                  {"lambda_smooth", cfg.merge.lambda_smooth},
                  {"lambda_noise", cfg.merge.lambda_noise},
                  {"predictor_kernel", cfg.merge.predictor_kernel},
                  {"predictor_hidden", cfg.merge.predictor_hidden},
                  {"predictor_bias_init", cfg.merge.predictor_bias_init},
                  {"delta_init", cfg.merge.delta_init},
                  {"scale_in_training", cfg.merge.scale_in_training}};
    j["fsq"] = {{"levels", cfg.fsq.levels}};
    j["attn"] = {{"dim", cfg.attn.dim},
                 {"n_layers", cfg.attn.n_layers},
                 {"n_heads", cfg.attn.n_heads},
                 {"ffn_mult", cfg.attn.ffn_mult}};
    j["recon"] = {{"n_blocks", cfg.recon.n_blocks},
                  {"upsample_strides", cfg.recon.upsample_strides},
                  {"hidden", cfg.recon.hidden},
                  {"out_offset", cfg.recon.out_offset},
                  {"out_scale", cfg.recon.out_scale}};
    j["ctc_hidden"] = cfg.ctc_hidden;
    j["ctc_on_tokens"] = cfg.ctc_on_tokens;
    j["lambda_qua"] = cfg.lambda_qua;
    j["lambda_recon"] = cfg.lambda_recon;
    j["optim"] = {{"peak_lr", cfg.optim.peak_lr},
                  {"warmup_steps", cfg.optim.warmup_steps},
                  {"max_frames_per_batch", cfg.optim.max_frames_per_batch},
                  {"grad_clip", cfg.optim.grad_clip},
                  {"steps", cfg.optim.steps},
                  {"merge_lr_scale", cfg.optim.merge_lr_scale}};
    j["seed"] = cfg.seed;
    j["variant"] = variant_name(cfg.variant);
    j["threads"] = cfg.threads;
    return j.dump(2);
}

RunConfig run_config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw config_error(std::string("config parse error: ") + e.what());
    }
    RunConfig cfg;
    if (j.contains("corpus")) {
        const auto& c = j["corpus"];
        cfg.corpus.n_symbols = c.value("n_symbols", cfg.corpus.n_symbols);
        cfg.corpus.n_mels = c.value("n_mels", cfg.corpus.n_mels);
        cfg.corpus.n_utts = c.value("n_utts", cfg.corpus.n_utts);
        cfg.corpus.min_len = c.value("min_len", cfg.corpus.min_len);
        cfg.corpus.max_len = c.value("max_len", cfg.corpus.max_len);
        cfg.corpus.noise_sigma = c.value("noise_sigma", cfg.corpus.noise_sigma);
        cfg.corpus.max_edge_silence = c.value("max_edge_silence", cfg.corpus.max_edge_silence);
        cfg.corpus.frame_rate = c.value("frame_rate", cfg.corpus.frame_rate);
        cfg.corpus.holdout_fraction = c.value("holdout_fraction", cfg.corpus.holdout_fraction);
    }
    if (j.contains("encoder")) cfg.encoder = encoder_from_json(j["encoder"]);
    if (j.contains("merge")) {
        const auto& m = j["merge"];
        cfg.merge.ratio = m.value("ratio", cfg.merge.ratio);
        cfg.merge.theta = m.value("theta", cfg.merge.theta);
        cfg.merge.lambda_smooth = m.value("lambda_smooth", cfg.merge.lambda_smooth);
        cfg.merge.lambda_noise = m.value("lambda_noise", cfg.merge.lambda_noise);
        cfg.merge.predictor_kernel = m.value("predictor_kernel", cfg.merge.predictor_kernel);
        cfg.merge.predictor_hidden = m.value("predictor_hidden", cfg.merge.predictor_hidden);
        cfg.merge.predictor_bias_init =
            m.value("predictor_bias_init", cfg.merge.predictor_bias_init);
        cfg.merge.delta_init = m.value("delta_init", cfg.merge.delta_init);
        cfg.merge.scale_in_training = m.value("scale_in_training", cfg.merge.scale_in_training);
    }
    if (j.contains("fsq")) cfg.fsq.levels = j["fsq"].value("levels", cfg.fsq.levels);
    if (j.contains("attn")) {
        const auto& a = j["attn"];
        cfg.attn.dim = a.value("dim", cfg.attn.dim);
        cfg.attn.n_layers = a.value("n_layers", cfg.attn.n_layers);
        cfg.attn.n_heads = a.value("n_heads", cfg.attn.n_heads);
        cfg.attn.ffn_mult = a.value("ffn_mult", cfg.attn.ffn_mult);
    }
    if (j.contains("recon")) {
        const auto& r = j["recon"];
        cfg.recon.n_blocks = r.value("n_blocks", cfg.recon.n_blocks);
        cfg.recon.upsample_strides = r.value("upsample_strides", cfg.recon.upsample_strides);
        cfg.recon.hidden = r.value("hidden", cfg.recon.hidden);
        cfg.recon.out_offset = r.value("out_offset", cfg.recon.out_offset);
        cfg.recon.out_scale = r.value("out_scale", cfg.recon.out_scale);
    }
    cfg.ctc_hidden = j.value("ctc_hidden", cfg.ctc_hidden);
    cfg.ctc_on_tokens = j.value("ctc_on_tokens", cfg.ctc_on_tokens);
    cfg.lambda_qua = j.value("lambda_qua", cfg.lambda_qua);
    cfg.lambda_recon = j.value("lambda_recon", cfg.lambda_recon);
    if (j.contains("optim")) {
        const auto& o = j["optim"];
        cfg.optim.peak_lr = o.value("peak_lr", cfg.optim.peak_lr);
        cfg.optim.warmup_steps = o.value("warmup_steps", cfg.optim.warmup_steps);
        cfg.optim.max_frames_per_batch =
            o.value("max_frames_per_batch", cfg.optim.max_frames_per_batch);
        cfg.optim.grad_clip = o.value("grad_clip", cfg.optim.grad_clip);
        cfg.optim.steps = o.value("steps", cfg.optim.steps);
        cfg.optim.merge_lr_scale = o.value("merge_lr_scale", cfg.optim.merge_lr_scale);
    }
    cfg.seed = j.value("seed", cfg.seed);
    if (j.contains("variant")) cfg.variant = variant_from_name(j["variant"].get<std::string>());
    cfg.threads = j.value("threads", cfg.threads);
    return cfg;
}

// ---------------------------------------------------------------------------
// token stream
// ---------------------------------------------------------------------------

void TokenStreamRecord::validate(int64_t codebook_size) const {
    if (utterance_id.empty()) throw input_error("token record: empty utterance id");
    if (t_frames < 1) throw input_error("token record: bad frame count");
    if (n_tokens != target_length(t_frames, ratio))
        throw input_error("token record " + utterance_id + ": N != target_length(T, R)");
    if (static_cast<int>(ids.size()) != n_tokens)
        throw input_error("token record " + utterance_id + ": id count mismatch");
    for (int64_t id : ids)
        if (id < 0 || id >= codebook_size)
            throw input_error("token record " + utterance_id + ": id out of codebook range");
    if (!s_hat.empty()) {
        if (static_cast<int>(s_hat.size()) != t_frames)
            throw input_error("token record " + utterance_id + ": trace length mismatch");
        if (std::fabs(s_hat.back() - n_tokens) > 1e-6)
            throw input_error("token record " + utterance_id + ": trace does not end at N");
    }
}

void write_token_stream(const std::string& path, const std::vector<TokenStreamRecord>& recs) {
    std::ofstream os(path);
    if (!os) throw input_error("cannot write " + path);
    for (const auto& r : recs) {
        json j;
        j["utt"] = r.utterance_id;
        j["ratio"] = r.ratio;
        j["t_frames"] = r.t_frames;
        j["n_tokens"] = r.n_tokens;
        j["ids"] = r.ids;
        if (!r.s_hat.empty()) j["s_hat"] = r.s_hat;
        j["variant"] = r.variant;
        os << j.dump() << "\n";
    }
}

std::vector<TokenStreamRecord> read_token_stream(const std::string& path,
                                                 int64_t codebook_size) {
    std::ifstream is(path);
    if (!is) throw input_error("cannot read " + path);
    std::vector<TokenStreamRecord> recs;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        TokenStreamRecord r;
        r.utterance_id = j.at("utt").get<std::string>();
        r.ratio = j.at("ratio").get<double>();
        r.t_frames = j.at("t_frames").get<int>();
        r.n_tokens = j.at("n_tokens").get<int>();
        r.ids = j.at("ids").get<std::vector<int64_t>>();
        r.s_hat = j.value("s_hat", std::vector<double>{});
        r.variant = j.value("variant", "dynamic");
        r.validate(codebook_size);
        recs.push_back(std::move(r));
    }
    return recs;
}

// ---------------------------------------------------------------------------
// model bundle
// ---------------------------------------------------------------------------

TokenizerModel TokenizerModel::init(const RunConfig& cfg) {
    cfg.validate();
    TokenizerModel m;
    m.cfg = cfg;
    Rng rng(mix_seed(cfg.seed, 0x1417ULL));
    m.make_encoder().init(m.params, rng);
    m.make_merge().init(m.params, rng);
    m.make_fsq().init(m.params, rng);
    m.make_ctc().init(m.params, rng);
    m.make_attn().init(m.params, rng);
    m.make_recon().init(m.params, rng);
    return m;
}

void save_checkpoint(const std::string& path, const TokenizerModel& model) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw input_error("cannot write " + path);
    os.write("DTCK", 4);
    const uint32_t version = 1;
    os.write(reinterpret_cast<const char*>(&version), 4);
    const std::string cfg = run_config_to_json(model.cfg);
    const uint32_t len = static_cast<uint32_t>(cfg.size());
    os.write(reinterpret_cast<const char*>(&len), 4);
    os.write(cfg.data(), len);
    save_params(os, model.params);
}

TokenizerModel load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw input_error("cannot read " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "DTCK") throw input_error("not a checkpoint: " + path);
    uint32_t version = 0;
    is.read(reinterpret_cast<char*>(&version), 4);
    if (version != 1) throw input_error("unsupported checkpoint version");
    uint32_t len = 0;
    is.read(reinterpret_cast<char*>(&len), 4);
    std::string cfg(len, '\0');
    is.read(cfg.data(), len);
    if (!is) throw input_error("truncated checkpoint");
    TokenizerModel m;
    m.cfg = run_config_from_json(cfg);
    load_params(is, m.params);
    return m;
}

// ---------------------------------------------------------------------------
// losses & forward
// ---------------------------------------------------------------------------

double loss_total(double l_ctc, double l_attn, double l_qua, double l_recon,
                  double lambda_qua, double lambda_recon) {
    const double total = l_ctc + l_attn + lambda_qua * l_qua + lambda_recon * l_recon;
    if (!std::isfinite(total)) {
        std::ostringstream oss;
        oss << "training divergence: ctc=" << l_ctc << " attn=" << l_attn << " qua=" << l_qua
            << " recon=" << l_recon;
        throw divergence_error(oss.str());
    }
    return total;
}

ForwardArtifacts forward_utterance(Graph& g, Binder& P, const TokenizerModel& model,
                                   const Utterance& utt, const ForwardOptions& opts) {
    const RunConfig& cfg = model.cfg;
    ForwardArtifacts fa;

    Value mel = g.constant(utt.mel.frames);
    Value h = model.make_encoder().forward(P, mel);
    fa.t_feat = h->val.rows;
    fa.n_target = target_length(fa.t_feat, cfg.merge.ratio);
    const int dim = cfg.encoder.hidden_dim;

    Value merged = nullptr;
    if (cfg.variant == Variant::kFixedStride) {
        merged = g.matmul(g.constant(fixed_stride_matrix(fa.t_feat, cfg.merge.ratio)), h);
        fa.trace = uniform_trace(fa.t_feat, fa.n_target);
    } else {
        Value alpha = model.make_merge().forward(P, h);
        Value alpha_hat = scale_weights(g, alpha, fa.n_target);  // sums to N
        Value fired = alpha_hat;
        if (cfg.merge.theta != 1.0) fired = g.scale(alpha_hat, cfg.merge.theta);
        FireResult fire = integrate_and_fire(g, h, fired, fa.n_target, cfg.merge.theta);
        merged = fire.tokens;
        fa.trace.n_target = fa.n_target;
        fa.trace.alpha.resize(fa.t_feat);
        fa.trace.alpha_hat.resize(fa.t_feat);
        fa.trace.s_hat.resize(fa.t_feat);
        double run = 0.0;
        for (int t = 0; t < fa.t_feat; ++t) {
            fa.trace.alpha[t] = alpha->val.at(t, 0);
            fa.trace.alpha_hat[t] = alpha_hat->val.at(t, 0);
            run += fa.trace.alpha_hat[t];
            fa.trace.s_hat[t] = run;
        }
        if (opts.with_losses) fa.qua_term = quantity_term(g, alpha, fa.n_target);
    }

    const Fsq fsq = model.make_fsq();
    Fsq::SeqResult q = fsq.forward(P, merged, !opts.fsq_identity);
    fa.token_ids = std::move(q.ids);

    // positional embeddings injected post-quantization, at both resolutions
    Value tokens_pe = g.add(q.codes, g.constant(sinusoidal_positions(fa.n_target, dim)));
    const auto up_idx = upsample_indices(fa.trace.s_hat, fa.n_target);
    Value u = g.gather_rows(q.codes, up_idx);
    Value u_pe = g.add(u, g.constant(sinusoidal_positions(fa.t_feat, dim)));
    fa.upsampled = u_pe;

    const CtcHead ctc = model.make_ctc();
    bool ctc_tokens = cfg.ctc_on_tokens;
    if (ctc_tokens) {
        // per-utterance feasibility: the blank-expanded target must fit
        int required = static_cast<int>(utt.transcript.size());
        for (size_t i = 1; i < utt.transcript.size(); ++i)
            if (utt.transcript[i] == utt.transcript[i - 1]) ++required;
        if (fa.n_target < required) ctc_tokens = false;
    }
    fa.ctc_log_probs = ctc.logits(P, ctc_tokens ? tokens_pe : u_pe);
    if (opts.with_losses) {
        fa.ctc = loss_ctc(g, fa.ctc_log_probs, utt.transcript, model.vocab().blank_id());
        fa.attn = model.make_attn().loss(P, tokens_pe, utt.transcript,
                                         opts.attn_pad.value_or(0));
    }

    if (opts.with_recon) {
        fa.mel_hat = model.make_recon().forward(P, u_pe);
        if (opts.with_losses) {
            const int t_mel = utt.mel.frames.rows;
            Value pred = fa.mel_hat->val.rows == t_mel ? fa.mel_hat
                                                       : g.slice_rows(fa.mel_hat, 0, t_mel);
            fa.recon = loss_recon(g, pred, mel);
        }
    }
    return fa;
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

double lr_at_step(const OptimizerConfig& cfg, int step) {
    const double frac = static_cast<double>(step) / cfg.warmup_steps;
    return cfg.peak_lr * std::min(1.0, frac);
}

std::vector<std::vector<int>> make_batches(const std::vector<Utterance>& corpus,
                                           int max_frames) {
    std::vector<int> order(corpus.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return corpus[a].mel.frames.rows < corpus[b].mel.frames.rows;
    });
    std::vector<std::vector<int>> batches;
    std::vector<int> cur;
    int budget = 0;
    for (int idx : order) {
        const int frames = corpus[idx].mel.frames.rows;
        if (!cur.empty() && budget + frames > max_frames) {
            batches.push_back(std::move(cur));
            cur.clear();
            budget = 0;
        }
        cur.push_back(idx);
        budget += frames;
    }
    if (!cur.empty()) batches.push_back(std::move(cur));
    return batches;
}

namespace {

void parallel_for(int n, int n_threads, const std::function<void(int)>& fn) {
    if (n_threads <= 1 || n <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::mutex err_mu;
    std::exception_ptr err;
    auto worker = [&] {
        for (;;) {
            const int i = next.fetch_add(1);
            if (i >= n) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mu);
                if (!err) err = std::current_exception();
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    const int k = std::min(n_threads, n);
    pool.reserve(k);
    for (int t = 0; t < k; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
    if (err) std::rethrow_exception(err);
}

int resolve_threads(int requested) {
    if (requested > 0) return requested;
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

struct UttStepOut {
    GradMap grads;
    double ctc = 0.0, attn = 0.0, qua = 0.0, recon = 0.0;
    bool has_qua = false, has_recon = false;
};

}  // namespace

TrainResult train(const RunConfig& cfg0, const std::vector<Utterance>& train_split) {
    RunConfig cfg = cfg0;
    cfg.validate();
    if (train_split.empty()) throw config_error("train: empty corpus");
    for (const auto& u : train_split) {
        if (u.mel.n_mels != cfg.corpus.n_mels)
            throw config_error("train: corpus/model mel band mismatch for " + u.id);
        if (u.transcript.empty()) throw config_error("train: empty transcript for " + u.id);
    }

    TrainResult res;
    res.model = TokenizerModel::init(cfg);
    TokenizerModel& model = res.model;

    const auto batches = make_batches(train_split, cfg.optim.max_frames_per_batch);
    std::vector<int> batch_order(batches.size());
    for (size_t i = 0; i < batches.size(); ++i) batch_order[i] = static_cast<int>(i);
    Rng order_rng(mix_seed(cfg.seed, 0xBA7C4ULL));
    const int n_threads = resolve_threads(cfg.threads);
    const bool with_recon = cfg.uses_recon();

    Adam opt;
    size_t cursor = batches.size();  // force shuffle on first step
    for (int step = 1; step <= cfg.optim.steps; ++step) {
        if (cursor >= batches.size()) {
            for (size_t i = batch_order.size(); i > 1; --i)
                std::swap(batch_order[i - 1],
                          batch_order[order_rng.uniform_int(0, static_cast<int64_t>(i) - 1)]);
            cursor = 0;
        }
        const auto& batch = batches[batch_order[cursor++]];
        const int b = static_cast<int>(batch.size());

        int64_t total_n = 0;
        for (int idx : batch) {
            const int t_feat = (train_split[idx].mel.frames.rows +
                                cfg.encoder.input_downsample - 1) /
                               cfg.encoder.input_downsample;
            total_n += target_length(t_feat, cfg.merge.ratio);
        }

        std::vector<UttStepOut> outs(batch.size());
        parallel_for(b, n_threads, [&](int i) {
            const Utterance& utt = train_split[batch[i]];
            Graph g;
            Binder P(g, model.params, /*trainable=*/true);
            ForwardOptions fo;
            fo.with_recon = with_recon;
            ForwardArtifacts fa = forward_utterance(g, P, model, utt, fo);
            Value total = g.scale(g.add(fa.ctc, fa.attn), 1.0 / b);
            if (fa.recon) total = g.add(total, g.scale(fa.recon, cfg.lambda_recon / b));
            if (fa.qua_term)
                total = g.add(total, g.scale(fa.qua_term, cfg.lambda_qua / total_n));
            g.backward(total);
            UttStepOut& o = outs[i];
            P.collect(o.grads);
            o.ctc = fa.ctc->val.item();
            o.attn = fa.attn->val.item();
            if (fa.qua_term) {
                o.qua = fa.qua_term->val.item();
                o.has_qua = true;
            }
            if (fa.recon) {
                o.recon = fa.recon->val.item();
                o.has_recon = true;
            }
        });

        GradMap grads;
        StepStats st;
        st.step = step;
        double qua_sum = 0.0;
        for (int i = 0; i < b; ++i) {
            grads.add_scaled(outs[i].grads, 1.0);
            st.l_ctc += outs[i].ctc / b;
            st.l_attn += outs[i].attn / b;
            if (outs[i].has_qua) qua_sum += outs[i].qua;
            if (outs[i].has_recon) st.l_recon += outs[i].recon / b;
        }
        st.l_qua = total_n > 0 ? qua_sum / total_n : 0.0;

        try {
            st.total = loss_total(st.l_ctc, st.l_attn, st.l_qua, st.l_recon, cfg.lambda_qua,
                                  cfg.lambda_recon);
            st.grad_norm = grads.global_norm();
            if (!std::isfinite(st.grad_norm))
                throw divergence_error("training divergence: non-finite gradient norm");
        } catch (const divergence_error&) {
            // abort the step; params still hold the last good state
            res.diverged = true;
            res.last_good_step = step - 1;
            return res;
        }

        clip_global_norm(grads, cfg.optim.grad_clip);
        st.lr = lr_at_step(cfg.optim, step);
        if (cfg.optim.merge_lr_scale != 1.0) {
            const double ms = cfg.optim.merge_lr_scale;
            opt.step(model.params, grads, st.lr, [ms](const std::string& name) {
                return name.rfind("merge.", 0) == 0 ? ms : 1.0;
            });
        } else {
            opt.step(model.params, grads, st.lr);
        }
        res.log.push_back(st);
        res.last_good_step = step;
    }
    return res;
}

// ---------------------------------------------------------------------------
// tokenize / evaluate / reconstruct
// ---------------------------------------------------------------------------

std::vector<TokenStreamRecord> tokenize(const TokenizerModel& model,
                                        const std::vector<Utterance>& corpus) {
    const RunConfig& cfg = model.cfg;
    std::vector<TokenStreamRecord> recs(corpus.size());
    const int n_threads = resolve_threads(cfg.threads);
    parallel_for(static_cast<int>(corpus.size()), n_threads, [&](int i) {
        const Utterance& utt = corpus[i];
        if (utt.mel.frame_rate != cfg.corpus.frame_rate)
            throw config_error("tokenize: corpus/model frame-rate mismatch for " + utt.id);
        if (utt.mel.n_mels != cfg.corpus.n_mels)
            throw config_error("tokenize: corpus/model mel band mismatch for " + utt.id);
        Graph g;
        Binder P(g, model.params, /*trainable=*/false);
        ForwardOptions fo;
        fo.with_losses = false;
        fo.with_recon = false;
        ForwardArtifacts fa = forward_utterance(g, P, model, utt, fo);
        TokenStreamRecord r;
        r.utterance_id = utt.id;
        r.ratio = cfg.merge.ratio;
        r.t_frames = fa.t_feat;
        r.n_tokens = fa.n_target;
        r.ids = fa.token_ids;
        r.s_hat = fa.trace.s_hat;
        r.variant = variant_name(cfg.variant);
        r.validate(cfg.fsq.codebook_size());
        recs[i] = std::move(r);
    });
    return recs;
}

EvalResult evaluate(const TokenizerModel& model, const std::vector<Utterance>& split) {
    EvalResult ev;
    ev.n_utterances = static_cast<int>(split.size());
    if (split.empty()) return ev;
    const int n_threads = resolve_threads(model.cfg.threads);

    std::vector<int> edits(split.size());
    std::vector<int> ref_lens(split.size());
    std::vector<double> cers(split.size());
    ev.recon.resize(split.size());
    parallel_for(static_cast<int>(split.size()), n_threads, [&](int i) {
        const Utterance& utt = split[i];
        Graph g;
        Binder P(g, model.params, /*trainable=*/false);
        ForwardOptions fo;
        fo.with_losses = false;
        fo.with_recon = true;
        ForwardArtifacts fa = forward_utterance(g, P, model, utt, fo);
        const auto hyp = ctc_greedy_decode(fa.ctc_log_probs->val, model.vocab().blank_id());
        edits[i] = edit_distance(utt.transcript, hyp);
        ref_lens[i] = static_cast<int>(utt.transcript.size());
        cers[i] = cer(utt.transcript, hyp);
        ev.recon[i] = mel_metrics(fa.mel_hat->val, utt.mel.frames);
    });

    int64_t total_edits = 0, total_len = 0;
    double cer_sum = 0.0;
    for (size_t i = 0; i < split.size(); ++i) {
        total_edits += edits[i];
        total_len += ref_lens[i];
        cer_sum += cers[i];
    }
    ev.cer_corpus = static_cast<double>(total_edits) / total_len;
    ev.cer_mean = cer_sum / split.size();
    ev.recon_aggregate = aggregate(ev.recon);
    return ev;
}

Tensor reconstruct(const TokenizerModel& model, const Utterance& utt) {
    Graph g;
    Binder P(g, model.params, /*trainable=*/false);
    ForwardOptions fo;
    fo.with_losses = false;
    fo.with_recon = true;
    return forward_utterance(g, P, model, utt, fo).mel_hat->val;
}

// ---------------------------------------------------------------------------
// flow probe wiring
// ---------------------------------------------------------------------------

namespace {

// condition grid aligned to the mel frame grid: repeat each upsampled token
// vector by the encoder downsample factor
Tensor condition_grid(const TokenizerModel& model, const Utterance& utt) {
    Graph g;
    Binder P(g, model.params, /*trainable=*/false);
    ForwardOptions fo;
    fo.with_losses = false;
    fo.with_recon = false;
    ForwardArtifacts fa = forward_utterance(g, P, model, utt, fo);
    const Tensor& u = fa.upsampled->val;
    const int ds = model.cfg.encoder.input_downsample;
    const int t_mel = utt.mel.frames.rows;
    Tensor cond(t_mel, u.cols);
    for (int t = 0; t < t_mel; ++t) {
        const int src = std::min(t / ds, u.rows - 1);
        for (int c = 0; c < u.cols; ++c) cond.at(t, c) = u.at(src, c);
    }
    return cond;
}

}  // namespace

FlowProbeResult run_flow_probe(const TokenizerModel& model,
                               const std::vector<Utterance>& train_split,
                               const std::vector<Utterance>& held_split,
                               FlowTrainConfig fm_cfg, int hidden) {
    if (train_split.empty() || held_split.empty())
        throw config_error("run_flow_probe: empty split");
    FlowFieldConfig fcfg;
    fcfg.x_dim = model.cfg.corpus.n_mels;
    fcfg.cond_dim = model.cfg.encoder.hidden_dim;
    fcfg.hidden = hidden;
    FlowField field(fcfg);
    ParamStore ps;
    Rng rng(mix_seed(fm_cfg.seed, 0xF10DULL));
    field.init(ps, rng);

    auto build = [&](const std::vector<Utterance>& split) {
        std::vector<FlowSample> data(split.size());
        const int n_threads = resolve_threads(model.cfg.threads);
        parallel_for(static_cast<int>(split.size()), n_threads, [&](int i) {
            data[i].cond = condition_grid(model, split[i]);
            data[i].x1 = split[i].mel.frames;
        });
        return data;
    };
    const auto train_data = build(train_split);
    auto held_data = build(held_split);

    train_flow_matching(ps, field, train_data, fm_cfg);

    FlowProbeResult res;
    res.n_held = static_cast<int>(held_data.size());
    res.held_loss_matched = mean_fm_loss(ps, field, held_data, mix_seed(fm_cfg.seed, 0xE1));
    // rotate conditions across utterances; same noise seeds
    std::vector<Tensor> conds(held_data.size());
    for (size_t i = 0; i < held_data.size(); ++i) conds[i] = held_data[i].cond;
    for (size_t i = 0; i < held_data.size(); ++i) {
        const Tensor& src = conds[(i + 1) % conds.size()];
        Tensor fit(held_data[i].x1.rows, src.cols);
        for (int t = 0; t < fit.rows; ++t) {
            const int s = std::min(t, src.rows - 1);
            for (int c = 0; c < src.cols; ++c) fit.at(t, c) = src.at(s, c);
        }
        held_data[i].cond = std::move(fit);
    }
    res.held_loss_permuted = mean_fm_loss(ps, field, held_data, mix_seed(fm_cfg.seed, 0xE1));
    return res;
}

// ---------------------------------------------------------------------------
// experiment
// ---------------------------------------------------------------------------

void split_corpus(const std::vector<Utterance>& corpus, double holdout_fraction,
                  uint64_t seed, std::vector<Utterance>& train_out,
                  std::vector<Utterance>& held_out) {
    train_out.clear();
    held_out.clear();
    std::vector<int> perm(corpus.size());
    for (size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
    Rng rng(mix_seed(seed, 0x5B117ULL));
    for (size_t i = perm.size(); i > 1; --i)
        std::swap(perm[i - 1], perm[rng.uniform_int(0, static_cast<int64_t>(i) - 1)]);
    size_t n_held = static_cast<size_t>(corpus.size() * holdout_fraction);
    if (holdout_fraction > 0.0 && n_held == 0) n_held = 1;
    std::vector<int> held_idx(perm.begin(), perm.begin() + n_held);
    std::vector<int> train_idx(perm.begin() + n_held, perm.end());
    std::sort(held_idx.begin(), held_idx.end());
    std::sort(train_idx.begin(), train_idx.end());
    for (int i : train_idx) train_out.push_back(corpus[i]);
    for (int i : held_idx) held_out.push_back(corpus[i]);
}

ExperimentConfig experiment_config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw config_error(std::string("experiment config parse error: ") + e.what());
    }
    ExperimentConfig cfg;
    if (j.contains("run")) cfg.base = run_config_from_json(j["run"].dump());
    if (j.contains("variants")) {
        cfg.variants.clear();
        for (const auto& v : j["variants"]) cfg.variants.push_back(variant_from_name(v));
    }
    cfg.recon_control = j.value("recon_control", cfg.recon_control);
    cfg.probe_seed = j.value("probe_seed", cfg.probe_seed);
    if (j.contains("probe")) {
        const auto& p = j["probe"];
        cfg.probe.d_embed = p.value("d_embed", cfg.probe.d_embed);
        cfg.probe.d_lm = p.value("d_lm", cfg.probe.d_lm);
        cfg.probe.backbone_layers = p.value("backbone_layers", cfg.probe.backbone_layers);
        cfg.probe.n_options = p.value("n_options", cfg.probe.n_options);
        cfg.probe.train_steps = p.value("train_steps", cfg.probe.train_steps);
        cfg.probe.batch = p.value("batch", cfg.probe.batch);
        cfg.probe.lr = p.value("lr", cfg.probe.lr);
        cfg.probe.holdout_fraction = p.value("holdout_fraction", cfg.probe.holdout_fraction);
    }
    return cfg;
}

namespace {

const VariantReport* find_row(const ComparisonReport& rep, const std::string& name) {
    for (const auto& r : rep.rows)
        if (r.variant == name && r.present) return &r;
    return nullptr;
}

}  // namespace

ComparisonReport run_experiment(const ExperimentConfig& cfg) {
    cfg.base.validate();
    const auto& cc = cfg.base.corpus;
    const auto vocab = make_default_vocab(cc.n_symbols, cc.n_mels, cfg.base.seed);
    CorpusGenOptions gen;
    gen.noise_sigma = cc.noise_sigma;
    gen.max_edge_silence = cc.max_edge_silence;
    gen.frame_rate = cc.frame_rate;
    const auto corpus =
        generate_corpus(vocab, cc.n_utts, cc.min_len, cc.max_len, cfg.base.seed, gen);
    std::vector<Utterance> train_split, held_split;
    split_corpus(corpus, cc.holdout_fraction, cfg.base.seed, train_split, held_split);

    std::vector<Variant> variants = cfg.variants;
    if (cfg.recon_control &&
        std::find(variants.begin(), variants.end(), Variant::kReconControlR1) == variants.end())
        variants.push_back(Variant::kReconControlR1);

    const auto tasks = make_majority_tasks(corpus, cfg.probe.n_options, cc.n_symbols,
                                           cfg.probe_seed);

    ComparisonReport rep;
    for (Variant v : variants) {
        VariantReport row;
        row.variant = variant_name(v);
        try {
            const RunConfig rc = cfg.base.with_variant(v);
            TrainResult tr = train(rc, train_split);
            if (tr.diverged) {
                row.present = false;
                rep.rows.push_back(row);
                continue;
            }
            row.final_loss = tr.log.empty() ? 0.0 : tr.log.back().total;
            EvalResult ev = evaluate(tr.model, held_split);
            row.cer = ev.cer_corpus;
            row.recon = ev.recon_aggregate;
            int hits = 0;
            for (const auto& m : ev.recon)
                if (m.duration_ratio >= 0.98 && m.duration_ratio <= 1.02) ++hits;
            row.duration_ratio_hit_rate =
                ev.recon.empty() ? 0.0 : static_cast<double>(hits) / ev.recon.size();

            const auto recs = tokenize(tr.model, corpus);
            std::map<std::string, std::vector<int64_t>> token_map;
            for (const auto& r : recs) token_map[r.utterance_id] = r.ids;
            DiscrimProbeConfig pc = cfg.probe;
            pc.codebook_size = rc.fsq.codebook_size();
            pc.n_symbols = cc.n_symbols;
            const ProbeEvalResult pe = probe_train_eval(tasks, token_map, pc, cfg.probe_seed);
            row.probe_accuracy = pe.accuracy;
            row.probe_backbone_unchanged =
                pe.backbone_checksum_before == pe.backbone_checksum_after;
            row.present = true;
        } catch (const std::exception&) {
            row.present = false;
        }
        rep.rows.push_back(row);
    }

    // verdicts
    const VariantReport* dyn = find_row(rep, "dynamic");
    if (!dyn) dyn = find_row(rep, "with-recon");
    const VariantReport* fixed = find_row(rep, "fixed-stride");
    const VariantReport* pure = find_row(rep, "pure-semantic");
    const VariantReport* ctl = find_row(rep, "recon-control-r1");

    {
        Verdict v;
        v.name = "dynamic-beats-fixed-stride-cer";
        if (dyn && fixed) {
            v.pass = dyn->cer < fixed->cer;
            std::ostringstream oss;
            oss << "dynamic cer " << dyn->cer << " vs fixed-stride cer " << fixed->cer;
            v.detail = oss.str();
        } else {
            v.applicable = false;
            v.detail = "missing variant";
        }
        rep.verdicts.push_back(v);
    }
    {
        Verdict v;
        v.name = "pure-semantic-cer-le-with-recon";
        if (pure && dyn) {
            v.pass = pure->cer <= dyn->cer;
            std::ostringstream oss;
            oss << "pure-semantic cer " << pure->cer << " vs with-recon cer " << dyn->cer;
            v.detail = oss.str();
        } else {
            v.applicable = false;
            v.detail = "missing variant";
        }
        rep.verdicts.push_back(v);
    }
    {
        Verdict v;
        v.name = "micro-dynamics-collapse-vs-r1-control";
        if (dyn && ctl) {
            const bool delta_ok = dyn->recon.delta_mae.median >= 2.0 * ctl->recon.delta_mae.median;
            const bool flux_ok = dyn->recon.flux_mae.median >= 2.0 * ctl->recon.flux_mae.median;
            const bool dur_ok = dyn->duration_ratio_hit_rate >= 0.9;
            v.pass = delta_ok && flux_ok && dur_ok;
            std::ostringstream oss;
            oss << "delta " << dyn->recon.delta_mae.median << " vs " << ctl->recon.delta_mae.median
                << ", flux " << dyn->recon.flux_mae.median << " vs " << ctl->recon.flux_mae.median
                << ", duration-ratio hit rate " << dyn->duration_ratio_hit_rate;
            v.detail = oss.str();
        } else {
            v.applicable = false;
            v.detail = "missing variant";
        }
        rep.verdicts.push_back(v);
    }
    return rep;
}

std::string format_report(const ComparisonReport& rep) {
    std::ostringstream os;
    os << "variant              cer      probe_acc  mel_mae   delta_mae  flux_mae  dur_ratio\n";
    for (const auto& r : rep.rows) {
        char buf[256];
        if (r.present) {
            std::snprintf(buf, sizeof(buf), "%-20s %-8.4f %-10.4f %-9.3f %-10.3f %-9.3f %.4f\n",
                          r.variant.c_str(), r.cer, r.probe_accuracy, r.recon.mel_mae.median,
                          r.recon.delta_mae.median, r.recon.flux_mae.median,
                          r.recon.duration_ratio.median);
        } else {
            std::snprintf(buf, sizeof(buf), "%-20s absent\n", r.variant.c_str());
        }
        os << buf;
    }
    for (const auto& v : rep.verdicts) {
        os << (v.applicable ? (v.pass ? "PASS " : "FAIL ") : "N/A  ") << v.name << ": "
           << v.detail << "\n";
    }
    return os.str();
}

void write_report_json(const std::string& path, const ComparisonReport& rep) {
    json j;
    for (const auto& r : rep.rows) {
        json row;
        row["variant"] = r.variant;
        row["present"] = r.present;
        if (r.present) {
            row["cer"] = r.cer;
            row["probe_accuracy"] = r.probe_accuracy;
            row["final_loss"] = r.final_loss;
            row["duration_ratio_hit_rate"] = r.duration_ratio_hit_rate;
            auto stat = [](const AggregateStat& s) {
                return json{{"median", s.median}, {"q1", s.q1}, {"q3", s.q3}};
            };
            row["recon"] = {{"mel_mae", stat(r.recon.mel_mae)},
                            {"mel_corr", stat(r.recon.mel_corr)},
                            {"delta_mae", stat(r.recon.delta_mae)},
                            {"flux_mae", stat(r.recon.flux_mae)},
                            {"duration_ratio", stat(r.recon.duration_ratio)}};
        }
        j["rows"].push_back(row);
    }
    for (const auto& v : rep.verdicts)
        j["verdicts"].push_back({{"name", v.name},
                                 {"pass", v.pass},
                                 {"applicable", v.applicable},
                                 {"detail", v.detail}});
    std::ofstream os(path);
    if (!os) throw input_error("cannot write " + path);
    os << j.dump(2) << "\n";
}

}  // namespace dyntok
