// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dyntok/corpus.hpp"
#include "dyntok/decoders.hpp"
#include "dyntok/diagnostics.hpp"
#include "dyntok/encoder.hpp"
#include "dyntok/fsq.hpp"
#include "dyntok/merge.hpp"
#include "dyntok/probes.hpp"
#include "dyntok/serialize.hpp"

namespace dyntok {

// Large-scale reference values kept for documentation; desk-scale defaults
// below are deliberately smaller.
namespace reference_config {
inline constexpr double kPeakLearningRate = 2e-5;
inline constexpr int kWarmupSteps = 12000;
inline constexpr int kMaxFramesPerBatch = 24000;
inline constexpr double kGradClip = 5.0;
inline constexpr double kCompressionRatio = 10.0;
inline constexpr int kNMels = 128;
inline constexpr double kSampleRate = 16000.0;
inline constexpr int kFftSize = 400;
inline constexpr int kHop = 160;
}  // namespace reference_config

enum class Variant { kDynamic, kFixedStride, kPureSemantic, kWithRecon, kReconControlR1 };

std::string variant_name(Variant v);
Variant variant_from_name(const std::string& name);

struct CorpusConfig {
    int n_symbols = 8;
    int n_mels = 32;
    int n_utts = 2000;
    int min_len = 4;
    int max_len = 9;
    double noise_sigma = 0.05;
    int max_edge_silence = 5;
    double frame_rate = 100.0;
    double holdout_fraction = 0.1;
};

struct OptimizerConfig {
    double peak_lr = 2e-3;      // reference 2e-5
    int warmup_steps = 200;     // reference 12000
    int max_frames_per_batch = 2000;  // mel frames; reference 24000
    double grad_clip = 5.0;
    int steps = 600;
    // update-rate multiplier for the merge predictor; damping it keeps the
    // weight predictor away from its winner-take-all optimum at desk-scale
    // learning rates
    double merge_lr_scale = 1.0;
};

struct RunConfig {
    CorpusConfig corpus;
    EncoderConfig encoder;
    MergeConfig merge;
    FsqConfig fsq;
    AttentionDecoder::Config attn;
    ReconConfig recon;
    int ctc_hidden = 64;
    // true: CTC reads the N-length token sequence, falling back to the
    // oracle-upsampled sequence U (length T) per utterance when the target
    // cannot fit in N frames; false: CTC always reads U. The token path
    // makes alignments emerge orders of magnitude faster at desk scale.
    bool ctc_on_tokens = true;
    double lambda_qua = 1.0;
    double lambda_recon = 1.0;
    OptimizerConfig optim;
    uint64_t seed = 1;
    Variant variant = Variant::kDynamic;
    int threads = 0;  // 0 = hardware concurrency

    void validate() const;
    RunConfig with_variant(Variant v) const;
    bool uses_recon() const { return lambda_recon > 0.0; }
};

RunConfig run_config_from_json(const std::string& text);
std::string run_config_to_json(const RunConfig& cfg);

// one line of the serialized token stream
struct TokenStreamRecord {
    std::string utterance_id;
    double ratio = 1.0;
    int t_frames = 0;  // feature frames
    int n_tokens = 0;
    std::vector<int64_t> ids;
    std::vector<double> s_hat;  // optional; empty = absent
    std::string variant;

    void validate(int64_t codebook_size) const;
};

void write_token_stream(const std::string& path, const std::vector<TokenStreamRecord>& recs);
std::vector<TokenStreamRecord> read_token_stream(const std::string& path,
                                                 int64_t codebook_size);

// ---------------------------------------------------------------------------
// model bundle
// ---------------------------------------------------------------------------

struct TokenizerModel {
    RunConfig cfg;
    ParamStore params;

    Encoder make_encoder() const { return Encoder(cfg.encoder, cfg.corpus.n_mels); }
    MergePredictor make_merge() const {
        return MergePredictor(cfg.merge, cfg.encoder.hidden_dim);
    }
    Fsq make_fsq() const { return Fsq(cfg.fsq, cfg.encoder.hidden_dim); }
    VocabConfig vocab() const { return VocabConfig{cfg.corpus.n_symbols}; }
    CtcHead make_ctc() const { return CtcHead(vocab(), cfg.encoder.hidden_dim, cfg.ctc_hidden); }
    AttentionDecoder make_attn() const { return AttentionDecoder(vocab(), cfg.attn); }
    ReconDecoder make_recon() const {
        return ReconDecoder(cfg.recon, cfg.encoder.hidden_dim, cfg.corpus.n_mels);
    }

    static TokenizerModel init(const RunConfig& cfg);
};

void save_checkpoint(const std::string& path, const TokenizerModel& model);
TokenizerModel load_checkpoint(const std::string& path);

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

// L_total = L_CTC + L_Attn + lambda_qua*L_Qua + lambda_recon*L_Recon.
// Any non-finite component aborts the step.
double loss_total(double l_ctc, double l_attn, double l_qua, double l_recon,
                  double lambda_qua, double lambda_recon);

// Per-utterance forward products. Values stay alive as long as the graph.
struct ForwardArtifacts {
    int t_feat = 0;
    int n_target = 0;
    FrameWeightTrace trace;
    std::vector<int64_t> token_ids;
    Value ctc_log_probs = nullptr;
    Value ctc = nullptr;      // losses (when requested)
    Value attn = nullptr;
    Value qua_term = nullptr;  // |sum alpha - N|; null for fixed-stride
    Value recon = nullptr;     // cropped-mse; null when recon disabled
    Value mel_hat = nullptr;   // full-length prediction (when recon requested)
    Value upsampled = nullptr; // U with positional embeddings (T x D)
};

struct ForwardOptions {
    bool with_losses = true;
    bool with_recon = true;
    // replace the FSQ rounding with its smooth pass-through; used by the
    // finite-difference suite (the straight-through backward equals this
    // path's backward by the FSQ contract)
    bool fsq_identity = false;
    std::optional<int> attn_pad;  // test hook for the masking contract
};

ForwardArtifacts forward_utterance(Graph& g, Binder& P, const TokenizerModel& model,
                                   const Utterance& utt, const ForwardOptions& opts);

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

struct StepStats {
    int step = 0;
    double lr = 0.0;
    double total = 0.0;
    double l_ctc = 0.0;
    double l_attn = 0.0;
    double l_qua = 0.0;
    double l_recon = 0.0;
    double grad_norm = 0.0;  // pre-clip
};

struct TrainResult {
    TokenizerModel model;
    std::vector<StepStats> log;
    bool diverged = false;
    int last_good_step = 0;
};

// learning rate at 1-based step s: peak * min(1, s/warmup)
double lr_at_step(const OptimizerConfig& cfg, int step);

// frame-budget batches over length-sorted utterances
std::vector<std::vector<int>> make_batches(const std::vector<Utterance>& corpus,
                                           int max_frames);

TrainResult train(const RunConfig& cfg, const std::vector<Utterance>& train_split);

std::vector<TokenStreamRecord> tokenize(const TokenizerModel& model,
                                        const std::vector<Utterance>& corpus);

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
    double cer_corpus = 0.0;  // total edits / total reference length
    double cer_mean = 0.0;    // mean per-utterance cer
    std::vector<ReconMetrics> recon;
    AggregateReport recon_aggregate;
    int n_utterances = 0;
};

EvalResult evaluate(const TokenizerModel& model, const std::vector<Utterance>& split);

// reconstruct one utterance's mel (full length, uncropped)
Tensor reconstruct(const TokenizerModel& model, const Utterance& utt);

// ---------------------------------------------------------------------------
// flow probe wiring
// ---------------------------------------------------------------------------

struct FlowProbeResult {
    double held_loss_matched = 0.0;
    double held_loss_permuted = 0.0;
    int n_held = 0;
};

// Trains the conditional FM probe on token conditions aligned to the mel
// grid, then reports held-out loss with matched vs permuted conditions.
FlowProbeResult run_flow_probe(const TokenizerModel& model,
                               const std::vector<Utterance>& train_split,
                               const std::vector<Utterance>& held_split,
                               FlowTrainConfig fm_cfg, int hidden = 48);

// ---------------------------------------------------------------------------
// experiment
// ---------------------------------------------------------------------------

struct ExperimentConfig {
    RunConfig base;
    std::vector<Variant> variants = {Variant::kDynamic, Variant::kFixedStride,
                                     Variant::kPureSemantic};
    bool recon_control = true;  // adds the rate-1 control used by verdict (c)
    DiscrimProbeConfig probe;
    uint64_t probe_seed = 7;
};

ExperimentConfig experiment_config_from_json(const std::string& text);

struct VariantReport {
    std::string variant;
    bool present = false;
    double cer = 0.0;
    double probe_accuracy = 0.0;
    bool probe_backbone_unchanged = true;
    AggregateReport recon;
    double duration_ratio_hit_rate = 0.0;  // fraction in [0.98, 1.02]
    double final_loss = 0.0;
};

struct Verdict {
    std::string name;
    bool pass = false;
    bool applicable = true;
    std::string detail;
};

struct ComparisonReport {
    std::vector<VariantReport> rows;
    std::vector<Verdict> verdicts;
};

ComparisonReport run_experiment(const ExperimentConfig& cfg);
std::string format_report(const ComparisonReport& report);
void write_report_json(const std::string& path, const ComparisonReport& report);

// seeded train/holdout split by utterance
void split_corpus(const std::vector<Utterance>& corpus, double holdout_fraction,
                  uint64_t seed, std::vector<Utterance>& train_out,
                  std::vector<Utterance>& held_out);

}  // namespace dyntok
