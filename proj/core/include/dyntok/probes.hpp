// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dyntok/corpus.hpp"
#include "dyntok/nn.hpp"

namespace dyntok {

// ---------------------------------------------------------------------------
// generative probe: conditional flow matching
// ---------------------------------------------------------------------------

struct FlowFieldConfig {
    int x_dim = 0;     // bins per frame
    int cond_dim = 0;  // conditioning width; 0 = unconditional
    int hidden = 64;
    int time_dim = 8;
};

// Per-frame MLP with one temporal convolution; input is the concatenation of
// x_t, the aligned condition row and a fixed time featurization.
class FlowField {
public:
    explicit FlowField(FlowFieldConfig cfg) : cfg_(cfg) {}

    void init(ParamStore& ps, Rng& rng) const;
    // xt: (T x x_dim); cond: (T x cond_dim) or nullptr
    Value forward(Binder& P, Value xt, double t, const Tensor* cond) const;

    const FlowFieldConfig& config() const { return cfg_; }

private:
    FlowFieldConfig cfg_;
};

// L_FM at one sampled (t, x0): mean over bins of |v(xt,t,U) - (x1-x0)|^2.
// cond may be empty (rows==0) only when the field is unconditional.
Value fm_loss(Binder& P, const FlowField& field, const Tensor& cond, const Tensor& x1,
              uint64_t noise_seed);

using FieldFn = std::function<Tensor(const Tensor& x, double t, const Tensor& cond)>;

// Euler integration of dx/dt = v(x,t,cond) from x0 over k uniform steps
Tensor fm_sample(const FieldFn& field, Tensor x0, const Tensor& cond, int steps);
// trained-field variant; x0 ~ N(0,I) drawn from seed
Tensor fm_sample(const ParamStore& ps, const FlowField& field, const Tensor& cond,
                 int t_frames, int steps, uint64_t seed);

struct FlowSample {
    Tensor cond;  // may be empty for unconditional training
    Tensor x1;
};

struct FlowTrainConfig {
    int steps = 2000;
    int batch = 16;
    double lr = 1e-3;
    double grad_clip = 5.0;
    uint64_t seed = 0;
};

void train_flow_matching(ParamStore& ps, const FlowField& field,
                         const std::vector<FlowSample>& data, const FlowTrainConfig& cfg);

// mean fm_loss over a dataset with per-sample deterministic noise
double mean_fm_loss(const ParamStore& ps, const FlowField& field,
                    const std::vector<FlowSample>& data, uint64_t seed);

// ---------------------------------------------------------------------------
// discriminative probe: frozen backbone, trainable projector + head
// ---------------------------------------------------------------------------

struct ProbeTask {
    std::string utterance_id;
    int question_id = 0;
    std::vector<int> options;  // symbol ids, exactly one correct
    int correct_index = 0;
};

// "which symbol occurs most often": one task per utterance with a strict
// majority symbol; distractors drawn from the remaining vocabulary
std::vector<ProbeTask> make_majority_tasks(const std::vector<Utterance>& corpus,
                                           int n_options, int n_symbols, uint64_t seed);

struct DiscrimProbeConfig {
    int64_t codebook_size = 16384;
    int n_symbols = 8;
    int d_embed = 32;
    int d_lm = 64;
    int backbone_layers = 2;
    int n_options = 4;
    int train_steps = 400;
    int batch = 16;
    double lr = 2e-3;
    double grad_clip = 5.0;
    double holdout_fraction = 0.25;
};

class DiscrimProbe {
public:
    explicit DiscrimProbe(DiscrimProbeConfig cfg) : cfg_(cfg) {}

    void init_trainable(ParamStore& ps, Rng& rng) const;  // proj.* and head.*
    void init_backbone(ParamStore& ps, Rng& rng) const;   // backbone.*

    // Embed(Z) followed by the trainable projector network -> (N x d_lm)
    Value audio_project(Binder& P, const std::vector<int64_t>& token_ids) const;
    Value backbone_forward(Binder& frozen, Value x) const;
    // scores over the option symbols -> (1 x K)
    Value option_scores(Binder& P, Value pooled, const std::vector<int>& options) const;

    const DiscrimProbeConfig& config() const { return cfg_; }

private:
    DiscrimProbeConfig cfg_;
};

struct ProbeEvalResult {
    double accuracy = 0.0;        // held-out
    double train_accuracy = 0.0;
    int n_train = 0;
    int n_eval = 0;
    uint64_t backbone_checksum_before = 0;
    uint64_t backbone_checksum_after = 0;
};

// Trains projector + head on the train split, reports held-out accuracy.
// The backbone is bound frozen; the checksums prove it.
ProbeEvalResult probe_train_eval(const std::vector<ProbeTask>& tasks,
                                 const std::map<std::string, std::vector<int64_t>>& tokens,
                                 const DiscrimProbeConfig& cfg, uint64_t seed,
                                 bool train = true);

}  // namespace dyntok
