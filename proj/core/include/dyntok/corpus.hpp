// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dyntok/tensor.hpp"

namespace dyntok {

// log of the power floor applied before taking logs; also the value of
// silence frames in synthetic corpora
inline constexpr double kLogFloor = -23.025850929940457;  // ln(1e-10)

struct MelSpectrogram {
    Tensor frames;  // T x F log-energies
    double frame_rate = 100.0;
    int n_mels = 0;

    int n_frames() const { return frames.rows; }
};

struct SymbolSpec {
    int symbol_id = 0;
    std::vector<double> spectral_template;  // F nonnegative log-energy levels
    int min_frames = 1;
    int max_frames = 1;
};

struct Utterance {
    std::string id;
    MelSpectrogram mel;
    std::vector<int> transcript;
    uint64_t seed = 0;
    // generation metadata: frame layout is lead silence, one span per
    // transcript symbol, trail silence
    int lead_silence = 0;
    int trail_silence = 0;
    std::vector<int> durations;
};

struct CorpusGenOptions {
    double noise_sigma = 0.05;
    int max_edge_silence = 5;
    double frame_rate = 100.0;
    // adjacent identical symbols are resampled by default: back-to-back
    // repeats of one steady-state pattern are not distinguishable events in
    // mel space, and CTC run collapse would count them as deletions
    bool allow_adjacent_repeats = false;
};

// Seeded bump-spectrum vocabulary; enforces pairwise template cosine < 0.95.
// Even ids get short duration ranges, odd ids long ones, so fixed windows
// cannot align with symbol boundaries.
std::vector<SymbolSpec> make_default_vocab(int n_symbols, int n_mels, uint64_t seed);

std::vector<Utterance> generate_corpus(const std::vector<SymbolSpec>& vocab, int n_utts,
                                       int min_len, int max_len, uint64_t seed,
                                       const CorpusGenOptions& opts = {});

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b);

// nearest template by euclidean distance; returns symbol_id
int nearest_symbol(const std::vector<SymbolSpec>& vocab, const double* frame, int n_mels);

struct LogMelConfig {
    int fft_size = 400;
    int hop = 160;
    int n_mels = 128;
};

// Centered framing with reflect padding; frame count floor(len/hop)+1.
// Power is clamped at 1e-10 before the log.
MelSpectrogram log_mel(const std::vector<double>& waveform, double sample_rate,
                       const LogMelConfig& cfg);

// center frequency (Hz) of mel band k under the HTK mel scale partition used
// by log_mel; exposed for tests
double mel_band_center_hz(int band, int n_mels, double sample_rate);

}  // namespace dyntok
