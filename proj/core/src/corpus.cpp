// SPDX-License-Identifier: Apache-2.0

#include "dyntok/corpus.hpp"

#include <cmath>
#include <numeric>

#include "dyntok/errors.hpp"
#include "dyntok/rng.hpp"

namespace dyntok {

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / std::sqrt(na * nb);
}

namespace {

std::vector<double> bump_template(int n_mels, Rng& rng) {
    std::vector<double> t(n_mels, 0.0);
    const int n_bumps = static_cast<int>(rng.uniform_int(2, 3));
    for (int b = 0; b < n_bumps; ++b) {
        const double center = rng.uniform(1.0, n_mels - 2.0);
        const double height = rng.uniform(6.0, 10.0);
        const double width = rng.uniform(1.2, 3.0);
        for (int f = 0; f < n_mels; ++f) {
            const double d = (f - center) / width;
            t[f] += height * std::exp(-0.5 * d * d);
        }
    }
    return t;
}

}  // namespace

std::vector<SymbolSpec> make_default_vocab(int n_symbols, int n_mels, uint64_t seed) {
    if (n_symbols < 2) throw config_error("vocab needs at least 2 symbols");
    if (n_mels < 4) throw config_error("vocab needs at least 4 mel bands");
    Rng rng(mix_seed(seed, 0xC0CABULL));
    std::vector<SymbolSpec> vocab;
    vocab.reserve(n_symbols);
    for (int s = 0; s < n_symbols; ++s) {
        SymbolSpec spec;
        spec.symbol_id = s;
        // short and long symbols alternate (mel-rate frames); the asymmetry
        // is what fixed windows cannot track
        if (s % 2 == 0) {
            spec.min_frames = 4;
            spec.max_frames = 8;
        } else {
            spec.min_frames = 26;
            spec.max_frames = 38;
        }
        for (int attempt = 0; attempt < 256; ++attempt) {
            spec.spectral_template = bump_template(n_mels, rng);
            bool ok = true;
            for (const auto& other : vocab)
                if (cosine_similarity(spec.spectral_template, other.spectral_template) >= 0.95) {
                    ok = false;
                    break;
                }
            if (ok) break;
            if (attempt == 255)
                throw config_error("could not draw distinguishable templates; raise n_mels");
        }
        vocab.push_back(std::move(spec));
    }
    return vocab;
}

std::vector<Utterance> generate_corpus(const std::vector<SymbolSpec>& vocab, int n_utts,
                                       int min_len, int max_len, uint64_t seed,
                                       const CorpusGenOptions& opts) {
    if (vocab.empty()) throw config_error("generate_corpus: empty vocab");
    if (vocab.size() < 2) throw config_error("generate_corpus: vocab needs >= 2 symbols");
    if (n_utts < 1) throw config_error("generate_corpus: n_utts must be >= 1");
    if (min_len < 1 || min_len > max_len)
        throw config_error("generate_corpus: bad transcript length range");
    const int n_mels = static_cast<int>(vocab.front().spectral_template.size());
    for (const auto& s : vocab) {
        if (static_cast<int>(s.spectral_template.size()) != n_mels)
            throw config_error("generate_corpus: inconsistent template widths");
        if (s.min_frames < 1 || s.max_frames < s.min_frames)
            throw config_error("generate_corpus: bad duration range");
    }

    std::vector<Utterance> out;
    out.reserve(n_utts);
    for (int u = 0; u < n_utts; ++u) {
        const uint64_t utt_seed = mix_seed(seed, static_cast<uint64_t>(u));
        Rng rng(utt_seed);
        Utterance utt;
        char buf[32];
        std::snprintf(buf, sizeof(buf), "utt%06d", u);
        utt.id = buf;
        utt.seed = utt_seed;

        const int len = static_cast<int>(rng.uniform_int(min_len, max_len));
        utt.transcript.reserve(len);
        utt.durations.reserve(len);
        int total = 0;
        for (int i = 0; i < len; ++i) {
            int sym = static_cast<int>(rng.uniform_int(0, static_cast<int64_t>(vocab.size()) - 1));
            if (!opts.allow_adjacent_repeats && i > 0) {
                while (sym == utt.transcript.back())
                    sym = static_cast<int>(
                        rng.uniform_int(0, static_cast<int64_t>(vocab.size()) - 1));
            }
            utt.transcript.push_back(sym);
            const int dur =
                static_cast<int>(rng.uniform_int(vocab[sym].min_frames, vocab[sym].max_frames));
            utt.durations.push_back(dur);
            total += dur;
        }
        utt.lead_silence = static_cast<int>(rng.uniform_int(0, opts.max_edge_silence));
        utt.trail_silence = static_cast<int>(rng.uniform_int(0, opts.max_edge_silence));

        const int T = utt.lead_silence + total + utt.trail_silence;
        utt.mel.n_mels = n_mels;
        utt.mel.frame_rate = opts.frame_rate;
        utt.mel.frames = Tensor::full(T, n_mels, kLogFloor);
        int t = utt.lead_silence;
        for (int i = 0; i < len; ++i) {
            const auto& tpl = vocab[utt.transcript[i]].spectral_template;
            for (int d = 0; d < utt.durations[i]; ++d, ++t) {
                double* row = utt.mel.frames.row(t);
                for (int f = 0; f < n_mels; ++f)
                    row[f] = tpl[f] + (opts.noise_sigma > 0.0
                                           ? rng.normal(0.0, opts.noise_sigma)
                                           : 0.0);
            }
        }
        out.push_back(std::move(utt));
    }
    return out;
}

int nearest_symbol(const std::vector<SymbolSpec>& vocab, const double* frame, int n_mels) {
    int best = -1;
    double best_d = 0.0;
    for (const auto& s : vocab) {
        double d = 0.0;
        for (int f = 0; f < n_mels; ++f) {
            const double e = frame[f] - s.spectral_template[f];
            d += e * e;
        }
        if (best < 0 || d < best_d) {
            best = s.symbol_id;
            best_d = d;
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// log-mel front end
// ---------------------------------------------------------------------------

namespace {

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// reflect index into [0, len) without repeating the edge sample
inline int reflect_index(int i, int len) {
    if (len == 1) return 0;
    const int period = 2 * (len - 1);
    int m = i % period;
    if (m < 0) m += period;
    return m < len ? m : period - m;
}

}  // namespace

double mel_band_center_hz(int band, int n_mels, double sample_rate) {
    const double mel_lo = hz_to_mel(0.0);
    const double mel_hi = hz_to_mel(sample_rate / 2.0);
    const double mel = mel_lo + (mel_hi - mel_lo) * (band + 1) / (n_mels + 1);
    return mel_to_hz(mel);
}

MelSpectrogram log_mel(const std::vector<double>& waveform, double sample_rate,
                       const LogMelConfig& cfg) {
    if (waveform.empty()) throw input_error("log_mel: empty waveform");
    for (double x : waveform)
        if (!std::isfinite(x)) throw input_error("log_mel: non-finite sample");
    if (cfg.fft_size < 2 || cfg.hop < 1 || cfg.n_mels < 1)
        throw config_error("log_mel: bad framing config");

    const int len = static_cast<int>(waveform.size());
    const int n_frames = len / cfg.hop + 1;
    const int n_bins = cfg.fft_size / 2 + 1;

    // Hann window (periodic)
    std::vector<double> window(cfg.fft_size);
    for (int n = 0; n < cfg.fft_size; ++n)
        window[n] = 0.5 - 0.5 * std::cos(2.0 * M_PI * n / cfg.fft_size);

    // DFT basis tables; naive transform is fine at this scale
    std::vector<double> cos_tab(static_cast<size_t>(n_bins) * cfg.fft_size);
    std::vector<double> sin_tab(static_cast<size_t>(n_bins) * cfg.fft_size);
    for (int k = 0; k < n_bins; ++k)
        for (int n = 0; n < cfg.fft_size; ++n) {
            const double ang = 2.0 * M_PI * k * n / cfg.fft_size;
            cos_tab[static_cast<size_t>(k) * cfg.fft_size + n] = std::cos(ang);
            sin_tab[static_cast<size_t>(k) * cfg.fft_size + n] = std::sin(ang);
        }

    // triangular mel filters on the HTK scale
    const double mel_lo = hz_to_mel(0.0);
    const double mel_hi = hz_to_mel(sample_rate / 2.0);
    std::vector<double> edges(cfg.n_mels + 2);
    for (int m = 0; m < cfg.n_mels + 2; ++m)
        edges[m] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * m / (cfg.n_mels + 1));
    std::vector<double> filter(static_cast<size_t>(cfg.n_mels) * n_bins, 0.0);
    for (int m = 0; m < cfg.n_mels; ++m) {
        const double lo = edges[m], c = edges[m + 1], hi = edges[m + 2];
        for (int k = 0; k < n_bins; ++k) {
            const double f = k * sample_rate / cfg.fft_size;
            double w = 0.0;
            if (f > lo && f < c)
                w = (f - lo) / (c - lo);
            else if (f == c)
                w = 1.0;
            else if (f > c && f < hi)
                w = (hi - f) / (hi - c);
            filter[static_cast<size_t>(m) * n_bins + k] = w;
        }
    }

    MelSpectrogram mel;
    mel.n_mels = cfg.n_mels;
    mel.frame_rate = sample_rate / cfg.hop;
    mel.frames = Tensor(n_frames, cfg.n_mels);

    std::vector<double> seg(cfg.fft_size);
    std::vector<double> power(n_bins);
    const int half = cfg.fft_size / 2;
    for (int fr = 0; fr < n_frames; ++fr) {
        const int start = fr * cfg.hop - half;
        for (int n = 0; n < cfg.fft_size; ++n)
            seg[n] = waveform[reflect_index(start + n, len)] * window[n];
        for (int k = 0; k < n_bins; ++k) {
            const double* ct = &cos_tab[static_cast<size_t>(k) * cfg.fft_size];
            const double* st = &sin_tab[static_cast<size_t>(k) * cfg.fft_size];
            double re = 0.0, im = 0.0;
            for (int n = 0; n < cfg.fft_size; ++n) {
                re += seg[n] * ct[n];
                im -= seg[n] * st[n];
            }
            power[k] = re * re + im * im;
        }
        double* out = mel.frames.row(fr);
        for (int m = 0; m < cfg.n_mels; ++m) {
            const double* fw = &filter[static_cast<size_t>(m) * n_bins];
            double e = 0.0;
            for (int k = 0; k < n_bins; ++k) e += fw[k] * power[k];
            out[m] = std::log(std::max(e, 1e-10));
        }
    }
    return mel;
}

}  // namespace dyntok
