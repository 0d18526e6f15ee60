// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "dyntok/corpus.hpp"
#include "dyntok/nn.hpp"

namespace dyntok {

// Mel arrays are stored as row-major float32 with a self-describing header:
// "MELF", u32 version, u32 n_mels, u32 n_frames, f64 frame_rate.
void write_mel(const std::string& path, const MelSpectrogram& mel);
MelSpectrogram read_mel(const std::string& path);

// A corpus directory holds vocab.json, manifest.jsonl (one utterance record
// per line referencing a .melf file or carrying an inline array) and the mel
// files.
void write_corpus(const std::string& dir, const std::vector<SymbolSpec>& vocab,
                  const std::vector<Utterance>& corpus);

struct LoadedCorpus {
    std::vector<SymbolSpec> vocab;
    std::vector<Utterance> utterances;
};
LoadedCorpus read_corpus(const std::string& dir);

// named-tensor container as a binary stream ("DTPS" block)
void save_params(std::ostream& os, const ParamStore& ps);
void load_params(std::istream& is, ParamStore& ps);

}  // namespace dyntok
