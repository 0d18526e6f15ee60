// SPDX-License-Identifier: Apache-2.0

#include "dyntok/serialize.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "dyntok/errors.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace dyntok {

namespace {

template <typename T>
void put(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw input_error("truncated binary stream");
    return v;
}

void put_magic(std::ostream& os, const char m[4]) { os.write(m, 4); }

void expect_magic(std::istream& is, const char m[4], const char* what) {
    char buf[4];
    is.read(buf, 4);
    if (!is || std::memcmp(buf, m, 4) != 0)
        throw input_error(std::string("bad magic, expected ") + what);
}

}  // namespace

// ---------------------------------------------------------------------------
// mel binary
// ---------------------------------------------------------------------------

void write_mel(const std::string& path, const MelSpectrogram& mel) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw input_error("cannot write " + path);
    put_magic(os, "MELF");
    put<uint32_t>(os, 1);
    put<uint32_t>(os, static_cast<uint32_t>(mel.n_mels));
    put<uint32_t>(os, static_cast<uint32_t>(mel.frames.rows));
    put<double>(os, mel.frame_rate);
    for (double x : mel.frames.v) put<float>(os, static_cast<float>(x));
}

MelSpectrogram read_mel(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw input_error("cannot read " + path);
    expect_magic(is, "MELF", "MELF");
    const auto version = get<uint32_t>(is);
    if (version != 1) throw input_error("unsupported mel file version");
    MelSpectrogram mel;
    mel.n_mels = static_cast<int>(get<uint32_t>(is));
    const int frames = static_cast<int>(get<uint32_t>(is));
    mel.frame_rate = get<double>(is);
    mel.frames = Tensor(frames, mel.n_mels);
    for (auto& x : mel.frames.v) x = static_cast<double>(get<float>(is));
    return mel;
}

// ---------------------------------------------------------------------------
// corpus directory
// ---------------------------------------------------------------------------

void write_corpus(const std::string& dir, const std::vector<SymbolSpec>& vocab,
                  const std::vector<Utterance>& corpus) {
    fs::create_directories(dir);

    json jvocab;
    jvocab["n_mels"] = vocab.empty() ? 0 : static_cast<int>(vocab[0].spectral_template.size());
    for (const auto& s : vocab) {
        jvocab["symbols"].push_back({{"id", s.symbol_id},
                                     {"template", s.spectral_template},
                                     {"min_frames", s.min_frames},
                                     {"max_frames", s.max_frames}});
    }
    std::ofstream voc(fs::path(dir) / "vocab.json");
    if (!voc) throw input_error("cannot write vocab.json in " + dir);
    voc << jvocab.dump(2) << "\n";

    std::ofstream man(fs::path(dir) / "manifest.jsonl");
    if (!man) throw input_error("cannot write corpus manifest in " + dir);
    for (const auto& u : corpus) {
        const std::string mel_name = u.id + ".melf";
        write_mel((fs::path(dir) / mel_name).string(), u.mel);
        json rec;
        rec["id"] = u.id;
        rec["transcript"] = u.transcript;
        rec["mel"] = mel_name;
        rec["seed"] = u.seed;
        rec["lead_silence"] = u.lead_silence;
        rec["trail_silence"] = u.trail_silence;
        rec["durations"] = u.durations;
        man << rec.dump() << "\n";
    }
}

LoadedCorpus read_corpus(const std::string& dir) {
    LoadedCorpus out;
    {
        std::ifstream is(fs::path(dir) / "vocab.json");
        if (!is) throw input_error("missing vocab.json in " + dir);
        json jvocab = json::parse(is);
        for (const auto& js : jvocab.value("symbols", json::array())) {
            SymbolSpec s;
            s.symbol_id = js.at("id").get<int>();
            s.spectral_template = js.at("template").get<std::vector<double>>();
            s.min_frames = js.at("min_frames").get<int>();
            s.max_frames = js.at("max_frames").get<int>();
            out.vocab.push_back(std::move(s));
        }
    }
    std::ifstream man(fs::path(dir) / "manifest.jsonl");
    if (!man) throw input_error("missing manifest.jsonl in " + dir);
    std::string line;
    while (std::getline(man, line)) {
        if (line.empty()) continue;
        json rec = json::parse(line);
        Utterance u;
        u.id = rec.at("id").get<std::string>();
        u.transcript = rec.at("transcript").get<std::vector<int>>();
        u.seed = rec.value("seed", 0ULL);
        u.lead_silence = rec.value("lead_silence", 0);
        u.trail_silence = rec.value("trail_silence", 0);
        u.durations = rec.value("durations", std::vector<int>{});
        if (rec.contains("mel_inline")) {
            const auto rows = rec.at("mel_inline").get<std::vector<std::vector<double>>>();
            if (rows.empty()) throw input_error("empty inline mel for " + u.id);
            u.mel.n_mels = static_cast<int>(rows[0].size());
            u.mel.frame_rate = rec.value("frame_rate", 100.0);
            u.mel.frames = Tensor(static_cast<int>(rows.size()), u.mel.n_mels);
            for (size_t r = 0; r < rows.size(); ++r) {
                if (static_cast<int>(rows[r].size()) != u.mel.n_mels)
                    throw input_error("ragged inline mel for " + u.id);
                for (int c = 0; c < u.mel.n_mels; ++c)
                    u.mel.frames.at(static_cast<int>(r), c) = rows[r][c];
            }
        } else {
            u.mel = read_mel((fs::path(dir) / rec.at("mel").get<std::string>()).string());
        }
        out.utterances.push_back(std::move(u));
    }
    return out;
}

// ---------------------------------------------------------------------------
// parameter store
// ---------------------------------------------------------------------------

void save_params(std::ostream& os, const ParamStore& ps) {
    put_magic(os, "DTPS");
    put<uint32_t>(os, 1);
    put<uint64_t>(os, ps.names().size());
    for (const auto& name : ps.names()) {
        const Tensor& t = ps.get(name);
        put<uint32_t>(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        put<uint32_t>(os, static_cast<uint32_t>(t.rows));
        put<uint32_t>(os, static_cast<uint32_t>(t.cols));
        os.write(reinterpret_cast<const char*>(t.v.data()),
                 static_cast<std::streamsize>(t.v.size() * sizeof(double)));
    }
}

void load_params(std::istream& is, ParamStore& ps) {
    expect_magic(is, "DTPS", "DTPS");
    const auto version = get<uint32_t>(is);
    if (version != 1) throw input_error("unsupported parameter blob version");
    const auto count = get<uint64_t>(is);
    for (uint64_t i = 0; i < count; ++i) {
        const auto name_len = get<uint32_t>(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const auto rows = get<uint32_t>(is);
        const auto cols = get<uint32_t>(is);
        Tensor t(static_cast<int>(rows), static_cast<int>(cols));
        is.read(reinterpret_cast<char*>(t.v.data()),
                static_cast<std::streamsize>(t.v.size() * sizeof(double)));
        if (!is) throw input_error("truncated parameter blob");
        if (ps.has(name))
            ps.get(name) = std::move(t);
        else
            ps.add(name, std::move(t));
    }
}

}  // namespace dyntok
