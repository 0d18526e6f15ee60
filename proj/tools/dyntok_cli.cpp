// SPDX-License-Identifier: Apache-2.0
//
// Command line front end: corpus generation, training, tokenization,
// reconstruction, probes, evaluation and the full comparison report.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "dyntok/errors.hpp"
#include "dyntok/harness.hpp"

namespace fs = std::filesystem;
using namespace dyntok;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw input_error("cannot read " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

RunConfig load_run_config(const std::string& config_path) {
    if (config_path.empty()) return RunConfig{};
    return run_config_from_json(read_file(config_path));
}

struct CorpusOnDisk {
    std::vector<SymbolSpec> vocab;
    std::vector<Utterance> train_split;
    std::vector<Utterance> held_split;
    std::vector<Utterance> all;
};

CorpusOnDisk load_split_corpus(const std::string& dir, const RunConfig& cfg) {
    CorpusOnDisk c;
    LoadedCorpus lc = read_corpus(dir);
    c.vocab = std::move(lc.vocab);
    c.all = std::move(lc.utterances);
    split_corpus(c.all, cfg.corpus.holdout_fraction, cfg.seed, c.train_split, c.held_split);
    return c;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dynamic compression tokenizer laboratory"};
    app.require_subcommand(1);

    std::string config_path;
    app.add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);

    // --- gen-corpus ---
    auto* gen = app.add_subcommand("gen-corpus", "generate a synthetic corpus directory");
    std::string gen_out = "corpus";
    gen->add_option("--out", gen_out, "output directory");

    // --- train ---
    auto* train_cmd = app.add_subcommand("train", "train one tokenizer variant");
    std::string train_corpus_dir = "corpus";
    std::string train_out = "checkpoint.bin";
    std::string train_log_path;
    std::string train_variant;
    train_cmd->add_option("--corpus", train_corpus_dir, "corpus directory");
    train_cmd->add_option("--out", train_out, "checkpoint output path");
    train_cmd->add_option("--log", train_log_path, "training log (jsonl)");
    train_cmd->add_option("--variant", train_variant,
                          "dynamic|fixed-stride|pure-semantic|with-recon|recon-control-r1");

    // --- tokenize ---
    auto* tok = app.add_subcommand("tokenize", "emit the token stream for a corpus");
    std::string tok_ckpt = "checkpoint.bin";
    std::string tok_corpus = "corpus";
    std::string tok_out = "tokens.jsonl";
    std::string tok_split = "all";
    tok->add_option("--checkpoint", tok_ckpt, "checkpoint path")->check(CLI::ExistingFile);
    tok->add_option("--corpus", tok_corpus, "corpus directory");
    tok->add_option("--out", tok_out, "token stream output (jsonl)");
    tok->add_option("--split", tok_split, "all|train|held");

    // --- reconstruct ---
    auto* rec = app.add_subcommand("reconstruct", "reconstruct mels and write metrics");
    std::string rec_ckpt = "checkpoint.bin";
    std::string rec_corpus = "corpus";
    std::string rec_out = "recon";
    std::string rec_split = "held";
    rec->add_option("--checkpoint", rec_ckpt, "checkpoint path")->check(CLI::ExistingFile);
    rec->add_option("--corpus", rec_corpus, "corpus directory");
    rec->add_option("--out", rec_out, "output directory");
    rec->add_option("--split", rec_split, "all|train|held");

    // --- probe-flow ---
    auto* pflow = app.add_subcommand("probe-flow", "train the conditional flow-matching probe");
    std::string pf_ckpt = "checkpoint.bin";
    std::string pf_corpus = "corpus";
    int pf_steps = 400;
    pflow->add_option("--checkpoint", pf_ckpt, "checkpoint path")->check(CLI::ExistingFile);
    pflow->add_option("--corpus", pf_corpus, "corpus directory");
    pflow->add_option("--steps", pf_steps, "training steps");

    // --- probe-discrim ---
    auto* pdis = app.add_subcommand("probe-discrim", "frozen-backbone discriminative probe");
    std::string pd_tokens = "tokens.jsonl";
    std::string pd_corpus = "corpus";
    uint64_t pd_seed = 7;
    pdis->add_option("--tokens", pd_tokens, "token stream path")->check(CLI::ExistingFile);
    pdis->add_option("--corpus", pd_corpus, "corpus directory");
    pdis->add_option("--seed", pd_seed, "probe seed");

    // --- evaluate ---
    auto* ev = app.add_subcommand("evaluate", "CER + reconstruction metrics for a checkpoint");
    std::string ev_ckpt = "checkpoint.bin";
    std::string ev_corpus = "corpus";
    std::string ev_out = "evaluation.json";
    std::string ev_split = "held";
    ev->add_option("--checkpoint", ev_ckpt, "checkpoint path")->check(CLI::ExistingFile);
    ev->add_option("--corpus", ev_corpus, "corpus directory");
    ev->add_option("--out", ev_out, "evaluation output (json)");
    ev->add_option("--split", ev_split, "all|train|held");

    // --- report ---
    auto* rep = app.add_subcommand("report", "run all variants end to end and compare");
    std::string rep_out = "report.json";
    rep->add_option("--out", rep_out, "report output (json)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            RunConfig cfg = load_run_config(config_path);
            cfg.validate();
            const auto vocab =
                make_default_vocab(cfg.corpus.n_symbols, cfg.corpus.n_mels, cfg.seed);
            CorpusGenOptions opts;
            opts.noise_sigma = cfg.corpus.noise_sigma;
            opts.max_edge_silence = cfg.corpus.max_edge_silence;
            opts.frame_rate = cfg.corpus.frame_rate;
            const auto corpus = generate_corpus(vocab, cfg.corpus.n_utts, cfg.corpus.min_len,
                                                cfg.corpus.max_len, cfg.seed, opts);
            write_corpus(gen_out, vocab, corpus);
            std::cout << "wrote " << corpus.size() << " utterances to " << gen_out << "\n";
            return 0;
        }

        if (train_cmd->parsed()) {
            RunConfig cfg = load_run_config(config_path);
            if (!train_variant.empty())
                cfg = cfg.with_variant(variant_from_name(train_variant));
            CorpusOnDisk c = load_split_corpus(train_corpus_dir, cfg);
            TrainResult tr = train(cfg, c.train_split);
            save_checkpoint(train_out, tr.model);
            if (!train_log_path.empty()) {
                std::ofstream os(train_log_path);
                for (const auto& s : tr.log)
                    os << "{\"step\":" << s.step << ",\"lr\":" << s.lr << ",\"total\":" << s.total
                       << ",\"ctc\":" << s.l_ctc << ",\"attn\":" << s.l_attn
                       << ",\"qua\":" << s.l_qua << ",\"recon\":" << s.l_recon
                       << ",\"grad_norm\":" << s.grad_norm << "}\n";
            }
            if (tr.diverged) {
                std::cerr << "training diverged at step " << tr.last_good_step + 1
                          << "; checkpoint holds the last good parameters\n";
                return 1;
            }
            std::cout << "trained " << variant_name(cfg.variant) << " for "
                      << tr.log.size() << " steps, final loss "
                      << (tr.log.empty() ? 0.0 : tr.log.back().total) << "\n";
            return 0;
        }

        auto pick_split = [](CorpusOnDisk& c, const std::string& which)
            -> const std::vector<Utterance>& {
            if (which == "train") return c.train_split;
            if (which == "held") return c.held_split;
            if (which == "all") return c.all;
            throw config_error("unknown split: " + which);
        };

        if (tok->parsed()) {
            TokenizerModel model = load_checkpoint(tok_ckpt);
            CorpusOnDisk c = load_split_corpus(tok_corpus, model.cfg);
            const auto recs = tokenize(model, pick_split(c, tok_split));
            write_token_stream(tok_out, recs);
            double token_seconds = 0.0;
            int64_t n_tokens = 0;
            for (const auto& r : recs) {
                token_seconds += r.t_frames /
                                 (model.cfg.corpus.frame_rate / model.cfg.encoder.input_downsample);
                n_tokens += r.n_tokens;
            }
            std::cout << "wrote " << recs.size() << " records to " << tok_out
                      << " (mean token rate " << n_tokens / token_seconds << " Hz)\n";
            return 0;
        }

        if (rec->parsed()) {
            TokenizerModel model = load_checkpoint(rec_ckpt);
            CorpusOnDisk c = load_split_corpus(rec_corpus, model.cfg);
            const auto& split = pick_split(c, rec_split);
            fs::create_directories(rec_out);
            std::ofstream metrics(fs::path(rec_out) / "metrics.jsonl");
            std::vector<ReconMetrics> all;
            for (const auto& utt : split) {
                const Tensor mel_hat = reconstruct(model, utt);
                MelSpectrogram out;
                out.frames = mel_hat;
                out.n_mels = model.cfg.corpus.n_mels;
                out.frame_rate = model.cfg.corpus.frame_rate;
                write_mel((fs::path(rec_out) / (utt.id + ".melf")).string(), out);
                const ReconMetrics m = mel_metrics(mel_hat, utt.mel.frames);
                all.push_back(m);
                metrics << "{\"utt\":\"" << utt.id << "\",\"mel_mae\":" << m.mel_mae
                        << ",\"mel_corr\":" << m.mel_corr << ",\"delta_mae\":" << m.delta_mae
                        << ",\"flux_mae\":" << m.flux_mae
                        << ",\"duration_ratio\":" << m.duration_ratio << "}\n";
            }
            const AggregateReport agg = aggregate(all);
            std::cout << "reconstructed " << all.size() << " utterances; median mel_mae "
                      << agg.mel_mae.median << ", median delta_mae " << agg.delta_mae.median
                      << ", median flux_mae " << agg.flux_mae.median << "\n";
            return 0;
        }

        if (pflow->parsed()) {
            TokenizerModel model = load_checkpoint(pf_ckpt);
            CorpusOnDisk c = load_split_corpus(pf_corpus, model.cfg);
            FlowTrainConfig fm;
            fm.steps = pf_steps;
            fm.seed = model.cfg.seed;
            const FlowProbeResult r =
                run_flow_probe(model, c.train_split, c.held_split, fm);
            std::cout << "flow probe on " << r.n_held << " held-out utterances: matched loss "
                      << r.held_loss_matched << ", permuted-condition loss "
                      << r.held_loss_permuted << "\n";
            return 0;
        }

        if (pdis->parsed()) {
            LoadedCorpus lc = read_corpus(pd_corpus);
            const int n_symbols = static_cast<int>(lc.vocab.size());
            DiscrimProbeConfig pc;
            pc.n_symbols = n_symbols;
            std::map<std::string, std::vector<int64_t>> token_map;
            // codebook bound comes from the stream itself
            int64_t max_id = 0;
            for (const auto& r : read_token_stream(pd_tokens, 1LL << 62)) {
                for (int64_t id : r.ids) max_id = std::max(max_id, id);
                token_map[r.utterance_id] = r.ids;
            }
            pc.codebook_size = max_id + 1;
            // tasks only for utterances covered by the token stream
            std::vector<Utterance> covered;
            for (auto& u : lc.utterances)
                if (token_map.count(u.id)) covered.push_back(std::move(u));
            const auto tasks = make_majority_tasks(covered, pc.n_options, n_symbols, pd_seed);
            const ProbeEvalResult r = probe_train_eval(tasks, token_map, pc, pd_seed);
            std::cout << "probe accuracy " << r.accuracy << " on " << r.n_eval
                      << " held-out tasks (train acc " << r.train_accuracy
                      << "); backbone checksum "
                      << (r.backbone_checksum_before == r.backbone_checksum_after ? "unchanged"
                                                                                  : "CHANGED")
                      << "\n";
            return r.backbone_checksum_before == r.backbone_checksum_after ? 0 : 1;
        }

        if (ev->parsed()) {
            TokenizerModel model = load_checkpoint(ev_ckpt);
            CorpusOnDisk c = load_split_corpus(ev_corpus, model.cfg);
            const EvalResult r = evaluate(model, pick_split(c, ev_split));
            std::ofstream os(ev_out);
            os << "{\"cer\":" << r.cer_corpus << ",\"cer_mean\":" << r.cer_mean
               << ",\"n\":" << r.n_utterances
               << ",\"delta_mae_median\":" << r.recon_aggregate.delta_mae.median
               << ",\"flux_mae_median\":" << r.recon_aggregate.flux_mae.median
               << ",\"mel_mae_median\":" << r.recon_aggregate.mel_mae.median
               << ",\"mel_corr_median\":" << r.recon_aggregate.mel_corr.median
               << ",\"duration_ratio_median\":" << r.recon_aggregate.duration_ratio.median
               << "}\n";
            std::cout << "cer " << r.cer_corpus << " over " << r.n_utterances
                      << " utterances; wrote " << ev_out << "\n";
            return 0;
        }

        if (rep->parsed()) {
            ExperimentConfig cfg;
            if (!config_path.empty())
                cfg = experiment_config_from_json(read_file(config_path));
            const ComparisonReport r = run_experiment(cfg);
            write_report_json(rep_out, r);
            std::cout << format_report(r);
            for (const auto& v : r.verdicts)
                if (v.applicable && !v.pass) return 1;
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
