#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "optlab/checkpoint.hpp"
#include "optlab/config.hpp"
#include "optlab/corpus.hpp"
#include "optlab/errors.hpp"
#include "optlab/eval.hpp"
#include "optlab/faults.hpp"
#include "optlab/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace optlab;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kConfig = 2, kDivergence = 3, kDependency = 4 };

json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw InputError("cannot read " + path.string());
    }
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw InputError(path.string() + ": " + e.what());
    }
}

// One JSON value per non-blank line, or a single top-level array.
std::vector<json> read_json_records(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw InputError("cannot read " + path.string());
    }
    std::stringstream buffer;
    buffer << in.rdbuf();
    const std::string text = buffer.str();
    const auto first = text.find_first_not_of(" \t\r\n");
    if (first != std::string::npos && text[first] == '[') {
        try {
            return json::parse(text).get<std::vector<json>>();
        } catch (const json::exception& e) {
            throw InputError(path.string() + ": " + e.what());
        }
    }
    std::vector<json> out;
    std::istringstream lines(text);
    std::string line;
    std::size_t number = 0;
    while (std::getline(lines, line)) {
        ++number;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        try {
            out.push_back(json::parse(line));
        } catch (const json::parse_error& e) {
            throw InputError(path.string() + ":" + std::to_string(number) + ": " + e.what());
        }
    }
    return out;
}

void write_output(const std::string& path, const std::string& text) {
    if (path.empty() || path == "-") {
        std::cout << text;
        return;
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw InputError("cannot write " + path);
    }
    out << text;
}

BpeVocab load_vocab(const fs::path& path) { return BpeVocab::from_json(read_json_file(path)); }

std::optional<RunConfig> maybe_config(const std::string& path) {
    if (path.empty()) {
        return std::nullopt;
    }
    return parse_config(path);
}

std::shared_ptr<Logbook> open_logbook(const TrainConfig& config, const std::string& explicit_path) {
    if (!explicit_path.empty()) {
        return std::make_shared<Logbook>(explicit_path);
    }
    if (!config.run_dir.empty()) {
        fs::create_directories(config.run_dir);
        return std::make_shared<Logbook>(config.run_dir / "logbook.jsonl");
    }
    return std::make_shared<Logbook>();
}

void print_train_summary(const TrainerState& s, std::size_t restarts, bool stopped) {
    std::cout << "step " << s.step << "  tokens " << s.tokens_seen << "  restarts " << restarts << "  scale "
              << s.scaler.scale;
    if (!s.health.empty()) {
        std::cout << "  loss " << s.health.back().train_loss;
    }
    std::cout << (stopped ? "  (stopped)" : "") << "\n";
}

std::vector<Document> load_inputs(const std::vector<std::string>& inputs, const std::string& manifest,
                                  const std::string& format) {
    if (!manifest.empty()) {
        return load_manifest_documents(read_manifest(manifest));
    }
    if (inputs.empty()) {
        throw ConfigError("give --input files or --manifest");
    }
    std::vector<Document> docs;
    for (const auto& path : inputs) {
        auto part = read_documents(path, parse_doc_format(format), fs::path(path).stem().string(), docs.size());
        docs.insert(docs.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
    }
    return docs;
}

GptModel load_model(const std::string& checkpoint) {
    auto ckpt = load_checkpoint(checkpoint);
    return GptModel(ckpt.model, std::move(ckpt.state.params));
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"optlab: desk-scale decoder-only LM training, curation and evaluation"};
    app.require_subcommand(1);

    std::string config_path;
    std::string logbook_path;
    std::string from_path;
    std::string schedule_path;

    auto add_config = [&](CLI::App* sub, bool required) {
        auto* opt = sub->add_option("--config", config_path, "run configuration (JSON)");
        if (required) {
            opt->required();
        }
    };

    auto* train = app.add_subcommand("train", "train from scratch");
    add_config(train, true);
    train->add_option("--logbook", logbook_path, "logbook path (default: <run_dir>/logbook.jsonl)");

    auto* resume = app.add_subcommand("resume", "continue a run from a checkpoint");
    add_config(resume, true);
    resume->add_option("--from", from_path, "checkpoint file, or a run directory holding LATEST")->required();
    resume->add_option("--logbook", logbook_path, "logbook path");

    auto* inject = app.add_subcommand("inject", "train under a fault schedule with automatic crash recovery");
    add_config(inject, true);
    inject->add_option("--schedule", schedule_path, "fault schedule: '<step> <kind> [duration]' per line")
        ->required();
    inject->add_option("--logbook", logbook_path, "logbook path");

    std::vector<std::string> inputs;
    std::string manifest;
    std::string format = "lines";
    std::string output;
    std::string output_format = "lines";
    std::string report_path;
    std::optional<double> threshold;
    bool exact = false;
    bool normalize = false;

    auto* dedup = app.add_subcommand("dedup", "remove near-duplicate documents");
    add_config(dedup, false);
    dedup->add_option("--input", inputs, "document files");
    dedup->add_option("--manifest", manifest, "corpus manifest instead of --input");
    dedup->add_option("--format", format, "lines | length-prefixed");
    dedup->add_option("--output", output, "kept documents")->required();
    dedup->add_option("--output-format", output_format, "lines | length-prefixed");
    dedup->add_option("--report", report_path, "removal report, one JSON record per line");
    dedup->add_option("--threshold", threshold, "Jaccard threshold");
    dedup->add_flag("--exact", exact, "verify candidates with exact Jaccard");
    dedup->add_flag("--normalize", normalize, "normalize whitespace first");

    std::string threads_path;
    auto* flatten = app.add_subcommand("flatten-threads", "keep the longest comment chain of each thread");
    add_config(flatten, false);
    flatten->add_option("--input", threads_path, "threads: one JSON thread per line, or a JSON array")->required();
    flatten->add_option("--output", output, "documents")->required();
    // Chains span several lines; length-prefixed by default.
    std::string chain_format = "length-prefixed";
    flatten->add_option("--output-format", chain_format, "lines | length-prefixed");

    std::size_t vocab_size = 0;
    auto* train_bpe = app.add_subcommand("train-bpe", "learn a byte-level BPE vocabulary");
    add_config(train_bpe, false);
    train_bpe->add_option("--vocab-size", vocab_size, "target vocabulary size (> 257)")->required();
    train_bpe->add_option("--input", inputs, "document files");
    train_bpe->add_option("--manifest", manifest, "corpus manifest instead of --input");
    train_bpe->add_option("--format", format, "lines | length-prefixed");
    train_bpe->add_option("--output", output, "vocabulary JSON")->required();
    train_bpe->add_flag("--normalize", normalize, "normalize whitespace first");

    std::string vocab_path;
    auto* tokenize = app.add_subcommand("tokenize", "encode documents into a u32 token stream");
    add_config(tokenize, false);
    tokenize->add_option("--vocab", vocab_path, "vocabulary JSON")->required();
    tokenize->add_option("--input", inputs, "document files");
    tokenize->add_option("--manifest", manifest, "corpus manifest instead of --input");
    tokenize->add_option("--format", format, "lines | length-prefixed");
    tokenize->add_option("--output", output, "token file")->required();
    tokenize->add_flag("--normalize", normalize, "normalize whitespace first");

    std::string checkpoint_path;
    std::string task_path;
    std::size_t shots = 0;
    std::optional<std::uint64_t> seed;
    auto* eval = app.add_subcommand("eval", "multiple-choice task accuracy");
    add_config(eval, false);
    eval->add_option("--task", task_path, "task file (JSON)")->required();
    eval->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
    eval->add_option("--vocab", vocab_path, "vocabulary JSON")->required();
    eval->add_option("--shots", shots, "in-context examples per instance");
    eval->add_option("--seed", seed, "shot sampling seed (default: seeds.eval)");
    eval->add_option("--output", output, "report path (default stdout)");

    std::string episodes_path;
    std::string reference_vocab_path;
    std::size_t max_new = 32;
    auto* dialogue = app.add_subcommand("dialogue-eval", "normalized perplexity and UF1 on dialogue episodes");
    add_config(dialogue, false);
    dialogue->add_option("--episodes", episodes_path, "episodes: JSON lines or array")->required();
    dialogue->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
    dialogue->add_option("--vocab", vocab_path, "model vocabulary JSON")->required();
    dialogue->add_option("--reference-vocab", reference_vocab_path, "reference vocabulary (default: byte level)");
    dialogue->add_option("--max-new-tokens", max_new, "greedy generation limit");
    dialogue->add_option("--output", output, "report path (default stdout)");

    std::string classifier;
    std::string prompts_path;
    ToxicityProtocol protocol;
    auto* toxicity = app.add_subcommand("toxicity-eval", "bucketed continuation toxicity");
    add_config(toxicity, false);
    toxicity->add_option("--classifier", classifier, "command, or http://host:port/path endpoint")->required();
    toxicity->add_option("--prompts", prompts_path, "prompts: {\"text\", \"toxicity\"} per line")->required();
    toxicity->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
    toxicity->add_option("--vocab", vocab_path, "vocabulary JSON")->required();
    toxicity->add_option("--generations", protocol.generations_per_prompt, "samples per prompt");
    toxicity->add_option("--tokens", protocol.tokens_per_generation, "tokens per sample");
    toxicity->add_option("--top-p", protocol.top_p, "nucleus mass");
    toxicity->add_option("--buckets", protocol.bucket_edges, "bucket edges")->expected(2, 64);
    toxicity->add_option("--seed", seed, "sampling seed (default: seeds.eval)");
    toxicity->add_option("--output", output, "report path (default stdout)");

    AccountingInput acc;
    std::optional<double> watts;
    std::optional<double> pue;
    auto* account = app.add_subcommand("account", "compute and carbon estimate");
    add_config(account, false);
    account->add_option("--parameters", acc.parameters, "parameter count N (default: from --config)");
    account->add_option("--tokens", acc.tokens, "training tokens D (default: from --config)");
    account->add_option("--devices", acc.devices, "device count")->required();
    account->add_option("--throughput", acc.throughput_flops, "sustained FLOP/s per device")->required();
    account->add_option("--watts", watts, "power per device");
    account->add_option("--pue", pue, "power usage effectiveness");
    account->add_option("--intensity", acc.carbon_intensity, "kg CO2eq per kWh")->required();
    account->add_option("--overhead", acc.overhead_multiplier, "multiplier for ablations, downtime, reruns");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kConfig;
    }

    try {
        if (train->parsed()) {
            const RunConfig run = parse_config(config_path);
            auto logbook = open_logbook(run.train, logbook_path);
            Trainer trainer(run.train, load_training_corpus(run), logbook, emit_config(run));
            const auto result = trainer.run();
            print_train_summary(trainer.state(), result.restarts, result.stopped);
        } else if (resume->parsed()) {
            const RunConfig run = parse_config(config_path);
            fs::path ckpt = from_path;
            if (fs::is_directory(ckpt)) {
                auto latest = latest_checkpoint(ckpt);
                if (!latest) {
                    throw InputError("no LATEST checkpoint in " + ckpt.string());
                }
                ckpt = *latest;
            }
            auto logbook = open_logbook(run.train, logbook_path);
            auto trainer = Trainer::resume(run.train, load_training_corpus(run), ckpt, logbook);
            const auto result = trainer.run();
            print_train_summary(trainer.state(), result.restarts, result.stopped);
        } else if (inject->parsed()) {
            const RunConfig run = parse_config(config_path);
            if (run.train.run_dir.empty()) {
                throw ConfigError(config_path + ": training.run_dir: required for fault injection");
            }
            auto logbook = open_logbook(run.train, logbook_path);
            const auto result =
                run_with_faults(run.train, load_training_corpus(run), load_fault_schedule(schedule_path), logbook);
            std::cout << "crashes " << result.crashes << "  ";
            print_train_summary(result.state, result.restarts, result.stopped);
        } else if (dedup->parsed()) {
            DedupConfig cfg = maybe_config(config_path).value_or(RunConfig{}).dedup;
            if (threshold) {
                cfg.jaccard_threshold = *threshold;
            }
            cfg.exact_verification = cfg.exact_verification || exact;
            cfg.validate();
            auto docs = load_inputs(inputs, manifest, format);
            if (normalize) {
                for (auto& d : docs) {
                    d.text = normalize_whitespace(d.text);
                }
            }
            const auto result = dedup_corpus(docs, cfg);
            write_documents(output, result.kept, parse_doc_format(output_format));
            if (!report_path.empty()) {
                std::string lines;
                for (const auto& r : result.report.removals) {
                    lines += json{{"removed", r.removed_id}, {"kept", r.kept_id}, {"estimate", r.estimate}}.dump();
                    lines += '\n';
                }
                write_output(report_path, lines);
            }
            std::cout << "documents " << docs.size() << "  kept " << result.kept.size() << "  removed "
                      << result.report.removals.size() << "  short " << result.report.short_documents.size()
                      << "  candidate pairs " << result.report.candidate_pairs << "\n";
        } else if (flatten->parsed()) {
            std::vector<Document> docs;
            for (const auto& t : read_json_records(threads_path)) {
                docs.push_back(extract_longest_chain(thread_from_json(t), docs.size()));
            }
            write_documents(output, docs, parse_doc_format(chain_format));
            std::cout << "threads " << docs.size() << "\n";
        } else if (train_bpe->parsed()) {
            auto docs = load_inputs(inputs, manifest, format);
            std::vector<std::string> texts;
            texts.reserve(docs.size());
            for (auto& d : docs) {
                texts.push_back(normalize ? normalize_whitespace(d.text) : std::move(d.text));
            }
            const auto vocab = bpe_train(texts, vocab_size);
            write_output(output, vocab.to_json().dump() + "\n");
            std::cout << "vocabulary " << vocab.size() << "  merges " << vocab.merges().size() << "\n";
        } else if (tokenize->parsed()) {
            const auto vocab = load_vocab(vocab_path);
            auto docs = load_inputs(inputs, manifest, format);
            if (normalize) {
                for (auto& d : docs) {
                    d.text = normalize_whitespace(d.text);
                }
            }
            const auto tokens = encode_documents(vocab, docs);
            write_tokens(output, tokens);
            std::cout << "documents " << docs.size() << "  tokens " << tokens.size() << "\n";
        } else if (eval->parsed()) {
            const auto run = maybe_config(config_path);
            const std::uint64_t s = seed.value_or(run ? run->eval_seed : 0);
            const auto task = load_task(task_path);
            const auto model = load_model(checkpoint_path);
            const BpeTokenizer tok(load_vocab(vocab_path));
            const auto result = evaluate_task(model, tok, task, shots, s);
            MetricReport report{"multiple-choice",
                                {{"task", task.name},
                                 {"task_file", task_path},
                                 {"checkpoint", checkpoint_path},
                                 {"shots", shots},
                                 {"seed", s},
                                 {"mode", score_mode_name(task.mode)},
                                 {"instances", task.instances.size()}},
                                {{"accuracy", result.accuracy}}};
            if (result.f1) {
                report.metrics["f1"] = *result.f1;
            }
            report.metrics["predictions"] = result.predictions;
            write_output(output, report.to_json().dump(2) + "\n");
        } else if (dialogue->parsed()) {
            std::vector<DialogueEpisode> episodes;
            for (const auto& e : read_json_records(episodes_path)) {
                episodes.push_back(DialogueEpisode::from_json(e));
            }
            const auto model = load_model(checkpoint_path);
            const BpeTokenizer tok(load_vocab(vocab_path));
            const BpeTokenizer ref(reference_vocab_path.empty() ? BpeVocab{} : load_vocab(reference_vocab_path));
            const auto r = dialogue_eval(model, episodes, tok, ref, max_new);
            MetricReport report{"dialogue",
                                {{"episodes_file", episodes_path},
                                 {"checkpoint", checkpoint_path},
                                 {"reference_vocab", reference_vocab_path.empty() ? "bytes" : reference_vocab_path},
                                 {"max_new_tokens", max_new},
                                 {"decoding", "greedy"}},
                                {{"normalized_perplexity", r.normalized_ppl},
                                 {"perplexity", r.native_ppl},
                                 {"uf1", r.uf1},
                                 {"responses", r.responses},
                                 {"generations", r.generations}}};
            write_output(output, report.to_json().dump(2) + "\n");
        } else if (toxicity->parsed()) {
            const auto run = maybe_config(config_path);
            protocol.seed = seed.value_or(run ? run->eval_seed : 0);
            for (const auto& p : read_json_records(prompts_path)) {
                protocol.prompts.push_back({p.at("text").get<std::string>(), p.at("toxicity").get<double>()});
            }
            protocol.validate();
            const auto model = load_model(checkpoint_path);
            const BpeTokenizer tok(load_vocab(vocab_path));
            auto cls = make_classifier(classifier);
            const auto r = toxicity_eval(model, tok, *cls, protocol);
            json buckets = json::array();
            for (const auto& b : r.buckets) {
                buckets.push_back({{"lower", b.lower},
                                   {"upper", b.upper},
                                   {"prompts", b.prompts},
                                   {"mean", b.mean ? json(*b.mean) : json(nullptr)}});
            }
            MetricReport report{"toxicity",
                                {{"prompts_file", prompts_path},
                                 {"checkpoint", checkpoint_path},
                                 {"classifier", classifier},
                                 {"generations_per_prompt", protocol.generations_per_prompt},
                                 {"tokens_per_generation", protocol.tokens_per_generation},
                                 {"top_p", protocol.top_p},
                                 {"bucket_edges", protocol.bucket_edges},
                                 {"seed", protocol.seed}},
                                {{"buckets", buckets}}};
            write_output(output, report.to_json().dump(2) + "\n");
        } else if (account->parsed()) {
            if (const auto run = maybe_config(config_path)) {
                if (acc.parameters == 0.0) {
                    acc.parameters = static_cast<double>(parameter_count(run->train.model));
                }
                if (acc.tokens == 0.0) {
                    acc.tokens = static_cast<double>(run->train.token_budget);
                }
            }
            acc.device_watts = watts.value_or(kPlaceholderDeviceWatts);
            acc.pue = pue.value_or(kPlaceholderPue);
            std::cout << accounting_report(acc, watts.has_value(), pue.has_value());
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const DivergenceError& e) {
        std::cerr << "unrecoverable divergence: " << e.what() << "\n";
        return kDivergence;
    } catch (const DependencyError& e) {
        std::cerr << "missing dependency: " << e.what() << "\n";
        return kDependency;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kFailure;
    }
    return kOk;
}
