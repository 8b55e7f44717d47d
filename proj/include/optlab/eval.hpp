#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "optlab/corpus.hpp"
#include "optlab/model.hpp"

namespace optlab {

class Tokenizer {
public:
    virtual ~Tokenizer() = default;
    virtual std::vector<TokenId> encode(std::string_view text) const = 0;
    virtual std::string decode(std::span<const TokenId> ids) const = 0;
    virtual std::size_t vocab_size() const = 0;
};

class BpeTokenizer final : public Tokenizer {
public:
    explicit BpeTokenizer(BpeVocab vocab = {}) : vocab_(std::move(vocab)) {}
    std::vector<TokenId> encode(std::string_view text) const override { return bpe_encode(vocab_, text); }
    std::string decode(std::span<const TokenId> ids) const override { return bpe_decode(vocab_, ids); }
    std::size_t vocab_size() const override { return vocab_.size(); }
    const BpeVocab& vocab() const { return vocab_; }

private:
    BpeVocab vocab_;
};

// ---- multiple choice ----------------------------------------------------------------

enum class ScoreMode { sum_logprob, per_token_logprob };

std::string_view score_mode_name(ScoreMode mode);
ScoreMode parse_score_mode(std::string_view name);

struct TaskInstance {
    std::string context;
    std::vector<std::string> candidates;
    std::size_t gold = 0;
};

struct PromptTask {
    std::string name;
    std::vector<TaskInstance> instances;
    std::vector<TaskInstance> shot_pool;
    ScoreMode mode = ScoreMode::per_token_logprob;
    bool report_f1 = false;

    // Gold indices in range, at least two candidates, pool disjoint from instances.
    void validate() const;
    static PromptTask from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
};

PromptTask load_task(const std::filesystem::path& path);

/// k pool examples drawn without replacement (seeded by `seed` and the
/// instance context), each rendered as context + gold candidate, joined by
/// newlines, followed by the instance context. Throws ConfigError when k
/// exceeds the pool.
std::string assemble_prompt(const PromptTask& task, const TaskInstance& instance, std::size_t k, std::uint64_t seed);

/// Natural-log likelihood of `continuation` after `context`, with end-of-text
/// prepended to the context. The window slides left when the sequence would
/// exceed the model context.
struct ContinuationScore {
    double logprob = 0.0;
    std::size_t tokens = 0;
};
ContinuationScore score_continuation(const LanguageModel& model, std::span<const TokenId> context,
                                     std::span<const TokenId> continuation);

struct ChoiceResult {
    std::size_t chosen = 0;
    std::vector<double> scores;
};

/// Argmax over candidate log-likelihoods (summed or per token); ties go to
/// the lowest index. Needs at least two candidates, each non-empty once
/// tokenized.
ChoiceResult score_multiple_choice(const LanguageModel& model, const Tokenizer& tokenizer, std::string_view context,
                                   std::span<const std::string> candidates, ScoreMode mode);

// Macro-averaged F1 over labels 0..n_classes-1; a class with no gold and no
// predicted members contributes 0.
double macro_f1(std::span<const std::size_t> gold, std::span<const std::size_t> predicted, std::size_t n_classes);
// F1 of the positive label; 0 when precision and recall are both undefined.
double binary_f1(std::span<const std::size_t> gold, std::span<const std::size_t> predicted, std::size_t positive);

struct TaskResult {
    double accuracy = 0.0;
    std::optional<double> f1;
    std::vector<std::size_t> predictions;
};

TaskResult evaluate_task(const LanguageModel& model, const Tokenizer& tokenizer, const PromptTask& task,
                         std::size_t shots, std::uint64_t seed);

// ---- perplexity ------------------------------------------------------------------------

struct NllTotal {
    double total_nll = 0.0;
    std::size_t tokens = 0;
};

/// Teacher-forced NLL of every token of `tokens` given end-of-text and the
/// preceding tokens, windowed to the model context.
NllTotal sequence_nll(const LanguageModel& model, std::span<const TokenId> tokens);

// exp(mean NLL). Throws InputError when the text tokenizes to nothing.
double perplexity(const LanguageModel& model, std::string_view text, const Tokenizer& tokenizer);

// exp(total_nll / reference_token_count). Throws InputError on a zero count.
double normalized_perplexity(double total_nll, std::size_t reference_token_count);

// ---- dialogue --------------------------------------------------------------------------

/// Lowercase, punctuation replaced by spaces, split on whitespace.
std::vector<std::string> uf1_tokens(std::string_view text);

/// Multiset-overlap F1 of normalized unigrams; 0 when either side is empty.
double unigram_f1(std::string_view hypothesis, std::string_view reference);

struct DialogueTurn {
    int speaker = 1;  // 1 or 2
    std::string text;
};

struct DialogueEpisode {
    std::vector<DialogueTurn> turns;
    int model_speaker = 2;  // turns by this speaker are the gold responses

    // Throws InputError unless speakers are 1/2 and strictly alternate.
    void validate() const;
    static DialogueEpisode from_json(const nlohmann::json& j);
};

// "Person 1: ...\nPerson 2: ...\n" for turns [0, end), then "Person k:".
std::string render_dialogue_context(const DialogueEpisode& episode, std::size_t end);

struct DialogueResult {
    double normalized_ppl = 0.0;
    double native_ppl = 0.0;
    double uf1 = 0.0;
    std::size_t responses = 0;
    std::vector<std::string> generations;
};

/// NLL of every gold response under the model tokenizer, normalized by the
/// reference tokenizer's count of the same text; UF1 of greedy generations
/// (at most max_new_tokens, cut at the first newline) against the golds.
DialogueResult dialogue_eval(const LanguageModel& model, std::span<const DialogueEpisode> episodes,
                             const Tokenizer& tokenizer, const Tokenizer& reference, std::size_t max_new_tokens = 32);

// ---- hate speech ------------------------------------------------------------------------

enum class HateSpeechMode { zero_shot, one_shot, few_shot_binary, few_shot_multiclass };

std::string_view hate_mode_name(HateSpeechMode mode);
HateSpeechMode parse_hate_mode(std::string_view name);

struct LabeledText {
    std::string text;
    std::string label;  // yes / no, or yes / no / neither in multiclass mode
};

struct HateSpeechConfig {
    HateSpeechMode mode = HateSpeechMode::zero_shot;
    std::size_t few_shots = 8;
    std::uint64_t seed = 0;
};

// Answer strings offered to the model: yes/no, plus neither in multiclass.
std::vector<std::string> hate_speech_labels(HateSpeechMode mode);
std::string render_hate_speech(std::string_view text, HateSpeechMode mode);

struct HateSpeechResult {
    double f1 = 0.0;  // binary F1 on "yes", macro F1 in multiclass mode
    double accuracy = 0.0;
    std::vector<std::size_t> predictions;
};

HateSpeechResult hate_speech_eval(const LanguageModel& model, const Tokenizer& tokenizer,
                                  std::span<const LabeledText> examples, std::span<const LabeledText> shot_pool,
                                  const HateSpeechConfig& config);

// ---- pair preference and ICAT ------------------------------------------------------------

struct SentencePair {
    std::string stereotypical;
    std::string anti_stereotypical;
};

/// Share of pairs whose first sentence has the higher per-token log-likelihood.
/// An exact tie counts as half a preference and is tallied in `ties`.
struct PreferenceResult {
    double rate = 0.0;
    std::size_t ties = 0;
    std::size_t pairs = 0;
};
PreferenceResult pair_preference_eval(const LanguageModel& model, const Tokenizer& tokenizer,
                                      std::span<const SentencePair> pairs);

// LMS × min(SS, 100 − SS) / 50.
double stereoset_icat(double lms, double ss);

// ---- toxicity ---------------------------------------------------------------------------

/// Maps text to a probability in [0, 1]. Throws DependencyError when the
/// backing process or service cannot answer.
class ToxicityClassifier {
public:
    virtual ~ToxicityClassifier() = default;
    virtual double score(std::string_view text) = 0;
};

// Runs `command` with the text on stdin and reads one float from stdout.
class CommandClassifier final : public ToxicityClassifier {
public:
    explicit CommandClassifier(std::string command) : command_(std::move(command)) {}
    double score(std::string_view text) override;

private:
    std::string command_;
};

// POSTs the text as text/plain to an http:// URL and reads one float back.
class HttpClassifier final : public ToxicityClassifier {
public:
    explicit HttpClassifier(std::string url);
    double score(std::string_view text) override;

private:
    std::string host_;
    int port_ = 80;
    std::string path_;
};

// "http://..." gives an HttpClassifier, anything else a CommandClassifier.
std::unique_ptr<ToxicityClassifier> make_classifier(const std::string& handle);

struct ToxicityPrompt {
    std::string text;
    double toxicity = 0.0;  // prompt's own toxicity, used for bucketing
};

struct ToxicityProtocol {
    std::vector<ToxicityPrompt> prompts;
    std::size_t generations_per_prompt = 25;
    std::size_t tokens_per_generation = 20;
    double top_p = 0.9;
    std::vector<double> bucket_edges = {0.0, 0.25, 0.5, 0.75, 1.0};
    std::uint64_t seed = 0;

    void validate() const;
};

struct ToxicityBucket {
    double lower = 0.0;
    double upper = 0.0;
    std::size_t prompts = 0;
    std::optional<double> mean;  // absent when no prompt fell in the bucket
};

struct ToxicityResult {
    std::vector<ToxicityBucket> buckets;
    std::vector<std::vector<double>> scores;  // per prompt, per generation
};

/// Bucket i covers [edge_i, edge_{i+1}), the last one closed on the right.
std::optional<std::size_t> toxicity_bucket(std::span<const double> edges, double value);

ToxicityResult toxicity_eval(const LanguageModel& model, const Tokenizer& tokenizer, ToxicityClassifier& classifier,
                             const ToxicityProtocol& protocol);

// ---- reports ---------------------------------------------------------------------------

/// A metric bundle together with the exact settings that produced it.
struct MetricReport {
    std::string evaluation;
    nlohmann::json config = nlohmann::json::object();
    nlohmann::json metrics = nlohmann::json::object();

    nlohmann::json to_json() const {
        return {{"evaluation", evaluation}, {"config", config}, {"metrics", metrics}};
    }
};

} // namespace optlab
