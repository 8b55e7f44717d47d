#include <cmath>
#include <map>

#include "doctest.h"
#include "optlab/errors.hpp"
#include "optlab/eval.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace optlab;
using namespace optlab::testing;

namespace {

constexpr std::size_t kBytes = 257;  // end-of-text plus 256 byte ids

TokenId byte_id(char c) { return static_cast<TokenId>(static_cast<unsigned char>(c)) + 1; }

// Same logits row at every position.
class UnigramModel final : public LanguageModel {
public:
    explicit UnigramModel(std::vector<double> row, std::size_t context = 256) : row_(std::move(row)), ctx_(context) {}
    std::size_t vocab_size() const override { return row_.size(); }
    std::size_t context_length() const override { return ctx_; }
    Tensor logits(std::span<const TokenId> tokens) const override {
        std::vector<double> v;
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            v.insert(v.end(), row_.begin(), row_.end());
        }
        return Tensor::from({tokens.size(), row_.size()}, v);
    }

private:
    std::vector<double> row_;
    std::size_t ctx_;
};

// Logit `strength` on next[current token], zero elsewhere.
class BigramModel final : public LanguageModel {
public:
    BigramModel(std::size_t vocab, double strength) : vocab_(vocab), strength_(strength) {}
    void follow(std::string_view text) {
        for (std::size_t i = 0; i + 1 < text.size(); ++i) {
            next_[byte_id(text[i])] = byte_id(text[i + 1]);
        }
    }
    std::size_t vocab_size() const override { return vocab_; }
    std::size_t context_length() const override { return 512; }
    Tensor logits(std::span<const TokenId> tokens) const override {
        std::vector<double> v(tokens.size() * vocab_, 0.0);
        for (std::size_t p = 0; p < tokens.size(); ++p) {
            const auto it = next_.find(tokens[p]);
            v[p * vocab_ + (it == next_.end() ? tokens[p] : it->second)] = strength_;
        }
        return Tensor::from({tokens.size(), vocab_}, v);
    }

private:
    std::size_t vocab_;
    double strength_;
    std::map<TokenId, TokenId> next_;
};

// Predicts the continuation of any registered sequence with certainty;
// end-of-text otherwise.
class PrefixModel final : public LanguageModel {
public:
    explicit PrefixModel(std::size_t vocab, double strength = 1000.0) : vocab_(vocab), strength_(strength) {}
    void learn(const std::vector<TokenId>& seq) {
        for (std::size_t p = 0; p + 1 < seq.size(); ++p) {
            next_[std::vector<TokenId>(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(p + 1))] = seq[p + 1];
        }
    }
    std::size_t vocab_size() const override { return vocab_; }
    std::size_t context_length() const override { return 1024; }
    Tensor logits(std::span<const TokenId> tokens) const override {
        std::vector<double> v(tokens.size() * vocab_, 0.0);
        std::vector<TokenId> prefix;
        for (std::size_t p = 0; p < tokens.size(); ++p) {
            prefix.push_back(tokens[p]);
            const auto it = next_.find(prefix);
            v[p * vocab_ + (it == next_.end() ? kEndOfText : it->second)] = strength_;
        }
        return Tensor::from({tokens.size(), vocab_}, v);
    }

private:
    std::size_t vocab_;
    double strength_;
    std::map<std::vector<TokenId>, TokenId> next_;
};

std::vector<double> log_softmax_oracle(const std::vector<double>& row) {
    double z = 0.0;
    for (double x : row) {
        z += std::exp(x);
    }
    std::vector<double> out;
    for (double x : row) {
        out.push_back(std::log(std::exp(x) / z));
    }
    return out;
}

class ConstantClassifier final : public ToxicityClassifier {
public:
    double score(std::string_view) override { return 0.3; }
};

class ParityClassifier final : public ToxicityClassifier {
public:
    double score(std::string_view text) override { return static_cast<double>(text.size() % 2); }
};

PromptTask small_task() {
    PromptTask t;
    t.name = "toy";
    t.instances = {{"Q: sky?\nA:", {" blue", " green"}, 0}, {"Q: grass?\nA:", {" blue", " green"}, 1}};
    t.shot_pool = {{"Q: sun?\nA:", {" yellow", " black"}, 0},
                   {"Q: coal?\nA:", {" yellow", " black"}, 1},
                   {"Q: snow?\nA:", {" white", " red"}, 0}};
    return t;
}

} // namespace

TEST_CASE("prompt assembly") {
    const auto task = small_task();
    const auto& inst = task.instances[0];
    CHECK(assemble_prompt(task, inst, 0, 1) == inst.context);
    PromptTask one = task;
    one.shot_pool.resize(1);
    CHECK(assemble_prompt(one, inst, 1, 5) == "Q: sun?\nA: yellow\n" + inst.context);
    CHECK(assemble_prompt(task, inst, 2, 9) == assemble_prompt(task, inst, 2, 9));
    const auto three = assemble_prompt(task, inst, 3, 9);
    CHECK(three.find(" yellow\n") != std::string::npos);
    CHECK(three.find(" black\n") != std::string::npos);
    CHECK(three.find(" white\n") != std::string::npos);
    CHECK_THROWS_AS(assemble_prompt(task, inst, 4, 9), ConfigError);

    CHECK(PromptTask::from_json(task.to_json()).to_json() == task.to_json());
    PromptTask overlap = task;
    overlap.shot_pool.push_back(task.instances[1]);
    CHECK_THROWS_AS(overlap.validate(), ConfigError);
    PromptTask bad_gold = task;
    bad_gold.instances[0].gold = 2;
    CHECK_THROWS_AS(bad_gold.validate(), ConfigError);
}

TEST_CASE("multiple choice scoring") {
    const BpeTokenizer tok;
    SUBCASE("hard-wired model picks its candidate") {
        BigramModel m(kBytes, 1000.0);
        m.follow(": beta");
        const std::vector<std::string> cands{" alpha", " beta", " gamma"};
        const auto r = score_multiple_choice(m, tok, "pick:", cands, ScoreMode::sum_logprob);
        CHECK(r.chosen == 1);
        CHECK(r.scores[1] == 0.0);
    }
    SUBCASE("duplicates go to the lowest index") {
        const UnigramModel m(std::vector<double>(kBytes, 0.0));
        const std::vector<std::string> cands{" same", " same", " other"};
        for (auto mode : {ScoreMode::sum_logprob, ScoreMode::per_token_logprob}) {
            const auto r = score_multiple_choice(m, tok, "x", cands, mode);
            CHECK(r.chosen == 0);
            CHECK(r.scores[0] == r.scores[1]);
        }
    }
    SUBCASE("unigram model matches enumerate-and-multiply") {
        Rng rng(14);
        for (int trial = 0; trial < 50; ++trial) {
            std::vector<double> row(kBytes);
            for (auto& x : row) {
                x = 3.0 * uniform01(rng);
            }
            const auto lp = log_softmax_oracle(row);
            std::vector<std::string> cands;
            for (int c = 0; c < 3; ++c) {
                std::string s;
                for (std::size_t n = 1 + rng() % 5; n > 0; --n) {
                    s.push_back(static_cast<char>('a' + rng() % 6));
                }
                cands.push_back(s);
            }
            for (auto mode : {ScoreMode::sum_logprob, ScoreMode::per_token_logprob}) {
                std::vector<double> want;
                for (const auto& c : cands) {
                    double prob = 1.0;
                    for (char ch : c) {
                        prob *= std::exp(lp[byte_id(ch)]);
                    }
                    const double s = std::log(prob);
                    want.push_back(mode == ScoreMode::sum_logprob ? s : s / static_cast<double>(c.size()));
                }
                const auto got = score_multiple_choice(UnigramModel(row), tok, "ctx", cands, mode);
                const auto best = static_cast<std::size_t>(std::max_element(want.begin(), want.end()) - want.begin());
                for (std::size_t i = 0; i < 3; ++i) {
                    CHECK(std::abs(got.scores[i] - want[i]) < 1e-12);
                }
                CHECK(got.chosen == best);
            }
        }
    }
    SUBCASE("argmax survives a uniform shift and scaling of logits") {
        Rng rng(2);
        std::vector<double> row(kBytes);
        for (auto& x : row) {
            x = uniform01(rng);
        }
        std::vector<double> shifted = row;
        for (auto& x : shifted) {
            x += 7.5;
        }
        const std::vector<std::string> cands{" ab", " cd", " ef", " bd"};
        const auto a = score_multiple_choice(UnigramModel(row), tok, "q", cands, ScoreMode::sum_logprob);
        const auto b = score_multiple_choice(UnigramModel(shifted), tok, "q", cands, ScoreMode::sum_logprob);
        CHECK(a.chosen == b.chosen);
        for (std::size_t i = 0; i < cands.size(); ++i) {
            CHECK(std::abs(a.scores[i] - b.scores[i]) < 1e-9);
        }
    }
    const UnigramModel m(std::vector<double>(kBytes, 0.0));
    CHECK_THROWS_AS(score_multiple_choice(m, tok, "x", std::vector<std::string>{" a"}, ScoreMode::sum_logprob),
                    ContractError);
    CHECK_THROWS_AS(score_multiple_choice(m, tok, "x", std::vector<std::string>{" a", ""}, ScoreMode::sum_logprob),
                    ContractError);
}

TEST_CASE("task evaluation and F1 helpers") {
    BigramModel m(kBytes, 50.0);
    m.follow(": blue");
    auto task = small_task();
    task.report_f1 = true;
    const auto r = evaluate_task(m, BpeTokenizer{}, task, 0, 1);
    CHECK(r.predictions == std::vector<std::size_t>{0, 0});
    CHECK(r.accuracy == 0.5);
    CHECK(r.f1.value() == doctest::Approx(2.0 / 3.0));

    const std::vector<std::size_t> gold{0, 1, 2, 2};
    const std::vector<std::size_t> pred{0, 2, 2, 1};
    // Class 0: F1 1; class 1: 0; class 2: P=1/2, R=1/2.
    CHECK(macro_f1(gold, pred, 3) == doctest::Approx((1.0 + 0.0 + 0.5) / 3.0));
    CHECK(binary_f1(gold, gold, 1) == 1.0);
    CHECK_THROWS_AS(binary_f1(gold, std::vector<std::size_t>{0}, 1), DimensionError);
}

TEST_CASE("perplexity") {
    const BpeTokenizer tok;
    const UnigramModel flat(std::vector<double>(256, 0.0));
    std::vector<TokenId> ids;
    for (TokenId t = 1; t < 200; ++t) {
        ids.push_back(t);
    }
    const auto nll = sequence_nll(flat, ids);
    CHECK(nll.tokens == ids.size());
    CHECK(std::exp(nll.total_nll / nll.tokens) == doctest::Approx(256.0).epsilon(1e-12));

    const UnigramModel flat_bytes(std::vector<double>(kBytes, 0.0));
    CHECK(perplexity(flat_bytes, "any text at all", tok) == doctest::Approx(257.0).epsilon(1e-12));
    CHECK_THROWS_AS(perplexity(flat_bytes, "", tok), InputError);

    const std::string text = "the deterministic model knows this sentence";
    PrefixModel oracle(kBytes);
    std::vector<TokenId> seq{kEndOfText};
    const auto enc = tok.encode(text);
    seq.insert(seq.end(), enc.begin(), enc.end());
    oracle.learn(seq);
    CHECK(perplexity(oracle, text, tok) == 1.0);

    // Windowing: a context-free model scores every token exactly once.
    Rng rng(5);
    std::vector<double> row(kBytes);
    for (auto& x : row) {
        x = uniform01(rng);
    }
    const auto lp = log_softmax_oracle(row);
    const UnigramModel narrow(row, 8);
    const auto long_ids = tok.encode("a longer sentence than the eight-token window");
    double want = 0.0;
    for (auto t : long_ids) {
        want -= lp[t];
    }
    const auto windowed = sequence_nll(narrow, long_ids);
    CHECK(windowed.tokens == long_ids.size());
    CHECK(windowed.total_nll == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("perplexity agrees with the training cross-entropy") {
    const ModelConfig c{2, 2, 16, kBytes, 64, 0.0, 2, false};
    const GptModel model(c, init_parameters(c, 77));
    const BpeTokenizer tok;
    const std::string text = "cross module check";
    const auto ids = tok.encode(text);
    std::vector<TokenId> inputs{kEndOfText};
    inputs.insert(inputs.end(), ids.begin(), ids.end() - 1);
    Tape tape(false);
    const auto params = model.parameters().clone();
    const auto ce = cross_entropy(tape, forward(tape, c, params, inputs).logits, ids).loss.item();
    CHECK(std::abs(perplexity(model, text, tok) - std::exp(ce)) < 1e-9);
}

TEST_CASE("normalized perplexity") {
    CHECK(normalized_perplexity(10.0, 5) == doctest::Approx(std::exp(2.0)).epsilon(1e-15));
    CHECK_THROWS_AS(normalized_perplexity(1.0, 0), InputError);
    Rng rng(8);
    for (int i = 0; i < 100; ++i) {
        const double nll = 50.0 * uniform01(rng);
        const std::size_t model_count = 1 + rng() % 30;
        const std::size_t ref_count = 1 + rng() % 30;
        const double native = std::exp(nll / model_count);
        const double norm = normalized_perplexity(nll, ref_count);
        CHECK(std::abs(norm - std::exp(nll / ref_count)) <= 1e-12 * norm);
        if (nll > 0) {
            CHECK((norm < native) == (ref_count > model_count));
        }
        CHECK(normalized_perplexity(nll, model_count) == native);
    }
}

TEST_CASE("unigram F1") {
    CHECK(unigram_f1("a b c", "a b d") == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    CHECK(unigram_f1("Hello, World!", "hello world") == 1.0);
    CHECK(unigram_f1("x y", "p q") == 0.0);
    CHECK(unigram_f1("", "") == 0.0);
    CHECK(unigram_f1("", "gold") == 0.0);
    Rng rng(10);
    const std::vector<std::string> words{"a", "b", "c", "the", "cat", "dog", "A", "B."};
    for (int i = 0; i < 100; ++i) {
        std::string h;
        std::string r;
        for (std::size_t n = rng() % 8; n > 0; --n) {
            h += words[rng() % words.size()] + " ";
        }
        for (std::size_t n = rng() % 8; n > 0; --n) {
            r += words[rng() % words.size()] + " ";
        }
        const double f = unigram_f1(h, r);
        CHECK(std::abs(f - uf1_oracle(uf1_tokens(h), uf1_tokens(r))) <= 1e-12);
        CHECK(f == unigram_f1(r, h));
        auto sh = uf1_tokens(h);
        auto sr = uf1_tokens(r);
        std::sort(sh.begin(), sh.end());
        std::sort(sr.begin(), sr.end());
        CHECK((f == 1.0) == (!sh.empty() && sh == sr));
    }
}

TEST_CASE("dialogue evaluation") {
    DialogueEpisode ep;
    ep.turns = {{1, "hi there"}, {2, "hello friend"}, {1, "how are you"}, {2, "fine thanks"}};
    ep.model_speaker = 2;
    CHECK(render_dialogue_context(ep, 2) == "Person 1: hi there\nPerson 2: hello friend\nPerson 1:");
    CHECK(render_dialogue_context(ep, 0) == "Person 1:");
    const std::vector<DialogueEpisode> eps{ep};
    const BpeTokenizer bytes;

    SUBCASE("gold echo") {
        PrefixModel echo(kBytes);
        for (std::size_t i : {1u, 3u}) {
            std::vector<TokenId> seq{kEndOfText};
            for (const auto& part : {render_dialogue_context(ep, i), " " + ep.turns[i].text, std::string("\n")}) {
                const auto ids = bytes.encode(part);
                seq.insert(seq.end(), ids.begin(), ids.end());
            }
            echo.learn(seq);
        }
        const auto r = dialogue_eval(echo, eps, bytes, bytes);
        CHECK(r.responses == 2);
        CHECK(r.uf1 == 1.0);
        CHECK(r.generations[0] == " hello friend");
        CHECK(r.normalized_ppl == 1.0);
        CHECK(r.native_ppl == r.normalized_ppl);
    }
    SUBCASE("fixed model recomputation") {
        const BpeTokenizer coarse(bpe_train(std::vector<std::string>{"hello friend fine thanks", "hello hello"}, 300));
        REQUIRE(coarse.vocab_size() > kBytes);
        std::vector<double> row(coarse.vocab_size(), 0.0);
        row[byte_id('h')] = 2.0;
        row[byte_id(' ')] = 1.0;
        const UnigramModel fixed(row);
        const auto lp = log_softmax_oracle(row);
        DialogueEpisode three;
        three.turns = {{1, "hi"}, {2, "hhhh"}, {1, "bye"}};
        three.model_speaker = 2;
        const std::vector<DialogueEpisode> both{ep, three};
        const auto r = dialogue_eval(fixed, both, coarse, bytes, 4);
        double total = 0.0;
        std::size_t model_tokens = 0;
        std::size_t ref_tokens = 0;
        for (const auto* e : {&ep, &three}) {
            for (const auto& t : e->turns) {
                if (t.speaker == 2) {
                    const auto ids = coarse.encode(" " + t.text);
                    for (auto id : ids) {
                        total -= lp.at(id);
                    }
                    model_tokens += ids.size();
                    ref_tokens += t.text.size() + 1;
                }
            }
        }
        REQUIRE(r.responses == 3);
        CHECK(std::abs(r.native_ppl - std::exp(total / model_tokens)) < 1e-9);
        CHECK(std::abs(r.normalized_ppl - std::exp(total / ref_tokens)) < 1e-9);
        for (const auto& g : r.generations) {
            CHECK(g == "hhhh");
        }
        CHECK(r.uf1 == doctest::Approx(1.0 / 3.0));
    }
    SUBCASE("empty generation scores zero") {
        const UnigramModel eot([] {
            std::vector<double> row(kBytes, 0.0);
            row[kEndOfText] = 50.0;
            return row;
        }());
        const auto r = dialogue_eval(eot, eps, bytes, bytes);
        CHECK(r.generations[0].empty());
        CHECK(r.uf1 == 0.0);
    }
    DialogueEpisode bad;
    bad.turns = {{1, "a"}, {1, "b"}};
    CHECK_THROWS_AS(bad.validate(), InputError);
    const auto parsed = DialogueEpisode::from_json(nlohmann::json::parse(R"({"turns": ["a", "b", "c"]})"));
    CHECK(parsed.turns[1].speaker == 2);
}

TEST_CASE("hate speech protocol") {
    const BpeTokenizer tok;
    BigramModel yes(kBytes, 100.0);
    yes.follow(": yes");
    std::vector<LabeledText> examples;
    for (int i = 0; i < 6; ++i) {
        examples.push_back({"sample " + std::to_string(i), i < 4 ? "yes" : "no"});
    }
    const std::vector<LabeledText> pool{{"p1", "yes"}, {"p2", "no"}, {"p3", "yes"}};
    HateSpeechConfig cfg;
    const auto r = hate_speech_eval(yes, tok, examples, pool, cfg);
    // Always yes: tp = 4, fp = 2, fn = 0.
    CHECK(r.f1 == doctest::Approx(2.0 * 4 / (2.0 * 4 + 2)));
    CHECK(r.accuracy == doctest::Approx(4.0 / 6.0));
    cfg.mode = HateSpeechMode::one_shot;
    CHECK(hate_speech_eval(yes, tok, examples, pool, cfg).predictions == std::vector<std::size_t>(6, 0));

    cfg.mode = HateSpeechMode::few_shot_multiclass;
    cfg.few_shots = 2;
    CHECK(hate_speech_labels(cfg.mode).size() == 3);
    CHECK(render_hate_speech("t", cfg.mode).find("neither") != std::string::npos);
    auto multi = examples;
    multi[5].label = "neither";
    const auto m = hate_speech_eval(yes, tok, multi, pool, cfg);
    CHECK(m.f1 == doctest::Approx(2.0 * 4 / (2.0 * 4 + 2) / 3.0));

    cfg.few_shots = 4;
    CHECK_THROWS_AS(hate_speech_eval(yes, tok, examples, pool, cfg), ConfigError);
    cfg.mode = HateSpeechMode::zero_shot;
    multi[0].label = "maybe";
    CHECK_THROWS_AS(hate_speech_eval(yes, tok, multi, pool, cfg), InputError);
    CHECK(parse_hate_mode(hate_mode_name(HateSpeechMode::few_shot_binary)) == HateSpeechMode::few_shot_binary);

    // A model answering gold: it sees "... sample N ..." and follows with the right label.
    PrefixModel gold(kBytes);
    for (const auto& e : examples) {
        std::vector<TokenId> seq{kEndOfText};
        for (const auto& part : {render_hate_speech(e.text, HateSpeechMode::zero_shot), " " + e.label}) {
            const auto ids = tok.encode(part);
            seq.insert(seq.end(), ids.begin(), ids.end());
        }
        gold.learn(seq);
    }
    CHECK(hate_speech_eval(gold, tok, examples, pool, HateSpeechConfig{}).f1 == 1.0);
}

TEST_CASE("pair preference and ICAT") {
    const BpeTokenizer tok;
    const UnigramModel flat(std::vector<double>(kBytes, 0.0));
    const std::vector<SentencePair> same{{"one way", "one way"}, {"x", "x"}};
    const auto r = pair_preference_eval(flat, tok, same);
    CHECK(r.rate == 0.5);
    CHECK(r.ties == 2);

    BigramModel m(kBytes, 20.0);
    m.follow("abab");
    const std::vector<SentencePair> pairs{{"abab", "cdcd"}, {"cdcd", "abab"}, {"ab", "dc"}};
    const auto p = pair_preference_eval(m, tok, pairs);
    CHECK(p.rate == doctest::Approx(2.0 / 3.0));
    CHECK(p.ties == 0);
    CHECK_THROWS_AS(pair_preference_eval(m, tok, std::vector<SentencePair>{}), InputError);

    CHECK(stereoset_icat(74.8, 50.0) == 74.8);
    const double icat = stereoset_icat(74.8, 59.9);
    CHECK(icat == doctest::Approx(74.8 * 40.1 / 50.0).epsilon(1e-12));
    CHECK(std::round(icat * 10) / 10 == 60.0);
    CHECK(std::round(stereoset_icat(77.6, 60.8) * 10) / 10 == 60.8);
    CHECK(stereoset_icat(80.0, 30.0) == stereoset_icat(80.0, 70.0));
}

TEST_CASE("toxicity protocol") {
    const BpeTokenizer bytes;
    ToxicityProtocol proto;
    proto.prompts = {{"xa", 0.1}, {"xb", 0.2}, {"za", 0.6}, {"q", 0.9}, {"w", 1.0}, {"off", 1.5}};
    proto.generations_per_prompt = 3;
    proto.tokens_per_generation = 5;
    const UnigramModel flat(std::vector<double>(kBytes, 0.0));
    ConstantClassifier constant;
    const auto c = toxicity_eval(flat, bytes, constant, proto);
    REQUIRE(c.buckets.size() == 4);
    CHECK(c.buckets[0].mean.value() == doctest::Approx(0.3));
    CHECK_FALSE(c.buckets[1].mean.has_value());
    CHECK(c.buckets[2].mean.value() == doctest::Approx(0.3));
    CHECK(c.buckets[3].prompts == 2);
    CHECK(c.scores.size() == proto.prompts.size());

    // Repeat-last-token model: generations are deterministic and their byte
    // length is 5 × the last prompt token's length.
    const BpeTokenizer merged(BpeVocab({{byte_id('x'), byte_id('b')}}));
    BigramModel repeat(merged.vocab_size(), 500.0);
    ParityClassifier parity;
    proto.tokens_per_generation = 3;
    const auto t = toxicity_eval(repeat, merged, parity, proto);
    // xa → "aaa" (1), xb → "xbxbxb" (0), za → 1, q → 1, w → 1.
    CHECK(t.buckets[0].mean.value() == 0.5);
    CHECK_FALSE(t.buckets[1].mean.has_value());
    CHECK(t.buckets[2].mean.value() == 1.0);
    CHECK(t.buckets[3].mean.value() == 1.0);
    CHECK(toxicity_eval(repeat, merged, parity, proto).scores == t.scores);

    const std::vector<double> edges{0.0, 0.5, 1.0};
    CHECK(toxicity_bucket(edges, 0.5) == std::optional<std::size_t>(1));
    CHECK(toxicity_bucket(edges, 1.0) == std::optional<std::size_t>(1));
    CHECK_FALSE(toxicity_bucket(edges, 1.01).has_value());
    CHECK_FALSE(toxicity_bucket(edges, -0.1).has_value());

    ToxicityProtocol bad = proto;
    bad.top_p = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = proto;
    bad.bucket_edges = {0.0, 0.5, 0.5};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("external classifiers") {
    CommandClassifier echo("sh -c \"cat >/dev/null; echo 0.75\"");
    CHECK(echo.score("text") == 0.75);
    CommandClassifier length("wc -c");
    CHECK_THROWS_AS(length.score("this is longer than one"), DependencyError);
    CommandClassifier missing("/nonexistent/classifier");
    CHECK_THROWS_AS(missing.score("x"), DependencyError);
    CommandClassifier words("sh -c \"echo nope\"");
    CHECK_THROWS_AS(words.score("x"), DependencyError);
    HttpClassifier closed("http://127.0.0.1:1/score");
    CHECK_THROWS_AS(closed.score("x"), DependencyError);
    CHECK_THROWS_AS(HttpClassifier("ftp://host"), ConfigError);
    CHECK(dynamic_cast<HttpClassifier*>(make_classifier("http://localhost:9/x").get()) != nullptr);
    CHECK(dynamic_cast<CommandClassifier*>(make_classifier("cat").get()) != nullptr);

    const ToxicityProtocol proto{{{"p", 0.5}}, 1, 2, 0.9, {0.0, 1.0}, 0};
    const UnigramModel flat(std::vector<double>(kBytes, 0.0));
    CHECK_THROWS_AS(toxicity_eval(flat, BpeTokenizer{}, missing, proto), DependencyError);
}
