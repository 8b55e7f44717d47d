#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "optlab/corpus.hpp"
#include "optlab/random.hpp"
#include "optlab/tensor.hpp"
#include "optlab/trainer.hpp"

namespace optlab::testing {

inline Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) {
        x = lo + (hi - lo) * uniform01(rng);
    }
    return Tensor::from(std::move(shape), std::move(v), true);
}

// |analytic − numeric| / max(|analytic|, |numeric|, floor).
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Worst relative error between tape gradients and central differences of a
/// scalar-valued graph over every element of every input.
inline double gradcheck(std::vector<Tensor> inputs, const std::function<Tensor(Tape&, const std::vector<Tensor>&)>& f,
                        double h = 1e-5) {
    for (auto& t : inputs) {
        t.set_requires_grad(true);
        t.clear_grad();
    }
    Tape tape;
    const Tensor out = f(tape, inputs);
    tape.backward(out);
    double worst = 0.0;
    for (auto& t : inputs) {
        const std::vector<double> analytic(t.grad().begin(), t.grad().end());
        auto data = t.data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double saved = data[i];
            Tape off(false);
            data[i] = saved + h;
            const double up = f(off, inputs).item();
            data[i] = saved - h;
            const double down = f(off, inputs).item();
            data[i] = saved;
            worst = std::max(worst, relative_error(analytic[i], (up - down) / (2.0 * h)));
        }
    }
    return worst;
}

// Dot product with a fixed random weight so every output element matters.
inline Tensor weighted_sum(Tape& tape, const Tensor& y, std::uint64_t seed) {
    Rng rng(seed);
    Tensor w = random_tensor(rng, y.shape());
    w.set_requires_grad(false);
    return sum(tape, mul(tape, y, w));
}

// A random period-`period` token pattern repeated `repeats` times.
inline std::vector<TokenId> repetition_corpus(std::size_t vocab, std::size_t period, std::size_t repeats,
                                              std::uint64_t seed) {
    Rng rng(seed);
    std::vector<TokenId> pattern(period);
    for (auto& t : pattern) {
        t = static_cast<TokenId>(1 + rng() % (vocab - 1));
    }
    std::vector<TokenId> out;
    out.reserve(period * repeats);
    for (std::size_t i = 0; i < repeats; ++i) {
        out.insert(out.end(), pattern.begin(), pattern.end());
    }
    return out;
}

/// 2-layer, d=64 desk model on 32-token windows, four per step.
inline TrainConfig desk_config(std::uint64_t steps) {
    TrainConfig c;
    c.model = ModelConfig{2, 2, 64, 64, 32, 0.1, 4, false};
    c.seq_len = 32;
    c.micro_batch = 4;
    c.schedule.max_lr = 3e-3;
    c.schedule.warmup_unit = WarmupUnit::steps;
    c.schedule.warmup = 50;
    c.schedule.decay_horizon_tokens = 1e7;
    c.token_budget = steps * c.batch_tokens();
    c.checkpoint_every = 100;
    c.validate_every = 50;
    return c;
}

// Smaller variant for tests that run many short trainings.
inline TrainConfig tiny_config(std::uint64_t steps) {
    TrainConfig c = desk_config(steps);
    c.model = ModelConfig{1, 2, 16, 32, 16, 0.1, 2, false};
    c.seq_len = 16;
    c.micro_batch = 2;
    c.schedule.warmup = 5;
    c.token_budget = steps * c.batch_tokens();
    c.checkpoint_every = 10;
    c.validate_every = 5;
    c.validation_windows = 2;
    return c;
}

inline TokenCorpus desk_corpus(std::size_t vocab = 64) {
    return TokenCorpus::split(repetition_corpus(vocab, 24, 800, 7), 0.05);
}

inline TokenCorpus tiny_corpus() {
    return desk_corpus(32);
}

inline std::string random_words(Rng& rng, std::size_t n) {
    std::string out;
    for (std::size_t i = 0; i < n; ++i) {
        if (i > 0) {
            out.push_back(' ');
        }
        out += "w" + std::to_string(rng() % 1000000);
    }
    return out;
}

/// Shuffled corpus of singletons plus near pairs (last word changed, exact
/// 5-gram Jaccard 99/101) and far pairs (half the words shared, Jaccard near
/// 1/3). Pair members are listed lower id first.
struct PlantedCorpus {
    std::vector<Document> docs;
    std::vector<std::pair<std::uint64_t, std::uint64_t>> near;
    std::vector<std::pair<std::uint64_t, std::uint64_t>> far;
};

inline PlantedCorpus planted_corpus(std::size_t total, std::size_t near_pairs, std::size_t far_pairs,
                                    std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t words = 104;
    std::vector<std::string> texts;
    std::vector<std::pair<std::size_t, std::size_t>> near;
    std::vector<std::pair<std::size_t, std::size_t>> far;
    for (std::size_t i = 0; i < near_pairs; ++i) {
        const std::string base = random_words(rng, words - 1);
        texts.push_back(base + " " + random_words(rng, 1));
        texts.push_back(base + " " + random_words(rng, 1));
        near.emplace_back(texts.size() - 2, texts.size() - 1);
    }
    for (std::size_t i = 0; i < far_pairs; ++i) {
        const std::string half = random_words(rng, words / 2);
        texts.push_back(half + " " + random_words(rng, words / 2));
        texts.push_back(half + " " + random_words(rng, words / 2));
        far.emplace_back(texts.size() - 2, texts.size() - 1);
    }
    while (texts.size() < total) {
        texts.push_back(random_words(rng, words));
    }
    std::vector<std::size_t> order(texts.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    for (std::size_t i = order.size(); i > 1; --i) {
        std::swap(order[i - 1], order[rng() % i]);
    }
    std::vector<std::uint64_t> id_of(texts.size());
    PlantedCorpus out;
    for (std::size_t pos = 0; pos < order.size(); ++pos) {
        id_of[order[pos]] = pos;
        out.docs.push_back({pos, "planted", texts[order[pos]]});
    }
    auto ids = [&](std::pair<std::size_t, std::size_t> p) {
        return std::minmax(id_of[p.first], id_of[p.second]);
    };
    for (auto p : near) {
        out.near.push_back(ids(p));
    }
    for (auto p : far) {
        out.far.push_back(ids(p));
    }
    return out;
}

inline std::filesystem::path fresh_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("optlab-test-" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline std::vector<double> loss_trace(const TrainerState& s) {
    std::vector<double> out;
    for (const auto& r : s.health) {
        out.push_back(r.train_loss);
    }
    return out;
}

inline bool same_bits(double a, double b) {
    return std::memcmp(&a, &b, sizeof a) == 0;
}

inline bool params_identical(const Parameters& a, const Parameters& b) {
    if (a.size() != b.size()) {
        return false;
    }
    for (std::size_t i = 0; i < a.size(); ++i) {
        const auto x = a[i].value.data();
        const auto y = b[i].value.data();
        if (x.size() != y.size() || std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) != 0) {
            return false;
        }
    }
    return true;
}

} // namespace optlab::testing
