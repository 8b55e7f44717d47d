#include <cmath>

#include "doctest.h"
#include "optlab/errors.hpp"
#include "optlab/optim.hpp"
#include "support.hpp"

using namespace optlab;
using namespace optlab::testing;

namespace {

ScheduleConfig schedule_175b() {
    ScheduleConfig s;
    s.max_lr = 1.2e-4;
    s.warmup_unit = WarmupUnit::steps;
    s.warmup = 2000;
    s.tokens_per_step = 2e6;
    s.decay_horizon_tokens = 300e9;
    return s;
}

// Independent piecewise-linear schedule, written from the definition.
double oracle_lr(double max_lr, bool warmup_in_steps, double warmup, double tokens_per_step, double horizon,
                 double end, const std::vector<std::pair<std::uint64_t, double>>& overrides, std::uint64_t step,
                 double tokens) {
    const double warm_tokens = warmup_in_steps ? warmup * tokens_per_step : warmup;
    const double x = warmup_in_steps ? static_cast<double>(step) : tokens;
    double lr;
    if (x < warmup) {
        lr = max_lr * (x / warmup);
    } else if (tokens >= horizon) {
        lr = end * max_lr;
    } else {
        const double t = (tokens - warm_tokens) / (horizon - warm_tokens);
        lr = max_lr + (end * max_lr - max_lr) * std::max(0.0, t);
    }
    for (const auto& [from, f] : overrides) {
        if (step >= from) {
            lr *= f;
        }
    }
    return lr;
}

Parameters scalar_param(double x, ParamRole role = ParamRole::bias) {
    Parameters p;
    p.add("x", role, Tensor::from({1}, {x}, true));
    return p;
}

GradSet random_grads(Rng& rng, std::size_t groups, double spread) {
    GradSet g(groups);
    for (auto& v : g) {
        v.resize(1 + rng() % 7);
        for (double& x : v) {
            x = spread * (uniform01(rng) - 0.5);
        }
    }
    return g;
}

} // namespace

TEST_CASE("schedule: warmup midpoint, floor, continuity") {
    const auto s = schedule_175b();
    CHECK(lr_at(s, 0, 0) == 0.0);
    CHECK(lr_at(s, 1000, 1000 * 2e6) == doctest::Approx(0.6e-4).epsilon(1e-14));
    CHECK(lr_at(s, 2000, 2000 * 2e6) == doctest::Approx(1.2e-4).epsilon(1e-14));
    CHECK(lr_at(s, 150000, 300e9) == doctest::Approx(1.2e-5).epsilon(1e-14));
    CHECK(lr_at(s, 900000, 1800e9) == doctest::Approx(1.2e-5).epsilon(1e-14));
    // Left and right limits at the warmup joint.
    CHECK(std::abs(lr_at(s, 1999, 1999 * 2e6) - 1.2e-4) < 1e-7);
    CHECK(std::abs(lr_at(s, 2000, 2000 * 2e6) - lr_at(s, 2001, 2001 * 2e6)) < 1e-9);

    ScheduleConfig tok;  // token warmup, 125M-style
    tok.max_lr = 6e-4;
    for (std::uint64_t step = 0; step < 800000; step += 997) {
        const double lr = lr_at(tok, step, static_cast<double>(step) * tok.tokens_per_step);
        CHECK(lr >= 0.0);
        CHECK(lr <= 6e-4);
    }
}

TEST_CASE("schedule overrides agree with the straight-line oracle") {
    Rng rng(31);
    for (int trial = 0; trial < 40; ++trial) {
        ScheduleConfig s;
        s.max_lr = 1e-4 * (1 + uniform01(rng));
        s.warmup_unit = trial % 2 ? WarmupUnit::steps : WarmupUnit::tokens;
        s.tokens_per_step = 1000;
        s.warmup = s.warmup_unit == WarmupUnit::steps ? 50 : 50000;
        s.decay_horizon_tokens = 1e6;
        s.end_factor = 0.1;
        std::vector<std::pair<std::uint64_t, double>> ov;
        std::uint64_t at = 0;
        for (int k = 0; k < 3; ++k) {
            at += 1 + rng() % 400;
            const double f = k == 0 ? 2.0 / 3.0 : 0.5 + uniform01(rng);
            s.add_override(at, f);
            ov.emplace_back(at, f);
        }
        for (std::uint64_t step = 0; step < 1500; step += 7) {
            const double tokens = static_cast<double>(step) * 1000;
            const double want = oracle_lr(s.max_lr, s.warmup_unit == WarmupUnit::steps, s.warmup, 1000, 1e6, 0.1, ov,
                                          step, tokens);
            CHECK(std::abs(lr_at(s, step, tokens) - want) <= 1e-12 * s.max_lr);
        }
        ScheduleConfig plain = s;
        plain.overrides.clear();
        const auto first = ov.front().first;
        CHECK(lr_at(s, first, first * 1000.0) ==
              doctest::Approx(lr_at(plain, first, first * 1000.0) * 2.0 / 3.0).epsilon(1e-14));
    }
}

TEST_CASE("override bookkeeping") {
    ScheduleConfig s;
    s.add_override(10, 0.5);
    s.add_override(5, 0.5);
    s.add_override(10, 0.5);
    REQUIRE(s.overrides.size() == 2);
    CHECK(s.overrides[0] == ScheduleOverride{5, 0.5});
    CHECK(s.overrides[1] == ScheduleOverride{10, 0.25});
    CHECK_NOTHROW(s.validate());
    s.overrides = {{10, 0.5}, {10, 0.5}};
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s.overrides.clear();
    s.end_factor = 0.0;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    CHECK_THROWS_AS(s.add_override(3, 0.0), ConfigError);
}

TEST_CASE("adamw: decoupled decay, single-step hand value, nonfinite rejected") {
    AdamWConfig cfg;
    {
        auto p = scalar_param(2.0, ParamRole::weight);
        auto st = OptimizerState::zeros_like(p);
        adamw_step(p, GradSet{{0.0}}, st, 0.01, cfg);
        CHECK(p[0].value.data()[0] == 2.0 * (1.0 - 0.01 * 0.1));
    }
    {
        auto p = scalar_param(0.0);
        auto st = OptimizerState::zeros_like(p);
        adamw_step(p, GradSet{{1.0}}, st, 0.01, cfg);
        CHECK(p[0].value.data()[0] == doctest::Approx(-0.01 / (1.0 + 1e-8)).epsilon(1e-15));
        CHECK(st.t == 1);
        CHECK(st.v[0][0] >= 0.0);
    }
    {
        auto p = scalar_param(0.0);
        auto st = OptimizerState::zeros_like(p);
        CHECK_THROWS_AS(adamw_step(p, GradSet{{std::nan("")}}, st, 0.01, cfg), ContractError);
        CHECK(st.t == 0);
    }
    {
        Parameters p;
        p.add("b", ParamRole::bias, Tensor::from({1}, {1.0}, true));
        p.add("g", ParamRole::norm_gain, Tensor::from({1}, {1.0}, true));
        p.add("e", ParamRole::token_embedding, Tensor::from({1}, {1.0}, true));
        auto st = OptimizerState::zeros_like(p);
        adamw_step(p, GradSet{{0.0}, {0.0}, {0.0}}, st, 0.1, cfg);
        CHECK(p[0].value.data()[0] == 1.0);
        CHECK(p[1].value.data()[0] == 1.0);
        CHECK(p[2].value.data()[0] == 1.0 - 0.1 * 0.1);
    }
}

TEST_CASE("adamw without decay reproduces plain Adam") {
    AdamWConfig cfg;
    cfg.weight_decay = 0.0;
    Rng rng(12);
    auto p = scalar_param(0.3, ParamRole::weight);
    auto st = OptimizerState::zeros_like(p);
    double x = 0.3, m = 0.0, v = 0.0;
    for (int t = 1; t <= 200; ++t) {
        const double g = uniform01(rng) - 0.4;
        const double lr = 1e-3 * (1 + t % 3);
        adamw_step(p, GradSet{{g}}, st, lr, cfg);
        m = 0.9 * m + 0.1 * g;
        v = 0.95 * v + 0.05 * g * g;
        x -= lr * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.95, t))) + 1e-8);
    }
    CHECK(std::abs(p[0].value.data()[0] - x) < 1e-14);
}

TEST_CASE("adamw descends a convex bowl") {
    auto p = scalar_param(1.0);
    auto st = OptimizerState::zeros_like(p);
    double prev = 1.0;
    for (int t = 0; t < 50; ++t) {
        const double x = p[0].value.data()[0];
        adamw_step(p, GradSet{{2.0 * x}}, st, 0.01, AdamWConfig{});
        const double now = std::abs(p[0].value.data()[0]);
        CHECK(now < prev);
        prev = now;
    }
}

TEST_CASE("clip_grad_norm") {
    GradSet small{{0.3, 0.4}};  // norm 0.5
    CHECK(clip_grad_norm(small, ClipConfig{1.0}) == doctest::Approx(0.5));
    CHECK(small == GradSet{{0.3, 0.4}});

    GradSet big{{1.2, 1.6}};  // norm 2
    CHECK(clip_grad_norm(big, ClipConfig{1.0}) == doctest::Approx(2.0));
    CHECK(big[0][0] == doctest::Approx(0.6));
    CHECK(big[0][1] == doctest::Approx(0.8));
    CHECK(global_norm(big) == doctest::Approx(1.0).epsilon(1e-15));

    Rng rng(4);
    for (int trial = 0; trial < 100; ++trial) {
        auto g = random_grads(rng, 1 + rng() % 4, 2.0);
        double sq = 0.0;
        for (const auto& v : g) {
            for (double x : v) {
                sq += x * x;
            }
        }
        const double pre = clip_grad_norm(g, ClipConfig{0.3});
        CHECK(std::abs(pre - std::sqrt(sq)) < 1e-12);
        CHECK(std::abs(global_norm(g) - std::min(pre, 0.3)) < 1e-12);
        auto again = g;
        clip_grad_norm(again, ClipConfig{0.3});
        for (std::size_t i = 0; i < g.size(); ++i) {
            for (std::size_t j = 0; j < g[i].size(); ++j) {
                CHECK(std::abs(again[i][j] - g[i][j]) <= 1e-15 * std::abs(g[i][j]) + 1e-300);
            }
        }
    }
    CHECK_THROWS_AS(ClipConfig{0.0}.validate(), ConfigError);
}

TEST_CASE("predivide_reduce equals the mean and bounds intermediates") {
    Rng rng(77);
    const GradSet one{{1.5, -2.0}};
    CHECK(predivide_reduce(std::vector<GradSet>{one}, PredivideConfig{1}).mean == one);

    const GradSet g{{0.75, -3.0, 8.0}};
    const auto same = predivide_reduce(std::vector<GradSet>(16, g), PredivideConfig{16});
    CHECK(same.mean == g);
    CHECK(same.max_intermediate == 8.0 * 4.0);  // g/4 summed 16 times

    for (std::size_t n : {1, 4, 16, 64}) {
        std::vector<GradSet> workers;
        const auto layout = random_grads(rng, 3, 1.0);
        double max_abs = 0.0;
        for (std::size_t w = 0; w < n; ++w) {
            GradSet gw = layout;
            for (auto& v : gw) {
                for (double& x : v) {
                    x = 10.0 * (uniform01(rng) - 0.5);
                    max_abs = std::max(max_abs, std::abs(x));
                }
            }
            workers.push_back(gw);
        }
        const auto r = predivide_reduce(workers, PredivideConfig{n});
        for (std::size_t i = 0; i < layout.size(); ++i) {
            for (std::size_t j = 0; j < layout[i].size(); ++j) {
                double naive = 0.0;
                for (const auto& w : workers) {
                    naive += w[i][j];
                }
                naive /= static_cast<double>(n);
                CHECK(std::abs(r.mean[i][j] - naive) < 1e-12);
            }
        }
        CHECK(r.max_intermediate <= max_abs * std::sqrt(static_cast<double>(n)) * (1 + 1e-12));
    }
    CHECK_THROWS_AS(predivide_reduce(std::vector<GradSet>(3, g), PredivideConfig{4}), ContractError);
}
