#include <bit>
#include <cmath>
#include <limits>

#include "doctest.h"
#include "optlab/errors.hpp"
#include "optlab/precision.hpp"
#include "support.hpp"

using namespace optlab;
using namespace optlab::testing;

namespace {

// Double to binary16 bits by integer manipulation, round to nearest even.
std::uint16_t oracle_half_bits(double x) {
    const auto bits = std::bit_cast<std::uint64_t>(x);
    const auto sign = static_cast<std::uint16_t>((bits >> 63) << 15);
    const int exp = static_cast<int>((bits >> 52) & 0x7ff);
    const std::uint64_t mant = bits & ((std::uint64_t{1} << 52) - 1);
    if (exp == 0x7ff) {
        return static_cast<std::uint16_t>(sign | 0x7c00 | (mant ? 0x200 : 0));
    }
    if (exp == 0) {
        return sign;
    }
    int e = exp - 1023;
    if (e > 15) {
        return static_cast<std::uint16_t>(sign | 0x7c00);
    }
    if (e >= -14) {
        std::uint64_t hm = mant >> 42;
        const std::uint64_t rem = mant & ((std::uint64_t{1} << 42) - 1);
        const std::uint64_t half = std::uint64_t{1} << 41;
        if (rem > half || (rem == half && (hm & 1))) {
            ++hm;
        }
        if (hm == 1024) {
            hm = 0;
            ++e;
        }
        if (e > 15) {
            return static_cast<std::uint16_t>(sign | 0x7c00);
        }
        return static_cast<std::uint16_t>(sign | ((e + 15) << 10) | hm);
    }
    const std::uint64_t sig = (std::uint64_t{1} << 52) | mant;
    const int shift = 42 + (-14 - e);
    if (shift >= 64) {
        return sign;
    }
    std::uint64_t hm = sig >> shift;
    const std::uint64_t rem = sig & ((std::uint64_t{1} << shift) - 1);
    const std::uint64_t half = std::uint64_t{1} << (shift - 1);
    if (rem > half || (rem == half && (hm & 1))) {
        ++hm;
    }
    return static_cast<std::uint16_t>(sign | hm);  // hm == 1024 carries into the exponent field
}

double decode_half(std::uint16_t h) {
    const double sign = (h & 0x8000) ? -1.0 : 1.0;
    const int exp = (h >> 10) & 0x1f;
    const int mant = h & 0x3ff;
    if (exp == 31) {
        return mant ? std::numeric_limits<double>::quiet_NaN() : sign * std::numeric_limits<double>::infinity();
    }
    if (exp == 0) {
        return sign * std::ldexp(mant, -24);
    }
    return sign * std::ldexp(1024 + mant, exp - 25);
}

// Straight-line scaler replay.
struct ReplayScaler {
    double scale = 65536.0;
    std::uint64_t good = 0;
    void step(bool overflow) {
        if (overflow) {
            scale = std::max(scale / 2.0, 1.0 / 32.0);
            good = 0;
        } else if (++good == 2000) {
            scale *= 2.0;
            good = 0;
        }
    }
};

} // namespace

TEST_CASE("round_to_half matches the bit-level conversion") {
    Rng rng(99);
    std::vector<double> values{0.0,     -0.0,     1.0,         65504.0,      65519.99,     65520.0,
                               1e-8,    2.98e-8,  5.960464477539063e-08, 6.1e-5, -3.14159, 1.0 + 1.0 / 2048.0,
                               1.0 + 3.0 / 2048.0, 2049.0, 2051.0, std::ldexp(1.0, -25), std::ldexp(3.0, -26)};
    for (int i = 0; i < 200000; ++i) {
        const double mag = std::ldexp(0.5 + uniform01(rng), static_cast<int>(rng() % 48) - 30);
        values.push_back(rng() % 2 ? mag : -mag);
    }
    // Exact midpoints between neighbouring half values.
    for (int i = 0; i < 20000; ++i) {
        const auto h = static_cast<std::uint16_t>(rng() % 0x7bff);
        values.push_back((decode_half(h) + decode_half(static_cast<std::uint16_t>(h + 1))) / 2.0);
    }
    std::size_t mismatches = 0;
    for (double v : values) {
        const double want = decode_half(oracle_half_bits(v));
        const double got = round_to_half(v);
        if (!same_bits(want, got)) {
            ++mismatches;
            INFO("value " << v << " oracle " << want << " got " << got);
            CHECK(same_bits(want, got));
            if (mismatches > 5) {
                break;
            }
        }
    }
    CHECK(mismatches == 0);
}

TEST_CASE("emulate_half: exact values kept, overflow to infinity") {
    const PrecisionConfig cfg{WeightMode::emulated_half, 65504.0};
    const auto x = Tensor::from({5}, {0.5, -2.0, 1024.0, 65504.0, 70000.0});
    const auto y = emulate_half(x, cfg);
    CHECK(y.data()[0] == 0.5);
    CHECK(y.data()[1] == -2.0);
    CHECK(y.data()[2] == 1024.0);
    CHECK(y.data()[3] == 65504.0);
    CHECK(std::isinf(y.data()[4]));
    CHECK(x.data()[4] == 70000.0);

    const PrecisionConfig low{WeightMode::emulated_half, 1000.0};
    std::vector<double> v{999.5, 1001.0, -4096.0};
    emulate_half_inplace(v, low);
    CHECK(v[0] == 999.5);
    CHECK(std::isinf(v[1]));
    CHECK(v[2] == -std::numeric_limits<double>::infinity());
    CHECK_THROWS_AS((PrecisionConfig{WeightMode::full, 0.0}.validate()), ConfigError);
}

TEST_CASE("scaler backoff and growth") {
    LossScaler s(LossScalerConfig{});
    s.scale = 32768.0;
    CHECK(scaler_update(s, true));
    CHECK(s.scale == 16384.0);

    s.scale = 1024.0;
    for (int i = 0; i < 1999; ++i) {
        CHECK_FALSE(scaler_update(s, false));
        CHECK(s.scale == 1024.0);
    }
    scaler_update(s, false);
    CHECK(s.scale == 2048.0);
    CHECK(s.consecutive_good == 0);

    s.scale = 1.0 / 32.0;
    scaler_update(s, true);
    CHECK(s.scale == 1.0 / 32.0);
}

TEST_CASE("scaler replay on random overflow patterns") {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        LossScaler s(LossScalerConfig{});
        ReplayScaler r;
        const double p = uniform01(rng) * 0.01;
        for (int step = 0; step < 20000; ++step) {
            const bool overflow = uniform01(rng) < p;
            scaler_update(s, overflow);
            r.step(overflow);
            REQUIRE(s.consecutive_good < s.config.growth_interval);
            int e = 0;
            CHECK_MESSAGE(std::frexp(s.scale, &e) == 0.5, "scale is a power of two");
        }
        CHECK(s.scale == r.scale);
        CHECK(s.consecutive_good == r.good);
    }
}

TEST_CASE("health threshold") {
    LossScaler s(LossScalerConfig{});
    s.scale = 1.0;
    CHECK(is_healthy(s));
    s.scale = 0.5;
    CHECK_FALSE(is_healthy(s));
    s.scale = 65536.0;
    CHECK(is_healthy(s));
    bool was = false;
    for (double sc = 1.0 / 64; sc <= 65536; sc *= 2) {
        s.scale = sc;
        CHECK((!was || is_healthy(s)));
        was = is_healthy(s);
    }
}

TEST_CASE("scaled loss round trip") {
    const ModelConfig c{1, 2, 8, 10, 8, 0.0, 2, false};
    const auto params = init_parameters(c, 3);
    const std::vector<TokenId> tokens{1, 2, 3, 4, 5};
    const std::vector<TokenId> targets{2, 3, 4, 5, 6};
    auto grads_at = [&](double scale) {
        Parameters p = params.clone();
        Tape tape;
        const auto loss = cross_entropy(tape, forward(tape, c, p, tokens).logits, targets).loss;
        LossScaler s(LossScalerConfig{});
        s.scale = scale;
        tape.backward(scale_loss(tape, loss, s));
        auto g = collect_grads(p);
        CHECK_FALSE(unscale_grads(g, s).overflow_found);
        return g;
    };
    const auto plain = grads_at(1.0);
    const auto scaled = grads_at(65536.0);
    double worst = 0.0;
    for (std::size_t i = 0; i < plain.size(); ++i) {
        for (std::size_t j = 0; j < plain[i].size(); ++j) {
            worst = std::max(worst, relative_error(scaled[i][j], plain[i][j], 1e-12));
        }
    }
    CHECK(worst < 1e-6);

    GradSet bad{{1.0, 2.0}, {std::numeric_limits<double>::infinity()}};
    LossScaler s(LossScalerConfig{});
    CHECK(unscale_grads(bad, s).overflow_found);
    CHECK(bad == GradSet{{0.0, 0.0}, {0.0}});
}
