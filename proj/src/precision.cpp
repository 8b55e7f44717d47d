#include "optlab/precision.hpp"

#include <cmath>
#include <limits>

#include "optlab/errors.hpp"

namespace optlab {

void PrecisionConfig::validate() const {
    if (!(overflow_threshold > 0.0)) {
        throw ConfigError("precision: overflow_threshold must be positive");
    }
}

double round_to_half(double x) {
    if (!std::isfinite(x) || x == 0.0) {
        return x;
    }
    const double a = std::abs(x);
    // Halfway between 65504 and the next (nonexistent) step rounds to infinity.
    if (a >= 65520.0) {
        return std::copysign(std::numeric_limits<double>::infinity(), x);
    }
    int exp = 0;
    std::frexp(a, &exp);  // a = f·2^exp, f in [0.5, 1)
    const int unbiased = exp - 1;
    // 10 fraction bits for normals; fixed 2^-24 spacing below 2^-14.
    const int quantum_exp = unbiased < -14 ? -24 : unbiased - 10;
    const double scaled = std::ldexp(a, -quantum_exp);
    const double rounded = std::nearbyint(scaled);  // default mode: ties to even
    return std::copysign(std::ldexp(rounded, quantum_exp), x);
}

void emulate_half_inplace(std::span<double> values, const PrecisionConfig& cfg) {
    for (double& v : values) {
        v = round_to_half(v);
        if (std::abs(v) > cfg.overflow_threshold) {
            v = std::copysign(std::numeric_limits<double>::infinity(), v);
        }
    }
}

Tensor emulate_half(const Tensor& x, const PrecisionConfig& cfg) {
    Tensor out = x.clone();
    out.clear_grad();
    emulate_half_inplace(out.data(), cfg);
    return out;
}

void LossScalerConfig::validate() const {
    if (!(initial_scale > 0.0) || !(min_scale > 0.0) || initial_scale < min_scale) {
        throw ConfigError("loss_scale: need initial_scale >= min_scale > 0");
    }
    if (growth_interval == 0) {
        throw ConfigError("loss_scale: growth_interval must be positive");
    }
    if (!(growth_factor > 1.0) || !(backoff_factor > 0.0 && backoff_factor < 1.0)) {
        throw ConfigError("loss_scale: need growth_factor > 1 and backoff_factor in (0, 1)");
    }
    if (!(healthy_threshold > 0.0)) {
        throw ConfigError("loss_scale: healthy_threshold must be positive");
    }
}

Tensor scale_loss(Tape& tape, const Tensor& loss, const LossScaler& scaler) {
    return scale(tape, loss, scaler.scale);
}

UnscaleResult unscale_grads(GradSet& grads, const LossScaler& scaler) {
    UnscaleResult result;
    for (auto& g : grads) {
        for (double& v : g) {
            v /= scaler.scale;
            if (!std::isfinite(v)) {
                result.overflow_found = true;
            }
        }
    }
    if (result.overflow_found) {
        for (auto& g : grads) {
            std::fill(g.begin(), g.end(), 0.0);
        }
    }
    return result;
}

bool scaler_update(LossScaler& scaler, bool overflow_found) {
    const auto& cfg = scaler.config;
    if (overflow_found) {
        scaler.scale = std::max(scaler.scale * cfg.backoff_factor, cfg.min_scale);
        scaler.consecutive_good = 0;
        return true;
    }
    scaler.consecutive_good += 1;
    if (scaler.consecutive_good >= cfg.growth_interval) {
        scaler.scale *= cfg.growth_factor;
        scaler.consecutive_good = 0;
    }
    return false;
}

bool is_healthy(const LossScaler& scaler) { return scaler.scale >= scaler.config.healthy_threshold; }

} // namespace optlab
