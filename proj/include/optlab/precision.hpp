#pragma once

#include <cstdint>

#include "optlab/optim.hpp"
#include "optlab/tensor.hpp"

namespace optlab {

enum class WeightMode { full, emulated_half };

struct PrecisionConfig {
    WeightMode weight_mode = WeightMode::full;
    // Values whose rounded magnitude exceeds this become ±infinity.
    double overflow_threshold = 65504.0;

    void validate() const;
    bool operator==(const PrecisionConfig&) const = default;
};

/// Nearest IEEE binary16 value (ties to even), returned as a double. Handles
/// subnormals; magnitudes that round past 65504 become infinity.
double round_to_half(double x);

// Element-wise round_to_half plus the configured overflow threshold.
Tensor emulate_half(const Tensor& x, const PrecisionConfig& cfg);
void emulate_half_inplace(std::span<double> values, const PrecisionConfig& cfg);

struct LossScalerConfig {
    double initial_scale = 65536.0;  // 2^16
    std::uint64_t growth_interval = 2000;
    double growth_factor = 2.0;
    double backoff_factor = 0.5;
    double min_scale = 1.0 / 32.0;  // 2^-5
    double healthy_threshold = 1.0;

    void validate() const;
    bool operator==(const LossScalerConfig&) const = default;
};

/// Dynamic loss scaler: halve on overflow, double after growth_interval
/// consecutive clean steps.
struct LossScaler {
    LossScalerConfig config;
    double scale = 65536.0;
    std::uint64_t consecutive_good = 0;

    LossScaler() = default;
    explicit LossScaler(LossScalerConfig cfg) : config(cfg), scale(cfg.initial_scale) {}

    void reset() {
        scale = config.initial_scale;
        consecutive_good = 0;
    }
    bool operator==(const LossScaler&) const = default;
};

Tensor scale_loss(Tape& tape, const Tensor& loss, const LossScaler& scaler);

struct UnscaleResult {
    bool overflow_found = false;
};

/// Divides every gradient by the current scale. On any non-finite entry the
/// gradients are discarded (zeroed) and overflow_found is set.
UnscaleResult unscale_grads(GradSet& grads, const LossScaler& scaler);

// Returns true when the step must be skipped.
bool scaler_update(LossScaler& scaler, bool overflow_found);

bool is_healthy(const LossScaler& scaler);

} // namespace optlab
