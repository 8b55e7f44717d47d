#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "optlab/model.hpp"

namespace optlab {

/// One gradient buffer per parameter, in Parameters order.
using GradSet = std::vector<std::vector<double>>;

GradSet zero_grads_like(const Parameters& params);
// Copies each parameter's gradient slot (zeros where none was accumulated).
GradSet collect_grads(const Parameters& params);
bool all_finite(const GradSet& grads);

// ---- learning-rate schedule ---------------------------------------------------

enum class WarmupUnit { steps, tokens };

/// Multiplies the schedule from `from_step` onward. Factors compound.
struct ScheduleOverride {
    std::uint64_t from_step = 0;
    double factor = 1.0;

    bool operator==(const ScheduleOverride&) const = default;
};

struct ScheduleConfig {
    double max_lr = 6.0e-4;
    WarmupUnit warmup_unit = WarmupUnit::tokens;
    double warmup = 375e6;
    double tokens_per_step = 0.5e6;
    double decay_horizon_tokens = 300e9;
    double end_factor = 0.1;
    std::vector<ScheduleOverride> overrides;

    double warmup_end_tokens() const;
    void validate() const;
    // Keeps overrides strictly increasing; a second override at the same step
    // folds into the existing factor.
    void add_override(std::uint64_t from_step, double factor);

    bool operator==(const ScheduleConfig&) const = default;
};

/// Linear 0→max over warmup, linear max→end_factor·max up to the decay
/// horizon (in tokens), constant afterwards, times every override in effect.
double lr_at(const ScheduleConfig& schedule, std::uint64_t step, double tokens_seen);

// ---- AdamW --------------------------------------------------------------------

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.1;

    void validate() const;
    bool operator==(const AdamWConfig&) const = default;
};

/// Full-precision moments, independent of the weight precision mode.
struct OptimizerState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    std::uint64_t t = 0;

    static OptimizerState zeros_like(const Parameters& params);
    bool operator==(const OptimizerState&) const = default;
};

/// Bias-corrected Adam plus decoupled decay p ← p − lr·wd·p on decaying
/// parameters (weights and embeddings; not biases or norm parameters).
/// Throws ContractError on a non-finite gradient.
void adamw_step(Parameters& params, const GradSet& grads, OptimizerState& state, double lr,
                const AdamWConfig& cfg);

// Plain p ← p − lr·g; kept for the mid-flight optimizer-switch experiment.
void sgd_step(Parameters& params, const GradSet& grads, double lr);

// ---- clipping and predivide ---------------------------------------------------

struct ClipConfig {
    double max_norm = 1.0;

    void validate() const;
    bool operator==(const ClipConfig&) const = default;
};

double global_norm(const GradSet& grads);

/// Scales every gradient by max_norm/norm when the global L2 norm exceeds
/// max_norm. Returns the pre-clip norm.
double clip_grad_norm(GradSet& grads, const ClipConfig& cfg);

struct PredivideConfig {
    std::size_t world_size = 1;

    void validate() const;
    bool operator==(const PredivideConfig&) const = default;
};

struct PredivideResult {
    GradSet mean;
    double max_intermediate = 0.0;  // largest magnitude seen while reducing
};

/// Divides each worker's gradients by √N, sums them in worker order, then
/// divides by √N again.
PredivideResult predivide_reduce(std::span<const GradSet> per_worker, const PredivideConfig& cfg);

} // namespace optlab
