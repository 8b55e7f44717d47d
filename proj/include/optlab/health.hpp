#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>

#include "optlab/trainer_state.hpp"

namespace optlab {

struct HealthPolicy {
    double scalar_floor = 1.0;
    std::size_t trend_window = 20;
    double slope_threshold = 0.0;
    double loss_margin = 0.5;
    std::size_t loss_patience = 5;

    void validate() const;
    bool operator==(const HealthPolicy&) const = default;
};

enum class DivergenceReason { none, scaler_crash, non_finite_loss, loss_spike };

std::string_view reason_name(DivergenceReason reason);

struct Verdict {
    DivergenceReason reason = DivergenceReason::none;
    std::uint64_t at_step = 0;

    bool diverged() const { return reason != DivergenceReason::none; }
};

/// First record (in order) where the loss scale sits below the floor, the loss
/// is non-finite, or the loss has stayed above best-so-far + margin for
/// `loss_patience` consecutive records.
Verdict detect_divergence(std::span<const HealthRecord> history, const HealthPolicy& policy);

/// Least-squares slope of act_norm against step over the first `window`
/// records after `after_step`. Empty when fewer than two records qualify.
std::optional<double> activation_trend(std::span<const HealthRecord> history, std::uint64_t after_step,
                                       std::size_t window);

bool restart_eligible(const CheckpointRef& ckpt, std::span<const HealthRecord> history,
                      const HealthPolicy& policy);

/// Latest checkpoint whose snapshot scale is at least the floor and whose
/// following activation norms do not trend upward. Throws DivergenceError
/// when none qualifies.
CheckpointRef select_restart_checkpoint(std::span<const CheckpointRef> checkpoints,
                                        std::span<const HealthRecord> history, const HealthPolicy& policy);

} // namespace optlab
