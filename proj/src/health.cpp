#include "optlab/health.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "optlab/errors.hpp"

namespace optlab {

void HealthPolicy::validate() const {
    if (trend_window < 2) {
        throw ConfigError("health: trend_window must be at least 2");
    }
    if (!(loss_margin > 0.0)) {
        throw ConfigError("health: loss_margin must be positive");
    }
    if (loss_patience == 0) {
        throw ConfigError("health: loss_patience must be positive");
    }
}

std::string_view reason_name(DivergenceReason reason) {
    switch (reason) {
    case DivergenceReason::none:
        return "healthy";
    case DivergenceReason::scaler_crash:
        return "scaler-crash";
    case DivergenceReason::non_finite_loss:
        return "non-finite-loss";
    case DivergenceReason::loss_spike:
        return "loss";
    }
    return "unknown";
}

Verdict detect_divergence(std::span<const HealthRecord> history, const HealthPolicy& policy) {
    if (history.empty()) {
        throw ContractError("detect_divergence: empty history");
    }
    double best = std::numeric_limits<double>::infinity();
    std::size_t run = 0;
    for (const auto& r : history) {
        if (r.loss_scale < policy.scalar_floor) {
            return {DivergenceReason::scaler_crash, r.step};
        }
        if (!std::isfinite(r.train_loss)) {
            return {DivergenceReason::non_finite_loss, r.step};
        }
        if (r.train_loss > best + policy.loss_margin) {
            if (++run >= policy.loss_patience) {
                return {DivergenceReason::loss_spike, r.step};
            }
        } else {
            run = 0;
        }
        best = std::min(best, r.train_loss);
    }
    return {};
}

std::optional<double> activation_trend(std::span<const HealthRecord> history, std::uint64_t after_step,
                                       std::size_t window) {
    std::vector<const HealthRecord*> used;
    for (const auto& r : history) {
        if (used.size() == window) {
            break;
        }
        if (r.step > after_step) {
            used.push_back(&r);
        }
    }
    if (used.size() < 2) {
        return std::nullopt;
    }
    // Centered in x and shifted by the first y; flat norms give exactly 0.
    double mx = 0.0;
    for (const auto* r : used) {
        mx += static_cast<double>(r->step - after_step);
    }
    mx /= static_cast<double>(used.size());
    const double y0 = used.front()->act_norm;
    double sxx = 0.0;
    double sxy = 0.0;
    for (const auto* r : used) {
        const double dx = static_cast<double>(r->step - after_step) - mx;
        sxx += dx * dx;
        sxy += dx * (r->act_norm - y0);
    }
    if (sxx == 0.0) {
        return std::nullopt;
    }
    return sxy / sxx;
}

bool restart_eligible(const CheckpointRef& ckpt, std::span<const HealthRecord> history,
                      const HealthPolicy& policy) {
    if (!(ckpt.scale >= policy.scalar_floor)) {
        return false;
    }
    const auto slope = activation_trend(history, ckpt.step, policy.trend_window);
    return slope.has_value() && *slope <= policy.slope_threshold;
}

CheckpointRef select_restart_checkpoint(std::span<const CheckpointRef> checkpoints,
                                        std::span<const HealthRecord> history, const HealthPolicy& policy) {
    if (checkpoints.empty()) {
        throw DivergenceError("no checkpoint available to restart from");
    }
    const CheckpointRef* chosen = nullptr;
    for (const auto& c : checkpoints) {
        if (restart_eligible(c, history, policy) && (chosen == nullptr || c.step > chosen->step)) {
            chosen = &c;
        }
    }
    if (chosen == nullptr) {
        throw DivergenceError("unrecoverable divergence: none of " + std::to_string(checkpoints.size()) +
                              " checkpoints has a healthy loss scale followed by non-increasing activation norms");
    }
    return *chosen;
}

} // namespace optlab
