#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "optlab/model.hpp"
#include "optlab/optim.hpp"
#include "optlab/precision.hpp"
#include "optlab/random.hpp"

namespace optlab {

/// Per-step telemetry. val_loss is NaN on steps without validation and
/// grad_norm is NaN on skipped (overflow) steps.
struct HealthRecord {
    std::uint64_t step = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double loss_scale = 0.0;
    double grad_norm = 0.0;
    double act_norm = 0.0;
};

struct CheckpointRef {
    std::uint64_t step = 0;
    double scale = 0.0;  // loss scale captured in the snapshot
};

/// Everything needed to resume a run bit-exactly.
struct TrainerState {
    std::uint64_t step = 0;
    std::uint64_t tokens_seen = 0;
    Parameters params;
    OptimizerState optimizer;
    LossScaler scaler;
    Rng data_rng;
    ClipConfig clip;
    std::vector<ScheduleOverride> overrides;
    std::vector<HealthRecord> health;
    std::vector<CheckpointRef> checkpoints;
    std::uint64_t control_cursor = 0;
};

} // namespace optlab
