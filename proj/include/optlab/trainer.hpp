#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "optlab/checkpoint.hpp"
#include "optlab/health.hpp"
#include "optlab/logbook.hpp"
#include "optlab/trainer_state.hpp"

namespace optlab {

enum class OptimizerKind { adamw, sgd };

/// What happens after a divergence: roll back, scale the remaining LR by
/// lr_factor (compounding across events), optionally tighten clipping.
struct RecoveryPolicy {
    double lr_factor = 2.0 / 3.0;
    bool tighten_clip = false;
    double tightened_clip = 0.3;
    std::size_t max_restarts = 8;

    void validate() const;
    bool operator==(const RecoveryPolicy&) const = default;
};

struct TrainConfig {
    ModelConfig model;
    ScheduleConfig schedule;
    AdamWConfig adamw;
    ClipConfig clip;
    PredivideConfig predivide;
    PrecisionConfig precision;
    LossScalerConfig scaler;
    bool loss_scaling = true;
    HealthPolicy health;
    RecoveryPolicy recovery;
    OptimizerKind optimizer = OptimizerKind::adamw;

    std::size_t seq_len = 32;
    std::size_t micro_batch = 4;  // sequences per simulated worker
    std::uint64_t token_budget = 0;
    std::uint64_t checkpoint_every = 100;
    std::uint64_t validate_every = 50;
    std::size_t validation_windows = 8;

    std::uint64_t init_seed = 1;
    std::uint64_t data_seed = 2;
    std::uint64_t dropout_seed = 3;

    std::filesystem::path run_dir;       // empty keeps checkpoints in memory
    std::filesystem::path control_file;  // empty disables the control channel

    // Tokens consumed by one optimizer step across all simulated workers.
    std::uint64_t batch_tokens() const { return seq_len * micro_batch * predivide.world_size; }
    // Schedule with tokens_per_step pinned to batch_tokens().
    ScheduleConfig effective_schedule() const;
    void validate() const;
    bool operator==(const TrainConfig&) const = default;
};

struct TokenCorpus {
    std::vector<TokenId> train;
    std::vector<TokenId> validation;

    // Holds out the trailing `fraction` of `tokens` (at least one window's worth
    // when `min_validation` is given).
    static TokenCorpus split(std::vector<TokenId> tokens, double fraction, std::size_t min_validation = 0);
};

/// Harness callbacks. after_backward sees worker 0's still-scaled gradients.
struct TrainingHooks {
    std::function<void(TrainerState&)> before_step;
    std::function<void(TrainerState&, GradSet&)> after_backward;
    std::function<void(TrainerState&)> on_restart;
};

struct StepOutcome {
    HealthRecord record;
    double lr = 0.0;
    bool skipped = false;
};

struct TrainResult {
    std::uint64_t steps = 0;
    std::uint64_t tokens_seen = 0;
    std::size_t restarts = 0;
    bool stopped = false;  // halted by a control-file stop before the budget
};

class Trainer {
public:
    /// Fresh run: initializes parameters, writes the header event (with
    /// `header` as the config echo when given) and a step-0 checkpoint.
    Trainer(TrainConfig config, TokenCorpus corpus, std::shared_ptr<Logbook> logbook = nullptr,
            std::optional<nlohmann::json> header = std::nullopt);

    /// Continues from a checkpoint file. Throws ConfigError when the stored
    /// model config differs from config.model.
    static Trainer resume(TrainConfig config, TokenCorpus corpus, const std::filesystem::path& checkpoint,
                          std::shared_ptr<Logbook> logbook = nullptr);

    void set_hooks(TrainingHooks hooks) { hooks_ = std::move(hooks); }

    /// Runs until the token budget is met or a stop command arrives, handling
    /// control commands, checkpoints, divergence detection and recovery.
    /// Throws DivergenceError when no checkpoint qualifies for a restart.
    TrainResult run();

    // One optimizer step (or skipped step), without control or recovery logic.
    StepOutcome step();

    // Reads any new control-file lines and applies them. Returns false on stop.
    bool apply_control();

    void checkpoint_now();
    bool budget_reached() const { return state_.tokens_seen >= config_.token_budget; }

    const TrainerState& state() const { return state_; }
    TrainerState& state() { return state_; }
    const TrainConfig& config() const { return config_; }
    Logbook& logbook() { return *logbook_; }
    const std::shared_ptr<Logbook>& logbook_ptr() const { return logbook_; }
    std::size_t restarts() const { return restarts_; }

    double current_lr() const;
    double validation_loss() const;
    double activation_norm() const;

private:
    struct Bare {};
    Trainer(TrainConfig config, TokenCorpus corpus, std::shared_ptr<Logbook> logbook, Bare);

    void recover(const Verdict& verdict);
    void restore(std::uint64_t step);
    Checkpoint snapshot() const;
    std::filesystem::path checkpoint_path(std::uint64_t step) const;

    TrainConfig config_;
    TokenCorpus corpus_;
    std::shared_ptr<Logbook> logbook_;
    TrainerState state_;
    TrainingHooks hooks_;
    std::map<std::uint64_t, std::vector<std::uint8_t>> memory_checkpoints_;
    std::size_t restarts_ = 0;
    bool stop_requested_ = false;
};

// Path named by run_dir/LATEST, if any.
std::optional<std::filesystem::path> latest_checkpoint(const std::filesystem::path& run_dir);

/// LR and loss scale at every step event, recomputed from the schedule, the
/// override lists carried by override/restart/resume events, overflow flags
/// and scaler resets. Used to check that a logbook is replayable.
struct ReplayPoint {
    std::uint64_t step = 0;
    double lr = 0.0;
    double scale = 0.0;
};
std::vector<ReplayPoint> replay_logbook(const TrainConfig& config, std::span<const nlohmann::json> events);

/// Re-checks every restart event against the health rule using only logged
/// checkpoint scales and step-event activation norms. Returns one line per
/// violation; empty means every restart is justified.
std::vector<std::string> audit_restarts(std::span<const nlohmann::json> events, const HealthPolicy& policy);

} // namespace optlab
