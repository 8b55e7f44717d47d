#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "optlab/trainer.hpp"

namespace optlab {

enum class FaultKind { crash, nan_grad, scaler_reset, grad_bomb };

std::string_view fault_kind_name(FaultKind kind);
FaultKind parse_fault_kind(std::string_view name);

/// Fires at the step boundary where TrainerState::step == step, i.e. it
/// affects the step that produces health record step + 1.
struct FaultEvent {
    std::uint64_t step = 0;
    FaultKind kind = FaultKind::crash;
    std::uint64_t duration = 1;  // grad-bomb only: consecutive poisoned steps

    bool operator==(const FaultEvent&) const = default;
};

/// One fault per line: "<step> <kind> [duration]"; '#' starts a comment.
/// Steps must increase strictly. Throws ConfigError naming the line.
std::vector<FaultEvent> parse_fault_schedule(std::string_view text);
std::vector<FaultEvent> load_fault_schedule(const std::filesystem::path& path);

// Thrown from a hook to emulate the training process dying.
class SimulatedCrash : public std::runtime_error {
public:
    explicit SimulatedCrash(std::uint64_t step)
        : std::runtime_error("simulated crash at step " + std::to_string(step)), step_(step) {}
    std::uint64_t step() const { return step_; }

private:
    std::uint64_t step_;
};

/// Lives in the harness, outside any Trainer, and survives crashes. Each
/// fault fires once; a grad bomb stays armed for `duration` executed steps
/// and is disarmed by a divergence restart.
class FaultInjector {
public:
    explicit FaultInjector(std::vector<FaultEvent> schedule, std::shared_ptr<Logbook> logbook = nullptr);

    TrainingHooks hooks();
    const std::vector<FaultEvent>& schedule() const { return schedule_; }
    std::size_t fired() const { return next_; }

private:
    void before_step(TrainerState& state);
    void after_backward(TrainerState& state, GradSet& grads);
    void log(const FaultEvent& e, std::uint64_t at_step);

    std::vector<FaultEvent> schedule_;
    std::shared_ptr<Logbook> logbook_;
    std::size_t next_ = 0;
    bool poison_nan_ = false;
    std::uint64_t bomb_remaining_ = 0;
};

struct FaultRunResult {
    TrainerState state;
    std::size_t crashes = 0;
    std::size_t restarts = 0;
    bool stopped = false;
};

/// Runs to the token budget, auto-resuming from the latest checkpoint after
/// every simulated crash. config.run_dir must be set.
FaultRunResult run_with_faults(const TrainConfig& config, const TokenCorpus& corpus,
                               std::vector<FaultEvent> schedule, std::shared_ptr<Logbook> logbook = nullptr);

} // namespace optlab
