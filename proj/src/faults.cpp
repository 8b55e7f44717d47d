#include "optlab/faults.hpp"

#include <fstream>
#include <limits>
#include <sstream>

#include "optlab/errors.hpp"

namespace optlab {

std::string_view fault_kind_name(FaultKind kind) {
    switch (kind) {
    case FaultKind::crash:
        return "crash";
    case FaultKind::nan_grad:
        return "nan-grad";
    case FaultKind::scaler_reset:
        return "scaler-reset";
    case FaultKind::grad_bomb:
        return "grad-bomb";
    }
    return "?";
}

FaultKind parse_fault_kind(std::string_view name) {
    for (auto k : {FaultKind::crash, FaultKind::nan_grad, FaultKind::scaler_reset, FaultKind::grad_bomb}) {
        if (fault_kind_name(k) == name) {
            return k;
        }
    }
    throw ConfigError("unknown fault kind '" + std::string(name) + "'");
}

std::vector<FaultEvent> parse_fault_schedule(std::string_view text) {
    std::vector<FaultEvent> out;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) {
            line.resize(hash);
        }
        std::istringstream words(line);
        std::string step_word;
        if (!(words >> step_word)) {
            continue;
        }
        const std::string where = "fault schedule line " + std::to_string(line_no) + ": ";
        FaultEvent e;
        std::string kind;
        try {
            std::size_t used = 0;
            e.step = std::stoull(step_word, &used);
            if (used != step_word.size() || step_word.front() == '-' || step_word.front() == '+') {
                throw std::invalid_argument(step_word);
            }
        } catch (const std::exception&) {
            throw ConfigError(where + "bad step '" + step_word + "'");
        }
        if (!(words >> kind)) {
            throw ConfigError(where + "missing fault kind");
        }
        try {
            e.kind = parse_fault_kind(kind);
        } catch (const ConfigError& err) {
            throw ConfigError(where + err.what());
        }
        if (e.kind == FaultKind::grad_bomb) {
            if (!(words >> e.duration) || e.duration == 0) {
                throw ConfigError(where + "grad-bomb needs a positive duration");
            }
        }
        std::string extra;
        if (words >> extra) {
            throw ConfigError(where + "unexpected '" + extra + "'");
        }
        if (!out.empty() && e.step <= out.back().step) {
            throw ConfigError(where + "steps must increase strictly");
        }
        out.push_back(e);
    }
    return out;
}

std::vector<FaultEvent> load_fault_schedule(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw InputError("cannot read fault schedule " + path.string());
    }
    std::stringstream buffer;
    buffer << in.rdbuf();
    return parse_fault_schedule(buffer.str());
}

FaultInjector::FaultInjector(std::vector<FaultEvent> schedule, std::shared_ptr<Logbook> logbook)
    : schedule_(std::move(schedule)), logbook_(std::move(logbook)) {}

TrainingHooks FaultInjector::hooks() {
    TrainingHooks h;
    h.before_step = [this](TrainerState& s) { before_step(s); };
    h.after_backward = [this](TrainerState& s, GradSet& g) { after_backward(s, g); };
    h.on_restart = [this](TrainerState&) { bomb_remaining_ = 0; };
    return h;
}

void FaultInjector::log(const FaultEvent& e, std::uint64_t at_step) {
    if (logbook_) {
        nlohmann::json payload = {{"fault", fault_kind_name(e.kind)}, {"scheduled_step", e.step}, {"step", at_step}};
        if (e.kind == FaultKind::grad_bomb) {
            payload["duration"] = e.duration;
        }
        logbook_->append("fault", std::move(payload));
    }
}

void FaultInjector::before_step(TrainerState& state) {
    poison_nan_ = false;
    while (next_ < schedule_.size() && schedule_[next_].step <= state.step) {
        const FaultEvent e = schedule_[next_++];
        if (e.step < state.step) {
            continue;  // passed over while resuming from a later checkpoint
        }
        log(e, state.step);
        switch (e.kind) {
        case FaultKind::crash:
            throw SimulatedCrash(state.step);
        case FaultKind::nan_grad:
            poison_nan_ = true;
            break;
        case FaultKind::scaler_reset:
            state.scaler.reset();
            break;
        case FaultKind::grad_bomb:
            bomb_remaining_ = e.duration;
            break;
        }
    }
}

void FaultInjector::after_backward(TrainerState&, GradSet& grads) {
    if (poison_nan_ && !grads.empty() && !grads.front().empty()) {
        grads.front().front() = std::numeric_limits<double>::quiet_NaN();
        poison_nan_ = false;
    }
    if (bomb_remaining_ > 0) {
        --bomb_remaining_;
        for (auto& buf : grads) {
            std::fill(buf.begin(), buf.end(), std::numeric_limits<double>::infinity());
        }
    }
}

FaultRunResult run_with_faults(const TrainConfig& config, const TokenCorpus& corpus,
                               std::vector<FaultEvent> schedule, std::shared_ptr<Logbook> logbook) {
    if (config.run_dir.empty()) {
        throw ConfigError("fault injection needs a run_dir for crash recovery");
    }
    if (!logbook) {
        logbook = std::make_shared<Logbook>();
    }
    FaultInjector injector(std::move(schedule), logbook);
    FaultRunResult result;
    std::unique_ptr<Trainer> trainer = std::make_unique<Trainer>(config, corpus, logbook);
    for (;;) {
        trainer->set_hooks(injector.hooks());
        try {
            const auto r = trainer->run();
            result.restarts += r.restarts;
            result.stopped = r.stopped;
            break;
        } catch (const SimulatedCrash&) {
            result.restarts += trainer->restarts();
            ++result.crashes;
            const auto latest = latest_checkpoint(config.run_dir);
            if (!latest) {
                throw CheckpointError("crash with no checkpoint to resume from");
            }
            trainer = std::make_unique<Trainer>(Trainer::resume(config, corpus, *latest, logbook));
        }
    }
    result.state = trainer->state();
    return result;
}

} // namespace optlab
