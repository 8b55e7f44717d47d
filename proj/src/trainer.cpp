#include "optlab/trainer.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "optlab/config.hpp"
#include "optlab/errors.hpp"

namespace optlab {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

nlohmann::json overrides_json(std::span<const ScheduleOverride> overrides) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& o : overrides) {
        out.push_back({o.from_step, o.factor});
    }
    return out;
}

std::vector<ScheduleOverride> overrides_from_json(const nlohmann::json& j) {
    std::vector<ScheduleOverride> out;
    for (const auto& item : j) {
        out.push_back({item.at(0).get<std::uint64_t>(), item.at(1).get<double>()});
    }
    return out;
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::trunc);
        out << text;
        if (!out) {
            throw CheckpointError("cannot write " + tmp.string());
        }
    }
    std::filesystem::rename(tmp, path);
}

} // namespace

// ---- configuration ------------------------------------------------------------

void RecoveryPolicy::validate() const {
    if (!(lr_factor > 0.0 && lr_factor <= 1.0)) {
        throw ConfigError("recovery: lr_factor must lie in (0, 1]");
    }
    if (!(tightened_clip > 0.0)) {
        throw ConfigError("recovery: tightened_clip must be positive");
    }
}

ScheduleConfig TrainConfig::effective_schedule() const {
    ScheduleConfig s = schedule;
    s.tokens_per_step = static_cast<double>(batch_tokens());
    return s;
}

void TrainConfig::validate() const {
    model.validate();
    if (seq_len == 0 || seq_len > model.max_seq_len) {
        throw ConfigError("train: seq_len must lie in [1, model.max_seq_len]");
    }
    if (micro_batch == 0) {
        throw ConfigError("train: micro_batch must be positive");
    }
    if (token_budget == 0) {
        throw ConfigError("train: token_budget must be positive");
    }
    if (checkpoint_every == 0) {
        throw ConfigError("train: checkpoint_every must be positive");
    }
    effective_schedule().validate();
    adamw.validate();
    clip.validate();
    predivide.validate();
    precision.validate();
    scaler.validate();
    health.validate();
    recovery.validate();
}

TokenCorpus TokenCorpus::split(std::vector<TokenId> tokens, double fraction, std::size_t min_validation) {
    if (!(fraction >= 0.0 && fraction < 1.0)) {
        throw ConfigError("validation fraction must lie in [0, 1)");
    }
    std::size_t n_val = static_cast<std::size_t>(std::ceil(static_cast<double>(tokens.size()) * fraction));
    n_val = std::max(n_val, min_validation);
    if (n_val >= tokens.size()) {
        throw InputError("corpus too small to hold out a validation split");
    }
    TokenCorpus c;
    const auto cut = tokens.end() - static_cast<std::ptrdiff_t>(n_val);
    c.validation.assign(cut, tokens.end());
    tokens.erase(cut, tokens.end());
    c.train = std::move(tokens);
    return c;
}

// ---- construction ---------------------------------------------------------------

Trainer::Trainer(TrainConfig config, TokenCorpus corpus, std::shared_ptr<Logbook> logbook, Bare)
    : config_(std::move(config)), corpus_(std::move(corpus)), logbook_(std::move(logbook)) {
    config_.validate();
    if (corpus_.train.size() <= config_.seq_len) {
        throw InputError("training split must hold more than seq_len tokens");
    }
    for (TokenId t : corpus_.train) {
        if (t >= config_.model.vocab_size) {
            throw InputError("corpus token id " + std::to_string(t) + " exceeds the model vocabulary");
        }
    }
    if (!logbook_) {
        logbook_ = std::make_shared<Logbook>();
    }
    if (!config_.run_dir.empty()) {
        std::filesystem::create_directories(config_.run_dir);
    }
}

Trainer::Trainer(TrainConfig config, TokenCorpus corpus, std::shared_ptr<Logbook> logbook,
                 std::optional<nlohmann::json> header)
    : Trainer(std::move(config), std::move(corpus), std::move(logbook), Bare{}) {
    state_.params = init_parameters(config_.model, config_.init_seed);
    state_.optimizer = OptimizerState::zeros_like(state_.params);
    state_.scaler = LossScaler(config_.scaler);
    state_.data_rng = Rng(derive_seed({config_.data_seed}));
    state_.clip = config_.clip;
    state_.overrides = config_.schedule.overrides;
    logbook_->append("header", {{"config", header ? *header : train_config_to_json(config_)},
                                {"parameters", state_.params.numel()}});
    checkpoint_now();
}

Trainer Trainer::resume(TrainConfig config, TokenCorpus corpus, const std::filesystem::path& checkpoint,
                        std::shared_ptr<Logbook> logbook) {
    Trainer t(std::move(config), std::move(corpus), std::move(logbook), Bare{});
    auto ckpt = load_checkpoint(checkpoint, &t.config_.model);
    t.state_ = std::move(ckpt.state);
    t.logbook_->append("resume", {{"checkpoint_step", t.state_.step},
                                  {"path", checkpoint.string()},
                                  {"scale", t.state_.scaler.scale},
                                  {"consecutive_good", t.state_.scaler.consecutive_good},
                                  {"overrides", overrides_json(t.state_.overrides)}});
    return t;
}

// ---- measurements -----------------------------------------------------------------

double Trainer::current_lr() const {
    ScheduleConfig s = config_.effective_schedule();
    s.overrides = state_.overrides;
    return lr_at(s, state_.step, static_cast<double>(state_.tokens_seen));
}

double Trainer::activation_norm() const {
    const std::size_t n = std::min(config_.seq_len, corpus_.train.size());
    const std::span<const TokenId> probe(corpus_.train.data(), n);
    Tape tape(false);
    const auto fr = forward(tape, config_.model, state_.params, probe);
    const std::size_t d = fr.final_hidden.cols();
    const auto h = fr.final_hidden.data();
    double total = 0.0;
    for (std::size_t r = 0; r < fr.final_hidden.rows(); ++r) {
        double sq = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            sq += h[r * d + c] * h[r * d + c];
        }
        total += std::sqrt(sq);
    }
    return total / static_cast<double>(fr.final_hidden.rows());
}

double Trainer::validation_loss() const {
    const std::size_t T = config_.seq_len;
    const auto& val = corpus_.validation;
    if (val.size() < T + 1) {
        return kNaN;
    }
    const std::size_t windows = std::min(config_.validation_windows, (val.size() - 1) / T);
    if (windows == 0) {
        return kNaN;
    }
    std::vector<TokenId> inputs;
    std::vector<TokenId> targets;
    for (std::size_t w = 0; w < windows; ++w) {
        inputs.insert(inputs.end(), val.begin() + static_cast<std::ptrdiff_t>(w * T),
                      val.begin() + static_cast<std::ptrdiff_t>(w * T + T));
        targets.insert(targets.end(), val.begin() + static_cast<std::ptrdiff_t>(w * T + 1),
                       val.begin() + static_cast<std::ptrdiff_t>(w * T + T + 1));
    }
    Tape tape(false);
    const auto fr = forward(tape, config_.model, state_.params, inputs, windows);
    return cross_entropy(tape, fr.logits, targets).loss.item();
}

// ---- one step -------------------------------------------------------------------------

StepOutcome Trainer::step() {
    auto& s = state_;
    const std::size_t T = config_.seq_len;
    const std::size_t B = config_.micro_batch;
    const std::size_t workers = config_.predivide.world_size;
    const bool emulated = config_.precision.weight_mode == WeightMode::emulated_half;

    Parameters half;
    if (emulated) {
        half = s.params.clone();
        for (auto& p : half) {
            emulate_half_inplace(p.value.data(), config_.precision);
        }
    }
    Parameters& work = emulated ? half : s.params;

    const std::uint64_t starts = corpus_.train.size() - T;
    std::vector<TokenId> inputs(B * T);
    std::vector<TokenId> targets(B * T);
    std::vector<GradSet> per_worker;
    per_worker.reserve(workers);
    double loss_sum = 0.0;
    bool overflow = false;

    for (std::size_t w = 0; w < workers; ++w) {
        for (std::size_t b = 0; b < B; ++b) {
            const std::size_t off = static_cast<std::size_t>(s.data_rng() % starts);
            std::copy_n(corpus_.train.begin() + static_cast<std::ptrdiff_t>(off), T,
                        inputs.begin() + static_cast<std::ptrdiff_t>(b * T));
            std::copy_n(corpus_.train.begin() + static_cast<std::ptrdiff_t>(off + 1), T,
                        targets.begin() + static_cast<std::ptrdiff_t>(b * T));
        }
        work.zero_grads();
        Tape tape;
        const ForwardOptions opts{true, config_.dropout_seed, s.step, w};
        const auto fr = forward(tape, config_.model, work, inputs, B, opts);
        const auto ce = cross_entropy(tape, fr.logits, targets);
        loss_sum += ce.loss.item();
        tape.backward(config_.loss_scaling ? scale_loss(tape, ce.loss, s.scaler) : ce.loss);

        GradSet g = collect_grads(work);
        if (emulated) {
            for (auto& buf : g) {
                emulate_half_inplace(buf, config_.precision);
            }
        }
        if (w == 0 && hooks_.after_backward) {
            hooks_.after_backward(s, g);
        }
        if (config_.loss_scaling) {
            overflow = unscale_grads(g, s.scaler).overflow_found || overflow;
        } else {
            overflow = overflow || !all_finite(g);
        }
        per_worker.push_back(std::move(g));
    }
    work.zero_grads();

    StepOutcome out;
    out.lr = current_lr();
    out.skipped = config_.loss_scaling ? scaler_update(s.scaler, overflow) : overflow;
    double grad_norm = kNaN;
    if (!out.skipped) {
        GradSet g = predivide_reduce(per_worker, config_.predivide).mean;
        grad_norm = clip_grad_norm(g, s.clip);
        if (config_.optimizer == OptimizerKind::adamw) {
            adamw_step(s.params, g, s.optimizer, out.lr, config_.adamw);
        } else {
            sgd_step(s.params, g, out.lr);
        }
    }

    s.step += 1;
    s.tokens_seen += config_.batch_tokens();
    HealthRecord& r = out.record;
    r.step = s.step;
    r.train_loss = loss_sum / static_cast<double>(workers);
    r.val_loss = config_.validate_every > 0 && s.step % config_.validate_every == 0 ? validation_loss() : kNaN;
    r.loss_scale = s.scaler.scale;
    r.grad_norm = grad_norm;
    r.act_norm = activation_norm();
    s.health.push_back(r);

    logbook_->append("step", {{"step", r.step},
                              {"tokens", s.tokens_seen},
                              {"lr", out.lr},
                              {"loss", finite_or_null(r.train_loss)},
                              {"val_loss", finite_or_null(r.val_loss)},
                              {"scale", r.loss_scale},
                              {"grad_norm", finite_or_null(r.grad_norm)},
                              {"act_norm", finite_or_null(r.act_norm)},
                              {"overflow", overflow},
                              {"skipped", out.skipped}});
    return out;
}

// ---- checkpoints --------------------------------------------------------------------

std::filesystem::path Trainer::checkpoint_path(std::uint64_t step) const {
    std::ostringstream name;
    name << "ckpt-" << std::setw(8) << std::setfill('0') << step << ".bin";
    return config_.run_dir / name.str();
}

Checkpoint Trainer::snapshot() const {
    Checkpoint c;
    c.model = config_.model;
    c.state = state_;
    return c;
}

void Trainer::checkpoint_now() {
    auto& reg = state_.checkpoints;
    std::erase_if(reg, [&](const CheckpointRef& c) { return c.step >= state_.step; });
    reg.push_back({state_.step, state_.scaler.scale});

    nlohmann::json payload = {{"step", state_.step}, {"scale", state_.scaler.scale}};
    if (config_.run_dir.empty()) {
        memory_checkpoints_[state_.step] = encode_checkpoint(snapshot());
    } else {
        const auto path = checkpoint_path(state_.step);
        save_checkpoint(path, snapshot());
        write_text_atomic(config_.run_dir / "LATEST", path.filename().string() + "\n");
        payload["path"] = path.string();
    }
    logbook_->append("checkpoint", std::move(payload));
}

void Trainer::restore(std::uint64_t step) {
    Checkpoint ckpt;
    if (config_.run_dir.empty()) {
        const auto it = memory_checkpoints_.find(step);
        if (it == memory_checkpoints_.end()) {
            throw CheckpointError("no stored checkpoint for step " + std::to_string(step));
        }
        ckpt = decode_checkpoint(it->second, &config_.model);
    } else {
        ckpt = load_checkpoint(checkpoint_path(step), &config_.model);
    }
    state_ = std::move(ckpt.state);
}

std::optional<std::filesystem::path> latest_checkpoint(const std::filesystem::path& run_dir) {
    std::ifstream in(run_dir / "LATEST");
    std::string name;
    if (!in || !std::getline(in, name) || name.empty()) {
        return std::nullopt;
    }
    return run_dir / name;
}

// ---- control channel --------------------------------------------------------------

bool Trainer::apply_control() {
    if (stop_requested_) {
        return false;
    }
    if (config_.control_file.empty() || !std::filesystem::exists(config_.control_file)) {
        return true;
    }
    std::ifstream in(config_.control_file);
    std::stringstream buffer;
    buffer << in.rdbuf();
    const std::string text = buffer.str();

    std::vector<std::string> lines;
    std::size_t begin = 0;
    for (std::size_t nl = text.find('\n'); nl != std::string::npos; nl = text.find('\n', begin)) {
        lines.push_back(text.substr(begin, nl - begin));
        begin = nl + 1;
    }

    while (state_.control_cursor < lines.size()) {
        const std::string line = lines[state_.control_cursor++];
        std::istringstream words(line);
        std::string command;
        if (!(words >> command) || command.front() == '#') {
            continue;
        }
        nlohmann::json event = {{"command", command}, {"step", state_.step}, {"line", state_.control_cursor}};
        double value = 0.0;
        try {
            if (command == "set-lr-factor") {
                if (!(words >> value) || !(value > 0.0)) {
                    throw ConfigError("set-lr-factor needs a positive factor");
                }
                ScheduleConfig tmp;
                tmp.overrides = state_.overrides;
                tmp.add_override(state_.step, value);
                state_.overrides = tmp.overrides;
                logbook_->append("override", {{"source", "control"},
                                              {"from_step", state_.step},
                                              {"factor", value},
                                              {"overrides", overrides_json(state_.overrides)}});
                continue;
            }
            if (command == "set-clip") {
                if (!(words >> value) || !(value > 0.0)) {
                    throw ConfigError("set-clip needs a positive threshold");
                }
                state_.clip.max_norm = value;
                event["value"] = value;
            } else if (command == "reset-scaler") {
                state_.scaler.reset();
                event["scale"] = state_.scaler.scale;
            } else if (command == "checkpoint-now") {
                logbook_->append("control", std::move(event));
                checkpoint_now();
                continue;
            } else if (command == "stop") {
                stop_requested_ = true;
            } else {
                throw ConfigError("unknown control command '" + command + "'");
            }
        } catch (const ConfigError& e) {
            event["error"] = e.what();
        }
        logbook_->append("control", std::move(event));
        if (stop_requested_) {
            return false;
        }
    }
    return true;
}

// ---- run loop and recovery ----------------------------------------------------------

TrainResult Trainer::run() {
    TrainResult result;
    while (!budget_reached()) {
        if (!apply_control()) {
            result.stopped = true;
            logbook_->append("stop", {{"step", state_.step}});
            checkpoint_now();
            break;
        }
        if (hooks_.before_step) {
            hooks_.before_step(state_);
        }
        step();
        const Verdict verdict = detect_divergence(state_.health, config_.health);
        if (verdict.diverged()) {
            recover(verdict);
            continue;
        }
        if (state_.step % config_.checkpoint_every == 0) {
            checkpoint_now();
        }
    }
    if (!result.stopped && (state_.checkpoints.empty() || state_.checkpoints.back().step != state_.step)) {
        checkpoint_now();
    }
    result.steps = state_.step;
    result.tokens_seen = state_.tokens_seen;
    result.restarts = restarts_;
    return result;
}

void Trainer::recover(const Verdict& verdict) {
    nlohmann::json event = {{"reason", reason_name(verdict.reason)}, {"at_step", verdict.at_step}};
    if (restarts_ >= config_.recovery.max_restarts) {
        event["unrecoverable"] = "restart limit reached";
        logbook_->append("divergence", std::move(event));
        throw DivergenceError("divergence at step " + std::to_string(verdict.at_step) + " (" +
                              std::string(reason_name(verdict.reason)) + ") after " +
                              std::to_string(restarts_) + " restarts");
    }
    CheckpointRef ref;
    try {
        ref = select_restart_checkpoint(state_.checkpoints, state_.health, config_.health);
    } catch (const DivergenceError& e) {
        event["unrecoverable"] = e.what();
        logbook_->append("divergence", std::move(event));
        throw DivergenceError("divergence at step " + std::to_string(verdict.at_step) + " (" +
                              std::string(reason_name(verdict.reason)) + "): " + e.what());
    }
    logbook_->append("divergence", std::move(event));

    const auto slope = activation_trend(state_.health, ref.step, config_.health.trend_window);
    restore(ref.step);
    ++restarts_;

    ScheduleConfig tmp;
    tmp.overrides = state_.overrides;
    tmp.add_override(ref.step, config_.recovery.lr_factor);
    state_.overrides = tmp.overrides;
    if (config_.recovery.tighten_clip) {
        state_.clip.max_norm = std::min(state_.clip.max_norm, config_.recovery.tightened_clip);
    }
    if (hooks_.on_restart) {
        hooks_.on_restart(state_);
    }
    logbook_->append("restart", {{"checkpoint_step", ref.step},
                                 {"checkpoint_scale", ref.scale},
                                 {"activation_slope", slope ? nlohmann::json(*slope) : nlohmann::json(nullptr)},
                                 {"reason", reason_name(verdict.reason)},
                                 {"at_step", verdict.at_step},
                                 {"lr_factor", config_.recovery.lr_factor},
                                 {"clip", state_.clip.max_norm},
                                 {"scale", state_.scaler.scale},
                                 {"consecutive_good", state_.scaler.consecutive_good},
                                 {"overrides", overrides_json(state_.overrides)}});
    // The rolled-back state carries the new override and is persisted at once.
    checkpoint_now();
}

// ---- logbook replay and audit ------------------------------------------------------

std::vector<ReplayPoint> replay_logbook(const TrainConfig& config, std::span<const nlohmann::json> events) {
    ScheduleConfig schedule = config.effective_schedule();
    LossScaler scaler(config.scaler);
    const double batch = static_cast<double>(config.batch_tokens());
    std::vector<ReplayPoint> out;
    for (const auto& e : events) {
        const std::string kind = e.at("kind").get<std::string>();
        if (kind == "step") {
            const auto step = e.at("step").get<std::uint64_t>();
            const double tokens = e.at("tokens").get<double>();
            ReplayPoint p;
            p.step = step;
            p.lr = lr_at(schedule, step - 1, tokens - batch);
            if (config.loss_scaling) {
                scaler_update(scaler, e.at("overflow").get<bool>());
            }
            p.scale = scaler.scale;
            out.push_back(p);
        } else if (kind == "override") {
            schedule.overrides = overrides_from_json(e.at("overrides"));
        } else if (kind == "restart" || kind == "resume") {
            schedule.overrides = overrides_from_json(e.at("overrides"));
            scaler.scale = e.at("scale").get<double>();
            scaler.consecutive_good = e.at("consecutive_good").get<std::uint64_t>();
        } else if ((kind == "control" && e.value("command", "") == "reset-scaler" && !e.contains("error")) ||
                   (kind == "fault" && e.value("fault", "") == "scaler-reset")) {
            scaler.reset();
        }
    }
    return out;
}

std::vector<std::string> audit_restarts(std::span<const nlohmann::json> events, const HealthPolicy& policy) {
    std::vector<std::string> problems;
    for (std::size_t i = 0; i < events.size(); ++i) {
        if (events[i].at("kind") != "restart") {
            continue;
        }
        const auto c = events[i].at("checkpoint_step").get<std::uint64_t>();
        std::optional<std::size_t> ckpt_index;
        for (std::size_t j = i; j-- > 0;) {
            if (events[j].at("kind") == "checkpoint" && events[j].at("step").get<std::uint64_t>() == c) {
                ckpt_index = j;
                break;
            }
        }
        const std::string where = "restart at event " + std::to_string(events[i].at("seq").get<std::uint64_t>());
        if (!ckpt_index) {
            problems.push_back(where + ": no checkpoint event for step " + std::to_string(c));
            continue;
        }
        const double scale = events[*ckpt_index].at("scale").get<double>();
        if (!(scale >= policy.scalar_floor)) {
            problems.push_back(where + ": checkpoint scale below the floor");
        }
        std::vector<HealthRecord> following;
        for (std::size_t j = *ckpt_index + 1; j < i; ++j) {
            const auto& kind = events[j].at("kind");
            if (kind == "resume" || kind == "restart") {
                const auto back_to = events[j].at("checkpoint_step").get<std::uint64_t>();
                std::erase_if(following, [&](const HealthRecord& r) { return r.step > back_to; });
            }
            if (kind == "step" && events[j].at("step").get<std::uint64_t>() > c) {
                HealthRecord r;
                r.step = events[j].at("step").get<std::uint64_t>();
                r.act_norm = number_or_nan(events[j].at("act_norm"));
                following.push_back(r);
            }
        }
        const auto slope = activation_trend(following, c, policy.trend_window);
        if (!slope || !(*slope <= policy.slope_threshold)) {
            problems.push_back(where + ": activation norms after the checkpoint do not trend downward");
        }
    }
    return problems;
}

} // namespace optlab
