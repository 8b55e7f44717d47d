#include "optlab/optim.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "optlab/errors.hpp"

namespace optlab {

GradSet zero_grads_like(const Parameters& params) {
    GradSet out;
    out.reserve(params.size());
    for (const auto& p : params) {
        out.emplace_back(p.value.size(), 0.0);
    }
    return out;
}

GradSet collect_grads(const Parameters& params) {
    GradSet out;
    out.reserve(params.size());
    for (const auto& p : params) {
        if (p.value.has_grad()) {
            auto g = p.value.grad();
            out.emplace_back(g.begin(), g.end());
        } else {
            out.emplace_back(p.value.size(), 0.0);
        }
    }
    return out;
}

bool all_finite(const GradSet& grads) {
    for (const auto& g : grads) {
        for (double v : g) {
            if (!std::isfinite(v)) {
                return false;
            }
        }
    }
    return true;
}

// ---- schedule -----------------------------------------------------------------

double ScheduleConfig::warmup_end_tokens() const {
    return warmup_unit == WarmupUnit::steps ? warmup * tokens_per_step : warmup;
}

void ScheduleConfig::validate() const {
    if (!(max_lr >= 0.0)) {
        throw ConfigError("schedule: max_lr must be nonnegative");
    }
    if (!(warmup >= 0.0)) {
        throw ConfigError("schedule: warmup must be nonnegative");
    }
    if (!(tokens_per_step > 0.0)) {
        throw ConfigError("schedule: tokens_per_step must be positive");
    }
    if (!(warmup_end_tokens() < decay_horizon_tokens)) {
        throw ConfigError("schedule: warmup must end before the decay horizon");
    }
    if (!(end_factor > 0.0 && end_factor <= 1.0)) {
        throw ConfigError("schedule: end_factor must lie in (0, 1]");
    }
    for (std::size_t i = 0; i < overrides.size(); ++i) {
        if (!(overrides[i].factor > 0.0)) {
            throw ConfigError("schedule: override factors must be positive");
        }
        if (i > 0 && overrides[i].from_step <= overrides[i - 1].from_step) {
            throw ConfigError("schedule: overrides must be strictly increasing in step");
        }
    }
}

void ScheduleConfig::add_override(std::uint64_t from_step, double factor) {
    if (!(factor > 0.0)) {
        throw ConfigError("schedule: override factor must be positive");
    }
    auto it = std::lower_bound(overrides.begin(), overrides.end(), from_step,
                               [](const ScheduleOverride& o, std::uint64_t s) { return o.from_step < s; });
    if (it != overrides.end() && it->from_step == from_step) {
        it->factor *= factor;
    } else {
        overrides.insert(it, ScheduleOverride{from_step, factor});
    }
}

double lr_at(const ScheduleConfig& s, std::uint64_t step, double tokens_seen) {
    double base = 0.0;
    const bool in_warmup = s.warmup_unit == WarmupUnit::steps ? static_cast<double>(step) < s.warmup
                                                              : tokens_seen < s.warmup;
    if (in_warmup) {
        const double progress = s.warmup_unit == WarmupUnit::steps ? static_cast<double>(step) : tokens_seen;
        base = s.max_lr * progress / s.warmup;
    } else if (tokens_seen >= s.decay_horizon_tokens) {
        base = s.max_lr * s.end_factor;
    } else {
        const double start = s.warmup_end_tokens();
        const double frac = std::max(0.0, tokens_seen - start) / (s.decay_horizon_tokens - start);
        base = s.max_lr * (1.0 - frac * (1.0 - s.end_factor));
    }
    for (const auto& o : s.overrides) {
        if (o.from_step <= step) {
            base *= o.factor;
        }
    }
    return base;
}

// ---- AdamW --------------------------------------------------------------------

void AdamWConfig::validate() const {
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
        throw ConfigError("adamw: betas must lie in [0, 1)");
    }
    if (!(weight_decay >= 0.0)) {
        throw ConfigError("adamw: weight_decay must be nonnegative");
    }
    if (!(eps > 0.0)) {
        throw ConfigError("adamw: eps must be positive");
    }
}

OptimizerState OptimizerState::zeros_like(const Parameters& params) {
    OptimizerState s;
    for (const auto& p : params) {
        s.m.emplace_back(p.value.size(), 0.0);
        s.v.emplace_back(p.value.size(), 0.0);
    }
    return s;
}

namespace {

void check_shapes(const Parameters& params, const GradSet& grads, std::string_view who) {
    if (grads.size() != params.size()) {
        throw ContractError(std::string(who) + ": " + std::to_string(grads.size()) + " gradient buffers for " +
                            std::to_string(params.size()) + " parameters");
    }
    for (std::size_t i = 0; i < grads.size(); ++i) {
        if (grads[i].size() != params[i].value.size()) {
            throw ContractError(std::string(who) + ": gradient size mismatch for " + params[i].name);
        }
    }
}

} // namespace

void adamw_step(Parameters& params, const GradSet& grads, OptimizerState& state, double lr,
                const AdamWConfig& cfg) {
    check_shapes(params, grads, "adamw_step");
    if (state.m.size() != params.size() || state.v.size() != params.size()) {
        throw ContractError("adamw_step: optimizer state does not match parameters");
    }
    if (!all_finite(grads)) {
        throw ContractError("adamw_step: non-finite gradient; overflowed steps must be skipped by the caller");
    }
    state.t += 1;
    const double t = static_cast<double>(state.t);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto p = params[i].value.data();
        const auto& g = grads[i];
        auto& m = state.m[i];
        auto& v = state.v[i];
        const double decay = params[i].decays() ? 1.0 - lr * cfg.weight_decay : 1.0;
        for (std::size_t j = 0; j < p.size(); ++j) {
            p[j] *= decay;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            p[j] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
}

void sgd_step(Parameters& params, const GradSet& grads, double lr) {
    check_shapes(params, grads, "sgd_step");
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto p = params[i].value.data();
        for (std::size_t j = 0; j < p.size(); ++j) {
            p[j] -= lr * grads[i][j];
        }
    }
}

// ---- clipping and predivide ---------------------------------------------------

void ClipConfig::validate() const {
    if (!(max_norm > 0.0)) {
        throw ConfigError("clip: max_norm must be positive");
    }
}

double global_norm(const GradSet& grads) {
    double sq = 0.0;
    for (const auto& g : grads) {
        for (double v : g) {
            sq += v * v;
        }
    }
    return std::sqrt(sq);
}

double clip_grad_norm(GradSet& grads, const ClipConfig& cfg) {
    const double norm = global_norm(grads);
    if (norm > cfg.max_norm) {
        const double factor = cfg.max_norm / norm;
        for (auto& g : grads) {
            for (double& v : g) {
                v *= factor;
            }
        }
    }
    return norm;
}

void PredivideConfig::validate() const {
    if (world_size < 1) {
        throw ConfigError("predivide: world_size must be at least 1");
    }
}

PredivideResult predivide_reduce(std::span<const GradSet> per_worker, const PredivideConfig& cfg) {
    if (per_worker.size() != cfg.world_size) {
        throw ContractError("predivide_reduce: " + std::to_string(per_worker.size()) +
                            " worker gradient sets for world size " + std::to_string(cfg.world_size));
    }
    const double root = std::sqrt(static_cast<double>(cfg.world_size));
    PredivideResult out;
    out.mean.resize(per_worker.front().size());
    for (std::size_t i = 0; i < out.mean.size(); ++i) {
        out.mean[i].assign(per_worker.front()[i].size(), 0.0);
    }
    for (const GradSet& worker : per_worker) {
        if (worker.size() != out.mean.size()) {
            throw ContractError("predivide_reduce: workers disagree on gradient layout");
        }
        for (std::size_t i = 0; i < worker.size(); ++i) {
            if (worker[i].size() != out.mean[i].size()) {
                throw ContractError("predivide_reduce: workers disagree on gradient layout");
            }
            for (std::size_t j = 0; j < worker[i].size(); ++j) {
                const double pre = worker[i][j] / root;
                out.mean[i][j] += pre;
                out.max_intermediate = std::max({out.max_intermediate, std::abs(pre), std::abs(out.mean[i][j])});
            }
        }
    }
    for (auto& g : out.mean) {
        for (double& v : g) {
            v /= root;
        }
    }
    return out;
}

} // namespace optlab
