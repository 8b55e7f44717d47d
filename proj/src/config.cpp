#include "optlab/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "optlab/errors.hpp"

namespace optlab {

namespace {

std::string_view weight_mode_name(WeightMode m) { return m == WeightMode::full ? "full" : "emulated-half"; }
std::string_view warmup_unit_name(WarmupUnit u) { return u == WarmupUnit::steps ? "steps" : "tokens"; }
std::string_view optimizer_name(OptimizerKind k) { return k == OptimizerKind::adamw ? "adamw" : "sgd"; }

/// Reads one JSON object, remembering which keys were consumed so leftovers
/// can be reported as unknown.
class Section {
public:
    Section(const nlohmann::json* j, std::string name, std::string_view origin)
        : j_(j), name_(std::move(name)), origin_(origin) {
        if (j_ != nullptr && !j_->is_object()) {
            fail("", "expected an object");
        }
    }

    [[noreturn]] void fail(std::string_view key, std::string_view message) const {
        std::string where = name_;
        if (!key.empty()) {
            where += where.empty() ? "" : ".";
            where += key;
        }
        throw ConfigError(std::string(origin_) + ": " + where + ": " + std::string(message));
    }

    bool has(const std::string& key) const { return j_ != nullptr && j_->contains(key); }

    const nlohmann::json* child(const std::string& key) {
        if (!has(key)) {
            return nullptr;
        }
        used_.insert(key);
        return &j_->at(key);
    }

    template <class T>
    void get(const std::string& key, T& out) {
        const nlohmann::json* v = child(key);
        if (v == nullptr) {
            return;
        }
        if constexpr (std::is_same_v<T, bool>) {
            if (!v->is_boolean()) {
                fail(key, "expected true or false");
            }
            out = v->get<bool>();
        } else if constexpr (std::is_integral_v<T>) {
            const bool whole = v->is_number_unsigned() ||
                               (v->is_number_integer() && v->get<std::int64_t>() >= 0) ||
                               (v->is_number_float() && v->get<double>() >= 0 &&
                                std::floor(v->get<double>()) == v->get<double>());
            if (!whole) {
                fail(key, "expected a nonnegative integer");
            }
            out = static_cast<T>(v->is_number_float() ? static_cast<std::uint64_t>(v->get<double>())
                                                      : v->get<std::uint64_t>());
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!v->is_number()) {
                fail(key, "expected a number");
            }
            out = v->get<double>();
        } else if constexpr (std::is_same_v<T, std::filesystem::path>) {
            if (!v->is_string()) {
                fail(key, "expected a path string");
            }
            out = v->get<std::string>();
        } else {
            if (!v->is_string()) {
                fail(key, "expected a string");
            }
            out = v->get<std::string>();
        }
    }

    void finish() const {
        if (j_ == nullptr) {
            return;
        }
        for (const auto& [key, value] : j_->items()) {
            if (!used_.contains(key)) {
                fail(key, "unknown key");
            }
        }
    }

private:
    const nlohmann::json* j_;
    std::string name_;
    std::string_view origin_;
    std::set<std::string> used_;
};

template <class F>
void checked(std::string_view origin, std::string_view section, F&& validate) {
    try {
        validate();
    } catch (const ConfigError& e) {
        throw ConfigError(std::string(origin) + ": " + std::string(section) + ": " + e.what());
    }
}

} // namespace

TokenCorpus load_training_corpus(const RunConfig& config) {
    const auto& d = config.data;
    std::vector<TokenId> tokens;
    if (!d.tokens.empty()) {
        tokens = read_tokens(d.tokens);
    } else if (!d.manifest.empty() && !d.vocab.empty()) {
        std::ifstream in(d.vocab);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(in);
        } catch (const nlohmann::json::parse_error& e) {
            throw ConfigError(d.vocab.string() + ": " + e.what());
        }
        const auto vocab = BpeVocab::from_json(j);
        const auto docs = load_manifest_documents(read_manifest(d.manifest));
        tokens = encode_documents(vocab, docs);
    } else {
        throw ConfigError("data: set \"tokens\", or both \"manifest\" and \"vocab\"");
    }
    const std::size_t vocab = config.train.model.vocab_size;
    for (TokenId id : tokens) {
        if (id >= vocab) {
            throw ConfigError("data: token id " + std::to_string(id) + " is outside model.vocab_size " +
                              std::to_string(vocab));
        }
    }
    return TokenCorpus::split(std::move(tokens), d.validation_fraction, config.train.seq_len + 1);
}

std::size_t preset_micro_batch(const Preset& preset, std::size_t seq_len) {
    const double tokens = preset.batch_tokens / 1e6 * 1048576.0;
    return static_cast<std::size_t>(std::llround(tokens / static_cast<double>(seq_len)));
}

ScheduleConfig preset_schedule(const Preset& preset) {
    ScheduleConfig s;
    s.max_lr = preset.max_lr;
    s.tokens_per_step = preset.batch_tokens;
    if (preset.name == "175B") {
        s.warmup_unit = WarmupUnit::steps;
        s.warmup = 2000;
    } else {
        s.warmup_unit = WarmupUnit::tokens;
        s.warmup = 375e6;
    }
    return s;
}

RunConfig parse_config_json(const nlohmann::json& j, std::string_view origin, const std::filesystem::path& base_dir) {
    if (j.is_null() || (j.is_object() && j.empty())) {
        throw ConfigError(std::string(origin) +
                          ": empty configuration; required keys: \"preset\" or \"model\", and "
                          "\"training.token_budget\"");
    }
    Section root(&j, "", origin);
    RunConfig c;
    auto& t = c.train;

    if (const auto* p = root.child("preset")) {
        if (!p->is_string()) {
            root.fail("preset", "expected a preset name");
        }
        const std::string name = p->get<std::string>();
        const Preset* preset = nullptr;
        try {
            preset = &find_preset(name);
        } catch (const ConfigError& e) {
            root.fail("preset", e.what());
        }
        c.preset = name;
        t.model = preset_config(*preset);
        t.schedule = preset_schedule(*preset);
        t.seq_len = t.model.max_seq_len;
        t.micro_batch = preset_micro_batch(*preset, t.seq_len);
    } else if (!root.has("model")) {
        root.fail("", "missing required key \"preset\" or \"model\"");
    }

    {
        Section s(root.child("model"), "model", origin);
        s.get("n_layers", t.model.n_layers);
        s.get("n_heads", t.model.n_heads);
        s.get("d_model", t.model.d_model);
        s.get("vocab_size", t.model.vocab_size);
        s.get("max_seq_len", t.model.max_seq_len);
        s.get("dropout", t.model.dropout);
        s.get("ffn_mult", t.model.ffn_mult);
        s.get("tie_embeddings", t.model.tie_embeddings);
        s.finish();
        checked(origin, "model", [&] { t.model.validate(); });
    }
    {
        Section s(root.child("schedule"), "schedule", origin);
        s.get("max_lr", t.schedule.max_lr);
        std::string unit(warmup_unit_name(t.schedule.warmup_unit));
        s.get("warmup_unit", unit);
        if (unit == "steps") {
            t.schedule.warmup_unit = WarmupUnit::steps;
        } else if (unit == "tokens") {
            t.schedule.warmup_unit = WarmupUnit::tokens;
        } else {
            s.fail("warmup_unit", "expected \"steps\" or \"tokens\"");
        }
        s.get("warmup", t.schedule.warmup);
        s.get("decay_horizon_tokens", t.schedule.decay_horizon_tokens);
        s.get("end_factor", t.schedule.end_factor);
        if (const auto* o = s.child("overrides")) {
            t.schedule.overrides.clear();
            if (!o->is_array()) {
                s.fail("overrides", "expected a list of [step, factor] pairs");
            }
            for (const auto& item : *o) {
                if (!item.is_array() || item.size() != 2 || !item[0].is_number_unsigned() || !item[1].is_number()) {
                    s.fail("overrides", "expected a list of [step, factor] pairs");
                }
                t.schedule.overrides.push_back({item[0].get<std::uint64_t>(), item[1].get<double>()});
            }
        }
        s.finish();
    }
    {
        Section s(root.child("adamw"), "adamw", origin);
        s.get("beta1", t.adamw.beta1);
        s.get("beta2", t.adamw.beta2);
        s.get("eps", t.adamw.eps);
        s.get("weight_decay", t.adamw.weight_decay);
        s.finish();
    }
    {
        Section s(root.child("clip"), "clip", origin);
        s.get("max_norm", t.clip.max_norm);
        s.finish();
    }
    {
        Section s(root.child("predivide"), "predivide", origin);
        s.get("world_size", t.predivide.world_size);
        s.finish();
    }
    {
        Section s(root.child("precision"), "precision", origin);
        std::string mode(weight_mode_name(t.precision.weight_mode));
        s.get("weight_mode", mode);
        if (mode == "full") {
            t.precision.weight_mode = WeightMode::full;
        } else if (mode == "emulated-half") {
            t.precision.weight_mode = WeightMode::emulated_half;
        } else {
            s.fail("weight_mode", "expected \"full\" or \"emulated-half\"");
        }
        s.get("overflow_threshold", t.precision.overflow_threshold);
        s.finish();
    }
    {
        Section s(root.child("loss_scaler"), "loss_scaler", origin);
        s.get("enabled", t.loss_scaling);
        s.get("initial_scale", t.scaler.initial_scale);
        s.get("growth_interval", t.scaler.growth_interval);
        s.get("growth_factor", t.scaler.growth_factor);
        s.get("backoff_factor", t.scaler.backoff_factor);
        s.get("min_scale", t.scaler.min_scale);
        s.get("healthy_threshold", t.scaler.healthy_threshold);
        s.finish();
    }
    {
        Section s(root.child("health"), "health", origin);
        s.get("scalar_floor", t.health.scalar_floor);
        s.get("trend_window", t.health.trend_window);
        s.get("slope_threshold", t.health.slope_threshold);
        s.get("loss_margin", t.health.loss_margin);
        s.get("loss_patience", t.health.loss_patience);
        s.finish();
    }
    {
        Section s(root.child("recovery"), "recovery", origin);
        s.get("lr_factor", t.recovery.lr_factor);
        s.get("tighten_clip", t.recovery.tighten_clip);
        s.get("tightened_clip", t.recovery.tightened_clip);
        s.get("max_restarts", t.recovery.max_restarts);
        s.finish();
    }
    {
        Section s(root.child("training"), "training", origin);
        std::string opt(optimizer_name(t.optimizer));
        s.get("optimizer", opt);
        if (opt == "adamw") {
            t.optimizer = OptimizerKind::adamw;
        } else if (opt == "sgd") {
            t.optimizer = OptimizerKind::sgd;
        } else {
            s.fail("optimizer", "expected \"adamw\" or \"sgd\"");
        }
        s.get("seq_len", t.seq_len);
        s.get("micro_batch", t.micro_batch);
        if (!s.has("token_budget")) {
            s.fail("token_budget", "missing required key");
        }
        s.get("token_budget", t.token_budget);
        s.get("checkpoint_every", t.checkpoint_every);
        s.get("validate_every", t.validate_every);
        s.get("validation_windows", t.validation_windows);
        s.get("run_dir", t.run_dir);
        s.get("control_file", t.control_file);
        s.finish();
    }
    {
        Section s(root.child("seeds"), "seeds", origin);
        s.get("init", t.init_seed);
        s.get("data", t.data_seed);
        s.get("dropout", t.dropout_seed);
        s.get("dedup", c.dedup.seed);
        s.get("eval", c.eval_seed);
        s.finish();
    }
    {
        Section s(root.child("dedup"), "dedup", origin);
        s.get("jaccard_threshold", c.dedup.jaccard_threshold);
        s.get("shingle_width", c.dedup.shingle_width);
        s.get("num_hashes", c.dedup.num_hashes);
        s.get("bands", c.dedup.bands);
        s.get("rows", c.dedup.rows);
        s.get("exact_verification", c.dedup.exact_verification);
        s.finish();
        checked(origin, "dedup", [&] { c.dedup.validate(); });
    }
    {
        Section s(root.child("data"), "data", origin);
        s.get("manifest", c.data.manifest);
        s.get("vocab", c.data.vocab);
        s.get("tokens", c.data.tokens);
        s.get("validation_fraction", c.data.validation_fraction);
        s.finish();
        for (auto* p : {&c.data.manifest, &c.data.vocab, &c.data.tokens}) {
            if (!p->empty() && p->is_relative() && !base_dir.empty()) {
                *p = base_dir / *p;
            }
            if (!p->empty() && !std::filesystem::exists(*p)) {
                s.fail("", "path does not exist: " + p->string());
            }
        }
        if (!(c.data.validation_fraction >= 0.0 && c.data.validation_fraction < 1.0)) {
            s.fail("validation_fraction", "must lie in [0, 1)");
        }
    }
    root.child("derived");  // recomputed, never read back
    root.finish();
    checked(origin, "training", [&] { t.validate(); });
    return c;
}

RunConfig parse_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError(path.string() + ": cannot read configuration");
    }
    std::stringstream buffer;
    buffer << in.rdbuf();
    const std::string text = buffer.str();
    if (text.find_first_not_of(" \t\r\n") == std::string::npos) {
        return parse_config_json(nlohmann::json(), path.string());
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return parse_config_json(j, path.string(), path.parent_path());
}

nlohmann::json train_config_to_json(const TrainConfig& t) {
    nlohmann::json overrides = nlohmann::json::array();
    for (const auto& o : t.schedule.overrides) {
        overrides.push_back({o.from_step, o.factor});
    }
    return {
        {"model",
         {{"n_layers", t.model.n_layers},
          {"n_heads", t.model.n_heads},
          {"d_model", t.model.d_model},
          {"vocab_size", t.model.vocab_size},
          {"max_seq_len", t.model.max_seq_len},
          {"dropout", t.model.dropout},
          {"ffn_mult", t.model.ffn_mult},
          {"tie_embeddings", t.model.tie_embeddings}}},
        {"schedule",
         {{"max_lr", t.schedule.max_lr},
          {"warmup_unit", warmup_unit_name(t.schedule.warmup_unit)},
          {"warmup", t.schedule.warmup},
          {"decay_horizon_tokens", t.schedule.decay_horizon_tokens},
          {"end_factor", t.schedule.end_factor},
          {"overrides", overrides}}},
        {"adamw",
         {{"beta1", t.adamw.beta1},
          {"beta2", t.adamw.beta2},
          {"eps", t.adamw.eps},
          {"weight_decay", t.adamw.weight_decay}}},
        {"clip", {{"max_norm", t.clip.max_norm}}},
        {"predivide", {{"world_size", t.predivide.world_size}}},
        {"precision",
         {{"weight_mode", weight_mode_name(t.precision.weight_mode)},
          {"overflow_threshold", t.precision.overflow_threshold}}},
        {"loss_scaler",
         {{"enabled", t.loss_scaling},
          {"initial_scale", t.scaler.initial_scale},
          {"growth_interval", t.scaler.growth_interval},
          {"growth_factor", t.scaler.growth_factor},
          {"backoff_factor", t.scaler.backoff_factor},
          {"min_scale", t.scaler.min_scale},
          {"healthy_threshold", t.scaler.healthy_threshold}}},
        {"health",
         {{"scalar_floor", t.health.scalar_floor},
          {"trend_window", t.health.trend_window},
          {"slope_threshold", t.health.slope_threshold},
          {"loss_margin", t.health.loss_margin},
          {"loss_patience", t.health.loss_patience}}},
        {"recovery",
         {{"lr_factor", t.recovery.lr_factor},
          {"tighten_clip", t.recovery.tighten_clip},
          {"tightened_clip", t.recovery.tightened_clip},
          {"max_restarts", t.recovery.max_restarts}}},
        {"training",
         {{"optimizer", optimizer_name(t.optimizer)},
          {"seq_len", t.seq_len},
          {"micro_batch", t.micro_batch},
          {"token_budget", t.token_budget},
          {"checkpoint_every", t.checkpoint_every},
          {"validate_every", t.validate_every},
          {"validation_windows", t.validation_windows},
          {"run_dir", t.run_dir.string()},
          {"control_file", t.control_file.string()}}},
        {"seeds", {{"init", t.init_seed}, {"data", t.data_seed}, {"dropout", t.dropout_seed}}},
        {"derived",
         {{"batch_tokens", t.batch_tokens()},
          {"tokens_per_step", t.effective_schedule().tokens_per_step},
          {"warmup_end_tokens", t.effective_schedule().warmup_end_tokens()},
          {"parameters", parameter_count(t.model)}}},
    };
}

nlohmann::json emit_config(const RunConfig& c) {
    nlohmann::json j = train_config_to_json(c.train);
    if (c.preset) {
        j["preset"] = *c.preset;
    }
    j["seeds"]["dedup"] = c.dedup.seed;
    j["seeds"]["eval"] = c.eval_seed;
    j["dedup"] = {{"jaccard_threshold", c.dedup.jaccard_threshold},
                  {"shingle_width", c.dedup.shingle_width},
                  {"num_hashes", c.dedup.num_hashes},
                  {"bands", c.dedup.bands},
                  {"rows", c.dedup.rows},
                  {"exact_verification", c.dedup.exact_verification}};
    j["data"] = {{"manifest", c.data.manifest.string()},
                 {"vocab", c.data.vocab.string()},
                 {"tokens", c.data.tokens.string()},
                 {"validation_fraction", c.data.validation_fraction}};
    return j;
}

// ---- accounting -----------------------------------------------------------------------

void AccountingInput::validate() const {
    auto positive = [](double v, const char* name) {
        if (!(v > 0.0) || !std::isfinite(v)) {
            throw InputError(std::string("accounting: ") + name + " must be positive");
        }
    };
    positive(parameters, "parameter count");
    positive(tokens, "training tokens");
    positive(devices, "device count");
    positive(throughput_flops, "per-device throughput");
    positive(device_watts, "device power");
    positive(pue, "PUE");
    positive(overhead_multiplier, "overhead multiplier");
    if (!(carbon_intensity >= 0.0) || !std::isfinite(carbon_intensity)) {
        throw InputError("accounting: carbon intensity must be nonnegative");
    }
}

ComputeEstimate estimate_compute(const AccountingInput& input) {
    input.validate();
    ComputeEstimate e;
    e.flops = 6.0 * input.parameters * input.tokens;
    e.device_days = e.flops / (input.devices * input.throughput_flops) / 86400.0;
    return e;
}

double estimate_co2_tons(const AccountingInput& input, double device_days) {
    input.validate();
    const double kwh = input.devices * device_days * 24.0 * input.device_watts / 1000.0 * input.pue;
    return kwh * input.carbon_intensity / 1000.0;
}

std::span<const ReferenceEmission> reference_emissions() {
    static constexpr ReferenceEmission kRefs[] = {{"175B preset", 75.0}, {"GPT-3", 500.0}, {"Gopher", 380.0}};
    return kRefs;
}

std::string accounting_report(const AccountingInput& input, bool watts_given, bool pue_given) {
    const auto compute = estimate_compute(input);
    const double tons = estimate_co2_tons(input, compute.device_days);
    std::ostringstream os;
    os.precision(4);
    os << "parameters          " << input.parameters << "\n"
       << "training tokens     " << input.tokens << "\n"
       << "total FLOPs (6ND)   " << compute.flops << "\n"
       << "ideal days          " << compute.device_days << "  (at full sustained throughput; a lower bound)\n"
       << "device power (W)    " << input.device_watts << (watts_given ? "" : "  [placeholder]") << "\n"
       << "PUE                 " << input.pue << (pue_given ? "" : "  [placeholder]") << "\n"
       << "carbon intensity    " << input.carbon_intensity << " kg CO2eq/kWh\n"
       << "CO2eq (t)           " << tons << "\n";
    if (input.overhead_multiplier != 1.0) {
        os << "CO2eq with overhead " << tons * input.overhead_multiplier << " (x" << input.overhead_multiplier
           << ")\n";
    }
    os << "reference points:";
    for (const auto& r : reference_emissions()) {
        os << "  " << r.model << " " << r.tons << " t";
    }
    os << "\n";
    return os.str();
}

} // namespace optlab
