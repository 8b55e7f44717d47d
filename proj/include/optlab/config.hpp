#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "json.hpp"
#include "optlab/corpus.hpp"
#include "optlab/trainer.hpp"

namespace optlab {

struct DataConfig {
    std::filesystem::path manifest;  // documents to tokenize, when `tokens` is empty
    std::filesystem::path vocab;     // BPE vocabulary for the manifest documents
    std::filesystem::path tokens;    // pre-tokenized u32 stream
    double validation_fraction = 0.001;

    bool operator==(const DataConfig&) const = default;
};

/// Everything one run needs. A preset fills model shape, peak LR and batch
/// size from the published table; explicit keys then override it.
struct RunConfig {
    std::optional<std::string> preset;
    TrainConfig train;
    DedupConfig dedup;
    DataConfig data;
    std::uint64_t eval_seed = 0;

    bool operator==(const RunConfig&) const = default;
};

/// Sections: preset, model, schedule, adamw, clip, predivide, precision,
/// loss_scaler, health, recovery, training, seeds, dedup, data, derived.
/// Unknown keys and type or invariant violations raise ConfigError prefixed
/// with "<origin>: <section.key>". `base_dir` resolves relative data paths.
RunConfig parse_config_json(const nlohmann::json& j, std::string_view origin = "config",
                            const std::filesystem::path& base_dir = {});
RunConfig parse_config(const std::filesystem::path& path);

/// Total echo: every effective value, defaults included, plus a "derived"
/// section. parse_config_json(emit_config(c)) == c.
nlohmann::json emit_config(const RunConfig& config);

nlohmann::json train_config_to_json(const TrainConfig& config);

/// Training tokens from data.tokens, or from the manifest documents encoded
/// with data.vocab. Throws ConfigError when no source is configured or an id
/// falls outside the model vocabulary.
TokenCorpus load_training_corpus(const RunConfig& config);

// Sequences of seq_len tokens per step closest to a preset's batch size, with
// "M" read as 2^20 tokens.
std::size_t preset_micro_batch(const Preset& preset, std::size_t seq_len);

/// Peak LR from the table; 175B warms up over 2000 steps, every smaller preset
/// over 375M tokens. tokens_per_step is the nominal batch size.
ScheduleConfig preset_schedule(const Preset& preset);

// ---- accounting -----------------------------------------------------------------------

inline constexpr double kPlaceholderDeviceWatts = 400.0;
inline constexpr double kPlaceholderPue = 1.1;

struct AccountingInput {
    double parameters = 0.0;          // N
    double tokens = 0.0;              // D
    double devices = 0.0;
    double throughput_flops = 0.0;    // sustained FLOP/s per device
    double device_watts = kPlaceholderDeviceWatts;
    double pue = kPlaceholderPue;
    double carbon_intensity = 0.0;    // kg CO2eq per kWh; zero allowed
    double overhead_multiplier = 1.0; // ablations, downtime and reruns

    // Throws InputError unless every quantity is positive (intensity ≥ 0).
    void validate() const;
};

struct ComputeEstimate {
    double flops = 0.0;        // 6·N·D
    double device_days = 0.0;  // per device, at full sustained throughput
};

ComputeEstimate estimate_compute(const AccountingInput& input);

// devices × days × 24 h × W × PUE, times intensity, in metric tons.
double estimate_co2_tons(const AccountingInput& input, double device_days);

struct ReferenceEmission {
    std::string_view model;
    double tons;
};
std::span<const ReferenceEmission> reference_emissions();

std::string accounting_report(const AccountingInput& input, bool watts_given, bool pue_given);

} // namespace optlab
