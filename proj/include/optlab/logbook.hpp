#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace optlab {

inline constexpr int kLogbookSchema = 1;

/// Append-only run record. Every event carries {"schema", "seq", "time",
/// "kind"} plus a kind-specific payload; one JSON object per line on disk.
/// Non-finite numbers are written as null.
///
/// Kinds: header, step, checkpoint, divergence, restart, resume, fault,
/// override, control, stop.
class Logbook {
public:
    Logbook() = default;
    // Appends to `path` (created if absent); existing lines are preserved.
    explicit Logbook(std::filesystem::path path);

    const nlohmann::json& append(std::string kind, nlohmann::json payload = nlohmann::json::object());

    const std::vector<nlohmann::json>& events() const { return events_; }
    std::vector<nlohmann::json> of_kind(std::string_view kind) const;
    const std::optional<std::filesystem::path>& path() const { return path_; }

private:
    std::vector<nlohmann::json> events_;
    std::optional<std::filesystem::path> path_;
    std::uint64_t next_seq_ = 0;
};

// NaN and infinities become null; every line stays valid JSON.
nlohmann::json finite_or_null(double value);
double number_or_nan(const nlohmann::json& value);

// Parses a JSONL file; throws InputError with the line number on bad JSON.
std::vector<nlohmann::json> read_logbook(const std::filesystem::path& path);

} // namespace optlab
