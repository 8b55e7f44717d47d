#include "optlab/logbook.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>

#include "optlab/errors.hpp"

namespace optlab {

Logbook::Logbook(std::filesystem::path path) : path_(std::move(path)) {
    if (path_->has_parent_path()) {
        std::filesystem::create_directories(path_->parent_path());
    }
    if (std::filesystem::exists(*path_)) {
        for (const auto& e : read_logbook(*path_)) {
            next_seq_ = std::max(next_seq_, e.value("seq", std::uint64_t{0}) + 1);
        }
    }
}

const nlohmann::json& Logbook::append(std::string kind, nlohmann::json payload) {
    const auto now = std::chrono::system_clock::now().time_since_epoch();
    nlohmann::json event = {
        {"schema", kLogbookSchema},
        {"seq", next_seq_++},
        {"time", std::chrono::duration<double>(now).count()},
        {"kind", std::move(kind)},
    };
    for (auto& [key, value] : payload.items()) {
        event[key] = std::move(value);
    }
    if (path_) {
        std::ofstream out(*path_, std::ios::app);
        if (!out) {
            throw InputError("cannot append to logbook " + path_->string());
        }
        out << event.dump() << '\n';
    }
    events_.push_back(std::move(event));
    return events_.back();
}

std::vector<nlohmann::json> Logbook::of_kind(std::string_view kind) const {
    std::vector<nlohmann::json> out;
    for (const auto& e : events_) {
        if (e.at("kind").get<std::string>() == kind) {
            out.push_back(e);
        }
    }
    return out;
}

nlohmann::json finite_or_null(double value) {
    return std::isfinite(value) ? nlohmann::json(value) : nlohmann::json(nullptr);
}

double number_or_nan(const nlohmann::json& value) {
    return value.is_number() ? value.get<double>() : std::numeric_limits<double>::quiet_NaN();
}

std::vector<nlohmann::json> read_logbook(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw InputError("cannot read logbook " + path.string());
    }
    std::vector<nlohmann::json> events;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        try {
            events.push_back(nlohmann::json::parse(line));
        } catch (const nlohmann::json::parse_error& e) {
            throw InputError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return events;
}

} // namespace optlab
