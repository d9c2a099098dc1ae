#include "vitlens/diag.hpp"
#include "vitlens/error.hpp"
#include "vitlens/rng.hpp"

#include <cmath>
#include <iostream>
#include <mutex>
#include <numbers>

namespace vitlens {

std::string_view to_string(ErrorCode code) {
    switch (code) {
    case ErrorCode::dimension: return "dimension_error";
    case ErrorCode::configuration: return "configuration_error";
    case ErrorCode::degenerate_vector: return "degenerate_vector";
    case ErrorCode::missing_tensor: return "missing_tensor";
    case ErrorCode::shape_mismatch: return "shape_mismatch";
    case ErrorCode::version_mismatch: return "version_mismatch";
    case ErrorCode::non_finite: return "non_finite_weight";
    case ErrorCode::format: return "format_error";
    case ErrorCode::input: return "input_error";
    case ErrorCode::compatibility: return "compatibility_error";
    case ErrorCode::not_found: return "not_found";
    case ErrorCode::io: return "io_error";
    }
    return "error";
}

namespace {

std::mutex sink_mutex;
WarningSink& sink() {
    static WarningSink s = [](const std::string& msg) { std::cerr << "warning: " << msg << '\n'; };
    return s;
}

} // namespace

void set_warning_sink(WarningSink new_sink) {
    std::lock_guard lock(sink_mutex);
    sink() = std::move(new_sink);
}

void warn(const std::string& message) {
    std::lock_guard lock(sink_mutex);
    if (sink()) sink()(message);
}

double CounterRng::gaussian(uint64_t counter) const {
    // u1 in (0, 1] so the log is finite.
    const double u1 = 1.0 - uniform(2 * counter);
    const double u2 = uniform(2 * counter + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

uint64_t SeededStream::next_below(uint64_t bound) {
    if (bound == 0) fail(ErrorCode::input, "next_below: bound must be positive");
    const uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    for (;;) {
        const uint64_t r = next_bits();
        if (r < limit) return r % bound;
    }
}

} // namespace vitlens
