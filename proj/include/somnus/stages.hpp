#pragma once

#include <array>
#include <cstdint>

namespace somnus {

/// Five-class stage codes used everywhere downstream of ingestion.
enum Stage : std::uint8_t { kWake = 0, kN1 = 1, kN2 = 2, kN3 = 3, kRem = 4, kExcluded = 255 };

inline constexpr std::array<const char*, 5> kStageNames = {"W", "N1", "N2", "N3", "REM"};

inline const char* stage_name(std::uint8_t code) { return code < kStageNames.size() ? kStageNames[code] : "excluded"; }

}  // namespace somnus
