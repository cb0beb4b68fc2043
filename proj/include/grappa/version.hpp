#pragma once

namespace grappa {

inline constexpr const char* kVersion = "1.0.0";

}  // namespace grappa
