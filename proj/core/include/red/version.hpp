#pragma once

namespace red {

inline constexpr const char* kToolVersion = "0.1.0";

}  // namespace red
