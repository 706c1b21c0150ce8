#pragma once

namespace crtgen {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace crtgen
