#pragma once

namespace medrat {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace medrat
