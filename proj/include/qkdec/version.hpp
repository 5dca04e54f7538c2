#pragma once

namespace qkdec {

inline constexpr const char* kVersion = "0.1.0";

} // namespace qkdec
