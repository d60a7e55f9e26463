#pragma once

namespace xmk {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace xmk
