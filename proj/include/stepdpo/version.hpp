#pragma once

namespace stepdpo {

inline constexpr const char* kToolVersion = "0.1.0";

}  // namespace stepdpo
