#pragma once

namespace esdllm {

inline constexpr const char * kEngineVersion = "0.1.0";

}  // namespace esdllm
