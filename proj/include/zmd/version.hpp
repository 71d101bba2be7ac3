#pragma once

#define ZMD_VERSION_MAJOR 0
#define ZMD_VERSION_MINOR 1
#define ZMD_VERSION_PATCH 0
#define ZMD_VERSION_STRING "0.1.0"

namespace zmd {
inline const char* version() { return ZMD_VERSION_STRING; }
}  // namespace zmd
