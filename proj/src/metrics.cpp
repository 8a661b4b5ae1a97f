#include "cycgrid/metrics.hpp"

// header-only; this translation unit anchors the target in CMake
