#pragma once

#include <cstdint>
#include <vector>

namespace fedlora {

// One classification example: a fixed-length token sequence and its label.
struct Example {
    std::vector<int> tokens;
    int label = 0;

    bool operator==(const Example&) const = default;
};

} // namespace fedlora
