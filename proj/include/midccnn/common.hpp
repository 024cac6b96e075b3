#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace midccnn {

// Dimensions are positive; empty shapes are not allowed.
using Shape = std::vector<int>;

using Rng = std::mt19937_64;

enum class Mode { train, eval };

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Enables NaN/Inf scans on every op output plus extra invariant checks.
// Off by default; tests switch it on. MIDCCNN_DEBUG_CHECKS=1 also enables it.
bool debug_checks();
void set_debug_checks(bool on);

[[noreturn]] void fail(const std::string& msg);

}  // namespace midccnn
