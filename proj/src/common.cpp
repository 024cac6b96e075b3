#include "midccnn/common.hpp"

#include <atomic>
#include <cstdlib>
#include <sstream>

namespace midccnn {

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

namespace {
std::atomic<bool>& debug_flag() {
  static std::atomic<bool> flag = [] {
    const char* env = std::getenv("MIDCCNN_DEBUG_CHECKS");
    return env != nullptr && env[0] == '1';
  }();
  return flag;
}
}  // namespace

bool debug_checks() { return debug_flag().load(std::memory_order_relaxed); }
void set_debug_checks(bool on) { debug_flag().store(on, std::memory_order_relaxed); }

void fail(const std::string& msg) { throw std::runtime_error(msg); }

}  // namespace midccnn
