#pragma once

#include <string>
#include <utility>
#include <vector>

#include "midccnn/config.hpp"

namespace midccnn {

// Binary container, little-endian throughout:
//   magic "MIDC" | u32 format version | u32 tensor count |
//   per tensor: u32 name length | UTF-8 name | u32 rank | u32 dims... |
//               float64 payload.
// The run config travels as a byte tensor named "__config__" (one float64
// per byte of JSON text).
struct Checkpoint {
  std::string config_json;
  std::vector<std::pair<std::string, TensorPtr>> tensors;
};

void checkpoint_write(const std::string& path, const Checkpoint& ckpt);
Checkpoint checkpoint_read(const std::string& path);

// Bundles the model, head, BN running stats and (optionally) the Adam
// state; round-trips bit-identically.
void save_bundle(const std::string& path, const Bundle& bundle, Adam* optimizer = nullptr);
Bundle load_bundle(const std::string& path);

}  // namespace midccnn
