#include "midccnn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace midccnn {
namespace {

constexpr char kMagic[4] = {'M', 'I', 'D', 'C'};
constexpr uint32_t kVersion = 1;
constexpr uint32_t kMaxRank = 32;
constexpr int64_t kMaxElements = int64_t{1} << 40;
constexpr const char* kConfigTensor = "__config__";

void put_u32(std::ostream& out, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

void put_f64(std::ostream& out, double d) {
  const uint64_t v = std::bit_cast<uint64_t>(d);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

uint32_t get_u32(std::istream& in, const std::string& context) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (in.gcount() != 4) fail("checkpoint: unexpected end of file " + context);
  return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 |
         static_cast<uint32_t>(b[2]) << 16 | static_cast<uint32_t>(b[3]) << 24;
}

void write_tensor(std::ostream& out, const std::string& name, const Shape& shape,
                  const std::vector<double>& values) {
  put_u32(out, static_cast<uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  put_u32(out, static_cast<uint32_t>(shape.size()));
  for (int d : shape) put_u32(out, static_cast<uint32_t>(d));
  for (double v : values) put_f64(out, v);
}

}  // namespace

void checkpoint_write(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("checkpoint: cannot open " + path + " for writing");
  out.write(kMagic, 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<uint32_t>(ckpt.tensors.size() + 1));
  std::vector<double> config_bytes(ckpt.config_json.begin(), ckpt.config_json.end());
  write_tensor(out, kConfigTensor, {std::max(1, static_cast<int>(config_bytes.size()))},
               config_bytes.empty() ? std::vector<double>{0.0} : config_bytes);
  for (const auto& [name, tensor] : ckpt.tensors)
    write_tensor(out, name, tensor->shape, tensor->values);
  if (!out) fail("checkpoint: write failed for " + path);
}

Checkpoint checkpoint_read(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("checkpoint: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0)
    fail("checkpoint: bad magic in " + path);
  const uint32_t version = get_u32(in, "reading format version");
  if (version != kVersion)
    fail("checkpoint: unsupported format version " + std::to_string(version) + " (expected " +
         std::to_string(kVersion) + ")");
  const uint32_t count = get_u32(in, "reading tensor count");

  Checkpoint ckpt;
  for (uint32_t t = 0; t < count; ++t) {
    const uint32_t name_len = get_u32(in, "in tensor header");
    if (name_len > 4096) fail("checkpoint: implausible tensor name length");
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (in.gcount() != static_cast<std::streamsize>(name_len))
      fail("checkpoint: unexpected end of file in tensor header");
    const uint32_t rank = get_u32(in, "in tensor " + name);
    if (rank == 0 || rank > kMaxRank)
      fail("checkpoint: dimension overflow in tensor " + name + " (rank " + std::to_string(rank) +
           ")");
    Shape shape;
    int64_t numel = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      const uint32_t dim = get_u32(in, "in tensor " + name);
      if (dim == 0 || dim > static_cast<uint32_t>(INT32_MAX))
        fail("checkpoint: dimension overflow in tensor " + name);
      numel *= dim;
      if (numel > kMaxElements) fail("checkpoint: dimension overflow in tensor " + name);
      shape.push_back(static_cast<int>(dim));
    }
    std::vector<double> values(static_cast<size_t>(numel));
    for (int64_t i = 0; i < numel; ++i) {
      unsigned char b[8];
      in.read(reinterpret_cast<char*>(b), 8);
      if (in.gcount() != 8)
        fail("checkpoint: unexpected end of file while reading tensor " + name);
      uint64_t v = 0;
      for (int j = 0; j < 8; ++j) v |= static_cast<uint64_t>(b[j]) << (8 * j);
      values[static_cast<size_t>(i)] = std::bit_cast<double>(v);
    }
    if (name == kConfigTensor) {
      ckpt.config_json.clear();
      for (double v : values) {
        const int byte = static_cast<int>(v);
        if (byte > 0) ckpt.config_json.push_back(static_cast<char>(byte));
      }
    } else {
      ckpt.tensors.emplace_back(name, make_tensor(std::move(shape), std::move(values)));
    }
  }
  return ckpt;
}

void save_bundle(const std::string& path, const Bundle& bundle, Adam* optimizer) {
  Checkpoint ckpt;
  ckpt.config_json = run_config_to_json(bundle.config);
  for (const auto& p : bundle.parameters()) ckpt.tensors.emplace_back(p.name, p.value);
  for (const auto& b : bundle.buffers()) ckpt.tensors.emplace_back(b->name, b);
  if (optimizer) {
    auto t = make_tensor(Shape{1}, {static_cast<double>(optimizer->step_count())});
    ckpt.tensors.emplace_back("adam.t", t);
    const auto& params = optimizer->params();
    for (size_t i = 0; i < params.size(); ++i) {
      ckpt.tensors.emplace_back("adam.m." + params[i].name, optimizer->first_moments()[i]);
      ckpt.tensors.emplace_back("adam.v." + params[i].name, optimizer->second_moments()[i]);
    }
  }
  checkpoint_write(path, ckpt);
}

Bundle load_bundle(const std::string& path) {
  Checkpoint ckpt = checkpoint_read(path);
  if (ckpt.config_json.empty()) fail("checkpoint: " + path + " carries no embedded config");
  Bundle bundle = make_bundle(run_config_from_json(ckpt.config_json));

  std::map<std::string, TensorPtr> want;
  for (const auto& p : bundle.parameters()) want[p.name] = p.value;
  for (const auto& b : bundle.buffers()) want[b->name] = b;

  for (const auto& [name, stored] : ckpt.tensors) {
    if (name.rfind("adam.", 0) == 0) continue;  // optimizer slots, not needed to serve the model
    auto it = want.find(name);
    if (it == want.end()) fail("checkpoint: tensor " + name + " does not match any model tensor");
    if (it->second->shape != stored->shape)
      fail("checkpoint: tensor " + name + " has shape " + shape_str(stored->shape) +
           ", model expects " + shape_str(it->second->shape));
    it->second->values = stored->values;
    want.erase(it);
  }
  if (!want.empty()) fail("checkpoint: missing tensor " + want.begin()->first);
  return bundle;
}

}  // namespace midccnn
