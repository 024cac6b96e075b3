#pragma once

#include <string>
#include <utility>
#include <vector>

#include "midccnn/tensor.hpp"

namespace midccnn {

struct LabeledDataset {
  struct Item {
    TensorPtr image;  // [3, H, W], values in [0, 1]
    int label = 0;
    std::string source_id;
  };
  std::vector<std::string> class_names;
  std::vector<Item> items;

  int num_classes() const { return static_cast<int>(class_names.size()); }
  size_t size() const { return items.size(); }
};

// 8-bit PPM (P6/P3) and PGM (P5/P2) codecs. Grayscale is replicated to
// three channels on load; images come back as [3, H, W] in [0, 1].
TensorPtr read_image(const std::string& path);
void write_ppm(const std::string& path, const TensorPtr& image);
bool png_supported();  // capability flag; PPM/PGM are always available

// Bilinear, edge-clamped; constants are preserved exactly.
TensorPtr resize_bilinear(const TensorPtr& image, int out_h, int out_w);

// Directory-per-class layout: root/<class_name>/*.{ppm,pgm,png}. Classes
// sort lexicographically into label indices; images are resized to
// target_size x target_size.
LabeledDataset load_image_dir(const std::string& root, int target_size);

// Per class: seeded shuffle, floor(ratio*n) to train, rest to test.
std::pair<LabeledDataset, LabeledDataset> stratified_split(const LabeledDataset& ds,
                                                           double train_ratio, uint64_t seed);

int synth_max_classes();  // number of defined glyphs

// Localized-cue benchmark: seeded noise background, shared clutter blobs,
// and one class-determining glyph (side image_size/4) placed uniformly at
// random. Bit-reproducible per (args, seed).
LabeledDataset synth_generate(int n_classes, int per_class, int image_size, uint64_t seed);

}  // namespace midccnn
