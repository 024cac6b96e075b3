#include "midccnn/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;

namespace midccnn {
namespace {

int next_header_int(std::istream& in, const std::string& path) {
  // PNM headers allow '#' comments anywhere between tokens
  int ch;
  while ((ch = in.peek()) != EOF) {
    if (std::isspace(ch)) {
      in.get();
    } else if (ch == '#') {
      std::string skip;
      std::getline(in, skip);
    } else {
      break;
    }
  }
  int value = -1;
  if (!(in >> value)) fail("cannot decode " + path + ": malformed PNM header");
  return value;
}

}  // namespace

TensorPtr read_image(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open image " + path);
  char m0 = 0, m1 = 0;
  in.get(m0);
  in.get(m1);
  if (m0 != 'P' || (m1 != '2' && m1 != '3' && m1 != '5' && m1 != '6'))
    fail("cannot decode " + path + ": not a P2/P3/P5/P6 PNM file");
  const bool color = m1 == '3' || m1 == '6';
  const bool ascii = m1 == '2' || m1 == '3';
  const int w = next_header_int(in, path);
  const int h = next_header_int(in, path);
  const int maxval = next_header_int(in, path);
  if (w <= 0 || h <= 0) fail("cannot decode " + path + ": bad dimensions");
  if (maxval <= 0 || maxval > 255)
    fail("cannot decode " + path + ": only 8-bit PNM supported (maxval " +
         std::to_string(maxval) + ")");
  const int64_t pixels = static_cast<int64_t>(w) * h;
  const int64_t samples = pixels * (color ? 3 : 1);
  std::vector<int> raw(static_cast<size_t>(samples));
  if (ascii) {
    for (int64_t i = 0; i < samples; ++i) {
      if (!(in >> raw[i])) fail("cannot decode " + path + ": truncated pixel data");
    }
  } else {
    in.get();  // exactly one whitespace byte after maxval
    std::vector<unsigned char> bytes(static_cast<size_t>(samples));
    in.read(reinterpret_cast<char*>(bytes.data()), samples);
    if (in.gcount() != samples) fail("cannot decode " + path + ": truncated pixel data");
    for (int64_t i = 0; i < samples; ++i) raw[i] = bytes[i];
  }
  auto img = make_tensor({3, h, w});
  const double inv = 1.0 / maxval;
  for (int64_t p = 0; p < pixels; ++p) {
    if (color) {
      for (int c = 0; c < 3; ++c) img->values[c * pixels + p] = raw[p * 3 + c] * inv;
    } else {
      const double v = raw[p] * inv;  // grayscale replicated to 3 channels
      for (int c = 0; c < 3; ++c) img->values[c * pixels + p] = v;
    }
  }
  return img;
}

void write_ppm(const std::string& path, const TensorPtr& image) {
  if (image->rank() != 3 || image->shape[0] != 3)
    fail("write_ppm: expected [3, H, W], got " + shape_str(image->shape));
  const int h = image->shape[1], w = image->shape[2];
  const int64_t pixels = static_cast<int64_t>(h) * w;
  std::vector<unsigned char> bytes(static_cast<size_t>(pixels) * 3);
  for (int64_t p = 0; p < pixels; ++p)
    for (int c = 0; c < 3; ++c) {
      const double v = std::clamp(image->values[c * pixels + p], 0.0, 1.0);
      bytes[p * 3 + c] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("write_ppm: cannot open " + path);
  out << "P6\n" << w << " " << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail("write_ppm: write failed for " + path);
}

bool png_supported() { return false; }

TensorPtr resize_bilinear(const TensorPtr& image, int out_h, int out_w) {
  if (image->rank() != 3) fail("resize_bilinear: expected [C, H, W], got " + shape_str(image->shape));
  const int c = image->shape[0], h = image->shape[1], w = image->shape[2];
  if (out_h == h && out_w == w) return make_tensor(image->shape, image->values);
  auto out = make_tensor({c, out_h, out_w});
  const double sy = static_cast<double>(h) / out_h;
  const double sx = static_cast<double>(w) / out_w;
  // lerp(a,b,t) = a + (b-a)*t keeps constant images exactly constant
  auto lerp = [](double a, double b, double t) { return a + (b - a) * t; };
  for (int ch = 0; ch < c; ++ch) {
    const double* src = image->values.data() + static_cast<int64_t>(ch) * h * w;
    double* dst = out->values.data() + static_cast<int64_t>(ch) * out_h * out_w;
    for (int y = 0; y < out_h; ++y) {
      const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
      const int y0 = static_cast<int>(fy);
      const int y1 = std::min(y0 + 1, h - 1);
      const double ty = fy - y0;
      for (int x = 0; x < out_w; ++x) {
        const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
        const int x0 = static_cast<int>(fx);
        const int x1 = std::min(x0 + 1, w - 1);
        const double tx = fx - x0;
        const double top = lerp(src[y0 * w + x0], src[y0 * w + x1], tx);
        const double bot = lerp(src[y1 * w + x0], src[y1 * w + x1], tx);
        dst[y * out_w + x] = lerp(top, bot, ty);
      }
    }
  }
  return out;
}

LabeledDataset load_image_dir(const std::string& root, int target_size) {
  if (!fs::is_directory(root)) fail("load_image_dir: " + root + " is not a directory");
  std::vector<std::string> classes;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory()) classes.push_back(entry.path().filename().string());
  std::sort(classes.begin(), classes.end());
  if (classes.empty()) fail("load_image_dir: no class subdirectories under " + root);

  LabeledDataset ds;
  ds.class_names = classes;
  for (size_t label = 0; label < classes.size(); ++label) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(fs::path(root) / classes[label])) {
      if (!entry.is_regular_file()) continue;
      std::string ext = entry.path().extension().string();
      std::transform(ext.begin(), ext.end(), ext.begin(),
                     [](unsigned char ch) { return std::tolower(ch); });
      if (ext == ".ppm" || ext == ".pgm" || ext == ".png") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty())
      fail("load_image_dir: class directory " + classes[label] + " contains no images");
    for (const auto& file : files) {
      if (file.extension() == ".png" && !png_supported())
        fail("cannot decode " + file.string() + ": PNG support not built in");
      TensorPtr img = resize_bilinear(read_image(file.string()), target_size, target_size);
      ds.items.push_back({img, static_cast<int>(label), classes[label] + "/" +
                                                            file.filename().string()});
    }
  }
  return ds;
}

std::pair<LabeledDataset, LabeledDataset> stratified_split(const LabeledDataset& ds,
                                                           double train_ratio, uint64_t seed) {
  if (!(train_ratio > 0.0 && train_ratio < 1.0))
    fail("stratified_split: train_ratio must be in (0, 1), got " + std::to_string(train_ratio));
  LabeledDataset train, test;
  train.class_names = test.class_names = ds.class_names;
  Rng rng(seed);
  for (int label = 0; label < ds.num_classes(); ++label) {
    std::vector<size_t> idx;
    for (size_t i = 0; i < ds.items.size(); ++i)
      if (ds.items[i].label == label) idx.push_back(i);
    if (idx.size() < 2)
      fail("stratified_split: class " + ds.class_names[label] + " has fewer than 2 items");
    std::shuffle(idx.begin(), idx.end(), rng);
    const size_t n_train = static_cast<size_t>(std::floor(train_ratio * idx.size()));
    for (size_t i = 0; i < idx.size(); ++i)
      (i < n_train ? train : test).items.push_back(ds.items[idx[i]]);
  }
  return {train, test};
}

namespace {

// Stable integer mixing so synthetic data is identical across platforms.
uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr const char* kGlyphNames[] = {"square", "cross", "diagonal", "ring",
                                       "t_shape", "l_shape", "checker", "stripes"};

// Mask for glyph `kind` over local coordinates in a g x g box.
bool glyph_mask(int kind, int y, int x, int g) {
  const int t = std::max(2, g / 5);
  const int mid = g / 2;
  switch (kind) {
    case 0:  // square (filled)
      return true;
    case 1:  // cross
      return std::abs(x - mid) < t / 2 + 1 || std::abs(y - mid) < t / 2 + 1;
    case 2:  // diagonal band
      return std::abs(x - y) < t;
    case 3: {  // ring
      const double r = std::hypot(y - (g - 1) / 2.0, x - (g - 1) / 2.0);
      return r <= g / 2.0 && r >= g / 2.0 - t;
    }
    case 4:  // T
      return y < t || std::abs(x - mid) < t / 2 + 1;
    case 5:  // L
      return x < t || y >= g - t;
    case 6:  // checker, 4x4 cells
      return ((4 * y / g) + (4 * x / g)) % 2 == 0;
    case 7:  // horizontal stripes
      return (y / std::max(1, g / 4)) % 2 == 0;
  }
  return false;
}

void add_rect(std::vector<double>& plane, int size, int y0, int x0, int rh, int rw, double delta) {
  for (int y = y0; y < std::min(size, y0 + rh); ++y)
    for (int x = x0; x < std::min(size, x0 + rw); ++x) plane[static_cast<size_t>(y) * size + x] += delta;
}

}  // namespace

int synth_max_classes() { return static_cast<int>(std::size(kGlyphNames)); }

LabeledDataset synth_generate(int n_classes, int per_class, int image_size, uint64_t seed) {
  if (n_classes < 1 || n_classes > synth_max_classes())
    fail("synth_generate: n_classes must be in [1, " + std::to_string(synth_max_classes()) +
         "], got " + std::to_string(n_classes));
  if (per_class < 1) fail("synth_generate: per_class must be positive");
  if (image_size < 32 || image_size % 32 != 0)
    fail("synth_generate: image_size must be a positive multiple of 32, got " +
         std::to_string(image_size));

  const int g = image_size / 4;
  const double kDelta = 0.35;
  LabeledDataset ds;
  for (int c = 0; c < n_classes; ++c) ds.class_names.push_back(kGlyphNames[c]);

  for (int label = 0; label < n_classes; ++label) {
    for (int item = 0; item < per_class; ++item) {
      Rng rng(splitmix64(seed ^ splitmix64(static_cast<uint64_t>(label) * 7919u + 13u) ^
                         splitmix64(static_cast<uint64_t>(item) * 104729u + 29u)));
      std::normal_distribution<double> noise(0.45, 0.09);
      std::uniform_int_distribution<int> coord(0, image_size - 1);
      const int64_t pixels = static_cast<int64_t>(image_size) * image_size;
      std::vector<double> plane(static_cast<size_t>(pixels));
      for (auto& v : plane) v = noise(rng);

      // shared clutter: small bars and rectangles, label-independent
      const int n_clutter = 5 + static_cast<int>(rng() % 4);
      for (int b = 0; b < n_clutter; ++b) {
        const int kind = static_cast<int>(rng() % 3);
        const int y0 = coord(rng), x0 = coord(rng);
        const int t = 2 + static_cast<int>(rng() % 3);
        const int len = g / 3 + static_cast<int>(rng() % (g / 2));
        if (kind == 0) add_rect(plane, image_size, y0, x0, len, t, kDelta);        // vertical bar
        else if (kind == 1) add_rect(plane, image_size, y0, x0, t, len, kDelta);   // horizontal bar
        else add_rect(plane, image_size, y0, x0, t + static_cast<int>(rng() % (g / 3)),
                      t + static_cast<int>(rng() % (g / 3)), kDelta);              // blob
      }

      // class-determining glyph, bounding box clamped inside the image
      std::uniform_int_distribution<int> place(0, image_size - g);
      const int gy = place(rng), gx = place(rng);
      for (int y = 0; y < g; ++y)
        for (int x = 0; x < g; ++x)
          if (glyph_mask(label, y, x, g))
            plane[static_cast<size_t>(gy + y) * image_size + gx + x] += kDelta;

      auto img = make_tensor({3, image_size, image_size});
      for (int64_t p = 0; p < pixels; ++p) {
        const double v = std::clamp(plane[static_cast<size_t>(p)], 0.0, 1.0);
        for (int ch = 0; ch < 3; ++ch) img->values[ch * pixels + p] = v;
      }
      // glyph bounding box rides along as "@y,x,side" metadata
      ds.items.push_back({img, label,
                          "synth/" + std::string(kGlyphNames[label]) + "/" + std::to_string(item) +
                              "@" + std::to_string(gy) + "," + std::to_string(gx) + "," +
                              std::to_string(g)});
    }
  }
  return ds;
}

}  // namespace midccnn
