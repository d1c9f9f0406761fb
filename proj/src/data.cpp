// SPDX-License-Identifier: Apache-2.0
#include "sftn/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>

namespace sftn {

namespace {

constexpr int kImg = 16;

uint64_t dataset_hash(const Dataset& ds) {
  uint64_t h = 0xcbf29ce484222325ULL;
  h = fnv1a64(&ds.classes, sizeof(ds.classes), h);
  h = fnv1a64(&ds.dims, sizeof(ds.dims), h);
  h = fnv1a64(ds.labels.data(), ds.labels.size() * sizeof(int), h);
  h = fnv1a64(ds.images.data(), ds.images.size() * sizeof(float), h);
  return h;
}

// Stratified 5:1 split: within each class, every 6th occurrence goes to test.
void split_5to1(Dataset& ds) {
  std::vector<int> seen(ds.classes, 0);
  for (int i = 0; i < int(ds.labels.size()); ++i) {
    const int c = ds.labels[i];
    if (seen[c]++ % 6 == 5)
      ds.test_idx.push_back(i);
    else
      ds.train_idx.push_back(i);
  }
}

struct Rgb {
  float r, g, b;
};

// Procedural 16x16 renderers. Shapes 0-4 belong to the primary task, 5-9 to
// the transfer task; the tasks share no shape, palette pairing or texture
// assignment.
bool inside_shape(int shape, float x, float y, float cx, float cy, float rad, float phase) {
  const float dx = x - cx, dy = y - cy;
  switch (shape) {
    case 0:  // disk
      return dx * dx + dy * dy <= rad * rad;
    case 1:  // filled square
      return std::abs(dx) <= rad * 0.9f && std::abs(dy) <= rad * 0.9f;
    case 2:  // upward triangle
      return dy >= -rad && dy <= rad && std::abs(dx) <= (dy + rad) * 0.6f;
    case 3: {  // ring
      const float d2 = dx * dx + dy * dy;
      return d2 <= rad * rad && d2 >= rad * rad * 0.30f;
    }
    case 4:  // plus / cross
      return (std::abs(dx) <= rad * 0.35f && std::abs(dy) <= rad) ||
             (std::abs(dy) <= rad * 0.35f && std::abs(dx) <= rad);
    case 5:  // horizontal stripes
      return int(std::floor((y + phase) / 3.0f)) % 2 == 0;
    case 6:  // vertical stripes
      return int(std::floor((x + phase) / 3.0f)) % 2 == 0;
    case 7:  // checkerboard
      return (int(std::floor((x + phase) / 4.0f)) + int(std::floor((y + phase) / 4.0f))) % 2 ==
             0;
    case 8:  // diagonal band
      return std::abs(dx + dy) <= rad * 0.8f;
    case 9: {  // four dots
      const float qx = std::abs(dx) - rad * 0.55f, qy = std::abs(dy) - rad * 0.55f;
      return qx * qx + qy * qy <= rad * rad * 0.16f;
    }
  }
  return false;
}

struct ClassDef {
  int shape;
  Rgb fg, bg;
  bool textured;  // light grating overlaid on the background
};

std::vector<ClassDef> class_table(SynthTask task) {
  const Rgb warm{0.85f, 0.30f, 0.15f}, warm_bg{0.10f, 0.22f, 0.30f};
  const Rgb cool{0.20f, 0.45f, 0.90f}, cool_bg{0.28f, 0.26f, 0.10f};
  const Rgb green{0.25f, 0.80f, 0.30f}, green_bg{0.25f, 0.10f, 0.28f};
  const Rgb gold{0.90f, 0.75f, 0.20f}, gold_bg{0.12f, 0.12f, 0.35f};
  std::vector<ClassDef> t(10);
  if (task == SynthTask::Primary) {
    for (int c = 0; c < 10; ++c) {
      const bool second = c >= 5;
      t[c] = {c % 5, second ? cool : warm, second ? cool_bg : warm_bg, (c % 2) == 1};
    }
  } else {
    for (int c = 0; c < 10; ++c) {
      const bool second = c >= 5;
      t[c] = {5 + c % 5, second ? gold : green, second ? gold_bg : green_bg, (c % 2) == 0};
    }
  }
  return t;
}

void render_sample(const ClassDef& def, Rng& rng, float* out) {
  const float cx = 7.5f + float(rng.uniform() * 5.0 - 2.5);
  const float cy = 7.5f + float(rng.uniform() * 5.0 - 2.5);
  const float rad = 4.4f * (1.0f + float(rng.uniform() * 0.5 - 0.25));
  const float phase = float(rng.uniform() * 4.0);
  const float bright = 1.0f + float(rng.uniform() * 0.5 - 0.25);  // global illumination
  // a slice of samples is rendered at very low contrast: genuinely ambiguous
  // images keep hard labels from being fully trustworthy
  const bool faint = rng.uniform() < 0.15;
  auto jitter = [&](float v) { return bright * (v + float(rng.uniform() * 0.3 - 0.15)); };
  Rgb fg{jitter(def.fg.r), jitter(def.fg.g), jitter(def.fg.b)};
  const Rgb bg{jitter(def.bg.r), jitter(def.bg.g), jitter(def.bg.b)};
  if (faint) {
    const float mix = 0.82f;
    fg = {bg.r + (fg.r - bg.r) * (1 - mix), bg.g + (fg.g - bg.g) * (1 - mix),
          bg.b + (fg.b - bg.b) * (1 - mix)};
  }
  // an occluding band hides part of the shape in some samples
  const bool occlude = rng.uniform() < 0.25;
  const int occ_row = int(rng.uniform_int(kImg));

  for (int y = 0; y < kImg; ++y) {
    for (int x = 0; x < kImg; ++x) {
      const bool in = inside_shape(def.shape, float(x), float(y), cx, cy, rad, phase);
      Rgb px = in ? fg : bg;
      if (def.textured && !in && (x + y) % 4 < 2) {
        px.r += 0.10f;
        px.g += 0.10f;
        px.b += 0.10f;
      }
      if (occlude && std::abs(y - occ_row) <= 1) px = {bg.g, bg.b, bg.r};
      const int i = y * kImg + x;
      out[0 * kImg * kImg + i] = px.r;
      out[1 * kImg * kImg + i] = px.g;
      out[2 * kImg * kImg + i] = px.b;
    }
  }
  // pixel noise
  for (int i = 0; i < 3 * kImg * kImg; ++i) {
    float v = out[i] + float(rng.normal() * 0.12);
    out[i] = std::clamp(v, 0.0f, 1.0f);
  }
}

uint32_t rd_u32_be(std::istream& is, const char* what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw IoError(std::string("IDX file truncated while reading ") + what);
  return uint32_t(b[0]) << 24 | uint32_t(b[1]) << 16 | uint32_t(b[2]) << 8 | uint32_t(b[3]);
}

void wr_u32_le(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t rd_u32_le(std::istream& is, const char* what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw IoError(std::string("SFDS file truncated while reading ") + what);
  return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}

}  // namespace

Dataset gen_synth_vision(SynthTask task, int n, uint64_t seed) {
  constexpr int kClasses = 10;
  if (n < kClasses) throw ConfigError("gen_synth_vision: need n >= 10, got " + std::to_string(n));
  Dataset ds;
  ds.classes = kClasses;
  ds.dims = {3, kImg, kImg};
  ds.labels.resize(n);
  ds.images.resize(int64_t(n) * ds.dims.numel());
  const auto table = class_table(task);
  for (int i = 0; i < n; ++i) {
    ds.labels[i] = i % kClasses;  // round-robin keeps the histogram balanced
    Rng rng(derive_seed(seed, 0x5A17 + uint64_t(i)));
    render_sample(table[ds.labels[i]], rng, ds.images.data() + int64_t(i) * ds.dims.numel());
  }
  split_5to1(ds);
  ds.content_hash = dataset_hash(ds);
  ds.id = std::string("synth-vision/") + (task == SynthTask::Primary ? "primary" : "transfer") +
          "/n" + std::to_string(n) + "/seed" + std::to_string(seed) + "/" +
          hash_hex(ds.content_hash);
  return ds;
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream imgs(images_path, std::ios::binary);
  if (!imgs) throw IoError("cannot open IDX images: " + images_path);
  std::ifstream lbls(labels_path, std::ios::binary);
  if (!lbls) throw IoError("cannot open IDX labels: " + labels_path);

  const uint32_t img_magic = rd_u32_be(imgs, "image magic");
  if (img_magic != 0x00000803)
    throw IoError("bad IDX image magic 0x" + hash_hex(img_magic).substr(8) + " in " +
                  images_path + " (expected 0x00000803)");
  const uint32_t lbl_magic = rd_u32_be(lbls, "label magic");
  if (lbl_magic != 0x00000801)
    throw IoError("bad IDX label magic 0x" + hash_hex(lbl_magic).substr(8) + " in " +
                  labels_path + " (expected 0x00000801)");

  const uint32_t n_img = rd_u32_be(imgs, "image count");
  const uint32_t rows = rd_u32_be(imgs, "rows");
  const uint32_t cols = rd_u32_be(imgs, "cols");
  const uint32_t n_lbl = rd_u32_be(lbls, "label count");
  if (n_img == 0) throw IoError("IDX file declares zero images: " + images_path);
  if (n_img != n_lbl)
    throw IoError("IDX count mismatch: " + std::to_string(n_img) + " images vs " +
                  std::to_string(n_lbl) + " labels");
  if (rows == 0 || cols == 0) throw IoError("IDX file declares empty images: " + images_path);

  std::vector<unsigned char> raw(int64_t(rows) * cols);
  std::vector<unsigned char> labels_raw(n_lbl);
  if (!lbls.read(reinterpret_cast<char*>(labels_raw.data()), n_lbl))
    throw IoError("IDX labels truncated: " + labels_path);

  Dataset ds;
  ds.dims = {3, kImg, kImg};
  ds.labels.resize(n_img);
  ds.images.resize(int64_t(n_img) * ds.dims.numel());
  int max_label = 0;
  for (uint32_t i = 0; i < n_img; ++i) {
    if (!imgs.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size())))
      throw IoError("IDX images truncated at sample " + std::to_string(i) + ": " + images_path);
    ds.labels[i] = labels_raw[i];
    max_label = std::max(max_label, ds.labels[i]);
    // bilinear resize rows x cols -> 16x16, replicate to 3 channels
    float* out = ds.images.data() + int64_t(i) * ds.dims.numel();
    const float sy = float(rows) / kImg, sx = float(cols) / kImg;
    for (int y = 0; y < kImg; ++y) {
      const float fy = std::max(0.0f, (y + 0.5f) * sy - 0.5f);
      const int y0 = std::min<int>(int(fy), rows - 1);
      const int y1 = std::min<int>(y0 + 1, rows - 1);
      const float wy = fy - float(y0);
      for (int x = 0; x < kImg; ++x) {
        const float fx = std::max(0.0f, (x + 0.5f) * sx - 0.5f);
        const int x0 = std::min<int>(int(fx), cols - 1);
        const int x1 = std::min<int>(x0 + 1, cols - 1);
        const float wx = fx - float(x0);
        const float v00 = raw[int64_t(y0) * cols + x0], v01 = raw[int64_t(y0) * cols + x1];
        const float v10 = raw[int64_t(y1) * cols + x0], v11 = raw[int64_t(y1) * cols + x1];
        const float v = (v00 * (1 - wx) + v01 * wx) * (1 - wy) +
                        (v10 * (1 - wx) + v11 * wx) * wy;
        const float g = v / 255.0f;
        out[0 * kImg * kImg + y * kImg + x] = g;
        out[1 * kImg * kImg + y * kImg + x] = g;
        out[2 * kImg * kImg + y * kImg + x] = g;
      }
    }
  }
  ds.classes = max_label + 1;
  split_5to1(ds);
  ds.content_hash = dataset_hash(ds);
  ds.id = "idx/" + images_path + "/" + hash_hex(ds.content_hash);
  return ds;
}

void save_sfds(const Dataset& ds, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write dataset: " + path);
  os.write("SFDS", 4);
  wr_u32_le(os, 1);  // version
  wr_u32_le(os, uint32_t(ds.size()));
  wr_u32_le(os, uint32_t(ds.classes));
  wr_u32_le(os, uint32_t(ds.dims.c));
  wr_u32_le(os, uint32_t(ds.dims.h));
  wr_u32_le(os, uint32_t(ds.dims.w));
  wr_u32_le(os, uint32_t(ds.id.size()));
  os.write(ds.id.data(), std::streamsize(ds.id.size()));
  for (int v : ds.labels) wr_u32_le(os, uint32_t(v));
  for (float v : ds.images) wr_u32_le(os, std::bit_cast<uint32_t>(v));
  if (!os) throw IoError("write failed: " + path);
}

Dataset load_sfds(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open dataset: " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "SFDS", 4) != 0)
    throw IoError("bad dataset magic in " + path + " (expected SFDS)");
  const uint32_t version = rd_u32_le(is, "version");
  if (version != 1)
    throw IoError("unsupported dataset version " + std::to_string(version) + " in " + path);
  Dataset ds;
  const uint32_t n = rd_u32_le(is, "sample count");
  ds.classes = int(rd_u32_le(is, "classes"));
  ds.dims.c = int(rd_u32_le(is, "dims"));
  ds.dims.h = int(rd_u32_le(is, "dims"));
  ds.dims.w = int(rd_u32_le(is, "dims"));
  const uint32_t id_len = rd_u32_le(is, "id");
  std::string id(id_len, '\0');
  if (!is.read(id.data(), id_len)) throw IoError("dataset truncated reading id: " + path);
  ds.id = id;
  ds.labels.resize(n);
  for (auto& v : ds.labels) v = int(rd_u32_le(is, "labels"));
  ds.images.resize(int64_t(n) * ds.dims.numel());
  for (auto& v : ds.images) v = std::bit_cast<float>(rd_u32_le(is, "images"));
  split_5to1(ds);
  ds.content_hash = dataset_hash(ds);
  return ds;
}

std::vector<std::vector<int>> batches(const std::vector<int>& index_set, int batch_size,
                                      uint64_t shuffle_seed, int epoch) {
  if (batch_size < 1) throw ConfigError("batches: batch_size must be >= 1");
  std::vector<int> order = index_set;
  Rng rng(derive_seed(shuffle_seed, 0xE70C + uint64_t(epoch)));
  for (size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[rng.uniform_int(i)]);
  std::vector<std::vector<int>> out;
  for (size_t at = 0; at < order.size(); at += size_t(batch_size)) {
    const size_t end = std::min(order.size(), at + size_t(batch_size));
    out.emplace_back(order.begin() + at, order.begin() + end);
  }
  return out;
}

}  // namespace sftn
