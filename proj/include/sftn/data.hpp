// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "sftn/tensor.hpp"

// Desk-scale datasets: a procedural 10-class image generator (shape x color x
// texture), an IDX loader for real small images, and a self-describing binary
// export. Datasets are immutable after construction and carry a content hash;
// identical (generator, seed, size) always reproduces the same bytes.

namespace sftn {

struct Dataset {
  std::string id;          // e.g. "synth-vision/primary/n768/seed7"
  int classes = 0;
  Shape3 dims{3, 16, 16};
  std::vector<float> images;  // [n, c, h, w] in [0,1]
  std::vector<int> labels;
  std::vector<int> train_idx, test_idx;  // stratified 5:1 split
  uint64_t content_hash = 0;

  int64_t size() const { return int64_t(labels.size()); }
};

enum class SynthTask { Primary, Transfer };

Dataset gen_synth_vision(SynthTask task, int n, uint64_t seed);

// IDX format: images magic 0x00000803, labels magic 0x00000801, big-endian
// dimensions. Grayscale is replicated to 3 channels and bilinearly resized
// to 16x16, values scaled to [0,1].
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

// "SFDS" self-describing binary container.
void save_sfds(const Dataset& ds, const std::string& path);
Dataset load_sfds(const std::string& path);

// Deterministic minibatch order over `index_set`: the permutation is a pure
// function of (shuffle_seed, epoch); the last partial batch is kept.
std::vector<std::vector<int>> batches(const std::vector<int>& index_set, int batch_size,
                                      uint64_t shuffle_seed, int epoch);

// Gathers samples into a batch tensor of the requested scalar type.
template <class T>
Tensor<T> make_batch(const Dataset& ds, const std::vector<int>& idx) {
  const int64_t per = ds.dims.numel();
  std::vector<T> out(idx.size() * per);
  for (size_t i = 0; i < idx.size(); ++i)
    for (int64_t j = 0; j < per; ++j)
      out[i * per + j] = T(ds.images[int64_t(idx[i]) * per + j]);
  return Tensor<T>::from({int(idx.size()), ds.dims.c, ds.dims.h, ds.dims.w}, std::move(out));
}

inline std::vector<int> gather_labels(const Dataset& ds, const std::vector<int>& idx) {
  std::vector<int> out(idx.size());
  for (size_t i = 0; i < idx.size(); ++i) out[i] = ds.labels[idx[i]];
  return out;
}

}  // namespace sftn
