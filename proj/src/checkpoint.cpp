// SPDX-License-Identifier: Apache-2.0
#include "sftn/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <fstream>

namespace sftn {

namespace {

constexpr char kMagic[4] = {'S', 'F', 'T', 'N'};

void wr_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

void wr_i32(std::ostream& os, int32_t v) { wr_u32(os, static_cast<uint32_t>(v)); }

void wr_str(std::ostream& os, const std::string& s) {
  wr_u32(os, uint32_t(s.size()));
  os.write(s.data(), std::streamsize(s.size()));
}

void wr_f32(std::ostream& os, const float* p, size_t n) {
  for (size_t i = 0; i < n; ++i) wr_u32(os, std::bit_cast<uint32_t>(p[i]));
}

uint32_t rd_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw IoError(std::string("checkpoint truncated while reading ") + what);
  return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}

int32_t rd_i32(std::istream& is, const char* what) {
  return static_cast<int32_t>(rd_u32(is, what));
}

std::string rd_str(std::istream& is, const char* what) {
  const uint32_t len = rd_u32(is, what);
  if (len > (1u << 20)) throw IoError(std::string("checkpoint: implausible string length for ") + what);
  std::string s(len, '\0');
  if (!is.read(s.data(), len))
    throw IoError(std::string("checkpoint truncated while reading ") + what);
  return s;
}

void wr_layer(std::ostream& os, const LayerDesc& l) {
  wr_u32(os, uint32_t(l.kind));
  wr_i32(os, l.in_ch);
  wr_i32(os, l.out_ch);
  wr_i32(os, l.k);
  wr_i32(os, l.stride);
  wr_i32(os, l.pad);
  wr_i32(os, l.groups);
}

LayerDesc rd_layer(std::istream& is) {
  LayerDesc l;
  const uint32_t kind = rd_u32(is, "layer kind");
  if (kind > uint32_t(LayerKind::MaxPool))
    throw IoError("checkpoint: unknown layer kind " + std::to_string(kind));
  l.kind = LayerKind(kind);
  l.in_ch = rd_i32(is, "layer");
  l.out_ch = rd_i32(is, "layer");
  l.k = rd_i32(is, "layer");
  l.stride = rd_i32(is, "layer");
  l.pad = rd_i32(is, "layer");
  l.groups = rd_i32(is, "layer");
  return l;
}

}  // namespace

void save_blocknet(BlockNet<float>& net, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write checkpoint: " + path);
  os.write(kMagic, 4);
  wr_u32(os, kCheckpointVersion);

  const ArchSpec& a = net.arch();
  wr_str(os, a.id);
  wr_i32(os, a.input.c);
  wr_i32(os, a.input.h);
  wr_i32(os, a.input.w);
  wr_i32(os, a.classes);
  wr_u32(os, uint32_t(a.blocks.size()));
  for (const auto& b : a.blocks) {
    wr_u32(os, uint32_t(b.layers.size()));
    for (const auto& l : b.layers) wr_layer(os, l);
  }

  auto tensors = net.state();
  wr_u32(os, uint32_t(tensors.size()));
  for (auto& t : tensors) {
    wr_str(os, t.name);
    wr_u32(os, uint32_t(t.shape.size()));
    for (int d : t.shape) wr_i32(os, d);
    wr_f32(os, t.values->data(), t.values->size());
  }
  if (!os) throw IoError("write failed: " + path);
}

BlockNet<float> load_blocknet(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path);

  char magic[4];
  if (!is.read(magic, 4)) throw IoError("checkpoint truncated while reading magic: " + path);
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw IoError("bad checkpoint magic '" + std::string(magic, 4) + "' in " + path);
  const uint32_t version = rd_u32(is, "version");
  if (version != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version) + " in " + path);

  ArchSpec a;
  a.id = rd_str(is, "arch id");
  a.input.c = rd_i32(is, "input shape");
  a.input.h = rd_i32(is, "input shape");
  a.input.w = rd_i32(is, "input shape");
  a.classes = rd_i32(is, "classes");
  const uint32_t nblocks = rd_u32(is, "block count");
  for (uint32_t b = 0; b < nblocks; ++b) {
    BlockSpec bs;
    const uint32_t nl = rd_u32(is, "layer count");
    for (uint32_t l = 0; l < nl; ++l) bs.layers.push_back(rd_layer(is));
    a.blocks.push_back(std::move(bs));
  }

  BlockNet<float> net(std::move(a));
  auto tensors = net.state();
  const uint32_t count = rd_u32(is, "tensor count");
  if (count != tensors.size())
    throw IoError("checkpoint tensor count " + std::to_string(count) + " != expected " +
                  std::to_string(tensors.size()) + " in " + path);
  for (auto& t : tensors) {
    const std::string name = rd_str(is, "tensor name");
    if (name != t.name)
      throw IoError("checkpoint tensor order mismatch: got '" + name + "', expected '" +
                    t.name + "' in " + path);
    const uint32_t nd = rd_u32(is, "tensor rank");
    Shape sh(nd);
    for (uint32_t d = 0; d < nd; ++d) sh[d] = rd_i32(is, "tensor dims");
    if (sh != t.shape)
      throw IoError("checkpoint tensor '" + name + "' shape " + shape_str(sh) +
                    " != expected " + shape_str(t.shape) + " in " + path);
    for (auto& v : *t.values) v = std::bit_cast<float>(rd_u32(is, name.c_str()));
  }
  return net;
}

uint64_t file_hash(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for hashing: " + path);
  uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
    h = fnv1a64(buf, size_t(is.gcount()), h);
    if (is.eof()) break;
  }
  return h;
}

}  // namespace sftn
