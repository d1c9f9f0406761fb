// SPDX-License-Identifier: Apache-2.0
#include "sftn/nn.hpp"

namespace sftn {

namespace {

// conv3x3-bn-relu x2 + maxpool2
BlockSpec full_conv_block(int in_ch, int out_ch) {
  BlockSpec b;
  b.layers = {
      LayerDesc::conv(in_ch, out_ch, 3, 1, 1),  LayerDesc::batchnorm(out_ch),
      LayerDesc::relu(),
      LayerDesc::conv(out_ch, out_ch, 3, 1, 1), LayerDesc::batchnorm(out_ch),
      LayerDesc::relu(),
      LayerDesc::maxpool(2, 2),
  };
  return b;
}

// depthwise 3x3 + pointwise 1x1, each bn-relu, + maxpool2
BlockSpec separable_block(int in_ch, int out_ch) {
  BlockSpec b;
  b.layers = {
      LayerDesc::conv(in_ch, in_ch, 3, 1, 1, in_ch), LayerDesc::batchnorm(in_ch),
      LayerDesc::relu(),
      LayerDesc::conv(in_ch, out_ch, 1, 1, 0),       LayerDesc::batchnorm(out_ch),
      LayerDesc::relu(),
      LayerDesc::maxpool(2, 2),
  };
  return b;
}

ArchSpec three_blocks(const std::string& id, Shape3 input, int classes, int c1, int c2,
                      int c3, bool separable) {
  ArchSpec a;
  a.id = id;
  a.input = input;
  a.classes = classes;
  auto mk = separable ? separable_block : full_conv_block;
  a.blocks = {mk(input.c, c1), mk(c1, c2), mk(c2, c3)};
  finalize_arch(a);
  return a;
}

}  // namespace

ArchSpec make_arch(const std::string& id, Shape3 input, int classes) {
  if (id == "teacher-s3") return three_blocks(id, input, classes, 32, 64, 128, false);
  if (id == "student-s3") return three_blocks(id, input, classes, 8, 16, 32, false);
  if (id == "student-h3") return three_blocks(id, input, classes, 8, 16, 32, true);
  throw ConfigError("unknown architecture id '" + id + "'");
}

}  // namespace sftn
