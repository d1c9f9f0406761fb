// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>
#include <string>
#include <vector>

#include "sftn/ops.hpp"

// Block-modular networks: a net is N blocks of conv/bn/relu/pool layers with
// a per-block feature tap, followed by a global-avgpool + linear head. Blocks
// are the unit at which features are tapped and student branches attach.

namespace sftn {

enum class LayerKind { Conv, ConvTranspose, BatchNorm, Relu, MaxPool };

struct LayerDesc {
  LayerKind kind = LayerKind::Relu;
  int in_ch = 0, out_ch = 0, k = 0, stride = 1, pad = 0, groups = 1;

  static LayerDesc conv(int in_ch, int out_ch, int k, int stride = 1, int pad = 0,
                        int groups = 1) {
    return {LayerKind::Conv, in_ch, out_ch, k, stride, pad, groups};
  }
  static LayerDesc conv_transpose(int in_ch, int out_ch, int k, int stride, int pad) {
    return {LayerKind::ConvTranspose, in_ch, out_ch, k, stride, pad, 1};
  }
  static LayerDesc batchnorm(int ch) { return {LayerKind::BatchNorm, ch, ch, 0, 1, 0, 1}; }
  static LayerDesc relu() { return {LayerKind::Relu}; }
  static LayerDesc maxpool(int k, int stride) {
    return {LayerKind::MaxPool, 0, 0, k, stride, 0, 1};
  }

  Shape3 infer_out(Shape3 in) const {
    switch (kind) {
      case LayerKind::Conv:
        if (in.c != in_ch)
          throw ConfigError("conv layer expects " + std::to_string(in_ch) + " channels, got " +
                            in.str());
        return {out_ch, kern::conv_out_extent(in.h, k, stride, pad),
                kern::conv_out_extent(in.w, k, stride, pad)};
      case LayerKind::ConvTranspose:
        if (in.c != in_ch)
          throw ConfigError("conv_transpose layer expects " + std::to_string(in_ch) +
                            " channels, got " + in.str());
        return {out_ch, (in.h - 1) * stride - 2 * pad + k, (in.w - 1) * stride - 2 * pad + k};
      case LayerKind::BatchNorm:
      case LayerKind::Relu:
        return in;
      case LayerKind::MaxPool:
        return {in.c, (in.h - k) / stride + 1, (in.w - k) / stride + 1};
    }
    return in;
  }
};

struct BlockSpec {
  std::vector<LayerDesc> layers;
  Shape3 in_shape{}, out_shape{};
};

struct ArchSpec {
  std::string id;
  Shape3 input{3, 16, 16};
  int classes = 10;
  std::vector<BlockSpec> blocks;
};

// Resolves block output shapes and checks the chain blocks[i].out ==
// blocks[i+1].in. A net of fewer than 2 blocks admits no student branch and
// is rejected.
inline void finalize_arch(ArchSpec& a) {
  if (a.blocks.size() < 2)
    throw ConfigError("architecture '" + a.id + "': needs at least 2 blocks, has " +
                      std::to_string(a.blocks.size()));
  Shape3 cur = a.input;
  for (size_t b = 0; b < a.blocks.size(); ++b) {
    a.blocks[b].in_shape = cur;
    for (const auto& l : a.blocks[b].layers) cur = l.infer_out(cur);
    a.blocks[b].out_shape = cur;
    if (cur.c <= 0 || cur.h <= 0 || cur.w <= 0)
      throw ConfigError("architecture '" + a.id + "': block " + std::to_string(b + 1) +
                        " collapses to " + cur.str());
  }
}

// Reference architectures. conv-bn-relu x2 + pool per block; the -h3 student
// replaces full convs with depthwise-separable pairs.
ArchSpec make_arch(const std::string& id, Shape3 input = {3, 16, 16}, int classes = 10);

template <class T>
struct ParamRef {
  Tensor<T>* tensor;
  bool decay;  // weight-decay policy: conv/linear weights only
  std::string name;
};

template <class T>
struct Layer {
  LayerDesc desc;
  Tensor<T> weight, bias;    // conv / conv_transpose
  Tensor<T> gamma, beta;     // batchnorm affine
  ops::BnBuffers<T> bn_buf;  // batchnorm running stats

  explicit Layer(const LayerDesc& d) : desc(d) {
    switch (d.kind) {
      case LayerKind::Conv:
        weight = Tensor<T>::zeros({d.out_ch, d.in_ch / d.groups, d.k, d.k}, true);
        bias = Tensor<T>::zeros({d.out_ch}, true);
        break;
      case LayerKind::ConvTranspose:
        weight = Tensor<T>::zeros({d.in_ch, d.out_ch, d.k, d.k}, true);
        bias = Tensor<T>::zeros({d.out_ch}, true);
        break;
      case LayerKind::BatchNorm:
        gamma = Tensor<T>::zeros({d.in_ch}, true);
        beta = Tensor<T>::zeros({d.in_ch}, true);
        bn_buf.init(d.in_ch);
        break;
      default:
        break;
    }
  }

  Tensor<T> forward(const Tensor<T>& x, bool training) {
    switch (desc.kind) {
      case LayerKind::Conv:
        return ops::conv2d(x, weight, bias, desc.stride, desc.pad, desc.groups);
      case LayerKind::ConvTranspose:
        return ops::conv_transpose2d(x, weight, bias, desc.stride, desc.pad);
      case LayerKind::BatchNorm:
        return ops::batchnorm2d(x, gamma, beta, bn_buf, training);
      case LayerKind::Relu:
        return ops::relu(x);
      case LayerKind::MaxPool:
        return ops::maxpool2d(x, desc.k, desc.stride);
    }
    return x;
  }

  void collect(std::vector<ParamRef<T>>& out, const std::string& prefix) {
    switch (desc.kind) {
      case LayerKind::Conv:
      case LayerKind::ConvTranspose:
        out.push_back({&weight, true, prefix + ".weight"});
        out.push_back({&bias, false, prefix + ".bias"});
        break;
      case LayerKind::BatchNorm:
        out.push_back({&gamma, false, prefix + ".gamma"});
        out.push_back({&beta, false, prefix + ".beta"});
        break;
      default:
        break;
    }
  }
};

template <class T>
struct TapOutput {
  Tensor<T> logits;                  // [N,K] pre-softmax
  std::vector<Tensor<T>> features;   // per-block feature maps F^i
  Tensor<T> pooled;                  // [N,C] head input (last block, pooled)
};

// He-normal init for a parameter list: conv/linear weights get std
// sqrt(2/fan_in), biases 0, bn affine (1, 0). Each tensor draws from its own
// stream derived from (seed, ordinal) so layouts can change without
// reshuffling unrelated tensors.
template <class T>
void init_params_he(std::vector<ParamRef<T>> params, uint64_t seed) {
  uint64_t ordinal = 0;
  for (auto& p : params) {
    Rng rng(derive_seed(seed, ordinal++));
    Tensor<T>& t = *p.tensor;
    const auto& sh = t.shape();
    const bool is_weight = p.name.ends_with(".weight");
    const bool is_gamma = p.name.ends_with(".gamma");
    if (is_weight && sh.size() == 4) {
      // conv [Co,Cig,k,k]: fan_in = Cig*k*k; conv_transpose [Ci,Co,k,k] uses
      // the same leading-dims product.
      const double fan_in = double(sh[1]) * sh[2] * sh[3];
      const double std_dev = std::sqrt(2.0 / fan_in);
      for (auto& v : t.data()) v = T(rng.normal() * std_dev);
    } else if (is_weight && sh.size() == 2) {
      const double std_dev = std::sqrt(2.0 / double(sh[0]));  // linear [in,out]
      for (auto& v : t.data()) v = T(rng.normal() * std_dev);
    } else if (is_gamma) {
      for (auto& v : t.data()) v = T(1);
    } else {
      for (auto& v : t.data()) v = T(0);
    }
  }
}

template <class T>
class BlockNet {
 public:
  explicit BlockNet(ArchSpec arch) : arch_(std::move(arch)) {
    finalize_arch(arch_);
    for (const auto& bs : arch_.blocks) {
      blocks_.emplace_back();
      for (const auto& ld : bs.layers) blocks_.back().emplace_back(ld);
    }
    const int feat = arch_.blocks.back().out_shape.c;
    head_w_ = Tensor<T>::zeros({feat, arch_.classes}, true);
    head_b_ = Tensor<T>::zeros({arch_.classes}, true);
  }

  const ArchSpec& arch() const { return arch_; }
  int num_blocks() const { return int(blocks_.size()); }
  int classes() const { return arch_.classes; }

  void init_params(uint64_t seed) { init_params_he(params(), seed); }

  // Forward through all blocks, optionally tapping every block output.
  TapOutput<T> forward_with_taps(const Tensor<T>& x, bool training, bool want_taps = true) {
    if (x.ndim() != 4 || x.dim(1) != arch_.input.c || x.dim(2) != arch_.input.h ||
        x.dim(3) != arch_.input.w)
      throw ShapeError("forward: batch " + shape_str(x.shape()) + " does not match input " +
                       arch_.input.str());
    TapOutput<T> out;
    Tensor<T> cur = x;
    for (size_t b = 0; b < blocks_.size(); ++b) {
      cur = forward_block(int(b), cur, training);
      if (want_taps) out.features.push_back(cur);
    }
    out.pooled = ops::global_avgpool(cur);
    out.logits = ops::add_bias(ops::matmul(out.pooled, head_w_), head_b_);
    return out;
  }

  Tensor<T> logits(const Tensor<T>& x, bool training) {
    return forward_with_taps(x, training, false).logits;
  }

  // Runs one block on an externally produced feature map (student branches).
  Tensor<T> forward_block(int b, const Tensor<T>& x, bool training) {
    Tensor<T> cur = x;
    for (auto& layer : blocks_[b]) cur = layer.forward(cur, training);
    return cur;
  }

  Tensor<T> head(const Tensor<T>& last_block_features) {
    return ops::add_bias(ops::matmul(ops::global_avgpool(last_block_features), head_w_),
                         head_b_);
  }

  std::vector<ParamRef<T>> params() {
    std::vector<ParamRef<T>> out;
    for (size_t b = 0; b < blocks_.size(); ++b) {
      int li = 0;
      for (auto& layer : blocks_[b])
        layer.collect(out, "block" + std::to_string(b + 1) + ".layer" + std::to_string(li++));
    }
    out.push_back({&head_w_, true, "head.weight"});
    out.push_back({&head_b_, false, "head.bias"});
    return out;
  }

  // Named views over parameters plus batchnorm running buffers, in a fixed
  // order; the checkpoint format and hashing are defined over this list.
  struct NamedState {
    std::string name;
    Shape shape;
    std::vector<T>* values;
  };
  std::vector<NamedState> state() {
    std::vector<NamedState> out;
    for (size_t b = 0; b < blocks_.size(); ++b) {
      int li = 0;
      for (auto& layer : blocks_[b]) {
        const std::string prefix =
            "block" + std::to_string(b + 1) + ".layer" + std::to_string(li++);
        switch (layer.desc.kind) {
          case LayerKind::Conv:
          case LayerKind::ConvTranspose:
            out.push_back({prefix + ".weight", layer.weight.shape(), &layer.weight.data()});
            out.push_back({prefix + ".bias", layer.bias.shape(), &layer.bias.data()});
            break;
          case LayerKind::BatchNorm:
            out.push_back({prefix + ".gamma", layer.gamma.shape(), &layer.gamma.data()});
            out.push_back({prefix + ".beta", layer.beta.shape(), &layer.beta.data()});
            out.push_back({prefix + ".running_mean", {layer.desc.in_ch},
                           &layer.bn_buf.running_mean});
            out.push_back({prefix + ".running_var", {layer.desc.in_ch},
                           &layer.bn_buf.running_var});
            break;
          default:
            break;
        }
      }
    }
    out.push_back({"head.weight", head_w_.shape(), &head_w_.data()});
    out.push_back({"head.bias", head_b_.shape(), &head_b_.data()});
    return out;
  }

  uint64_t state_hash() {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (auto& s : state()) {
      h = fnv1a64_str(s.name, h);
      h = fnv1a64(s.values->data(), s.values->size() * sizeof(T), h);
    }
    return h;
  }

  void set_requires_grad(bool rg) {
    for (auto& p : params()) p.tensor->set_requires_grad(rg);
  }

  std::vector<std::vector<Layer<T>>>& blocks() { return blocks_; }
  Tensor<T>& head_weight() { return head_w_; }
  Tensor<T>& head_bias() { return head_b_; }

 private:
  ArchSpec arch_;
  std::vector<std::vector<Layer<T>>> blocks_;
  Tensor<T> head_w_, head_b_;
};

}  // namespace sftn
