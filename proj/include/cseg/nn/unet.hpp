#pragma once

#include <cstdint>
#include <vector>

#include "cseg/nn/layers.hpp"
#include "cseg/nn/parameters.hpp"

namespace cseg::nn {

/// Encoder-decoder with skip connections. Each level holds two
/// [3x3x3 conv -> instance norm -> leaky ReLU] units; levels are joined by 2x max pooling on the
/// way down and trilinear x2 upsampling + skip concatenation on the way up; a pointwise
/// head maps base_width features to out_channels.
struct UNetConfig {
  int in_channels = 1;
  int out_channels = 2;
  int depth = 4;
  int base_width = 16;
  bool zero_init_head = false;
  float leaky_slope = 0.01f;
  double norm_eps = 1e-5;

  int width(int level) const { return base_width << level; }
  int downsampling_factor() const { return 1 << (depth - 1); }
  void validate() const;

  friend bool operator==(const UNetConfig&, const UNetConfig&) = default;
};

struct ConvUnitCache {
  PaddedTensor input;
  InstanceNormCache norm;
  Tensor pre_activation;
};

struct BlockCache {
  ConvUnitCache units[2];
};

/// Activations recorded by a forward pass for the matching backward pass.
struct UNetTape {
  Shape3 input_shape;
  Shape3 work_shape;
  std::vector<BlockCache> encoder;
  std::vector<std::vector<std::uint32_t>> pool_argmax;
  std::vector<Shape3> pool_input_shapes;
  std::vector<BlockCache> decoder;
  std::vector<Shape3> upsample_input_shapes;
  Tensor head_input;
};

class UNet {
 public:
  UNet() = default;
  UNet(const UNetConfig& config, std::uint64_t seed);

  const UNetConfig& config() const { return config_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }

  /// Input of any extent >= 1 per axis; extents not divisible by the downsampling factor are
  /// zero-padded internally and the output is cropped back.
  Tensor forward(const Tensor& input, UNetTape* tape = nullptr) const;

  /// Accumulates d(loss)/d(parameters) into grad (size parameters().size()).
  void backward(const UNetTape& tape, const Tensor& grad_output, std::vector<double>& grad) const;

 private:
  struct UnitSlots {
    std::size_t weight = 0;
    std::size_t gamma = 0;
    std::size_t beta = 0;
    int cin = 0;
    int cout = 0;
  };
  struct BlockSlots {
    UnitSlots units[2];
  };

  BlockSlots add_block(const std::string& prefix, int cin, int cout);
  Tensor block_forward(const BlockSlots& slots, Tensor x, BlockCache* cache) const;
  Tensor block_backward(const BlockSlots& slots, const BlockCache& cache, Tensor grad, std::vector<double>& acc,
                        bool need_input_grad) const;
  void initialize(std::uint64_t seed);

  UNetConfig config_;
  ParameterSet params_;
  std::vector<BlockSlots> encoder_;
  std::vector<BlockSlots> decoder_;
  std::size_t head_weight_ = 0;
  std::size_t head_bias_ = 0;
};

}  // namespace cseg::nn
