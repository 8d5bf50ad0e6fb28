#pragma once

// Forward/backward primitives for the 3D encoder-decoder. All activations are single-sample
// C x H x W x D float tensors; gradients w.r.t. weights are accumulated into float buffers.

#include <cstdint>
#include <span>
#include <vector>

#include "cseg/core/volume.hpp"
#include "cseg/simd/kernels.hpp"

namespace cseg::nn {

using Tensor = ChannelVolume;

/// Channels with a one-voxel zero border, the layout the 3x3x3 kernels consume.
struct PaddedTensor {
  int channels = 0;
  Shape3 inner;
  std::int64_t stride = 0;
  std::vector<float> data;
};

simd::Conv3Geometry conv3_geometry(const Shape3& inner);
PaddedTensor pad(const Tensor& x);
/// Interior of a padded buffer laid out like `pad` produces.
Tensor unpad(const float* padded, int channels, const Shape3& inner);

/// 3x3x3 same-size convolution without bias; w is [cout][cin][27].
Tensor conv3_forward(const PaddedTensor& in, std::span<const float> w, int cout);
Tensor conv3_backward_input(const Tensor& grad_out, std::span<const float> w, int cin);
void conv3_backward_weight(const Tensor& grad_out, const PaddedTensor& in, std::span<float> grad_w);

struct InstanceNormCache {
  Tensor normalized;
  std::vector<double> inv_std;
};
Tensor instance_norm_forward(const Tensor& x, std::span<const float> gamma, std::span<const float> beta, double eps,
                             InstanceNormCache& cache);
Tensor instance_norm_backward(const Tensor& grad_y, const InstanceNormCache& cache, std::span<const float> gamma,
                              std::span<float> grad_gamma, std::span<float> grad_beta);

void leaky_relu_inplace(Tensor& x, float slope);
/// Multiplies grad by the activation derivative evaluated at pre-activation `pre`.
void leaky_relu_backward_inplace(Tensor& grad, const Tensor& pre, float slope);

/// 2x2x2 max pooling on even extents; argmax holds the winning input voxel per output voxel.
Tensor max_pool2_forward(const Tensor& x, std::vector<std::uint32_t>& argmax);
Tensor max_pool2_backward(const Tensor& grad_out, const std::vector<std::uint32_t>& argmax, const Shape3& in_shape);

/// x2 trilinear upsampling with half-pixel centers and edge clamping.
Tensor upsample2_forward(const Tensor& x);
Tensor upsample2_backward(const Tensor& grad_out, const Shape3& in_shape);

Tensor concat_channels(const Tensor& a, const Tensor& b);
void split_channels(const Tensor& ab, int channels_a, Tensor& a, Tensor& b);

/// Pointwise linear map with bias; w is [cout][cin].
Tensor conv1_forward(const Tensor& x, std::span<const float> w, std::span<const float> bias, int cout);
Tensor conv1_backward(const Tensor& grad_out, const Tensor& x, std::span<const float> w, std::span<float> grad_w,
                      std::span<float> grad_bias);

/// Zero-pads (at the high end of each axis) or crops to `target`.
Tensor resize_to(const Tensor& x, const Shape3& target);

}  // namespace cseg::nn
