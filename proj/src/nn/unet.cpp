#include "cseg/nn/unet.hpp"

#include <cmath>

#include "cseg/core/errors.hpp"
#include "cseg/core/random.hpp"

namespace cseg::nn {

namespace {

Shape3 round_up(const Shape3& s, int factor) {
  auto up = [factor](int v) { return (v + factor - 1) / factor * factor; };
  return Shape3{up(s.h), up(s.w), up(s.d)};
}

void accumulate(std::vector<double>& acc, std::size_t offset, const std::vector<float>& g) {
  for (std::size_t k = 0; k < g.size(); ++k) acc[offset + k] += g[k];
}

}  // namespace

void UNetConfig::validate() const {
  if (in_channels < 1 || out_channels < 1) throw ArgumentError("UNetConfig: channel counts must be >= 1");
  if (depth < 1 || depth > 6) throw ArgumentError("UNetConfig: depth must be in [1, 6]");
  if (base_width < 1) throw ArgumentError("UNetConfig: base_width must be >= 1");
  if (!(norm_eps > 0.0)) throw ArgumentError("UNetConfig: norm_eps must be positive");
}

UNet::UNet(const UNetConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  int cin = config_.in_channels;
  for (int l = 0; l < config_.depth; ++l) {
    encoder_.push_back(add_block("enc" + std::to_string(l), cin, config_.width(l)));
    cin = config_.width(l);
  }
  decoder_.resize(static_cast<std::size_t>(std::max(0, config_.depth - 1)));
  for (int l = config_.depth - 2; l >= 0; --l) {
    decoder_[static_cast<std::size_t>(l)] =
        add_block("dec" + std::to_string(l), config_.width(l) + config_.width(l + 1), config_.width(l));
  }
  head_weight_ = params_.add("head.weight", {config_.out_channels, config_.width(0)});
  head_bias_ = params_.add("head.bias", {config_.out_channels});
  initialize(seed);
}

UNet::BlockSlots UNet::add_block(const std::string& prefix, int cin, int cout) {
  BlockSlots b;
  for (int u = 0; u < 2; ++u) {
    const std::string p = prefix + ".unit" + std::to_string(u);
    UnitSlots& s = b.units[u];
    s.cin = u == 0 ? cin : cout;
    s.cout = cout;
    s.weight = params_.add(p + ".conv.weight", {cout, s.cin, 3, 3, 3});
    s.gamma = params_.add(p + ".norm.gamma", {cout});
    s.beta = params_.add(p + ".norm.beta", {cout});
  }
  return b;
}

void UNet::initialize(std::uint64_t seed) {
  const double slope = config_.leaky_slope;
  for (std::size_t i = 0; i < params_.slots().size(); ++i) {
    const ParamSlot& slot = params_.slot(i);
    auto values = params_.values(i);
    Rng rng(derive_seed(seed, {0x1A17, i}));
    const auto ends_with = [&](const char* suffix) {
      const std::string s(suffix);
      return slot.name.size() >= s.size() && slot.name.compare(slot.name.size() - s.size(), s.size(), s) == 0;
    };
    if (ends_with(".gamma")) {
      std::fill(values.begin(), values.end(), 1.0);
    } else if (ends_with(".beta") || slot.name == "head.bias") {
      std::fill(values.begin(), values.end(), 0.0);
    } else if (slot.name == "head.weight") {
      if (config_.zero_init_head) {
        std::fill(values.begin(), values.end(), 0.0);
      } else {
        const double bound = 1.0 / std::sqrt(static_cast<double>(slot.dims[1]));
        for (double& v : values) v = uniform(rng, -bound, bound);
      }
    } else {
      // He-uniform for leaky ReLU.
      const double fan_in = static_cast<double>(slot.dims[1]) * 27.0;
      const double bound = std::sqrt(6.0 / ((1.0 + slope * slope) * fan_in));
      for (double& v : values) v = uniform(rng, -bound, bound);
    }
  }
  params_.refresh();
}

Tensor UNet::block_forward(const BlockSlots& slots, Tensor x, BlockCache* cache) const {
  for (int u = 0; u < 2; ++u) {
    const UnitSlots& s = slots.units[u];
    PaddedTensor padded = pad(x);
    Tensor conv = conv3_forward(padded, params_.mirror(s.weight), s.cout);
    InstanceNormCache norm;
    Tensor y = instance_norm_forward(conv, params_.mirror(s.gamma), params_.mirror(s.beta), config_.norm_eps, norm);
    if (cache) {
      ConvUnitCache& c = cache->units[u];
      c.input = std::move(padded);
      c.norm = std::move(norm);
      c.pre_activation = y;
    }
    leaky_relu_inplace(y, config_.leaky_slope);
    x = std::move(y);
  }
  return x;
}

Tensor UNet::block_backward(const BlockSlots& slots, const BlockCache& cache, Tensor grad, std::vector<double>& acc,
                            bool need_input_grad) const {
  for (int u = 1; u >= 0; --u) {
    const UnitSlots& s = slots.units[u];
    const ConvUnitCache& c = cache.units[u];
    leaky_relu_backward_inplace(grad, c.pre_activation, config_.leaky_slope);
    std::vector<float> dgamma(static_cast<std::size_t>(s.cout), 0.0f);
    std::vector<float> dbeta(static_cast<std::size_t>(s.cout), 0.0f);
    Tensor dconv = instance_norm_backward(grad, c.norm, params_.mirror(s.gamma), dgamma, dbeta);
    accumulate(acc, params_.slot(s.gamma).offset, dgamma);
    accumulate(acc, params_.slot(s.beta).offset, dbeta);
    std::vector<float> dw(params_.slot(s.weight).size, 0.0f);
    conv3_backward_weight(dconv, c.input, dw);
    accumulate(acc, params_.slot(s.weight).offset, dw);
    if (u == 0 && !need_input_grad) return Tensor();
    grad = conv3_backward_input(dconv, params_.mirror(s.weight), s.cin);
  }
  return grad;
}

Tensor UNet::forward(const Tensor& input, UNetTape* tape) const {
  if (input.channels() != config_.in_channels) {
    throw ArgumentError("UNet: expected " + std::to_string(config_.in_channels) + " input channels, got " +
                        std::to_string(input.channels()));
  }
  const Shape3 in_shape = input.shape();
  const Shape3 work = round_up(in_shape, config_.downsampling_factor());
  const int depth = config_.depth;
  if (tape) {
    tape->input_shape = in_shape;
    tape->work_shape = work;
    tape->encoder.assign(static_cast<std::size_t>(depth), BlockCache{});
    tape->pool_argmax.assign(static_cast<std::size_t>(depth), {});
    tape->pool_input_shapes.assign(static_cast<std::size_t>(depth), Shape3{});
    tape->decoder.assign(static_cast<std::size_t>(depth - 1), BlockCache{});
    tape->upsample_input_shapes.assign(static_cast<std::size_t>(depth - 1), Shape3{});
  }
  Tensor x = resize_to(input, work);
  std::vector<Tensor> skips(static_cast<std::size_t>(depth));
  for (int l = 0; l < depth; ++l) {
    const auto li = static_cast<std::size_t>(l);
    if (l > 0) {
      std::vector<std::uint32_t> argmax;
      const Shape3 before = x.shape();
      x = max_pool2_forward(x, argmax);
      if (tape) {
        tape->pool_argmax[li] = std::move(argmax);
        tape->pool_input_shapes[li] = before;
      }
    }
    x = block_forward(encoder_[li], std::move(x), tape ? &tape->encoder[li] : nullptr);
    if (l < depth - 1) skips[li] = x;
  }
  for (int l = depth - 2; l >= 0; --l) {
    const auto li = static_cast<std::size_t>(l);
    if (tape) tape->upsample_input_shapes[li] = x.shape();
    Tensor up = upsample2_forward(x);
    x = block_forward(decoder_[li], concat_channels(skips[li], up), tape ? &tape->decoder[li] : nullptr);
    skips[li] = Tensor();
  }
  Tensor y = conv1_forward(x, params_.mirror(head_weight_), params_.mirror(head_bias_), config_.out_channels);
  if (tape) tape->head_input = std::move(x);
  return resize_to(y, in_shape);
}

void UNet::backward(const UNetTape& tape, const Tensor& grad_output, std::vector<double>& grad) const {
  if (grad.size() != params_.size()) throw ArgumentError("UNet::backward: gradient buffer size mismatch");
  if (grad_output.shape() != tape.input_shape || grad_output.channels() != config_.out_channels) {
    throw ArgumentError("UNet::backward: gradient shape does not match the recorded forward pass");
  }
  const int depth = config_.depth;
  const Tensor g_out = resize_to(grad_output, tape.work_shape);
  std::vector<float> dw(params_.slot(head_weight_).size, 0.0f);
  std::vector<float> db(params_.slot(head_bias_).size, 0.0f);
  Tensor g = conv1_backward(g_out, tape.head_input, params_.mirror(head_weight_), dw, db);
  accumulate(grad, params_.slot(head_weight_).offset, dw);
  accumulate(grad, params_.slot(head_bias_).offset, db);

  std::vector<Tensor> skip_grads(static_cast<std::size_t>(depth));
  for (int l = 0; l <= depth - 2; ++l) {
    const auto li = static_cast<std::size_t>(l);
    Tensor gc = block_backward(decoder_[li], tape.decoder[li], std::move(g), grad, true);
    Tensor g_up;
    split_channels(gc, config_.width(l), skip_grads[li], g_up);
    g = upsample2_backward(g_up, tape.upsample_input_shapes[li]);
  }
  for (int l = depth - 1; l >= 0; --l) {
    const auto li = static_cast<std::size_t>(l);
    if (l < depth - 1) {
      auto gd = g.data();
      const auto sd = skip_grads[li].data();
      for (std::size_t k = 0; k < gd.size(); ++k) gd[k] += sd[k];
    }
    g = block_backward(encoder_[li], tape.encoder[li], std::move(g), grad, l > 0);
    if (l > 0) g = max_pool2_backward(g, tape.pool_argmax[li], tape.pool_input_shapes[li]);
  }
}

}  // namespace cseg::nn
