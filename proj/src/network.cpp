#include "odseg/network.hpp"

#include "odseg/text.hpp"

namespace odseg {

namespace {

constexpr double kBlockSlope = 0.01;

}  // namespace

void NetworkConfig::validate() const {
  if (in_channels < 1) throw ConfigError("network.in_channels must be >= 1");
  if (num_classes != kNumClasses) throw ConfigError("network.num_classes must be 4");
  if (base_features < 1) throw ConfigError("network.base_features must be >= 1");
  if (num_stages < 1 || num_stages > 8) throw ConfigError("network.num_stages must be in [1, 8]");
  if (attention_dim < 0) throw ConfigError("network.attention_dim must be >= 0");
  if (odconv.experts < 1) throw ConfigError("network.odconv_experts must be >= 1");
  if (odconv.reduction < 1) throw ConfigError("network.odconv_reduction must be >= 1");
  if (!(odconv.temperature > 0)) throw ConfigError("network.odconv_temperature must be positive");
  for (Index e : patch_size)
    if (e < 1 || e % size_divisor() != 0)
      throw ConfigError("network.patch_size " + text::format_grid(patch_size) + " must be a positive multiple of " +
                        std::to_string(size_divisor()));
}

std::map<std::string, std::string> network_config_entries(const NetworkConfig& c) {
  return {
      {"network.in_channels", std::to_string(c.in_channels)},
      {"network.num_classes", std::to_string(c.num_classes)},
      {"network.base_features", std::to_string(c.base_features)},
      {"network.num_stages", std::to_string(c.num_stages)},
      {"network.use_odconv", text::format_bool(c.use_odconv)},
      {"network.use_multiscale", text::format_bool(c.use_multiscale)},
      {"network.bidirectional_fusion", text::format_bool(c.bidirectional_fusion)},
      {"network.attention_dim", std::to_string(c.attention_dim)},
      {"network.odconv_experts", std::to_string(c.odconv.experts)},
      {"network.odconv_reduction", std::to_string(c.odconv.reduction)},
      {"network.odconv_temperature", text::format_double(c.odconv.temperature)},
      {"network.patch_size", text::format_grid(c.patch_size)},
  };
}

NetworkConfig network_config_from_entries(const std::map<std::string, std::string>& entries) {
  NetworkConfig c;
  for (const auto& [key, value] : entries) {
    if (key.rfind("network.", 0) != 0) continue;
    if (key == "network.in_channels") c.in_channels = text::parse_int(key, value);
    else if (key == "network.num_classes") c.num_classes = text::parse_int(key, value);
    else if (key == "network.base_features") c.base_features = text::parse_int(key, value);
    else if (key == "network.num_stages") c.num_stages = static_cast<int>(text::parse_int(key, value));
    else if (key == "network.use_odconv") c.use_odconv = text::parse_bool(key, value);
    else if (key == "network.use_multiscale") c.use_multiscale = text::parse_bool(key, value);
    else if (key == "network.bidirectional_fusion") c.bidirectional_fusion = text::parse_bool(key, value);
    else if (key == "network.attention_dim") c.attention_dim = text::parse_int(key, value);
    else if (key == "network.odconv_experts") c.odconv.experts = static_cast<int>(text::parse_int(key, value));
    else if (key == "network.odconv_reduction") c.odconv.reduction = static_cast<int>(text::parse_int(key, value));
    else if (key == "network.odconv_temperature") c.odconv.temperature = text::parse_double(key, value);
    else if (key == "network.patch_size") c.patch_size = text::parse_grid(key, value);
    else throw ConfigError("unknown key '" + key + "'");
  }
  return c;
}

// ---------------------------------------------------------------------------

template <typename T>
ConvBlock<T> ConvBlock<T>::init(Index c_in, Index c_out, int stride, bool dynamic, const ODConvSettings& settings,
                                std::mt19937_64& rng) {
  ConvBlock b;
  b.dynamic = dynamic;
  if (dynamic) {
    b.od = ODConvParams<T>::init(c_in, c_out, 3, stride, 1, settings, rng);
  } else {
    b.conv = Conv3DParams<T>::init(c_in, c_out, 3, stride, 1, rng);
  }
  b.gamma = Tensor<T>::full({c_out}, T{1});
  b.beta = Tensor<T>::zeros({c_out});
  return b;
}

template <typename T>
Tensor<T> ConvBlock<T>::forward(const Tensor<T>& x) const {
  Tensor<T> y = dynamic ? odconv3d_forward(x, od) : conv3d_direct(x, conv);
  return leaky_relu(instance_norm(y, gamma, beta), kBlockSlope);
}

template <typename T>
void ConvBlock<T>::collect(const std::string& prefix, NamedTensors<T>& out) const {
  if (dynamic) {
    od.collect(prefix + ".odconv", out);
  } else {
    conv.collect(prefix + ".conv", out);
  }
  out.emplace_back(prefix + ".norm.gamma", gamma);
  out.emplace_back(prefix + ".norm.beta", beta);
}

template <typename T>
Network<T> Network<T>::build(const NetworkConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  Network net;
  net.config_ = config;
  const int stages = config.num_stages;

  auto make_encoder = [&](bool dynamic) {
    std::vector<EncoderStage<T>> enc;
    Index c_prev = config.in_channels;
    for (int s = 0; s < stages; ++s) {
      const Index c = config.stage_features(s);
      EncoderStage<T> st;
      st.first = ConvBlock<T>::init(c_prev, c, s == 0 ? 1 : 2, dynamic, config.odconv, rng);
      st.second = ConvBlock<T>::init(c, c, 1, dynamic, config.odconv, rng);
      enc.push_back(std::move(st));
      c_prev = c;
    }
    return enc;
  };

  net.encoder_full_ = make_encoder(config.use_odconv);
  const Index bottleneck = config.stage_features(stages - 1);
  if (config.use_multiscale) {
    net.encoder_down_ = make_encoder(config.use_odconv);
    const Index dm = config.attention_dim > 0 ? config.attention_dim : bottleneck;
    net.fusion_ = CrossAttentionParams<T>::init(bottleneck, dm, rng);
    if (config.bidirectional_fusion) net.fusion_reverse_ = CrossAttentionParams<T>::init(bottleneck, dm, rng);
  }
  for (int i = 0; i + 1 < stages; ++i) {
    const Index deep = config.stage_features(stages - 1 - i);
    const Index skip = config.stage_features(stages - 2 - i);
    DecoderStage<T> st;
    st.up = Conv3DParams<T>::init(skip, deep, 2, 2, 0, rng);
    st.up.bias = Tensor<T>::zeros({skip});
    st.first = ConvBlock<T>::init(2 * skip, skip, 1, false, config.odconv, rng);
    st.second = ConvBlock<T>::init(skip, skip, 1, false, config.odconv, rng);
    net.decoder_.push_back(std::move(st));
  }
  net.head_ = Conv3DParams<T>::init(config.base_features, config.num_classes, 1, 1, 0, rng);

  for (auto& [name, t] : net.parameters()) t.set_requires_grad(true);
  return net;
}

template <typename T>
std::vector<Tensor<T>> Network<T>::encode(const std::vector<EncoderStage<T>>& encoder, const Tensor<T>& x) const {
  std::vector<Tensor<T>> features;
  Tensor<T> h = x;
  for (const auto& st : encoder) {
    h = st.second.forward(st.first.forward(h));
    features.push_back(h);
  }
  return features;
}

template <typename T>
Tensor<T> Network<T>::forward(const Tensor<T>& patch) const {
  if (patch.rank() != 4) throw ShapeError("network input must be [c, d, h, w], got " + shape_str(patch.shape()));
  if (patch.extent(0) != config_.in_channels)
    throw ChannelMismatchError("network expects " + std::to_string(config_.in_channels) + " channels, input has " +
                               std::to_string(patch.extent(0)));
  for (int a = 1; a < 4; ++a)
    if (patch.extent(a) % config_.size_divisor() != 0)
      throw ShapeError("spatial extents " + shape_str(patch.shape()) + " must be multiples of " +
                       std::to_string(config_.size_divisor()));

  const auto skips = encode(encoder_full_, patch);
  Tensor<T> x = skips.back();
  if (config_.use_multiscale) {
    const Tensor<T> coarse = upsample_trilinear(encode(encoder_down_, downsample_trilinear(patch)).back());
    if (config_.bidirectional_fusion) {
      x = add(add(x, cross_attention_update(x, coarse, fusion_)), cross_attention_update(coarse, x, fusion_reverse_));
    } else {
      x = cross_attention_fuse(x, coarse, fusion_);
    }
  }
  const std::size_t stages = skips.size();
  for (std::size_t i = 0; i < decoder_.size(); ++i) {
    const auto& st = decoder_[i];
    x = transposed_conv3d(x, st.up);
    x = concat0(std::vector<Tensor<T>>{x, skips[stages - 2 - i]});
    x = st.second.forward(st.first.forward(x));
  }
  return conv3d_direct(x, head_);
}

template <typename T>
NamedTensors<T> Network<T>::parameters() const {
  NamedTensors<T> out;
  auto add_encoder = [&](const std::string& prefix, const std::vector<EncoderStage<T>>& enc) {
    for (std::size_t s = 0; s < enc.size(); ++s) {
      const std::string p = prefix + "." + std::to_string(s);
      enc[s].first.collect(p + ".block0", out);
      enc[s].second.collect(p + ".block1", out);
    }
  };
  add_encoder("encoder_full", encoder_full_);
  if (config_.use_multiscale) {
    add_encoder("encoder_down", encoder_down_);
    fusion_.collect("fusion", out);
    if (config_.bidirectional_fusion) fusion_reverse_.collect("fusion_reverse", out);
  }
  for (std::size_t i = 0; i < decoder_.size(); ++i) {
    const std::string p = "decoder." + std::to_string(i + 1);
    decoder_[i].up.collect(p + ".up", out);
    decoder_[i].first.collect(p + ".block0", out);
    decoder_[i].second.collect(p + ".block1", out);
  }
  head_.collect("head", out);
  return out;
}

template <typename T>
Index Network<T>::parameter_count() const {
  Index n = 0;
  for (const auto& [name, t] : parameters()) n += t.numel();
  return n;
}

template <typename T>
void Network<T>::zero_grad() {
  for (auto& [name, t] : parameters()) t.zero_grad();
}

template struct ConvBlock<float>;
template struct ConvBlock<double>;
template class Network<float>;
template class Network<double>;

}  // namespace odseg
