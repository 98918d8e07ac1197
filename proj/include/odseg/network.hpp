#pragma once

// Dual-encoder U-Net with optional dynamic convolutions and bottleneck
// cross-attention fusion, its loss, optimiser, tiled inference and
// checkpoints.

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "odseg/layers.hpp"
#include "odseg/volume.hpp"

namespace odseg {

struct NetworkConfig {
  Index in_channels = 4;
  Index num_classes = kNumClasses;
  Index base_features = 8;
  int num_stages = 3;
  bool use_odconv = true;
  bool use_multiscale = true;
  /// Adds a second update from the full-resolution stream into the
  /// downsampled one; off means queries come only from the full stream.
  bool bidirectional_fusion = false;
  /// Width of the attention projections; 0 selects the bottleneck width.
  Index attention_dim = 0;
  ODConvSettings odconv;
  Grid patch_size{32, 32, 32};

  /// Throws ConfigError when an invariant fails.
  void validate() const;
  Index stage_features(int stage) const { return base_features << stage; }
  /// Spatial extents must be multiples of this.
  Index size_divisor() const { return Index{1} << num_stages; }
};

/// "key = value" lines, one per field, under the `network.` prefix.
std::map<std::string, std::string> network_config_entries(const NetworkConfig& cfg);
/// Inverse of network_config_entries. Missing keys keep defaults, unknown keys
/// under `network.` throw ConfigError.
NetworkConfig network_config_from_entries(const std::map<std::string, std::string>& entries);

/// Conv (static or dynamic) -> instance norm -> leaky ReLU(0.01).
template <typename T>
struct ConvBlock {
  bool dynamic = false;
  Conv3DParams<T> conv;
  ODConvParams<T> od;
  Tensor<T> gamma, beta;

  static ConvBlock init(Index c_in, Index c_out, int stride, bool dynamic, const ODConvSettings& settings,
                        std::mt19937_64& rng);
  Tensor<T> forward(const Tensor<T>& x) const;
  void collect(const std::string& prefix, NamedTensors<T>& out) const;
};

template <typename T>
struct EncoderStage {
  ConvBlock<T> first, second;  // first has stride 2 on every stage but the first
};

template <typename T>
struct DecoderStage {
  Conv3DParams<T> up;  // transposed conv, k=2, stride 2; weight [c_deep, c_skip, 2, 2, 2]
  ConvBlock<T> first, second;
};

template <typename T>
class Network {
 public:
  static Network build(const NetworkConfig& config, std::uint64_t seed);

  /// [in_channels, s0, s1, s2] -> logits [num_classes, s0, s1, s2]. Every s_i
  /// must be a multiple of config().size_divisor().
  Tensor<T> forward(const Tensor<T>& patch) const;

  /// Every trainable tensor under a unique hierarchical name, in a fixed
  /// order.
  NamedTensors<T> parameters() const;
  Index parameter_count() const;
  const NetworkConfig& config() const { return config_; }
  void zero_grad();

 private:
  std::vector<Tensor<T>> encode(const std::vector<EncoderStage<T>>& encoder, const Tensor<T>& x) const;

  NetworkConfig config_;
  std::vector<EncoderStage<T>> encoder_full_;
  std::vector<EncoderStage<T>> encoder_down_;
  CrossAttentionParams<T> fusion_;
  CrossAttentionParams<T> fusion_reverse_;
  std::vector<DecoderStage<T>> decoder_;
  Conv3DParams<T> head_;
};

// ---------------------------------------------------------------------------
// Loss

template <typename T>
struct LossTerms {
  Tensor<T> total;  // dice_term + ce_term
  double dice_term = 0.0;
  double ce_term = 0.0;
};

inline constexpr double kDiceSmoothing = 1e-5;

/// (1 - mean soft Dice over classes 1..3) + mean voxelwise cross-entropy.
/// `target` holds one label per voxel in the logits' spatial order.
template <typename T>
LossTerms<T> segmentation_loss(const Tensor<T>& logits, const std::vector<std::uint8_t>& target);

// ---------------------------------------------------------------------------
// Optimisation

struct TrainerConfig {
  std::int64_t total_steps = 2000;
  double initial_lr = 1e-2;
  double momentum = 0.99;
  double lr_power = 0.9;
  /// Global L2 gradient norm cap; 0 disables clipping.
  double grad_clip = 12.0;
};

/// initial * (1 - step / total)^power, clamped at 0 past the end.
double poly_lr(const TrainerConfig& cfg, std::int64_t step);

template <typename T>
struct TrainingSample {
  Tensor<T> patch;
  std::vector<std::uint8_t> labels;
};

struct StepReport {
  std::int64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double dice_term = 0.0;
  double ce_term = 0.0;
  double grad_norm = 0.0;
};

/// SGD with Nesterov momentum over a Network's parameters. Holds the momentum
/// buffers, the step counter and the RNG stream that feeds patch sampling, so
/// a checkpoint captures everything needed to continue bit-exactly.
template <typename T>
class Trainer {
 public:
  Trainer(Network<T>& net, TrainerConfig cfg, std::uint64_t seed);

  /// Mean loss over the batch, one update, gradients cleared. Throws
  /// NumericError on a non-finite loss or gradient.
  StepReport step(const std::vector<TrainingSample<T>>& batch);

  std::int64_t steps_done() const { return step_; }
  const TrainerConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  std::mt19937_64& rng() { return rng_; }
  const std::mt19937_64& rng() const { return rng_; }
  Network<T>& network() { return net_; }
  const Network<T>& network() const { return net_; }
  /// Keyed by parameter name; empty until the first step.
  const std::map<std::string, std::vector<T>>& momentum() const { return momentum_; }

  void restore(std::int64_t step, std::map<std::string, std::vector<T>> momentum, std::mt19937_64 rng);

 private:
  Network<T>& net_;
  TrainerConfig cfg_;
  std::uint64_t seed_;
  std::int64_t step_ = 0;
  std::mt19937_64 rng_;
  std::map<std::string, std::vector<T>> momentum_;
};

// ---------------------------------------------------------------------------
// Inference

/// Gaussian blending weights over a patch, sigma = extent / 8 per axis,
/// normalised to a maximum of 1.
std::vector<double> gaussian_importance(const Grid& patch);

/// Tile start offsets along one axis: step = patch / 2 (rounded up to 1),
/// evenly spread from 0 to extent - patch.
std::vector<Index> tile_starts(Index extent, Index patch);

/// Tiled prediction with Gaussian blending of logits and a final softmax.
/// Volumes smaller than the patch are zero-padded, then cropped back.
/// Returns probabilities [num_classes, D, H, W].
template <typename T>
Volume sliding_window_predict(const Network<T>& net, const Volume& volume);

/// Voxelwise argmax over the class axis; ties go to the lower index.
LabelMask logits_to_mask(const Volume& probabilities);

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointData {
  NetworkConfig network;
  TrainerConfig trainer;
  std::uint64_t seed = 0;
  std::int64_t step = 0;
  std::uint8_t precision = 0;  // bytes per value: 4 or 8
  std::map<std::string, std::pair<Shape, std::vector<double>>> tensors;
  std::string rng_state;
};

template <typename T>
void save_checkpoint(const std::string& path, const Trainer<T>& trainer);
/// Parameters only; no optimiser state.
template <typename T>
void save_checkpoint(const std::string& path, const Network<T>& net);

/// Parses and validates a checkpoint file. FormatError on bad magic, version,
/// truncation or malformed records.
CheckpointData read_checkpoint(const std::string& path);

/// Rebuilds the network stored in `data`; FormatError on unknown, missing or
/// misshapen parameters.
template <typename T>
Network<T> network_from_checkpoint(const CheckpointData& data);

/// Restores momentum, step counter and RNG stream.
template <typename T>
void restore_trainer(Trainer<T>& trainer, const CheckpointData& data);

}  // namespace odseg
