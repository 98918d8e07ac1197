#include <cmath>

#include "odseg/network.hpp"

namespace odseg {

template <typename T>
LossTerms<T> segmentation_loss(const Tensor<T>& logits, const std::vector<std::uint8_t>& target) {
  if (logits.rank() != 4 || logits.extent(0) != kNumClasses)
    throw ShapeError("loss expects logits [4, d, h, w], got " + shape_str(logits.shape()));
  const Index n = logits.numel() / kNumClasses;
  if (static_cast<Index>(target.size()) != n)
    throw ShapeError("target has " + std::to_string(target.size()) + " voxels, logits have " + std::to_string(n));

  std::vector<T> onehot(static_cast<std::size_t>(kNumClasses * n), T{0});
  std::vector<T> counts(kNumClasses, T{0});
  for (Index i = 0; i < n; ++i) {
    const std::uint8_t l = target[static_cast<std::size_t>(i)];
    if (l >= kNumClasses) throw ValueError("target label " + std::to_string(l) + " outside {0,1,2,3}");
    onehot[static_cast<std::size_t>(l * n + i)] = T{1};
    counts[l] += T{1};
  }
  const auto y = Tensor<T>::from_data({kNumClasses, n}, std::move(onehot));
  const auto y_count = Tensor<T>::from_data({kNumClasses}, std::move(counts));

  const auto flat = logits.reshape({kNumClasses, n});
  const auto ce = scale(sum(mul(log_softmax(flat, 0), y)), -1.0 / static_cast<double>(n));

  const auto p = softmax(flat, 0);
  const auto inter = reduce(ReduceOp::Sum, mul(p, y), {1});
  const auto p_sum = reduce(ReduceOp::Sum, p, {1});
  const auto dice = div(add_scalar(scale(inter, 2.0), kDiceSmoothing), add_scalar(add(p_sum, y_count), kDiceSmoothing));
  const auto dice_term = add_scalar(scale(mean(slice0(dice, 1, kNumClasses)), -1.0), 1.0);

  LossTerms<T> out;
  out.total = add(dice_term, ce);
  out.dice_term = static_cast<double>(dice_term.item());
  out.ce_term = static_cast<double>(ce.item());
  return out;
}

double poly_lr(const TrainerConfig& cfg, std::int64_t step) {
  if (cfg.total_steps <= 0) return 0.0;
  const double frac = 1.0 - static_cast<double>(step) / static_cast<double>(cfg.total_steps);
  return frac <= 0.0 ? 0.0 : cfg.initial_lr * std::pow(frac, cfg.lr_power);
}

template <typename T>
Trainer<T>::Trainer(Network<T>& net, TrainerConfig cfg, std::uint64_t seed)
    : net_(net), cfg_(cfg), seed_(seed), rng_(seed) {
  if (cfg_.total_steps < 1) throw ConfigError("train.steps must be >= 1");
  if (!(cfg_.initial_lr > 0)) throw ConfigError("train.initial_lr must be positive");
  if (cfg_.momentum < 0 || cfg_.momentum >= 1) throw ConfigError("train.momentum must be in [0, 1)");
  if (cfg_.grad_clip < 0) throw ConfigError("train.grad_clip must be >= 0");
}

template <typename T>
void Trainer<T>::restore(std::int64_t step, std::map<std::string, std::vector<T>> momentum, std::mt19937_64 rng) {
  step_ = step;
  momentum_ = std::move(momentum);
  rng_ = rng;
}

template <typename T>
StepReport Trainer<T>::step(const std::vector<TrainingSample<T>>& batch) {
  if (batch.empty()) throw ValueError("training batch is empty");
  GradModeGuard recording(true);
  net_.zero_grad();
  StepReport report;
  report.step = step_;
  report.lr = poly_lr(cfg_, step_);
  const double inv_batch = 1.0 / static_cast<double>(batch.size());
  for (const auto& sample : batch) {
    const auto terms = segmentation_loss(net_.forward(sample.patch), sample.labels);
    const double value = static_cast<double>(terms.total.item());
    if (!std::isfinite(value)) throw NumericError("non-finite loss at step " + std::to_string(step_));
    backward(scale(terms.total, inv_batch));
    report.loss += value * inv_batch;
    report.dice_term += terms.dice_term * inv_batch;
    report.ce_term += terms.ce_term * inv_batch;
  }

  auto params = net_.parameters();
  double sq = 0.0;
  for (const auto& [name, t] : params)
    if (t.has_grad())
      for (T g : t.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  report.grad_norm = std::sqrt(sq);
  if (!std::isfinite(report.grad_norm)) throw NumericError("non-finite gradient at step " + std::to_string(step_));
  const double coef =
      cfg_.grad_clip > 0 && report.grad_norm > cfg_.grad_clip ? cfg_.grad_clip / (report.grad_norm + 1e-6) : 1.0;

  const T lr = static_cast<T>(report.lr);
  const T mu = static_cast<T>(cfg_.momentum);
  const T c = static_cast<T>(coef);
  for (auto& [name, t] : params) {
    auto& v = momentum_[name];
    auto w = t.leaf_data();
    if (v.empty()) v.assign(w.size(), T{0});
    const bool has = t.has_grad();
    const auto grad = t.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const T g = has ? grad[i] * c : T{0};
      v[i] = mu * v[i] + g;
      w[i] -= lr * (g + mu * v[i]);
    }
  }
  net_.zero_grad();
  ++step_;
  return report;
}

template LossTerms<float> segmentation_loss(const Tensor<float>&, const std::vector<std::uint8_t>&);
template LossTerms<double> segmentation_loss(const Tensor<double>&, const std::vector<std::uint8_t>&);
template class Trainer<float>;
template class Trainer<double>;

}  // namespace odseg
