#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "evtforce/autodiff.hpp"
#include "evtforce/frame_builder.hpp"
#include "evtforce/vit_model.hpp"
#include "json.hpp"

namespace evtforce::train {

struct SplitRatios {
  double train = 0.70;
  double val = 0.15;
  double test = 0.15;
};

struct TrainConfig {
  double learning_rate = 0.001;
  int batch_size = 16;
  int epochs = 200;
  std::uint64_t seed = 0;
  SplitRatios split;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double mape_floor = 0.05;  // newtons

  /// Throws std::invalid_argument naming the offending `train.` key.
  void validate() const;
};

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

/// Seeded shuffle of [0, n); validation and test sizes are floor(ratio * n),
/// the remainder goes to training.
Split split_indices(std::size_t n, const SplitRatios& ratios, std::uint64_t seed);
Split split_dataset(const FrameDataset& ds, const SplitRatios& ratios, std::uint64_t seed);

/// Mean of squared differences; differentiable in `pred`.
template <typename T>
ad::Tensor<T> mse_loss(const ad::Tensor<T>& pred, const ad::Tensor<T>& target);

struct AdamHyper {
  double learning_rate = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::int64_t step = 0;

  /// Zero moments shaped like `params`.
  static AdamState for_parameters(const std::vector<ad::Tensor<T>*>& params);
};

/// One bias-corrected Adam update of every parameter from its gradient.
/// Throws ad::ShapeError when params, grads and state disagree.
template <typename T>
void adam_step(const std::vector<ad::Tensor<T>*>& params,
               const std::vector<std::span<const T>>& grads, AdamState<T>& state,
               const AdamHyper& hyper);

struct Metrics {
  double rmse = 0;
  std::optional<double> r2;  // undefined when every target is equal
  double mape = 0;
  std::size_t n = 0;

  nlohmann::json to_json() const;
};

Metrics compute_metrics(std::span<const double> pred, std::span<const double> target,
                        double mape_floor = 0.05);

/// Stacks the selected frames into a [B x C x H x W] tensor.
template <typename T>
ad::Tensor<T> stack_frames(const FrameDataset& ds, std::span<const std::size_t> indices);

/// Inference without graph recording, in chunks of `chunk` frames.
std::vector<double> predict(const vit::ViTModel<float>& model, const FrameDataset& ds,
                            std::span<const std::size_t> indices, std::size_t chunk = 64);

Metrics evaluate(const vit::ViTModel<float>& model, const FrameDataset& ds,
                 std::span<const std::size_t> indices, double mape_floor = 0.05);

struct EpochLog {
  int epoch = 0;
  double train_mse = 0;
  std::optional<double> val_mse;
};

struct TrainResult {
  vit::ViTModel<float> best;
  vit::ViTModel<float> last;
  std::vector<EpochLog> log;
  int best_epoch = 0;  // 0 = initial parameters
  double initial_train_mse = 0;
};

/// Seeded mini-batch Adam on MSE; keeps the parameters with the lowest
/// validation MSE (training MSE when the validation split is empty).
TrainResult train(const vit::ViTModel<float>& init, const FrameDataset& ds, const Split& split,
                  const TrainConfig& config,
                  const std::function<void(const EpochLog&)>& on_epoch = nullptr);

std::string log_to_csv(const std::vector<EpochLog>& log);

}  // namespace evtforce::train
