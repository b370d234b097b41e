#include "evtforce/train_eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>

namespace evtforce::train {

using ad::Tensor;

void TrainConfig::validate() const {
  auto fail = [](const char* key, const std::string& why) {
    throw std::invalid_argument(std::string("train.") + key + " " + why);
  };
  if (!(learning_rate >= 0) || !std::isfinite(learning_rate)) fail("learning_rate", "must be >= 0");
  if (batch_size < 1) fail("batch_size", "must be >= 1");
  if (epochs < 0) fail("epochs", "must be >= 0");
  if (!(split.train > 0)) fail("split", "train ratio must be positive");
  if (!(split.val >= 0) || !(split.test >= 0)) fail("split", "ratios must be non-negative");
  if (std::abs(split.train + split.val + split.test - 1.0) > 1e-9) {
    fail("split", "ratios must sum to 1");
  }
  if (!(beta1 >= 0 && beta1 < 1)) fail("beta1", "must be in [0, 1)");
  if (!(beta2 >= 0 && beta2 < 1)) fail("beta2", "must be in [0, 1)");
  if (!(eps > 0)) fail("eps", "must be > 0");
  if (!(mape_floor > 0)) fail("mape_floor", "must be > 0");
}

Split split_indices(std::size_t n, const SplitRatios& ratios, std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("split_dataset: empty dataset");
  if (ratios.train < 0 || ratios.val < 0 || ratios.test < 0 ||
      std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9) {
    throw std::invalid_argument("split_dataset: ratios must be non-negative and sum to 1");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  // The slack keeps 0.15 * 1000 from flooring to 149.
  auto portion = [n](double r) {
    return static_cast<std::size_t>(std::floor(r * static_cast<double>(n) + 1e-9));
  };
  const std::size_t n_val = std::min(n, portion(ratios.val));
  const std::size_t n_test = std::min(n - n_val, portion(ratios.test));
  Split s;
  const auto val_begin = order.begin() + static_cast<std::ptrdiff_t>(n - n_val - n_test);
  const auto test_begin = val_begin + static_cast<std::ptrdiff_t>(n_val);
  s.train.assign(order.begin(), val_begin);
  s.val.assign(val_begin, test_begin);
  s.test.assign(test_begin, order.end());
  return s;
}

Split split_dataset(const FrameDataset& ds, const SplitRatios& ratios, std::uint64_t seed) {
  return split_indices(ds.size(), ratios, seed);
}

template <typename T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape()) {
    throw ad::ShapeError("mse_loss: prediction " + ad::shape_str(pred.shape()) +
                         " vs target " + ad::shape_str(target.shape()));
  }
  if (pred.numel() == 0) throw ad::ShapeError("mse_loss: empty batch");
  auto diff = ad::sub(pred, target);
  return ad::mean(ad::mul(diff, diff));
}

template <typename T>
AdamState<T> AdamState<T>::for_parameters(const std::vector<Tensor<T>*>& params) {
  AdamState s;
  for (const auto* p : params) {
    s.m.emplace_back(p->numel(), T(0));
    s.v.emplace_back(p->numel(), T(0));
  }
  return s;
}

template <typename T>
void adam_step(const std::vector<Tensor<T>*>& params, const std::vector<std::span<const T>>& grads,
               AdamState<T>& state, const AdamHyper& hyper) {
  if (grads.size() != params.size() || state.m.size() != params.size() ||
      state.v.size() != params.size()) {
    throw ad::ShapeError("adam_step: parameter/gradient/state counts differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::size_t n = params[i]->numel();
    if (grads[i].size() != n || state.m[i].size() != n || state.v[i].size() != n) {
      throw ad::ShapeError("adam_step: size mismatch for parameter " + std::to_string(i));
    }
  }
  ++state.step;
  const T b1 = static_cast<T>(hyper.beta1);
  const T b2 = static_cast<T>(hyper.beta2);
  const T lr = static_cast<T>(hyper.learning_rate);
  const T eps = static_cast<T>(hyper.eps);
  const T correction1 = static_cast<T>(1.0 - std::pow(hyper.beta1, double(state.step)));
  const T correction2 = static_cast<T>(1.0 - std::pow(hyper.beta2, double(state.step)));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->mutable_data();
    auto g = grads[i];
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = b1 * m[j] + (T(1) - b1) * g[j];
      v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
      const T m_hat = m[j] / correction1;
      const T v_hat = v[j] / correction2;
      p[j] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
}

nlohmann::json Metrics::to_json() const {
  nlohmann::json j = {{"rmse_n", rmse}, {"mape", mape}, {"n", n}};
  j["r2"] = r2 ? nlohmann::json(*r2) : nlohmann::json(nullptr);
  return j;
}

Metrics compute_metrics(std::span<const double> pred, std::span<const double> target,
                        double mape_floor) {
  if (pred.size() != target.size()) throw std::invalid_argument("metrics: size mismatch");
  if (pred.empty()) throw std::invalid_argument("metrics: empty prediction set");
  const double n = static_cast<double>(pred.size());
  double sse = 0, ape = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = pred[i] - target[i];
    sse += e * e;
    ape += std::abs(e) / std::max(std::abs(target[i]), mape_floor);
  }
  const double mean_y = std::accumulate(target.begin(), target.end(), 0.0) / n;
  double sst = 0;
  for (double y : target) sst += (y - mean_y) * (y - mean_y);

  Metrics m;
  m.n = pred.size();
  m.rmse = std::sqrt(sse / n);
  m.mape = ape / n;
  if (sst > 0) m.r2 = 1.0 - sse / sst;
  return m;
}

template <typename T>
Tensor<T> stack_frames(const FrameDataset& ds, std::span<const std::size_t> indices) {
  if (indices.empty()) throw std::invalid_argument("stack_frames: no frames selected");
  const auto& first = ds.frames.at(indices.front());
  const std::size_t per = first.data.size();
  std::vector<T> data;
  data.reserve(indices.size() * per);
  for (std::size_t i : indices) {
    const auto& f = ds.frames.at(i);
    if (f.data.size() != per) throw ad::ShapeError("stack_frames: frames differ in shape");
    data.insert(data.end(), f.data.begin(), f.data.end());
  }
  return Tensor<T>::from({indices.size(), std::size_t(first.channels), std::size_t(first.height),
                          std::size_t(first.width)},
                         std::move(data));
}

namespace {

Tensor<float> stack_labels(const FrameDataset& ds, std::span<const std::size_t> indices) {
  std::vector<float> y;
  y.reserve(indices.size());
  for (std::size_t i : indices) y.push_back(static_cast<float>(ds.labels.at(i)));
  return Tensor<float>::from({indices.size(), 1}, std::move(y));
}

double mean_squared_error(const std::vector<double>& pred, const FrameDataset& ds,
                          std::span<const std::size_t> indices) {
  double sse = 0;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const double e = pred[i] - static_cast<double>(static_cast<float>(ds.labels[indices[i]]));
    sse += e * e;
  }
  return sse / static_cast<double>(indices.size());
}

}  // namespace

std::vector<double> predict(const vit::ViTModel<float>& model, const FrameDataset& ds,
                            std::span<const std::size_t> indices, std::size_t chunk) {
  ad::NoGradGuard no_grad;
  std::vector<double> out;
  out.reserve(indices.size());
  for (std::size_t start = 0; start < indices.size(); start += chunk) {
    auto part = indices.subspan(start, std::min(chunk, indices.size() - start));
    auto pred = vit::forward(stack_frames<float>(ds, part), model);
    for (float v : pred.data()) out.push_back(v);
  }
  return out;
}

Metrics evaluate(const vit::ViTModel<float>& model, const FrameDataset& ds,
                 std::span<const std::size_t> indices, double mape_floor) {
  auto pred = predict(model, ds, indices);
  std::vector<double> target;
  target.reserve(indices.size());
  for (std::size_t i : indices) target.push_back(ds.labels.at(i));
  return compute_metrics(pred, target, mape_floor);
}

TrainResult train(const vit::ViTModel<float>& init, const FrameDataset& ds, const Split& split,
                  const TrainConfig& config, const std::function<void(const EpochLog&)>& on_epoch) {
  config.validate();
  if (split.train.empty()) throw std::invalid_argument("train: empty training split");

  TrainResult result;
  vit::ViTModel<float> model = init.clone();
  result.initial_train_mse = mean_squared_error(predict(model, ds, split.train), ds, split.train);
  result.best = model.clone();
  result.best_epoch = 0;
  double best_score = std::numeric_limits<double>::infinity();

  std::vector<ad::Tensor<float>*> params;
  for (auto& [name, t] : model.named_parameters()) params.push_back(t);
  auto state = AdamState<float>::for_parameters(params);
  const AdamHyper hyper{config.learning_rate, config.beta1, config.beta2, config.eps};

  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order = split.train;
  const std::size_t batch = static_cast<std::size_t>(config.batch_size);
  std::vector<std::span<const float>> grads(params.size());

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double weighted_loss = 0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      std::span<const std::size_t> idx(order.data() + start, std::min(batch, order.size() - start));
      model.zero_grad();
      auto pred = vit::forward(stack_frames<float>(ds, idx), model);
      auto loss = mse_loss(pred, stack_labels(ds, idx));
      ad::backward(loss);
      for (std::size_t i = 0; i < params.size(); ++i) grads[i] = params[i]->mutable_grad();
      adam_step(params, grads, state, hyper);
      weighted_loss += static_cast<double>(loss.item()) * static_cast<double>(idx.size());
    }

    EpochLog entry;
    entry.epoch = epoch;
    entry.train_mse = weighted_loss / static_cast<double>(order.size());
    double score = entry.train_mse;
    if (!split.val.empty()) {
      entry.val_mse = mean_squared_error(predict(model, ds, split.val), ds, split.val);
      score = *entry.val_mse;
    }
    if (score < best_score) {
      best_score = score;
      result.best = model.clone();
      result.best_epoch = epoch;
    }
    result.log.push_back(entry);
    if (on_epoch) on_epoch(entry);
  }
  result.last = std::move(model);
  return result;
}

namespace {

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace

std::string log_to_csv(const std::vector<EpochLog>& log) {
  std::string out = "epoch,train_mse,val_mse\n";
  for (const auto& e : log) {
    out += std::to_string(e.epoch) + "," + format_double(e.train_mse) + "," +
           (e.val_mse ? format_double(*e.val_mse) : std::string()) + "\n";
  }
  return out;
}

template Tensor<float> mse_loss<float>(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> mse_loss<double>(const Tensor<double>&, const Tensor<double>&);
template struct AdamState<float>;
template struct AdamState<double>;
template void adam_step<float>(const std::vector<Tensor<float>*>&,
                               const std::vector<std::span<const float>>&, AdamState<float>&,
                               const AdamHyper&);
template void adam_step<double>(const std::vector<Tensor<double>*>&,
                                const std::vector<std::span<const double>>&, AdamState<double>&,
                                const AdamHyper&);
template Tensor<float> stack_frames<float>(const FrameDataset&, std::span<const std::size_t>);
template Tensor<double> stack_frames<double>(const FrameDataset&, std::span<const std::size_t>);

}  // namespace evtforce::train
