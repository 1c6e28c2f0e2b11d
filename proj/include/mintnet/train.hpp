#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mintnet/data.hpp"
#include "mintnet/flow.hpp"
#include "mintnet/mint.hpp"
#include "mintnet/tensor.hpp"

namespace mintnet::train {

struct AmsGradConfig {
  double lr0 = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// AMSGrad moments, one slot per parameter tensor.
struct OptimState {
  AmsGradConfig hyper;
  std::size_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::vector<std::vector<double>> v_hat;

  static OptimState for_params(const std::vector<ParamRef>& params, const AmsGradConfig& hyper = {});
};

// m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2;  v_hat <- max(v_hat, v);
// theta <- theta - lr m / (sqrt(v_hat) + eps). No bias correction.
// Throws std::domain_error without touching anything if a gradient is non-finite.
void amsgrad_step(const std::vector<ParamRef>& params, const std::vector<Tensor4>& grads,
                  OptimState& state, double lr);

// 0.5 lr0 (1 + cos(pi t / T)) for 0 <= t <= T.
double cosine_lr(std::size_t t, std::size_t total, double lr0);

enum class Schedule { kCosine, kConstant };

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch_size = 64;
  double lr0 = 1e-3;
  Schedule schedule = Schedule::kCosine;
  std::uint64_t seed = 0;
  // 0 disables periodic checkpoints; a final one is always written when
  // checkpoint_dir is set.
  std::size_t checkpoint_every = 0;
  std::size_t eval_every = 0;
  // 0 disables clipping.
  double clip_norm = 0.0;
  std::string checkpoint_dir;
  // Stored verbatim in every checkpoint manifest.
  nlohmann::json checkpoint_extra = nlohmann::json::object();

  void validate() const;
  double lr_at(std::size_t step) const;
};

struct MetricRow {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double bpd_train = 0.0;
  std::optional<double> bpd_eval;
};

struct LossAndGrad {
  double loss = 0.0;
  std::vector<Tensor4> grads;  // FlowModel::parameters() order
};

// -mean(log p(y) + logdet_pre) and its gradient for one preprocessed batch.
LossAndGrad loss_and_grad(const FlowModel& model, const Tensor4& y, const std::vector<double>& logdet_pre);

// bpd over a dataset with dequantization noise drawn from `noise_seed`,
// evaluated in chunks.
double evaluate_bpd(const FlowModel& model, const data::Dataset& ds, std::uint64_t noise_seed,
                    std::size_t chunk = 256);

struct TrainResult {
  std::vector<MetricRow> history;
};

// Trains from state.step up to cfg.steps. Batches and noise depend only on
// (seed, step), so a resumed run follows the uninterrupted trajectory.
// A non-finite loss raises DivergenceError and leaves the last checkpoint.
TrainResult train_loop(FlowModel& model, OptimState& state, const data::Dataset& train_set,
                       const data::Dataset* eval_set, const TrainConfig& cfg,
                       const std::function<void(const MetricRow&)>& on_step = {});

void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows);

}  // namespace mintnet::train
