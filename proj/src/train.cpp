#include "mintnet/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include "mintnet/checkpoint.hpp"
#include "mintnet/errors.hpp"

namespace mintnet::train {

OptimState OptimState::for_params(const std::vector<ParamRef>& params, const AmsGradConfig& hyper) {
  OptimState s;
  s.hyper = hyper;
  for (const ParamRef& p : params) {
    s.m.emplace_back(p.data.size(), 0.0);
    s.v.emplace_back(p.data.size(), 0.0);
    s.v_hat.emplace_back(p.data.size(), 0.0);
  }
  return s;
}

void amsgrad_step(const std::vector<ParamRef>& params, const std::vector<Tensor4>& grads,
                  OptimState& state, double lr) {
  if (grads.size() != params.size() || state.m.size() != params.size()) {
    throw ShapeError("amsgrad: " + std::to_string(params.size()) + " parameters, " +
                     std::to_string(grads.size()) + " gradients, " + std::to_string(state.m.size()) +
                     " moment slots");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (grads[k].size() != params[k].data.size() || state.m[k].size() != params[k].data.size()) {
      throw ShapeError("amsgrad: size mismatch for " + params[k].name);
    }
    if (!grads[k].all_finite()) throw std::domain_error("amsgrad: non-finite gradient for " + params[k].name);
  }
  const AmsGradConfig& h = state.hyper;
  for (std::size_t k = 0; k < params.size(); ++k) {
    std::span<double> theta = params[k].data;
    std::vector<double>& m = state.m[k];
    std::vector<double>& v = state.v[k];
    std::vector<double>& vh = state.v_hat[k];
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double g = grads[k][i];
      m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
      v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
      vh[i] = std::max(vh[i], v[i]);
      theta[i] -= lr * m[i] / (std::sqrt(vh[i]) + h.eps);
    }
  }
  ++state.step;
}

double cosine_lr(std::size_t t, std::size_t total, double lr0) {
  if (t > total) {
    throw std::out_of_range("cosine_lr: step " + std::to_string(t) + " beyond total " + std::to_string(total));
  }
  if (total == 0) return lr0;
  return 0.5 * lr0 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) / static_cast<double>(total)));
}

void TrainConfig::validate() const {
  if (steps == 0) throw ConfigError("train steps must be positive");
  if (batch_size == 0) throw ConfigError("train batch_size must be positive");
  if (!(lr0 >= 0.0)) throw ConfigError("train lr must be >= 0");
  if (!(clip_norm >= 0.0)) throw ConfigError("train clip_norm must be >= 0");
}

double TrainConfig::lr_at(std::size_t step) const {
  return schedule == Schedule::kCosine ? cosine_lr(step, steps, lr0) : lr0;
}

LossAndGrad loss_and_grad(const FlowModel& model, const Tensor4& y, const std::vector<double>& logdet_pre) {
  const std::size_t n = y.shape().n;
  if (logdet_pre.size() != n) throw ShapeError("logdet_pre length does not match batch");
  ad::Tape tape;
  const FlowNodes nodes = record_params(tape, model, true);
  const FlowGraph g = record_log_prob(tape, model, nodes, tape.constant(y));
  double pre = 0.0;
  for (double v : logdet_pre) pre += v;
  const double inv_n = 1.0 / static_cast<double>(n);
  const ad::Node loss = tape.add(tape.scale(tape.sum(g.log_prob), -inv_n), tape.constant(Tensor4::scalar(-pre * inv_n)));

  LossAndGrad out;
  out.loss = tape.value(loss)[0];
  if (!std::isfinite(out.loss)) return out;
  const ad::Gradients grads = tape.backward(loss);
  for (const MintNodes& l : nodes.layers) {
    for (ad::Node node : {l.w1, l.w2, l.w3, l.b1, l.b2, l.b3, l.log_t}) out.grads.push_back(grads.of(node));
  }
  return out;
}

double evaluate_bpd(const FlowModel& model, const data::Dataset& ds, std::uint64_t noise_seed, std::size_t chunk) {
  if (ds.size() == 0) throw std::invalid_argument("bpd of an empty dataset");
  std::mt19937_64 rng(noise_seed);
  std::vector<double> lp, pre;
  for (std::size_t first = 0; first < ds.size(); first += chunk) {
    const std::size_t count = std::min(chunk, ds.size() - first);
    const Preprocessed p = preprocess(ds.images.slice_batch(first, count), model.preprocess, rng);
    const std::vector<double> l = log_prob(model, p.y);
    lp.insert(lp.end(), l.begin(), l.end());
    pre.insert(pre.end(), p.logdet.begin(), p.logdet.end());
  }
  return bpd_from(lp, pre, model.dimension());
}

namespace {

std::mt19937_64 step_rng(std::uint64_t seed, std::size_t step, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(stream)};
  return std::mt19937_64(seq);
}

void clip(std::vector<Tensor4>& grads, double max_norm) {
  double sq = 0.0;
  for (const Tensor4& g : grads)
    for (double v : g.data()) sq += v * v;
  const double norm = std::sqrt(sq);
  if (norm <= max_norm || norm == 0.0) return;
  const double s = max_norm / norm;
  for (Tensor4& g : grads)
    for (double& v : g.data()) v *= s;
}

constexpr std::uint64_t kBatchStream = 1;
constexpr std::uint64_t kNoiseStream = 2;
constexpr std::uint64_t kEvalNoiseSalt = 0x6576616cULL;

}  // namespace

TrainResult train_loop(FlowModel& model, OptimState& state, const data::Dataset& train_set,
                       const data::Dataset* eval_set, const TrainConfig& cfg,
                       const std::function<void(const MetricRow&)>& on_step) {
  cfg.validate();
  if (train_set.size() == 0) throw std::invalid_argument("training set is empty");
  const Shape4& ds = train_set.images.shape();
  if (ds.c != model.input.c || ds.h != model.input.h || ds.w != model.input.w) {
    throw ShapeError("training images " + ds.str() + " do not match the model input");
  }
  std::vector<ParamRef> params = model.parameters();
  if (state.m.size() != params.size()) {
    throw ShapeError("optimizer state has " + std::to_string(state.m.size()) + " slots for " +
                     std::to_string(params.size()) + " parameters");
  }
  const double dim_ln2 = static_cast<double>(model.dimension()) * std::numbers::ln2;
  const std::uint64_t eval_seed = cfg.seed ^ kEvalNoiseSalt;

  TrainResult result;
  for (std::size_t step = state.step; step < cfg.steps; ++step) {
    std::mt19937_64 batch_rng = step_rng(cfg.seed, step, kBatchStream);
    std::uniform_int_distribution<std::size_t> pick(0, train_set.size() - 1);
    std::vector<std::size_t> idx(cfg.batch_size);
    for (std::size_t& i : idx) i = pick(batch_rng);
    std::mt19937_64 noise_rng = step_rng(cfg.seed, step, kNoiseStream);
    const Preprocessed pre = preprocess(train_set.take(idx), model.preprocess, noise_rng);

    LossAndGrad lg = loss_and_grad(model, pre.y, pre.logdet);
    if (!std::isfinite(lg.loss)) {
      throw DivergenceError("non-finite training loss at step " + std::to_string(step), step);
    }
    if (cfg.clip_norm > 0.0) clip(lg.grads, cfg.clip_norm);
    const double lr = cfg.lr_at(step);
    amsgrad_step(params, lg.grads, state, lr);

    MetricRow row{step, lr, lg.loss, lg.loss / dim_ln2, std::nullopt};
    const bool last = state.step == cfg.steps;
    if (eval_set != nullptr && cfg.eval_every > 0 && (state.step % cfg.eval_every == 0 || last)) {
      row.bpd_eval = evaluate_bpd(model, *eval_set, eval_seed);
    }
    result.history.push_back(row);
    if (on_step) on_step(row);
    if (!cfg.checkpoint_dir.empty() &&
        (last || (cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0))) {
      save_checkpoint(cfg.checkpoint_dir, model, state, cfg.checkpoint_extra);
    }
  }
  return result;
}

void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write metrics " + path);
  out.precision(17);
  out << "step,lr,loss,bpd_train,bpd_eval\n";
  for (const MetricRow& r : rows) {
    out << r.step << "," << r.lr << "," << r.loss << "," << r.bpd_train << ",";
    if (r.bpd_eval) out << *r.bpd_eval;
    out << "\n";
  }
  if (!out) throw IoError("failed writing metrics " + path);
}

}  // namespace mintnet::train
