#include "mtlnas/searchalgo.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>

namespace mtlnas {

const char* to_string(RelaxMode mode) { return mode == RelaxMode::kDeterministic ? "deterministic" : "stochastic"; }
const char* to_string(DiscretizeMode mode) {
  return mode == DiscretizeMode::kDeterministic ? "deterministic" : "stochastic";
}

RelaxMode parse_relax_mode(const std::string& text) {
  if (text == "deterministic") return RelaxMode::kDeterministic;
  if (text == "stochastic") return RelaxMode::kStochastic;
  throw Error("unknown relaxation mode '" + text + "' (expected deterministic or stochastic)");
}

DiscretizeMode parse_discretize_mode(const std::string& text) {
  if (text == "deterministic") return DiscretizeMode::kDeterministic;
  if (text == "stochastic") return DiscretizeMode::kStochastic;
  throw Error("unknown discretization mode '" + text + "' (expected deterministic or stochastic)");
}

double alpha_of(double logit) { return stable_sigmoid(logit); }

Tensor alpha_of(const Tensor& logits) {
  Tensor out(logits.shape());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = stable_sigmoid(logits[i]);
  return out;
}

double binary_entropy(double a) {
  double h = 0.0;
  if (a > 0.0) h -= a * std::log(a);
  if (a < 1.0) h -= (1.0 - a) * std::log1p(-a);
  return h;
}

double concrete_sample(double logit, double noise, double tau) {
  if (tau < 0.0) throw Error("concrete_sample: temperature must be nonnegative");
  if (tau == 0.0) return logit + noise > 0.0 ? 1.0 : 0.0;
  return stable_sigmoid((logit + noise) / tau);
}

Var concrete_relax(Var logits, const Tensor& noise, double tau) {
  if (!(tau > 0.0)) throw Error("concrete_relax: temperature must be positive during search");
  if (noise.shape() != logits.shape()) throw ShapeError("concrete_relax: noise shape does not match logits");
  return sigmoid(scale(add_constant(logits, noise), 1.0 / tau));
}

Tensor logistic_noise(std::size_t count, Rng& rng) {
  Tensor t(Shape{count});
  for (double& v : t.data()) v = rng.logistic();
  return t;
}

DiscreteArchitecture discretize_deterministic(const Tensor& alpha) {
  DiscreteArchitecture arch;
  for (double a : alpha.data()) arch.bits.push_back(a > 0.5 ? 1 : 0);
  return arch;
}

DiscreteArchitecture discretize_stochastic(const Tensor& alpha, Rng& rng) {
  DiscreteArchitecture arch;
  for (double a : alpha.data()) arch.bits.push_back(rng.uniform() < a ? 1 : 0);
  return arch;
}

void SearchConfig::validate() const {
  if (!(gamma >= 0.0)) throw Error("search: gamma must be >= 0");
  if (!(lambda > 0.0)) throw Error("search: lambda must be > 0");
  if (!(tau_initial > 0.0) || !(tau_final > 0.0)) throw Error("search: temperatures must be > 0");
  if (batch_size == 0) throw Error("search: batch_size must be positive");
  if (!(lr_theta >= 0.0) || !(fusion_lr_scale >= 0.0)) throw Error("search: learning rates must be >= 0");
  if (!(adam.lr >= 0.0)) throw Error("search: alpha learning rate must be >= 0");
}

double temperature(const SearchConfig& config, std::size_t step) {
  if (config.steps <= 1) return config.tau_initial;
  const double t = static_cast<double>(std::min(step, config.steps - 1)) / static_cast<double>(config.steps - 1);
  return config.tau_initial * std::pow(config.tau_final / config.tau_initial, t);
}

void write_history_csv(std::ostream& out, const SearchHistory& history) {
  out << "step,loss_total,loss_A,loss_B,entropy_mean,tau,lr_theta,lr_alpha,gap\n";
  char buf[512];
  for (const HistoryRecord& r : history) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.step, r.loss_total,
                  r.loss_a, r.loss_b, r.entropy_mean, r.tau, r.lr_theta, r.lr_alpha, r.gap);
    out << buf;
  }
}

void write_alpha_table(std::ostream& out, const Tensor& alpha) {
  out << "edge_id alpha\n";
  char buf[64];
  for (std::size_t e = 0; e < alpha.size(); ++e) {
    std::snprintf(buf, sizeof buf, "%zu %.17g\n", e, alpha[e]);
    out << buf;
  }
}

SearchState init_search(const SearchConfig& config, MultiTaskModel model) {
  config.validate();
  SearchState state{std::move(model), Tensor(), Sgd(config.sgd), Sgd(config.sgd), Adam(config.adam), 0, {}};
  state.logits = Tensor(Shape{state.model.space.size()}, 0.0);
  return state;
}

Var entropy_term(Var logits, double gamma) {
  const std::size_t n = logits.value().size();
  if (n == 0) return logits.tape->constant(Tensor::scalar(0.0));
  return scale(entropy_of_logits(logits), gamma / static_cast<double>(n));
}

TotalLoss total_loss(Tape& tape, MultiTaskModel& model, const ModelVars& vars, Var logits, Var multipliers,
                     const Batch& batch, const SearchConfig& config, bool training) {
  Var ent = entropy_term(logits, config.gamma);
  if (config.zero_task_loss) {
    Var zero = tape.constant(Tensor::scalar(0.0));
    return TotalLoss{ent, zero, zero, ent};
  }
  TaskOutputs out = forward_model(tape, model, vars, multipliers, batch.input, training);
  LossParts parts = task_losses(model, out, batch, config.lambda);
  return TotalLoss{add(parts.total, ent), parts.a, parts.b, ent};
}

GapMeasurement objective_gap(MultiTaskModel& model, const Tensor& logits, const Batch& batch, double lambda) {
  auto task_total = [&](const Tensor& multipliers) {
    Tape tape;
    ModelVars vars = bind_model(tape, model, false);
    TaskOutputs out = forward_model(tape, model, vars, tape.constant(multipliers), batch.input, false);
    return task_losses(model, out, batch, lambda).total.value().item();
  };
  const Tensor alpha = alpha_of(logits);
  const DiscreteArchitecture arch = discretize_deterministic(alpha);
  Tensor bits(alpha.shape());
  for (std::size_t e = 0; e < bits.size(); ++e) bits[e] = arch.bits[e];
  GapMeasurement g;
  g.relaxed = task_total(alpha);
  g.discrete = task_total(bits);
  g.gap = std::abs(g.relaxed - g.discrete);
  return g;
}

namespace {

Var relaxed_multipliers(Tape& tape, Var logits, const SearchConfig& config, double tau, std::size_t step,
                        std::uint64_t pass) {
  (void)tape;
  if (config.relax == RelaxMode::kDeterministic) return sigmoid(logits);
  Rng rng(derive_seed(config.seed, {tag(Stream::kConcrete), step, pass}));
  return concrete_relax(logits, logistic_noise(logits.value().size(), rng), tau);
}

void require_finite(double value, const char* what, std::size_t step) {
  if (!std::isfinite(value)) {
    throw DivergenceError(std::string("search: non-finite ") + what + " at step " + std::to_string(step));
  }
}

}  // namespace

HistoryRecord alternating_step(SearchState& state, const SearchConfig& config, const Dataset& train,
                               const Batch* gap_batch) {
  const std::size_t step = state.step;
  MultiTaskModel& model = state.model;
  const double tau = temperature(config, step);
  const double lr = poly_lr(config.lr_theta, step, config.steps);
  auto [idx1, idx2] = disjoint_batch_indices(train.size(), config.batch_size, step, config.seed);

  HistoryRecord rec;
  rec.step = step;
  rec.tau = tau;
  rec.lr_theta = lr;
  rec.lr_alpha = config.adam.lr;
  rec.gap = std::numeric_limits<double>::quiet_NaN();

  // theta on X1
  {
    const Batch x1 = make_batch(train, idx1);
    Tape tape;
    ModelVars vars = bind_model(tape, model, true);
    Var logits = tape.leaf(state.logits, false);
    Var m = relaxed_multipliers(tape, logits, config, tau, step, 0);
    TotalLoss loss = total_loss(tape, model, vars, logits, m, x1, config, true);
    require_finite(loss.total.value().item(), "theta loss", step);
    rec.loss_total = loss.total.value().item();
    rec.loss_a = loss.task_a.value().item();
    rec.loss_b = loss.task_b.value().item();
    if (!config.zero_task_loss) {
      tape.backward(loss.total);
      const std::vector<Var> theta_vars = vars.theta();
      std::vector<Tensor*> theta = model.theta();
      const std::size_t split = model.backbone_param_count();
      std::vector<Tensor> grads;
      grads.reserve(theta_vars.size());
      for (const Var& v : theta_vars) grads.push_back(tape.grad(v));
      if (!config.freeze_backbone) {
        state.sgd_backbone.step(std::span(theta.data(), split), std::span(grads.data(), split), lr);
      }
      state.sgd_fusion.step(std::span(theta.data() + split, theta.size() - split),
                            std::span(grads.data() + split, grads.size() - split), lr * config.fusion_lr_scale);
    }
  }

  // logits on X2
  if (!model.space.empty()) {
    const Batch x2 = make_batch(train, idx2);
    Tape tape;
    ModelVars vars = bind_model(tape, model, false);
    Var logits = tape.leaf(state.logits, true);
    Var m = relaxed_multipliers(tape, logits, config, tau, step, 1);
    TotalLoss loss = total_loss(tape, model, vars, logits, m, x2, config, true);
    require_finite(loss.total.value().item(), "architecture loss", step);
    tape.backward(loss.total);
    Tensor grad = tape.grad(logits);
    std::array<Tensor*, 1> params{&state.logits};
    std::array<Tensor, 1> grads{std::move(grad)};
    state.adam.step(params, grads);
    if (!state.logits.all_finite()) {
      throw DivergenceError("search: non-finite architecture logits at step " + std::to_string(step));
    }
  }

  double h = 0.0;
  for (double l : state.logits.data()) h += binary_entropy(alpha_of(l));
  rec.entropy_mean = model.space.empty() ? 0.0 : h / static_cast<double>(model.space.size());

  const bool last = step + 1 == config.steps;
  if (gap_batch != nullptr && config.gap_every > 0 && (step % config.gap_every == 0 || last) &&
      !config.zero_task_loss) {
    rec.gap = objective_gap(model, state.logits, *gap_batch, config.lambda).gap;
  }
  state.history.push_back(rec);
  ++state.step;
  return rec;
}

DiscreteArchitecture discretize(const SearchConfig& config, const Tensor& alpha, std::uint64_t draw) {
  if (config.discretize == DiscretizeMode::kDeterministic) return discretize_deterministic(alpha);
  Rng rng(derive_seed(config.seed, {tag(Stream::kDiscretize), draw}));
  return discretize_stochastic(alpha, rng);
}

SearchResult run_search(const SearchConfig& config, SearchState state, const Dataset& train, const Dataset& val,
                        const StepCallback& after_step) {
  config.validate();
  if (state.logits.size() != state.model.space.size()) throw Error("run_search: logits do not match the search space");
  std::optional<Batch> gap_batch;
  if (config.gap_every > 0 && val.size() > 0) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < std::min(config.gap_samples, val.size()); ++i) idx.push_back(i);
    gap_batch = make_batch(val, idx);
  }
  while (state.step < config.steps) {
    alternating_step(state, config, train, gap_batch ? &*gap_batch : nullptr);
    if (after_step) after_step(state);
  }
  SearchResult result{std::move(state), Tensor(), {}};
  result.alpha = alpha_of(result.state.logits);
  result.architecture = discretize(config, result.alpha);
  return result;
}

}  // namespace mtlnas
