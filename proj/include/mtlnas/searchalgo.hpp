#pragma once

// Single-shot fusion search: per-edge logits, deterministic and Concrete
// relaxations, minimum-entropy regularization, two-batch alternating updates
// of theta and the logits, and discretization of the converged weights.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "mtlnas/fusion.hpp"
#include "mtlnas/rng.hpp"

namespace mtlnas {

enum class RelaxMode { kDeterministic, kStochastic };
enum class DiscretizeMode { kDeterministic, kStochastic };

const char* to_string(RelaxMode mode);
const char* to_string(DiscretizeMode mode);
RelaxMode parse_relax_mode(const std::string& text);
DiscretizeMode parse_discretize_mode(const std::string& text);

/// sigmoid(logit)
double alpha_of(double logit);
Tensor alpha_of(const Tensor& logits);

/// -a log a - (1 - a) log(1 - a), with 0 log 0 = 0.
double binary_entropy(double a);

/// sigmoid((logit + noise) / tau); tau == 0 gives the hard limit step(logit + noise).
double concrete_sample(double logit, double noise, double tau);

/// Differentiable Concrete relaxation for a fixed noise vector.
Var concrete_relax(Var logits, const Tensor& noise, double tau);

Tensor logistic_noise(std::size_t count, Rng& rng);

/// Ind(alpha > 0.5), strict.
DiscreteArchitecture discretize_deterministic(const Tensor& alpha);
/// Each bit is 1 with probability alpha, independently (the tau -> 0 sample).
DiscreteArchitecture discretize_stochastic(const Tensor& alpha, Rng& rng);

struct SearchConfig {
  RelaxMode relax = RelaxMode::kStochastic;
  DiscretizeMode discretize = DiscretizeMode::kDeterministic;
  double gamma = 10.0;
  double lambda = 1.0;
  double tau_initial = 1.0;
  double tau_final = 0.1;
  std::size_t steps = 5000;
  std::size_t batch_size = 8;
  double lr_theta = 0.01;
  SgdOptions sgd{};
  AdamOptions adam{};
  double fusion_lr_scale = 1.0;
  bool freeze_backbone = false;
  /// Evaluate the objective gap every this many steps (and at the last step); 0 disables.
  std::size_t gap_every = 500;
  /// Leading validation samples used for the gap.
  std::size_t gap_samples = 32;
  /// Debug hook: drop the task losses so only the entropy term drives the logits.
  bool zero_task_loss = false;
  std::uint64_t seed = 1;

  void validate() const;
};

/// Exponential decay from tau_initial at step 0 to tau_final at the last step.
double temperature(const SearchConfig& config, std::size_t step);

struct HistoryRecord {
  std::size_t step = 0;
  double loss_total = 0.0;
  double loss_a = 0.0;
  double loss_b = 0.0;
  double entropy_mean = 0.0;
  double tau = 0.0;
  double lr_theta = 0.0;
  double lr_alpha = 0.0;
  double gap = 0.0;  // NaN when not measured at this step
};

using SearchHistory = std::vector<HistoryRecord>;

void write_history_csv(std::ostream& out, const SearchHistory& history);
void write_alpha_table(std::ostream& out, const Tensor& alpha);

/// Everything needed to continue a search bit for bit.
struct SearchState {
  MultiTaskModel model;
  Tensor logits;
  Sgd sgd_backbone;
  Sgd sgd_fusion;
  Adam adam;
  std::size_t step = 0;
  SearchHistory history;
};

SearchState init_search(const SearchConfig& config, MultiTaskModel model);

/// Mean edge entropy term (gamma / n) * sum H(alpha); zero for an empty space.
Var entropy_term(Var logits, double gamma);

/// Task losses plus the entropy term for the given multipliers.
struct TotalLoss {
  Var total;
  Var task_a;
  Var task_b;
  Var entropy;
};

TotalLoss total_loss(Tape& tape, MultiTaskModel& model, const ModelVars& vars, Var logits, Var multipliers,
                     const Batch& batch, const SearchConfig& config, bool training);

struct GapMeasurement {
  double relaxed = 0.0;   // L(alpha)
  double discrete = 0.0;  // L(Ind(alpha))
  double gap = 0.0;       // |relaxed - discrete|
  double relative() const { return discrete == 0.0 ? gap : gap / std::abs(discrete); }
};

/// Task loss under deterministic relaxation vs under its discretization, same theta and batch.
GapMeasurement objective_gap(MultiTaskModel& model, const Tensor& logits, const Batch& batch, double lambda);

/// One alternating step: theta on X1, logits on X2, disjoint batches drawn from (seed, step).
HistoryRecord alternating_step(SearchState& state, const SearchConfig& config, const Dataset& train,
                               const Batch* gap_batch);

struct SearchResult {
  SearchState state;
  Tensor alpha;
  DiscreteArchitecture architecture;
};

using StepCallback = std::function<void(const SearchState&)>;

/// Runs alternating steps from state.step to config.steps. `after_step` is
/// called after every step (checkpointing).
SearchResult run_search(const SearchConfig& config, SearchState state, const Dataset& train, const Dataset& val,
                        const StepCallback& after_step = {});

/// Discretizes per config.discretize; stochastic draws use (seed, draw).
DiscreteArchitecture discretize(const SearchConfig& config, const Tensor& alpha, std::uint64_t draw = 0);

}  // namespace mtlnas
