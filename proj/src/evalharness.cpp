#include "mtlnas/evalharness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <optional>
#include <ostream>

namespace mtlnas {

std::vector<std::size_t> confusion_matrix(std::span<const int> predicted, std::span<const int> truth,
                                          std::size_t classes) {
  if (predicted.size() != truth.size()) throw ShapeError("confusion_matrix: prediction and truth sizes differ");
  std::vector<std::size_t> m(classes * classes, 0);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto t = static_cast<std::size_t>(truth[i]), p = static_cast<std::size_t>(predicted[i]);
    if (t >= classes || p >= classes) throw Error("confusion_matrix: label outside [0, classes)");
    ++m[t * classes + p];
  }
  return m;
}

double pixel_accuracy(std::span<const std::size_t> confusion, std::size_t classes) {
  std::size_t correct = 0, total = 0;
  for (std::size_t t = 0; t < classes; ++t)
    for (std::size_t p = 0; p < classes; ++p) {
      total += confusion[t * classes + p];
      if (t == p) correct += confusion[t * classes + p];
    }
  return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

double mean_iou(std::span<const std::size_t> confusion, std::size_t classes) {
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    std::size_t row = 0, col = 0;
    for (std::size_t k = 0; k < classes; ++k) {
      row += confusion[c * classes + k];
      col += confusion[k * classes + c];
    }
    const std::size_t tp = confusion[c * classes + c];
    const std::size_t uni = row + col - tp;
    if (uni == 0) continue;
    sum += static_cast<double>(tp) / static_cast<double>(uni);
    ++present;
  }
  return present == 0 ? 0.0 : sum / static_cast<double>(present);
}

std::vector<int> argmax_labels(const Tensor& logits) {
  const std::size_t n = logits.dim(0), k = logits.dim(1), plane = logits.dim(2) * logits.dim(3);
  std::vector<int> out(n * plane);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < plane; ++p) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < k; ++c)
        if (logits[(i * k + c) * plane + p] > logits[(i * k + best) * plane + p]) best = c;
      out[i * plane + p] = static_cast<int>(best);
    }
  return out;
}

std::vector<double> angular_errors(const Tensor& predicted, const Tensor& target) {
  if (predicted.shape() != target.shape() || predicted.rank() != 4) {
    throw ShapeError("angular_errors: shapes " + to_string(predicted.shape()) + " and " + to_string(target.shape()));
  }
  const std::size_t n = predicted.dim(0), c = predicted.dim(1), plane = predicted.dim(2) * predicted.dim(3);
  std::vector<double> out(n * plane);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < plane; ++p) {
      double pp = 0.0, tt = 0.0, pt = 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double a = predicted[(i * c + ch) * plane + p], b = target[(i * c + ch) * plane + p];
        pp += a * a;
        tt += b * b;
        pt += a * b;
      }
      const double denom = std::sqrt(pp) * std::sqrt(tt);
      const double cosine = denom > 0.0 ? std::clamp(pt / denom, -1.0, 1.0) : 0.0;
      out[i * plane + p] = std::acos(cosine) * 180.0 / M_PI;
    }
  return out;
}

void fill_angle_metrics(MetricsReport& report, std::vector<double> angles) {
  if (angles.empty()) throw Error("metrics: no pixels");
  const double count = static_cast<double>(angles.size());
  report.mean_angle = std::accumulate(angles.begin(), angles.end(), 0.0) / count;
  std::sort(angles.begin(), angles.end());
  const std::size_t mid = angles.size() / 2;
  report.median_angle = angles.size() % 2 == 1 ? angles[mid] : 0.5 * (angles[mid - 1] + angles[mid]);
  auto within = [&](double limit) {
    return static_cast<double>(std::upper_bound(angles.begin(), angles.end(), limit) - angles.begin()) / count;
  };
  report.within_11_25 = within(11.25);
  report.within_22_5 = within(22.5);
  report.within_30 = within(30.0);
}

void fill_segmentation_metrics(MetricsReport& report, const Tensor& logits, std::span<const int> labels,
                               std::size_t classes) {
  const auto conf = confusion_matrix(argmax_labels(logits), labels, classes);
  report.pixel_accuracy = pixel_accuracy(conf, classes);
  report.mean_iou = mean_iou(conf, classes);
}

MetricsReport evaluate(MultiTaskModel& model, const DiscreteArchitecture& arch, const Dataset& data, double lambda) {
  if (data.size() == 0) throw Error("evaluate: empty dataset");
  const Batch batch = full_batch(data);
  Tape tape;
  ModelVars vars = bind_model(tape, model, false);
  Tensor bits(Shape{arch.size()});
  for (std::size_t e = 0; e < arch.size(); ++e) bits[e] = arch.bits[e];
  if (arch.size() != model.space.size()) throw ShapeError("evaluate: architecture size mismatch");
  TaskOutputs out = forward_model(tape, model, vars, tape.constant(bits), batch.input, false);
  LossParts losses = task_losses(model, out, batch, lambda);
  MetricsReport m;
  m.loss_a = losses.a.value().item();
  m.loss_b = losses.b.value().item();
  m.combined_loss = losses.total.value().item();
  const BackboneSpec& sa = model.spec(TaskId::kA);
  const BackboneSpec& sb = model.spec(TaskId::kB);
  // Metrics follow the head kinds; the usual pairing is classifier A, regressor B.
  for (const auto& [spec, value] : {std::pair{&sa, &out.a}, std::pair{&sb, &out.b}}) {
    if (spec->head == HeadKind::kClassifier) {
      fill_segmentation_metrics(m, value->value(), batch.labels, spec->classes);
    } else {
      fill_angle_metrics(m, angular_errors(value->value(), batch.vec_field));
    }
  }
  return m;
}

bool better_than(const MetricsReport& x, const MetricsReport& y) {
  if (x.combined_loss != y.combined_loss) return x.combined_loss < y.combined_loss;
  return x.mean_iou > y.mean_iou;
}

MultiTaskModel train_fixed(MultiTaskModel model, const DiscreteArchitecture& arch, const Dataset& train,
                           const TrainBudget& budget) {
  if (arch.size() != model.space.size()) throw ShapeError("train_fixed: architecture size mismatch");
  Tensor bits(Shape{arch.size()});
  for (std::size_t e = 0; e < arch.size(); ++e) bits[e] = arch.bits[e];
  Sgd sgd_backbone(budget.sgd), sgd_fusion(budget.sgd);
  const std::size_t split = model.backbone_param_count();
  for (std::size_t step = 0; step < budget.steps; ++step) {
    auto [idx, unused] = disjoint_batch_indices(train.size(), budget.batch_size, step, budget.seed);
    (void)unused;
    const Batch batch = make_batch(train, idx);
    Tape tape;
    ModelVars vars = bind_model(tape, model, true);
    TaskOutputs out = forward_model(tape, model, vars, tape.constant(bits), batch.input, true);
    Var loss = task_losses(model, out, batch, budget.lambda).total;
    if (!std::isfinite(loss.value().item())) {
      throw DivergenceError("train_fixed: non-finite loss at step " + std::to_string(step));
    }
    tape.backward(loss);
    const std::vector<Var> theta_vars = vars.theta();
    std::vector<Tensor*> theta = model.theta();
    std::vector<Tensor> grads;
    grads.reserve(theta_vars.size());
    for (const Var& v : theta_vars) grads.push_back(tape.grad(v));
    const double lr = poly_lr(budget.lr, step, budget.steps);
    if (!budget.freeze_backbone) {
      sgd_backbone.step(std::span(theta.data(), split), std::span(grads.data(), split), lr);
    }
    sgd_fusion.step(std::span(theta.data() + split, theta.size() - split),
                    std::span(grads.data() + split, grads.size() - split), lr * budget.fusion_lr_scale);
  }
  return model;
}

OracleRanking oracle_enumerate(const MultiTaskModel& snapshot, const Dataset& train, const Dataset& val,
                               const TrainBudget& budget) {
  const std::size_t edges = snapshot.space.size();
  if (edges > kOracleMaxEdges) {
    throw Error("oracle: " + std::to_string(edges) + " edges exceed the exhaustive limit of " +
                std::to_string(kOracleMaxEdges));
  }
  const std::size_t count = std::size_t{1} << edges;
  OracleRanking ranking(count);
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(count); ++i) {
    const DiscreteArchitecture arch = DiscreteArchitecture::from_index(static_cast<std::uint64_t>(i), edges);
    MultiTaskModel trained = train_fixed(snapshot, arch, train, budget);
    ranking[static_cast<std::size_t>(i)] = OracleEntry{arch, evaluate(trained, arch, val, budget.lambda).combined_loss, 0};
  }
  std::stable_sort(ranking.begin(), ranking.end(), [](const OracleEntry& x, const OracleEntry& y) {
    if (x.val_loss != y.val_loss) return x.val_loss < y.val_loss;
    return x.arch < y.arch;
  });
  for (std::size_t r = 0; r < ranking.size(); ++r) ranking[r].rank = r + 1;
  return ranking;
}

std::size_t oracle_rank(const OracleRanking& ranking, const DiscreteArchitecture& arch) {
  for (const OracleEntry& e : ranking)
    if (e.arch == arch) return e.rank;
  throw Error("oracle: architecture " + arch.to_string() + " not in ranking");
}

double oracle_loss(const OracleRanking& ranking, const DiscreteArchitecture& arch) {
  for (const OracleEntry& e : ranking)
    if (e.arch == arch) return e.val_loss;
  throw Error("oracle: architecture " + arch.to_string() + " not in ranking");
}

void write_oracle_csv(std::ostream& out, const OracleRanking& ranking) {
  out << "architecture,val_loss,rank\n";
  char buf[128];
  for (const OracleEntry& e : ranking) {
    std::snprintf(buf, sizeof buf, ",%.17g,%zu\n", e.val_loss, e.rank);
    out << e.arch.to_string() << buf;
  }
}

DiscreteArchitecture sample_uniform_architecture(std::size_t edges, Rng& rng) {
  DiscreteArchitecture arch;
  for (std::size_t e = 0; e < edges; ++e) arch.bits.push_back(static_cast<std::uint8_t>(rng.below(2)));
  return arch;
}

RandomSearchResult random_search(std::size_t edges, std::size_t k, std::uint64_t seed,
                                 const ArchitectureEvaluator& score) {
  if (k == 0) throw Error("random_search: K must be at least 1");
  Rng rng(derive_seed(seed, {tag(Stream::kRandomSearch)}));
  RandomSearchResult r;
  for (std::size_t i = 0; i < k; ++i) r.sampled.push_back(sample_uniform_architecture(edges, rng));
  for (const DiscreteArchitecture& a : r.sampled) r.losses.push_back(score(a));
  const auto best = static_cast<std::size_t>(std::min_element(r.losses.begin(), r.losses.end()) - r.losses.begin());
  r.best = r.sampled[best];
  r.best_loss = r.losses[best];
  return r;
}

TrainedRandomSearch random_search_trained(const MultiTaskModel& snapshot, std::size_t k, const Dataset& train,
                                          const Dataset& val, const TrainBudget& budget) {
  TrainedRandomSearch out;
  std::vector<MetricsReport> reports;
  out.search = random_search(snapshot.space.size(), k, budget.seed, [&](const DiscreteArchitecture& arch) {
    MultiTaskModel trained = train_fixed(snapshot, arch, train, budget);
    reports.push_back(evaluate(trained, arch, val, budget.lambda));
    return reports.back().combined_loss;
  });
  for (std::size_t i = 0; i < reports.size(); ++i)
    if (out.search.sampled[i] == out.search.best) {
      out.metrics = reports[i];
      break;
    }
  return out;
}

BaselineResult supernet_baseline(const std::string& preset, const SearchSpace& space, const BackboneParams& a,
                                 const BackboneParams& b, double w_ti, const Dataset& train, const Dataset& val,
                                 const TrainBudget& budget) {
  SearchSpace used = space;
  DiscreteArchitecture arch;
  if (preset == "all-edges") {
    arch = DiscreteArchitecture::all(space.size(), true);
  } else if (preset == "same-level") {
    used = SearchSpace::build(space.spec(TaskId::kA), space.spec(TaskId::kB), ConstraintConfig::from_preset("same-level"));
    arch = DiscreteArchitecture::all(used.size(), true);
  } else if (preset == "none") {
    arch = DiscreteArchitecture::all(space.size(), false);
  } else {
    throw Error("supernet_baseline: unknown preset '" + preset + "' (expected all-edges, same-level or none)");
  }
  BaselineResult r{arch, train_fixed(make_model(used, a, b, w_ti), arch, train, budget), {}};
  r.metrics = evaluate(r.model, arch, val, budget.lambda);
  return r;
}

std::array<std::size_t, kHistogramBins> alpha_histogram(const Tensor& alpha) {
  std::array<std::size_t, kHistogramBins> bins{};
  for (double a : alpha.data()) {
    if (!(a >= 0.0 && a <= 1.0)) throw Error("alpha_histogram: value outside [0, 1]");
    auto k = static_cast<std::size_t>(a / 0.04);
    // Guard against a / 0.04 rounding just below an integer boundary.
    while (k + 1 < kHistogramBins && a >= 0.04 * static_cast<double>(k + 1)) ++k;
    while (k > 0 && a < 0.04 * static_cast<double>(k)) --k;
    bins[std::min(k, kHistogramBins - 1)] += 1;
  }
  return bins;
}

namespace {

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

}  // namespace

std::vector<AblationCell> run_ablation(const AblationSpec& spec, const SearchSpace& space,
                                       const FixtureProvider& fixtures) {
  using CellRun = std::function<MetricsReport(const Fixture&, std::uint64_t, std::string&)>;
  struct Plan {
    std::string axis, key;
    CellRun run;
  };
  auto search_cell = [&space](SearchConfig cfg, double w_ti, bool random_init) -> CellRun {
    return [&space, cfg, w_ti, random_init](const Fixture& fx, std::uint64_t seed, std::string& arch_out) {
      SearchConfig c = cfg;
      c.seed = seed;
      MultiTaskModel model = make_model(space, fx.a, fx.b, w_ti);
      if (random_init) model.fusion = init_fusion_params_random(space, seed);
      SearchResult r = run_search(c, init_search(c, std::move(model)), fx.data.train, fx.data.val);
      arch_out = r.architecture.to_string();
      return evaluate(r.state.model, r.architecture, fx.data.val, c.lambda);
    };
  };
  CellRun random_cell = [&spec, &space](const Fixture& fx, std::uint64_t seed, std::string& arch_out) {
    TrainBudget budget = spec.random_budget;
    budget.seed = seed;
    TrainedRandomSearch r = random_search_trained(make_model(space, fx.a, fx.b, spec.w_ti), spec.random_k,
                                                  fx.data.train, fx.data.val, budget);
    arch_out = r.search.best.to_string();
    return r.metrics;
  };

  std::vector<Plan> plans;
  for (const std::string& axis : spec.axes) {
    if (axis == "relaxation") {
      for (RelaxMode relax : {RelaxMode::kDeterministic, RelaxMode::kStochastic})
        for (DiscretizeMode disc : {DiscretizeMode::kDeterministic, DiscretizeMode::kStochastic})
          for (bool entropy : {false, true}) {
            SearchConfig cfg = spec.search;
            cfg.relax = relax;
            cfg.discretize = disc;
            if (!entropy) cfg.gamma = 0.0;
            plans.push_back({axis,
                             std::string("relax=") + to_string(relax) + ";disc=" + to_string(disc) +
                                 ";entropy=" + (entropy ? "on" : "off"),
                             search_cell(cfg, spec.w_ti, false)});
          }
      plans.push_back({axis, "random_search", random_cell});
    } else if (axis == "w_ti") {
      for (double w : {0.0, 0.1, 0.2, 0.5, 0.8, 0.9, 1.0}) {
        plans.push_back({axis, "w_ti=" + format_double(w), search_cell(spec.search, w, false)});
      }
      plans.push_back({axis, "w_ti=random", search_cell(spec.search, spec.w_ti, true)});
    } else if (axis == "lr_scale") {
      for (double s : {1.0, 10.0, 100.0, 1000.0}) {
        SearchConfig cfg = spec.search;
        cfg.fusion_lr_scale = s;
        plans.push_back({axis, "lr_scale=" + format_double(s), search_cell(cfg, spec.w_ti, false)});
      }
    } else {
      throw Error("ablation: unknown axis '" + axis + "' (expected relaxation, w_ti or lr_scale)");
    }
  }

  std::vector<AblationCell> cells;
  for (std::uint64_t seed : spec.seeds) {
    std::optional<Fixture> fx;
    std::string fixture_error;
    try {
      fx = fixtures(seed);
    } catch (const Error& e) {
      fixture_error = std::string("failed: fixture: ") + e.what();
    }
    for (const Plan& plan : plans) {
      AblationCell cell;
      cell.axis = plan.axis;
      cell.key = plan.key;
      cell.seed = seed;
      if (!fx) {
        cell.status = fixture_error;
      } else {
        try {
          cell.metrics = plan.run(*fx, seed, cell.architecture);
        } catch (const Error& e) {
          cell.status = std::string("failed: ") + e.what();
        }
      }
      cells.push_back(std::move(cell));
    }
  }
  return cells;
}

void write_metrics_csv_header(std::ostream& out) {
  out << "pixel_accuracy,mean_iou,mean_angle,median_angle,within_11_25,within_22_5,within_30,loss_A,loss_B,"
         "combined_loss";
}

void write_metrics_csv_row(std::ostream& out, const MetricsReport& m) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", m.pixel_accuracy,
                m.mean_iou, m.mean_angle, m.median_angle, m.within_11_25, m.within_22_5, m.within_30, m.loss_a,
                m.loss_b, m.combined_loss);
  out << buf;
}

void write_ablation_csv(std::ostream& out, std::vector<AblationCell> cells) {
  std::sort(cells.begin(), cells.end(), [](const AblationCell& x, const AblationCell& y) {
    if (x.axis != y.axis) return x.axis < y.axis;
    if (x.key != y.key) return x.key < y.key;
    return x.seed < y.seed;
  });
  out << "axis,cell,seed,status,architecture,";
  write_metrics_csv_header(out);
  out << "\n";
  for (const AblationCell& c : cells) {
    std::string status = c.status;
    std::replace(status.begin(), status.end(), ',', ';');
    out << c.axis << "," << c.key << "," << c.seed << "," << status << "," << c.architecture << ",";
    write_metrics_csv_row(out, c.metrics);
    out << "\n";
  }
}

}  // namespace mtlnas
