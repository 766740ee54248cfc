#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tapnet/autodiff.hpp"
#include "tapnet/dataset.hpp"
#include "tapnet/model.hpp"

namespace tapnet {

struct LossWeights {
  double alpha = 1.0;
  double flow = 0.005;
  double conservation = 0.05;
  void validate() const;
};

/// Flow terms are in class-native vehicles scaled by this factor.
inline constexpr double kFlowUnit = 1e-2;
/// Node residuals are summed over every node and class, so L_c is counted in 10^4 vehicles.
inline constexpr double kConservationUnit = 1e-4;

struct LossParts {
  double alpha = 0.0;
  double flow = 0.0;          // already in kFlowUnit
  double conservation = 0.0;  // in kConservationUnit
};

/// w_alpha L_alpha + w_f L_f + w_c L_c on plain values.
double loss_total(const LossParts& parts, const LossWeights& w);

template <typename Scalar>
struct LossVars {
  ad::Var<Scalar> alpha, flow, conservation;
};

/// L_alpha = sum_c mean_e |ratio - truth|, L_f = kFlowUnit * sum_c mean_e |flow - truth|.
template <typename Scalar>
LossVars<Scalar> loss_supervised(ad::Tape<Scalar>& tape, const ModelOutput<Scalar>& out, const Targets& truth);

/// L_c = sum_c sum_i |inflow - outflow - net demand| of the predicted class flows.
template <typename Scalar>
ad::Var<Scalar> loss_conservation(ad::Tape<Scalar>& tape, const ModelOutput<Scalar>& out, const ModelInput& in);

/// Training objective of one sample. The conservation term enters in kConservationUnit.
template <typename Scalar>
ad::Var<Scalar> sample_loss(ad::Tape<Scalar>& tape, const Bound<Scalar>& p, const ModelInput& in,
                            const Targets& truth, const LossWeights& w, LossParts* parts = nullptr);

struct Sample {
  int id = 0;  // dataset record index
  ModelInput input;
  Targets targets;
};

std::vector<Sample> make_samples(const RoadNetwork& base, const std::vector<VehicleClass>& classes,
                                 const std::vector<DatasetRecord>& records, const std::vector<int>& positions,
                                 const Normalization& norm, int threads = 1);

struct TrainConfig {
  double lr = 1e-3;
  int batch_size = 128;
  int steps = 1000;
  std::uint64_t seed = 0;
  LossWeights weights;
  int eval_every = 50;
  /// Stop once the training-batch L_alpha falls below this (0 disables).
  double stop_below = 0.0;
  int threads = 1;
  void validate() const;
};

struct HistoryRow {
  int step = 0;
  double loss = 0.0;
  LossParts parts;
  double val_alpha = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
  ModelParams<double> best;
  ModelParams<double> last;
  int best_step = 0;
  double best_val_alpha = std::numeric_limits<double>::infinity();
  std::vector<HistoryRow> history;
};

/// Mean over samples of sum_c mean_e |ratio - truth| on unclamped predictions.
double validation_alpha(const ModelParams<double>& params, const std::vector<Sample>& samples, int threads = 1);

/// Adam on mini-batches in a seed-fixed order. Keeps the parameters with the lowest
/// validation L_alpha (train samples stand in when `val` is empty).
TrainResult train(const ModelConfig& cfg, const TrainConfig& tc, const std::vector<Sample>& train_set,
                  const std::vector<Sample>& val = {});

// --- evaluation ---------------------------------------------------------------

double mae(const Eigen::VectorXd& truth, const Eigen::VectorXd& pred);
double rmse(const Eigen::VectorXd& truth, const Eigen::VectorXd& pred);
double pearson(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

struct ClassMetrics {
  std::string name;
  double ratio_mae = 0.0, ratio_rmse = 0.0;
  double flow_mae = 0.0, flow_rmse = 0.0;
  double flow_pearson = 0.0;
  long edges = 0;
};

struct MetricsReport {
  std::vector<ClassMetrics> classes;
  double residue = 0.0;  // mean over samples of sum |node residual| / total demand
  int samples = 0;
  double mean_ratio_mae() const;
};

struct ScatterPoint {
  int sample = 0;
  int link = 0;  // base link index
  double truth_flow = 0.0, pred_flow = 0.0, truth_ratio = 0.0, pred_ratio = 0.0;
};

struct Evaluation {
  MetricsReport report;
  std::vector<std::vector<ScatterPoint>> scatter;  // per class
  Eigen::MatrixXd node_residue;                      // nodes x classes, mean |residual| over samples
};

/// Predictions are clamped at zero before scoring. Result does not depend on sample order.
Evaluation evaluate(const ModelParams<double>& params, const std::vector<Sample>& samples,
                    const std::vector<VehicleClass>& classes, int threads = 1);

nlohmann::json report_to_json(const MetricsReport& r);
/// metrics.json, scatter_<class>.csv, residue_nodes.csv
void write_evaluation(const std::string& dir, const Evaluation& ev, const RoadNetwork& base,
                      const std::vector<VehicleClass>& classes);
void write_history(const std::string& path, const std::vector<HistoryRow>& history);

struct FoldResult {
  int fold = 0;
  TrainResult train;
  MetricsReport test;
};

/// k-fold cross-validation over `samples`: each fold trains on the rest and scores on itself.
std::vector<FoldResult> cross_validate(const ModelConfig& cfg, const TrainConfig& tc,
                                       const std::vector<Sample>& samples,
                                       const std::vector<VehicleClass>& classes, int k);

struct ModelGradCheck {
  ad::GradCheckResult check;
  double kink_margin = 0.0;  // at the evaluation point
  int attempts = 0;
};

/// Finite-difference check of sample_loss through the full model on a fixed 4-node,
/// 2-class instance (2 layers, 2 heads). The evaluation point is a jittered init whose
/// relu/abs inputs all sit at least `min_margin` from their kink.
ModelGradCheck check_model_gradients(double eps = 1e-4, int max_coordinates = 400, std::uint64_t seed = 0,
                                     Variant variant = Variant::Full, double min_margin = 1e-3);

}  // namespace tapnet
