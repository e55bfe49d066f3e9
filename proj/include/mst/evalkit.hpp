/// @file evalkit.hpp
/// @brief Error metrics, constant baselines and grouped error tables.

#pragma once

#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "common.hpp"
#include "dataset.hpp"
#include "roadnet.hpp"
#include "tensor.hpp"

namespace mst::eval {

  using ad::Matrix;

  /// MAPE* ignores labels at or below this speed (m/s).
  inline constexpr double kMapeFloor{1.0};

  struct Metrics {
    std::optional<double> mae;
    std::optional<double> rmse;
    std::optional<double> mape;  ///< percent
    std::size_t count{0};        ///< entries used by MAE and RMSE
    std::size_t mapeCount{0};    ///< entries used by MAPE*
  };

  /// Per-location accumulation; each metric is computed per location and then averaged over the
  /// locations where it is defined. MISSING labels are skipped everywhere.
  class MetricAccumulator {
  public:
    explicit MetricAccumulator(std::size_t locations);
    void add(std::size_t location, double pred, double label);
    [[nodiscard]] Metrics result() const;

  private:
    struct Sums {
      double abs{0.0};
      double sq{0.0};
      double pct{0.0};
      std::size_t n{0};
      std::size_t nPct{0};
    };
    std::vector<Sums> m_sums;
  };

  /// Single-location convenience over aligned vectors.
  [[nodiscard]] Metrics metrics(std::span<double const> pred, std::span<double const> label);

  /// Prediction steps reported: 15 min (step 5) and 30 min (step 10), as zero-based columns.
  inline constexpr std::size_t kHorizonSteps[2]{4, 9};
  [[nodiscard]] inline int horizonMinutes(std::size_t column) { return static_cast<int>(column + 1) * 3; }

  /// Predictions for one sample, in m/s.
  struct SamplePrediction {
    Matrix seg;  ///< [segments x 10]
    Matrix reg;  ///< [regions x 10]
  };

  struct TaskReport {
    Metrics at15;
    Metrics at30;
  };

  struct EvalReport {
    std::string method;
    TaskReport segment;
    TaskReport regional;
  };

  /// Compares predictions with the (clean) labels stored in the samples.
  /// @throw std::invalid_argument on count or shape mismatch.
  [[nodiscard]] EvalReport evaluate(std::string method, std::span<SamplePrediction const> preds,
                                    std::span<data::MSTSSample const> samples);

  enum class BaselineKind { LastObservation, InputAverage, LabelAverage };
  enum class InputModality { Drone, Ld };

  [[nodiscard]] std::string baselineName(BaselineKind kind, InputModality modality);

  /// Constant predictions of the label-average baseline: one global mean (or median) of all
  /// present labels per task, or a per-location mean.
  struct LabelAverage {
    double seg{0.0};
    double reg{0.0};
    double segMedian{0.0};
    double regMedian{0.0};
    std::vector<double> perSegment;  ///< MISSING where a segment never has a label
    std::vector<double> perRegion;
  };

  /// Reads only labels, and only of the samples it is given (the test set).
  /// @throw std::invalid_argument if a task has no present label.
  [[nodiscard]] LabelAverage labelAverage(std::span<data::MSTSSample const> test);

  enum class LabelStatistic { Mean, Median, PerLocationMean };

  [[nodiscard]] SamplePrediction labelAveragePrediction(LabelAverage const& la, std::size_t segments,
                                                        std::size_t regions, LabelStatistic stat = LabelStatistic::Mean);

  /// Inputs a baseline may look at; labels are not part of it.
  struct BaselineInputs {
    std::span<float const> drone;  ///< [segments x 360]
    std::span<float const> ld;     ///< [segments x 10]
    std::size_t segments{0};
  };

  [[nodiscard]] BaselineInputs baselineInputs(data::MSTSSample const& s);

  /// LO: last present input value per segment; IA: mean of present input values. Constant over
  /// the horizon. Segments with no present input take `fallback`. Regional predictions average
  /// the member segments.
  [[nodiscard]] SamplePrediction inputBaseline(BaselineKind kind, InputModality modality, BaselineInputs const& in,
                                               std::vector<std::vector<int>> const& regionMembers, double fallback);

  /// Grouped MAE at both horizons for the segment task.
  struct GroupRow {
    std::string key;
    std::size_t count{0};
    std::optional<double> mae15;
    std::optional<double> mae30;
  };

  /// Sessions binned by demand scale in steps of 0.1.
  [[nodiscard]] std::vector<GroupRow> groupByDemandScale(std::span<SamplePrediction const> preds,
                                                         std::span<data::MSTSSample const> samples);

  /// Segments binned by their mean test-label speed, 2 m/s bins over [0, 14].
  [[nodiscard]] std::vector<GroupRow> groupByAverageSpeed(std::span<SamplePrediction const> preds,
                                                          std::span<data::MSTSSample const> samples);

  struct SegmentRow {
    int segment{0};
    Point2 midpoint;
    std::optional<double> mae15;
    std::optional<double> mae30;
  };

  [[nodiscard]] std::vector<SegmentRow> groupBySegment(std::span<SamplePrediction const> preds,
                                                       std::span<data::MSTSSample const> samples,
                                                       roadnet::RoadGraph const& graph);

  /// "n/a" for undefined values.
  [[nodiscard]] std::string formatMetric(std::optional<double> v);

  /// `method,task,horizon_min,mae,rmse,mape_star,count` rows.
  void writeReportCsv(std::ostream& out, std::span<EvalReport const> reports);
  /// One row per method with segment/regional x 15/30 min x MAE/RMSE/MAPE* columns.
  void writeTableCsv(std::ostream& out, std::span<EvalReport const> reports);
  void writeGroupCsv(std::ostream& out, std::string const& keyName, std::span<GroupRow const> rows);
  void writeSegmentCsv(std::ostream& out, std::span<SegmentRow const> rows);

}  // namespace mst::eval
