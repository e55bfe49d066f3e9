#include "doctest.h"

#include <cmath>
#include <sstream>

#include "mst/evalkit.hpp"

using namespace mst;
using namespace mst::eval;

namespace {
  data::MSTSSample sample(std::size_t segs, std::size_t regs, float label, double scale = 1.0) {
    data::MSTSSample s;
    s.segments = segs;
    s.regions = regs;
    s.demandScale = scale;
    s.drone.assign(segs * data::kFineInputSteps, 5.0F);
    s.ld.assign(segs * data::kCoarseInputSteps, 5.0F);
    s.seg.assign(segs * data::kLabelSteps, label);
    s.reg.assign(regs * data::kLabelSteps, label);
    return s;
  }

  SamplePrediction constant(std::size_t segs, std::size_t regs, double v) {
    return {Matrix::Constant(static_cast<Eigen::Index>(segs), 10, v),
            Matrix::Constant(static_cast<Eigen::Index>(regs), 10, v)};
  }
}  // namespace

TEST_CASE("perfect prediction has zero error") {
  std::vector<double> y{3.0, 7.0, 0.5};
  auto const m{metrics(y, y)};
  CHECK(*m.mae == 0.0);
  CHECK(*m.rmse == 0.0);
  CHECK(*m.mape == 0.0);
  CHECK(m.count == 3);
  CHECK(m.mapeCount == 2);
}

TEST_CASE("MAPE* skips labels at or below 1 m/s") {
  std::vector<double> pred{3.0, 5.0, 1.0};
  std::vector<double> label{2.0, 0.5, 1.0};
  auto const m{metrics(pred, label)};
  CHECK(*m.mape == doctest::Approx(50.0));
  CHECK(m.mapeCount == 1);
}

TEST_CASE("unit errors give MAE 1 and RMSE 1") {
  std::vector<double> pred{1.0, 3.0, 5.0, 7.0};
  std::vector<double> label{2.0, 2.0, 6.0, 6.0};
  auto const m{metrics(pred, label)};
  CHECK(*m.mae == doctest::Approx(1.0));
  CHECK(*m.rmse == doctest::Approx(1.0));
}

TEST_CASE("MAE and RMSE are symmetric and RMSE bounds MAE") {
  Rng rng{11};
  for (int trial{0}; trial < 50; ++trial) {
    std::vector<double> a(20);
    std::vector<double> b(20);
    for (std::size_t i{0}; i < a.size(); ++i) {
      a[i] = uniform(rng, 0.0, 14.0);
      b[i] = uniform(rng, 0.0, 14.0);
    }
    auto const ab{metrics(a, b)};
    auto const ba{metrics(b, a)};
    CHECK(*ab.mae == doctest::Approx(*ba.mae));
    CHECK(*ab.rmse == doctest::Approx(*ba.rmse));
    CHECK(*ab.rmse >= *ab.mae - 1e-12);
  }
}

TEST_CASE("metrics over no present label are undefined") {
  std::vector<double> pred{1.0, 2.0};
  std::vector<double> label{kMissing, kMissing};
  auto const m{metrics(pred, label)};
  CHECK_FALSE(m.mae.has_value());
  CHECK_FALSE(m.rmse.has_value());
  CHECK_FALSE(m.mape.has_value());
  CHECK(formatMetric(m.mae) == "n/a");
  std::vector<double> one{1.0};
  CHECK_THROWS_AS((void)metrics(pred, one), std::invalid_argument);
}

TEST_CASE("metrics average per location first") {
  MetricAccumulator acc{2};
  acc.add(0, 1.0, 0.0);                 // location 0: MAE 1 over one entry
  for (int i{0}; i < 9; ++i) {
    acc.add(1, 3.0, 3.0);               // location 1: MAE 0 over nine entries
  }
  acc.add(1, 0.0, kMissing);
  auto const m{acc.result()};
  CHECK(*m.mae == doctest::Approx(0.5));
  CHECK(m.count == 10);
}

TEST_CASE("evaluate reads the 15 and 30 minute columns") {
  auto s{sample(2, 1, 4.0F)};
  auto p{constant(2, 1, 4.0)};
  p.seg(0, 4) = 6.0;   // 15 min
  p.seg(1, 9) = 1.0;   // 30 min
  p.seg(0, 0) = 100.0; // not reported
  p.reg(0, 9) = 5.0;
  std::vector samples{s};
  std::vector preds{p};
  auto const r{evaluate("m", preds, samples)};
  CHECK(horizonMinutes(kHorizonSteps[0]) == 15);
  CHECK(horizonMinutes(kHorizonSteps[1]) == 30);
  CHECK(*r.segment.at15.mae == doctest::Approx(1.0));  // (2 + 0) / 2
  CHECK(*r.segment.at30.mae == doctest::Approx(1.5));
  CHECK(*r.regional.at15.mae == 0.0);
  CHECK(*r.regional.at30.mae == doctest::Approx(1.0));
  std::vector<SamplePrediction> none;
  CHECK_THROWS_AS((void)evaluate("m", none, samples), std::invalid_argument);
  std::vector bad{constant(3, 1, 4.0)};
  CHECK_THROWS_AS((void)evaluate("m", bad, samples), std::invalid_argument);
}

TEST_CASE("input average of a constant input is that constant") {
  auto s{sample(3, 1, 0.0F)};
  std::fill(s.drone.begin(), s.drone.end(), 10.0F);
  auto const p{inputBaseline(BaselineKind::InputAverage, InputModality::Drone, baselineInputs(s), {{0, 1, 2}}, -1.0)};
  CHECK((p.seg.array() == 10.0).all());
  CHECK((p.reg.array() == 10.0).all());
}

TEST_CASE("last observation uses the last present value") {
  auto s{sample(2, 1, 0.0F)};
  for (std::size_t c{0}; c < data::kCoarseInputSteps; ++c) {
    s.ld[c] = static_cast<float>(c + 1);
  }
  s.ld[data::kCoarseInputSteps - 1] = 0.0F;
  s.ld[data::kCoarseInputSteps + 9] = std::nanf("");
  s.ld[data::kCoarseInputSteps + 8] = 2.5F;
  auto const p{inputBaseline(BaselineKind::LastObservation, InputModality::Ld, baselineInputs(s), {{0, 1}}, -1.0)};
  CHECK(p.seg(0, 0) == 0.0);
  CHECK(p.seg(0, 9) == 0.0);
  CHECK(p.seg(1, 5) == 2.5);
  CHECK(p.reg(0, 0) == doctest::Approx(1.25));
}

TEST_CASE("segments without input fall back") {
  auto s{sample(2, 2, 0.0F)};
  std::fill(s.ld.begin(), s.ld.begin() + data::kCoarseInputSteps, std::nanf(""));
  auto const p{inputBaseline(BaselineKind::InputAverage, InputModality::Ld, baselineInputs(s), {{0}, {}}, 7.0)};
  CHECK(p.seg(0, 0) == 7.0);
  CHECK(p.seg(1, 0) == 5.0);
  CHECK(p.reg(1, 3) == 7.0);
  CHECK_THROWS_AS((void)inputBaseline(BaselineKind::LabelAverage, InputModality::Ld, baselineInputs(s), {}, 0.0),
                  std::invalid_argument);
}

TEST_CASE("label average of two constant sessions") {
  std::vector samples{sample(2, 1, 2.0F), sample(2, 1, 4.0F)};
  auto const la{labelAverage(samples)};
  CHECK(la.seg == doctest::Approx(3.0));
  CHECK(la.reg == doctest::Approx(3.0));
  CHECK(la.segMedian == doctest::Approx(3.0));
  auto const p{labelAveragePrediction(la, 2, 1)};
  CHECK((p.seg.array() == la.seg).all());
  CHECK(p.reg.rows() == 1);

  samples[1].seg[0] = std::nanf("");
  samples[1].seg[1] = 100.0F;
  auto const skewed{labelAverage(samples)};
  CHECK(skewed.segMedian == doctest::Approx(2.0));  // 20 of the 39 present labels are 2
  CHECK(skewed.seg > 3.0);

  for (auto& s : samples) {
    std::fill(s.reg.begin(), s.reg.end(), std::nanf(""));
  }
  CHECK_THROWS_AS((void)labelAverage(samples), std::invalid_argument);
}

TEST_CASE("per-location label average") {
  auto a{sample(2, 1, 2.0F)};
  std::fill(a.seg.begin() + 10, a.seg.end(), std::nanf(""));
  std::vector samples{a};
  auto const la{labelAverage(samples)};
  CHECK(la.perSegment[0] == doctest::Approx(2.0));
  CHECK(isMissing(la.perSegment[1]));
  auto const p{labelAveragePrediction(la, 2, 1, LabelStatistic::PerLocationMean)};
  CHECK(p.seg(1, 0) == doctest::Approx(la.seg));
}

TEST_CASE("a single group reproduces the overall segment MAE") {
  Rng rng{3};
  std::vector<data::MSTSSample> samples;
  std::vector<SamplePrediction> preds;
  for (int i{0}; i < 4; ++i) {
    samples.push_back(sample(3, 1, static_cast<float>(uniform(rng, 2, 12)), 1.23));
    auto p{constant(3, 1, 0.0)};
    for (Eigen::Index r{0}; r < 3; ++r) {
      for (Eigen::Index c{0}; c < 10; ++c) {
        p.seg(r, c) = uniform(rng, 0, 14);
      }
    }
    preds.push_back(p);
  }
  samples[0].seg[4] = std::nanf("");
  auto const overall{evaluate("m", preds, samples)};
  auto const groups{groupByDemandScale(preds, samples)};
  REQUIRE(groups.size() == 1);
  CHECK(groups[0].key == "1.2");
  CHECK(*groups[0].mae15 == doctest::Approx(*overall.segment.at15.mae));
  CHECK(*groups[0].mae30 == doctest::Approx(*overall.segment.at30.mae));
  CHECK(groups[0].count == 12);
}

TEST_CASE("demand scales fall into separate groups") {
  std::vector samples{sample(1, 1, 5.0F, 1.2), sample(1, 1, 5.0F, 1.8), sample(1, 1, 5.0F, 1.25)};
  std::vector preds{constant(1, 1, 5.0), constant(1, 1, 7.0), constant(1, 1, 6.0)};
  auto const groups{groupByDemandScale(preds, samples)};
  REQUIRE(groups.size() == 2);
  CHECK(groups[0].key == "1.2");
  CHECK(*groups[0].mae30 == doctest::Approx(0.5));
  CHECK(groups[1].key == "1.8");
  CHECK(*groups[1].mae30 == doctest::Approx(2.0));
}

TEST_CASE("average speed bins in numeric order") {
  auto s{sample(3, 1, 0.0F)};
  std::fill(s.seg.begin(), s.seg.begin() + 10, 1.0F);
  std::fill(s.seg.begin() + 10, s.seg.begin() + 20, 11.0F);
  std::fill(s.seg.begin() + 20, s.seg.end(), 14.0F);
  std::vector samples{s};
  std::vector preds{constant(3, 1, 11.0)};
  auto const groups{groupByAverageSpeed(preds, samples)};
  REQUIRE(groups.size() == 3);
  CHECK(groups[0].key == "[0,2)");
  CHECK(*groups[0].mae15 == doctest::Approx(10.0));
  CHECK(groups[1].key == "[10,12)");
  CHECK(groups[2].key == "[12,14)");
  CHECK(*groups[2].mae30 == doctest::Approx(3.0));
}

TEST_CASE("per-segment rows carry the segment midpoints") {
  auto const graph{roadnet::buildGridNetwork({2, 2, 90, 180, 14, 7})};
  auto const n{graph.size()};
  std::vector samples{sample(n, 1, 5.0F)};
  auto p{constant(n, 1, 5.0)};
  p.seg(1, 9) = 8.0;
  std::vector preds{p};
  auto const rows{groupBySegment(preds, samples, graph)};
  REQUIRE(rows.size() == n);
  CHECK(rows[1].midpoint == graph.segment(1).midpoint);
  CHECK(*rows[1].mae30 == doctest::Approx(3.0));
  CHECK(*rows[0].mae30 == 0.0);
  std::ostringstream out;
  writeSegmentCsv(out, rows);
  CHECK(out.str().rfind("segment_id,x,y,mae_15,mae_30\n", 0) == 0);
}

TEST_CASE("report csv marks undefined metrics") {
  EvalReport r{"LA", {}, {}};
  r.segment.at15.mae = 1.5;
  std::vector reports{r};
  std::ostringstream out;
  writeReportCsv(out, reports);
  auto const text{out.str()};
  CHECK(text.rfind("method,task,horizon_min,mae,rmse,mape_star,count\n", 0) == 0);
  CHECK(text.find("LA,segment,15,1.5,n/a,n/a,0\n") != std::string::npos);
  CHECK(text.find("LA,regional,30,n/a,n/a,n/a,0\n") != std::string::npos);
  std::ostringstream table;
  writeTableCsv(table, reports);
  CHECK(table.str().find("seg_15_mae,seg_15_rmse,seg_15_mape_star") != std::string::npos);
  CHECK(baselineName(BaselineKind::InputAverage, InputModality::Drone) == "IA(drone)");
}
