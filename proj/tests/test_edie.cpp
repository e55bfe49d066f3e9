#include "doctest.h"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "mst/edie.hpp"

using namespace mst;
using namespace mst::edie;

namespace {
  TrajectorySplit split(double ts, double te, double xs, double xe, int vehicle = 0) {
    return {vehicle, 0, ts, te, xs, xe};
  }
}  // namespace

TEST_CASE("leading split is extrapolated at the first interior speed") {
  std::vector<sim::PositionRecord> recs{{1.0, 5.0}, {2.0, 10.0}};
  auto const s{toSplits(recs, 0.5, 3.0, 100.0)};
  REQUIRE(s.size() == 3);
  CHECK(s[0].ts == 0.5);
  CHECK(s[0].xs == doctest::Approx(2.5));
  CHECK(s[0].speed() == doctest::Approx(5.0));
  CHECK(s[1].speed() == doctest::Approx(5.0));
  CHECK(s[2].xe == doctest::Approx(15.0));
}

TEST_CASE("stationary records give zero-displacement splits") {
  std::vector<sim::PositionRecord> recs{{1.0, 40.0}, {2.0, 40.0}};
  auto const s{toSplits(recs, 0.0, 3.0, 100.0)};
  REQUIRE(s.size() == 3);
  for (auto const& p : s) {
    CHECK(p.dx() == 0.0);
  }
}

TEST_CASE("single record extrapolates at the segment average speed") {
  std::vector<sim::PositionRecord> recs{{4.0, 40.0}};
  auto const s{toSplits(recs, 0.0, 10.0, 100.0)};
  REQUIRE(s.size() == 2);
  CHECK(s[0].speed() == doctest::Approx(10.0));
  CHECK(s[1].speed() == doctest::Approx(10.0));
}

TEST_CASE("extrapolation is clamped to the segment") {
  std::vector<sim::PositionRecord> recs{{1.0, 2.0}, {2.0, 12.0}};
  auto const s{toSplits(recs, 0.0, 2.5, 14.0)};
  CHECK(s.front().xs == 0.0);
  CHECK(s.back().xe == 14.0);
}

TEST_CASE("unfinished visit has no trailing split and bad records throw") {
  std::vector<sim::PositionRecord> recs{{1.0, 5.0}, {2.0, 10.0}};
  auto const s{toSplits(recs, 0.5, kMissing, 100.0)};
  CHECK(s.size() == 2);
  std::vector<sim::PositionRecord> unordered{{2.0, 5.0}, {1.0, 10.0}};
  CHECK_THROWS_AS((void)toSplits(unordered, 0.5, 3.0, 100.0), std::invalid_argument);
  std::vector<sim::PositionRecord> backwards{{1.0, 10.0}, {2.0, 5.0}};
  CHECK_THROWS_AS((void)toSplits(backwards, 0.5, 3.0, 100.0), std::invalid_argument);
  CHECK_THROWS_AS((void)toSplits(recs, 0.5, 1.5, 100.0), std::invalid_argument);
}

TEST_CASE("segment speed examples") {
  std::vector<TrajectorySplit> one{split(0, 2, 0, 30)};
  CHECK(*segmentSpeed(one, {0, 10}) == doctest::Approx(15.0));
  std::vector<TrajectorySplit> two{split(0, 2, 0, 10), split(2, 4, 10, 10)};
  CHECK(*segmentSpeed(two, {0, 10}) == doctest::Approx(2.5));
  CHECK_FALSE(segmentSpeed(two, {20, 30}).has_value());
  // Clipping keeps the constant-speed share.
  auto const part{clip(split(0, 4, 0, 40), {1, 2})};
  CHECK(part.distance == doctest::Approx(10.0));
  CHECK(part.time == doctest::Approx(1.0));
}

TEST_CASE("point speed examples") {
  std::vector<TrajectorySplit> one{split(0, 2, 40, 60)};
  auto const p{pointSpeed(one, 50, 100, {0, 180})};
  CHECK(p.detections == 1);
  CHECK(*p.speed == doctest::Approx(10.0));

  std::vector<TrajectorySplit> two{split(0, 2, 40, 60), split(3, 4, 45, 65)};
  CHECK(*pointSpeed(two, 50, 100, {0, 180}).speed == doctest::Approx(15.0));

  std::vector<TrajectorySplit> edge{split(0, 2, 40, 50)};
  auto const none{pointSpeed(edge, 50, 100, {0, 180})};
  CHECK(none.detections == 0);
  CHECK_FALSE(none.speed.has_value());

  std::vector<TrajectorySplit> stopped{split(0, 2, 50, 50)};
  CHECK(pointSpeed(stopped, 50, 100, {0, 180}).detections == 0);
  // Detected at the start of the split only.
  CHECK(pointSpeed(one, 50, 100, {1, 180}).detections == 0);

  CHECK_THROWS_AS((void)pointSpeed(one, 0, 100, {0, 180}), std::invalid_argument);
  CHECK_THROWS_AS((void)pointSpeed(one, 100, 100, {0, 180}), std::invalid_argument);
}

TEST_CASE("regional speed pools splits") {
  std::vector<TrajectorySplit> a{split(0, 10, 0, 100)};
  CHECK(*regionalSpeed(a, {0, 10}) == *segmentSpeed(a, {0, 10}));
  std::vector<TrajectorySplit> pooled{split(0, 10, 0, 100), split(0, 10, 20, 20)};
  CHECK(*regionalSpeed(pooled, {0, 10}) == doctest::Approx(5.0));
  CHECK_FALSE(regionalSpeed(std::vector<TrajectorySplit>{}, {0, 10}).has_value());
}

TEST_CASE("MFD point examples") {
  std::vector<TrajectorySplit> one{split(0, 1, 0, 10)};
  auto const p{mfdPoint(one, {0, 1}, 10)};
  CHECK(p.flow == doctest::Approx(1.0));
  CHECK(p.density == doctest::Approx(0.1));
  CHECK(*p.speed == doctest::Approx(10.0));
  auto const empty{mfdPoint(std::vector<TrajectorySplit>{}, {0, 1}, 10)};
  CHECK(empty.flow == 0.0);
  CHECK(empty.density == 0.0);
  CHECK_FALSE(empty.speed.has_value());
  CHECK_THROWS_AS((void)mfdPoint(one, {0, 0}, 10), std::invalid_argument);
  CHECK_THROWS_AS((void)mfdPoint(one, {0, 1}, 0), std::invalid_argument);
}

TEST_CASE("travel time statistics") {
  std::vector<sim::VehicleSummary> one{{0, 0, 1, 10.0, 130.0}};
  auto const s1{travelTimeStats(one)};
  CHECK(*s1.mean == doctest::Approx(120.0));
  std::size_t populated{0};
  for (auto c : s1.histogram) {
    populated += c > 0 ? 1 : 0;
  }
  CHECK(populated == 1);

  std::vector<sim::VehicleSummary> none{{0, 0, 1, 10.0, kMissing}};
  auto const s0{travelTimeStats(none)};
  CHECK(s0.histogram.empty());
  CHECK_FALSE(s0.mean.has_value());

  std::vector<sim::VehicleSummary> two{{0, 0, 1, 0.0, 60.0}, {1, 0, 1, 0.0, 180.0}};
  auto const s2{travelTimeStats(two)};
  CHECK(*s2.mean == doctest::Approx(120.0));
  CHECK(*s2.median == doctest::Approx(120.0));
}

TEST_CASE("binner coarsening matches direct clipping") {
  Rng rng{7};
  std::vector<TrajectorySplit> splits;
  for (int i{0}; i < 200; ++i) {
    auto const ts{uniform(rng, 0.0, 170.0)};
    auto const xs{uniform(rng, 0.0, 80.0)};
    splits.push_back(split(ts, ts + uniform(rng, 0.1, 9.0), xs, xs + uniform(rng, 0.0, 20.0), i));
  }
  SplitBinner fine{1, 0.0, 5.0, 36};
  for (auto const& s : splits) {
    fine.add(0, s);
    fine.addDetection(0, s, 50.0);
  }
  auto const coarse{fine.coarsen(36)};
  REQUIRE(coarse.bins() == 1);
  auto const direct{clippedSums(splits, {0.0, 180.0})};
  CHECK(coarse.sums(0, 0).distance == doctest::Approx(direct.distance).epsilon(1e-12));
  CHECK(coarse.sums(0, 0).time == doctest::Approx(direct.time).epsilon(1e-12));
  auto const ps{pointSpeed(splits, 50.0, 100.0, {0.0, 180.0})};
  CHECK(coarse.detectionCount(0, 0) == ps.detections);
  CHECK(coarse.pointSeries(0)[0] == doctest::Approx(*ps.speed));
  for (std::size_t b{0}; b < fine.bins(); ++b) {
    auto const t0{5.0 * static_cast<double>(b)};
    auto const d{clippedSums(splits, {t0, t0 + 5.0})};
    CHECK(fine.sums(0, b).distance == doctest::Approx(d.distance));
  }
}

TEST_CASE("CSV rows") {
  std::ostringstream out;
  writeSplitRow(out, {3, 4, 0.5, 1.0, 2.5, 5.0});
  CHECK(out.str() == "3,4,0.5,1,2.5,5\n");
  std::ostringstream series;
  std::vector<double> v{1.5, kMissing, 2.0};
  writeSpeedSeriesRow(series, 7, 180.0, 0.0, v);
  CHECK(series.str() == "7,180,0,1.5,,2\n");
}
