#include "doctest.h"

#include <cstring>
#include <set>

#include "mst/sensors.hpp"

using namespace mst;
using namespace mst::sensors;

namespace {
  bool bitEqual(SeriesMatrix const& a, SeriesMatrix const& b) {
    return a.rows == b.rows && a.cols == b.cols &&
           std::memcmp(a.values.data(), b.values.data(), a.values.size() * sizeof(double)) == 0;
  }

  /// Three segments, two regions, four coarse steps of two fine steps each.
  SessionSeries toySeries() {
    SessionSeries s;
    s.fineResolution = 90.0;
    s.drone = SeriesMatrix{3, 8};
    s.ld = SeriesMatrix{3, 4};
    s.segment = SeriesMatrix{3, 4};
    s.distance = SeriesMatrix{3, 4, 0.0};
    s.time = SeriesMatrix{3, 4, 0.0};
    for (std::size_t seg{0}; seg < 3; ++seg) {
      for (std::size_t f{0}; f < 8; ++f) {
        s.drone(seg, f) = 5.0 + static_cast<double>(seg + f);
      }
      for (std::size_t t{0}; t < 4; ++t) {
        s.distance(seg, t) = 100.0 * static_cast<double>(seg + 1);
        s.time(seg, t) = 10.0 + static_cast<double>(t);
        s.segment(seg, t) = s.distance(seg, t) / s.time(seg, t);
        s.ld(seg, t) = s.segment(seg, t) + 1.0;
      }
    }
    return s;
  }

  roadnet::RegionMap toyRegions() { return {2, {0, 0, 1}}; }

  roadnet::GridMap toyGrid() {
    roadnet::GridMap g;
    g.cellSize = 220.0;
    g.cells = {{0, 0}, {1, 0}, {2, 0}};
    g.segmentCell = {0, 1, 2};
    return g;
  }
}  // namespace

TEST_CASE("loop detector placement") {
  std::vector<double> valid(1570, 0.0);
  CHECK(placeLoopDetectors(valid, 1.0, 3).size() == 1570);
  auto const tenth{placeLoopDetectors(valid, 0.1, 3)};
  CHECK(tenth.size() == 157);
  CHECK(std::set<int>(tenth.begin(), tenth.end()).size() == 157);
  CHECK(placeLoopDetectors(valid, 0.1, 3) == tenth);
  CHECK(placeLoopDetectors(valid, 0.1, 4) != tenth);

  std::vector<double> mixed(20, 0.0);
  mixed[4] = 0.5;
  mixed[7] = 0.11;
  for (std::uint64_t seed{0}; seed < 50; ++seed) {
    auto const sites{placeLoopDetectors(mixed, 0.9, seed)};
    CHECK(std::find(sites.begin(), sites.end(), 4) == sites.end());
    CHECK(std::find(sites.begin(), sites.end(), 7) == sites.end());
  }
  // Pool smaller than requested: whole pool.
  CHECK(placeLoopDetectors(mixed, 0.99, 1).size() == 18);
  CHECK_THROWS_AS((void)placeLoopDetectors(valid, 0.0, 1), std::invalid_argument);
  CHECK_THROWS_AS((void)placeLoopDetectors(valid, 1.5, 1), std::invalid_argument);
}

TEST_CASE("missing fractions") {
  SeriesMatrix m{2, 4, 1.0};
  m(1, 0) = kMissing;
  m(1, 3) = kMissing;
  auto const f{missingFractions(m)};
  CHECK(f[0] == 0.0);
  CHECK(f[1] == 0.5);
}

TEST_CASE("drone schedule") {
  auto const full{droneSchedule(212, 1.0, 5, 1)};
  for (auto const& slot : full) {
    CHECK(slot.size() == 212);
  }
  auto const tenth{droneSchedule(212, 0.1, 200, 1)};
  std::size_t changed{0};
  for (std::size_t i{0}; i < tenth.size(); ++i) {
    CHECK(tenth[i].size() == 21);
    CHECK(std::set<int>(tenth[i].begin(), tenth[i].end()).size() == 21);
    for (int c : tenth[i]) {
      CHECK(c >= 0);
      CHECK(c < 212);
    }
    if (i > 0 && tenth[i] != tenth[i - 1]) {
      ++changed;
    }
  }
  CHECK(changed > 190);
  CHECK(droneSchedule(212, 0.1, 200, 1) == tenth);
  CHECK(droneSchedule(50, 0.001, 3, 1)[0].size() == 1);
}

TEST_CASE("drone-observed segment share tracks coverage") {
  // Uneven cells: the observed segment share is still coverage in expectation.
  roadnet::GridMap grid;
  std::size_t const cells{40};
  for (std::size_t c{0}; c < cells; ++c) {
    grid.cells.push_back({static_cast<std::int64_t>(c), 0});
    for (std::size_t k{0}; k <= c % 5; ++k) {
      grid.segmentCell.push_back(static_cast<int>(c));
    }
  }
  auto const sched{droneSchedule(cells, 0.2, 400, 9)};
  double share{0.0};
  for (auto const& slot : sched) {
    std::set<int> occ(slot.begin(), slot.end());
    std::size_t seen{0};
    for (int c : grid.segmentCell) {
      seen += occ.count(c);
    }
    share += static_cast<double>(seen) / static_cast<double>(grid.segmentCell.size());
  }
  share /= static_cast<double>(sched.size());
  CHECK(share == doctest::Approx(0.2).epsilon(0.05));
}

TEST_CASE("multiplicative noise") {
  Rng rng{1};
  std::vector<double> v{3.0, 0.0, kMissing, 7.5};
  auto w{v};
  applyMultiplicativeNoise(w, 0.0, rng);
  CHECK(w[0] == 3.0);
  CHECK(w[3] == 7.5);
  applyMultiplicativeNoise(w, 0.5, rng);
  CHECK(w[1] == 0.0);
  CHECK(isMissing(w[2]));
  CHECK(w[0] != 3.0);
  std::vector<double> many(2000, 1.0);
  applyMultiplicativeNoise(many, 3.0, rng);
  for (double x : many) {
    CHECK(x >= 0.0);
  }
  CHECK_THROWS_AS(applyMultiplicativeNoise(w, -0.1, rng), std::invalid_argument);
}

TEST_CASE("full mode is the identity") {
  auto const s{toySeries()};
  SensorLayout layout{{0}, 0.3, 0.3, 2};
  auto const o{observeSession(s, ObservationMode::Full, layout, toyGrid(), toyRegions(),
                              NoiseSpec::forMode(ObservationMode::Full, 1), 0)};
  CHECK(bitEqual(o.droneInput, s.drone));
  CHECK(bitEqual(o.ldInput, s.ld));
  CHECK(bitEqual(o.segTrain, s.segment));
  CHECK(bitEqual(o.segEval, s.segment));
  CHECK(bitEqual(o.regTrain, o.regEval));
  CHECK(o.regEval(0, 0) == doctest::Approx(300.0 / 20.0));
  CHECK(o.regEval(1, 2) == doctest::Approx(300.0 / 12.0));
}

TEST_CASE("PN observation masks, noise and clean evaluation labels") {
  auto const s{toySeries()};
  auto const grid{toyGrid()};
  auto const regions{toyRegions()};
  SensorLayout layout{{2}, 0.34, 0.34, 5};
  auto const drones{sessionDrones(layout, grid.cells.size(), 4, 3)};
  REQUIRE(drones.size() == 4);
  for (auto const& slot : drones) {
    CHECK(slot.size() == 1);
  }
  // Noise-free PN isolates the masking rules.
  NoiseSpec quiet{0.0, 0.0, 0.0, 1};
  auto const o{observeSession(s, ObservationMode::PN, layout, grid, regions, quiet, 3)};
  for (std::size_t seg{0}; seg < 3; ++seg) {
    for (std::size_t t{0}; t < 4; ++t) {
      bool const droneHere{drones[t][0] == static_cast<int>(seg)};
      for (std::size_t f{2 * t}; f < 2 * t + 2; ++f) {
        CHECK(isMissing(o.droneInput(seg, f)) == !droneHere);
      }
      CHECK(isMissing(o.ldInput(seg, t)) == (seg != 2));
      CHECK(isMissing(o.segTrain(seg, t)) == !(droneHere || seg == 2));
    }
  }
  // A region with exactly one observed segment takes that segment's clean speed.
  for (std::size_t t{0}; t < 4; ++t) {
    if (drones[t][0] == 2) {
      CHECK(isMissing(o.regTrain(0, t)));
    } else {
      CHECK(o.regTrain(0, t) == s.segment(static_cast<std::size_t>(drones[t][0]), t));
    }
  }

  auto const noisy{observeSession(s, ObservationMode::PN, layout, grid, regions,
                                  NoiseSpec::forMode(ObservationMode::PN, 1), 3)};
  auto const noisyAgain{observeSession(s, ObservationMode::PN, layout, grid, regions,
                                       NoiseSpec::forMode(ObservationMode::PN, 1), 3)};
  CHECK(bitEqual(noisy.droneInput, noisyAgain.droneInput));
  CHECK(bitEqual(noisy.segTrain, noisyAgain.segTrain));
  CHECK_FALSE(bitEqual(noisy.ldInput, o.ldInput));

  auto const ldMinus{observeSession(s, ObservationMode::PNLdMinus, layout, grid, regions,
                                    NoiseSpec::forMode(ObservationMode::PNLdMinus, 1), 3)};
  for (double v : ldMinus.droneInput.values) {
    CHECK(isMissing(v));
  }
  auto const full{observeSession(s, ObservationMode::Full, layout, grid, regions, quiet, 3)};
  CHECK(bitEqual(full.segEval, noisy.segEval));
  CHECK(bitEqual(full.segEval, ldMinus.segEval));
  CHECK(bitEqual(full.regEval, noisy.regEval));
  CHECK(bitEqual(full.regEval, ldMinus.regEval));
}

TEST_CASE("noise spec defaults and mode names") {
  auto const pn{NoiseSpec::forMode(ObservationMode::PN, 0)};
  CHECK(pn.sigmaLd == 0.05);
  CHECK(pn.sigmaDrone == 0.15);
  CHECK(NoiseSpec::forMode(ObservationMode::PNLdMinus, 0).sigmaLabel == 0.3);
  for (auto m : {ObservationMode::Full, ObservationMode::PN, ObservationMode::PNLdMinus}) {
    CHECK(parseMode(modeName(m)) == m);
  }
  CHECK_THROWS_AS((void)parseMode("partial"), std::invalid_argument);
}

TEST_CASE("series from a binner") {
  edie::SplitBinner fine{2, 0.0, 5.0, 72};
  fine.add(0, {0, 0, 0.0, 10.0, 0.0, 100.0});
  fine.addDetection(0, {0, 0, 0.0, 10.0, 0.0, 100.0}, 50.0);
  auto const s{seriesFromBinner(fine, 36)};
  CHECK(s.fineSteps() == 72);
  CHECK(s.coarseSteps() == 2);
  CHECK(s.drone(0, 0) == doctest::Approx(10.0));
  CHECK(isMissing(s.drone(0, 2)));
  CHECK(s.segment(0, 0) == doctest::Approx(10.0));
  CHECK(s.ld(0, 0) == doctest::Approx(10.0));
  CHECK(isMissing(s.segment(1, 0)));
  CHECK(s.distance(0, 0) == doctest::Approx(100.0));
  CHECK(s.time(0, 1) == 0.0);
}

TEST_CASE("layout JSON") {
  SensorLayout layout{{1, 4}, 0.1, 0.2, 77};
  nlohmann::json j = layout;
  auto const back{j.get<SensorLayout>()};
  CHECK(back.ldSegments == layout.ldSegments);
  CHECK(back.seed == 77);
  auto const full = layoutJson(layout, {{0, 2}, {1}}, 900.0, 180.0);
  CHECK(full.at("drones").at("1080") == std::vector<int>{1});
}
