#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "mst/pipeline.hpp"

using namespace mst;
using namespace mst::pipeline;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {
  RunConfig smallConfig() {
    RunConfig c;
    c.network.rows = 2;
    c.network.cols = 3;
    c.demand.baseTrips = 1500.0;
    c.demand.zeroFraction = 0.3;
    c.sessions = 3;
    c.train = 2;
    c.cellSize = 150.0;
    c.model.hidden = 4;
    c.model.epochs = 1;
    return c;
  }

  fs::path scratch(std::string const& name) {
    auto const p{fs::temp_directory_path() / ("mst_pipeline_" + name)};
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }

  bool close(double a, double b, double tol) {
    return a == b || std::abs(a - b) <= tol * std::max(std::abs(a), std::abs(b));
  }

  void requireSame(SeriesMatrix const& a, SeriesMatrix const& b, double tol) {
    REQUIRE(a.rows == b.rows);
    REQUIRE(a.cols == b.cols);
    for (std::size_t i{0}; i < a.values.size(); ++i) {
      if (isMissing(a.values[i])) {
        REQUIRE(isMissing(b.values[i]));
      } else {
        REQUIRE(close(a.values[i], b.values[i], tol));
      }
    }
  }

  void requireSame(SessionRecord const& a, SessionRecord const& b, double tol) {
    CHECK(a.session == b.session);
    CHECK(a.seed == b.seed);
    CHECK(close(a.demandScale, b.demandScale, tol));
    requireSame(a.series.drone, b.series.drone, tol);
    requireSame(a.series.ld, b.series.ld, tol);
    requireSame(a.series.segment, b.series.segment, tol);
    requireSame(a.series.distance, b.series.distance, tol);
    requireSame(a.series.time, b.series.time, tol);
    REQUIRE(a.mfd.size() == b.mfd.size());
    for (std::size_t i{0}; i < a.mfd.size(); ++i) {
      CHECK(close(a.mfd[i].distance, b.mfd[i].distance, tol));
      CHECK(close(a.mfd[i].time, b.mfd[i].time, tol));
    }
    REQUIRE(a.vehicles.size() == b.vehicles.size());
    for (std::size_t i{0}; i < a.vehicles.size(); ++i) {
      CHECK(a.vehicles[i].id == b.vehicles[i].id);
      CHECK(a.vehicles[i].arrived() == b.vehicles[i].arrived());
    }
  }
}  // namespace

TEST_CASE("config JSON round trip") {
  auto c{smallConfig()};
  c.mode = sensors::ObservationMode::PNLdMinus;
  c.coverage = 0.2;
  c.noiseDrone = 0.7;
  c.coverageSweep = {0.01, 0.5};
  c.model.useGnn = false;
  json const j = c;
  auto const back{j.get<RunConfig>()};
  json const again = back;
  CHECK(j == again);
  CHECK(j.at("sensors").at("mode") == "pn_ld_minus");
  CHECK(configHash(c) == configHash(back));
}

TEST_CASE("config rejects unknown keys and bad values") {
  json j = smallConfig();
  j["network"]["colums"] = 3;
  CHECK_THROWS_AS((void)j.get<RunConfig>(), ConfigError);

  json bad = smallConfig();
  bad["sensors"]["mode"] = "partial";
  CHECK_THROWS_AS((void)bad.get<RunConfig>(), ConfigError);

  auto c{smallConfig()};
  c.coverage = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = smallConfig();
  c.network.rows = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = smallConfig();
  c.simulation.duration = 1000.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);

  auto const dir{scratch("bad_config")};
  std::ofstream{dir / "c.json"} << "{ not json";
  CHECK_THROWS_AS((void)loadConfig(dir / "c.json"), ConfigError);
  CHECK_THROWS_AS((void)loadConfig(dir / "absent.json"), ConfigError);
}

TEST_CASE("config hash ignores jobs and output directory") {
  auto a{smallConfig()};
  auto b{a};
  b.jobs = 4;
  b.out = "elsewhere";
  CHECK(configHash(a) == configHash(b));
  CHECK(configHash(a).size() == 16);
  b.seed = 2;
  CHECK(configHash(a) != configHash(b));

  auto const m = stageManifest("simulate", a, {{"sessions", 3}});
  CHECK(m.at("stage") == "simulate");
  CHECK(m.at("config_hash") == configHash(a));
  CHECK_FALSE(m.at("config").contains("jobs"));
  CHECK(m.at("sessions") == 3);
}

TEST_CASE("session seeds are distinct and reproducible") {
  CHECK(sessionSeed(1, 0) == sessionSeed(1, 0));
  CHECK(sessionSeed(1, 0) != sessionSeed(1, 1));
  CHECK(sessionSeed(1, 0) != sessionSeed(2, 0));
  CHECK(sessionDirName(7) == "session_007");
}

TEST_CASE("simulation results do not depend on the thread count") {
  auto c{smallConfig()};
  auto const b{makeBenchmark(c)};
  auto const serial{simulateAll(b, c)};
  c.jobs = 3;
  auto const parallel{simulateAll(b, c)};
  REQUIRE(serial.size() == 3);
  for (std::size_t i{0}; i < serial.size(); ++i) {
    requireSame(serial[i], parallel[i], 0.0);
  }
  CHECK(serial[0].series.fineSteps() == kFineBins);
  CHECK(serial[0].series.coarseSteps() == kFineBins / 36);
  CHECK(serial[0].series.segments() == b.graph.size());
}

TEST_CASE("session directories: cache and CSV rebuild agree") {
  auto const c{smallConfig()};
  auto const b{makeBenchmark(c)};
  auto const dir{scratch("session")};
  auto const direct{simulateToDir(b, c, 1, dir)};
  for (auto const* f : {"trajectories.csv", "visits.csv", "vehicles.csv", "meta.json", "series.bin"}) {
    CHECK(fs::exists(dir / f));
  }
  auto const cached{loadSession(b.graph, dir)};
  requireSame(direct, cached, 0.0);

  fs::remove(dir / "series.bin");
  auto const rebuilt{loadSession(b.graph, dir)};
  requireSame(direct, rebuilt, 1e-9);

  CHECK_THROWS_AS((void)loadSession(b.graph, scratch("empty")), MissingArtifact);
}

TEST_CASE("corrupt series cache is rejected") {
  auto const dir{scratch("cache")};
  std::ofstream{dir / "series.bin", std::ios::binary} << "MSTSER01garbage";
  CHECK_THROWS_AS((void)readSessionCache(dir / "series.bin"), std::runtime_error);
  std::ofstream{dir / "other.bin", std::ios::binary} << "NOTMAGIC";
  CHECK_THROWS_AS((void)readSessionCache(dir / "other.bin"), std::runtime_error);
}

TEST_CASE("dataset building") {
  auto c{smallConfig()};
  auto const b{makeBenchmark(c)};
  auto const records{simulateAll(b, c)};

  SUBCASE("full information") {
    auto const d{buildDataset(b, c, records)};
    CHECK(d.train.size() == 2 * data::kSamplesPerSession);
    CHECK(d.test.size() == 1 * data::kSamplesPerSession);
    CHECK(d.layout.ldSegments.size() == b.graph.size());
    for (auto const& s : d.train) {
      CHECK(std::find(d.split.train.begin(), d.split.train.end(), s.session) != d.split.train.end());
    }
    for (auto const& s : d.test) {
      CHECK(std::find(d.split.test.begin(), d.split.test.end(), s.session) != d.split.test.end());
    }
  }

  SUBCASE("partial information places max(1, round(coverage * N)) detectors") {
    c.mode = sensors::ObservationMode::PN;
    c.coverage = 0.1;
    auto const d{buildDataset(b, c, records)};
    auto const n{b.graph.size()};
    auto const want{std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(0.1 * static_cast<double>(n))))};
    CHECK(d.layout.ldSegments.size() == want);
  }

  SUBCASE("train must leave test sessions") {
    c.train = 3;
    CHECK_THROWS_AS((void)buildDataset(b, c, records), ConfigError);
  }

  SUBCASE("written dataset reads back") {
    auto const d{buildDataset(b, c, records)};
    auto const dir{scratch("dataset")};
    writeBuiltDataset(dir, b, c, d);
    auto const back{readBuiltDataset(dir)};
    CHECK(back.data.train.size() == d.train.size());
    CHECK(back.data.test.size() == d.test.size());
    CHECK(back.data.split.train == d.split.train);
    CHECK(back.data.layout.ldSegments == d.layout.ldSegments);
    CHECK(back.bench.graph.size() == b.graph.size());
    CHECK(back.bench.regions.assignment == b.regions.assignment);
    CHECK(back.extra.at("config_hash") == configHash(c));
    CHECK_THROWS_AS((void)readBuiltDataset(scratch("no_dataset")), MissingArtifact);
  }
}

TEST_CASE("variant names") {
  model::ModelConfig m;
  CHECK(variantName(m) == "both");
  model::setModalities(m, "ld");
  CHECK(variantName(m) == "ld");
  m.useGnn = false;
  CHECK(variantName(m) == "ld-nognn");
}

TEST_CASE("MFD summary") {
  auto point = [](double t0, double k, std::optional<double> v) {
    return edie::MfdPoint{t0, 180.0, v ? k * *v : 0.0, k, v};
  };
  // Loading branch fast, unloading branch slow at the same densities.
  std::vector<edie::MfdPoint> const loop{point(0, 0.01, 8.0), point(180, 0.02, 7.0), point(360, 0.04, 3.0),
                                         point(540, 0.02, 5.5), point(720, 0.01, 7.9), point(900, 0.0, std::nullopt)};
  auto const s{summarizeMfd(loop, 540.0)};
  CHECK(s.maxDensity == doctest::Approx(0.04));
  REQUIRE(s.minSpeed.has_value());
  CHECK(*s.minSpeed == doctest::Approx(3.0));
  CHECK(s.hysteresis);
  CHECK(s.hysteresisGap == doctest::Approx(1.5));

  std::vector<edie::MfdPoint> const same{point(0, 0.01, 8.0), point(180, 0.03, 4.0), point(360, 0.01, 8.0)};
  auto const t{summarizeMfd(same, 540.0)};
  CHECK_FALSE(t.hysteresis);
  CHECK(t.hysteresisGap == doctest::Approx(0.0));

  SUBCASE("minimum speed ignores bins after the demand period") {
    auto const u{summarizeMfd(loop, 360.0)};
    CHECK(*u.minSpeed == doctest::Approx(7.0));
  }
}

TEST_CASE("parallelFor propagates exceptions") {
  CHECK_THROWS_AS(parallelFor(8, 3,
                              [](std::size_t i) {
                                if (i == 5) {
                                  throw std::runtime_error("boom");
                                }
                              }),
                  std::runtime_error);
  std::vector<int> hits(10, 0);
  parallelFor(hits.size(), 4, [&](std::size_t i) { hits[i] += 1; });
  CHECK(std::count(hits.begin(), hits.end(), 1) == 10);
}
