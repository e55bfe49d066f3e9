#include "doctest.h"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "mst/dataset.hpp"

using namespace mst;
using namespace mst::data;
namespace fs = std::filesystem;

namespace {
  /// Each present value encodes (row, column) so window arithmetic can be read back.
  sensors::ObservedSession codedSession(std::size_t segs, std::size_t regs, std::size_t coarse) {
    sensors::ObservedSession o;
    o.droneInput = SeriesMatrix{segs, coarse * kFinePerCoarse};
    for (std::size_t r{0}; r < segs; ++r) {
      for (std::size_t c{0}; c < o.droneInput.cols; ++c) {
        o.droneInput(r, c) = static_cast<double>(c);
      }
    }
    auto coarseBlock = [&](std::size_t rows, double offset) {
      SeriesMatrix m{rows, coarse};
      for (std::size_t r{0}; r < rows; ++r) {
        for (std::size_t c{0}; c < coarse; ++c) {
          m(r, c) = offset + static_cast<double>(c);
        }
      }
      return m;
    };
    o.ldInput = coarseBlock(segs, 0.0);
    o.segTrain = coarseBlock(segs, 0.0);
    o.segEval = coarseBlock(segs, 1000.0);
    o.regTrain = coarseBlock(regs, 0.0);
    o.regEval = coarseBlock(regs, 1000.0);
    o.segTrain(1, 12) = kMissing;
    return o;
  }

  bool sameFloats(std::vector<float> const& a, std::vector<float> const& b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
  }

  fs::path scratch(char const* name) {
    auto const p{fs::temp_directory_path() / (std::string{"mst_test_"} + name)};
    fs::remove_all(p);
    return p;
  }
}  // namespace

TEST_CASE("a complete session yields 20 windows with the stated shapes") {
  auto const o{codedSession(3, 2, 40)};
  auto const samples{extractSamples(o, 900.0, 4, 1.3, true)};
  REQUIRE(samples.size() == 20);
  for (auto const& s : samples) {
    CHECK(s.drone.size() == 3 * 360);
    CHECK(s.ld.size() == 3 * 10);
    CHECK(s.seg.size() == 3 * 10);
    CHECK(s.reg.size() == 2 * 10);
    CHECK(s.session == 4);
    CHECK(s.demandScale == 1.3);
  }
  // First window: inputs [15, 45) min, labels [45, 75) min.
  CHECK(samples[0].start == 900.0);
  CHECK(samples[0].labelStart() == 2700.0);
  CHECK(samples[0].ld[0] == 0.0f);
  CHECK(samples[0].seg[0] == 10.0f);
  CHECK(samples[0].drone[359] == 359.0f);
  CHECK(samples[19].drone[0] == static_cast<float>(19 * 36));
  CHECK(samples[19].labelStart() == 900.0 + 180.0 * 29);
}

TEST_CASE("label window of sample k is the input window of sample k + 10") {
  auto const o{codedSession(2, 1, 40)};
  auto const samples{extractSamples(o, 900.0, 0, 1.0, true)};
  for (std::size_t k{0}; k + 10 < samples.size(); ++k) {
    CHECK(samples[k].labelStart() == samples[k + 10].start);
    for (std::size_t t{0}; t < 10; ++t) {
      CHECK(samples[k].seg[t] == samples[k + 10].ld[t]);
    }
  }
}

TEST_CASE("train and evaluation labels come from different blocks") {
  auto const o{codedSession(2, 1, 40)};
  auto const train{extractSamples(o, 900.0, 0, 1.0, true)};
  auto const eval{extractSamples(o, 900.0, 0, 1.0, false)};
  CHECK(eval[0].seg[0] == 1010.0f);
  CHECK(train[0].seg[0] == 10.0f);
  CHECK(isMissing(train[0].seg[10 + 2]));
  CHECK(sameFloats(train[0].drone, eval[0].drone));
}

TEST_CASE("short series are rejected") {
  auto const o{codedSession(2, 1, 38)};
  CHECK_THROWS_AS((void)extractSamples(o, 900.0, 0, 1.0, true), std::invalid_argument);
}

TEST_CASE("normalizer statistics") {
  std::vector<float> v{1.0f, 3.0f, std::numeric_limits<float>::quiet_NaN()};
  auto const s{fitStats(v)};
  CHECK(s.mean == 2.0);
  CHECK(s.std == 1.0);
  Normalizer::apply(s, v);
  CHECK(v[0] == -1.0f);
  CHECK(v[1] == 1.0f);
  CHECK(isMissing(v[2]));

  std::vector<float> c{4.0f, 4.0f, 4.0f};
  auto const flat{fitStats(c)};
  CHECK(flat.std == kStdFloor);
  Normalizer::apply(flat, c);
  for (auto x : c) {
    CHECK(x == 0.0f);
  }
  std::vector<float> none{std::numeric_limits<float>::quiet_NaN()};
  CHECK_THROWS_AS((void)fitStats(none), std::invalid_argument);
}

TEST_CASE("normalize then invert is the identity") {
  Rng rng{3};
  std::vector<float> v(500);
  for (auto& x : v) {
    x = static_cast<float>(uniform(rng, 0.0, 15.0));
  }
  auto const orig{v};
  auto const s{fitStats(v)};
  Normalizer::apply(s, v);
  Normalizer::invert(s, v);
  for (std::size_t i{0}; i < v.size(); ++i) {
    CHECK(v[i] == doctest::Approx(orig[i]).epsilon(1e-6));
  }
}

TEST_CASE("normalizer uses training samples only") {
  auto const o{codedSession(2, 1, 40)};
  auto train{extractSamples(o, 900.0, 0, 1.0, true)};
  auto test{extractSamples(o, 900.0, 1, 1.0, false)};
  for (auto& s : test) {
    for (auto& x : s.drone) {
      x += 500.0f;
    }
  }
  auto const fromTrain{fitNormalizer(train)};
  auto const fromTest{fitNormalizer(test)};
  CHECK(fromTrain.drone.mean != doctest::Approx(fromTest.drone.mean));
  std::vector<MSTSSample> both{train};
  both.insert(both.end(), test.begin(), test.end());
  CHECK(fitNormalizer(both).drone.mean != doctest::Approx(fromTrain.drone.mean));
  // Labels share the drone statistics.
  CHECK(fromTrain.labels().mean == fromTrain.drone.mean);
}

TEST_CASE("session split") {
  auto const s{splitSessions(101, 75, 9)};
  CHECK(s.train.size() == 75);
  CHECK(s.test.size() == 26);
  std::set<int> all(s.train.begin(), s.train.end());
  for (int t : s.test) {
    CHECK(all.insert(t).second);
  }
  CHECK(all.size() == 101);
  auto const again{splitSessions(101, 75, 9)};
  CHECK(again.train == s.train);
  CHECK(splitSessions(101, 75, 10).train != s.train);
  CHECK_THROWS_AS((void)splitSessions(10, 10, 1), std::invalid_argument);
  CHECK_THROWS_AS((void)splitSessions(10, 0, 1), std::invalid_argument);
}

TEST_CASE("dataset round trip keeps MISSING markers") {
  auto const dir{scratch("roundtrip")};
  auto const o{codedSession(3, 2, 40)};
  auto samples{extractSamples(o, 900.0, 2, 1.1, true)};
  samples[3].drone[7] = std::numeric_limits<float>::quiet_NaN();
  DatasetManifest m;
  m.seed = 42;
  m.segments = 3;
  m.regions = 2;
  m.normalizer = fitNormalizer(samples);
  m.extra["mode"] = "pn";
  writeDataset(dir, m, samples);
  auto const d{readDataset(dir)};
  CHECK(d.manifest.samples == samples.size());
  CHECK(d.manifest.extra.at("mode") == "pn");
  CHECK(d.manifest.normalizer.drone.mean == m.normalizer.drone.mean);
  REQUIRE(d.samples.size() == samples.size());
  for (std::size_t i{0}; i < samples.size(); ++i) {
    CHECK(sameFloats(d.samples[i].drone, samples[i].drone));
    CHECK(sameFloats(d.samples[i].ld, samples[i].ld));
    CHECK(sameFloats(d.samples[i].seg, samples[i].seg));
    CHECK(sameFloats(d.samples[i].reg, samples[i].reg));
    CHECK(d.samples[i].start == samples[i].start);
  }
  CHECK(isMissing(d.samples[3].drone[7]));

  // Append with the same seed grows the dataset; a different seed is rejected.
  appendDataset(dir, m, std::span{samples}.subspan(0, 2));
  CHECK(readManifest(dir).samples == samples.size() + 2);
  auto other{m};
  other.seed = 43;
  CHECK_THROWS_AS(appendDataset(dir, other, std::span{samples}.subspan(0, 1)), std::runtime_error);
  fs::remove_all(dir);
}

TEST_CASE("empty dataset and corrupt files") {
  auto const dir{scratch("empty")};
  DatasetManifest m;
  m.segments = 3;
  m.regions = 1;
  writeDataset(dir, m, {});
  auto const d{readDataset(dir)};
  CHECK(d.samples.empty());

  auto const o{codedSession(3, 1, 40)};
  auto const samples{extractSamples(o, 900.0, 0, 1.0, true)};
  writeDataset(dir, m, samples);
  // Version mismatch.
  {
    auto j = nlohmann::json::parse(std::ifstream{dir / "manifest.json"});
    j["version"] = 99;
    std::ofstream{dir / "manifest.json"} << j.dump();
    CHECK_THROWS_AS((void)readDataset(dir), std::runtime_error);
    j["version"] = kFormatVersion;
    std::ofstream{dir / "manifest.json"} << j.dump();
  }
  // Corrupt shape in a sidecar.
  {
    auto const side{dir / "samples" / "000001.json"};
    auto j = nlohmann::json::parse(std::ifstream{side});
    j["tensors"][0]["shape"] = {4, 360};
    std::ofstream{side} << j.dump();
    CHECK_THROWS_AS((void)readDataset(dir), std::runtime_error);
  }
  // Truncated record.
  {
    writeDataset(dir, m, samples);
    fs::resize_file(dir / "samples" / "000002.bin", 10);
    CHECK_THROWS_AS((void)readDataset(dir), std::runtime_error);
  }
  fs::remove_all(dir);
  CHECK_THROWS_AS((void)readDataset(dir), std::runtime_error);
}

TEST_CASE("CSV mirror") {
  std::vector<float> v{1.5f, std::numeric_limits<float>::quiet_NaN(), 2.0f, 3.0f};
  std::ostringstream out;
  writeBlockCsv(out, v, 2, 2);
  CHECK(out.str() == "0,1.5,\n1,2,3\n");
}
