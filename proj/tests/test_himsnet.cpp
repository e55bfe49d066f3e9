#include "doctest.h"

#include <chrono>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "mst/himsnet.hpp"

using namespace mst;
using namespace mst::model;
namespace fs = std::filesystem;

namespace {
  double const kNaN{std::numeric_limits<double>::quiet_NaN()};

  roadnet::NeighborSets pathGraph(int n) {
    roadnet::NeighborSets g(static_cast<std::size_t>(n));
    for (int i{0}; i + 1 < n; ++i) {
      g[static_cast<std::size_t>(i)].push_back(i + 1);
      g[static_cast<std::size_t>(i + 1)].push_back(i);
    }
    return g;
  }

  roadnet::RegionMap regionsOf(std::vector<int> assignment, int k) { return {k, std::move(assignment)}; }

  ModelConfig tinyConfig(int hidden = 4) {
    ModelConfig c;
    c.hidden = hidden;
    c.decoderHidden = 2 * hidden;
    c.hops = 1;
    return c;
  }

  Matrix randomBlock(Rng& rng, Eigen::Index r, Eigen::Index c, double missingShare) {
    Matrix m(r, c);
    for (Eigen::Index i{0}; i < m.size(); ++i) {
      m.data()[i] = uniform01(rng) < missingShare ? kNaN : standardNormal(rng);
    }
    return m;
  }

  /// Toy sample: 9 fine drone steps (two stride-3 convolutions leave one) and 3 loop detector steps.
  TrainExample toyExample(Rng& rng, Eigen::Index segs, Eigen::Index regs, double missingShare = 0.2) {
    return {{randomBlock(rng, segs, 9, missingShare), randomBlock(rng, segs, 3, missingShare)},
            randomBlock(rng, segs, 10, missingShare),
            randomBlock(rng, regs, 10, missingShare)};
  }

  std::string readBytes(fs::path const& p) {
    std::ifstream in{p, std::ios::binary};
    return {std::istreambuf_iterator<char>{in}, std::istreambuf_iterator<char>{}};
  }

  Matrix segPrediction(HiMSNet const& net, ModelInput const& in) {
    ad::NoGradGuard guard;
    return net.forward(in).seg.value();
  }
}  // namespace

TEST_CASE("output shapes") {
  Rng rng{1};
  auto const regions{regionsOf({0, 0, 1, 2, 3, 3}, 4)};
  HiMSNet net{tinyConfig(), makeModelGraph(pathGraph(6), 1, regions), 7};
  auto const ex{toyExample(rng, 6, 4)};
  auto const out{net.forward(ex.input)};
  CHECK(out.seg.rows() == 6);
  CHECK(out.seg.cols() == 10);
  CHECK(out.reg.rows() == 4);
  CHECK(out.reg.cols() == 10);
  CHECK(out.seg.value().allFinite());
}

TEST_CASE("configuration checks") {
  auto const regions{regionsOf({0, 0, 1}, 2)};
  auto cfg{tinyConfig()};
  cfg.useDrone = cfg.useLd = false;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  // Message exchange without adjacency.
  CHECK_THROWS_AS((HiMSNet{tinyConfig(), makeModelGraph({}, 1, regions), 1}), std::invalid_argument);
  auto noGnn{tinyConfig()};
  noGnn.useGnn = false;
  CHECK_NOTHROW((HiMSNet{noGnn, makeModelGraph({}, 1, regions), 1}));

  nlohmann::json const j = tinyConfig();
  auto const back{j.get<ModelConfig>()};
  CHECK(back.hidden == 4);
  CHECK(back.modalities() == "both");
  auto ld{tinyConfig()};
  setModalities(ld, "ld");
  CHECK(ld.width() == 4);
  CHECK_THROWS_AS(setModalities(ld, "radar"), std::invalid_argument);
}

TEST_CASE("without message exchange identical inputs give identical predictions") {
  Rng rng{2};
  auto cfg{tinyConfig()};
  cfg.useGnn = false;
  // Two disconnected segments.
  HiMSNet net{cfg, makeModelGraph({{}, {}}, 1, regionsOf({0, 1}, 2)), 3};
  auto ex{toyExample(rng, 2, 2)};
  ex.input.drone.row(1) = ex.input.drone.row(0);
  ex.input.ld.row(1) = ex.input.ld.row(0);
  auto const y{segPrediction(net, ex.input)};
  CHECK(y.row(0) == y.row(1));
}

TEST_CASE("predictions on one component ignore the other component") {
  Rng rng{3};
  roadnet::NeighborSets g{{1}, {0, 2}, {1}, {4}, {3, 5}, {4}};
  HiMSNet net{tinyConfig(), makeModelGraph(g, 2, regionsOf({0, 0, 0, 1, 1, 1}, 2)), 4};
  auto ex{toyExample(rng, 6, 2)};
  auto const before{segPrediction(net, ex.input)};
  ex.input.drone.row(4).setConstant(3.0);
  ex.input.ld(5, 1) = -2.0;
  auto const after{segPrediction(net, ex.input)};
  CHECK(before.topRows(3) == after.topRows(3));
  CHECK(before.bottomRows(3) != after.bottomRows(3));
}

TEST_CASE("receptive field equals layers times hops on a path") {
  Rng rng{4};
  auto const n{12};
  HiMSNet net{tinyConfig(), makeModelGraph(pathGraph(n), 1, regionsOf(std::vector<int>(n, 0), 1)), 5};
  auto ex{toyExample(rng, n, 1, 0.0)};
  auto const before{segPrediction(net, ex.input)};
  ex.input.ld.row(0).setConstant(5.0);
  ex.input.drone.row(0).setConstant(5.0);
  auto const after{segPrediction(net, ex.input)};
  CHECK(before.row(3) != after.row(3));
  CHECK(before.row(4) == after.row(4));
  CHECK(before.row(10) == after.row(10));
}

TEST_CASE("relabeling segments permutes the predictions") {
  Rng rng{5};
  roadnet::NeighborSets const g{{1, 2}, {0}, {0, 3}, {2, 4}, {3}};
  std::vector<int> const assign{0, 0, 1, 1, 1};
  std::vector<int> const perm{3, 0, 4, 1, 2};  // new id of old segment i
  roadnet::NeighborSets pg(5);
  std::vector<int> passign(5);
  for (std::size_t i{0}; i < 5; ++i) {
    auto const ni{static_cast<std::size_t>(perm[i])};
    for (int j : g[i]) {
      pg[ni].push_back(perm[static_cast<std::size_t>(j)]);
    }
    passign[ni] = assign[i];
  }
  HiMSNet a{tinyConfig(), makeModelGraph(g, 2, regionsOf(assign, 2)), 6};
  HiMSNet b{tinyConfig(), makeModelGraph(pg, 2, regionsOf(passign, 2)), 6};
  auto const ex{toyExample(rng, 5, 2)};
  ModelInput pin{ex.input};
  for (std::size_t i{0}; i < 5; ++i) {
    pin.drone.row(perm[i]) = ex.input.drone.row(static_cast<Eigen::Index>(i));
    pin.ld.row(perm[i]) = ex.input.ld.row(static_cast<Eigen::Index>(i));
  }
  auto const ya{segPrediction(a, ex.input)};
  auto const yb{segPrediction(b, pin)};
  for (std::size_t i{0}; i < 5; ++i) {
    CHECK(yb.row(perm[i]).isApprox(ya.row(static_cast<Eigen::Index>(i)), 1e-12));
  }
}

TEST_CASE("missing embeddings use the learnable parameter") {
  Rng rng{6};
  HiMSNet net{tinyConfig(), makeModelGraph(pathGraph(3), 1, regionsOf({0, 0, 0}, 1)), 7};
  Matrix const allMissing{Matrix::Constant(3, 9, kNaN)};
  auto const e{net.embed(allMissing, "drone")};
  auto const& fill{net.params().get("drone.missing").value()};
  for (Eigen::Index r{0}; r < e.rows(); ++r) {
    CHECK(e.value().row(r) == fill.row(0));
  }
  // Identical samples embed identically.
  auto const ex{toyExample(rng, 3, 1)};
  CHECK(net.embed(ex.input.ld, "ld").value() == net.embed(ex.input.ld, "ld").value());

  // The gradient reaches the missing parameter and matches finite differences.
  auto const lp{net.loss(net.forward(ex.input), ex.segLabels, ex.regLabels)};
  ad::backward(lp.total);
  CHECK(net.params().get("ld.missing").grad().cwiseAbs().maxCoeff() > 0.0);
  std::vector<Tensor> ps{net.params().get("ld.missing"), net.params().get("drone.missing")};
  auto const r{ad::gradCheck(
      [&] { return net.loss(net.forward(ex.input), ex.segLabels, ex.regLabels).total; }, ps)};
  CHECK(r.maxRelError < 1e-4);
}

TEST_CASE("loss masking") {
  Rng rng{7};
  HiMSNet net{tinyConfig(), makeModelGraph(pathGraph(4), 1, regionsOf({0, 0, 1, 1}, 2)), 8};
  auto const ex{toyExample(rng, 4, 2, 0.4)};
  auto const out{net.forward(ex.input)};
  auto const base{net.loss(out, ex.segLabels, ex.regLabels).total.item()};

  Matrix seg{out.seg.value()};
  Matrix reg{out.reg.value()};
  for (Eigen::Index i{0}; i < seg.size(); ++i) {
    if (isMissing(ex.segLabels.data()[i])) {
      seg.data()[i] += 1e3 * static_cast<double>(i + 1);
    }
  }
  for (Eigen::Index i{0}; i < reg.size(); ++i) {
    if (isMissing(ex.regLabels.data()[i])) {
      reg.data()[i] = -42.0;
    }
  }
  auto const altered{net.loss({Tensor{seg}, Tensor{reg}}, ex.segLabels, ex.regLabels).total.item()};
  CHECK(std::memcmp(&base, &altered, sizeof base) == 0);

  // Perfect predictions give zero; all-missing labels give zero.
  Matrix const segLabels{out.seg.value()};
  Matrix const regLabels{out.reg.value()};
  CHECK(net.loss(out, segLabels, regLabels).total.item() == 0.0);
  Matrix const none{Matrix::Constant(4, 10, kNaN)};
  auto const lp{net.loss(out, none, regLabels)};
  CHECK(lp.seg == 0.0);
}

TEST_CASE("full model gradient check on a six-node graph") {
  Rng rng{8};
  roadnet::NeighborSets const g{{1, 2}, {0, 3}, {0, 4}, {1, 5}, {2}, {3}};
  HiMSNet net{tinyConfig(3), makeModelGraph(g, 2, regionsOf({0, 0, 1, 1, 2, 2}, 3)), 9};
  auto const ex{toyExample(rng, 6, 3)};
  std::vector<Tensor> ps;
  auto const names{net.params().names()};
  for (auto const& n : names) {
    ps.push_back(net.params().get(n));
  }
  auto const r{ad::gradCheck(
      [&] { return net.loss(net.forward(ex.input), ex.segLabels, ex.regLabels).total; }, ps, names)};
  MESSAGE("checked " << r.checked << " parameters, max relative error " << r.maxRelError << " at "
                     << r.worstParam);
  CHECK(r.maxRelError < 1e-4);
}

TEST_CASE("training overfits two samples") {
  Rng rng{9};
  auto cfg{tinyConfig(8)};
  cfg.epochs = 300;
  auto const regions{regionsOf({0, 0, 1, 1}, 2)};
  HiMSNet net{cfg, makeModelGraph(pathGraph(4), 1, regions), 10};
  std::vector<TrainExample> const data{toyExample(rng, 4, 2, 0.1), toyExample(rng, 4, 2, 0.1)};
  auto const before{evaluateLoss(net, data)};
  auto const log{train(net, data, 11)};
  CHECK(log.size() == 300);
  auto const after{evaluateLoss(net, data)};
  MESSAGE("training MAE " << before << " -> " << after);
  CHECK(after < before);
  CHECK(log.front().lr == 0.0);
  CHECK(log.back().lr == doctest::Approx(1e-5));
}

TEST_CASE("same seed reproduces the checkpoint byte for byte") {
  auto const dir{fs::temp_directory_path() / "mst_test_himsnet"};
  fs::remove_all(dir);
  Rng rng{12};
  auto cfg{tinyConfig()};
  cfg.epochs = 3;
  cfg.batch = 2;
  auto const regions{regionsOf({0, 0, 1}, 2)};
  std::vector<TrainExample> const data{toyExample(rng, 3, 2), toyExample(rng, 3, 2), toyExample(rng, 3, 2)};
  for (auto const* name : {"a.ckpt", "b.ckpt"}) {
    HiMSNet net{cfg, makeModelGraph(pathGraph(3), 1, regions), 13};
    (void)train(net, data, 14);
    saveModel(dir / name, net);
  }
  CHECK(readBytes(dir / "a.ckpt") == readBytes(dir / "b.ckpt"));

  HiMSNet fresh{cfg, makeModelGraph(pathGraph(3), 1, regions), 99};
  loadModel(dir / "a.ckpt", fresh);
  CHECK(checkpointConfig(dir / "a.ckpt").hidden == cfg.hidden);

  auto other{cfg};
  other.useGnn = false;
  HiMSNet mismatched{other, makeModelGraph(pathGraph(3), 1, regions), 1};
  CHECK_THROWS_AS(loadModel(dir / "a.ckpt", mismatched), std::runtime_error);
  fs::remove_all(dir);
}

TEST_CASE("loop-detector-only variant trains") {
  Rng rng{15};
  auto cfg{tinyConfig()};
  setModalities(cfg, "ld");
  cfg.epochs = 2;
  HiMSNet net{cfg, makeModelGraph(pathGraph(3), 1, regionsOf({0, 1, 1}, 2)), 16};
  CHECK_FALSE(net.params().contains("drone.embed.w"));
  std::vector<TrainExample> const data{toyExample(rng, 3, 2)};
  CHECK_NOTHROW((void)train(net, data, 17));
}

TEST_CASE("prediction is denormalized and clamped") {
  data::ModalityStats const labels{5.0, 2.0};
  Matrix const z{{-2.65, 0.0, 1.0}};
  auto const y{denormalize(z, labels)};
  CHECK(y(0, 0) == 0.0);  // -0.3 m/s
  CHECK(y(0, 1) == 5.0);
  CHECK(y(0, 2) == 7.0);
}
