#include "mst/himsnet.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "mst/simcore.hpp"

namespace mst::model {

  using ad::NoGradGuard;

  std::string ModelConfig::modalities() const {
    if (useDrone && useLd) {
      return "both";
    }
    return useDrone ? "drone" : (useLd ? "ld" : "none");
  }

  void ModelConfig::validate() const {
    if (!useDrone && !useLd) {
      throw std::invalid_argument("model config: at least one modality must be enabled");
    }
    if (hidden < 1 || lstmLayers < 1 || decoderHidden < 1 || gcnLayers < 0 || hops < 1) {
      throw std::invalid_argument("model config: layer sizes must be positive");
    }
    if (horizon != static_cast<int>(data::kLabelSteps)) {
      throw std::invalid_argument("model config: horizon must be " + std::to_string(data::kLabelSteps));
    }
    if (epochs < 1 || batch < 1 || lr <= 0.0 || weightDecay < 0.0 || wSeg < 0.0 || wReg < 0.0) {
      throw std::invalid_argument("model config: invalid training settings");
    }
  }

  void setModalities(ModelConfig& c, std::string const& which) {
    if (which == "both") {
      c.useDrone = c.useLd = true;
    } else if (which == "drone") {
      c.useDrone = true;
      c.useLd = false;
    } else if (which == "ld") {
      c.useDrone = false;
      c.useLd = true;
    } else {
      throw std::invalid_argument("unknown modalities '" + which + "' (expected both, drone or ld)");
    }
  }

  void to_json(nlohmann::json& j, ModelConfig const& c) {
    j = {{"hidden", c.hidden},         {"lstm_layers", c.lstmLayers},
         {"gcn_layers", c.gcnLayers},  {"hops", c.hops},
         {"decoder_hidden", c.decoderHidden}, {"horizon", c.horizon},
         {"modalities", c.modalities()}, {"use_gnn", c.useGnn},
         {"w_seg", c.wSeg},            {"w_reg", c.wReg},
         {"epochs", c.epochs},         {"batch", c.batch},
         {"lr", c.lr},                 {"weight_decay", c.weightDecay}};
  }

  void from_json(nlohmann::json const& j, ModelConfig& c) {
    ModelConfig const d;
    c.hidden = j.value("hidden", d.hidden);
    c.lstmLayers = j.value("lstm_layers", d.lstmLayers);
    c.gcnLayers = j.value("gcn_layers", d.gcnLayers);
    c.hops = j.value("hops", d.hops);
    c.decoderHidden = j.value("decoder_hidden", d.decoderHidden);
    c.horizon = j.value("horizon", d.horizon);
    setModalities(c, j.value("modalities", std::string{"both"}));
    c.useGnn = j.value("use_gnn", d.useGnn);
    c.wSeg = j.value("w_seg", d.wSeg);
    c.wReg = j.value("w_reg", d.wReg);
    c.epochs = j.value("epochs", d.epochs);
    c.batch = j.value("batch", d.batch);
    c.lr = j.value("lr", d.lr);
    c.weightDecay = j.value("weight_decay", d.weightDecay);
  }

  ModelGraph makeModelGraph(roadnet::NeighborSets const& oneHop, int hops, roadnet::RegionMap const& regions) {
    ModelGraph g;
    g.segments = regions.assignment.size();
    g.regions = static_cast<std::size_t>(regions.regionCount);
    if (!oneHop.empty()) {
      if (oneHop.size() != g.segments) {
        throw std::invalid_argument("model graph: adjacency and region map disagree on the segment count");
      }
      g.propagation = ad::gcnOperator(roadnet::kHopAdjacency(oneHop, hops));
    }
    g.regionMean = ad::groupMeanOperator(regions.members(), g.segments);
    return g;
  }

  namespace {
    Matrix toMatrix(std::vector<float> const& v, std::size_t rows, std::size_t cols) {
      if (v.size() != rows * cols) {
        throw std::invalid_argument("sample block has " + std::to_string(v.size()) + " values, expected " +
                                    std::to_string(rows * cols));
      }
      Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
      for (std::size_t i{0}; i < v.size(); ++i) {
        m.data()[i] = static_cast<double>(v[i]);
      }
      return m;
    }

    double fanInBound(Eigen::Index fanIn) { return 1.0 / std::sqrt(static_cast<double>(fanIn)); }
  }  // namespace

  TrainExample toExample(data::MSTSSample const& sample, data::Normalizer const& norm) {
    auto s{sample};
    norm.apply(s);
    auto const segs{s.segments};
    return {{toMatrix(s.drone, segs, data::kFineInputSteps), toMatrix(s.ld, segs, data::kCoarseInputSteps)},
            toMatrix(s.seg, segs, data::kLabelSteps),
            toMatrix(s.reg, s.regions, data::kLabelSteps)};
  }

  HiMSNet::HiMSNet(ModelConfig config, ModelGraph graph, std::uint64_t seed)
      : m_config{std::move(config)}, m_graph{std::move(graph)}, m_params{seed} {
    m_config.validate();
    if (m_config.useGnn && m_graph.propagation.rows() != static_cast<Eigen::Index>(m_graph.segments)) {
      throw std::invalid_argument("HiMSNet: message exchange needs an adjacency over all segments");
    }
    if (m_graph.regionMean.cols() != static_cast<Eigen::Index>(m_graph.segments)) {
      throw std::invalid_argument("HiMSNet: region operator does not match the segment count");
    }
    Eigen::Index const h{m_config.hidden};
    Eigen::Index const w{m_config.width()};
    auto linearParams = [&](std::string const& name, Eigen::Index out, Eigen::Index in, bool bias = true) {
      (void)m_params.addUniform(name + ".w", out, in, fanInBound(in));
      if (bias) {
        (void)m_params.addUniform(name + ".b", 1, out, fanInBound(in));
      }
    };
    for (std::string const mod : {"drone", "ld"}) {
      if ((mod == "drone" && !m_config.useDrone) || (mod == "ld" && !m_config.useLd)) {
        continue;
      }
      linearParams(mod + ".embed", h, 2);
      (void)m_params.addUniform(mod + ".missing", 1, h, fanInBound(2));
      if (mod == "drone") {
        linearParams("drone.conv1", h, 3 * h);
        linearParams("drone.conv2", h, 3 * h);
      }
      for (int l{0}; l < m_config.lstmLayers; ++l) {
        auto const base{mod + ".lstm" + std::to_string(l)};
        (void)m_params.addUniform(base + ".w_in", 4 * h, h, fanInBound(h));
        (void)m_params.addUniform(base + ".w_hid", 4 * h, h, fanInBound(h));
        (void)m_params.addUniform(base + ".b", 1, 4 * h, fanInBound(h));
      }
    }
    if (m_config.useGnn) {
      linearParams("gme.r1", w, w);
      for (int l{0}; l < m_config.gcnLayers; ++l) {
        auto const base{"gme.gcn" + std::to_string(l)};
        linearParams(base, w, w, false);
        (void)m_params.addConstant(base + ".ln_gain", 1, w, 1.0);
        (void)m_params.addConstant(base + ".ln_bias", 1, w, 0.0);
      }
      linearParams("gme.r2", w, w);
    }
    for (std::string const dec : {"dec_seg", "dec_reg"}) {
      linearParams(dec + ".fc1", m_config.decoderHidden, 2 * w);
      linearParams(dec + ".fc2", m_config.horizon, m_config.decoderHidden);
    }
  }

  Tensor HiMSNet::embed(Matrix const& series, std::string const& modality) const {
    auto const segs{series.rows()};
    auto const steps{series.cols()};
    Matrix feat(segs * steps, 2);
    std::vector<bool> missing(static_cast<std::size_t>(segs * steps));
    auto const denom{steps > 1 ? static_cast<double>(steps - 1) : 1.0};
    for (Eigen::Index s{0}; s < segs; ++s) {
      for (Eigen::Index t{0}; t < steps; ++t) {
        auto const r{s * steps + t};
        auto const v{series(s, t)};
        missing[static_cast<std::size_t>(r)] = isMissing(v);
        feat(r, 0) = isMissing(v) ? 0.0 : v;
        feat(r, 1) = static_cast<double>(t) / denom;
      }
    }
    auto const e{ad::linear(Tensor{std::move(feat)}, p(modality + ".embed.w"), p(modality + ".embed.b"))};
    return ad::fillMaskedRows(e, missing, p(modality + ".missing"));
  }

  Tensor HiMSNet::encode(Matrix const& series, std::string const& modality) const {
    auto const segs{series.rows()};
    auto steps{series.cols()};
    auto x{embed(series, modality)};
    if (modality == "drone") {
      x = ad::relu(ad::conv1d(x, segs, steps, p("drone.conv1.w"), p("drone.conv1.b"), 3, 3));
      steps /= 3;
      x = ad::conv1d(x, segs, steps, p("drone.conv2.w"), p("drone.conv2.b"), 3, 3);
      steps /= 3;
    }
    std::vector<Eigen::Index> timeMajor(static_cast<std::size_t>(segs * steps));
    for (Eigen::Index t{0}; t < steps; ++t) {
      for (Eigen::Index s{0}; s < segs; ++s) {
        timeMajor[static_cast<std::size_t>(t * segs + s)] = s * steps + t;
      }
    }
    x = ad::gatherRows(x, timeMajor);
    std::vector<ad::LstmWeights> layers;
    for (int l{0}; l < m_config.lstmLayers; ++l) {
      auto const base{modality + ".lstm" + std::to_string(l)};
      layers.push_back({p(base + ".w_in"), p(base + ".w_hid"), p(base + ".b")});
    }
    return ad::lstmLastStep(x, segs, layers);
  }

  Tensor HiMSNet::decode(Tensor const& q, std::string const& prefix) const {
    auto const hidden{ad::relu(ad::linear(q, p(prefix + ".fc1.w"), p(prefix + ".fc1.b")))};
    return ad::linear(hidden, p(prefix + ".fc2.w"), p(prefix + ".fc2.b"));
  }

  Output HiMSNet::forward(ModelInput const& input) const {
    auto const segs{static_cast<Eigen::Index>(m_graph.segments)};
    std::vector<Tensor> zs;
    if (m_config.useDrone) {
      if (input.drone.rows() != segs) {
        throw std::invalid_argument("HiMSNet: drone input has " + std::to_string(input.drone.rows()) +
                                    " rows for " + std::to_string(segs) + " segments");
      }
      zs.push_back(encode(input.drone, "drone"));
    }
    if (m_config.useLd) {
      if (input.ld.rows() != segs) {
        throw std::invalid_argument("HiMSNet: loop detector input has " + std::to_string(input.ld.rows()) +
                                    " rows for " + std::to_string(segs) + " segments");
      }
      zs.push_back(encode(input.ld, "ld"));
    }
    auto const z{zs.size() == 1 ? zs[0] : ad::concatCols(zs)};
    Tensor q;
    if (m_config.useGnn) {
      auto m{ad::linear(z, p("gme.r1.w"), p("gme.r1.b"))};
      for (int l{0}; l < m_config.gcnLayers; ++l) {
        auto const base{"gme.gcn" + std::to_string(l)};
        m = ad::relu(ad::gcnConv(m, m_graph.propagation, p(base + ".w")));
        m = ad::layerNorm(m, p(base + ".ln_gain"), p(base + ".ln_bias"));
      }
      m = ad::linear(m, p("gme.r2.w"), p("gme.r2.b"));
      std::vector<Tensor> parts{m, z};
      q = ad::concatCols(parts);
    } else {
      std::vector<Tensor> parts{z, z};
      q = ad::concatCols(parts);
    }
    return {decode(q, "dec_seg"), decode(ad::spmm(m_graph.regionMean, q), "dec_reg")};
  }

  LossParts HiMSNet::loss(Output const& out, Matrix const& segLabels, Matrix const& regLabels) const {
    auto const lSeg{ad::maskedL1(out.seg, segLabels)};
    auto const lReg{ad::maskedL1(out.reg, regLabels)};
    return {ad::add(ad::scale(lSeg, m_config.wSeg), ad::scale(lReg, m_config.wReg)), lSeg.item(), lReg.item()};
  }

  std::vector<TrainLogRow> train(HiMSNet& model, std::span<TrainExample const> examples, std::uint64_t seed,
                                 std::function<void(TrainLogRow const&)> const& onStep) {
    return train(
        model, examples.size(), [&](std::size_t i, TrainExample&) -> TrainExample const& { return examples[i]; },
        seed, onStep);
  }

  std::vector<TrainLogRow> train(HiMSNet& model, std::size_t n, ExampleSource const& source, std::uint64_t seed,
                                 std::function<void(TrainLogRow const&)> const& onStep) {
    if (n == 0) {
      throw std::invalid_argument("train: no training examples");
    }
    auto const& cfg{model.config()};
    auto const batch{static_cast<std::size_t>(cfg.batch)};
    auto const perEpoch{static_cast<std::int64_t>((n + batch - 1) / batch)};
    auto const totalSteps{perEpoch * cfg.epochs};
    ad::AdamConfig adam;
    adam.weightDecay = cfg.weightDecay;
    auto& params{model.params()};
    auto lastGood{params.snapshot()};
    auto diverged = [&](std::string const& what, int epoch) {
      params.load(lastGood);
      throw TrainingDiverged("training diverged in epoch " + std::to_string(epoch + 1) + ": " + what);
    };

    std::vector<TrainLogRow> log;
    std::vector<std::size_t> order(n);
    std::int64_t step{0};
    for (int epoch{0}; epoch < cfg.epochs; ++epoch) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      Rng rng{deriveSeed(seed, static_cast<std::uint64_t>(epoch))};
      for (std::size_t i{n}; i > 1; --i) {
        std::swap(order[i - 1], order[uniformIndex(rng, i)]);
      }
      for (std::size_t b0{0}; b0 < n; b0 += batch) {
        auto const b1{std::min(n, b0 + batch)};
        auto const inv{1.0 / static_cast<double>(b1 - b0)};
        params.zeroGrad();
        TrainLogRow row;
        row.epoch = epoch + 1;
        row.step = step;
        for (std::size_t k{b0}; k < b1; ++k) {
          TrainExample scratch;
          auto const& ex{source(order[k], scratch)};
          auto const lp{model.loss(model.forward(ex.input), ex.segLabels, ex.regLabels)};
          if (!std::isfinite(lp.total.item())) {
            diverged("non-finite loss", epoch);
          }
          ad::backward(ad::scale(lp.total, inv));
          row.lSeg += lp.seg * inv;
          row.lReg += lp.reg * inv;
          row.lTotal += lp.total.item() * inv;
        }
        row.lr = ad::lrSchedule(step, totalSteps, perEpoch, cfg.lr);
        try {
          params.adamStep(row.lr, adam);
        } catch (std::runtime_error const& e) {
          diverged(e.what(), epoch);
        }
        log.push_back(row);
        if (onStep) {
          onStep(row);
        }
        ++step;
      }
      lastGood = params.snapshot();
    }
    return log;
  }

  double evaluateLoss(HiMSNet const& model, std::span<TrainExample const> examples) {
    NoGradGuard guard;
    double total{0.0};
    for (auto const& ex : examples) {
      total += model.loss(model.forward(ex.input), ex.segLabels, ex.regLabels).total.item();
    }
    return examples.empty() ? 0.0 : total / static_cast<double>(examples.size());
  }

  Matrix denormalize(Matrix const& normalized, data::ModalityStats const& labels) {
    return (normalized.array() * labels.std + labels.mean).cwiseMax(0.0).matrix();
  }

  Prediction predict(HiMSNet const& model, ModelInput const& input, data::ModalityStats const& labels) {
    NoGradGuard guard;
    auto const out{model.forward(input)};
    return {denormalize(out.seg.value(), labels), denormalize(out.reg.value(), labels)};
  }

  void writeTrainLog(std::filesystem::path const& path, std::span<TrainLogRow const> rows) {
    std::ofstream out{path};
    if (!out) {
      throw std::runtime_error("cannot write training log " + path.string());
    }
    out << "epoch,step,lr,l_seg,l_reg,l_total\n";
    for (auto const& r : rows) {
      out << r.epoch << ',' << r.step << ',' << sim::formatNumber(r.lr) << ',' << sim::formatNumber(r.lSeg) << ','
          << sim::formatNumber(r.lReg) << ',' << sim::formatNumber(r.lTotal) << '\n';
    }
  }

  namespace {
    nlohmann::json architecture(ModelConfig const& c) {
      return {{"hidden", c.hidden},       {"lstm_layers", c.lstmLayers},         {"gcn_layers", c.gcnLayers},
              {"hops", c.hops},           {"decoder_hidden", c.decoderHidden}, {"horizon", c.horizon},
              {"modalities", c.modalities()}, {"use_gnn", c.useGnn}};
    }
  }  // namespace

  void saveModel(std::filesystem::path const& path, HiMSNet const& model, nlohmann::json extra) {
    nlohmann::json meta = {{"config", model.config()},
                           {"seed", model.params().seed()},
                           {"segments", model.graph().segments},
                           {"regions", model.graph().regions}};
    if (!extra.is_null()) {
      meta["extra"] = std::move(extra);
    }
    ad::saveCheckpoint(path, model.params(), meta);
  }

  ModelConfig checkpointConfig(std::filesystem::path const& path) {
    return ad::loadCheckpoint(path).meta.at("config").get<ModelConfig>();
  }

  void loadModel(std::filesystem::path const& path, HiMSNet& model) {
    auto const ck{ad::loadCheckpoint(path)};
    auto const stored{ck.meta.at("config").get<ModelConfig>()};
    if (architecture(stored) != architecture(model.config())) {
      throw std::runtime_error("checkpoint " + path.string() + " was trained with " + architecture(stored).dump() +
                               ", model is " + architecture(model.config()).dump());
    }
    if (ck.meta.value("segments", std::size_t{0}) != model.graph().segments ||
        ck.meta.value("regions", std::size_t{0}) != model.graph().regions) {
      throw std::runtime_error("checkpoint " + path.string() + " was trained on a different network");
    }
    model.params().load(ck.tensors);
  }

}  // namespace mst::model
