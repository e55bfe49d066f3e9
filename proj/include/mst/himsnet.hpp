/// @file himsnet.hpp
/// @brief HiMSNet: per-modality temporal encoders, graph message exchange and the two decoders.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "dataset.hpp"
#include "roadnet.hpp"
#include "tensor.hpp"

namespace mst::model {

  using ad::Matrix;
  using ad::Tensor;

  struct ModelConfig {
    int hidden{64};
    int lstmLayers{3};
    int gcnLayers{3};
    int hops{3};
    int decoderHidden{128};
    int horizon{10};
    bool useDrone{true};
    bool useLd{true};
    bool useGnn{true};
    double wSeg{1.0};
    double wReg{1.0};
    int epochs{30};
    int batch{8};
    double lr{1e-3};
    double weightDecay{1e-4};

    /// Width of z_p: hidden per enabled modality.
    [[nodiscard]] int width() const noexcept { return hidden * ((useDrone ? 1 : 0) + (useLd ? 1 : 0)); }
    /// "both", "drone" or "ld".
    [[nodiscard]] std::string modalities() const;
    /// @throw std::invalid_argument on an inconsistent configuration.
    void validate() const;
  };

  void to_json(nlohmann::json& j, ModelConfig const& c);
  void from_json(nlohmann::json const& j, ModelConfig& c);

  /// Sets useDrone/useLd from "both", "drone" or "ld".
  /// @throw std::invalid_argument otherwise.
  void setModalities(ModelConfig& c, std::string const& which);

  /// Fixed graph structure the model runs on.
  struct ModelGraph {
    std::size_t segments{0};
    std::size_t regions{0};
    ad::SparseMatrix propagation;  ///< normalized k-hop operator, empty without one
    ad::SparseMatrix regionMean;
  };

  /// @param oneHop  segment neighbor lists (symmetric); empty to build a graph without message
  ///                exchange.
  [[nodiscard]] ModelGraph makeModelGraph(roadnet::NeighborSets const& oneHop, int hops,
                                          roadnet::RegionMap const& regions);

  /// One normalized sample in model layout; NaN marks MISSING.
  struct ModelInput {
    Matrix drone;  ///< [segments x 360]
    Matrix ld;     ///< [segments x 10]
  };

  struct TrainExample {
    ModelInput input;
    Matrix segLabels;  ///< [segments x 10]
    Matrix regLabels;  ///< [regions x 10]
  };

  /// Normalizes a copy of the sample and converts it.
  [[nodiscard]] TrainExample toExample(data::MSTSSample const& sample, data::Normalizer const& norm);

  struct Output {
    Tensor seg;  ///< [segments x horizon]
    Tensor reg;  ///< [regions x horizon]
  };

  struct LossParts {
    Tensor total;
    double seg{0.0};
    double reg{0.0};
  };

  class HiMSNet {
  public:
    /// @throw std::invalid_argument if the configuration is invalid or message exchange is enabled
    ///        without a propagation operator.
    HiMSNet(ModelConfig config, ModelGraph graph, std::uint64_t seed);

    [[nodiscard]] Output forward(ModelInput const& input) const;

    /// w_seg * l_seg + w_reg * l_reg, each a masked MAE over present labels.
    [[nodiscard]] LossParts loss(Output const& out, Matrix const& segLabels, Matrix const& regLabels) const;

    /// Per-modality embeddings before any temporal encoding, [segments*T x hidden] series-major.
    [[nodiscard]] Tensor embed(Matrix const& series, std::string const& modality) const;

    [[nodiscard]] ModelConfig const& config() const noexcept { return m_config; }
    [[nodiscard]] ModelGraph const& graph() const noexcept { return m_graph; }
    [[nodiscard]] ad::ParamStore& params() noexcept { return m_params; }
    [[nodiscard]] ad::ParamStore const& params() const noexcept { return m_params; }

  private:
    [[nodiscard]] Tensor p(std::string const& name) const { return m_params.get(name); }
    [[nodiscard]] Tensor encode(Matrix const& series, std::string const& modality) const;
    [[nodiscard]] Tensor decode(Tensor const& q, std::string const& prefix) const;

    ModelConfig m_config;
    ModelGraph m_graph;
    ad::ParamStore m_params;
  };

  struct TrainLogRow {
    int epoch{0};
    std::int64_t step{0};
    double lr{0.0};
    double lSeg{0.0};
    double lReg{0.0};
    double lTotal{0.0};
  };

  /// Training diverged; the model holds the parameters of the last completed epoch.
  class TrainingDiverged : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
  };

  /// Mini-batch training with gradient accumulation, shuffled per epoch from `seed`.
  /// @throw TrainingDiverged if a loss or gradient turns NaN.
  std::vector<TrainLogRow> train(HiMSNet& model, std::span<TrainExample const> examples, std::uint64_t seed,
                                 std::function<void(TrainLogRow const&)> const& onStep = {});

  /// Returns example `i`, either a stored one or one built into the scratch object.
  using ExampleSource = std::function<TrainExample const&(std::size_t i, TrainExample& scratch)>;

  /// As above, with examples produced on demand so a large training set need not be held in
  /// model layout.
  std::vector<TrainLogRow> train(HiMSNet& model, std::size_t count, ExampleSource const& source, std::uint64_t seed,
                                 std::function<void(TrainLogRow const&)> const& onStep = {});

  /// Mean normalized training loss over the examples (no gradient).
  [[nodiscard]] double evaluateLoss(HiMSNet const& model, std::span<TrainExample const> examples);

  struct Prediction {
    Matrix seg;  ///< m/s, clamped at 0
    Matrix reg;
  };

  /// Forward pass, inverse normalization with the label statistics, clamp at 0.
  [[nodiscard]] Prediction predict(HiMSNet const& model, ModelInput const& input, data::ModalityStats const& labels);

  /// Inverse normalization of a block, negatives clamped to 0.
  [[nodiscard]] Matrix denormalize(Matrix const& normalized, data::ModalityStats const& labels);

  void writeTrainLog(std::filesystem::path const& path, std::span<TrainLogRow const> rows);

  /// Checkpoint with the model configuration and seed in the header.
  void saveModel(std::filesystem::path const& path, HiMSNet const& model, nlohmann::json extra = {});

  /// @throw std::runtime_error if the stored configuration differs from `config` or shapes mismatch.
  void loadModel(std::filesystem::path const& path, HiMSNet& model);

  /// Reads only the configuration stored with a checkpoint.
  [[nodiscard]] ModelConfig checkpointConfig(std::filesystem::path const& path);

}  // namespace mst::model
