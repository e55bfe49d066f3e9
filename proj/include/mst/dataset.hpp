/// @file dataset.hpp
/// @brief Sliding-window samples, normalization, train/test split and the on-disk format.

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "common.hpp"
#include "sensors.hpp"

namespace mst::data {

  inline constexpr std::size_t kSamplesPerSession{20};
  inline constexpr std::size_t kFineInputSteps{360};   ///< 30 min at 5 s
  inline constexpr std::size_t kCoarseInputSteps{10};  ///< 30 min at 3 min
  inline constexpr std::size_t kLabelSteps{10};        ///< 30 min at 3 min
  inline constexpr std::size_t kFinePerCoarse{36};
  inline constexpr int kFormatVersion{1};

  /// One window: 30 min of inputs followed by 30 min of labels. Row-major float blocks with NaN
  /// for MISSING.
  struct MSTSSample {
    int session{0};
    int window{0};
    double start{0.0};  ///< seconds, first input instant
    double demandScale{1.0};
    std::size_t segments{0};
    std::size_t regions{0};
    std::vector<float> drone;   ///< [segments x 360]
    std::vector<float> ld;      ///< [segments x 10]
    std::vector<float> seg;     ///< [segments x 10]
    std::vector<float> reg;     ///< [regions x 10]

    [[nodiscard]] double labelStart() const noexcept {
      return start + static_cast<double>(kCoarseInputSteps) * 180.0;
    }
  };

  /// Cuts the 20 windows of one observed session. Window k starts k coarse steps after the series
  /// start. `trainLabels` selects the (partial, noisy) training labels instead of the clean ones.
  /// @throw std::invalid_argument if the series are shorter than the last window.
  [[nodiscard]] std::vector<MSTSSample> extractSamples(sensors::ObservedSession const& obs, double seriesStart,
                                                       int session, double demandScale, bool trainLabels);

  struct ModalityStats {
    double mean{0.0};
    double std{1.0};
  };

  /// Zero-mean, unit-variance scaling per modality. Labels share the drone statistics.
  struct Normalizer {
    ModalityStats drone;
    ModalityStats ld;

    [[nodiscard]] ModalityStats const& labels() const noexcept { return drone; }

    static void apply(ModalityStats const& s, std::span<float> values) noexcept;
    static void invert(ModalityStats const& s, std::span<float> values) noexcept;
    /// Normalizes all four blocks in place.
    void apply(MSTSSample& sample) const noexcept;
  };

  inline constexpr double kStdFloor{1e-6};

  /// Mean and population standard deviation of the present values, std floored at 1e-6.
  /// @throw std::invalid_argument if nothing is present.
  [[nodiscard]] ModalityStats fitStats(std::span<float const> values);

  /// Fits on the given (training) samples only.
  /// @throw std::invalid_argument if a modality has no present value.
  [[nodiscard]] Normalizer fitNormalizer(std::span<MSTSSample const> train);

  struct SessionSplit {
    std::vector<int> train;
    std::vector<int> test;
  };

  /// Uniform random split of session ids 0..sessions-1, both parts sorted.
  /// @throw std::invalid_argument unless 0 < nTrain < sessions.
  [[nodiscard]] SessionSplit splitSessions(std::size_t sessions, std::size_t nTrain, std::uint64_t seed);

  struct DatasetManifest {
    int version{kFormatVersion};
    std::uint64_t seed{0};
    std::size_t segments{0};
    std::size_t regions{0};
    std::size_t samples{0};
    Normalizer normalizer;
    nlohmann::json extra = nlohmann::json::object();  ///< layout, noise spec, split, config
  };

  void to_json(nlohmann::json& j, Normalizer const& n);
  void from_json(nlohmann::json const& j, Normalizer& n);
  void to_json(nlohmann::json& j, DatasetManifest const& m);
  void from_json(nlohmann::json const& j, DatasetManifest& m);

  /// Creates (or replaces) a dataset directory: manifest.json plus one binary record and one JSON
  /// sidecar per sample.
  void writeDataset(std::filesystem::path const& dir, DatasetManifest manifest,
                    std::span<MSTSSample const> samples);

  /// Adds samples to an existing dataset.
  /// @throw std::runtime_error if the manifest's version, seed or shapes differ.
  void appendDataset(std::filesystem::path const& dir, DatasetManifest const& manifest,
                     std::span<MSTSSample const> samples);

  struct Dataset {
    DatasetManifest manifest;
    std::vector<MSTSSample> samples;
  };

  /// @throw std::runtime_error on a missing manifest, version mismatch or corrupt record.
  [[nodiscard]] Dataset readDataset(std::filesystem::path const& dir);
  [[nodiscard]] DatasetManifest readManifest(std::filesystem::path const& dir);

  /// CSV mirror of one block for debugging: one row per location, MISSING as an empty field.
  void writeBlockCsv(std::ostream& out, std::span<float const> values, std::size_t rows, std::size_t cols);

}  // namespace mst::data
