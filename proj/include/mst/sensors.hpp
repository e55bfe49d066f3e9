/// @file sensors.hpp
/// @brief Which measurements exist: loop-detector placement, drone relocation schedule,
///        multiplicative noise, and the observed view of one session.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "common.hpp"
#include "edie.hpp"
#include "roadnet.hpp"

namespace mst::sensors {

  enum class ObservationMode { Full, PN, PNLdMinus };

  [[nodiscard]] std::string modeName(ObservationMode mode);
  /// Accepts "full", "pn" and "pn-ld-".
  /// @throw std::invalid_argument for any other name.
  [[nodiscard]] ObservationMode parseMode(std::string const& name);

  struct NoiseSpec {
    double sigmaLd{0.0};
    double sigmaDrone{0.0};
    double sigmaLabel{0.0};
    std::uint64_t seed{0};

    /// Defaults per mode: none for full information, 0.05 / 0.15 / 0.15 under PN, and doubled
    /// label noise (0.3) when drones are absent.
    [[nodiscard]] static NoiseSpec forMode(ObservationMode mode, std::uint64_t seed);
  };

  /// Clean per-session measurements over the observation window.
  struct SessionSeries {
    double start{0.0};          ///< seconds, window start
    double fineResolution{5.0};
    double coarseResolution{180.0};
    SeriesMatrix drone;         ///< [segments x fine] Edie speed at 5 s
    SeriesMatrix ld;            ///< [segments x coarse] point speed at 3 min
    SeriesMatrix segment;       ///< [segments x coarse] Edie speed at 3 min
    SeriesMatrix distance;      ///< [segments x coarse] sum of dx
    SeriesMatrix time;          ///< [segments x coarse] sum of dt

    [[nodiscard]] std::size_t segments() const noexcept { return drone.rows; }
    [[nodiscard]] std::size_t fineSteps() const noexcept { return drone.cols; }
    [[nodiscard]] std::size_t coarseSteps() const noexcept { return segment.cols; }
  };

  /// Builds the clean series from a binner filled at the fine resolution with detections at each
  /// segment's detector offset. `coarseFactor` fine bins make one coarse bin.
  [[nodiscard]] SessionSeries seriesFromBinner(edie::SplitBinner const& fine, std::size_t coarseFactor);

  /// Detector sites are fixed for every session; drone positions are redrawn per session from
  /// `seed` and the session id.
  struct SensorLayout {
    std::vector<int> ldSegments;  ///< sorted
    double ldCoverage{1.0};
    double droneCoverage{1.0};
    std::uint64_t seed{0};
  };

  /// Missing share of each row; rows with no columns count as fully missing.
  [[nodiscard]] std::vector<double> missingFractions(SeriesMatrix const& series);

  /// Samples max(1, round(coverage * segments)) detector sites among the segments whose LD series
  /// is at most 10% MISSING. With coverage 1 every segment is equipped.
  /// @throw std::invalid_argument if coverage is outside (0, 1].
  [[nodiscard]] std::vector<int> placeLoopDetectors(std::span<double const> missingFraction,
                                                    double coverage, std::uint64_t seed);

  /// max(1, round(coverage * cells)) distinct cells per slot, drawn independently for each slot.
  /// @throw std::invalid_argument if coverage is outside (0, 1].
  [[nodiscard]] std::vector<std::vector<int>> droneSchedule(std::size_t cellCount, double coverage,
                                                            std::size_t slots, std::uint64_t seed);

  /// v -> max(0, v (1 + eps)), eps ~ N(0, sigma^2); MISSING stays MISSING.
  void applyMultiplicativeNoise(std::span<double> values, double sigma, Rng& rng);

  struct ObservedSession {
    SeriesMatrix droneInput;   ///< [segments x fine]
    SeriesMatrix ldInput;      ///< [segments x coarse]
    SeriesMatrix segTrain;     ///< [segments x coarse]
    SeriesMatrix regTrain;     ///< [regions x coarse]
    SeriesMatrix segEval;      ///< [segments x coarse], always clean
    SeriesMatrix regEval;      ///< [regions x coarse], always clean
  };

  /// Drone cells of one session, one entry per coarse slot.
  [[nodiscard]] std::vector<std::vector<int>> sessionDrones(SensorLayout const& layout, std::size_t cellCount,
                                                            std::size_t slots, std::uint64_t session);

  /// Pooled sum(dx) / sum(dt) per region and coarse step. With `observed`, only segments whose
  /// entry in `observed` is present contribute.
  [[nodiscard]] SeriesMatrix regionalSeries(SessionSeries const& s, roadnet::RegionMap const& regions,
                                            SeriesMatrix const* observed = nullptr);

  /// Applies `mode` to one session. Full mode returns the clean series for inputs and both label
  /// sets. PN keeps LD values at the layout's sites and drone values in occupied cells, adds noise,
  /// and masks training labels where no sensor saw the segment. PN(ld-) drops the drone input.
  [[nodiscard]] ObservedSession observeSession(SessionSeries const& series, ObservationMode mode,
                                               SensorLayout const& layout, roadnet::GridMap const& grid,
                                               roadnet::RegionMap const& regions, NoiseSpec const& noise,
                                               std::uint64_t session);

  /// `{ld_segments, drones: {slot_start_s: [cell, ...]}, coverage, seeds}`; `drones` lists the
  /// schedule passed in, typically one session's.
  [[nodiscard]] nlohmann::json layoutJson(SensorLayout const& layout,
                                          std::vector<std::vector<int>> const& drones,
                                          double slotStart, double slotSeconds);
  void to_json(nlohmann::json& j, SensorLayout const& layout);
  void from_json(nlohmann::json const& j, SensorLayout& layout);

}  // namespace mst::sensors
