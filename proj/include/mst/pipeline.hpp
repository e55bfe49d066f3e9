/// @file pipeline.hpp
/// @brief Run configuration and the stages that turn a network into sessions, datasets, models and
/// reports.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "dataset.hpp"
#include "edie.hpp"
#include "evalkit.hpp"
#include "himsnet.hpp"
#include "roadnet.hpp"
#include "sensors.hpp"
#include "simcore.hpp"

namespace mst::pipeline {

  /// Malformed or inconsistent configuration.
  class ConfigError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
  };

  /// An upstream artifact a stage needs does not exist.
  class MissingArtifact : public std::runtime_error {
  public:
    explicit MissingArtifact(std::filesystem::path path)
        : std::runtime_error{"missing artifact: " + path.string()}, m_path{std::move(path)} {}
    [[nodiscard]] std::filesystem::path const& path() const noexcept { return m_path; }

  private:
    std::filesystem::path m_path;
  };

  struct DemandConfig {
    double baseTrips{30000.0};   ///< expected trips of the base OD over warm-up + main demand
    double zeroFraction{0.5};    ///< share of OD pairs without demand in the base matrix
    sim::AugmentParams augment;
  };

  struct RunConfig {
    roadnet::GridSpec network;
    DemandConfig demand;
    sim::SimParams simulation;
    int sessions{101};
    int train{75};
    int regions{4};
    double cellSize{220.0};  ///< drone grid cell, meters
    sensors::ObservationMode mode{sensors::ObservationMode::Full};
    double coverage{0.1};    ///< both modalities; ignored in full-information mode
    std::optional<double> noiseLd;
    std::optional<double> noiseDrone;
    std::optional<double> noiseLabel;
    model::ModelConfig model;
    std::uint64_t seed{1};
    int jobs{1};
    std::filesystem::path out{"run"};
    std::vector<double> coverageSweep;  ///< coverages trained by `report`; empty to skip

    /// @throw ConfigError
    void validate() const;
    [[nodiscard]] sensors::NoiseSpec noise() const;
  };

  void to_json(nlohmann::json& j, RunConfig const& c);
  /// Missing keys keep their defaults; unknown keys are rejected.
  /// @throw ConfigError
  void from_json(nlohmann::json const& j, RunConfig& c);

  /// @throw ConfigError on unreadable or malformed files.
  [[nodiscard]] RunConfig loadConfig(std::filesystem::path const& path);

  /// FNV-1a of the canonical configuration, without the fields that never change results (jobs,
  /// output directory). Hex, 16 characters.
  [[nodiscard]] std::string configHash(RunConfig const& c);

  /// Network, regions, drone grid, base OD and signal plans shared by all sessions of a run.
  struct Benchmark {
    roadnet::RoadGraph graph;
    roadnet::RegionMap regions;
    roadnet::GridMap grid;
    sim::ODMatrix baseOd;
    sim::SignalMap signals;
  };

  [[nodiscard]] Benchmark makeBenchmark(RunConfig const& c);
  /// Same, on a network that already exists (e.g. read back from disk).
  [[nodiscard]] Benchmark benchmarkOn(roadnet::RoadGraph graph, RunConfig const& c);

  /// Series window shared by every session: 15 min onward, long enough for the 20 windows.
  inline constexpr double kSeriesStart{900.0};
  inline constexpr std::size_t kFineBins{1440};
  inline constexpr double kMfdResolution{180.0};

  /// Everything later stages need from one simulated session.
  struct SessionRecord {
    int session{0};
    std::uint64_t seed{0};
    double demandScale{1.0};
    double duration{0.0};
    sim::SessionStats stats;
    sensors::SessionSeries series;
    std::vector<edie::EdieSums> mfd;  ///< network totals per 3-minute bin from t = 0
    std::vector<sim::VehicleSummary> vehicles;
  };

  [[nodiscard]] std::uint64_t sessionSeed(std::uint64_t seed, int session);

  /// Demand of one session: the augmented base OD.
  [[nodiscard]] sim::AugmentedOD sessionDemand(Benchmark const& b, RunConfig const& c, int session);

  /// Streams a session's visits into `visits` (if set) while binning them.
  [[nodiscard]] SessionRecord simulateOne(Benchmark const& b, RunConfig const& c, int session,
                                          sim::VisitSink const& visits = {});

  /// Runs fn(0..count-1) on up to `jobs` threads; rethrows the first exception.
  void parallelFor(std::size_t count, int jobs, std::function<void(std::size_t)> const& fn);

  /// Simulates sessions [0, c.sessions) on `c.jobs` threads; results do not depend on the thread count.
  [[nodiscard]] std::vector<SessionRecord> simulateAll(Benchmark const& b, RunConfig const& c);

  /// Bins already recorded visits (e.g. read back from CSV) into a record.
  [[nodiscard]] SessionRecord recordFromVisits(roadnet::RoadGraph const& graph, int session, std::uint64_t seed,
                                               double demandScale, double duration,
                                               std::span<sim::SegmentVisit const> visits,
                                               std::vector<sim::VehicleSummary> vehicles);

  void writeSessionCache(std::filesystem::path const& path, SessionRecord const& r);
  /// @throw std::runtime_error on a corrupt file.
  [[nodiscard]] SessionRecord readSessionCache(std::filesystem::path const& path);

  /// Simulates one session into `dir`: trajectories.csv, visits.csv, vehicles.csv, meta.json and
  /// the binned series cache series.bin.
  SessionRecord simulateToDir(Benchmark const& b, RunConfig const& c, int session,
                              std::filesystem::path const& dir);

  /// Reads series.bin when present, otherwise rebuilds the record from the CSVs.
  /// @throw MissingArtifact if neither exists.
  [[nodiscard]] SessionRecord loadSession(roadnet::RoadGraph const& graph, std::filesystem::path const& dir);

  [[nodiscard]] std::string sessionDirName(int session);

  /// Observed samples of a run, split into train and test sessions.
  struct BuiltDataset {
    data::SessionSplit split;
    sensors::SensorLayout layout;
    sensors::NoiseSpec noise;
    data::Normalizer normalizer;
    std::vector<data::MSTSSample> train;
    std::vector<data::MSTSSample> test;
  };

  /// @param records  one per session, indexed by session id
  [[nodiscard]] BuiltDataset buildDataset(Benchmark const& b, RunConfig const& c,
                                          std::span<SessionRecord const> records);

  /// Writes samples, split, layout, normalizer, network and regions to `dir`.
  void writeBuiltDataset(std::filesystem::path const& dir, Benchmark const& b, RunConfig const& c,
                         BuiltDataset const& d);

  struct LoadedDataset {
    Benchmark bench;  ///< network, regions and drone grid only
    BuiltDataset data;
    nlohmann::json extra;
  };

  /// @throw MissingArtifact if the directory holds no dataset.
  [[nodiscard]] LoadedDataset readBuiltDataset(std::filesystem::path const& dir);

  [[nodiscard]] model::ModelGraph modelGraph(Benchmark const& b, model::ModelConfig const& m);

  /// "both", "drone", "ld", with "-nognn" appended without message exchange.
  [[nodiscard]] std::string variantName(model::ModelConfig const& m);

  struct TrainedModel {
    model::HiMSNet net;
    std::vector<model::TrainLogRow> log;
  };

  [[nodiscard]] TrainedModel trainModel(Benchmark const& b, model::ModelConfig const& m, BuiltDataset const& d,
                                        std::uint64_t seed);

  [[nodiscard]] std::vector<eval::SamplePrediction> predictAll(model::HiMSNet const& net, BuiltDataset const& d);

  /// LA plus LO/IA on both modalities over the test set. Segments without input fall back to the
  /// training label mean.
  [[nodiscard]] std::vector<eval::EvalReport> baselineReports(Benchmark const& b, BuiltDataset const& d);

  [[nodiscard]] eval::EvalReport modelReport(model::HiMSNet const& net, BuiltDataset const& d);

  /// Network MFD of one session, one point per 3-minute bin.
  [[nodiscard]] std::vector<edie::MfdPoint> sessionMfd(SessionRecord const& r, double totalLength);

  struct MfdSummary {
    double maxDensity{0.0};
    std::optional<double> minSpeed;  ///< over bins inside the demand period with traffic
    bool hysteresis{false};
    double hysteresisGap{0.0};  ///< largest loading/unloading speed gap at equal density, m/s
  };

  [[nodiscard]] MfdSummary summarizeMfd(std::span<edie::MfdPoint const> points, double demandEnd);

  /// Manifest written next to every artifact: stage, configuration, its hash and the seeds.
  [[nodiscard]] nlohmann::json stageManifest(std::string const& stage, RunConfig const& c,
                                             nlohmann::json extra = nlohmann::json::object());

  void writeJson(std::filesystem::path const& path, nlohmann::json const& j);
  /// @throw MissingArtifact if the file does not exist.
  [[nodiscard]] nlohmann::json readJson(std::filesystem::path const& path);

}  // namespace mst::pipeline
