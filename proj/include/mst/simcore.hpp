/// @file simcore.hpp
/// @brief Mesoscopic trajectory simulator on a signalized network.
///
/// @details Vehicles travel at the segment free-flow speed, stop behind the vehicle ahead
///          (jam spacing) or at the stop line, and leave a segment only during green and at
///          least one saturation headway after the previous departure. Positions are logged on
///          a fixed time grid and referenced within the current segment.

#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "common.hpp"
#include "roadnet.hpp"

namespace mst::sim {

  /// Origin x destination vehicle counts over the demand period; centroids are intersections.
  class ODMatrix {
  public:
    ODMatrix() = default;
    explicit ODMatrix(std::size_t centroids) : m_n{centroids}, m_counts(centroids * centroids, 0.0) {}

    [[nodiscard]] std::size_t size() const noexcept { return m_n; }
    [[nodiscard]] double& at(std::size_t o, std::size_t d) { return m_counts.at(o * m_n + d); }
    [[nodiscard]] double at(std::size_t o, std::size_t d) const { return m_counts.at(o * m_n + d); }
    [[nodiscard]] double total() const noexcept;
    [[nodiscard]] std::vector<double> const& counts() const noexcept { return m_counts; }

  private:
    std::size_t m_n{0};
    std::vector<double> m_counts;
  };

  struct AugmentParams {
    double zeroProb{0.05};
    double pctRange{0.30};
    double scaleMin{0.8};
    double scaleMax{1.8};
  };

  struct AugmentedOD {
    ODMatrix od;
    double demandScale{1.0};
  };

  /// Zero entries stay zero; each non-zero entry is dropped with `zeroProb`, otherwise scaled by
  /// (1 + U(-pct, pct)); finally everything is multiplied by one scale drawn from
  /// [scaleMin, scaleMax].
  /// @throw std::invalid_argument on negative entries or malformed probabilities/ranges.
  [[nodiscard]] AugmentedOD augmentOd(ODMatrix const& od, std::uint64_t seed, AugmentParams const& params);

  /// Random base demand between intersections; roughly `zeroFraction` of pairs carry no trips.
  [[nodiscard]] ODMatrix randomBaseOd(roadnet::RoadGraph const& graph, double totalTrips,
                                      double zeroFraction, std::uint64_t seed);

  struct GreenWindow {
    double start{0.0};
    double end{0.0};
  };

  struct SignalPlan {
    double cycle{90.0};
    double offset{0.0};
    std::array<GreenWindow, 2> green{GreenWindow{0.0, 45.0}, GreenWindow{45.0, 90.0}};

    [[nodiscard]] bool isGreen(roadnet::Approach approach, double t) const noexcept;

    [[nodiscard]] static SignalPlan twoPhase(double cycle, double offset);
    [[nodiscard]] static SignalPlan alwaysGreen();
    [[nodiscard]] static SignalPlan alwaysRed();
  };

  /// One plan per intersection.
  using SignalMap = std::vector<SignalPlan>;

  /// 90 s two-phase 50/50 plans with per-intersection random offsets.
  [[nodiscard]] SignalMap defaultSignals(roadnet::RoadGraph const& graph, std::uint64_t seed,
                                         double cycle = 90.0);

  struct SimParams {
    double step{0.5};
    double warmup{900.0};
    double mainDemand{6300.0};
    double duration{14400.0};
    double warmupRateFactor{0.5};
    double jamSpacing{7.0};
    double saturationHeadway{2.0};
    /// Candidate arrival rate per OD stream for thinning, vehicles per second.
    double candidateRate{1.0 / 30.0};

    [[nodiscard]] double demandEnd() const noexcept { return warmup + mainDemand; }
  };

  struct PositionRecord {
    double t{0.0};
    double x{0.0};
  };

  /// One vehicle's stay on one segment. `tOut` is MISSING while the vehicle is still there.
  struct SegmentVisit {
    int vehicle{0};
    int segment{0};
    double tIn{0.0};
    double tOut{kMissing};
    std::vector<PositionRecord> records;
    [[nodiscard]] bool exited() const noexcept { return !isMissing(tOut); }
  };

  struct VehicleSummary {
    int id{0};
    int origin{0};
    int destination{0};
    double departure{0.0};
    double arrival{kMissing};
    [[nodiscard]] bool arrived() const noexcept { return !isMissing(arrival); }
  };

  struct SessionStats {
    std::size_t spawned{0};
    std::size_t arrived{0};
    std::size_t remaining{0};
    std::size_t skippedPairs{0};
    double vehicleHours{0.0};
    double endTime{0.0};
  };

  struct SessionTrajectories {
    double demandScale{1.0};
    double step{0.5};
    double duration{0.0};
    SessionStats stats;
    std::vector<VehicleSummary> vehicles;
    std::vector<SegmentVisit> visits;
  };

  struct Departure {
    double time{0.0};
    int origin{0};
    int destination{0};
  };

  /// Poisson thinning of the OD rates against a fixed candidate rate per stream, so that for a
  /// fixed seed a larger demand accepts a superset of the candidate arrivals. Sorted by time.
  [[nodiscard]] std::vector<Departure> sampleDepartures(ODMatrix const& od, std::uint64_t seed,
                                                        SimParams const& params);

  /// Receives each visit when the vehicle leaves the segment, and any unfinished visits at the end.
  using VisitSink = std::function<void(SegmentVisit&&)>;

  /// Streams visits to `sink` instead of holding the whole session in memory.
  /// @throw std::invalid_argument if the OD size does not match the intersection count or the
  ///        signal map does not cover every intersection.
  SessionStats simulateSession(roadnet::RoadGraph const& graph, ODMatrix const& od,
                               SignalMap const& signals, std::uint64_t seed, SimParams const& params,
                               VisitSink const& sink, std::vector<VehicleSummary>* vehicles = nullptr);

  /// Runs the dynamics for an explicit, time-sorted list of departures.
  SessionStats simulateDepartures(roadnet::RoadGraph const& graph, std::span<Departure const> departures,
                                  SignalMap const& signals, SimParams const& params,
                                  VisitSink const& sink, std::vector<VehicleSummary>* vehicles = nullptr);

  [[nodiscard]] SessionTrajectories simulateSession(roadnet::RoadGraph const& graph, ODMatrix const& od,
                                                    SignalMap const& signals, std::uint64_t seed,
                                                    SimParams const& params = {});

  /// `vehicle_id,segment_id,t,x` rows, one block per visit in visit order.
  void writeTrajectoryRows(std::ostream& out, SegmentVisit const& visit);
  /// `vehicle_id,segment_id,t_in,t_out` with an empty t_out for unfinished visits.
  void writeVisitRow(std::ostream& out, SegmentVisit const& visit);
  inline constexpr char const* kTrajectoryHeader{"vehicle_id,segment_id,t,x"};
  inline constexpr char const* kVisitHeader{"vehicle_id,segment_id,t_in,t_out"};

  /// Reads a trajectory/visit CSV pair produced by the writers above and replays the visits.
  /// @throw std::runtime_error on malformed or inconsistent files.
  void readTrajectoryCsv(std::istream& trajectories, std::istream& visits, VisitSink const& sink);

  /// Shortest-representation decimal that round-trips exactly.
  [[nodiscard]] std::string formatNumber(double v);

}  // namespace mst::sim
