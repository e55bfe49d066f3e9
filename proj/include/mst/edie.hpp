/// @file edie.hpp
/// @brief Trajectory splits and the traffic variables built on them: space-mean segment speed,
///        loop-detector point speed, regional speed, network MFD points and travel times.
///
/// @details A split (vehicle, t_s, t_e, x_s, x_e) assumes constant speed between two known
///          positions. Segment and regional speeds pool all splits inside an interval as
///          sum(dx) / sum(dt); a split that straddles an interval boundary contributes the
///          proportional part of its distance, so aggregates are additive across resolutions.

#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "simcore.hpp"

namespace mst::edie {

  struct TrajectorySplit {
    int vehicle{0};
    int segment{0};
    double ts{0.0};
    double te{0.0};
    double xs{0.0};
    double xe{0.0};

    [[nodiscard]] double dx() const noexcept { return xe - xs; }
    [[nodiscard]] double dt() const noexcept { return te - ts; }
    [[nodiscard]] double speed() const noexcept { return dx() / dt(); }
  };

  /// Converts the logged positions of one segment visit into splits. The entry and exit pieces
  /// are extrapolated at the speed of the nearest interior split (or at length / (t_out - t_in)
  /// when there is a single record) and clamped to [0, length]. Zero-duration pieces are dropped.
  /// A MISSING `tOut` means the vehicle is still on the segment: no trailing piece.
  /// @throw std::invalid_argument if records are not strictly time-ordered inside (t_in, t_out)
  ///        or positions move backwards.
  [[nodiscard]] std::vector<TrajectorySplit> toSplits(std::span<sim::PositionRecord const> records,
                                                      double tIn, double tOut, double length,
                                                      int vehicle = 0, int segment = 0);
  [[nodiscard]] std::vector<TrajectorySplit> toSplits(sim::SegmentVisit const& visit, double length);

  /// Half-open time interval [t0, t1).
  struct Interval {
    double t0{0.0};
    double t1{0.0};
    [[nodiscard]] double length() const noexcept { return t1 - t0; }
  };

  struct EdieSums {
    double distance{0.0};  ///< sum of dx, meters
    double time{0.0};      ///< sum of dt, seconds
    std::size_t splits{0};

    void add(EdieSums const& o) noexcept {
      distance += o.distance;
      time += o.time;
      splits += o.splits;
    }
    [[nodiscard]] std::optional<double> speed() const noexcept {
      if (splits == 0 || !(time > 0.0)) {
        return std::nullopt;
      }
      return distance / time;
    }
  };

  /// The part of `split` inside `interval` under the constant-speed assumption.
  [[nodiscard]] EdieSums clip(TrajectorySplit const& split, Interval interval) noexcept;
  [[nodiscard]] EdieSums clippedSums(std::span<TrajectorySplit const> splits, Interval interval) noexcept;

  /// sum(dx) / sum(dt) over the clipped splits; nullopt (MISSING) when nothing overlaps.
  [[nodiscard]] std::optional<double> segmentSpeed(std::span<TrajectorySplit const> splits,
                                                   Interval interval) noexcept;

  /// Same formula over the pooled splits of every segment in a region.
  [[nodiscard]] std::optional<double> regionalSpeed(std::span<TrajectorySplit const> splits,
                                                    Interval interval) noexcept;

  struct PointSpeed {
    std::optional<double> speed;
    std::size_t detections{0};
  };

  /// Loop detector at `offset` meters: a split detects its vehicle iff x_s < offset < x_e
  /// (strict) and t_s lies in the interval; the result is the arithmetic mean of dx/dt.
  /// @throw std::invalid_argument if the offset is not strictly inside (0, length).
  [[nodiscard]] PointSpeed pointSpeed(std::span<TrajectorySplit const> splits, double offset,
                                      double length, Interval interval);

  [[nodiscard]] inline bool detects(TrajectorySplit const& s, double offset) noexcept {
    return s.xs < offset && offset < s.xe;
  }

  struct MfdPoint {
    double t0{0.0};
    double duration{0.0};
    double flow{0.0};     ///< q = D / (t L)
    double density{0.0};  ///< k = T / (t L)
    std::optional<double> speed;  ///< q / k
  };

  /// Network-wide flow and density over `interval` for a network of total length `totalLength`.
  /// @throw std::invalid_argument if the interval or length is not positive.
  [[nodiscard]] MfdPoint mfdPoint(std::span<TrajectorySplit const> splits, Interval interval,
                                  double totalLength);
  [[nodiscard]] MfdPoint mfdPoint(EdieSums const& sums, Interval interval, double totalLength);

  struct TravelTimeStats {
    double binWidth{30.0};
    std::vector<std::size_t> histogram;  ///< bin i counts [i w, (i+1) w)
    std::size_t count{0};
    std::optional<double> mean;
    std::optional<double> median;
    std::optional<double> p90;
  };

  /// Origin-to-destination travel times of the vehicles that reached their destination.
  [[nodiscard]] TravelTimeStats travelTimeStats(std::span<sim::VehicleSummary const> vehicles,
                                                double binWidth = 30.0);
  [[nodiscard]] TravelTimeStats travelTimeStats(sim::SessionTrajectories const& session,
                                                double binWidth = 30.0);

  /// Accumulates clipped split sums and loop detections into fixed-width time bins per id.
  class SplitBinner {
  public:
    SplitBinner(std::size_t ids, double start, double resolution, std::size_t bins);

    /// Distributes the split's distance and time over the bins it overlaps.
    void add(int id, TrajectorySplit const& split);
    /// Registers a detection at t_s if the split crosses `offset`.
    void addDetection(int id, TrajectorySplit const& split, double offset);

    [[nodiscard]] std::size_t ids() const noexcept { return m_ids; }
    [[nodiscard]] std::size_t bins() const noexcept { return m_bins; }
    [[nodiscard]] double start() const noexcept { return m_start; }
    [[nodiscard]] double resolution() const noexcept { return m_resolution; }
    [[nodiscard]] EdieSums const& sums(std::size_t id, std::size_t bin) const {
      return m_sums[id * m_bins + bin];
    }
    [[nodiscard]] double detectionSpeedSum(std::size_t id, std::size_t bin) const {
      return m_pointSum[id * m_bins + bin];
    }
    [[nodiscard]] std::size_t detectionCount(std::size_t id, std::size_t bin) const {
      return m_pointCount[id * m_bins + bin];
    }

    /// Merges `factor` consecutive bins; ids are kept.
    [[nodiscard]] SplitBinner coarsen(std::size_t factor) const;

    /// Segment (Edie) speed per bin, MISSING where nothing overlapped.
    [[nodiscard]] std::vector<double> speedSeries(std::size_t id) const;
    /// Mean detected speed per bin, MISSING where no vehicle crossed the detector.
    [[nodiscard]] std::vector<double> pointSeries(std::size_t id) const;

  private:
    std::size_t m_ids;
    double m_start;
    double m_resolution;
    std::size_t m_bins;
    std::vector<EdieSums> m_sums;
    std::vector<double> m_pointSum;
    std::vector<std::size_t> m_pointCount;
  };

  inline constexpr char const* kSplitHeader{"vehicle_id,segment_id,t_s,t_e,x_s,x_e"};
  void writeSplitRow(std::ostream& out, TrajectorySplit const& split);
  /// `id,resolution_s,t0,v0,v1,...` with MISSING written as an empty field.
  void writeSpeedSeriesRow(std::ostream& out, int id, double resolution, double t0,
                           std::span<double const> values);

}  // namespace mst::edie
