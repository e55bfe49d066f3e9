#include "mst/edie.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <stdexcept>
#include <string>

namespace mst::edie {

  std::vector<TrajectorySplit> toSplits(std::span<sim::PositionRecord const> records, double tIn,
                                        double tOut, double length, int vehicle, int segment) {
    auto const hasExit{!isMissing(tOut)};
    for (std::size_t i{0}; i < records.size(); ++i) {
      auto const& r{records[i]};
      auto const prevT{i == 0 ? tIn : records[i - 1].t};
      if (!(r.t > prevT)) {
        throw std::invalid_argument("records must be strictly time-ordered after t_in");
      }
      if (i > 0 && r.x < records[i - 1].x) {
        throw std::invalid_argument("positions must be non-decreasing within a segment");
      }
    }
    if (hasExit && !records.empty() && !(records.back().t < tOut)) {
      throw std::invalid_argument("t_out must follow the last record");
    }
    if (hasExit && !(tOut > tIn)) {
      throw std::invalid_argument("t_out must follow t_in");
    }

    std::vector<TrajectorySplit> out;
    auto const push = [&](double ts, double te, double xs, double xe) {
      if (te > ts) {
        out.push_back({vehicle, segment, ts, te, xs, xe});
      }
    };
    auto const clampX = [length](double x) { return std::clamp(x, 0.0, length); };

    if (records.empty()) {
      if (hasExit) {
        push(tIn, tOut, 0.0, length);
      }
      return out;
    }
    double leadSpeed{0.0};
    double trailSpeed{0.0};
    if (records.size() == 1) {
      // Without two interior positions there is no local speed; use the segment average.
      auto const avg{hasExit ? length / (tOut - tIn) : records[0].x / (records[0].t - tIn)};
      leadSpeed = avg;
      trailSpeed = avg;
    } else {
      leadSpeed = (records[1].x - records[0].x) / (records[1].t - records[0].t);
      auto const n{records.size()};
      trailSpeed = (records[n - 1].x - records[n - 2].x) / (records[n - 1].t - records[n - 2].t);
    }
    auto const& first{records.front()};
    push(tIn, first.t, clampX(first.x - leadSpeed * (first.t - tIn)), first.x);
    for (std::size_t i{1}; i < records.size(); ++i) {
      push(records[i - 1].t, records[i].t, records[i - 1].x, records[i].x);
    }
    if (hasExit) {
      auto const& last{records.back()};
      push(last.t, tOut, last.x, clampX(last.x + trailSpeed * (tOut - last.t)));
    }
    return out;
  }

  std::vector<TrajectorySplit> toSplits(sim::SegmentVisit const& visit, double length) {
    return toSplits(visit.records, visit.tIn, visit.tOut, length, visit.vehicle, visit.segment);
  }

  EdieSums clip(TrajectorySplit const& split, Interval interval) noexcept {
    auto const a{std::max(split.ts, interval.t0)};
    auto const b{std::min(split.te, interval.t1)};
    if (!(b > a) || !(split.dt() > 0.0)) {
      return {};
    }
    auto const part{b - a};
    return {split.dx() * (part / split.dt()), part, 1};
  }

  EdieSums clippedSums(std::span<TrajectorySplit const> splits, Interval interval) noexcept {
    EdieSums total;
    for (auto const& s : splits) {
      total.add(clip(s, interval));
    }
    return total;
  }

  std::optional<double> segmentSpeed(std::span<TrajectorySplit const> splits, Interval interval) noexcept {
    return clippedSums(splits, interval).speed();
  }

  std::optional<double> regionalSpeed(std::span<TrajectorySplit const> splits, Interval interval) noexcept {
    return segmentSpeed(splits, interval);
  }

  PointSpeed pointSpeed(std::span<TrajectorySplit const> splits, double offset, double length,
                        Interval interval) {
    if (!(offset > 0.0 && offset < length)) {
      throw std::invalid_argument("detector offset " + std::to_string(offset) +
                                  " outside segment of length " + std::to_string(length));
    }
    PointSpeed result;
    double sum{0.0};
    for (auto const& s : splits) {
      if (detects(s, offset) && s.ts >= interval.t0 && s.ts < interval.t1) {
        sum += s.speed();
        ++result.detections;
      }
    }
    if (result.detections > 0) {
      result.speed = sum / static_cast<double>(result.detections);
    }
    return result;
  }

  MfdPoint mfdPoint(EdieSums const& sums, Interval interval, double totalLength) {
    if (!(interval.length() > 0.0) || !(totalLength > 0.0)) {
      throw std::invalid_argument("MFD needs a positive interval and network length");
    }
    MfdPoint p;
    p.t0 = interval.t0;
    p.duration = interval.length();
    auto const denom{interval.length() * totalLength};
    p.flow = sums.distance / denom;
    p.density = sums.time / denom;
    if (p.density > 0.0) {
      p.speed = p.flow / p.density;
    }
    return p;
  }

  MfdPoint mfdPoint(std::span<TrajectorySplit const> splits, Interval interval, double totalLength) {
    return mfdPoint(clippedSums(splits, interval), interval, totalLength);
  }

  TravelTimeStats travelTimeStats(std::span<sim::VehicleSummary const> vehicles, double binWidth) {
    TravelTimeStats stats;
    stats.binWidth = binWidth;
    std::vector<double> times;
    for (auto const& v : vehicles) {
      if (v.arrived()) {
        times.push_back(v.arrival - v.departure);
      }
    }
    stats.count = times.size();
    if (times.empty()) {
      return stats;
    }
    std::sort(times.begin(), times.end());
    double sum{0.0};
    for (auto t : times) {
      sum += t;
      auto const bin{static_cast<std::size_t>(std::floor(t / binWidth))};
      if (bin >= stats.histogram.size()) {
        stats.histogram.resize(bin + 1, 0);
      }
      ++stats.histogram[bin];
    }
    auto const n{times.size()};
    stats.mean = sum / static_cast<double>(n);
    stats.median = n % 2 == 1 ? times[n / 2] : 0.5 * (times[n / 2 - 1] + times[n / 2]);
    auto const pos{0.9 * static_cast<double>(n - 1)};
    auto const lo{static_cast<std::size_t>(std::floor(pos))};
    auto const hi{std::min(lo + 1, n - 1)};
    stats.p90 = times[lo] + (pos - static_cast<double>(lo)) * (times[hi] - times[lo]);
    return stats;
  }

  TravelTimeStats travelTimeStats(sim::SessionTrajectories const& session, double binWidth) {
    return travelTimeStats(session.vehicles, binWidth);
  }

  SplitBinner::SplitBinner(std::size_t ids, double start, double resolution, std::size_t bins)
      : m_ids{ids},
        m_start{start},
        m_resolution{resolution},
        m_bins{bins},
        m_sums(ids * bins),
        m_pointSum(ids * bins, 0.0),
        m_pointCount(ids * bins, 0) {
    if (!(resolution > 0.0)) {
      throw std::invalid_argument("bin resolution must be positive");
    }
  }

  void SplitBinner::add(int id, TrajectorySplit const& split) {
    if (!(split.dt() > 0.0) || m_bins == 0) {
      return;
    }
    auto const end{m_start + m_resolution * static_cast<double>(m_bins)};
    if (split.te <= m_start || split.ts >= end) {
      return;
    }
    auto const rel0{std::floor((std::max(split.ts, m_start) - m_start) / m_resolution)};
    auto const rel1{std::floor((std::min(split.te, end) - m_start) / m_resolution)};
    auto const first{static_cast<std::size_t>(std::max(0.0, rel0))};
    auto const last{std::min(m_bins - 1, static_cast<std::size_t>(std::max(0.0, rel1)))};
    auto const base{static_cast<std::size_t>(id) * m_bins};
    for (auto b{first}; b <= last; ++b) {
      auto const t0{m_start + m_resolution * static_cast<double>(b)};
      auto const part{clip(split, {t0, t0 + m_resolution})};
      if (part.splits > 0) {
        m_sums[base + b].add(part);
      }
    }
  }

  void SplitBinner::addDetection(int id, TrajectorySplit const& split, double offset) {
    if (!detects(split, offset) || !(split.dt() > 0.0)) {
      return;
    }
    auto const rel{(split.ts - m_start) / m_resolution};
    if (rel < 0.0) {
      return;
    }
    auto const b{static_cast<std::size_t>(std::floor(rel))};
    if (b >= m_bins) {
      return;
    }
    auto const idx{static_cast<std::size_t>(id) * m_bins + b};
    m_pointSum[idx] += split.speed();
    ++m_pointCount[idx];
  }

  SplitBinner SplitBinner::coarsen(std::size_t factor) const {
    if (factor == 0) {
      throw std::invalid_argument("coarsening factor must be positive");
    }
    SplitBinner out{m_ids, m_start, m_resolution * static_cast<double>(factor), m_bins / factor};
    for (std::size_t id{0}; id < m_ids; ++id) {
      for (std::size_t b{0}; b < out.m_bins; ++b) {
        auto const dst{id * out.m_bins + b};
        for (std::size_t f{0}; f < factor; ++f) {
          auto const src{id * m_bins + b * factor + f};
          out.m_sums[dst].add(m_sums[src]);
          out.m_pointSum[dst] += m_pointSum[src];
          out.m_pointCount[dst] += m_pointCount[src];
        }
      }
    }
    return out;
  }

  std::vector<double> SplitBinner::speedSeries(std::size_t id) const {
    std::vector<double> out(m_bins, kMissing);
    for (std::size_t b{0}; b < m_bins; ++b) {
      out[b] = orMissing(sums(id, b).speed());
    }
    return out;
  }

  std::vector<double> SplitBinner::pointSeries(std::size_t id) const {
    std::vector<double> out(m_bins, kMissing);
    for (std::size_t b{0}; b < m_bins; ++b) {
      auto const n{detectionCount(id, b)};
      if (n > 0) {
        out[b] = detectionSpeedSum(id, b) / static_cast<double>(n);
      }
    }
    return out;
  }

  void writeSplitRow(std::ostream& out, TrajectorySplit const& s) {
    out << s.vehicle << ',' << s.segment << ',' << sim::formatNumber(s.ts) << ','
        << sim::formatNumber(s.te) << ',' << sim::formatNumber(s.xs) << ','
        << sim::formatNumber(s.xe) << '\n';
  }

  void writeSpeedSeriesRow(std::ostream& out, int id, double resolution, double t0,
                           std::span<double const> values) {
    out << id << ',' << sim::formatNumber(resolution) << ',' << sim::formatNumber(t0);
    for (auto v : values) {
      out << ',' << sim::formatNumber(v);
    }
    out << '\n';
  }

}  // namespace mst::edie
