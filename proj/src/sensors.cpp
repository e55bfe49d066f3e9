#include "mst/sensors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <spdlog/spdlog.h>

namespace mst::sensors {

  namespace {
    constexpr double kMaxInvalidShare{0.10};

    void checkCoverage(double coverage) {
      if (!(coverage > 0.0 && coverage <= 1.0)) {
        throw std::invalid_argument("coverage must lie in (0, 1], got " + std::to_string(coverage));
      }
    }

    std::size_t siteCount(double coverage, std::size_t total) {
      auto const n{static_cast<std::size_t>(std::llround(coverage * static_cast<double>(total)))};
      return std::clamp<std::size_t>(n, 1, std::max<std::size_t>(total, 1));
    }

    /// Partial Fisher-Yates: the first `n` entries become a uniform sample without replacement.
    std::vector<int> sampleWithoutReplacement(std::vector<int> pool, std::size_t n, Rng& rng) {
      n = std::min(n, pool.size());
      for (std::size_t i{0}; i < n; ++i) {
        auto const j{i + uniformIndex(rng, pool.size() - i)};
        std::swap(pool[i], pool[j]);
      }
      pool.resize(n);
      std::sort(pool.begin(), pool.end());
      return pool;
    }
  }  // namespace

  std::string modeName(ObservationMode mode) {
    switch (mode) {
      case ObservationMode::Full:
        return "full";
      case ObservationMode::PN:
        return "pn";
      case ObservationMode::PNLdMinus:
        return "pn-ld-";
    }
    return "full";
  }

  ObservationMode parseMode(std::string const& name) {
    if (name == "full") {
      return ObservationMode::Full;
    }
    if (name == "pn") {
      return ObservationMode::PN;
    }
    if (name == "pn-ld-") {
      return ObservationMode::PNLdMinus;
    }
    throw std::invalid_argument("unknown observation mode '" + name + "'");
  }

  NoiseSpec NoiseSpec::forMode(ObservationMode mode, std::uint64_t seed) {
    switch (mode) {
      case ObservationMode::Full:
        return {0.0, 0.0, 0.0, seed};
      case ObservationMode::PN:
        return {0.05, 0.15, 0.15, seed};
      case ObservationMode::PNLdMinus:
        return {0.05, 0.15, 0.30, seed};
    }
    return {0.0, 0.0, 0.0, seed};
  }

  SessionSeries seriesFromBinner(edie::SplitBinner const& fine, std::size_t coarseFactor) {
    auto const coarse{fine.coarsen(coarseFactor)};
    auto const n{fine.ids()};
    SessionSeries s;
    s.start = fine.start();
    s.fineResolution = fine.resolution();
    s.coarseResolution = coarse.resolution();
    s.drone = SeriesMatrix{n, fine.bins()};
    s.ld = SeriesMatrix{n, coarse.bins()};
    s.segment = SeriesMatrix{n, coarse.bins()};
    s.distance = SeriesMatrix{n, coarse.bins(), 0.0};
    s.time = SeriesMatrix{n, coarse.bins(), 0.0};
    for (std::size_t id{0}; id < n; ++id) {
      auto const d{fine.speedSeries(id)};
      std::copy(d.begin(), d.end(), s.drone.row(id).begin());
      auto const p{coarse.pointSeries(id)};
      std::copy(p.begin(), p.end(), s.ld.row(id).begin());
      auto const v{coarse.speedSeries(id)};
      std::copy(v.begin(), v.end(), s.segment.row(id).begin());
      for (std::size_t b{0}; b < coarse.bins(); ++b) {
        s.distance(id, b) = coarse.sums(id, b).distance;
        s.time(id, b) = coarse.sums(id, b).time;
      }
    }
    return s;
  }

  std::vector<double> missingFractions(SeriesMatrix const& series) {
    std::vector<double> out(series.rows, 1.0);
    for (std::size_t r{0}; r < series.rows; ++r) {
      if (series.cols == 0) {
        continue;
      }
      auto const row{series.row(r)};
      auto const missing{std::count_if(row.begin(), row.end(), [](double v) { return isMissing(v); })};
      out[r] = static_cast<double>(missing) / static_cast<double>(series.cols);
    }
    return out;
  }

  std::vector<int> placeLoopDetectors(std::span<double const> missingFraction, double coverage,
                                      std::uint64_t seed) {
    checkCoverage(coverage);
    auto const total{missingFraction.size()};
    std::vector<int> all(total);
    std::iota(all.begin(), all.end(), 0);
    if (coverage == 1.0) {
      return all;
    }
    std::vector<int> pool;
    for (std::size_t i{0}; i < total; ++i) {
      if (missingFraction[i] <= kMaxInvalidShare) {
        pool.push_back(static_cast<int>(i));
      }
    }
    auto const wanted{siteCount(coverage, total)};
    if (pool.size() < wanted) {
      spdlog::warn("only {} segments pass the validity filter, {} detectors requested", pool.size(), wanted);
    }
    Rng rng{seed};
    return sampleWithoutReplacement(std::move(pool), wanted, rng);
  }

  std::vector<std::vector<int>> droneSchedule(std::size_t cellCount, double coverage, std::size_t slots,
                                              std::uint64_t seed) {
    checkCoverage(coverage);
    std::vector<std::vector<int>> out(slots);
    if (cellCount == 0) {
      return out;
    }
    std::vector<int> cells(cellCount);
    std::iota(cells.begin(), cells.end(), 0);
    auto const n{siteCount(coverage, cellCount)};
    Rng rng{seed};
    for (auto& slot : out) {
      slot = sampleWithoutReplacement(cells, n, rng);
    }
    return out;
  }

  void applyMultiplicativeNoise(std::span<double> values, double sigma, Rng& rng) {
    if (sigma < 0.0) {
      throw std::invalid_argument("noise sigma must be non-negative");
    }
    if (sigma == 0.0) {
      return;
    }
    for (auto& v : values) {
      if (isMissing(v)) {
        continue;
      }
      v = std::max(0.0, v * (1.0 + sigma * standardNormal(rng)));
    }
  }

  std::vector<std::vector<int>> sessionDrones(SensorLayout const& layout, std::size_t cellCount,
                                              std::size_t slots, std::uint64_t session) {
    return droneSchedule(cellCount, layout.droneCoverage, slots, deriveSeed(layout.seed, session));
  }

  SeriesMatrix regionalSeries(SessionSeries const& s, roadnet::RegionMap const& regions,
                              SeriesMatrix const* observed) {
    if (regions.assignment.size() != s.segments()) {
      throw std::invalid_argument("region map does not cover the session's segments");
    }
    auto const steps{s.coarseSteps()};
    auto const k{static_cast<std::size_t>(regions.regionCount)};
    SeriesMatrix dist{k, steps, 0.0};
    SeriesMatrix time{k, steps, 0.0};
    for (std::size_t seg{0}; seg < s.segments(); ++seg) {
      auto const r{static_cast<std::size_t>(regions.assignment[seg])};
      for (std::size_t t{0}; t < steps; ++t) {
        if (observed && isMissing((*observed)(seg, t))) {
          continue;
        }
        dist(r, t) += s.distance(seg, t);
        time(r, t) += s.time(seg, t);
      }
    }
    SeriesMatrix out{k, steps};
    for (std::size_t r{0}; r < k; ++r) {
      for (std::size_t t{0}; t < steps; ++t) {
        if (time(r, t) > 0.0) {
          out(r, t) = dist(r, t) / time(r, t);
        }
      }
    }
    return out;
  }

  ObservedSession observeSession(SessionSeries const& series, ObservationMode mode,
                                 SensorLayout const& layout, roadnet::GridMap const& grid,
                                 roadnet::RegionMap const& regions, NoiseSpec const& noise,
                                 std::uint64_t session) {
    ObservedSession out;
    out.segEval = series.segment;
    out.regEval = regionalSeries(series, regions);
    if (mode == ObservationMode::Full) {
      out.droneInput = series.drone;
      out.ldInput = series.ld;
      out.segTrain = out.segEval;
      out.regTrain = out.regEval;
      return out;
    }
    if (grid.segmentCell.size() != series.segments()) {
      throw std::invalid_argument("grid map does not cover the session's segments");
    }
    auto const n{series.segments()};
    auto const coarse{series.coarseSteps()};
    auto const perSlot{series.fineSteps() / std::max<std::size_t>(coarse, 1)};
    auto const drones{sessionDrones(layout, grid.cells.size(), coarse, session)};

    std::vector<char> hasLd(n, 0);
    for (int s : layout.ldSegments) {
      hasLd.at(static_cast<std::size_t>(s)) = 1;
    }
    // seen(seg, slot) = 1 where a drone hovers over the segment's cell.
    SeriesMatrix droneSeen{n, coarse, 0.0};
    for (std::size_t slot{0}; slot < coarse; ++slot) {
      std::vector<char> occupied(grid.cells.size(), 0);
      for (int c : drones[slot]) {
        occupied[static_cast<std::size_t>(c)] = 1;
      }
      for (std::size_t seg{0}; seg < n; ++seg) {
        droneSeen(seg, slot) = occupied[static_cast<std::size_t>(grid.segmentCell[seg])] ? 1.0 : 0.0;
      }
    }

    out.droneInput = SeriesMatrix{n, series.fineSteps()};
    if (mode == ObservationMode::PN) {
      for (std::size_t seg{0}; seg < n; ++seg) {
        for (std::size_t f{0}; f < series.fineSteps(); ++f) {
          auto const slot{std::min(f / std::max<std::size_t>(perSlot, 1), coarse - 1)};
          if (droneSeen(seg, slot) > 0.0) {
            out.droneInput(seg, f) = series.drone(seg, f);
          }
        }
      }
    }
    out.ldInput = SeriesMatrix{n, coarse};
    for (std::size_t seg{0}; seg < n; ++seg) {
      if (hasLd[seg]) {
        for (std::size_t t{0}; t < coarse; ++t) {
          out.ldInput(seg, t) = series.ld(seg, t);
        }
      }
    }
    out.segTrain = SeriesMatrix{n, coarse};
    for (std::size_t seg{0}; seg < n; ++seg) {
      for (std::size_t t{0}; t < coarse; ++t) {
        if (hasLd[seg] || droneSeen(seg, t) > 0.0) {
          out.segTrain(seg, t) = series.segment(seg, t);
        }
      }
    }
    out.regTrain = regionalSeries(series, regions, &out.segTrain);

    Rng rng{deriveSeed(noise.seed, session)};
    applyMultiplicativeNoise(out.droneInput.values, noise.sigmaDrone, rng);
    applyMultiplicativeNoise(out.ldInput.values, noise.sigmaLd, rng);
    applyMultiplicativeNoise(out.segTrain.values, noise.sigmaLabel, rng);
    applyMultiplicativeNoise(out.regTrain.values, noise.sigmaLabel, rng);
    return out;
  }

  nlohmann::json layoutJson(SensorLayout const& layout, std::vector<std::vector<int>> const& drones,
                            double slotStart, double slotSeconds) {
    nlohmann::json j = layout;
    auto slots = nlohmann::json::object();
    for (std::size_t i{0}; i < drones.size(); ++i) {
      auto const t{slotStart + slotSeconds * static_cast<double>(i)};
      slots[std::to_string(static_cast<long long>(std::llround(t)))] = drones[i];
    }
    j["drones"] = slots;
    return j;
  }

  void to_json(nlohmann::json& j, SensorLayout const& layout) {
    j = nlohmann::json{{"ld_segments", layout.ldSegments},
                       {"coverage", {{"ld", layout.ldCoverage}, {"drone", layout.droneCoverage}}},
                       {"seeds", {{"layout", layout.seed}}}};
  }

  void from_json(nlohmann::json const& j, SensorLayout& layout) {
    layout.ldSegments = j.at("ld_segments").get<std::vector<int>>();
    layout.ldCoverage = j.at("coverage").at("ld").get<double>();
    layout.droneCoverage = j.at("coverage").at("drone").get<double>();
    layout.seed = j.at("seeds").at("layout").get<std::uint64_t>();
  }

}  // namespace mst::sensors
