#include "mst/simcore.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <deque>
#include <istream>
#include <limits>
#include <ostream>
#include <queue>
#include <stdexcept>
#include <string>

#include <spdlog/spdlog.h>

namespace mst::sim {

  double ODMatrix::total() const noexcept {
    double t{0.0};
    for (auto c : m_counts) {
      t += c;
    }
    return t;
  }

  AugmentedOD augmentOd(ODMatrix const& od, std::uint64_t seed, AugmentParams const& params) {
    if (params.zeroProb < 0.0 || params.zeroProb > 1.0) {
      throw std::invalid_argument("zero probability must lie in [0, 1]");
    }
    if (params.pctRange < 0.0 || params.pctRange > 1.0) {
      throw std::invalid_argument("percentage range must lie in [0, 1]");
    }
    if (params.scaleMin < 0.0 || params.scaleMax < params.scaleMin) {
      throw std::invalid_argument("invalid demand scale interval");
    }
    Rng rng{seed};
    AugmentedOD result{ODMatrix{od.size()}, 1.0};
    for (std::size_t o{0}; o < od.size(); ++o) {
      for (std::size_t d{0}; d < od.size(); ++d) {
        auto const v{od.at(o, d)};
        if (v < 0.0 || std::isnan(v)) {
          throw std::invalid_argument("OD entries must be non-negative");
        }
        if (v == 0.0) {
          continue;
        }
        // Two draws per entry regardless of the branch keep the stream aligned across settings.
        auto const uZero{uniform01(rng)};
        auto const uPct{uniform01(rng)};
        if (uZero < params.zeroProb) {
          continue;
        }
        result.od.at(o, d) = v * (1.0 + params.pctRange * (2.0 * uPct - 1.0));
      }
    }
    result.demandScale = params.scaleMin == params.scaleMax
                             ? params.scaleMin
                             : uniform(rng, params.scaleMin, params.scaleMax);
    for (std::size_t o{0}; o < od.size(); ++o) {
      for (std::size_t d{0}; d < od.size(); ++d) {
        result.od.at(o, d) *= result.demandScale;
      }
    }
    return result;
  }

  ODMatrix randomBaseOd(roadnet::RoadGraph const& graph, double totalTrips, double zeroFraction,
                        std::uint64_t seed) {
    auto const n{graph.intersections().size()};
    ODMatrix od{n};
    Rng rng{seed};
    double sum{0.0};
    for (std::size_t o{0}; o < n; ++o) {
      for (std::size_t d{0}; d < n; ++d) {
        auto const uZero{uniform01(rng)};
        auto const uWeight{uniform01(rng)};
        if (o == d || uZero < zeroFraction) {
          continue;
        }
        // Heavy-ish tail so that a few corridors dominate.
        auto const w{std::exp(1.2 * standardNormal(rng)) * (0.5 + uWeight)};
        od.at(o, d) = w;
        sum += w;
      }
    }
    if (sum > 0.0) {
      for (std::size_t o{0}; o < n; ++o) {
        for (std::size_t d{0}; d < n; ++d) {
          od.at(o, d) *= totalTrips / sum;
        }
      }
    }
    return od;
  }

  bool SignalPlan::isGreen(roadnet::Approach approach, double t) const noexcept {
    auto phase{std::fmod(t - offset, cycle)};
    if (phase < 0.0) {
      phase += cycle;
    }
    auto const& w{green[static_cast<std::size_t>(approach)]};
    return phase >= w.start && phase < w.end;
  }

  SignalPlan SignalPlan::twoPhase(double cycle, double offset) {
    SignalPlan p;
    p.cycle = cycle;
    p.offset = offset;
    p.green = {GreenWindow{0.0, 0.5 * cycle}, GreenWindow{0.5 * cycle, cycle}};
    return p;
  }

  SignalPlan SignalPlan::alwaysGreen() {
    SignalPlan p;
    p.cycle = 1.0;
    p.green = {GreenWindow{0.0, 1.0}, GreenWindow{0.0, 1.0}};
    return p;
  }

  SignalPlan SignalPlan::alwaysRed() {
    SignalPlan p;
    p.cycle = 1.0;
    p.green = {GreenWindow{0.0, 0.0}, GreenWindow{0.0, 0.0}};
    return p;
  }

  SignalMap defaultSignals(roadnet::RoadGraph const& graph, std::uint64_t seed, double cycle) {
    Rng rng{seed};
    SignalMap signals;
    signals.reserve(graph.intersections().size());
    for (std::size_t i{0}; i < graph.intersections().size(); ++i) {
      signals.push_back(SignalPlan::twoPhase(cycle, uniform(rng, 0.0, cycle)));
    }
    return signals;
  }

  namespace {

    /// Segment routes between intersections by free-flow travel time.
    class RouteTable {
    public:
      explicit RouteTable(roadnet::RoadGraph const& graph) : m_graph{graph} {
        auto const n{graph.intersections().size()};
        m_outgoing.assign(n, {});
        for (auto const& s : graph.segments()) {
          m_outgoing[static_cast<std::size_t>(s.fromNode)].push_back(s.id);
        }
        m_pred.assign(n, {});
      }

      /// Empty when unreachable.
      std::vector<int> route(int origin, int destination) {
        auto& pred{m_pred[static_cast<std::size_t>(origin)]};
        if (pred.empty()) {
          pred = dijkstra(origin);
        }
        std::vector<int> path;
        int node{destination};
        while (node != origin) {
          auto const seg{pred[static_cast<std::size_t>(node)]};
          if (seg < 0) {
            return {};
          }
          path.push_back(seg);
          node = m_graph.segment(seg).fromNode;
        }
        std::reverse(path.begin(), path.end());
        return path;
      }

    private:
      std::vector<int> dijkstra(int origin) const {
        auto const n{m_outgoing.size()};
        std::vector<double> dist(n, std::numeric_limits<double>::infinity());
        std::vector<int> pred(n, -1);
        using Item = std::pair<double, int>;
        std::priority_queue<Item, std::vector<Item>, std::greater<>> heap;
        dist[static_cast<std::size_t>(origin)] = 0.0;
        heap.emplace(0.0, origin);
        while (!heap.empty()) {
          auto const [d, u] = heap.top();
          heap.pop();
          if (d > dist[static_cast<std::size_t>(u)]) {
            continue;
          }
          for (int segId : m_outgoing[static_cast<std::size_t>(u)]) {
            auto const& s{m_graph.segment(segId)};
            auto const nd{d + s.length / s.freeFlowSpeed};
            if (nd < dist[static_cast<std::size_t>(s.toNode)]) {
              dist[static_cast<std::size_t>(s.toNode)] = nd;
              pred[static_cast<std::size_t>(s.toNode)] = segId;
              heap.emplace(nd, s.toNode);
            }
          }
        }
        return pred;
      }

      roadnet::RoadGraph const& m_graph;
      std::vector<std::vector<int>> m_outgoing;
      std::vector<std::vector<int>> m_pred;
    };

  }  // namespace

  std::vector<Departure> sampleDepartures(ODMatrix const& od, std::uint64_t seed, SimParams const& p) {
      auto const weighted{p.warmup * p.warmupRateFactor + p.mainDemand};
      std::vector<Departure> spawns;
      if (weighted <= 0.0) {
        return spawns;
      }
      auto const rateAt = [&](double base, double t) {
        if (t < p.warmup) {
          return base * p.warmupRateFactor;
        }
        return t < p.demandEnd() ? base : 0.0;
      };
      for (std::size_t o{0}; o < od.size(); ++o) {
        for (std::size_t d{0}; d < od.size(); ++d) {
          auto const count{od.at(o, d)};
          if (count <= 0.0 || o == d) {
            continue;
          }
          auto const base{count / weighted};
          auto const streams{static_cast<std::size_t>(
              std::max(1.0, std::ceil(base / p.candidateRate)))};
          for (std::size_t s{0}; s < streams; ++s) {
            // Streams fill up in order, so raising the demand only adds acceptances.
            auto const perStream{std::clamp(base - static_cast<double>(s) * p.candidateRate, 0.0,
                                            p.candidateRate)};
            Rng rng{deriveSeed(seed, (o * od.size() + d) * 1024 + s)};
            double t{0.0};
            while (true) {
              auto u{uniform01(rng)};
              while (u <= 0.0) {
                u = uniform01(rng);
              }
              t += -std::log(u) / p.candidateRate;
              if (t >= p.demandEnd()) {
                break;
              }
              if (uniform01(rng) * p.candidateRate < rateAt(perStream, t)) {
                spawns.push_back({t, static_cast<int>(o), static_cast<int>(d)});
              }
            }
          }
        }
      }
      std::sort(spawns.begin(), spawns.end(), [](Departure const& a, Departure const& b) {
        if (a.time != b.time) {
          return a.time < b.time;
        }
        if (a.origin != b.origin) {
          return a.origin < b.origin;
        }
        return a.destination < b.destination;
      });
      return spawns;
    }

  namespace {

    struct Vehicle {
      std::vector<int> route;
      std::size_t leg{0};
      double x{0.0};
      double newX{0.0};
      SegmentVisit visit;
    };

    struct Entry {
      double time;
      int vehicle;
    };

  }  // namespace

  SessionStats simulateSession(roadnet::RoadGraph const& graph, ODMatrix const& od,
                               SignalMap const& signals, std::uint64_t seed, SimParams const& params,
                               VisitSink const& sink, std::vector<VehicleSummary>* vehicles) {
    auto const nodeCount{graph.intersections().size()};
    if (od.size() != nodeCount) {
      throw std::invalid_argument("OD matrix size " + std::to_string(od.size()) +
                                  " does not match " + std::to_string(nodeCount) + " centroids");
    }
    return simulateDepartures(graph, sampleDepartures(od, seed, params), signals, params, sink,
                              vehicles);
  }

  SessionStats simulateDepartures(roadnet::RoadGraph const& graph, std::span<Departure const> spawns,
                                  SignalMap const& signals, SimParams const& params,
                                  VisitSink const& sink, std::vector<VehicleSummary>* vehicles) {
    auto const nodeCount{graph.intersections().size()};
    if (signals.size() < nodeCount) {
      throw std::invalid_argument("signal map must cover every intersection");
    }
    if (!(params.step > 0.0)) {
      throw std::invalid_argument("simulation step must be positive");
    }

    for (std::size_t i{1}; i < spawns.size(); ++i) {
      if (spawns[i].time < spawns[i - 1].time) {
        throw std::invalid_argument("departures must be sorted by time");
      }
    }
    SessionStats stats;
    RouteTable routes{graph};

    std::vector<Vehicle> fleet;
    std::vector<VehicleSummary> summaries;
    std::vector<std::size_t> pending;  // fleet indices in spawn order
    std::vector<std::vector<char>> warned(nodeCount);
    for (auto const& sp : spawns) {
      if (sp.origin < 0 || sp.destination < 0 || static_cast<std::size_t>(sp.origin) >= nodeCount ||
          static_cast<std::size_t>(sp.destination) >= nodeCount) {
        throw std::invalid_argument("departure references an unknown centroid");
      }
      auto path{routes.route(sp.origin, sp.destination)};
      if (path.empty()) {
        auto& w{warned[static_cast<std::size_t>(sp.origin)]};
        if (w.empty()) {
          w.assign(nodeCount, 0);
        }
        if (!w[static_cast<std::size_t>(sp.destination)]) {
          w[static_cast<std::size_t>(sp.destination)] = 1;
          ++stats.skippedPairs;
          spdlog::warn("no route from centroid {} to {}; skipping pair", sp.origin, sp.destination);
        }
        continue;
      }
      Vehicle v;
      v.route = std::move(path);
      fleet.push_back(std::move(v));
      summaries.push_back({static_cast<int>(summaries.size()), sp.origin, sp.destination, sp.time, kMissing});
      pending.push_back(fleet.size() - 1);
    }
    stats.spawned = fleet.size();

    auto const segCount{graph.size()};
    std::vector<std::deque<int>> queues(segCount);
    std::vector<double> lastDischarge(segCount, -std::numeric_limits<double>::infinity());
    auto const dt{params.step};
    auto const h{params.saturationHeadway};
    auto const jam{params.jamSpacing};
    constexpr double kEps{1e-9};

    auto const allowed = [&](int segId, double when) {
      auto const& s{graph.segment(segId)};
      return signals[static_cast<std::size_t>(s.signal)].isGreen(s.approach, when) &&
             when >= lastDischarge[static_cast<std::size_t>(segId)] + h - kEps;
    };

    std::size_t nextSpawn{0};
    std::size_t active{0};
    std::vector<Entry> entries;
    std::vector<Entry> exits;
    long long k{0};
    double t{0.0};
    while (true) {
      auto const t1{static_cast<double>(k + 1) * dt};
      exits.clear();
      entries.clear();

      // Phase 1: move vehicles that were on a segment at time t.
      for (std::size_t segIdx{0}; segIdx < segCount; ++segIdx) {
        auto& q{queues[segIdx]};
        if (q.empty()) {
          continue;
        }
        auto const segId{static_cast<int>(segIdx)};
        auto const& seg{graph.segment(segId)};
        auto const L{seg.length};
        auto const v{seg.freeFlowSpeed};
        bool front{true};
        double limit{L};
        std::size_t departed{0};
        for (int vid : q) {
          auto& veh{fleet[static_cast<std::size_t>(vid)]};
          if (front) {
            bool left{false};
            if (veh.x >= L - kEps) {
              auto const when{t + 0.5 * dt};
              if (allowed(segId, when)) {
                exits.push_back({when, vid});
                left = true;
              } else {
                veh.newX = L;
              }
            } else {
              auto const tau{t + (L - veh.x) / v};
              if (tau <= t1 + kEps) {
                auto const when{std::min(tau, t1)};
                if (allowed(segId, when)) {
                  exits.push_back({when, vid});
                  left = true;
                } else {
                  veh.newX = L;
                }
              } else {
                veh.newX = veh.x + v * dt;
              }
            }
            if (left) {
              lastDischarge[segIdx] = exits.back().time;
              ++departed;
              continue;
            }
            front = false;
          } else {
            veh.newX = std::max(veh.x, std::min(veh.x + v * dt, limit));
          }
          limit = veh.newX - jam;
        }
        for (std::size_t i{0}; i < departed; ++i) {
          q.pop_front();
        }
        for (int vid : q) {
          auto& veh{fleet[static_cast<std::size_t>(vid)]};
          veh.x = veh.newX;
          veh.visit.records.push_back({t1, veh.x});
        }
      }

      // Phase 2: departures hand over to the next segment or leave the network.
      for (auto const& e : exits) {
        auto& veh{fleet[static_cast<std::size_t>(e.vehicle)]};
        veh.visit.tOut = e.time;
        sink(std::move(veh.visit));
        veh.visit = SegmentVisit{};
        ++veh.leg;
        if (veh.leg == veh.route.size()) {
          summaries[static_cast<std::size_t>(e.vehicle)].arrival = e.time;
          ++stats.arrived;
          --active;
          veh.route.clear();
          veh.route.shrink_to_fit();
        } else {
          entries.push_back(e);
        }
      }
      while (nextSpawn < pending.size() &&
             summaries[pending[nextSpawn]].departure <= t1) {
        auto const vid{static_cast<int>(pending[nextSpawn])};
        entries.push_back({summaries[pending[nextSpawn]].departure, vid});
        ++nextSpawn;
        ++active;
      }
      std::sort(entries.begin(), entries.end(), [](Entry const& a, Entry const& b) {
        return a.time != b.time ? a.time < b.time : a.vehicle < b.vehicle;
      });
      for (auto const& e : entries) {
        auto& veh{fleet[static_cast<std::size_t>(e.vehicle)]};
        auto const segId{veh.route[veh.leg]};
        auto const& seg{graph.segment(segId)};
        auto& q{queues[static_cast<std::size_t>(segId)]};
        auto x{seg.freeFlowSpeed * (t1 - e.time)};
        if (!q.empty()) {
          x = std::min(x, fleet[static_cast<std::size_t>(q.back())].x - jam);
        }
        x = std::clamp(x, 0.0, seg.length);
        veh.x = x;
        veh.visit = SegmentVisit{e.vehicle, segId, e.time, kMissing, {}};
        if (t1 > e.time) {
          veh.visit.records.push_back({t1, x});
        }
        q.push_back(e.vehicle);
      }

      ++k;
      t = t1;
      if (t >= params.duration - kEps) {
        break;
      }
      if (active == 0 && nextSpawn == pending.size()) {
        break;
      }
    }

    stats.endTime = t;
    stats.remaining = active;
    for (std::size_t segIdx{0}; segIdx < segCount; ++segIdx) {
      for (int vid : queues[segIdx]) {
        sink(std::move(fleet[static_cast<std::size_t>(vid)].visit));
      }
    }
    for (std::size_t i{0}; i < nextSpawn; ++i) {
      auto const& s{summaries[pending[i]]};
      auto const end{s.arrived() ? s.arrival : t};
      stats.vehicleHours += (end - s.departure) / 3600.0;
    }
    if (vehicles) {
      *vehicles = std::move(summaries);
    }
    return stats;
  }

  SessionTrajectories simulateSession(roadnet::RoadGraph const& graph, ODMatrix const& od,
                                      SignalMap const& signals, std::uint64_t seed,
                                      SimParams const& params) {
    SessionTrajectories out;
    out.step = params.step;
    out.duration = params.duration;
    out.stats = simulateSession(
        graph, od, signals, seed, params,
        [&out](SegmentVisit&& v) { out.visits.push_back(std::move(v)); }, &out.vehicles);
    return out;
  }

  std::string formatNumber(double v) {
    if (isMissing(v)) {
      return {};
    }
    char buf[32];
    auto const res{std::to_chars(buf, buf + sizeof(buf), v)};
    return std::string(buf, res.ptr);
  }

  void writeTrajectoryRows(std::ostream& out, SegmentVisit const& visit) {
    auto const prefix{std::to_string(visit.vehicle) + ',' + std::to_string(visit.segment) + ','};
    for (auto const& r : visit.records) {
      out << prefix << formatNumber(r.t) << ',' << formatNumber(r.x) << '\n';
    }
  }

  void writeVisitRow(std::ostream& out, SegmentVisit const& visit) {
    out << visit.vehicle << ',' << visit.segment << ',' << formatNumber(visit.tIn) << ','
        << formatNumber(visit.tOut) << '\n';
  }

  namespace {
    std::vector<std::string_view> splitCsv(std::string_view line) {
      std::vector<std::string_view> fields;
      std::size_t start{0};
      while (true) {
        auto const pos{line.find(',', start)};
        if (pos == std::string_view::npos) {
          fields.push_back(line.substr(start));
          break;
        }
        fields.push_back(line.substr(start, pos - start));
        start = pos + 1;
      }
      return fields;
    }

    template <typename T>
    T parseField(std::string_view s, char const* what) {
      T value{};
      while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) {
        s.remove_suffix(1);
      }
      auto const res{std::from_chars(s.data(), s.data() + s.size(), value)};
      if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
        throw std::runtime_error(std::string{"malformed "} + what + " field '" + std::string{s} + "'");
      }
      return value;
    }
  }  // namespace

  void readTrajectoryCsv(std::istream& trajectories, std::istream& visits, VisitSink const& sink) {
    std::string vLine;
    std::string tLine;
    if (!std::getline(visits, vLine) || vLine.rfind(kVisitHeader, 0) != 0) {
      throw std::runtime_error("visit CSV header missing");
    }
    if (!std::getline(trajectories, tLine) || tLine.rfind(kTrajectoryHeader, 0) != 0) {
      throw std::runtime_error("trajectory CSV header missing");
    }
    bool haveRecord{false};
    struct Row {
      int vehicle;
      int segment;
      double t;
      double x;
    } row{};
    auto const nextRecord = [&] {
      while (std::getline(trajectories, tLine)) {
        if (tLine.empty()) {
          continue;
        }
        auto const f{splitCsv(tLine)};
        if (f.size() != 4) {
          throw std::runtime_error("trajectory row must have 4 fields");
        }
        row = {parseField<int>(f[0], "vehicle_id"), parseField<int>(f[1], "segment_id"),
               parseField<double>(f[2], "t"), parseField<double>(f[3], "x")};
        return true;
      }
      return false;
    };
    haveRecord = nextRecord();
    while (std::getline(visits, vLine)) {
      if (vLine.empty()) {
        continue;
      }
      auto const f{splitCsv(vLine)};
      if (f.size() != 4) {
        throw std::runtime_error("visit row must have 4 fields");
      }
      SegmentVisit visit;
      visit.vehicle = parseField<int>(f[0], "vehicle_id");
      visit.segment = parseField<int>(f[1], "segment_id");
      visit.tIn = parseField<double>(f[2], "t_in");
      auto tOut{f[3]};
      while (!tOut.empty() && tOut.back() == '\r') {
        tOut.remove_suffix(1);
      }
      visit.tOut = tOut.empty() ? kMissing : parseField<double>(tOut, "t_out");
      while (haveRecord && row.vehicle == visit.vehicle && row.segment == visit.segment) {
        visit.records.push_back({row.t, row.x});
        haveRecord = nextRecord();
      }
      sink(std::move(visit));
    }
    if (haveRecord) {
      throw std::runtime_error("trajectory rows left over after the last visit");
    }
  }

}  // namespace mst::sim
