#include "mst/roadnet.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <map>
#include <set>
#include <stdexcept>
#include <string>

namespace mst::roadnet {

  namespace {
    void validateSegment(RoadSegment const& s, std::size_t expectedId, std::size_t nodeCount) {
      if (s.id != static_cast<int>(expectedId)) {
        throw std::invalid_argument("segment ids must be dense and ordered, got " +
                                    std::to_string(s.id) + " at position " +
                                    std::to_string(expectedId));
      }
      if (!(s.length > 0.0)) {
        throw std::invalid_argument("segment " + std::to_string(s.id) + " has non-positive length");
      }
      if (!(s.freeFlowSpeed > 0.0)) {
        throw std::invalid_argument("segment " + std::to_string(s.id) +
                                    " has non-positive free-flow speed");
      }
      if (!(s.detectorOffset > 0.0 && s.detectorOffset < s.length)) {
        throw std::invalid_argument("segment " + std::to_string(s.id) +
                                    " detector offset must lie strictly inside the segment");
      }
      auto const inRange = [nodeCount](int n) {
        return n >= 0 && static_cast<std::size_t>(n) < nodeCount;
      };
      if (nodeCount > 0 && (!inRange(s.fromNode) || !inRange(s.toNode))) {
        throw std::invalid_argument("segment " + std::to_string(s.id) +
                                    " references an unknown intersection");
      }
    }
  }  // namespace

  RoadGraph::RoadGraph(std::vector<Point2> intersections,
                       std::vector<RoadSegment> segments,
                       std::vector<std::pair<int, int>> edges)
      : m_intersections{std::move(intersections)}, m_segments{std::move(segments)} {
    auto const n{m_segments.size()};
    for (std::size_t i{0}; i < n; ++i) {
      validateSegment(m_segments[i], i, m_intersections.size());
    }
    std::set<std::pair<int, int>> unique;
    for (auto [a, b] : edges) {
      if (a == b) {
        throw std::invalid_argument("self-loop on segment " + std::to_string(a));
      }
      if (a < 0 || b < 0 || static_cast<std::size_t>(a) >= n || static_cast<std::size_t>(b) >= n) {
        throw std::invalid_argument("edge references an unknown segment");
      }
      if (a > b) {
        std::swap(a, b);
      }
      if (!unique.emplace(a, b).second) {
        throw std::invalid_argument("duplicate edge " + std::to_string(a) + "-" + std::to_string(b));
      }
    }
    m_edges.assign(unique.begin(), unique.end());
    m_neighbors.assign(n, {});
    for (auto const& [a, b] : m_edges) {
      m_neighbors[static_cast<std::size_t>(a)].push_back(b);
      m_neighbors[static_cast<std::size_t>(b)].push_back(a);
    }
    for (auto& nb : m_neighbors) {
      std::sort(nb.begin(), nb.end());
    }
    // Successor lists only make sense when segments carry intersections.
    m_successors.assign(n, {});
    if (!m_intersections.empty()) {
      std::vector<std::vector<int>> outgoing(m_intersections.size());
      for (auto const& s : m_segments) {
        outgoing[static_cast<std::size_t>(s.fromNode)].push_back(s.id);
      }
      for (auto const& s : m_segments) {
        for (int next : outgoing[static_cast<std::size_t>(s.toNode)]) {
          if (m_segments[static_cast<std::size_t>(next)].toNode != s.fromNode) {
            m_successors[static_cast<std::size_t>(s.id)].push_back(next);
          }
        }
      }
    }
  }

  RoadGraph RoadGraph::connectAtIntersections(std::vector<Point2> intersections,
                                              std::vector<RoadSegment> segments) {
    std::vector<std::vector<int>> incident(intersections.size());
    for (auto const& s : segments) {
      incident.at(static_cast<std::size_t>(s.fromNode)).push_back(s.id);
      incident.at(static_cast<std::size_t>(s.toNode)).push_back(s.id);
    }
    std::set<std::pair<int, int>> edges;
    for (auto const& group : incident) {
      for (std::size_t i{0}; i < group.size(); ++i) {
        for (std::size_t j{i + 1}; j < group.size(); ++j) {
          auto a{group[i]};
          auto b{group[j]};
          if (a == b) {
            continue;
          }
          edges.emplace(std::min(a, b), std::max(a, b));
        }
      }
    }
    return RoadGraph{std::move(intersections),
                     std::move(segments),
                     std::vector<std::pair<int, int>>(edges.begin(), edges.end())};
  }

  double RoadGraph::totalLength() const noexcept {
    double total{0.0};
    for (auto const& s : m_segments) {
      total += s.length;
    }
    return total;
  }

  bool RoadGraph::isConnected() const {
    if (m_segments.empty()) {
      return true;
    }
    std::vector<char> seen(m_segments.size(), 0);
    std::deque<int> queue{0};
    seen[0] = 1;
    std::size_t count{1};
    while (!queue.empty()) {
      auto const u{queue.front()};
      queue.pop_front();
      for (int v : m_neighbors[static_cast<std::size_t>(u)]) {
        if (!seen[static_cast<std::size_t>(v)]) {
          seen[static_cast<std::size_t>(v)] = 1;
          ++count;
          queue.push_back(v);
        }
      }
    }
    return count == m_segments.size();
  }

  RoadGraph buildGridNetwork(GridSpec const& spec) {
    if (spec.rows < 2 || spec.cols < 2) {
      throw std::invalid_argument("grid network needs at least 2 rows and 2 columns");
    }
    if (!(spec.minLength > 0.0) || spec.maxLength < spec.minLength) {
      throw std::invalid_argument("invalid segment length range");
    }
    Rng rng{spec.seed};
    auto const gap = [&] { return uniform(rng, spec.minLength, spec.maxLength); };
    std::vector<double> xs{0.0};
    for (int c{1}; c < spec.cols; ++c) {
      xs.push_back(xs.back() + gap());
    }
    std::vector<double> ys{0.0};
    for (int r{1}; r < spec.rows; ++r) {
      ys.push_back(ys.back() + gap());
    }
    std::vector<Point2> nodes;
    for (int r{0}; r < spec.rows; ++r) {
      for (int c{0}; c < spec.cols; ++c) {
        nodes.push_back({xs[static_cast<std::size_t>(c)], ys[static_cast<std::size_t>(r)]});
      }
    }
    auto const nodeId = [&](int r, int c) { return r * spec.cols + c; };
    // Opposing directions share a block; shift midpoints 3 m to the right-hand side so that
    // they remain distinct points for clustering.
    constexpr double kLaneOffset{3.0};
    std::vector<RoadSegment> segments;
    auto const addSegment = [&](int from, int to, Approach approach) {
      auto const a{nodes[static_cast<std::size_t>(from)]};
      auto const b{nodes[static_cast<std::size_t>(to)]};
      auto const length{std::sqrt(squaredDistance(a, b))};
      auto const ux{(b.x - a.x) / length};
      auto const uy{(b.y - a.y) / length};
      RoadSegment s;
      s.id = static_cast<int>(segments.size());
      s.length = length;
      s.midpoint = {0.5 * (a.x + b.x) + kLaneOffset * uy, 0.5 * (a.y + b.y) - kLaneOffset * ux};
      s.freeFlowSpeed = spec.freeFlowSpeed;
      s.detectorOffset = 0.5 * length;
      s.signal = to;
      s.fromNode = from;
      s.toNode = to;
      s.approach = approach;
      segments.push_back(s);
    };
    for (int r{0}; r < spec.rows; ++r) {
      for (int c{0}; c + 1 < spec.cols; ++c) {
        addSegment(nodeId(r, c), nodeId(r, c + 1), Approach::EastWest);
        addSegment(nodeId(r, c + 1), nodeId(r, c), Approach::EastWest);
      }
    }
    for (int c{0}; c < spec.cols; ++c) {
      for (int r{0}; r + 1 < spec.rows; ++r) {
        addSegment(nodeId(r, c), nodeId(r + 1, c), Approach::NorthSouth);
        addSegment(nodeId(r + 1, c), nodeId(r, c), Approach::NorthSouth);
      }
    }
    return RoadGraph::connectAtIntersections(std::move(nodes), std::move(segments));
  }

  NeighborSets kHopAdjacency(NeighborSets const& oneHop, int k) {
    if (k < 0) {
      throw std::invalid_argument("hop count must be non-negative");
    }
    auto const n{oneHop.size()};
    NeighborSets result(n);
    std::vector<int> depth(n, -1);
    std::vector<int> touched;
    for (std::size_t src{0}; src < n; ++src) {
      std::deque<int> queue{static_cast<int>(src)};
      depth[src] = 0;
      touched.assign(1, static_cast<int>(src));
      while (!queue.empty()) {
        auto const u{queue.front()};
        queue.pop_front();
        if (depth[static_cast<std::size_t>(u)] == k) {
          continue;
        }
        for (int v : oneHop[static_cast<std::size_t>(u)]) {
          if (depth[static_cast<std::size_t>(v)] < 0) {
            depth[static_cast<std::size_t>(v)] = depth[static_cast<std::size_t>(u)] + 1;
            touched.push_back(v);
            queue.push_back(v);
          }
        }
      }
      std::sort(touched.begin(), touched.end());
      result[src] = touched;
      for (int v : touched) {
        depth[static_cast<std::size_t>(v)] = -1;
      }
    }
    return result;
  }

  NeighborSets kHopAdjacency(RoadGraph const& graph, int k) {
    NeighborSets oneHop(graph.size());
    for (std::size_t i{0}; i < graph.size(); ++i) {
      oneHop[i] = graph.neighbors(static_cast<int>(i));
    }
    return kHopAdjacency(oneHop, k);
  }

  std::vector<std::vector<int>> RegionMap::members() const {
    std::vector<std::vector<int>> out(static_cast<std::size_t>(regionCount));
    for (std::size_t i{0}; i < assignment.size(); ++i) {
      out[static_cast<std::size_t>(assignment[i])].push_back(static_cast<int>(i));
    }
    return out;
  }

  KMeansResult kMeans(std::span<Point2 const> points, int k, std::uint64_t seed,
                      int maxIterations, double tolerance) {
    auto const n{points.size()};
    if (k < 1 || static_cast<std::size_t>(k) > n) {
      throw std::invalid_argument("K-Means needs 1 <= K <= number of points");
    }
    auto const kk{static_cast<std::size_t>(k)};
    Rng rng{seed};
    KMeansResult result;
    auto& centroids{result.centroids};
    centroids.push_back(points[uniformIndex(rng, n)]);
    std::vector<double> best(n, std::numeric_limits<double>::infinity());
    while (centroids.size() < kk) {
      double total{0.0};
      for (std::size_t i{0}; i < n; ++i) {
        best[i] = std::min(best[i], squaredDistance(points[i], centroids.back()));
        total += best[i];
      }
      std::size_t pick{0};
      if (total <= 0.0) {
        // All remaining points coincide with chosen centroids.
        pick = uniformIndex(rng, n);
      } else {
        auto target{uniform01(rng) * total};
        for (pick = 0; pick + 1 < n; ++pick) {
          target -= best[pick];
          if (target < 0.0) {
            break;
          }
        }
      }
      centroids.push_back(points[pick]);
    }

    auto& assign{result.assignment};
    assign.assign(n, 0);
    auto const assignAll = [&] {
      for (std::size_t i{0}; i < n; ++i) {
        double bestD{std::numeric_limits<double>::infinity()};
        for (std::size_t c{0}; c < kk; ++c) {
          auto const d{squaredDistance(points[i], centroids[c])};
          if (d < bestD) {
            bestD = d;
            assign[i] = static_cast<int>(c);
          }
        }
      }
    };

    for (int iter{0}; iter < maxIterations; ++iter) {
      result.iterations = iter + 1;
      assignAll();
      std::vector<Point2> sums(kk);
      std::vector<std::size_t> counts(kk, 0);
      for (std::size_t i{0}; i < n; ++i) {
        auto const c{static_cast<std::size_t>(assign[i])};
        sums[c].x += points[i].x;
        sums[c].y += points[i].y;
        ++counts[c];
      }
      double shift{0.0};
      for (std::size_t c{0}; c < kk; ++c) {
        Point2 next{centroids[c]};
        if (counts[c] == 0) {
          // Re-seed from the point farthest from its own centroid.
          std::size_t far{0};
          double farD{-1.0};
          for (std::size_t i{0}; i < n; ++i) {
            auto const d{squaredDistance(points[i], centroids[static_cast<std::size_t>(assign[i])])};
            if (counts[static_cast<std::size_t>(assign[i])] > 1 && d > farD) {
              farD = d;
              far = i;
            }
          }
          if (farD >= 0.0) {
            next = points[far];
            --counts[static_cast<std::size_t>(assign[far])];
            assign[far] = static_cast<int>(c);
            counts[c] = 1;
          }
        } else {
          next = {sums[c].x / static_cast<double>(counts[c]),
                  sums[c].y / static_cast<double>(counts[c])};
        }
        shift = std::max(shift, std::sqrt(squaredDistance(next, centroids[c])));
        centroids[c] = next;
      }
      if (shift < tolerance) {
        break;
      }
    }
    assignAll();
    // Final guard: a degenerate point set may still leave a cluster empty.
    std::vector<std::size_t> counts(kk, 0);
    for (int a : assign) {
      ++counts[static_cast<std::size_t>(a)];
    }
    for (std::size_t c{0}; c < kk; ++c) {
      if (counts[c] > 0) {
        continue;
      }
      for (std::size_t i{0}; i < n; ++i) {
        if (counts[static_cast<std::size_t>(assign[i])] > 1) {
          --counts[static_cast<std::size_t>(assign[i])];
          assign[i] = static_cast<int>(c);
          counts[c] = 1;
          break;
        }
      }
    }
    return result;
  }

  RegionMap clusterRegions(RoadGraph const& graph, int regionCount, std::uint64_t seed) {
    if (regionCount < 1 || static_cast<std::size_t>(regionCount) > graph.size()) {
      throw std::invalid_argument("region count must be in [1, number of segments]");
    }
    std::vector<Point2> midpoints;
    midpoints.reserve(graph.size());
    for (auto const& s : graph.segments()) {
      midpoints.push_back(s.midpoint);
    }
    auto km{kMeans(midpoints, regionCount, seed)};
    return RegionMap{regionCount, std::move(km.assignment)};
  }

  CellIndex cellOf(Point2 p, double cellSize) {
    return {static_cast<std::int64_t>(std::floor(p.x / cellSize)),
            static_cast<std::int64_t>(std::floor(p.y / cellSize))};
  }

  GridMap gridPartition(RoadGraph const& graph, double cellSize) {
    if (!(cellSize > 0.0)) {
      throw std::invalid_argument("cell size must be positive");
    }
    GridMap grid;
    grid.cellSize = cellSize;
    std::vector<CellIndex> perSegment;
    perSegment.reserve(graph.size());
    for (auto const& s : graph.segments()) {
      perSegment.push_back(cellOf(s.midpoint, cellSize));
    }
    grid.cells = perSegment;
    std::sort(grid.cells.begin(), grid.cells.end());
    grid.cells.erase(std::unique(grid.cells.begin(), grid.cells.end()), grid.cells.end());
    grid.segmentCell.reserve(graph.size());
    for (auto const& c : perSegment) {
      grid.segmentCell.push_back(static_cast<int>(
          std::lower_bound(grid.cells.begin(), grid.cells.end(), c) - grid.cells.begin()));
    }
    return grid;
  }

  std::vector<std::vector<int>> GridMap::cellMembers() const {
    std::vector<std::vector<int>> out(cells.size());
    for (std::size_t i{0}; i < segmentCell.size(); ++i) {
      out[static_cast<std::size_t>(segmentCell[i])].push_back(static_cast<int>(i));
    }
    return out;
  }

  void to_json(nlohmann::json& j, RoadGraph const& graph) {
    auto segs = nlohmann::json::array();
    for (auto const& s : graph.segments()) {
      segs.push_back({{"id", s.id},
                      {"length", s.length},
                      {"midpoint", {s.midpoint.x, s.midpoint.y}},
                      {"ffs", s.freeFlowSpeed},
                      {"detector_offset", s.detectorOffset},
                      {"signal", s.signal},
                      {"from", s.fromNode},
                      {"to", s.toNode},
                      {"approach", static_cast<int>(s.approach)}});
    }
    auto edges = nlohmann::json::array();
    for (auto const& [a, b] : graph.edges()) {
      edges.push_back({a, b});
    }
    auto nodes = nlohmann::json::array();
    for (auto const& p : graph.intersections()) {
      nodes.push_back({p.x, p.y});
    }
    j = nlohmann::json{{"segments", segs}, {"edges", edges}, {"intersections", nodes}};
  }

  void from_json(nlohmann::json const& j, RoadGraph& graph) {
    std::vector<RoadSegment> segments;
    for (auto const& js : j.at("segments")) {
      RoadSegment s;
      s.id = js.at("id").get<int>();
      s.length = js.at("length").get<double>();
      s.midpoint = {js.at("midpoint").at(0).get<double>(), js.at("midpoint").at(1).get<double>()};
      s.freeFlowSpeed = js.at("ffs").get<double>();
      s.detectorOffset = js.value("detector_offset", 0.5 * s.length);
      s.signal = js.value("signal", 0);
      s.fromNode = js.value("from", 0);
      s.toNode = js.value("to", 0);
      s.approach = static_cast<Approach>(js.value("approach", 0));
      segments.push_back(s);
    }
    std::vector<std::pair<int, int>> edges;
    for (auto const& e : j.at("edges")) {
      edges.emplace_back(e.at(0).get<int>(), e.at(1).get<int>());
    }
    std::vector<Point2> nodes;
    if (j.contains("intersections")) {
      for (auto const& p : j.at("intersections")) {
        nodes.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
      }
    }
    graph = RoadGraph{std::move(nodes), std::move(segments), std::move(edges)};
  }

}  // namespace mst::roadnet
