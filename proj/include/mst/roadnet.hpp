/// @file roadnet.hpp
/// @brief Synthetic signalized road networks, the undirected data graph over segments,
///        k-hop neighborhoods, K-Means regions and the drone monitoring grid.

#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "json.hpp"

#include "common.hpp"

namespace mst::roadnet {

  /// Signal phase group served by a segment's downstream stop line.
  enum class Approach : int { EastWest = 0, NorthSouth = 1 };

  struct RoadSegment {
    int id{0};
    double length{0.0};  ///< meters
    Point2 midpoint{};
    double freeFlowSpeed{0.0};   ///< m/s
    double detectorOffset{0.0};  ///< loop position, meters from the segment start
    int signal{0};               ///< intersection controlling the downstream end
    int fromNode{0};
    int toNode{0};
    Approach approach{Approach::EastWest};
  };

  /// Segment-level data graph. Node i of the graph is segments[i]; edges are undirected.
  class RoadGraph {
  public:
    RoadGraph() = default;
    /// @throw std::invalid_argument on broken segment or edge invariants.
    RoadGraph(std::vector<Point2> intersections,
              std::vector<RoadSegment> segments,
              std::vector<std::pair<int, int>> edges);

    /// Data-graph edges join every pair of segments that touch a common intersection.
    static RoadGraph connectAtIntersections(std::vector<Point2> intersections,
                                            std::vector<RoadSegment> segments);

    [[nodiscard]] std::size_t size() const noexcept { return m_segments.size(); }
    [[nodiscard]] std::vector<RoadSegment> const& segments() const noexcept { return m_segments; }
    [[nodiscard]] RoadSegment const& segment(int id) const { return m_segments.at(static_cast<std::size_t>(id)); }
    [[nodiscard]] std::vector<Point2> const& intersections() const noexcept { return m_intersections; }
    [[nodiscard]] std::vector<std::pair<int, int>> const& edges() const noexcept { return m_edges; }
    [[nodiscard]] std::vector<int> const& neighbors(int id) const { return m_neighbors.at(static_cast<std::size_t>(id)); }
    /// Downstream segments reachable from the end of `id` (no U-turns).
    [[nodiscard]] std::vector<int> const& successors(int id) const { return m_successors.at(static_cast<std::size_t>(id)); }
    [[nodiscard]] double totalLength() const noexcept;
    [[nodiscard]] bool isConnected() const;

  private:
    std::vector<Point2> m_intersections;
    std::vector<RoadSegment> m_segments;
    std::vector<std::pair<int, int>> m_edges;
    std::vector<std::vector<int>> m_neighbors;
    std::vector<std::vector<int>> m_successors;
  };

  struct GridSpec {
    int rows{10};
    int cols{10};
    double minLength{90.0};
    double maxLength{180.0};
    double freeFlowSpeed{14.0};
    std::uint64_t seed{7};
  };

  /// Manhattan grid of signalized intersections with one segment per direction per block.
  /// @throw std::invalid_argument if rows or cols is below 2.
  [[nodiscard]] RoadGraph buildGridNetwork(GridSpec const& spec);

  using NeighborSets = std::vector<std::vector<int>>;

  /// For every node, the sorted set of nodes within graph distance k (itself included).
  [[nodiscard]] NeighborSets kHopAdjacency(RoadGraph const& graph, int k);
  [[nodiscard]] NeighborSets kHopAdjacency(NeighborSets const& oneHop, int k);

  struct RegionMap {
    int regionCount{0};
    std::vector<int> assignment;  ///< segment id -> region
    [[nodiscard]] std::vector<std::vector<int>> members() const;
  };

  struct KMeansResult {
    std::vector<int> assignment;
    std::vector<Point2> centroids;
    int iterations{0};
  };

  /// Lloyd's algorithm with k-means++ seeding. Empty clusters are re-seeded from the point
  /// farthest from its centroid.
  [[nodiscard]] KMeansResult kMeans(std::span<Point2 const> points, int k, std::uint64_t seed,
                                    int maxIterations = 100, double tolerance = 1e-9);

  /// @throw std::invalid_argument if K exceeds the number of segments or is below 1.
  [[nodiscard]] RegionMap clusterRegions(RoadGraph const& graph, int regionCount, std::uint64_t seed);

  struct CellIndex {
    std::int64_t ix{0};
    std::int64_t iy{0};
    friend auto operator<=>(CellIndex const&, CellIndex const&) = default;
  };

  struct GridMap {
    double cellSize{220.0};
    std::vector<CellIndex> cells;   ///< non-empty cells, sorted
    std::vector<int> segmentCell;   ///< segment id -> position in `cells`
    [[nodiscard]] std::vector<std::vector<int>> cellMembers() const;
  };

  [[nodiscard]] CellIndex cellOf(Point2 p, double cellSize);
  /// @throw std::invalid_argument if cellSize is not positive.
  [[nodiscard]] GridMap gridPartition(RoadGraph const& graph, double cellSize);

  void to_json(nlohmann::json& j, RoadGraph const& graph);
  void from_json(nlohmann::json const& j, RoadGraph& graph);

}  // namespace mst::roadnet
