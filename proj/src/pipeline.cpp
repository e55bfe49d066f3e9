#include "mst/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <mutex>
#include <numeric>
#include <set>
#include <thread>

#include <spdlog/spdlog.h>

namespace mst::pipeline {

  using nlohmann::json;
  namespace fs = std::filesystem;

  // ---------------------------------------------------------------------------------------------
  // configuration

  namespace {
    void checkKeys(json const& j, std::set<std::string> const& allowed, std::string const& where) {
      if (!j.is_object()) {
        throw ConfigError(where + " must be an object");
      }
      for (auto const& [key, value] : j.items()) {
        if (!allowed.contains(key)) {
          throw ConfigError("unknown key '" + key + "' in " + where);
        }
      }
    }

    json optionalNumber(std::optional<double> v) { return v ? json(*v) : json(nullptr); }

    std::optional<double> readOptional(json const& j, char const* key, std::optional<double> fallback) {
      if (!j.contains(key)) {
        return fallback;
      }
      if (j.at(key).is_null()) {
        return std::nullopt;
      }
      return j.at(key).get<double>();
    }

    std::string modeKey(sensors::ObservationMode m) {
      return m == sensors::ObservationMode::PNLdMinus ? std::string{"pn_ld_minus"} : sensors::modeName(m);
    }

    sensors::ObservationMode parseModeKey(std::string const& s) {
      return sensors::parseMode(s == "pn_ld_minus" ? std::string{"pn-ld-"} : s);
    }
  }  // namespace

  void RunConfig::validate() const {
    auto fail = [](std::string const& m) { throw ConfigError(m); };
    if (network.rows < 2 || network.cols < 2) {
      fail("network needs at least 2 rows and 2 columns");
    }
    if (!(network.minLength > 0.0) || network.maxLength < network.minLength || !(network.freeFlowSpeed > 0.0)) {
      fail("network lengths and free-flow speed must be positive with min_length <= max_length");
    }
    if (demand.baseTrips < 0.0 || demand.zeroFraction < 0.0 || demand.zeroFraction >= 1.0) {
      fail("demand needs base_trips >= 0 and zero_fraction in [0, 1)");
    }
    auto const& a{demand.augment};
    if (a.zeroProb < 0.0 || a.zeroProb > 1.0 || a.pctRange < 0.0 || a.scaleMin < 0.0 || a.scaleMax < a.scaleMin) {
      fail("augmentation parameters out of range");
    }
    auto const seriesEnd{kSeriesStart + static_cast<double>(kFineBins) * 5.0};
    if (!(simulation.step > 0.0) || simulation.duration < seriesEnd || simulation.warmup < 0.0 ||
        simulation.mainDemand < 0.0) {
      fail("simulation needs a positive step and a duration of at least " + sim::formatNumber(seriesEnd) + " s");
    }
    if (sessions < 1 || train < 1) {
      fail("sessions and train must be positive");
    }
    if (regions < 1 || !(cellSize > 0.0)) {
      fail("regions must be >= 1 and cell_size positive");
    }
    if (!(coverage > 0.0) || coverage > 1.0) {
      fail("coverage must lie in (0, 1]");
    }
    for (auto const& s : {noiseLd, noiseDrone, noiseLabel}) {
      if (s && *s < 0.0) {
        fail("noise sigmas must be non-negative");
      }
    }
    for (auto v : coverageSweep) {
      if (!(v > 0.0) || v > 1.0) {
        fail("coverage_sweep entries must lie in (0, 1]");
      }
    }
    if (jobs < 1) {
      fail("jobs must be >= 1");
    }
    try {
      model.validate();
    } catch (std::invalid_argument const& e) {
      throw ConfigError(e.what());
    }
  }

  sensors::NoiseSpec RunConfig::noise() const {
    auto spec{sensors::NoiseSpec::forMode(mode, deriveSeed(seed, hashName("noise")))};
    if (mode != sensors::ObservationMode::Full) {
      spec.sigmaLd = noiseLd.value_or(spec.sigmaLd);
      spec.sigmaDrone = noiseDrone.value_or(spec.sigmaDrone);
      spec.sigmaLabel = noiseLabel.value_or(spec.sigmaLabel);
    }
    return spec;
  }

  void to_json(json& j, RunConfig const& c) {
    j = json::object();
    j["network"] = {{"rows", c.network.rows},
                    {"cols", c.network.cols},
                    {"min_length", c.network.minLength},
                    {"max_length", c.network.maxLength},
                    {"free_flow_speed", c.network.freeFlowSpeed},
                    {"seed", c.network.seed}};
    j["demand"] = {{"base_trips", c.demand.baseTrips},
                   {"zero_fraction", c.demand.zeroFraction},
                   {"zero_prob", c.demand.augment.zeroProb},
                   {"pct_range", c.demand.augment.pctRange},
                   {"scale_min", c.demand.augment.scaleMin},
                   {"scale_max", c.demand.augment.scaleMax}};
    j["simulation"] = {{"step", c.simulation.step},
                       {"warmup", c.simulation.warmup},
                       {"main_demand", c.simulation.mainDemand},
                       {"duration", c.simulation.duration},
                       {"warmup_rate_factor", c.simulation.warmupRateFactor},
                       {"jam_spacing", c.simulation.jamSpacing},
                       {"saturation_headway", c.simulation.saturationHeadway},
                       {"candidate_rate", c.simulation.candidateRate}};
    j["sessions"] = c.sessions;
    j["train"] = c.train;
    j["regions"] = c.regions;
    j["cell_size"] = c.cellSize;
    j["sensors"] = {{"mode", modeKey(c.mode)},
                    {"coverage", c.coverage},
                    {"noise_ld", optionalNumber(c.noiseLd)},
                    {"noise_drone", optionalNumber(c.noiseDrone)},
                    {"noise_label", optionalNumber(c.noiseLabel)}};
    j["model"] = c.model;
    j["seed"] = c.seed;
    j["jobs"] = c.jobs;
    j["out"] = c.out.string();
    j["coverage_sweep"] = c.coverageSweep;
  }

  void from_json(json const& j, RunConfig& c) {
    try {
      checkKeys(j,
                {"network", "demand", "simulation", "sessions", "train", "regions", "cell_size", "sensors", "model",
                 "seed", "jobs", "out", "coverage_sweep"},
                "config");
      RunConfig const d;
      if (j.contains("network")) {
        auto const& n{j.at("network")};
        checkKeys(n, {"rows", "cols", "min_length", "max_length", "free_flow_speed", "seed"}, "network");
        c.network.rows = n.value("rows", d.network.rows);
        c.network.cols = n.value("cols", d.network.cols);
        c.network.minLength = n.value("min_length", d.network.minLength);
        c.network.maxLength = n.value("max_length", d.network.maxLength);
        c.network.freeFlowSpeed = n.value("free_flow_speed", d.network.freeFlowSpeed);
        c.network.seed = n.value("seed", d.network.seed);
      }
      if (j.contains("demand")) {
        auto const& n{j.at("demand")};
        checkKeys(n, {"base_trips", "zero_fraction", "zero_prob", "pct_range", "scale_min", "scale_max"}, "demand");
        c.demand.baseTrips = n.value("base_trips", d.demand.baseTrips);
        c.demand.zeroFraction = n.value("zero_fraction", d.demand.zeroFraction);
        c.demand.augment.zeroProb = n.value("zero_prob", d.demand.augment.zeroProb);
        c.demand.augment.pctRange = n.value("pct_range", d.demand.augment.pctRange);
        c.demand.augment.scaleMin = n.value("scale_min", d.demand.augment.scaleMin);
        c.demand.augment.scaleMax = n.value("scale_max", d.demand.augment.scaleMax);
      }
      if (j.contains("simulation")) {
        auto const& n{j.at("simulation")};
        checkKeys(n,
                  {"step", "warmup", "main_demand", "duration", "warmup_rate_factor", "jam_spacing",
                   "saturation_headway", "candidate_rate"},
                  "simulation");
        c.simulation.step = n.value("step", d.simulation.step);
        c.simulation.warmup = n.value("warmup", d.simulation.warmup);
        c.simulation.mainDemand = n.value("main_demand", d.simulation.mainDemand);
        c.simulation.duration = n.value("duration", d.simulation.duration);
        c.simulation.warmupRateFactor = n.value("warmup_rate_factor", d.simulation.warmupRateFactor);
        c.simulation.jamSpacing = n.value("jam_spacing", d.simulation.jamSpacing);
        c.simulation.saturationHeadway = n.value("saturation_headway", d.simulation.saturationHeadway);
        c.simulation.candidateRate = n.value("candidate_rate", d.simulation.candidateRate);
      }
      c.sessions = j.value("sessions", d.sessions);
      c.train = j.value("train", d.train);
      c.regions = j.value("regions", d.regions);
      c.cellSize = j.value("cell_size", d.cellSize);
      if (j.contains("sensors")) {
        auto const& n{j.at("sensors")};
        checkKeys(n, {"mode", "coverage", "noise_ld", "noise_drone", "noise_label"}, "sensors");
        c.mode = parseModeKey(n.value("mode", modeKey(d.mode)));
        c.coverage = n.value("coverage", d.coverage);
        c.noiseLd = readOptional(n, "noise_ld", d.noiseLd);
        c.noiseDrone = readOptional(n, "noise_drone", d.noiseDrone);
        c.noiseLabel = readOptional(n, "noise_label", d.noiseLabel);
      }
      if (j.contains("model")) {
        checkKeys(j.at("model"),
                  {"hidden", "lstm_layers", "gcn_layers", "hops", "decoder_hidden", "horizon", "modalities", "use_gnn",
                   "w_seg", "w_reg", "epochs", "batch", "lr", "weight_decay"},
                  "model");
        c.model = j.at("model").get<model::ModelConfig>();
      }
      c.seed = j.value("seed", d.seed);
      c.jobs = j.value("jobs", d.jobs);
      c.out = j.value("out", d.out.string());
      c.coverageSweep = j.value("coverage_sweep", d.coverageSweep);
    } catch (json::exception const& e) {
      throw ConfigError(std::string{"malformed config: "} + e.what());
    } catch (std::invalid_argument const& e) {
      throw ConfigError(e.what());
    }
  }

  RunConfig loadConfig(fs::path const& path) {
    std::ifstream in{path};
    if (!in) {
      throw ConfigError("cannot read config " + path.string());
    }
    json j;
    try {
      j = json::parse(in);
    } catch (json::exception const& e) {
      throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    auto c{j.get<RunConfig>()};
    c.validate();
    return c;
  }

  std::string configHash(RunConfig const& c) {
    json j = c;
    j.erase("jobs");
    j.erase("out");
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(hashName(j.dump())));
    return buf;
  }

  // ---------------------------------------------------------------------------------------------
  // simulation

  Benchmark makeBenchmark(RunConfig const& c) { return benchmarkOn(roadnet::buildGridNetwork(c.network), c); }

  Benchmark benchmarkOn(roadnet::RoadGraph graph, RunConfig const& c) {
    Benchmark b;
    b.graph = std::move(graph);
    if (static_cast<std::size_t>(c.regions) > b.graph.size()) {
      throw ConfigError("more regions than segments");
    }
    b.regions = roadnet::clusterRegions(b.graph, c.regions, deriveSeed(c.seed, hashName("regions")));
    b.grid = roadnet::gridPartition(b.graph, c.cellSize);
    b.baseOd = sim::randomBaseOd(b.graph, c.demand.baseTrips, c.demand.zeroFraction,
                                 deriveSeed(c.seed, hashName("base_od")));
    b.signals = sim::defaultSignals(b.graph, deriveSeed(c.seed, hashName("signals")));
    return b;
  }

  std::uint64_t sessionSeed(std::uint64_t seed, int session) {
    return deriveSeed(deriveSeed(seed, hashName("session")), static_cast<std::uint64_t>(session));
  }

  sim::AugmentedOD sessionDemand(Benchmark const& b, RunConfig const& c, int session) {
    return sim::augmentOd(b.baseOd, deriveSeed(sessionSeed(c.seed, session), 1), c.demand.augment);
  }

  namespace {
    std::size_t mfdBins(double duration) {
      return static_cast<std::size_t>(std::ceil(duration / kMfdResolution));
    }

    /// Fine per-segment bins and one network-wide bin series fed from the same splits.
    struct SessionBinner {
      SessionBinner(roadnet::RoadGraph const& g, double duration)
          : graph{g}, fine{g.size(), kSeriesStart, 5.0, kFineBins}, network{1, 0.0, kMfdResolution, mfdBins(duration)} {}

      void add(sim::SegmentVisit const& v) {
        auto const& seg{graph.segment(v.segment)};
        for (auto const& s : edie::toSplits(v, seg.length)) {
          fine.add(v.segment, s);
          fine.addDetection(v.segment, s, seg.detectorOffset);
          network.add(0, s);
        }
      }

      void finish(SessionRecord& r) const {
        r.series = sensors::seriesFromBinner(fine, data::kFinePerCoarse);
        r.mfd.clear();
        for (std::size_t bin{0}; bin < network.bins(); ++bin) {
          r.mfd.push_back(network.sums(0, bin));
        }
      }

      roadnet::RoadGraph const& graph;
      edie::SplitBinner fine;
      edie::SplitBinner network;
    };
  }  // namespace

  SessionRecord simulateOne(Benchmark const& b, RunConfig const& c, int session, sim::VisitSink const& visits) {
    auto const demand{sessionDemand(b, c, session)};
    SessionRecord r;
    r.session = session;
    r.seed = sessionSeed(c.seed, session);
    r.demandScale = demand.demandScale;
    r.duration = c.simulation.duration;
    SessionBinner binner{b.graph, r.duration};
    auto sink = [&](sim::SegmentVisit&& v) {
      binner.add(v);
      if (visits) {
        visits(std::move(v));
      }
    };
    r.stats = sim::simulateSession(b.graph, demand.od, b.signals, deriveSeed(r.seed, 2), c.simulation, sink,
                                   &r.vehicles);
    binner.finish(r);
    spdlog::debug("session {}: scale {:.3f}, {} vehicles", session, r.demandScale, r.stats.spawned);
    return r;
  }

  void parallelFor(std::size_t count, int jobs, std::function<void(std::size_t)> const& fn) {
    auto const workers{std::min<std::size_t>(static_cast<std::size_t>(std::max(jobs, 1)), count)};
    if (workers <= 1) {
      for (std::size_t i{0}; i < count; ++i) {
        fn(i);
      }
      return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex mutex;
    std::vector<std::thread> pool;
    for (std::size_t w{0}; w < workers; ++w) {
      pool.emplace_back([&] {
        for (auto i{next++}; i < count; i = next++) {
          try {
            fn(i);
          } catch (...) {
            std::lock_guard lock{mutex};
            if (!error) {
              error = std::current_exception();
            }
          }
        }
      });
    }
    for (auto& t : pool) {
      t.join();
    }
    if (error) {
      std::rethrow_exception(error);
    }
  }

  std::vector<SessionRecord> simulateAll(Benchmark const& b, RunConfig const& c) {
    std::vector<SessionRecord> out(static_cast<std::size_t>(c.sessions));
    parallelFor(out.size(), c.jobs, [&](std::size_t i) { out[i] = simulateOne(b, c, static_cast<int>(i)); });
    return out;
  }

  namespace {
    void countVehicles(SessionRecord& r) {
      r.stats.spawned = r.vehicles.size();
      for (auto const& v : r.vehicles) {
        if (v.arrived()) {
          ++r.stats.arrived;
          r.stats.endTime = std::max(r.stats.endTime, v.arrival);
        }
      }
      r.stats.remaining = r.stats.spawned - r.stats.arrived;
    }
  }  // namespace

  SessionRecord recordFromVisits(roadnet::RoadGraph const& graph, int session, std::uint64_t seed,
                                 double demandScale, double duration, std::span<sim::SegmentVisit const> visits,
                                 std::vector<sim::VehicleSummary> vehicles) {
    SessionRecord r;
    r.session = session;
    r.seed = seed;
    r.demandScale = demandScale;
    r.duration = duration;
    SessionBinner binner{graph, duration};
    for (auto const& v : visits) {
      binner.add(v);
    }
    binner.finish(r);
    r.vehicles = std::move(vehicles);
    countVehicles(r);
    return r;
  }

  // ---------------------------------------------------------------------------------------------
  // session cache

  namespace {
    static_assert(std::endian::native == std::endian::little, "binary caches assume a little-endian host");
    constexpr char kCacheMagic[8]{'M', 'S', 'T', 'S', 'E', 'R', '0', '1'};

    void putDoubles(std::ostream& out, std::span<double const> v) {
      out.write(reinterpret_cast<char const*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
    }

    std::vector<double> getDoubles(std::istream& in, std::size_t n, fs::path const& path) {
      std::vector<double> v(n);
      in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
      if (static_cast<std::size_t>(in.gcount()) != n * sizeof(double)) {
        throw std::runtime_error("session cache " + path.string() + " is truncated");
      }
      return v;
    }
  }  // namespace

  void writeSessionCache(fs::path const& path, SessionRecord const& r) {
    auto const& s{r.series};
    json header = {{"session", r.session},
                   {"seed", r.seed},
                   {"demand_scale", r.demandScale},
                   {"duration", r.duration},
                   {"stats",
                    {{"spawned", r.stats.spawned},
                     {"arrived", r.stats.arrived},
                     {"remaining", r.stats.remaining},
                     {"skipped_pairs", r.stats.skippedPairs},
                     {"vehicle_hours", r.stats.vehicleHours},
                     {"end_time", r.stats.endTime}}},
                   {"start", s.start},
                   {"fine_resolution", s.fineResolution},
                   {"coarse_resolution", s.coarseResolution},
                   {"segments", s.segments()},
                   {"fine", s.fineSteps()},
                   {"coarse", s.coarseSteps()},
                   {"mfd_bins", r.mfd.size()},
                   {"vehicles", r.vehicles.size()}};
    auto const text{header.dump()};
    std::ofstream out{path, std::ios::binary};
    if (!out) {
      throw std::runtime_error("cannot write " + path.string());
    }
    out.write(kCacheMagic, sizeof(kCacheMagic));
    std::uint64_t const len{text.size()};
    out.write(reinterpret_cast<char const*>(&len), sizeof(len));
    out << text;
    for (auto const* m : {&s.drone, &s.ld, &s.segment, &s.distance, &s.time}) {
      putDoubles(out, m->values);
    }
    std::vector<double> mfd;
    for (auto const& e : r.mfd) {
      mfd.insert(mfd.end(), {e.distance, e.time, static_cast<double>(e.splits)});
    }
    putDoubles(out, mfd);
    std::vector<double> veh;
    for (auto const& v : r.vehicles) {
      veh.insert(veh.end(), {static_cast<double>(v.id), static_cast<double>(v.origin),
                             static_cast<double>(v.destination), v.departure, v.arrival});
    }
    putDoubles(out, veh);
  }

  SessionRecord readSessionCache(fs::path const& path) {
    std::ifstream in{path, std::ios::binary};
    if (!in) {
      throw MissingArtifact(path);
    }
    char magic[8]{};
    std::uint64_t len{0};
    in.read(magic, sizeof(magic));
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    if (!in || std::memcmp(magic, kCacheMagic, sizeof(magic)) != 0 || len > (1U << 20)) {
      throw std::runtime_error("session cache " + path.string() + " has a bad header");
    }
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    json h;
    try {
      h = json::parse(text);
    } catch (json::exception const&) {
      throw std::runtime_error("session cache " + path.string() + " has a corrupt header");
    }
    SessionRecord r;
    r.session = h.at("session").get<int>();
    r.seed = h.at("seed").get<std::uint64_t>();
    r.demandScale = h.at("demand_scale").get<double>();
    r.duration = h.at("duration").get<double>();
    auto const& st{h.at("stats")};
    r.stats.spawned = st.at("spawned").get<std::size_t>();
    r.stats.arrived = st.at("arrived").get<std::size_t>();
    r.stats.remaining = st.at("remaining").get<std::size_t>();
    r.stats.skippedPairs = st.at("skipped_pairs").get<std::size_t>();
    r.stats.vehicleHours = st.at("vehicle_hours").get<double>();
    r.stats.endTime = st.at("end_time").get<double>();
    auto& s{r.series};
    s.start = h.at("start").get<double>();
    s.fineResolution = h.at("fine_resolution").get<double>();
    s.coarseResolution = h.at("coarse_resolution").get<double>();
    auto const n{h.at("segments").get<std::size_t>()};
    auto const fine{h.at("fine").get<std::size_t>()};
    auto const coarse{h.at("coarse").get<std::size_t>()};
    auto read = [&](std::size_t cols) {
      SeriesMatrix m{n, cols};
      m.values = getDoubles(in, n * cols, path);
      return m;
    };
    s.drone = read(fine);
    s.ld = read(coarse);
    s.segment = read(coarse);
    s.distance = read(coarse);
    s.time = read(coarse);
    auto const bins{h.at("mfd_bins").get<std::size_t>()};
    auto const mfd{getDoubles(in, 3 * bins, path)};
    for (std::size_t i{0}; i < bins; ++i) {
      r.mfd.push_back({mfd[3 * i], mfd[3 * i + 1], static_cast<std::size_t>(mfd[3 * i + 2])});
    }
    auto const count{h.at("vehicles").get<std::size_t>()};
    auto const veh{getDoubles(in, 5 * count, path)};
    for (std::size_t i{0}; i < count; ++i) {
      auto const* v{&veh[5 * i]};
      r.vehicles.push_back({static_cast<int>(v[0]), static_cast<int>(v[1]), static_cast<int>(v[2]), v[3], v[4]});
    }
    return r;
  }

  // ---------------------------------------------------------------------------------------------
  // session directories

  namespace {
    constexpr char const* kVehicleHeader{"vehicle_id,origin,destination,departure,arrival"};

    std::ofstream openOut(fs::path const& path) {
      std::ofstream out{path};
      if (!out) {
        throw std::runtime_error("cannot write " + path.string());
      }
      return out;
    }

    std::vector<sim::VehicleSummary> readVehicles(fs::path const& path) {
      std::ifstream in{path};
      if (!in) {
        throw MissingArtifact(path);
      }
      std::string line;
      if (!std::getline(in, line) || line != kVehicleHeader) {
        throw std::runtime_error(path.string() + ": unexpected header");
      }
      std::vector<sim::VehicleSummary> out;
      while (std::getline(in, line)) {
        if (line.empty()) {
          continue;
        }
        std::vector<std::string> f;
        std::size_t pos{0};
        for (auto next{line.find(',')}; ; next = line.find(',', pos)) {
          f.push_back(line.substr(pos, next == std::string::npos ? std::string::npos : next - pos));
          if (next == std::string::npos) {
            break;
          }
          pos = next + 1;
        }
        if (f.size() != 5) {
          throw std::runtime_error(path.string() + ": malformed row '" + line + "'");
        }
        out.push_back({std::stoi(f[0]), std::stoi(f[1]), std::stoi(f[2]), std::stod(f[3]),
                       f[4].empty() ? kMissing : std::stod(f[4])});
      }
      return out;
    }
  }  // namespace

  std::string sessionDirName(int session) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "session_%03d", session);
    return buf;
  }

  SessionRecord simulateToDir(Benchmark const& b, RunConfig const& c, int session, fs::path const& dir) {
    fs::create_directories(dir);
    auto traj{openOut(dir / "trajectories.csv")};
    auto visits{openOut(dir / "visits.csv")};
    traj << sim::kTrajectoryHeader << '\n';
    visits << sim::kVisitHeader << '\n';
    auto r{simulateOne(b, c, session, [&](sim::SegmentVisit&& v) {
      sim::writeTrajectoryRows(traj, v);
      sim::writeVisitRow(visits, v);
    })};
    auto veh{openOut(dir / "vehicles.csv")};
    veh << kVehicleHeader << '\n';
    for (auto const& v : r.vehicles) {
      veh << v.id << ',' << v.origin << ',' << v.destination << ',' << sim::formatNumber(v.departure) << ','
          << sim::formatNumber(v.arrival) << '\n';
    }
    writeJson(dir / "meta.json", {{"session", session},
                                  {"seed", r.seed},
                                  {"demand_scale", r.demandScale},
                                  {"duration_s", r.duration},
                                  {"vehicles", r.stats.spawned},
                                  {"arrived", r.stats.arrived},
                                  {"vehicle_hours", r.stats.vehicleHours}});
    writeSessionCache(dir / "series.bin", r);
    return r;
  }

  SessionRecord loadSession(roadnet::RoadGraph const& graph, fs::path const& dir) {
    if (fs::exists(dir / "series.bin")) {
      return readSessionCache(dir / "series.bin");
    }
    auto const meta = readJson(dir / "meta.json");
    std::ifstream traj{dir / "trajectories.csv"};
    std::ifstream visits{dir / "visits.csv"};
    if (!traj) {
      throw MissingArtifact(dir / "trajectories.csv");
    }
    if (!visits) {
      throw MissingArtifact(dir / "visits.csv");
    }
    SessionRecord r;
    r.session = meta.at("session").get<int>();
    r.seed = meta.at("seed").get<std::uint64_t>();
    r.demandScale = meta.at("demand_scale").get<double>();
    r.duration = meta.at("duration_s").get<double>();
    SessionBinner binner{graph, r.duration};
    sim::readTrajectoryCsv(traj, visits, [&](sim::SegmentVisit&& v) { binner.add(v); });
    binner.finish(r);
    r.vehicles = readVehicles(dir / "vehicles.csv");
    countVehicles(r);
    r.stats.vehicleHours = meta.value("vehicle_hours", 0.0);
    return r;
  }

  // ---------------------------------------------------------------------------------------------
  // dataset

  BuiltDataset buildDataset(Benchmark const& b, RunConfig const& c, std::span<SessionRecord const> records) {
    if (static_cast<std::size_t>(c.train) >= records.size()) {
      throw ConfigError("train count " + std::to_string(c.train) + " must be below the " +
                        std::to_string(records.size()) + " simulated sessions");
    }
    BuiltDataset d;
    d.split = data::splitSessions(records.size(), static_cast<std::size_t>(c.train),
                                  deriveSeed(c.seed, hashName("split")));
    d.noise = c.noise();
    auto const n{b.graph.size()};
    d.layout.ldCoverage = c.coverage;
    d.layout.droneCoverage = c.coverage;
    d.layout.seed = deriveSeed(c.seed, hashName("drones"));
    if (c.mode == sensors::ObservationMode::Full) {
      d.layout.ldCoverage = 1.0;
      d.layout.droneCoverage = 1.0;
      d.layout.ldSegments.resize(n);
      std::iota(d.layout.ldSegments.begin(), d.layout.ldSegments.end(), 0);
    } else {
      // Validity is judged on the training sessions while demand is loaded; once the network
      // empties every series runs MISSING regardless of the detector.
      auto const demandBins{static_cast<std::size_t>(
          std::max(0.0, std::floor((c.simulation.demandEnd() - kSeriesStart) / records[0].series.coarseResolution)))};
      std::vector<double> missing(n, 0.0);
      for (int id : d.split.train) {
        auto const& ld{records[static_cast<std::size_t>(id)].series.ld};
        auto const bins{std::min(demandBins, ld.cols)};
        auto const frac{sensors::missingFractions(ld.columns(0, bins))};
        for (std::size_t s{0}; s < n; ++s) {
          missing[s] += frac[s] / static_cast<double>(d.split.train.size());
        }
      }
      d.layout.ldSegments = sensors::placeLoopDetectors(missing, c.coverage, deriveSeed(c.seed, hashName("detectors")));
    }
    std::vector<char> isTrain(records.size(), 0);
    for (int id : d.split.train) {
      isTrain[static_cast<std::size_t>(id)] = 1;
    }
    std::vector<std::vector<data::MSTSSample>> perSession(records.size());
    parallelFor(records.size(), c.jobs, [&](std::size_t i) {
      auto const& r{records[i]};
      auto const obs{sensors::observeSession(r.series, c.mode, d.layout, b.grid, b.regions, d.noise,
                                             static_cast<std::uint64_t>(r.session))};
      perSession[i] = data::extractSamples(obs, r.series.start, r.session, r.demandScale, isTrain[i] != 0);
    });
    for (int id : d.split.train) {
      auto& s{perSession[static_cast<std::size_t>(id)]};
      d.train.insert(d.train.end(), std::make_move_iterator(s.begin()), std::make_move_iterator(s.end()));
    }
    for (int id : d.split.test) {
      auto& s{perSession[static_cast<std::size_t>(id)]};
      d.test.insert(d.test.end(), std::make_move_iterator(s.begin()), std::make_move_iterator(s.end()));
    }
    d.normalizer = data::fitNormalizer(d.train);
    return d;
  }

  void writeBuiltDataset(fs::path const& dir, Benchmark const& b, RunConfig const& c, BuiltDataset const& d) {
    fs::create_directories(dir);
    data::DatasetManifest m;
    m.seed = c.seed;
    m.segments = b.graph.size();
    m.regions = static_cast<std::size_t>(b.regions.regionCount);
    m.normalizer = d.normalizer;
    m.extra = stageManifest("dataset", c,
                            {{"split", {{"train", d.split.train}, {"test", d.split.test}}},
                             {"layout", d.layout},
                             {"noise",
                              {{"sigma_ld", d.noise.sigmaLd},
                               {"sigma_drone", d.noise.sigmaDrone},
                               {"sigma_label", d.noise.sigmaLabel},
                               {"seed", d.noise.seed}}},
                             {"region_assignment", b.regions.assignment},
                             {"cell_size", b.grid.cellSize},
                             {"train_samples", d.train.size()},
                             {"test_samples", d.test.size()}});
    std::vector<data::MSTSSample> all;
    all.reserve(d.train.size() + d.test.size());
    all.insert(all.end(), d.train.begin(), d.train.end());
    all.insert(all.end(), d.test.begin(), d.test.end());
    data::writeDataset(dir, m, all);
    writeJson(dir / "network.json", b.graph);
  }

  LoadedDataset readBuiltDataset(fs::path const& dir) {
    if (!fs::exists(dir / "manifest.json")) {
      throw MissingArtifact(dir / "manifest.json");
    }
    auto ds{data::readDataset(dir)};
    LoadedDataset out;
    out.extra = ds.manifest.extra;
    out.bench.graph = readJson(dir / "network.json").get<roadnet::RoadGraph>();
    out.bench.regions.regionCount = static_cast<int>(ds.manifest.regions);
    out.bench.regions.assignment = out.extra.at("region_assignment").get<std::vector<int>>();
    out.bench.grid = roadnet::gridPartition(out.bench.graph, out.extra.at("cell_size").get<double>());
    auto& d{out.data};
    d.split.train = out.extra.at("split").at("train").get<std::vector<int>>();
    d.split.test = out.extra.at("split").at("test").get<std::vector<int>>();
    d.layout = out.extra.at("layout").get<sensors::SensorLayout>();
    auto const& n{out.extra.at("noise")};
    d.noise = {n.at("sigma_ld").get<double>(), n.at("sigma_drone").get<double>(), n.at("sigma_label").get<double>(),
               n.at("seed").get<std::uint64_t>()};
    d.normalizer = ds.manifest.normalizer;
    auto const nTrain{out.extra.at("train_samples").get<std::size_t>()};
    if (nTrain > ds.samples.size()) {
      throw std::runtime_error("dataset " + dir.string() + " holds fewer samples than its manifest lists");
    }
    d.train.assign(std::make_move_iterator(ds.samples.begin()),
                   std::make_move_iterator(ds.samples.begin() + static_cast<std::ptrdiff_t>(nTrain)));
    d.test.assign(std::make_move_iterator(ds.samples.begin() + static_cast<std::ptrdiff_t>(nTrain)),
                  std::make_move_iterator(ds.samples.end()));
    return out;
  }

  // ---------------------------------------------------------------------------------------------
  // models and evaluation

  model::ModelGraph modelGraph(Benchmark const& b, model::ModelConfig const& m) {
    roadnet::NeighborSets oneHop;
    if (m.useGnn) {
      for (std::size_t i{0}; i < b.graph.size(); ++i) {
        oneHop.push_back(b.graph.neighbors(static_cast<int>(i)));
      }
    }
    return model::makeModelGraph(oneHop, m.hops, b.regions);
  }

  std::string variantName(model::ModelConfig const& m) { return m.modalities() + (m.useGnn ? "" : "-nognn"); }

  TrainedModel trainModel(Benchmark const& b, model::ModelConfig const& m, BuiltDataset const& d,
                          std::uint64_t seed) {
    TrainedModel t{model::HiMSNet{m, modelGraph(b, m), deriveSeed(seed, hashName("init"))}, {}};
    auto source = [&](std::size_t i, model::TrainExample& scratch) -> model::TrainExample const& {
      scratch = model::toExample(d.train[i], d.normalizer);
      return scratch;
    };
    t.log = model::train(t.net, d.train.size(), source, deriveSeed(seed, hashName("shuffle")));
    return t;
  }

  std::vector<eval::SamplePrediction> predictAll(model::HiMSNet const& net, BuiltDataset const& d) {
    std::vector<eval::SamplePrediction> out;
    out.reserve(d.test.size());
    for (auto const& s : d.test) {
      auto const ex{model::toExample(s, d.normalizer)};
      auto p{model::predict(net, ex.input, d.normalizer.labels())};
      out.push_back({std::move(p.seg), std::move(p.reg)});
    }
    return out;
  }

  eval::EvalReport modelReport(model::HiMSNet const& net, BuiltDataset const& d) {
    return eval::evaluate("HiMSNet(" + variantName(net.config()) + ")", predictAll(net, d), d.test);
  }

  std::vector<eval::EvalReport> baselineReports(Benchmark const& b, BuiltDataset const& d) {
    using eval::BaselineKind;
    using eval::InputModality;
    std::vector<eval::EvalReport> out;
    auto const members{b.regions.members()};
    auto const la{eval::labelAverage(d.test)};
    for (auto kind : {BaselineKind::LastObservation, BaselineKind::InputAverage}) {
      for (auto mod : {InputModality::Drone, InputModality::Ld}) {
        std::vector<eval::SamplePrediction> preds;
        for (auto const& s : d.test) {
          preds.push_back(eval::inputBaseline(kind, mod, eval::baselineInputs(s), members, la.seg));
        }
        out.push_back(eval::evaluate(eval::baselineName(kind, mod), preds, d.test));
      }
    }
    auto const constant{eval::labelAveragePrediction(la, b.graph.size(), members.size())};
    std::vector<eval::SamplePrediction> preds(d.test.size(), constant);
    out.push_back(eval::evaluate("LA", preds, d.test));
    return out;
  }

  // ---------------------------------------------------------------------------------------------
  // MFD

  std::vector<edie::MfdPoint> sessionMfd(SessionRecord const& r, double totalLength) {
    std::vector<edie::MfdPoint> out;
    for (std::size_t i{0}; i < r.mfd.size(); ++i) {
      auto const t0{kMfdResolution * static_cast<double>(i)};
      out.push_back(edie::mfdPoint(r.mfd[i], {t0, t0 + kMfdResolution}, totalLength));
    }
    return out;
  }

  MfdSummary summarizeMfd(std::span<edie::MfdPoint const> points, double demandEnd) {
    MfdSummary s;
    std::size_t peak{0};
    for (std::size_t i{0}; i < points.size(); ++i) {
      auto const& p{points[i]};
      if (p.density > s.maxDensity) {
        s.maxDensity = p.density;
        peak = i;
      }
      if (p.speed && p.t0 + p.duration <= demandEnd && (!s.minSpeed || *p.speed < *s.minSpeed)) {
        s.minSpeed = p.speed;
      }
    }
    // Compare each unloading point with the loading point of closest density.
    for (std::size_t u{peak + 1}; u < points.size(); ++u) {
      if (!points[u].speed) {
        continue;
      }
      double bestGap{std::numeric_limits<double>::infinity()};
      double gap{0.0};
      for (std::size_t l{0}; l <= peak; ++l) {
        if (!points[l].speed) {
          continue;
        }
        auto const diff{std::abs(points[l].density - points[u].density)};
        if (diff < bestGap && diff <= 0.1 * points[u].density) {
          bestGap = diff;
          gap = *points[l].speed - *points[u].speed;
        }
      }
      s.hysteresisGap = std::max(s.hysteresisGap, gap);
    }
    s.hysteresis = s.hysteresisGap > 0.5;
    return s;
  }

  // ---------------------------------------------------------------------------------------------
  // artifacts

  json stageManifest(std::string const& stage, RunConfig const& c, json extra) {
    json config = c;
    config.erase("jobs");
    config.erase("out");
    json j = {{"stage", stage}, {"version", 1}, {"config", config}, {"config_hash", configHash(c)}, {"seed", c.seed}};
    for (auto const& [k, v] : extra.items()) {
      j[k] = v;
    }
    return j;
  }

  void writeJson(fs::path const& path, json const& j) {
    std::ofstream out{path};
    if (!out) {
      throw std::runtime_error("cannot write " + path.string());
    }
    out << j.dump(2) << '\n';
  }

  json readJson(fs::path const& path) {
    std::ifstream in{path};
    if (!in) {
      throw MissingArtifact(path);
    }
    try {
      return json::parse(in);
    } catch (json::exception const& e) {
      throw std::runtime_error(path.string() + " is not valid JSON: " + e.what());
    }
  }

}  // namespace mst::pipeline
