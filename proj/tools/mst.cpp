// mst: simulate sessions, build datasets, train and evaluate HiMSNet, and write reports.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "json.hpp"

#include "mst/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mst;
using namespace mst::pipeline;

namespace {

  constexpr int kExitRuntime{1};
  constexpr int kExitUsage{2};
  constexpr int kExitConfig{3};
  constexpr int kExitMissing{4};

  struct Overrides {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<int> sessions;
    std::optional<double> coverage;
    std::optional<double> noiseLd;
    std::optional<double> noiseDrone;
    std::optional<std::string> modalities;
    bool noGnn{false};
    std::optional<int> hops;
    std::optional<int> jobs;
    std::optional<std::string> out;
  };

  void fail(int code, std::string const& kind, std::string const& message, json extra = json::object()) {
    json j = {{"status", "error"}, {"code", code}, {"kind", kind}, {"message", message}};
    for (auto const& [k, v] : extra.items()) {
      j[k] = v;
    }
    std::cerr << j.dump() << '\n';
  }

  /// A config file, or a stage manifest whose "config" member is one.
  RunConfig resolveConfig(Overrides const& o) {
    RunConfig c;
    if (!o.config.empty()) {
      auto j = readJson(o.config);
      if (j.contains("stage") && j.contains("config")) {
        j = j.at("config");
      } else if (j.contains("format") && j.contains("extra") && j.at("extra").contains("config")) {
        j = j.at("extra").at("config");
      }
      c = j.get<RunConfig>();
    }
    if (o.seed) {
      c.seed = *o.seed;
    }
    if (o.sessions) {
      c.sessions = *o.sessions;
    }
    if (o.coverage) {
      c.coverage = *o.coverage;
    }
    if (o.noiseLd) {
      c.noiseLd = *o.noiseLd;
    }
    if (o.noiseDrone) {
      c.noiseDrone = *o.noiseDrone;
    }
    if (o.modalities) {
      try {
        model::setModalities(c.model, *o.modalities);
      } catch (std::invalid_argument const& e) {
        throw ConfigError(e.what());
      }
    }
    if (o.noGnn) {
      c.model.useGnn = false;
    }
    if (o.hops) {
      c.model.hops = *o.hops;
    }
    if (o.jobs) {
      c.jobs = *o.jobs;
    }
    if (o.out) {
      c.out = *o.out;
    }
    c.validate();
    return c;
  }

  void ok(std::string const& stage, fs::path const& dir) {
    std::cout << json{{"status", "ok"}, {"stage", stage}, {"out", dir.string()}}.dump() << '\n';
  }

  std::ofstream openCsv(fs::path const& path) {
    std::ofstream out{path};
    if (!out) {
      throw std::runtime_error("cannot write " + path.string());
    }
    return out;
  }

  /// Removes a previous stage output so stale files never mix with new ones.
  void freshDir(fs::path const& dir) {
    fs::remove_all(dir);
    fs::create_directories(dir);
  }

  // ---------------------------------------------------------------------------------------------

  void runSimulate(RunConfig const& c) {
    auto const b{makeBenchmark(c)};
    auto const dir{c.out / "sim"};
    freshDir(dir);
    writeJson(dir / "network.json", b.graph);
    std::vector<SessionRecord> records(static_cast<std::size_t>(c.sessions));
    parallelFor(records.size(), c.jobs, [&](std::size_t i) {
      auto r{simulateToDir(b, c, static_cast<int>(i), dir / sessionDirName(static_cast<int>(i)))};
      spdlog::info("session {}: demand scale {:.3f}, {} vehicles", i, r.demandScale, r.stats.spawned);
      r.series = {};
      r.vehicles.clear();
      records[i] = std::move(r);
    });
    json sessions = json::array();
    for (auto const& r : records) {
      sessions.push_back({{"session", r.session}, {"seed", r.seed}, {"demand_scale", r.demandScale}});
    }
    writeJson(dir / "manifest.json", stageManifest("simulate", c, {{"sessions", records.size()}, {"runs", sessions}}));
    ok("simulate", dir);
  }

  std::vector<SessionRecord> loadSessions(fs::path const& simDir, roadnet::RoadGraph const& graph, int jobs) {
    auto const manifest = readJson(simDir / "manifest.json");
    std::vector<SessionRecord> records(manifest.at("sessions").get<std::size_t>());
    parallelFor(records.size(), jobs, [&](std::size_t i) {
      records[i] = loadSession(graph, simDir / sessionDirName(static_cast<int>(i)));
    });
    return records;
  }

  struct SimInputs {
    Benchmark bench;
    std::vector<SessionRecord> records;
  };

  SimInputs loadSim(RunConfig const& c) {
    auto const simDir{c.out / "sim"};
    if (!fs::exists(simDir / "manifest.json")) {
      throw MissingArtifact(simDir / "manifest.json");
    }
    SimInputs s{benchmarkOn(readJson(simDir / "network.json").get<roadnet::RoadGraph>(), c), {}};
    s.records = loadSessions(simDir, s.bench.graph, c.jobs);
    return s;
  }

  void runDataset(RunConfig const& c) {
    auto const sim{loadSim(c)};
    auto const d{buildDataset(sim.bench, c, sim.records)};
    auto const dir{c.out / "dataset"};
    freshDir(dir);
    writeBuiltDataset(dir, sim.bench, c, d);
    if (c.mode != sensors::ObservationMode::Full) {
      json layouts = json::object();
      auto const slots{sim.records.front().series.coarseSteps()};
      for (auto const& r : sim.records) {
        auto const drones{sensors::sessionDrones(d.layout, sim.bench.grid.cells.size(), slots,
                                                 static_cast<std::uint64_t>(r.session))};
        layouts[sessionDirName(r.session)] =
            sensors::layoutJson(d.layout, drones, r.series.start, r.series.coarseResolution);
      }
      writeJson(dir / "layout.json", layouts);
    }
    spdlog::info("dataset: {} train and {} test samples", d.train.size(), d.test.size());
    ok("dataset", dir);
  }

  fs::path checkpointPath(RunConfig const& c) { return c.out / "model" / "checkpoint.bin"; }

  void runTrain(RunConfig const& c) {
    auto const ds{readBuiltDataset(c.out / "dataset")};
    auto const dir{c.out / "model"};
    spdlog::info("training {} on {} samples", variantName(c.model), ds.data.train.size());
    auto const t{trainModel(ds.bench, c.model, ds.data, c.seed)};
    freshDir(dir);
    auto const variant{variantName(c.model)};
    model::saveModel(checkpointPath(c), t.net, {{"variant", variant}});
    model::writeTrainLog(dir / "train_log.csv", t.log);
    writeJson(dir / "manifest.json",
              stageManifest("train", c,
                            {{"variant", variant},
                             {"dataset_config_hash", ds.extra.value("config_hash", std::string{})},
                             {"final_loss", t.log.empty() ? 0.0 : t.log.back().lTotal}}));
    ok("train", dir);
  }

  struct LoadedModel {
    LoadedDataset ds;
    model::HiMSNet net;
  };

  LoadedModel loadTrained(RunConfig const& c) {
    auto const ck{checkpointPath(c)};
    if (!fs::exists(ck)) {
      throw MissingArtifact(ck);
    }
    auto ds{readBuiltDataset(c.out / "dataset")};
    auto const cfg{model::checkpointConfig(ck)};
    model::HiMSNet net{cfg, modelGraph(ds.bench, cfg), 0};
    model::loadModel(ck, net);
    return {std::move(ds), std::move(net)};
  }

  void writeGroupedErrors(fs::path const& dir, LoadedModel const& m, std::vector<eval::SamplePrediction> const& preds) {
    auto const& test{m.ds.data.test};
    auto out{openCsv(dir / "by_demand_scale.csv")};
    eval::writeGroupCsv(out, "demand_scale", eval::groupByDemandScale(preds, test));
    auto speed{openCsv(dir / "by_avg_speed.csv")};
    eval::writeGroupCsv(speed, "avg_speed_bin", eval::groupByAverageSpeed(preds, test));
    auto seg{openCsv(dir / "by_segment.csv")};
    eval::writeSegmentCsv(seg, eval::groupBySegment(preds, test, m.ds.bench.graph));
  }

  void runEval(RunConfig const& c) {
    auto const m{loadTrained(c)};
    auto const preds{predictAll(m.net, m.ds.data)};
    auto const variant{variantName(m.net.config())};
    std::vector reports{eval::evaluate("HiMSNet(" + variant + ")", preds, m.ds.data.test)};
    auto const dir{c.out / "eval"};
    freshDir(dir);
    auto report{openCsv(dir / "report.csv")};
    eval::writeReportCsv(report, reports);
    auto table{openCsv(dir / "table.csv")};
    eval::writeTableCsv(table, reports);
    writeGroupedErrors(dir, m, preds);
    writeJson(dir / "manifest.json", stageManifest("eval", c, {{"variant", variant}}));
    ok("eval", dir);
  }

  void runBaseline(RunConfig const& c) {
    auto const ds{readBuiltDataset(c.out / "dataset")};
    auto const reports{baselineReports(ds.bench, ds.data)};
    auto const dir{c.out / "baseline"};
    freshDir(dir);
    auto report{openCsv(dir / "report.csv")};
    eval::writeReportCsv(report, reports);
    auto table{openCsv(dir / "table.csv")};
    eval::writeTableCsv(table, reports);
    writeJson(dir / "manifest.json", stageManifest("baseline", c));
    ok("baseline", dir);
  }

  void writeMfd(fs::path const& dir, RunConfig const& c, SimInputs const& sim) {
    auto points{openCsv(dir / "mfd.csv")};
    points << "session,demand_scale,t0,flow,density,speed\n";
    auto summary{openCsv(dir / "mfd_summary.csv")};
    summary << "session,demand_scale,max_density,min_speed,hysteresis,hysteresis_gap\n";
    auto const length{sim.bench.graph.totalLength()};
    for (auto const& r : sim.records) {
      auto const mfd{sessionMfd(r, length)};
      for (auto const& p : mfd) {
        points << r.session << ',' << sim::formatNumber(r.demandScale) << ',' << sim::formatNumber(p.t0) << ','
               << sim::formatNumber(p.flow) << ',' << sim::formatNumber(p.density) << ','
               << eval::formatMetric(p.speed) << '\n';
      }
      auto const s{summarizeMfd(mfd, c.simulation.demandEnd())};
      summary << r.session << ',' << sim::formatNumber(r.demandScale) << ',' << sim::formatNumber(s.maxDensity) << ','
              << eval::formatMetric(s.minSpeed) << ',' << (s.hysteresis ? "yes" : "no") << ','
              << sim::formatNumber(s.hysteresisGap) << '\n';
    }
  }

  void writeTravelTimes(fs::path const& dir, SimInputs const& sim) {
    auto stats{openCsv(dir / "travel_time.csv")};
    stats << "session,demand_scale,count,mean,median,p90\n";
    auto hist{openCsv(dir / "travel_time_hist.csv")};
    hist << "session,bin_start,count\n";
    for (auto const& r : sim.records) {
      auto const t{edie::travelTimeStats(r.vehicles)};
      stats << r.session << ',' << sim::formatNumber(r.demandScale) << ',' << t.count << ','
            << eval::formatMetric(t.mean) << ',' << eval::formatMetric(t.median) << ',' << eval::formatMetric(t.p90)
            << '\n';
      for (std::size_t i{0}; i < t.histogram.size(); ++i) {
        hist << r.session << ',' << sim::formatNumber(t.binWidth * static_cast<double>(i)) << ',' << t.histogram[i]
             << '\n';
      }
    }
  }

  void writeCoverageSweep(fs::path const& dir, RunConfig const& c, SimInputs const& sim) {
    auto out{openCsv(dir / "coverage_sweep.csv")};
    out << "coverage,method,seg_mae_15,seg_mae_30,reg_mae_15,reg_mae_30\n";
    auto row = [&](double coverage, eval::EvalReport const& r) {
      out << sim::formatNumber(coverage) << ',' << r.method << ',' << eval::formatMetric(r.segment.at15.mae) << ','
          << eval::formatMetric(r.segment.at30.mae) << ',' << eval::formatMetric(r.regional.at15.mae) << ','
          << eval::formatMetric(r.regional.at30.mae) << '\n';
    };
    for (auto coverage : c.coverageSweep) {
      auto sweep{c};
      if (sweep.mode == sensors::ObservationMode::Full) {
        sweep.mode = sensors::ObservationMode::PN;
      }
      sweep.coverage = coverage;
      auto const d{buildDataset(sim.bench, sweep, sim.records)};
      spdlog::info("coverage {}: training on {} samples", coverage, d.train.size());
      auto const t{trainModel(sim.bench, sweep.model, d, sweep.seed)};
      row(coverage, modelReport(t.net, d));
      row(coverage, baselineReports(sim.bench, d).back());
    }
  }

  void runReport(RunConfig const& c) {
    auto const sim{loadSim(c)};
    auto const dir{c.out / "report"};
    freshDir(dir);
    writeMfd(dir, c, sim);
    writeTravelTimes(dir, sim);
    json written = {"mfd.csv", "mfd_summary.csv", "travel_time.csv", "travel_time_hist.csv"};
    if (fs::exists(checkpointPath(c))) {
      auto const m{loadTrained(c)};
      writeGroupedErrors(dir, m, predictAll(m.net, m.ds.data));
      for (auto const* f : {"by_demand_scale.csv", "by_avg_speed.csv", "by_segment.csv"}) {
        written.push_back(f);
      }
    } else {
      spdlog::warn("no checkpoint at {}; grouped errors skipped", checkpointPath(c).string());
    }
    if (!c.coverageSweep.empty()) {
      writeCoverageSweep(dir, c, sim);
      written.push_back("coverage_sweep.csv");
    }
    writeJson(dir / "manifest.json", stageManifest("report", c, {{"files", written}}));
    ok("report", dir);
  }

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_mt("mst"));
  spdlog::set_pattern("[%l] %v");

  CLI::App app{"Multi-source traffic simulation, dataset building and HiMSNet forecasting"};
  app.require_subcommand(1);
  Overrides o;
  bool verbose{false};
  std::string modalities;
  app.add_option("--config", o.config, "JSON run configuration (or a stage manifest)");
  app.add_option("--seed", o.seed, "Seed for this stage");
  app.add_option("--sessions", o.sessions, "Number of simulated sessions")->check(CLI::PositiveNumber);
  app.add_option("--coverage", o.coverage, "Sensor coverage of both modalities, (0, 1]");
  app.add_option("--noise-ld", o.noiseLd, "Loop detector noise sigma");
  app.add_option("--noise-drone", o.noiseDrone, "Drone noise sigma");
  app.add_option("--modalities", o.modalities, "Input modalities")->check(CLI::IsMember({"drone", "ld", "both"}));
  app.add_flag("--no-gnn", o.noGnn, "Disable message exchange over the road graph");
  app.add_option("--hops", o.hops, "Adjacency hops")->check(CLI::PositiveNumber);
  app.add_option("--jobs", o.jobs, "Worker threads")->check(CLI::PositiveNumber);
  app.add_option("--out", o.out, "Run directory");
  app.add_flag("-v,--verbose", verbose, "Debug logging");

  auto* simulate = app.add_subcommand("simulate", "Simulate sessions into trajectory CSVs");
  auto* dataset = app.add_subcommand("dataset", "Build the dataset from simulated sessions");
  auto* train = app.add_subcommand("train", "Train HiMSNet on the dataset");
  auto* evaluate = app.add_subcommand("eval", "Evaluate the trained checkpoint");
  auto* baseline = app.add_subcommand("baseline", "Evaluate the LO, IA and LA baselines");
  auto* report = app.add_subcommand("report", "MFD, travel-time, grouped-error and coverage-sweep CSVs");
  for (auto* sub : {simulate, dataset, train, evaluate, baseline, report}) {
    sub->fallthrough();
  }

  try {
    app.parse(argc, argv);
  } catch (CLI::CallForHelp const& e) {
    return app.exit(e);
  } catch (CLI::CallForAllHelp const& e) {
    return app.exit(e);
  } catch (CLI::ParseError const& e) {
    fail(kExitUsage, "usage", e.what());
    return kExitUsage;
  }
  spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);

  try {
    auto const c{resolveConfig(o)};
    if (simulate->parsed()) {
      runSimulate(c);
    } else if (dataset->parsed()) {
      runDataset(c);
    } else if (train->parsed()) {
      runTrain(c);
    } else if (evaluate->parsed()) {
      runEval(c);
    } else if (baseline->parsed()) {
      runBaseline(c);
    } else {
      runReport(c);
    }
  } catch (MissingArtifact const& e) {
    fail(kExitMissing, "missing_artifact", e.what(), {{"path", e.path().string()}});
    return kExitMissing;
  } catch (ConfigError const& e) {
    fail(kExitConfig, "config", e.what());
    return kExitConfig;
  } catch (std::exception const& e) {
    fail(kExitRuntime, "runtime", e.what());
    return kExitRuntime;
  }
  return 0;
}
