#include "mst/dataset.hpp"

#include <algorithm>
#include <array>
#include <iterator>
#include <limits>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <ostream>
#include <stdexcept>

namespace mst::data {

  namespace fs = std::filesystem;

  std::vector<MSTSSample> extractSamples(sensors::ObservedSession const& obs, double seriesStart,
                                         int session, double demandScale, bool trainLabels) {
    auto const& seg{trainLabels ? obs.segTrain : obs.segEval};
    auto const& reg{trainLabels ? obs.regTrain : obs.regEval};
    auto const coarseNeeded{kSamplesPerSession - 1 + kCoarseInputSteps + kLabelSteps};
    auto const fineNeeded{(kSamplesPerSession - 1) * kFinePerCoarse + kFineInputSteps};
    if (obs.ldInput.cols < coarseNeeded || seg.cols < coarseNeeded || reg.cols < coarseNeeded ||
        obs.droneInput.cols < fineNeeded) {
      throw std::invalid_argument("observed series cover " + std::to_string(obs.ldInput.cols) +
                                  " coarse steps, " + std::to_string(coarseNeeded) + " needed");
    }
    auto const n{obs.droneInput.rows};
    auto const r{reg.rows};
    auto const copyBlock = [](SeriesMatrix const& m, std::size_t c0, std::size_t len) {
      std::vector<float> out(m.rows * len);
      for (std::size_t row{0}; row < m.rows; ++row) {
        for (std::size_t c{0}; c < len; ++c) {
          out[row * len + c] = static_cast<float>(m(row, c0 + c));
        }
      }
      return out;
    };
    std::vector<MSTSSample> out;
    out.reserve(kSamplesPerSession);
    for (std::size_t k{0}; k < kSamplesPerSession; ++k) {
      MSTSSample s;
      s.session = session;
      s.window = static_cast<int>(k);
      s.start = seriesStart + 180.0 * static_cast<double>(k);
      s.demandScale = demandScale;
      s.segments = n;
      s.regions = r;
      s.drone = copyBlock(obs.droneInput, k * kFinePerCoarse, kFineInputSteps);
      s.ld = copyBlock(obs.ldInput, k, kCoarseInputSteps);
      s.seg = copyBlock(seg, k + kCoarseInputSteps, kLabelSteps);
      s.reg = copyBlock(reg, k + kCoarseInputSteps, kLabelSteps);
      out.push_back(std::move(s));
    }
    return out;
  }

  void Normalizer::apply(ModalityStats const& s, std::span<float> values) noexcept {
    for (auto& v : values) {
      if (!isMissing(v)) {
        v = static_cast<float>((static_cast<double>(v) - s.mean) / s.std);
      }
    }
  }

  void Normalizer::invert(ModalityStats const& s, std::span<float> values) noexcept {
    for (auto& v : values) {
      if (!isMissing(v)) {
        v = static_cast<float>(static_cast<double>(v) * s.std + s.mean);
      }
    }
  }

  void Normalizer::apply(MSTSSample& sample) const noexcept {
    apply(drone, sample.drone);
    apply(ld, sample.ld);
    apply(labels(), sample.seg);
    apply(labels(), sample.reg);
  }

  namespace {
    struct Moments {
      double sum{0.0};
      double sumSq{0.0};
      std::size_t n{0};
      void add(std::span<float const> values) {
        for (auto v : values) {
          if (!isMissing(v)) {
            sum += v;
            sumSq += static_cast<double>(v) * v;
            ++n;
          }
        }
      }
      [[nodiscard]] ModalityStats stats(char const* what) const {
        if (n == 0) {
          throw std::invalid_argument(std::string{"no present value for "} + what);
        }
        auto const mean{sum / static_cast<double>(n)};
        auto const var{std::max(0.0, sumSq / static_cast<double>(n) - mean * mean)};
        return {mean, std::max(kStdFloor, std::sqrt(var))};
      }
    };
  }  // namespace

  ModalityStats fitStats(std::span<float const> values) {
    Moments m;
    m.add(values);
    return m.stats("series");
  }

  Normalizer fitNormalizer(std::span<MSTSSample const> train) {
    Moments drone;
    Moments ld;
    for (auto const& s : train) {
      drone.add(s.drone);
      ld.add(s.ld);
    }
    return {drone.stats("drone input"), ld.stats("loop detector input")};
  }

  SessionSplit splitSessions(std::size_t sessions, std::size_t nTrain, std::uint64_t seed) {
    if (nTrain == 0 || nTrain >= sessions) {
      throw std::invalid_argument("training count must lie in (0, sessions)");
    }
    std::vector<int> ids(sessions);
    std::iota(ids.begin(), ids.end(), 0);
    Rng rng{seed};
    for (std::size_t i{sessions - 1}; i > 0; --i) {
      std::swap(ids[i], ids[uniformIndex(rng, i + 1)]);
    }
    SessionSplit out;
    out.train.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(nTrain));
    out.test.assign(ids.begin() + static_cast<std::ptrdiff_t>(nTrain), ids.end());
    std::sort(out.train.begin(), out.train.end());
    std::sort(out.test.begin(), out.test.end());
    return out;
  }

  void to_json(nlohmann::json& j, Normalizer const& n) {
    j = nlohmann::json{{"drone", {{"mean", n.drone.mean}, {"std", n.drone.std}}},
                       {"ld", {{"mean", n.ld.mean}, {"std", n.ld.std}}}};
  }

  void from_json(nlohmann::json const& j, Normalizer& n) {
    n.drone = {j.at("drone").at("mean").get<double>(), j.at("drone").at("std").get<double>()};
    n.ld = {j.at("ld").at("mean").get<double>(), j.at("ld").at("std").get<double>()};
  }

  void to_json(nlohmann::json& j, DatasetManifest const& m) {
    j = nlohmann::json{{"format", "msts-dataset"},
                       {"version", m.version},
                       {"seed", m.seed},
                       {"segments", m.segments},
                       {"regions", m.regions},
                       {"samples", m.samples},
                       {"normalizer", m.normalizer},
                       {"extra", m.extra}};
  }

  void from_json(nlohmann::json const& j, DatasetManifest& m) {
    if (j.value("format", std::string{}) != "msts-dataset") {
      throw std::runtime_error("not a dataset manifest");
    }
    m.version = j.at("version").get<int>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.segments = j.at("segments").get<std::size_t>();
    m.regions = j.at("regions").get<std::size_t>();
    m.samples = j.at("samples").get<std::size_t>();
    m.normalizer = j.at("normalizer").get<Normalizer>();
    m.extra = j.value("extra", nlohmann::json::object());
  }

  namespace {
    struct BlockInfo {
      char const* name;
      std::vector<float> MSTSSample::*member;
      bool regional;
      std::size_t cols;
    };

    constexpr std::array<BlockInfo, 4> kBlocks{{{"drone", &MSTSSample::drone, false, kFineInputSteps},
                                                {"ld", &MSTSSample::ld, false, kCoarseInputSteps},
                                                {"seg_labels", &MSTSSample::seg, false, kLabelSteps},
                                                {"reg_labels", &MSTSSample::reg, true, kLabelSteps}}};

    std::string recordStem(std::size_t index) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%06zu", index);
      return buf;
    }

    void putFloat(std::string& out, float v) {
      auto const bits{std::bit_cast<std::uint32_t>(v)};
      for (int b{0}; b < 4; ++b) {
        out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFFU));
      }
    }

    float getFloat(char const* p) {
      std::uint32_t bits{0};
      for (int b{0}; b < 4; ++b) {
        bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[b])) << (8 * b);
      }
      return std::bit_cast<float>(bits);
    }

    void writeText(fs::path const& path, std::string const& text) {
      std::ofstream out{path, std::ios::binary | std::ios::trunc};
      if (!out) {
        throw std::runtime_error("cannot write " + path.string());
      }
      out << text;
      if (!out) {
        throw std::runtime_error("write failed for " + path.string());
      }
    }

    std::string readText(fs::path const& path) {
      std::ifstream in{path, std::ios::binary};
      if (!in) {
        throw std::runtime_error("cannot read " + path.string());
      }
      return {std::istreambuf_iterator<char>{in}, std::istreambuf_iterator<char>{}};
    }

    void writeRecord(fs::path const& dir, std::size_t index, MSTSSample const& s) {
      std::string bytes;
      auto tensors = nlohmann::json::array();
      auto masks = nlohmann::json::array();
      for (auto const& b : kBlocks) {
        auto const& v{s.*(b.member)};
        auto const rows{b.regional ? s.regions : s.segments};
        if (v.size() != rows * b.cols) {
          throw std::invalid_argument(std::string{"sample block "} + b.name + " has the wrong size");
        }
        tensors.push_back({{"name", b.name}, {"shape", {rows, b.cols}}, {"offset", bytes.size()}, {"dtype", "f32le"}});
        for (auto x : v) {
          putFloat(bytes, x);
        }
      }
      for (auto const& b : kBlocks) {
        auto const& v{s.*(b.member)};
        auto const rows{b.regional ? s.regions : s.segments};
        masks.push_back({{"name", b.name}, {"shape", {rows, b.cols}}, {"offset", bytes.size()}, {"dtype", "u8"}});
        for (auto x : v) {
          bytes.push_back(isMissing(x) ? '\0' : '\1');
        }
      }
      nlohmann::json side{{"session", s.session},    {"window", s.window},  {"start_s", s.start},
                          {"demand_scale", s.demandScale}, {"bytes", bytes.size()},
                          {"tensors", tensors},     {"masks", masks}};
      auto const stem{recordStem(index)};
      writeText(dir / "samples" / (stem + ".bin"), bytes);
      writeText(dir / "samples" / (stem + ".json"), side.dump(1));
    }

    MSTSSample readRecord(fs::path const& dir, std::size_t index, DatasetManifest const& m) {
      auto const stem{recordStem(index)};
      auto const side = nlohmann::json::parse(readText(dir / "samples" / (stem + ".json")));
      auto const bytes{readText(dir / "samples" / (stem + ".bin"))};
      if (side.at("bytes").get<std::size_t>() != bytes.size()) {
        throw std::runtime_error("record " + stem + " is truncated");
      }
      MSTSSample s;
      s.session = side.at("session").get<int>();
      s.window = side.at("window").get<int>();
      s.start = side.at("start_s").get<double>();
      s.demandScale = side.at("demand_scale").get<double>();
      s.segments = m.segments;
      s.regions = m.regions;
      auto const& tensors{side.at("tensors")};
      auto const& masks{side.at("masks")};
      if (tensors.size() != kBlocks.size() || masks.size() != kBlocks.size()) {
        throw std::runtime_error("record " + stem + " has an unexpected tensor list");
      }
      for (std::size_t i{0}; i < kBlocks.size(); ++i) {
        auto const& b{kBlocks[i]};
        auto const rows{b.regional ? m.regions : m.segments};
        auto const& t{tensors[i]};
        auto const shape{t.at("shape").get<std::vector<std::size_t>>()};
        if (t.at("name").get<std::string>() != b.name || shape != std::vector<std::size_t>{rows, b.cols}) {
          throw std::runtime_error("record " + stem + ": corrupt shape for " + b.name);
        }
        auto const count{rows * b.cols};
        auto const off{t.at("offset").get<std::size_t>()};
        auto const maskOff{masks[i].at("offset").get<std::size_t>()};
        if (off + 4 * count > bytes.size() || maskOff + count > bytes.size()) {
          throw std::runtime_error("record " + stem + ": block " + b.name + " exceeds the file");
        }
        auto& v{s.*(b.member)};
        v.resize(count);
        for (std::size_t k{0}; k < count; ++k) {
          auto const present{bytes[maskOff + k] != '\0'};
          v[k] = present ? getFloat(bytes.data() + off + 4 * k) : std::numeric_limits<float>::quiet_NaN();
        }
      }
      return s;
    }

    void checkVersion(DatasetManifest const& m) {
      if (m.version != kFormatVersion) {
        throw std::runtime_error("dataset format version " + std::to_string(m.version) +
                                 " is not supported (expected " + std::to_string(kFormatVersion) + ")");
      }
    }
  }  // namespace

  void writeDataset(fs::path const& dir, DatasetManifest manifest, std::span<MSTSSample const> samples) {
    fs::create_directories(dir / "samples");
    for (auto const& entry : fs::directory_iterator(dir / "samples")) {
      fs::remove(entry.path());
    }
    for (std::size_t i{0}; i < samples.size(); ++i) {
      if (samples[i].segments != manifest.segments || samples[i].regions != manifest.regions) {
        throw std::invalid_argument("sample shape does not match the manifest");
      }
      writeRecord(dir, i, samples[i]);
    }
    manifest.samples = samples.size();
    nlohmann::json j = manifest;
    writeText(dir / "manifest.json", j.dump(2));
  }

  void appendDataset(fs::path const& dir, DatasetManifest const& manifest, std::span<MSTSSample const> samples) {
    auto current{readManifest(dir)};
    if (current.seed != manifest.seed) {
      throw std::runtime_error("manifest seed mismatch: dataset has " + std::to_string(current.seed) +
                               ", append requested with " + std::to_string(manifest.seed));
    }
    if (current.segments != manifest.segments || current.regions != manifest.regions) {
      throw std::runtime_error("manifest shape mismatch on append");
    }
    for (std::size_t i{0}; i < samples.size(); ++i) {
      if (samples[i].segments != current.segments || samples[i].regions != current.regions) {
        throw std::invalid_argument("sample shape does not match the manifest");
      }
      writeRecord(dir, current.samples + i, samples[i]);
    }
    current.samples += samples.size();
    nlohmann::json j = current;
    writeText(dir / "manifest.json", j.dump(2));
  }

  DatasetManifest readManifest(fs::path const& dir) {
    auto const path{dir / "manifest.json"};
    if (!fs::exists(path)) {
      throw std::runtime_error("no dataset manifest at " + path.string());
    }
    DatasetManifest m;
    try {
      m = nlohmann::json::parse(readText(path)).get<DatasetManifest>();
    } catch (nlohmann::json::exception const& e) {
      throw std::runtime_error("corrupt dataset manifest: " + std::string{e.what()});
    }
    checkVersion(m);
    return m;
  }

  Dataset readDataset(fs::path const& dir) {
    Dataset d;
    d.manifest = readManifest(dir);
    d.samples.reserve(d.manifest.samples);
    try {
      for (std::size_t i{0}; i < d.manifest.samples; ++i) {
        d.samples.push_back(readRecord(dir, i, d.manifest));
      }
    } catch (nlohmann::json::exception const& e) {
      throw std::runtime_error("corrupt dataset record: " + std::string{e.what()});
    }
    return d;
  }

  void writeBlockCsv(std::ostream& out, std::span<float const> values, std::size_t rows, std::size_t cols) {
    for (std::size_t r{0}; r < rows; ++r) {
      out << r;
      for (std::size_t c{0}; c < cols; ++c) {
        out << ',' << sim::formatNumber(static_cast<double>(values[r * cols + c]));
      }
      out << '\n';
    }
  }

}  // namespace mst::data
