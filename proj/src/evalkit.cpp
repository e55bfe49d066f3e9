#include "mst/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "mst/simcore.hpp"

namespace mst::eval {

  MetricAccumulator::MetricAccumulator(std::size_t locations) : m_sums(locations) {}

  void MetricAccumulator::add(std::size_t location, double pred, double label) {
    if (isMissing(label)) {
      return;
    }
    auto& s{m_sums.at(location)};
    auto const err{pred - label};
    s.abs += std::abs(err);
    s.sq += err * err;
    ++s.n;
    if (label > kMapeFloor) {
      s.pct += std::abs(err) / label;
      ++s.nPct;
    }
  }

  Metrics MetricAccumulator::result() const {
    Metrics m;
    double mae{0.0};
    double rmse{0.0};
    double mape{0.0};
    std::size_t locations{0};
    std::size_t mapeLocations{0};
    for (auto const& s : m_sums) {
      if (s.n > 0) {
        auto const n{static_cast<double>(s.n)};
        mae += s.abs / n;
        rmse += std::sqrt(s.sq / n);
        ++locations;
        m.count += s.n;
      }
      if (s.nPct > 0) {
        mape += 100.0 * s.pct / static_cast<double>(s.nPct);
        ++mapeLocations;
        m.mapeCount += s.nPct;
      }
    }
    if (locations > 0) {
      m.mae = mae / static_cast<double>(locations);
      m.rmse = rmse / static_cast<double>(locations);
    }
    if (mapeLocations > 0) {
      m.mape = mape / static_cast<double>(mapeLocations);
    }
    return m;
  }

  Metrics metrics(std::span<double const> pred, std::span<double const> label) {
    if (pred.size() != label.size()) {
      throw std::invalid_argument("metrics: prediction and label lengths differ");
    }
    MetricAccumulator acc{1};
    for (std::size_t i{0}; i < pred.size(); ++i) {
      acc.add(0, pred[i], label[i]);
    }
    return acc.result();
  }

  namespace {
    void checkAligned(std::span<SamplePrediction const> preds, std::span<data::MSTSSample const> samples) {
      if (preds.size() != samples.size()) {
        throw std::invalid_argument("evaluation: " + std::to_string(preds.size()) + " predictions for " +
                                    std::to_string(samples.size()) + " samples");
      }
      for (std::size_t i{0}; i < preds.size(); ++i) {
        auto const& p{preds[i]};
        auto const& s{samples[i]};
        if (static_cast<std::size_t>(p.seg.rows()) != s.segments || p.seg.cols() != data::kLabelSteps ||
            static_cast<std::size_t>(p.reg.rows()) != s.regions || p.reg.cols() != data::kLabelSteps) {
          throw std::invalid_argument("evaluation: prediction shape does not match sample " + std::to_string(i));
        }
      }
    }

    double labelAt(std::vector<float> const& block, std::size_t row, std::size_t col) {
      return static_cast<double>(block[row * data::kLabelSteps + col]);
    }

    TaskReport taskReport(std::span<SamplePrediction const> preds, std::span<data::MSTSSample const> samples,
                          bool regional) {
      TaskReport r;
      for (int h{0}; h < 2; ++h) {
        auto const col{kHorizonSteps[h]};
        auto const locations{samples.empty() ? 0 : (regional ? samples[0].regions : samples[0].segments)};
        MetricAccumulator acc{locations};
        for (std::size_t i{0}; i < samples.size(); ++i) {
          auto const& pred{regional ? preds[i].reg : preds[i].seg};
          auto const& labels{regional ? samples[i].reg : samples[i].seg};
          for (std::size_t p{0}; p < locations; ++p) {
            acc.add(p, pred(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(col)), labelAt(labels, p, col));
          }
        }
        (h == 0 ? r.at15 : r.at30) = acc.result();
      }
      return r;
    }
  }  // namespace

  EvalReport evaluate(std::string method, std::span<SamplePrediction const> preds,
                      std::span<data::MSTSSample const> samples) {
    checkAligned(preds, samples);
    return {std::move(method), taskReport(preds, samples, false), taskReport(preds, samples, true)};
  }

  std::string baselineName(BaselineKind kind, InputModality modality) {
    auto const mod{modality == InputModality::Drone ? std::string{"drone"} : std::string{"ld"}};
    switch (kind) {
      case BaselineKind::LastObservation:
        return "LO(" + mod + ")";
      case BaselineKind::InputAverage:
        return "IA(" + mod + ")";
      case BaselineKind::LabelAverage:
        return "LA";
    }
    return "?";
  }

  namespace {
    double medianOf(std::vector<double> v) {
      auto const mid{v.size() / 2};
      std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
      auto const hi{v[mid]};
      if (v.size() % 2 == 1) {
        return hi;
      }
      auto const lo{*std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid))};
      return 0.5 * (lo + hi);
    }

    struct Pooled {
      double mean{0.0};
      double median{0.0};
      std::vector<double> perLocation;
    };

    Pooled pool(std::span<data::MSTSSample const> test, bool regional, char const* task) {
      auto const locations{test.empty() ? 0 : (regional ? test[0].regions : test[0].segments)};
      std::vector<double> all;
      std::vector<double> sums(locations, 0.0);
      std::vector<std::size_t> counts(locations, 0);
      for (auto const& s : test) {
        auto const& block{regional ? s.reg : s.seg};
        for (std::size_t i{0}; i < block.size(); ++i) {
          if (!isMissing(block[i])) {
            all.push_back(static_cast<double>(block[i]));
            sums[i / data::kLabelSteps] += static_cast<double>(block[i]);
            ++counts[i / data::kLabelSteps];
          }
        }
      }
      if (all.empty()) {
        throw std::invalid_argument(std::string{"label average: no present "} + task + " label");
      }
      Pooled p;
      double total{0.0};
      for (auto v : all) {
        total += v;
      }
      p.mean = total / static_cast<double>(all.size());
      p.median = medianOf(std::move(all));
      for (std::size_t l{0}; l < locations; ++l) {
        p.perLocation.push_back(counts[l] > 0 ? sums[l] / static_cast<double>(counts[l]) : kMissing);
      }
      return p;
    }
  }  // namespace

  LabelAverage labelAverage(std::span<data::MSTSSample const> test) {
    auto const seg{pool(test, false, "segment")};
    auto const reg{pool(test, true, "regional")};
    return {seg.mean, reg.mean, seg.median, reg.median, seg.perLocation, reg.perLocation};
  }

  SamplePrediction labelAveragePrediction(LabelAverage const& la, std::size_t segments, std::size_t regions,
                                          LabelStatistic stat) {
    auto const rowsS{static_cast<Eigen::Index>(segments)};
    auto const rowsR{static_cast<Eigen::Index>(regions)};
    auto const cols{static_cast<Eigen::Index>(data::kLabelSteps)};
    SamplePrediction p;
    switch (stat) {
      case LabelStatistic::Mean:
        p.seg = Matrix::Constant(rowsS, cols, la.seg);
        p.reg = Matrix::Constant(rowsR, cols, la.reg);
        break;
      case LabelStatistic::Median:
        p.seg = Matrix::Constant(rowsS, cols, la.segMedian);
        p.reg = Matrix::Constant(rowsR, cols, la.regMedian);
        break;
      case LabelStatistic::PerLocationMean:
        p.seg.resize(rowsS, cols);
        p.reg.resize(rowsR, cols);
        for (Eigen::Index r{0}; r < rowsS; ++r) {
          auto const v{la.perSegment.at(static_cast<std::size_t>(r))};
          p.seg.row(r).setConstant(isMissing(v) ? la.seg : v);
        }
        for (Eigen::Index r{0}; r < rowsR; ++r) {
          auto const v{la.perRegion.at(static_cast<std::size_t>(r))};
          p.reg.row(r).setConstant(isMissing(v) ? la.reg : v);
        }
        break;
    }
    return p;
  }

  BaselineInputs baselineInputs(data::MSTSSample const& s) { return {s.drone, s.ld, s.segments}; }

  SamplePrediction inputBaseline(BaselineKind kind, InputModality modality, BaselineInputs const& in,
                                 std::vector<std::vector<int>> const& regionMembers, double fallback) {
    if (kind == BaselineKind::LabelAverage) {
      throw std::invalid_argument("inputBaseline: the label average is not an input baseline");
    }
    auto const block{modality == InputModality::Drone ? in.drone : in.ld};
    if (in.segments == 0 || block.size() % in.segments != 0) {
      throw std::invalid_argument("inputBaseline: input block does not match the segment count");
    }
    auto const steps{block.size() / in.segments};
    auto const cols{static_cast<Eigen::Index>(data::kLabelSteps)};
    SamplePrediction p;
    p.seg.resize(static_cast<Eigen::Index>(in.segments), cols);
    for (std::size_t s{0}; s < in.segments; ++s) {
      auto const row{block.subspan(s * steps, steps)};
      double value{kMissing};
      if (kind == BaselineKind::LastObservation) {
        for (auto it{row.rbegin()}; it != row.rend(); ++it) {
          if (!isMissing(*it)) {
            value = static_cast<double>(*it);
            break;
          }
        }
      } else {
        double sum{0.0};
        std::size_t n{0};
        for (auto v : row) {
          if (!isMissing(v)) {
            sum += static_cast<double>(v);
            ++n;
          }
        }
        if (n > 0) {
          value = sum / static_cast<double>(n);
        }
      }
      p.seg.row(static_cast<Eigen::Index>(s)).setConstant(isMissing(value) ? fallback : value);
    }
    p.reg.resize(static_cast<Eigen::Index>(regionMembers.size()), cols);
    for (std::size_t r{0}; r < regionMembers.size(); ++r) {
      Eigen::RowVectorXd acc{Eigen::RowVectorXd::Zero(cols)};
      for (int m : regionMembers[r]) {
        acc += p.seg.row(m);
      }
      p.reg.row(static_cast<Eigen::Index>(r)) =
          regionMembers[r].empty() ? Eigen::RowVectorXd::Constant(cols, fallback)
                                   : Eigen::RowVectorXd{acc / static_cast<double>(regionMembers[r].size())};
    }
    return p;
  }

  namespace {
    /// MAE at both horizons over the segments of each sample accepted by `location`; each group
    /// averages per segment first.
    template <typename KeyFn>
    std::vector<GroupRow> groupSegments(std::span<SamplePrediction const> preds,
                                        std::span<data::MSTSSample const> samples, KeyFn key) {
      checkAligned(preds, samples);
      std::map<std::string, std::pair<MetricAccumulator, MetricAccumulator>> groups;
      std::map<std::string, std::size_t> counts;
      auto const segs{samples.empty() ? 0 : samples[0].segments};
      for (std::size_t i{0}; i < samples.size(); ++i) {
        for (std::size_t p{0}; p < segs; ++p) {
          auto const k{key(i, p)};
          if (k.empty()) {
            continue;
          }
          auto [it, fresh] = groups.try_emplace(k, MetricAccumulator{segs}, MetricAccumulator{segs});
          for (int h{0}; h < 2; ++h) {
            auto const col{kHorizonSteps[h]};
            auto const label{labelAt(samples[i].seg, p, col)};
            auto& acc{h == 0 ? it->second.first : it->second.second};
            acc.add(p, preds[i].seg(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(col)), label);
            if (h == 1 && !isMissing(label)) {
              ++counts[k];
            }
          }
        }
      }
      std::vector<GroupRow> rows;
      for (auto const& [k, accs] : groups) {
        rows.push_back({k, counts[k], accs.first.result().mae, accs.second.result().mae});
      }
      return rows;
    }

    std::string fixed(double v, int digits) {
      std::ostringstream s;
      s.setf(std::ios::fixed);
      s.precision(digits);
      s << v;
      return s.str();
    }
  }  // namespace

  std::vector<GroupRow> groupByDemandScale(std::span<SamplePrediction const> preds,
                                           std::span<data::MSTSSample const> samples) {
    return groupSegments(preds, samples, [&](std::size_t i, std::size_t) {
      return fixed(std::floor(samples[i].demandScale * 10.0 + 1e-9) / 10.0, 1);
    });
  }

  std::vector<GroupRow> groupByAverageSpeed(std::span<SamplePrediction const> preds,
                                            std::span<data::MSTSSample const> samples) {
    auto const segs{samples.empty() ? 0 : samples[0].segments};
    std::vector<double> sum(segs, 0.0);
    std::vector<std::size_t> n(segs, 0);
    for (auto const& s : samples) {
      for (std::size_t i{0}; i < s.seg.size(); ++i) {
        if (!isMissing(s.seg[i])) {
          sum[i / data::kLabelSteps] += static_cast<double>(s.seg[i]);
          ++n[i / data::kLabelSteps];
        }
      }
    }
    std::vector<std::string> binOf(segs);
    for (std::size_t p{0}; p < segs; ++p) {
      if (n[p] == 0) {
        continue;
      }
      auto const mean{sum[p] / static_cast<double>(n[p])};
      auto const bin{std::clamp(static_cast<int>(std::floor(mean / 2.0)), 0, 6)};
      binOf[p] = "[" + std::to_string(2 * bin) + "," + std::to_string(2 * bin + 2) + ")";
      if (bin < 5) {
        binOf[p] = " " + binOf[p];  // keeps lexical order equal to numeric order
      }
    }
    auto rows{groupSegments(preds, samples, [&](std::size_t, std::size_t p) { return binOf[p]; })};
    for (auto& r : rows) {
      if (!r.key.empty() && r.key.front() == ' ') {
        r.key.erase(0, 1);
      }
    }
    return rows;
  }

  std::vector<SegmentRow> groupBySegment(std::span<SamplePrediction const> preds,
                                         std::span<data::MSTSSample const> samples, roadnet::RoadGraph const& graph) {
    checkAligned(preds, samples);
    auto const segs{samples.empty() ? graph.size() : samples[0].segments};
    if (segs != graph.size()) {
      throw std::invalid_argument("groupBySegment: samples and network disagree on the segment count");
    }
    std::vector<SegmentRow> rows;
    for (std::size_t p{0}; p < segs; ++p) {
      MetricAccumulator a15{1};
      MetricAccumulator a30{1};
      for (std::size_t i{0}; i < samples.size(); ++i) {
        a15.add(0, preds[i].seg(static_cast<Eigen::Index>(p), 4), labelAt(samples[i].seg, p, 4));
        a30.add(0, preds[i].seg(static_cast<Eigen::Index>(p), 9), labelAt(samples[i].seg, p, 9));
      }
      rows.push_back({static_cast<int>(p), graph.segment(static_cast<int>(p)).midpoint, a15.result().mae,
                      a30.result().mae});
    }
    return rows;
  }

  std::string formatMetric(std::optional<double> v) { return v ? sim::formatNumber(*v) : std::string{"n/a"}; }

  void writeReportCsv(std::ostream& out, std::span<EvalReport const> reports) {
    out << "method,task,horizon_min,mae,rmse,mape_star,count\n";
    for (auto const& r : reports) {
      for (auto const* task : {"segment", "regional"}) {
        auto const& t{std::string{task} == "segment" ? r.segment : r.regional};
        for (auto const& [minutes, m] : {std::pair{15, t.at15}, std::pair{30, t.at30}}) {
          out << r.method << ',' << task << ',' << minutes << ',' << formatMetric(m.mae) << ','
              << formatMetric(m.rmse) << ',' << formatMetric(m.mape) << ',' << m.count << '\n';
        }
      }
    }
  }

  void writeTableCsv(std::ostream& out, std::span<EvalReport const> reports) {
    out << "method";
    for (auto const* task : {"seg", "reg"}) {
      for (auto const* h : {"15", "30"}) {
        for (auto const* m : {"mae", "rmse", "mape_star"}) {
          out << ',' << task << '_' << h << '_' << m;
        }
      }
    }
    out << '\n';
    for (auto const& r : reports) {
      out << r.method;
      for (auto const* t : {&r.segment, &r.regional}) {
        for (auto const* m : {&t->at15, &t->at30}) {
          out << ',' << formatMetric(m->mae) << ',' << formatMetric(m->rmse) << ',' << formatMetric(m->mape);
        }
      }
      out << '\n';
    }
  }

  void writeGroupCsv(std::ostream& out, std::string const& keyName, std::span<GroupRow const> rows) {
    out << keyName << ",count,mae_15,mae_30\n";
    for (auto const& r : rows) {
      out << r.key << ',' << r.count << ',' << formatMetric(r.mae15) << ',' << formatMetric(r.mae30) << '\n';
    }
  }

  void writeSegmentCsv(std::ostream& out, std::span<SegmentRow const> rows) {
    out << "segment_id,x,y,mae_15,mae_30\n";
    for (auto const& r : rows) {
      out << r.segment << ',' << sim::formatNumber(r.midpoint.x) << ',' << sim::formatNumber(r.midpoint.y) << ','
          << formatMetric(r.mae15) << ',' << formatMetric(r.mae30) << '\n';
    }
  }

}  // namespace mst::eval
