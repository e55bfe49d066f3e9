#include "mst/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <unordered_set>

#include "mst/common.hpp"

namespace mst::ad {

  namespace {
    std::string shapeOf(Tensor const& t) {
      return "[" + std::to_string(t.rows()) + "x" + std::to_string(t.cols()) + "]";
    }

    void requireSameShape(Tensor const& a, Tensor const& b, char const* op) {
      if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw std::invalid_argument(std::string{op} + ": shape mismatch " + shapeOf(a) + " vs " + shapeOf(b));
      }
    }

    thread_local bool tNoGrad{false};

    /// Builds the result node; the closure is dropped when no input needs a gradient.
    Tensor makeResult(Matrix value, std::vector<std::shared_ptr<Node>> parents,
                      std::function<void(Matrix const&)> fn) {
      auto node{std::make_shared<Node>()};
      node->value = std::move(value);
      for (auto const& p : parents) {
        node->requiresGrad = node->requiresGrad || p->requiresGrad;
      }
      node->requiresGrad = node->requiresGrad && !tNoGrad;
      if (node->requiresGrad) {
        node->parents = std::move(parents);
        node->backward = std::move(fn);
      }
      return Tensor{node};
    }

    double sigmoidScalar(double x) { return 1.0 / (1.0 + std::exp(-x)); }
  }  // namespace

  NoGradGuard::NoGradGuard() : m_previous{tNoGrad} { tNoGrad = true; }

  NoGradGuard::~NoGradGuard() { tNoGrad = m_previous; }

  void Node::accumulate(Matrix const& g) {
    if (!requiresGrad) {
      return;
    }
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }

  Tensor::Tensor(Matrix value, bool requiresGrad) : m_node{std::make_shared<Node>()} {
    m_node->value = std::move(value);
    m_node->requiresGrad = requiresGrad;
  }

  Tensor Tensor::zeros(Eigen::Index rows, Eigen::Index cols) { return Tensor{Matrix::Zero(rows, cols)}; }

  Tensor Tensor::full(Eigen::Index rows, Eigen::Index cols, double v) {
    return Tensor{Matrix::Constant(rows, cols, v)};
  }

  Matrix Tensor::grad() const {
    if (m_node->grad.size() == 0) {
      return Matrix::Zero(rows(), cols());
    }
    return m_node->grad;
  }

  double Tensor::item() const {
    if (m_node->value.size() != 1) {
      throw std::invalid_argument("item: tensor is " + shapeOf(*this));
    }
    return m_node->value(0, 0);
  }

  void Tensor::zeroGrad() {
    if (m_node) {
      m_node->grad.resize(0, 0);
    }
  }

  void backward(Tensor const& loss) {
    if (loss.rows() != 1 || loss.cols() != 1) {
      throw std::invalid_argument("backward: loss must be a scalar, got " + shapeOf(loss));
    }
    if (!loss.requiresGrad()) {
      return;
    }
    // Iterative post-order DFS gives a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        auto* p{node->parents[next++].get()};
        if (p->requiresGrad && p->backward && seen.insert(p).second) {
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    loss.node()->accumulate(Matrix::Ones(1, 1));
    for (auto it{order.rbegin()}; it != order.rend(); ++it) {
      auto* node{*it};
      if (node->backward && node->grad.size() != 0) {
        node->backward(node->grad);
      }
    }
  }

  Tensor matmul(Tensor const& a, Tensor const& b) {
    if (a.cols() != b.rows()) {
      throw std::invalid_argument("matmul: " + shapeOf(a) + " x " + shapeOf(b));
    }
    auto const na{a.node()};
    auto const nb{b.node()};
    return makeResult(a.value() * b.value(), {na, nb}, [na, nb](Matrix const& g) {
      if (na->requiresGrad) {
        na->accumulate(g * nb->value.transpose());
      }
      if (nb->requiresGrad) {
        nb->accumulate(na->value.transpose() * g);
      }
    });
  }

  Tensor linear(Tensor const& x, Tensor const& w, Tensor const& b) {
    if (x.cols() != w.cols()) {
      throw std::invalid_argument("linear: input " + shapeOf(x) + " vs weight " + shapeOf(w));
    }
    if (b.defined() && (b.rows() != 1 || b.cols() != w.rows())) {
      throw std::invalid_argument("linear: bias " + shapeOf(b) + " vs weight " + shapeOf(w));
    }
    Matrix y{x.value() * w.value().transpose()};
    if (b.defined()) {
      y.rowwise() += b.value().row(0);
    }
    auto const nx{x.node()};
    auto const nw{w.node()};
    std::vector<std::shared_ptr<Node>> parents{nx, nw};
    std::shared_ptr<Node> nb;
    if (b.defined()) {
      nb = b.node();
      parents.push_back(nb);
    }
    return makeResult(std::move(y), std::move(parents), [nx, nw, nb](Matrix const& g) {
      if (nx->requiresGrad) {
        nx->accumulate(g * nw->value);
      }
      if (nw->requiresGrad) {
        nw->accumulate(g.transpose() * nx->value);
      }
      if (nb && nb->requiresGrad) {
        nb->accumulate(g.colwise().sum());
      }
    });
  }

  Tensor add(Tensor const& a, Tensor const& b) {
    requireSameShape(a, b, "add");
    auto const na{a.node()};
    auto const nb{b.node()};
    return makeResult(a.value() + b.value(), {na, nb}, [na, nb](Matrix const& g) {
      na->accumulate(g);
      nb->accumulate(g);
    });
  }

  Tensor sub(Tensor const& a, Tensor const& b) {
    requireSameShape(a, b, "sub");
    auto const na{a.node()};
    auto const nb{b.node()};
    return makeResult(a.value() - b.value(), {na, nb}, [na, nb](Matrix const& g) {
      na->accumulate(g);
      if (nb->requiresGrad) {
        nb->accumulate(-g);
      }
    });
  }

  Tensor mul(Tensor const& a, Tensor const& b) {
    requireSameShape(a, b, "mul");
    auto const na{a.node()};
    auto const nb{b.node()};
    return makeResult(a.value().cwiseProduct(b.value()), {na, nb}, [na, nb](Matrix const& g) {
      if (na->requiresGrad) {
        na->accumulate(g.cwiseProduct(nb->value));
      }
      if (nb->requiresGrad) {
        nb->accumulate(g.cwiseProduct(na->value));
      }
    });
  }

  Tensor scale(Tensor const& a, double s) {
    auto const na{a.node()};
    return makeResult(a.value() * s, {na}, [na, s](Matrix const& g) { na->accumulate(g * s); });
  }

  Tensor addRow(Tensor const& a, Tensor const& row) {
    if (row.rows() != 1 || row.cols() != a.cols()) {
      throw std::invalid_argument("addRow: " + shapeOf(a) + " + " + shapeOf(row));
    }
    Matrix y{a.value()};
    y.rowwise() += row.value().row(0);
    auto const na{a.node()};
    auto const nr{row.node()};
    return makeResult(std::move(y), {na, nr}, [na, nr](Matrix const& g) {
      na->accumulate(g);
      if (nr->requiresGrad) {
        nr->accumulate(g.colwise().sum());
      }
    });
  }

  Tensor sigmoid(Tensor const& a) {
    Matrix y{a.value().unaryExpr(&sigmoidScalar)};
    auto const na{a.node()};
    return makeResult(y, {na}, [na, y](Matrix const& g) {
      na->accumulate(g.cwiseProduct(y.cwiseProduct((1.0 - y.array()).matrix())));
    });
  }

  Tensor tanh(Tensor const& a) {
    Matrix y{a.value().array().tanh().matrix()};
    auto const na{a.node()};
    return makeResult(y, {na}, [na, y](Matrix const& g) {
      na->accumulate((g.array() * (1.0 - y.array().square())).matrix());
    });
  }

  Tensor relu(Tensor const& a) {
    auto const na{a.node()};
    return makeResult(a.value().cwiseMax(0.0), {na}, [na](Matrix const& g) {
      na->accumulate((na->value.array() > 0.0).select(g, 0.0).matrix());
    });
  }

  Tensor concatCols(std::span<Tensor const> parts) {
    if (parts.empty()) {
      throw std::invalid_argument("concatCols: nothing to concatenate");
    }
    auto const rows{parts[0].rows()};
    Eigen::Index cols{0};
    for (auto const& p : parts) {
      if (p.rows() != rows) {
        throw std::invalid_argument("concatCols: row mismatch " + shapeOf(parts[0]) + " vs " + shapeOf(p));
      }
      cols += p.cols();
    }
    Matrix y(rows, cols);
    std::vector<std::shared_ptr<Node>> nodes;
    std::vector<Eigen::Index> offsets;
    Eigen::Index c{0};
    for (auto const& p : parts) {
      y.middleCols(c, p.cols()) = p.value();
      nodes.push_back(p.node());
      offsets.push_back(c);
      c += p.cols();
    }
    auto parents{nodes};
    return makeResult(std::move(y), std::move(parents), [nodes, offsets](Matrix const& g) {
      for (std::size_t i{0}; i < nodes.size(); ++i) {
        if (nodes[i]->requiresGrad) {
          nodes[i]->accumulate(g.middleCols(offsets[i], nodes[i]->value.cols()));
        }
      }
    });
  }

  Tensor sliceCols(Tensor const& a, Eigen::Index c0, Eigen::Index n) {
    if (c0 < 0 || n < 0 || c0 + n > a.cols()) {
      throw std::invalid_argument("sliceCols: columns out of range for " + shapeOf(a));
    }
    auto const na{a.node()};
    return makeResult(a.value().middleCols(c0, n), {na}, [na, c0, n](Matrix const& g) {
      Matrix full{Matrix::Zero(na->value.rows(), na->value.cols())};
      full.middleCols(c0, n) = g;
      na->accumulate(full);
    });
  }

  Tensor sliceRows(Tensor const& a, Eigen::Index r0, Eigen::Index n) {
    if (r0 < 0 || n < 0 || r0 + n > a.rows()) {
      throw std::invalid_argument("sliceRows: rows out of range for " + shapeOf(a));
    }
    auto const na{a.node()};
    return makeResult(a.value().middleRows(r0, n), {na}, [na, r0, n](Matrix const& g) {
      Matrix full{Matrix::Zero(na->value.rows(), na->value.cols())};
      full.middleRows(r0, n) = g;
      na->accumulate(full);
    });
  }

  Tensor gatherRows(Tensor const& a, std::span<Eigen::Index const> index) {
    auto const n{static_cast<Eigen::Index>(index.size())};
    Matrix y(n, a.cols());
    for (Eigen::Index i{0}; i < n; ++i) {
      auto const r{index[static_cast<std::size_t>(i)]};
      if (r < 0 || r >= a.rows()) {
        throw std::invalid_argument("gatherRows: index out of range for " + shapeOf(a));
      }
      y.row(i) = a.value().row(r);
    }
    auto const na{a.node()};
    std::vector<Eigen::Index> idx(index.begin(), index.end());
    return makeResult(std::move(y), {na}, [na, idx](Matrix const& g) {
      Matrix full{Matrix::Zero(na->value.rows(), na->value.cols())};
      for (std::size_t i{0}; i < idx.size(); ++i) {
        full.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
      }
      na->accumulate(full);
    });
  }

  Tensor reshape(Tensor const& a, Eigen::Index rows, Eigen::Index cols) {
    if (rows * cols != a.value().size()) {
      throw std::invalid_argument("reshape: " + shapeOf(a) + " cannot become [" + std::to_string(rows) + "x" +
                                  std::to_string(cols) + "]");
    }
    Matrix y{Eigen::Map<Matrix const>(a.value().data(), rows, cols)};
    auto const na{a.node()};
    return makeResult(std::move(y), {na}, [na](Matrix const& g) {
      na->accumulate(Eigen::Map<Matrix const>(g.data(), na->value.rows(), na->value.cols()));
    });
  }

  Tensor spmm(SparseMatrix const& s, Tensor const& x) {
    if (s.cols() != x.rows()) {
      throw std::invalid_argument("spmm: operator has " + std::to_string(s.cols()) + " columns, input " +
                                  shapeOf(x));
    }
    auto const nx{x.node()};
    Matrix y{s * x.value()};
    return makeResult(std::move(y), {nx}, [nx, s](Matrix const& g) {
      nx->accumulate(s.transpose() * g);
    });
  }

  Tensor sum(Tensor const& a) {
    auto const na{a.node()};
    return makeResult(Matrix::Constant(1, 1, a.value().sum()), {na}, [na](Matrix const& g) {
      na->accumulate(Matrix::Constant(na->value.rows(), na->value.cols(), g(0, 0)));
    });
  }

  Tensor mean(Tensor const& a) {
    auto const n{static_cast<double>(a.value().size())};
    if (n == 0.0) {
      throw std::invalid_argument("mean: empty tensor");
    }
    return scale(sum(a), 1.0 / n);
  }

  Tensor fillMaskedRows(Tensor const& a, std::vector<bool> const& mask, Tensor const& fill) {
    if (static_cast<Eigen::Index>(mask.size()) != a.rows()) {
      throw std::invalid_argument("fillMaskedRows: mask length vs " + shapeOf(a));
    }
    if (fill.rows() != 1 || fill.cols() != a.cols()) {
      throw std::invalid_argument("fillMaskedRows: fill " + shapeOf(fill) + " vs " + shapeOf(a));
    }
    Matrix y{a.value()};
    for (Eigen::Index r{0}; r < y.rows(); ++r) {
      if (mask[static_cast<std::size_t>(r)]) {
        y.row(r) = fill.value().row(0);
      }
    }
    auto const na{a.node()};
    auto const nf{fill.node()};
    return makeResult(std::move(y), {na, nf}, [na, nf, mask](Matrix const& g) {
      if (na->requiresGrad) {
        Matrix ga{g};
        for (Eigen::Index r{0}; r < ga.rows(); ++r) {
          if (mask[static_cast<std::size_t>(r)]) {
            ga.row(r).setZero();
          }
        }
        na->accumulate(ga);
      }
      if (nf->requiresGrad) {
        Matrix gf{Matrix::Zero(1, g.cols())};
        for (Eigen::Index r{0}; r < g.rows(); ++r) {
          if (mask[static_cast<std::size_t>(r)]) {
            gf += g.row(r);
          }
        }
        nf->accumulate(gf);
      }
    });
  }

  Tensor layerNorm(Tensor const& x, Tensor const& gain, Tensor const& bias) {
    auto const f{x.cols()};
    if (f < 1 || gain.rows() != 1 || gain.cols() != f || bias.rows() != 1 || bias.cols() != f) {
      throw std::invalid_argument("layerNorm: " + shapeOf(x) + " with gain " + shapeOf(gain) + ", bias " +
                                  shapeOf(bias));
    }
    auto const n{x.rows()};
    Matrix xhat(n, f);
    Eigen::VectorXd inv(n);
    for (Eigen::Index r{0}; r < n; ++r) {
      auto const mu{x.value().row(r).mean()};
      auto const centered{(x.value().row(r).array() - mu).eval()};
      auto const var{centered.square().mean()};
      inv(r) = 1.0 / std::sqrt(var + kLayerNormEps);
      xhat.row(r) = centered * inv(r);
    }
    Matrix y{xhat.array().rowwise() * gain.value().row(0).array()};
    y.rowwise() += bias.value().row(0);
    auto const nx{x.node()};
    auto const ng{gain.node()};
    auto const nb{bias.node()};
    return makeResult(std::move(y), {nx, ng, nb}, [nx, ng, nb, xhat, inv](Matrix const& g) {
      if (ng->requiresGrad) {
        ng->accumulate(g.cwiseProduct(xhat).colwise().sum());
      }
      if (nb->requiresGrad) {
        nb->accumulate(g.colwise().sum());
      }
      if (nx->requiresGrad) {
        Matrix dxhat{g.array().rowwise() * ng->value.row(0).array()};
        auto const cols{static_cast<double>(dxhat.cols())};
        Matrix dx(dxhat.rows(), dxhat.cols());
        for (Eigen::Index r{0}; r < dxhat.rows(); ++r) {
          auto const s1{dxhat.row(r).sum()};
          auto const s2{dxhat.row(r).dot(xhat.row(r))};
          dx.row(r) = (inv(r) / cols) * (cols * dxhat.row(r).array() - s1 - xhat.row(r).array() * s2);
        }
        nx->accumulate(dx);
      }
    });
  }

  Tensor maskedL1(Tensor const& pred, Matrix const& target) {
    if (pred.rows() != target.rows() || pred.cols() != target.cols()) {
      throw std::invalid_argument("maskedL1: prediction " + shapeOf(pred) + " vs target shape");
    }
    double total{0.0};
    std::size_t count{0};
    Matrix sign{Matrix::Zero(pred.rows(), pred.cols())};
    for (Eigen::Index r{0}; r < target.rows(); ++r) {
      for (Eigen::Index c{0}; c < target.cols(); ++c) {
        auto const t{target(r, c)};
        if (isMissing(t)) {
          continue;
        }
        auto const d{pred.value()(r, c) - t};
        total += std::abs(d);
        sign(r, c) = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
        ++count;
      }
    }
    auto const scaleBy{count > 0 ? 1.0 / static_cast<double>(count) : 0.0};
    auto const np{pred.node()};
    return makeResult(Matrix::Constant(1, 1, total * scaleBy), {np}, [np, sign, scaleBy](Matrix const& g) {
      np->accumulate(sign * (g(0, 0) * scaleBy));
    });
  }

  namespace {
    void checkLstm(Eigen::Index features, LstmWeights const& w) {
      auto const h{w.hidden()};
      if (w.wIn.rows() != 4 * h || w.wIn.cols() != features || w.wHid.rows() != 4 * h || w.bias.rows() != 1 ||
          w.bias.cols() != 4 * h) {
        throw std::invalid_argument("lstm: weights " + shapeOf(w.wIn) + ", " + shapeOf(w.wHid) + ", " +
                                    shapeOf(w.bias) + " for " + std::to_string(features) + " input features");
      }
    }
  }  // namespace

  LstmState lstmCell(Tensor const& x, LstmState const& prev, LstmWeights const& w) {
    checkLstm(x.cols(), w);
    auto const h{w.hidden()};
    if (prev.h.rows() != x.rows() || prev.h.cols() != h || prev.c.rows() != x.rows() || prev.c.cols() != h) {
      throw std::invalid_argument("lstmCell: state shape vs input " + shapeOf(x));
    }
    auto const gates{add(linear(x, w.wIn, w.bias), linear(prev.h, w.wHid))};
    auto const i{sigmoid(sliceCols(gates, 0, h))};
    auto const f{sigmoid(sliceCols(gates, h, h))};
    auto const g{tanh(sliceCols(gates, 2 * h, h))};
    auto const o{sigmoid(sliceCols(gates, 3 * h, h))};
    auto c{add(mul(f, prev.c), mul(i, g))};
    auto hNext{mul(o, tanh(c))};
    return {std::move(hNext), std::move(c)};
  }

  Tensor lstmSequence(Tensor const& x, Eigen::Index batch, LstmWeights const& w) {
    checkLstm(x.cols(), w);
    if (batch <= 0 || x.rows() % batch != 0) {
      throw std::invalid_argument("lstmSequence: " + shapeOf(x) + " is not a whole number of steps of " +
                                  std::to_string(batch));
    }
    auto const H{w.hidden()};
    auto const T{x.rows() / batch};
    auto const N{batch};
    // Pre-activations of the input part for all steps at once.
    Matrix gates{x.value() * w.wIn.value().transpose()};
    gates.rowwise() += w.bias.value().row(0);
    Matrix hs(T * N, H);
    Matrix cs(T * N, H);
    Matrix hPrev{Matrix::Zero(N, H)};
    Matrix cPrev{Matrix::Zero(N, H)};
    auto const& wHid{w.wHid.value()};
    for (Eigen::Index t{0}; t < T; ++t) {
      auto block{gates.middleRows(t * N, N)};
      block.noalias() += hPrev * wHid.transpose();
      block.leftCols(2 * H) = block.leftCols(2 * H).unaryExpr(&sigmoidScalar);
      block.middleCols(2 * H, H) = block.middleCols(2 * H, H).array().tanh().matrix();
      block.rightCols(H) = block.rightCols(H).unaryExpr(&sigmoidScalar);
      cPrev = block.middleCols(H, H).cwiseProduct(cPrev) + block.leftCols(H).cwiseProduct(block.middleCols(2 * H, H));
      hPrev = block.rightCols(H).cwiseProduct(cPrev.array().tanh().matrix());
      cs.middleRows(t * N, N) = cPrev;
      hs.middleRows(t * N, N) = hPrev;
    }
    auto const nx{x.node()};
    auto const nwi{w.wIn.node()};
    auto const nwh{w.wHid.node()};
    auto const nb{w.bias.node()};
    // `gates` now holds the activated i, f, g, o.
    Matrix out{hs};
    return makeResult(std::move(out), {nx, nwi, nwh, nb},
                      [nx, nwi, nwh, nb, gates = std::move(gates), hs = std::move(hs), cs = std::move(cs), T, N,
                       H](Matrix const& gOut) {
      Matrix dPre(T * N, 4 * H);
      Matrix dhNext{Matrix::Zero(N, H)};
      Matrix dcNext{Matrix::Zero(N, H)};
      Matrix dWhh{Matrix::Zero(4 * H, H)};
      for (Eigen::Index t{T - 1}; t >= 0; --t) {
        auto const act{gates.middleRows(t * N, N)};
        auto const i{act.leftCols(H).array()};
        auto const f{act.middleCols(H, H).array()};
        auto const g{act.middleCols(2 * H, H).array()};
        auto const o{act.rightCols(H).array()};
        Eigen::ArrayXXd const tc{cs.middleRows(t * N, N).array().tanh()};
        Eigen::ArrayXXd const dh{gOut.middleRows(t * N, N).array() + dhNext.array()};
        Eigen::ArrayXXd const dc{dh * o * (1.0 - tc.square()) + dcNext.array()};
        Eigen::ArrayXXd const cPrev{t > 0 ? Eigen::ArrayXXd{cs.middleRows((t - 1) * N, N).array()}
                                          : Eigen::ArrayXXd::Zero(N, H)};
        auto d{dPre.middleRows(t * N, N)};
        d.leftCols(H) = (dc * g * i * (1.0 - i)).matrix();
        d.middleCols(H, H) = (dc * cPrev * f * (1.0 - f)).matrix();
        d.middleCols(2 * H, H) = (dc * i * (1.0 - g.square())).matrix();
        d.rightCols(H) = (dh * tc * o * (1.0 - o)).matrix();
        dcNext = (dc * f).matrix();
        dhNext.noalias() = d * nwh->value;
        if (t > 0) {
          dWhh.noalias() += d.transpose() * hs.middleRows((t - 1) * N, N);
        }
      }
      if (nwh->requiresGrad) {
        nwh->accumulate(dWhh);
      }
      if (nwi->requiresGrad) {
        nwi->accumulate(dPre.transpose() * nx->value);
      }
      if (nb->requiresGrad) {
        nb->accumulate(dPre.colwise().sum());
      }
      if (nx->requiresGrad) {
        nx->accumulate(dPre * nwi->value);
      }
    });
  }

  Tensor lstmLastStep(Tensor const& x, Eigen::Index batch, std::span<LstmWeights const> layers) {
    if (layers.empty()) {
      throw std::invalid_argument("lstmLastStep: no layers");
    }
    auto seq{x};
    for (auto const& layer : layers) {
      seq = lstmSequence(seq, batch, layer);
    }
    return sliceRows(seq, seq.rows() - batch, batch);
  }

  Tensor conv1d(Tensor const& x, Eigen::Index series, Eigen::Index length, Tensor const& w, Tensor const& b,
                Eigen::Index kernel, Eigen::Index stride) {
    if (kernel <= 0 || stride <= 0 || length < kernel || length % stride != 0) {
      throw std::invalid_argument("conv1d: length " + std::to_string(length) + " with kernel " +
                                  std::to_string(kernel) + " and stride " + std::to_string(stride));
    }
    if (x.rows() != series * length) {
      throw std::invalid_argument("conv1d: input " + shapeOf(x) + " is not " + std::to_string(series) +
                                  " series of length " + std::to_string(length));
    }
    auto const channels{x.cols()};
    if (w.cols() != kernel * channels) {
      throw std::invalid_argument("conv1d: weight " + shapeOf(w) + " for kernel " + std::to_string(kernel) +
                                  " over " + std::to_string(channels) + " channels");
    }
    auto const outLen{(length - kernel) / stride + 1};
    if (kernel == stride) {
      // Non-overlapping windows are consecutive rows: im2col is a plain reshape.
      return linear(reshape(x, series * outLen, kernel * channels), w, b);
    }
    std::vector<Eigen::Index> index;
    index.reserve(static_cast<std::size_t>(series * outLen * kernel));
    for (Eigen::Index s{0}; s < series; ++s) {
      for (Eigen::Index o{0}; o < outLen; ++o) {
        for (Eigen::Index k{0}; k < kernel; ++k) {
          index.push_back(s * length + o * stride + k);
        }
      }
    }
    return linear(reshape(gatherRows(x, index), series * outLen, kernel * channels), w, b);
  }

  SparseMatrix gcnOperator(std::vector<std::vector<int>> const& neighbors) {
    auto const n{neighbors.size()};
    std::vector<std::vector<int>> closed(n);
    for (std::size_t i{0}; i < n; ++i) {
      auto& set{closed[i]};
      for (int j : neighbors[i]) {
        if (j < 0 || static_cast<std::size_t>(j) >= n) {
          throw std::invalid_argument("gcnOperator: neighbor " + std::to_string(j) + " out of range");
        }
        set.push_back(j);
      }
      set.push_back(static_cast<int>(i));
      std::sort(set.begin(), set.end());
      set.erase(std::unique(set.begin(), set.end()), set.end());
    }
    for (std::size_t i{0}; i < n; ++i) {
      for (int j : closed[i]) {
        auto const& back{closed[static_cast<std::size_t>(j)]};
        if (!std::binary_search(back.begin(), back.end(), static_cast<int>(i))) {
          throw std::invalid_argument("gcnOperator: adjacency is not symmetric at (" + std::to_string(i) + ", " +
                                      std::to_string(j) + ")");
        }
      }
    }
    std::vector<Eigen::Triplet<double>> entries;
    for (std::size_t i{0}; i < n; ++i) {
      auto const di{static_cast<double>(closed[i].size())};
      for (int j : closed[i]) {
        auto const dj{static_cast<double>(closed[static_cast<std::size_t>(j)].size())};
        entries.emplace_back(static_cast<int>(i), j, 1.0 / std::sqrt(di * dj));
      }
    }
    SparseMatrix op(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    op.setFromTriplets(entries.begin(), entries.end());
    return op;
  }

  Tensor gcnConv(Tensor const& x, SparseMatrix const& op, Tensor const& w) {
    if (op.rows() != x.rows()) {
      throw std::invalid_argument("gcnConv: operator over " + std::to_string(op.rows()) + " nodes, input " +
                                  shapeOf(x));
    }
    return spmm(op, linear(x, w));
  }

  SparseMatrix groupMeanOperator(std::vector<std::vector<int>> const& groups, std::size_t inputs) {
    std::vector<Eigen::Triplet<double>> entries;
    for (std::size_t g{0}; g < groups.size(); ++g) {
      for (int m : groups[g]) {
        if (m < 0 || static_cast<std::size_t>(m) >= inputs) {
          throw std::invalid_argument("groupMeanOperator: member out of range");
        }
        entries.emplace_back(static_cast<int>(g), m, 1.0 / static_cast<double>(groups[g].size()));
      }
    }
    SparseMatrix op(static_cast<Eigen::Index>(groups.size()), static_cast<Eigen::Index>(inputs));
    op.setFromTriplets(entries.begin(), entries.end());
    return op;
  }

  Tensor ParamStore::add(std::string const& name, Matrix init) {
    if (m_entries.contains(name)) {
      throw std::invalid_argument("ParamStore: duplicate parameter '" + name + "'");
    }
    Entry e{Tensor{std::move(init), true}, {}, {}};
    e.m = Matrix::Zero(e.param.rows(), e.param.cols());
    e.v = Matrix::Zero(e.param.rows(), e.param.cols());
    auto t{e.param};
    m_entries.emplace(name, std::move(e));
    return t;
  }

  Tensor ParamStore::addUniform(std::string const& name, Eigen::Index rows, Eigen::Index cols, double bound) {
    Rng rng{deriveSeed(m_seed, hashName(name))};
    Matrix init(rows, cols);
    for (Eigen::Index i{0}; i < init.size(); ++i) {
      init.data()[i] = uniform(rng, -bound, bound);
    }
    return add(name, std::move(init));
  }

  Tensor ParamStore::addConstant(std::string const& name, Eigen::Index rows, Eigen::Index cols, double value) {
    return add(name, Matrix::Constant(rows, cols, value));
  }

  Tensor const& ParamStore::get(std::string const& name) const {
    auto const it{m_entries.find(name)};
    if (it == m_entries.end()) {
      throw std::out_of_range("ParamStore: no parameter '" + name + "'");
    }
    return it->second.param;
  }

  std::vector<std::string> ParamStore::names() const {
    std::vector<std::string> out;
    for (auto const& [name, e] : m_entries) {
      out.push_back(name);
    }
    return out;
  }

  std::size_t ParamStore::scalarCount() const {
    std::size_t n{0};
    for (auto const& [name, e] : m_entries) {
      n += static_cast<std::size_t>(e.param.value().size());
    }
    return n;
  }

  void ParamStore::zeroGrad() {
    for (auto& [name, e] : m_entries) {
      e.param.zeroGrad();
    }
  }

  void ParamStore::adamStep(double lr, AdamConfig const& cfg) {
    for (auto const& [name, e] : m_entries) {
      auto const& g{e.param.node()->grad};
      if (g.size() != 0 && g.hasNaN()) {
        throw std::runtime_error("adam: NaN gradient in parameter '" + name + "' at step " +
                                 std::to_string(m_step + 1));
      }
    }
    ++m_step;
    auto const t{static_cast<double>(m_step)};
    auto const c1{1.0 - std::pow(cfg.beta1, t)};
    auto const c2{1.0 - std::pow(cfg.beta2, t)};
    for (auto& [name, e] : m_entries) {
      auto& theta{e.param.mutableValue()};
      Matrix const g{e.param.grad()};
      if (cfg.weightDecay != 0.0) {
        theta *= 1.0 - lr * cfg.weightDecay;
      }
      e.m = cfg.beta1 * e.m + (1.0 - cfg.beta1) * g;
      e.v = cfg.beta2 * e.v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
      theta.array() -= lr * (e.m.array() / c1) / ((e.v.array() / c2).sqrt() + cfg.eps);
    }
  }

  std::map<std::string, Matrix> ParamStore::snapshot() const {
    std::map<std::string, Matrix> out;
    for (auto const& [name, e] : m_entries) {
      out.emplace(name, e.param.value());
    }
    return out;
  }

  void ParamStore::load(std::map<std::string, Matrix> const& values) {
    for (auto const& [name, e] : m_entries) {
      auto const it{values.find(name)};
      if (it == values.end()) {
        throw std::runtime_error("checkpoint has no parameter '" + name + "'");
      }
      if (it->second.rows() != e.param.rows() || it->second.cols() != e.param.cols()) {
        throw std::runtime_error("checkpoint parameter '" + name + "' has shape [" +
                                 std::to_string(it->second.rows()) + "x" + std::to_string(it->second.cols()) +
                                 "], model expects " + shapeOf(e.param));
      }
    }
    if (values.size() != m_entries.size()) {
      throw std::runtime_error("checkpoint holds " + std::to_string(values.size()) + " parameters, model has " +
                               std::to_string(m_entries.size()));
    }
    for (auto& [name, e] : m_entries) {
      e.param.mutableValue() = values.at(name);
    }
  }

  double lrSchedule(std::int64_t step, std::int64_t totalSteps, std::int64_t stepsPerEpoch, double base) {
    if (totalSteps <= 0) {
      return base;
    }
    auto const frac{static_cast<double>(step) / static_cast<double>(totalSteps)};
    if (frac >= 0.85) {
      return 0.01 * base;
    }
    if (frac >= 0.7) {
      return 0.1 * base;
    }
    if (stepsPerEpoch > 0 && step < stepsPerEpoch) {
      return base * static_cast<double>(step) / static_cast<double>(stepsPerEpoch);
    }
    return base;
  }

  GradCheckReport gradCheck(std::function<Tensor()> const& loss, std::span<Tensor> params,
                            std::span<std::string const> names, double h, double floor) {
    for (auto& p : params) {
      p.zeroGrad();
    }
    backward(loss());
    GradCheckReport report;
    for (std::size_t k{0}; k < params.size(); ++k) {
      auto& p{params[k]};
      Matrix const analytic{p.grad()};
      auto& v{p.mutableValue()};
      for (Eigen::Index i{0}; i < v.size(); ++i) {
        auto const orig{v.data()[i]};
        v.data()[i] = orig + h;
        auto const up{loss().item()};
        v.data()[i] = orig - h;
        auto const down{loss().item()};
        v.data()[i] = orig;
        auto const numeric{(up - down) / (2.0 * h)};
        auto const a{analytic.data()[i]};
        auto const abs{std::abs(a - numeric)};
        auto const rel{abs / std::max({std::abs(a), std::abs(numeric), floor})};
        report.maxAbsError = std::max(report.maxAbsError, abs);
        if (rel > report.maxRelError || report.checked == 0) {
          report.maxRelError = std::max(report.maxRelError, rel);
          report.worstParam = k < names.size() ? names[k] : "#" + std::to_string(k);
          report.worstIndex = i;
        }
        ++report.checked;
      }
    }
    return report;
  }

  namespace {
    void writeU64(std::ostream& out, std::uint64_t v) {
      for (int i{0}; i < 8; ++i) {
        out.put(static_cast<char>((v >> (8 * i)) & 0xff));
      }
    }

    std::uint64_t readU64(std::istream& in) {
      std::uint64_t v{0};
      for (int i{0}; i < 8; ++i) {
        auto const c{in.get()};
        if (c == std::char_traits<char>::eof()) {
          throw std::runtime_error("checkpoint: truncated header");
        }
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
      }
      return v;
    }
  }  // namespace

  void saveCheckpoint(std::filesystem::path const& path, ParamStore const& store, nlohmann::json const& meta) {
    auto tensors = nlohmann::json::array();
    std::size_t offset{0};
    for (auto const& name : store.names()) {
      auto const& p{store.get(name)};
      tensors.push_back({{"name", name}, {"shape", {p.rows(), p.cols()}}, {"offset", offset}, {"dtype", "f32le"}});
      offset += static_cast<std::size_t>(p.value().size()) * 4;
    }
    nlohmann::json header = {{"format", "mst-checkpoint"},
                             {"version", 1},
                             {"adam_step", store.step()},
                             {"seed", store.seed()},
                             {"tensors", tensors},
                             {"meta", meta}};
    auto const text{header.dump()};
    if (path.has_parent_path()) {
      std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out{path, std::ios::binary};
    if (!out) {
      throw std::runtime_error("cannot write checkpoint " + path.string());
    }
    out.write(kCheckpointMagic, sizeof kCheckpointMagic);
    writeU64(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (auto const& name : store.names()) {
      auto const& v{store.get(name).value()};
      for (Eigen::Index i{0}; i < v.size(); ++i) {
        auto const bits{std::bit_cast<std::uint32_t>(static_cast<float>(v.data()[i]))};
        for (int b{0}; b < 4; ++b) {
          out.put(static_cast<char>((bits >> (8 * b)) & 0xff));
        }
      }
    }
    if (!out) {
      throw std::runtime_error("failed writing checkpoint " + path.string());
    }
  }

  Checkpoint loadCheckpoint(std::filesystem::path const& path) {
    std::ifstream in{path, std::ios::binary};
    if (!in) {
      throw std::runtime_error("cannot open checkpoint " + path.string());
    }
    char magic[sizeof kCheckpointMagic]{};
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
      throw std::runtime_error("not a checkpoint: " + path.string());
    }
    auto const len{readU64(in)};
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    if (!in) {
      throw std::runtime_error("checkpoint: truncated header in " + path.string());
    }
    auto const header = nlohmann::json::parse(text);
    std::string blob{std::istreambuf_iterator<char>{in}, std::istreambuf_iterator<char>{}};
    Checkpoint ck;
    ck.meta = header.at("meta");
    for (auto const& t : header.at("tensors")) {
      auto const rows{t.at("shape").at(0).get<Eigen::Index>()};
      auto const cols{t.at("shape").at(1).get<Eigen::Index>()};
      auto const offset{t.at("offset").get<std::size_t>()};
      auto const bytes{static_cast<std::size_t>(rows * cols) * 4};
      if (offset + bytes > blob.size()) {
        throw std::runtime_error("checkpoint: tensor '" + t.at("name").get<std::string>() + "' is truncated");
      }
      Matrix m(rows, cols);
      for (Eigen::Index i{0}; i < m.size(); ++i) {
        std::uint32_t bits{0};
        for (int b{0}; b < 4; ++b) {
          bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(blob[offset + 4 * static_cast<std::size_t>(i) +
                                                                             static_cast<std::size_t>(b)]))
                  << (8 * b);
        }
        m.data()[i] = static_cast<double>(std::bit_cast<float>(bits));
      }
      ck.tensors.emplace(t.at("name").get<std::string>(), std::move(m));
    }
    return ck;
  }

}  // namespace mst::ad
