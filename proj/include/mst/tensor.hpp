/// @file tensor.hpp
/// @brief Dense 2-D tensors with reverse-mode differentiation and the layers HiMSNet is built from.
///
/// Every tensor is a row-major [rows x cols] matrix of doubles. Operations record their inputs
/// and a backward closure; `backward(loss)` walks the recorded graph once in reverse topological
/// order. A result only keeps its graph when some input requires a gradient, so forward passes
/// over constants cost nothing extra.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include "json.hpp"

namespace mst::ad {

  using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using SparseMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

  struct Node {
    Matrix value;
    Matrix grad;  ///< empty until something flows in
    bool requiresGrad{false};
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Matrix const&)> backward;

    void accumulate(Matrix const& g);
  };

  class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(Matrix value, bool requiresGrad = false);
    explicit Tensor(std::shared_ptr<Node> node) : m_node{std::move(node)} {}

    [[nodiscard]] static Tensor zeros(Eigen::Index rows, Eigen::Index cols);
    [[nodiscard]] static Tensor full(Eigen::Index rows, Eigen::Index cols, double v);

    [[nodiscard]] bool defined() const noexcept { return m_node != nullptr; }
    [[nodiscard]] Eigen::Index rows() const { return m_node->value.rows(); }
    [[nodiscard]] Eigen::Index cols() const { return m_node->value.cols(); }
    [[nodiscard]] Matrix const& value() const { return m_node->value; }
    [[nodiscard]] Matrix& mutableValue() { return m_node->value; }
    /// Accumulated gradient; a zero matrix of the value's shape if nothing has flowed in.
    [[nodiscard]] Matrix grad() const;
    [[nodiscard]] bool requiresGrad() const noexcept { return m_node && m_node->requiresGrad; }
    [[nodiscard]] double item() const;
    void zeroGrad();
    [[nodiscard]] std::shared_ptr<Node> const& node() const noexcept { return m_node; }

  private:
    std::shared_ptr<Node> m_node;
  };

  /// While alive on this thread, results keep no graph (inference).
  class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(NoGradGuard const&) = delete;
    NoGradGuard& operator=(NoGradGuard const&) = delete;

  private:
    bool m_previous;
  };

  /// Seeds d(loss)/d(loss) = 1 and propagates. Gradients accumulate into leaves across calls.
  /// @throw std::invalid_argument if loss is not 1x1.
  void backward(Tensor const& loss);

  // Elementwise and structural operations. All throw std::invalid_argument on shape mismatch.
  [[nodiscard]] Tensor matmul(Tensor const& a, Tensor const& b);
  /// y = x W^T + b per row; W is [out x in], b is [1 x out] or undefined.
  [[nodiscard]] Tensor linear(Tensor const& x, Tensor const& w, Tensor const& b = {});
  [[nodiscard]] Tensor add(Tensor const& a, Tensor const& b);
  [[nodiscard]] Tensor sub(Tensor const& a, Tensor const& b);
  [[nodiscard]] Tensor mul(Tensor const& a, Tensor const& b);
  [[nodiscard]] Tensor scale(Tensor const& a, double s);
  /// Adds a [1 x cols] row to every row.
  [[nodiscard]] Tensor addRow(Tensor const& a, Tensor const& row);
  [[nodiscard]] Tensor sigmoid(Tensor const& a);
  [[nodiscard]] Tensor tanh(Tensor const& a);
  [[nodiscard]] Tensor relu(Tensor const& a);
  [[nodiscard]] Tensor concatCols(std::span<Tensor const> parts);
  [[nodiscard]] Tensor sliceCols(Tensor const& a, Eigen::Index c0, Eigen::Index n);
  [[nodiscard]] Tensor sliceRows(Tensor const& a, Eigen::Index r0, Eigen::Index n);
  /// out.row(i) = a.row(index[i]); rows may repeat.
  [[nodiscard]] Tensor gatherRows(Tensor const& a, std::span<Eigen::Index const> index);
  /// Row-major reinterpretation with the same element count.
  [[nodiscard]] Tensor reshape(Tensor const& a, Eigen::Index rows, Eigen::Index cols);
  /// Constant sparse matrix times a tensor.
  [[nodiscard]] Tensor spmm(SparseMatrix const& s, Tensor const& x);
  [[nodiscard]] Tensor sum(Tensor const& a);
  [[nodiscard]] Tensor mean(Tensor const& a);
  /// Rows flagged in `mask` are replaced by the [1 x cols] parameter `fill`.
  [[nodiscard]] Tensor fillMaskedRows(Tensor const& a, std::vector<bool> const& mask, Tensor const& fill);

  inline constexpr double kLayerNormEps{1e-5};

  /// Per-row standardization over the feature axis, then gain and bias ([1 x cols] each).
  [[nodiscard]] Tensor layerNorm(Tensor const& x, Tensor const& gain, Tensor const& bias);

  /// Mean absolute error over entries whose target is not NaN. With no present entry the result
  /// is 0 and the gradient is zero. Predictions at NaN targets never enter the arithmetic.
  [[nodiscard]] Tensor maskedL1(Tensor const& pred, Matrix const& target);

  /// One LSTM layer. Gate order in the stacked weights is i, f, g, o.
  struct LstmWeights {
    Tensor wIn;    ///< [4H x F]
    Tensor wHid;   ///< [4H x H]
    Tensor bias;   ///< [1 x 4H]
    [[nodiscard]] Eigen::Index hidden() const { return wHid.cols(); }
  };

  struct LstmState {
    Tensor h;
    Tensor c;
  };

  /// One step built from primitive operations:
  /// i = s(W_i x + U_i h + b_i), f = s(...), g = tanh(...), o = s(...),
  /// c' = f * c + i * g, h' = o * tanh(c').
  [[nodiscard]] LstmState lstmCell(Tensor const& x, LstmState const& prev, LstmWeights const& w);

  /// Whole sequence in one node with backpropagation through time. `x` is time-major
  /// [T*N x F] (rows t*N .. t*N+N-1 hold step t); the state starts at zero. Returns all hidden
  /// states in the same layout, [T*N x H].
  [[nodiscard]] Tensor lstmSequence(Tensor const& x, Eigen::Index batch, LstmWeights const& w);

  /// Stacked layers; layer l+1 consumes the hidden sequence of layer l. Returns the last step of
  /// the top layer, [N x H].
  [[nodiscard]] Tensor lstmLastStep(Tensor const& x, Eigen::Index batch, std::span<LstmWeights const> layers);

  /// 1-D cross-correlation without padding over `series` independent series stored series-major:
  /// x is [series*T x C], rows s*T .. s*T+T-1 are series s. W is [C' x k*C] with the k taps laid out
  /// tap-major. Output is [series*T' x C'] with T' = (T - k) / stride + 1.
  /// @throw std::invalid_argument if T is not divisible by the stride or shorter than the kernel.
  [[nodiscard]] Tensor conv1d(Tensor const& x, Eigen::Index series, Eigen::Index length, Tensor const& w,
                              Tensor const& b, Eigen::Index kernel, Eigen::Index stride);

  /// Symmetrically normalized propagation matrix: entry (i, j) = 1/sqrt(D(i) D(j)) for j in
  /// N(i) with i itself, where D(i) = |N(i) with i|.
  /// @throw std::invalid_argument if the neighbor relation is not symmetric or out of range.
  [[nodiscard]] SparseMatrix gcnOperator(std::vector<std::vector<int>> const& neighbors);

  /// x'_i = sum_j A(i, j) W x_j; no bias.
  [[nodiscard]] Tensor gcnConv(Tensor const& x, SparseMatrix const& op, Tensor const& w);

  /// Row-averaging operator: row g averages the listed rows of the input.
  [[nodiscard]] SparseMatrix groupMeanOperator(std::vector<std::vector<int>> const& groups, std::size_t inputs);

  struct AdamConfig {
    double beta1{0.9};
    double beta2{0.999};
    double eps{1e-8};
    double weightDecay{0.0};
  };

  /// Named parameters with Adam moments. Iteration order is by name, and each parameter's
  /// initial values depend only on the store seed and its own name.
  class ParamStore {
  public:
    explicit ParamStore(std::uint64_t seed = 0) : m_seed{seed} {}

    /// Uniform in [-bound, bound].
    Tensor addUniform(std::string const& name, Eigen::Index rows, Eigen::Index cols, double bound);
    Tensor addConstant(std::string const& name, Eigen::Index rows, Eigen::Index cols, double value);
    /// @throw std::invalid_argument on a duplicate name.
    Tensor add(std::string const& name, Matrix init);

    [[nodiscard]] Tensor const& get(std::string const& name) const;
    [[nodiscard]] bool contains(std::string const& name) const { return m_entries.contains(name); }
    [[nodiscard]] std::vector<std::string> names() const;
    [[nodiscard]] std::size_t size() const noexcept { return m_entries.size(); }
    [[nodiscard]] std::size_t scalarCount() const;
    [[nodiscard]] std::int64_t step() const noexcept { return m_step; }
    [[nodiscard]] std::uint64_t seed() const noexcept { return m_seed; }

    void zeroGrad();
    /// Decoupled weight decay then the bias-corrected Adam update, for every parameter.
    /// @throw std::runtime_error naming the parameter if a gradient holds NaN.
    void adamStep(double lr, AdamConfig const& cfg);

    /// Copy of every parameter value, by name.
    [[nodiscard]] std::map<std::string, Matrix> snapshot() const;

    /// Replaces values; every stored name must be present with the same shape.
    /// @throw std::runtime_error on a missing name or shape mismatch.
    void load(std::map<std::string, Matrix> const& values);

  private:
    struct Entry {
      Tensor param;
      Matrix m;
      Matrix v;
    };
    std::uint64_t m_seed;
    std::int64_t m_step{0};
    std::map<std::string, Entry> m_entries;
  };

  /// Linear warm-up from 0 over the first epoch, then base, 0.1 * base from 70 % of the steps and
  /// 0.01 * base from 85 %.
  [[nodiscard]] double lrSchedule(std::int64_t step, std::int64_t totalSteps, std::int64_t stepsPerEpoch,
                                  double base);

  struct GradCheckReport {
    double maxRelError{0.0};
    double maxAbsError{0.0};
    std::string worstParam;
    Eigen::Index worstIndex{0};
    std::size_t checked{0};
  };

  /// Central differences with step h on every element of `params`, compared with the gradient
  /// from `backward`. `loss` must rebuild the graph from the current parameter values on every
  /// call. Relative error is |a - n| / max(|a|, |n|, floor).
  [[nodiscard]] GradCheckReport gradCheck(std::function<Tensor()> const& loss, std::span<Tensor> params,
                                          std::span<std::string const> names = {}, double h = 1e-5,
                                          double floor = 1e-6);

  inline constexpr char kCheckpointMagic[8]{'M', 'S', 'T', 'C', 'K', 'P', 'T', '1'};

  /// Magic, u64 little-endian header length, JSON header, then every parameter as float32 LE in
  /// name order. `meta` is stored under "meta" in the header.
  void saveCheckpoint(std::filesystem::path const& path, ParamStore const& store, nlohmann::json const& meta);

  struct Checkpoint {
    nlohmann::json meta;
    std::map<std::string, Matrix> tensors;
  };

  /// @throw std::runtime_error on a missing file, wrong magic or truncated data.
  [[nodiscard]] Checkpoint loadCheckpoint(std::filesystem::path const& path);

}  // namespace mst::ad
