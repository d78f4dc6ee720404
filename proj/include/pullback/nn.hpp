#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <istream>
#include <numbers>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "pullback/errors.hpp"
#include "pullback/numcore.hpp"

namespace pullback::nn {

/// Row-major dense matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double& operator()(std::size_t r, std::size_t c) noexcept { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data[r * cols + c]; }
  const double* row(std::size_t r) const noexcept { return data.data() + r * cols; }
  double* row(std::size_t r) noexcept { return data.data() + r * cols; }

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

enum class OutputLoss { L2, SoftmaxCrossEntropy };

/// Fully connected net: GELU on hidden layers, affine output. For L2 the
/// output is the prediction; for cross-entropy it is the logits.
struct MlpSpec {
  std::vector<std::size_t> layer_widths;
  OutputLoss loss = OutputLoss::L2;

  void validate() const {
    if (layer_widths.size() < 3) throw UsageError("MlpSpec: need at least one hidden layer");
    for (auto w : layer_widths) {
      if (w == 0) throw UsageError("MlpSpec: layer widths must be >= 1");
    }
  }

  std::size_t num_layers() const noexcept { return layer_widths.size() - 1; }
  std::size_t input_dim() const noexcept { return layer_widths.front(); }
  std::size_t output_dim() const noexcept { return layer_widths.back(); }

  std::size_t num_params() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < layer_widths.size(); ++l) {
      n += (layer_widths[l] + 1) * layer_widths[l + 1];
    }
    return n;
  }

  /// Offset of layer l's weight block (out x in, row-major); its bias
  /// vector follows immediately.
  std::size_t layer_offset(std::size_t l) const {
    std::size_t off = 0;
    for (std::size_t k = 0; k < l; ++k) off += (layer_widths[k] + 1) * layer_widths[k + 1];
    return off;
  }
};

/// Inputs plus either regression targets or class labels.
struct Batch {
  Matrix inputs;
  Matrix targets;
  std::vector<std::size_t> labels;

  std::size_t size() const noexcept { return inputs.rows; }
  bool is_classification() const noexcept { return !labels.empty(); }

  /// Rows `idx` as a new batch.
  Batch gather(std::span<const std::size_t> idx) const {
    Batch out;
    out.inputs = Matrix(idx.size(), inputs.cols);
    if (!is_classification()) out.targets = Matrix(idx.size(), targets.cols);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      std::copy_n(inputs.row(idx[r]), inputs.cols, out.inputs.row(r));
      if (is_classification()) {
        out.labels.push_back(labels[idx[r]]);
      } else {
        std::copy_n(targets.row(idx[r]), targets.cols, out.targets.row(r));
      }
    }
    return out;
  }

  friend bool operator==(const Batch&, const Batch&) = default;
};

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

namespace detail {

inline std::uint64_t fnv1a(std::uint64_t h, std::span<const double> xs) {
  for (double x : xs) {
    auto bits = std::bit_cast<std::uint64_t>(x);
    for (int b = 0; b < 8; ++b) {
      h ^= (bits >> (8 * b)) & 0xFF;
      h *= 0x100000001B3ULL;
    }
  }
  return h;
}

inline std::uint64_t fingerprint(const ParamVector& params, const Batch& batch) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  h = fnv1a(h, params.span());
  h = fnv1a(h, batch.inputs.data);
  h = fnv1a(h, batch.targets.data);
  for (auto l : batch.labels) h = fnv1a(h, std::vector<double>{static_cast<double>(l)});
  return h;
}

inline void check_shapes(const MlpSpec& spec, const ParamVector& params, const Batch& batch) {
  spec.validate();
  if (params.size() != spec.num_params()) {
    throw DimensionError("mlp: parameter count " + std::to_string(params.size()) +
                         " does not match spec (" + std::to_string(spec.num_params()) + ")");
  }
  if (batch.size() == 0) throw DimensionError("mlp: empty batch");
  if (batch.inputs.cols != spec.input_dim()) throw DimensionError("mlp: input width mismatch");
  if (spec.loss == OutputLoss::L2) {
    if (batch.targets.rows != batch.size() || batch.targets.cols != spec.output_dim()) {
      throw DimensionError("mlp: target shape mismatch");
    }
  } else {
    if (batch.labels.size() != batch.size()) throw DimensionError("mlp: label count mismatch");
    for (auto l : batch.labels) {
      if (l >= spec.output_dim()) throw DimensionError("mlp: label out of range");
    }
  }
}

}  // namespace detail

/// Activations retained by forward() for backward().
struct ForwardCache {
  std::vector<Matrix> pre;   // per layer, before activation
  std::vector<Matrix> post;  // post[0] = inputs, post[l+1] = act(pre[l])
  std::uint64_t fingerprint = 0;
};

/// Mean loss over the batch. L2 is the mean over samples of the squared
/// residual norm; cross-entropy is the mean negative log-softmax.
inline std::pair<double, ForwardCache> forward(const MlpSpec& spec, const ParamVector& params,
                                               const Batch& batch) {
  detail::check_shapes(spec, params, batch);
  const std::size_t n = batch.size();
  const std::size_t layers = spec.num_layers();
  ForwardCache cache;
  cache.fingerprint = detail::fingerprint(params, batch);
  cache.post.reserve(layers + 1);
  cache.pre.reserve(layers);
  cache.post.push_back(batch.inputs);

  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t in = spec.layer_widths[l], out = spec.layer_widths[l + 1];
    const double* w = params.span().data() + spec.layer_offset(l);
    const double* b = w + in * out;
    const Matrix& a = cache.post.back();
    Matrix z(n, out);
    for (std::size_t s = 0; s < n; ++s) {
      const double* as = a.row(s);
      double* zs = z.row(s);
      for (std::size_t o = 0; o < out; ++o) {
        const double* wo = w + o * in;
        double acc = b[o];
        for (std::size_t i = 0; i < in; ++i) acc += wo[i] * as[i];
        zs[o] = acc;
      }
    }
    Matrix act = z;
    if (l + 1 < layers) {
      for (double& v : act.data) v = gelu(v);
    }
    cache.pre.push_back(std::move(z));
    cache.post.push_back(std::move(act));
  }

  const Matrix& y = cache.post.back();
  double total = 0.0;
  if (spec.loss == OutputLoss::L2) {
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t o = 0; o < y.cols; ++o) {
        const double r = y(s, o) - batch.targets(s, o);
        total += r * r;
      }
    }
  } else {
    for (std::size_t s = 0; s < n; ++s) {
      const double* zs = y.row(s);
      const double zmax = *std::max_element(zs, zs + y.cols);
      double sum = 0.0;
      for (std::size_t o = 0; o < y.cols; ++o) sum += std::exp(zs[o] - zmax);
      total += zmax + std::log(sum) - zs[batch.labels[s]];
    }
  }
  return {total / static_cast<double>(n), std::move(cache)};
}

/// Gradient of the mean batch loss. The cache must come from forward() on
/// the same params and batch.
inline ParamVector backward(const MlpSpec& spec, const ParamVector& params, const Batch& batch,
                            const ForwardCache& cache) {
  detail::check_shapes(spec, params, batch);
  const std::size_t layers = spec.num_layers();
  if (cache.pre.size() != layers || cache.post.size() != layers + 1 ||
      cache.fingerprint != detail::fingerprint(params, batch)) {
    throw UsageError("mlp backward: cache does not match params/batch (stale cache)");
  }
  const std::size_t n = batch.size();
  const double inv_n = 1.0 / static_cast<double>(n);
  ParamVector grad(params.size());

  // dL/dz for the output layer.
  const Matrix& y = cache.post.back();
  Matrix delta(n, y.cols);
  if (spec.loss == OutputLoss::L2) {
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t o = 0; o < y.cols; ++o) {
        delta(s, o) = 2.0 * (y(s, o) - batch.targets(s, o)) * inv_n;
      }
    }
  } else {
    for (std::size_t s = 0; s < n; ++s) {
      const double* zs = y.row(s);
      const double zmax = *std::max_element(zs, zs + y.cols);
      double sum = 0.0;
      for (std::size_t o = 0; o < y.cols; ++o) sum += std::exp(zs[o] - zmax);
      for (std::size_t o = 0; o < y.cols; ++o) {
        const double p = std::exp(zs[o] - zmax) / sum;
        delta(s, o) = (p - (o == batch.labels[s] ? 1.0 : 0.0)) * inv_n;
      }
    }
  }

  for (std::size_t l = layers; l-- > 0;) {
    const std::size_t in = spec.layer_widths[l], out = spec.layer_widths[l + 1];
    const std::size_t off = spec.layer_offset(l);
    const double* w = params.span().data() + off;
    double* dw = grad.span().data() + off;
    double* db = dw + in * out;
    const Matrix& a = cache.post[l];
    Matrix prev(n, in);
    for (std::size_t s = 0; s < n; ++s) {
      const double* as = a.row(s);
      const double* ds = delta.row(s);
      double* ps = prev.row(s);
      for (std::size_t o = 0; o < out; ++o) {
        const double d = ds[o];
        if (d == 0.0) continue;
        db[o] += d;
        double* dwo = dw + o * in;
        const double* wo = w + o * in;
        for (std::size_t i = 0; i < in; ++i) {
          dwo[i] += d * as[i];
          ps[i] += d * wo[i];
        }
      }
    }
    if (l > 0) {
      const Matrix& z = cache.pre[l - 1];
      for (std::size_t k = 0; k < prev.data.size(); ++k) prev.data[k] *= gelu_grad(z.data[k]);
      delta = std::move(prev);
    }
  }
  return grad;
}

inline std::pair<double, ParamVector> loss_and_grad(const MlpSpec& spec, const ParamVector& params,
                                                    const Batch& batch) {
  auto [loss, cache] = forward(spec, params, batch);
  return {loss, backward(spec, params, batch, cache)};
}

/// Fraction of samples whose arg-max logit matches the label.
inline double accuracy(const MlpSpec& spec, const ParamVector& params, const Batch& batch) {
  auto [loss, cache] = forward(spec, params, batch);
  (void)loss;
  const Matrix& y = cache.post.back();
  std::size_t hits = 0;
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const double* zs = y.row(s);
    const auto best = static_cast<std::size_t>(std::max_element(zs, zs + y.cols) - zs);
    if (best == batch.labels[s]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(batch.size());
}

/// Glorot-uniform weights, zero biases.
inline ParamVector init_params(const MlpSpec& spec, RngStream& rng) {
  spec.validate();
  ParamVector p(spec.num_params());
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    const std::size_t in = spec.layer_widths[l], out = spec.layer_widths[l + 1];
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    const std::size_t off = spec.layer_offset(l);
    for (std::size_t k = 0; k < in * out; ++k) p[off + k] = rng.uniform(-limit, limit);
  }
  return p;
}

/// Random polynomial in `num_vars` variables with every monomial of total
/// degree <= `degree`, coefficients N(0, 1) drawn from `seed`.
struct PolyTask {
  std::size_t num_vars = 4;
  std::size_t degree = 6;
  std::uint64_t seed = 0;
};

class Polynomial {
 public:
  explicit Polynomial(const PolyTask& task) : num_vars_(task.num_vars) {
    if (task.num_vars == 0) throw UsageError("PolyTask: num_vars must be >= 1");
    std::vector<std::size_t> exps(num_vars_, 0);
    enumerate(exps, 0, task.degree);
    RngStream rng(task.seed);
    coefficients_.reserve(exponents_.size());
    for (std::size_t k = 0; k < exponents_.size(); ++k) coefficients_.push_back(rng.normal());
  }

  std::size_t num_terms() const noexcept { return exponents_.size(); }

  double operator()(const double* x) const {
    double acc = 0.0;
    for (std::size_t k = 0; k < exponents_.size(); ++k) {
      double term = coefficients_[k];
      for (std::size_t v = 0; v < num_vars_; ++v) {
        for (std::size_t e = 0; e < exponents_[k][v]; ++e) term *= x[v];
      }
      acc += term;
    }
    return acc;
  }

 private:
  void enumerate(std::vector<std::size_t>& exps, std::size_t var, std::size_t remaining) {
    if (var == num_vars_) {
      exponents_.push_back(exps);
      return;
    }
    for (std::size_t e = 0; e <= remaining; ++e) {
      exps[var] = e;
      enumerate(exps, var + 1, remaining - e);
    }
    exps[var] = 0;
  }

  std::size_t num_vars_;
  std::vector<std::vector<std::size_t>> exponents_;
  std::vector<double> coefficients_;
};

struct Split {
  Batch train;
  Batch val;
};

inline std::size_t val_count(std::size_t n) { return std::max<std::size_t>(1, n / 5); }

/// n samples with inputs uniform on [-1, 1]^num_vars, split 80/20 into
/// train/val. Targets are standardized with the train split's mean and
/// standard deviation (floored at 1e-12).
inline Split gen_poly_data(const PolyTask& task, std::size_t n, RngStream& rng) {
  if (n < 2) throw UsageError("gen_poly_data: n must be >= 2");
  const Polynomial poly(task);
  const std::size_t n_val = val_count(n), n_train = n - n_val;
  Matrix x(n, task.num_vars);
  std::vector<double> y(n);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t v = 0; v < task.num_vars; ++v) x(s, v) = rng.uniform(-1.0, 1.0);
    y[s] = poly(x.row(s));
  }
  // Shifted by y[0] so a constant target gives its mean exactly.
  double shift = 0.0;
  for (std::size_t s = 0; s < n_train; ++s) shift += y[s] - y[0];
  const double mean = y[0] + shift / static_cast<double>(n_train);
  double var = 0.0;
  for (std::size_t s = 0; s < n_train; ++s) var += (y[s] - mean) * (y[s] - mean);
  const double sd = std::max(std::sqrt(var / static_cast<double>(n_train)), 1e-12);

  Split out;
  auto fill = [&](Batch& b, std::size_t first, std::size_t count) {
    b.inputs = Matrix(count, task.num_vars);
    b.targets = Matrix(count, 1);
    for (std::size_t s = 0; s < count; ++s) {
      std::copy_n(x.row(first + s), task.num_vars, b.inputs.row(s));
      b.targets(s, 0) = (y[first + s] - mean) / sd;
    }
  };
  fill(out.train, 0, n_train);
  fill(out.val, n_train, n_val);
  return out;
}

/// Gaussian clusters, one per class. Centers sit on a circle of radius
/// `radius` (jittered, random phase) in the first two input coordinates.
struct BlobsTask {
  std::size_t classes = 3;
  std::size_t dim = 2;
  double radius = 4.0;
  double cluster_std = 1.0;
};

inline Split gen_blobs_classification(const BlobsTask& task, std::size_t n, RngStream& rng) {
  if (task.classes < 2) throw UsageError("gen_blobs_classification: need at least 2 classes");
  if (task.dim < 2) throw UsageError("gen_blobs_classification: dim must be >= 2");
  if (n < 2) throw UsageError("gen_blobs_classification: n must be >= 2");
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  Matrix centers(task.classes, task.dim);
  for (std::size_t k = 0; k < task.classes; ++k) {
    const double angle = phase + 2.0 * std::numbers::pi * static_cast<double>(k) /
                                     static_cast<double>(task.classes);
    const double r = task.radius * rng.uniform(0.9, 1.1);
    centers(k, 0) = r * std::cos(angle);
    centers(k, 1) = r * std::sin(angle);
  }
  const std::size_t n_val = val_count(n), n_train = n - n_val;
  auto fill = [&](Batch& b, std::size_t count) {
    b.inputs = Matrix(count, task.dim);
    b.labels.resize(count);
    for (std::size_t s = 0; s < count; ++s) {
      const auto k = static_cast<std::size_t>(rng.below(task.classes));
      b.labels[s] = k;
      for (std::size_t d = 0; d < task.dim; ++d) {
        b.inputs(s, d) = centers(k, d) + task.cluster_std * rng.normal();
      }
    }
  };
  Split out;
  fill(out.train, n_train);
  fill(out.val, n_val);
  return out;
}

/// CSV with a header row: x0..x{d-1} then y0..y{k-1} (regression) or
/// `label` (classification).
inline void write_csv(std::ostream& os, const Batch& batch) {
  for (std::size_t c = 0; c < batch.inputs.cols; ++c) os << (c ? "," : "") << 'x' << c;
  if (batch.is_classification()) {
    os << ",label\n";
  } else {
    for (std::size_t c = 0; c < batch.targets.cols; ++c) os << ",y" << c;
    os << '\n';
  }
  std::ostringstream cell;
  cell.precision(17);
  for (std::size_t s = 0; s < batch.size(); ++s) {
    for (std::size_t c = 0; c < batch.inputs.cols; ++c) {
      cell.str("");
      cell << batch.inputs(s, c);
      os << (c ? "," : "") << cell.str();
    }
    if (batch.is_classification()) {
      os << ',' << batch.labels[s];
    } else {
      for (std::size_t c = 0; c < batch.targets.cols; ++c) {
        cell.str("");
        cell << batch.targets(s, c);
        os << ',' << cell.str();
      }
    }
    os << '\n';
  }
}

inline Batch read_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw UsageError("read_csv: missing header");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) header.push_back(tok);
  }
  std::size_t n_in = 0, n_out = 0;
  bool labelled = false;
  for (const auto& h : header) {
    if (!h.empty() && h[0] == 'x') {
      ++n_in;
    } else if (!h.empty() && h[0] == 'y') {
      ++n_out;
    } else if (h == "label") {
      labelled = true;
    } else {
      throw UsageError("read_csv: unexpected column '" + h + "'");
    }
  }
  if (n_in == 0 || (labelled == (n_out > 0))) throw UsageError("read_csv: bad header");

  std::vector<std::vector<double>> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) row.push_back(std::stod(tok));
    if (row.size() != header.size()) throw DimensionError("read_csv: ragged row");
    rows.push_back(std::move(row));
  }
  Batch b;
  b.inputs = Matrix(rows.size(), n_in);
  if (!labelled) b.targets = Matrix(rows.size(), n_out);
  for (std::size_t s = 0; s < rows.size(); ++s) {
    std::copy_n(rows[s].begin(), n_in, b.inputs.row(s));
    if (labelled) {
      b.labels.push_back(static_cast<std::size_t>(rows[s][n_in]));
    } else {
      std::copy_n(rows[s].begin() + static_cast<std::ptrdiff_t>(n_in), n_out, b.targets.row(s));
    }
  }
  return b;
}

}  // namespace pullback::nn
