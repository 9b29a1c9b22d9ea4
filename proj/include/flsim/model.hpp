#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "flsim/params.hpp"
#include "flsim/rng.hpp"

namespace flsim {

/// Dense row-major matrix of doubles.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  std::span<double> row(std::size_t i) { return {data.data() + i * cols, cols}; }
  std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
};

enum class ModelKind { linear, mlp, quadratic_probe };
enum class Activation { relu, tanh };

std::string_view to_string(ModelKind kind);
std::string_view to_string(Activation act);
ModelKind parse_model_kind(std::string_view text);
Activation parse_activation(std::string_view text);

struct ModelSpec {
  ModelKind kind = ModelKind::linear;
  std::size_t input_dim = 1;
  std::size_t num_classes = 2;
  std::size_t hidden_dim = 0;
  Activation activation = Activation::relu;
  std::vector<double> probe_target;

  /// Throws ConfigError on invalid dimensions.
  void validate() const;
  /// Block structure of the parameter vector. Pure function of the spec.
  LayoutPtr layout() const;
  std::size_t param_count() const;
};

/// Minibatch of labeled rows. `ids` are the rows' indices in the canonical
/// dataset; reductions run in ascending id order so row order never
/// changes the result. Empty `ids` means 0..rows-1.
struct Batch {
  Matrix features;
  std::vector<int> labels;
  std::vector<std::size_t> ids;

  std::size_t size() const { return labels.size(); }
};

struct LossGrad {
  double loss = 0.0;
  ParamVector grad;
};

/// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero; the probe
/// starts at the origin.
ParamVector init_params(const ModelSpec& spec, Stream& rng);

/// Mean cross-entropy (linear, mlp) or 0.5 * |theta - target|^2 (probe, the
/// batch is ignored) and its exact gradient. Throws NumericalError on a
/// non-finite loss or gradient.
LossGrad loss_and_grad(const ModelSpec& spec, const ParamVector& params, const Batch& batch);

/// Loss only; same reduction order as loss_and_grad.
double loss_value(const ModelSpec& spec, const ParamVector& params, const Batch& batch);

/// Class scores for one input row (linear and mlp only).
std::vector<double> logits(const ModelSpec& spec, const ParamVector& params,
                           std::span<const double> x);

/// Fraction of rows whose argmax logit (ties -> lowest class) equals the
/// label. Throws UnsupportedOperation for the probe.
double top1_accuracy(const ModelSpec& spec, const ParamVector& params, const Batch& data);

/// Central-difference gradient estimate, one coordinate at a time.
ParamVector finite_diff_grad(const ModelSpec& spec, const ParamVector& params, const Batch& batch,
                             double epsilon);

}  // namespace flsim
