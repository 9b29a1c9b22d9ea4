#include "flsim/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "flsim/errors.hpp"

namespace flsim {
namespace {

// Fixed block order; gradient code indexes blocks positionally.
enum LinearBlock { kWeight = 0, kBias = 1 };
enum MlpBlock { kHiddenW = 0, kHiddenB = 1, kOutW = 2, kOutB = 3 };

void check_batch(const ModelSpec& spec, const Batch& batch) {
  if (batch.size() == 0) throw ConfigError("batch is empty");
  if (batch.features.rows != batch.labels.size()) {
    throw ConfigError("batch feature rows and label count differ");
  }
  if (!batch.ids.empty() && batch.ids.size() != batch.labels.size()) {
    throw ConfigError("batch ids and label count differ");
  }
  if (spec.kind == ModelKind::quadratic_probe) return;
  if (batch.features.cols != spec.input_dim) {
    throw ConfigError("batch feature width " + std::to_string(batch.features.cols) +
                      " does not match input_dim " + std::to_string(spec.input_dim));
  }
  for (int y : batch.labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= spec.num_classes) {
      throw ConfigError("label " + std::to_string(y) + " out of range");
    }
  }
}

void check_params(const ModelSpec& spec, const ParamVector& params) {
  if (params.size() != spec.param_count()) {
    throw LayoutError("parameter count " + std::to_string(params.size()) +
                      " does not match model (" + std::to_string(spec.param_count()) + ")");
  }
}

// Row visiting order: ascending canonical id.
std::vector<std::size_t> reduction_order(const Batch& batch) {
  std::vector<std::size_t> order(batch.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (!batch.ids.empty()) {
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return batch.ids[a] < batch.ids[b]; });
  }
  return order;
}

double activate(Activation act, double a) { return act == Activation::relu ? std::max(a, 0.0) : std::tanh(a); }

// Derivative expressed through the activation output h = act(a).
double activate_grad(Activation act, double a, double h) {
  if (act == Activation::relu) return a > 0.0 ? 1.0 : 0.0;
  return 1.0 - h * h;
}

// z = W x + b for a row-major W of shape (out, in).
void affine(std::span<const double> w, std::span<const double> b, std::span<const double> x,
            std::span<double> z) {
  const std::size_t in = x.size();
  for (std::size_t k = 0; k < z.size(); ++k) {
    double acc = b[k];
    const double* wk = w.data() + k * in;
    for (std::size_t j = 0; j < in; ++j) acc += wk[j] * x[j];
    z[k] = acc;
  }
}

// Returns -log softmax(z)[y]; overwrites z with softmax(z) - onehot(y).
double cross_entropy_backward(std::span<double> z, int y) {
  const double m = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (double v : z) sum += std::exp(v - m);
  const double lse = m + std::log(sum);
  const double loss = lse - z[static_cast<std::size_t>(y)];
  for (double& v : z) v = std::exp(v - lse);
  z[static_cast<std::size_t>(y)] -= 1.0;
  return loss;
}

double cross_entropy(std::span<const double> z, int y) {
  const double m = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (double v : z) sum += std::exp(v - m);
  return m + std::log(sum) - z[static_cast<std::size_t>(y)];
}

void check_finite(double loss, const ParamVector& grad) {
  if (!std::isfinite(loss)) throw NumericalError("loss", "non-finite loss");
  const std::string block = grad.first_nonfinite_block();
  if (!block.empty()) throw NumericalError(block, "non-finite gradient in block '" + block + "'");
}

LossGrad probe_loss_grad(const ModelSpec& spec, const ParamVector& params) {
  LossGrad out{0.0, ParamVector(params.layout())};
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double diff = params[i] - spec.probe_target[i];
    out.loss += diff * diff;
    out.grad[i] = diff;
  }
  out.loss *= 0.5;
  return out;
}

LossGrad linear_loss_grad(const ModelSpec& spec, const ParamVector& params, const Batch& batch) {
  const auto& blocks = params.layout()->blocks();
  const auto w = params.block(blocks[kWeight]);
  const auto b = params.block(blocks[kBias]);
  LossGrad out{0.0, ParamVector(params.layout())};
  auto gw = out.grad.block(blocks[kWeight]);
  auto gb = out.grad.block(blocks[kBias]);

  const std::size_t d = spec.input_dim;
  std::vector<double> z(spec.num_classes);
  for (std::size_t row : reduction_order(batch)) {
    const auto x = batch.features.row(row);
    affine(w, b, x, z);
    out.loss += cross_entropy_backward(z, batch.labels[row]);
    for (std::size_t k = 0; k < z.size(); ++k) {
      double* gk = gw.data() + k * d;
      for (std::size_t j = 0; j < d; ++j) gk[j] += z[k] * x[j];
      gb[k] += z[k];
    }
  }
  const double n = static_cast<double>(batch.size());
  out.loss /= n;
  for (double& g : out.grad.values()) g /= n;
  return out;
}

LossGrad mlp_loss_grad(const ModelSpec& spec, const ParamVector& params, const Batch& batch) {
  const auto& blocks = params.layout()->blocks();
  const auto w1 = params.block(blocks[kHiddenW]);
  const auto b1 = params.block(blocks[kHiddenB]);
  const auto w2 = params.block(blocks[kOutW]);
  const auto b2 = params.block(blocks[kOutB]);
  LossGrad out{0.0, ParamVector(params.layout())};
  auto gw1 = out.grad.block(blocks[kHiddenW]);
  auto gb1 = out.grad.block(blocks[kHiddenB]);
  auto gw2 = out.grad.block(blocks[kOutW]);
  auto gb2 = out.grad.block(blocks[kOutB]);

  const std::size_t d = spec.input_dim;
  const std::size_t h_dim = spec.hidden_dim;
  std::vector<double> pre(h_dim), hidden(h_dim), dhidden(h_dim), z(spec.num_classes);
  for (std::size_t row : reduction_order(batch)) {
    const auto x = batch.features.row(row);
    affine(w1, b1, x, pre);
    for (std::size_t i = 0; i < h_dim; ++i) hidden[i] = activate(spec.activation, pre[i]);
    affine(w2, b2, hidden, z);
    out.loss += cross_entropy_backward(z, batch.labels[row]);

    std::fill(dhidden.begin(), dhidden.end(), 0.0);
    for (std::size_t k = 0; k < z.size(); ++k) {
      const double dz = z[k];
      double* gk = gw2.data() + k * h_dim;
      const double* wk = w2.data() + k * h_dim;
      for (std::size_t i = 0; i < h_dim; ++i) {
        gk[i] += dz * hidden[i];
        dhidden[i] += wk[i] * dz;
      }
      gb2[k] += dz;
    }
    for (std::size_t i = 0; i < h_dim; ++i) {
      const double da = dhidden[i] * activate_grad(spec.activation, pre[i], hidden[i]);
      double* gi = gw1.data() + i * d;
      for (std::size_t j = 0; j < d; ++j) gi[j] += da * x[j];
      gb1[i] += da;
    }
  }
  const double n = static_cast<double>(batch.size());
  out.loss /= n;
  for (double& g : out.grad.values()) g /= n;
  return out;
}

}  // namespace

std::string_view to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::linear: return "linear";
    case ModelKind::mlp: return "mlp";
    case ModelKind::quadratic_probe: return "quadratic_probe";
  }
  return "?";
}

std::string_view to_string(Activation act) { return act == Activation::relu ? "relu" : "tanh"; }

ModelKind parse_model_kind(std::string_view text) {
  if (text == "linear") return ModelKind::linear;
  if (text == "mlp") return ModelKind::mlp;
  if (text == "quadratic_probe") return ModelKind::quadratic_probe;
  throw ConfigError("unknown model kind '" + std::string(text) + "'");
}

Activation parse_activation(std::string_view text) {
  if (text == "relu") return Activation::relu;
  if (text == "tanh") return Activation::tanh;
  throw ConfigError("unknown activation '" + std::string(text) + "'");
}

void ModelSpec::validate() const {
  if (kind == ModelKind::quadratic_probe) {
    if (probe_target.empty()) throw ConfigError("quadratic_probe needs a non-empty probe_target");
    return;
  }
  if (input_dim == 0) throw ConfigError("input_dim must be positive");
  if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
  if (kind == ModelKind::mlp && hidden_dim == 0) throw ConfigError("mlp needs hidden_dim > 0");
}

LayoutPtr ModelSpec::layout() const {
  validate();
  auto layout = std::make_shared<Layout>();
  switch (kind) {
    case ModelKind::linear:
      layout->add("weight", {num_classes, input_dim}).add("bias", {num_classes});
      break;
    case ModelKind::mlp:
      layout->add("hidden.weight", {hidden_dim, input_dim})
          .add("hidden.bias", {hidden_dim})
          .add("out.weight", {num_classes, hidden_dim})
          .add("out.bias", {num_classes});
      break;
    case ModelKind::quadratic_probe:
      layout->add("theta", {probe_target.size()});
      break;
  }
  return layout;
}

std::size_t ModelSpec::param_count() const {
  switch (kind) {
    case ModelKind::linear: return num_classes * input_dim + num_classes;
    case ModelKind::mlp:
      return hidden_dim * input_dim + hidden_dim + num_classes * hidden_dim + num_classes;
    case ModelKind::quadratic_probe: return probe_target.size();
  }
  return 0;
}

ParamVector init_params(const ModelSpec& spec, Stream& rng) {
  ParamVector params(spec.layout());
  if (spec.kind == ModelKind::quadratic_probe) return params;
  for (const auto& block : params.layout()->blocks()) {
    if (block.dims.size() != 2) continue;  // biases stay zero
    const double bound = 1.0 / std::sqrt(static_cast<double>(block.dims[1]));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& v : params.block(block)) v = dist(rng);
  }
  return params;
}

LossGrad loss_and_grad(const ModelSpec& spec, const ParamVector& params, const Batch& batch) {
  check_params(spec, params);
  LossGrad out;
  switch (spec.kind) {
    case ModelKind::quadratic_probe: out = probe_loss_grad(spec, params); break;
    case ModelKind::linear:
      check_batch(spec, batch);
      out = linear_loss_grad(spec, params, batch);
      break;
    case ModelKind::mlp:
      check_batch(spec, batch);
      out = mlp_loss_grad(spec, params, batch);
      break;
  }
  check_finite(out.loss, out.grad);
  return out;
}

std::vector<double> logits(const ModelSpec& spec, const ParamVector& params,
                           std::span<const double> x) {
  if (spec.kind == ModelKind::quadratic_probe) {
    throw UnsupportedOperation("quadratic_probe has no class scores");
  }
  const auto& blocks = params.layout()->blocks();
  std::vector<double> z(spec.num_classes);
  if (spec.kind == ModelKind::linear) {
    affine(params.block(blocks[kWeight]), params.block(blocks[kBias]), x, z);
    return z;
  }
  std::vector<double> hidden(spec.hidden_dim);
  affine(params.block(blocks[kHiddenW]), params.block(blocks[kHiddenB]), x, hidden);
  for (double& h : hidden) h = activate(spec.activation, h);
  affine(params.block(blocks[kOutW]), params.block(blocks[kOutB]), hidden, z);
  return z;
}

double loss_value(const ModelSpec& spec, const ParamVector& params, const Batch& batch) {
  check_params(spec, params);
  if (spec.kind == ModelKind::quadratic_probe) return probe_loss_grad(spec, params).loss;
  check_batch(spec, batch);
  double loss = 0.0;
  for (std::size_t row : reduction_order(batch)) {
    loss += cross_entropy(logits(spec, params, batch.features.row(row)), batch.labels[row]);
  }
  return loss / static_cast<double>(batch.size());
}

double top1_accuracy(const ModelSpec& spec, const ParamVector& params, const Batch& data) {
  if (spec.kind == ModelKind::quadratic_probe) {
    throw UnsupportedOperation("top1_accuracy is undefined for quadratic_probe");
  }
  check_params(spec, params);
  check_batch(spec, data);
  std::size_t correct = 0;
  for (std::size_t row = 0; row < data.size(); ++row) {
    const auto z = logits(spec, params, data.features.row(row));
    // max_element returns the first maximum, i.e. the lowest class index.
    const auto best = std::max_element(z.begin(), z.end()) - z.begin();
    if (best == data.labels[row]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

ParamVector finite_diff_grad(const ModelSpec& spec, const ParamVector& params, const Batch& batch,
                             double epsilon) {
  if (!(epsilon > 0.0)) throw ConfigError("finite-difference epsilon must be positive");
  ParamVector probe = params;
  ParamVector grad(params.layout());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double original = probe[i];
    probe[i] = original + epsilon;
    const double up = loss_value(spec, probe, batch);
    probe[i] = original - epsilon;
    const double down = loss_value(spec, probe, batch);
    probe[i] = original;
    grad[i] = (up - down) / (2.0 * epsilon);
  }
  return grad;
}

}  // namespace flsim
