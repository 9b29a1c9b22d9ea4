#include "flsim/params.hpp"

#include <cmath>
#include <functional>
#include <numeric>

#include "flsim/errors.hpp"

namespace flsim {

std::size_t Block::size() const {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

Layout& Layout::add(std::string name, std::vector<std::size_t> dims) {
  Block b{std::move(name), std::move(dims), size_};
  size_ += b.size();
  blocks_.push_back(std::move(b));
  return *this;
}

const Block& Layout::block_at(std::size_t index) const {
  for (const auto& b : blocks_) {
    if (index >= b.offset && index < b.offset + b.size()) return b;
  }
  throw std::out_of_range("parameter index outside layout");
}

ParamVector::ParamVector(LayoutPtr layout)
    : layout_(std::move(layout)), values_(layout_ ? layout_->size() : 0, 0.0) {}

ParamVector::ParamVector(LayoutPtr layout, std::vector<double> values)
    : layout_(std::move(layout)), values_(std::move(values)) {
  if (!layout_ || layout_->size() != values_.size()) {
    throw LayoutError("value count does not match layout size");
  }
}

bool ParamVector::same_layout(const ParamVector& other) const {
  if (layout_ == other.layout_) return true;
  if (!layout_ || !other.layout_) return false;
  return *layout_ == *other.layout_;
}

void ParamVector::require_same_layout(const ParamVector& other) const {
  if (!same_layout(other)) throw LayoutError("parameter layouts differ");
}

ParamVector& ParamVector::operator+=(const ParamVector& other) {
  require_same_layout(other);
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += other.values_[i];
  return *this;
}

ParamVector& ParamVector::operator-=(const ParamVector& other) {
  require_same_layout(other);
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] -= other.values_[i];
  return *this;
}

ParamVector& ParamVector::operator*=(double scale) {
  for (double& v : values_) v *= scale;
  return *this;
}

ParamVector& ParamVector::axpy(double scale, const ParamVector& x) {
  require_same_layout(x);
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += scale * x.values_[i];
  return *this;
}

double ParamVector::dot(const ParamVector& other) const {
  require_same_layout(other);
  double acc = 0.0;
  for (std::size_t i = 0; i < values_.size(); ++i) acc += values_[i] * other.values_[i];
  return acc;
}

double ParamVector::norm() const { return std::sqrt(dot(*this)); }

bool ParamVector::all_finite() const {
  for (double v : values_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::string ParamVector::first_nonfinite_block() const {
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (!std::isfinite(values_[i])) return layout_ ? layout_->block_at(i).name : "?";
  }
  return {};
}

bool ParamVector::operator==(const ParamVector& other) const {
  return same_layout(other) && values_ == other.values_;
}

ParamVector mean(std::span<const ParamVector> vectors) {
  if (vectors.empty()) throw std::invalid_argument("mean of zero vectors");
  // Anchored on the first vector so identical inputs reproduce it bitwise.
  const ParamVector& anchor = vectors.front();
  ParamVector acc(anchor.layout());
  for (const auto& v : vectors) acc += v - anchor;
  const double n = static_cast<double>(vectors.size());
  for (double& x : acc.values()) x /= n;
  return acc += anchor;
}

ParamVector weighted_mean(std::span<const ParamVector> vectors, std::span<const double> weights) {
  if (vectors.empty() || vectors.size() != weights.size()) {
    throw std::invalid_argument("weighted mean needs one weight per vector");
  }
  const ParamVector& anchor = vectors.front();
  ParamVector acc(anchor.layout());
  double total = 0.0;
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    acc.axpy(weights[i], vectors[i] - anchor);
    total += weights[i];
  }
  if (!(total > 0.0)) throw std::invalid_argument("weights must sum to a positive value");
  for (double& x : acc.values()) x /= total;
  return acc += anchor;
}

double max_abs_diff(const ParamVector& a, const ParamVector& b) {
  a.require_same_layout(b);
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

}  // namespace flsim
