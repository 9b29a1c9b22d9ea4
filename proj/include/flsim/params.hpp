#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace flsim {

/// One named tensor inside a flat parameter vector.
struct Block {
  std::string name;
  std::vector<std::size_t> dims;
  std::size_t offset = 0;

  std::size_t size() const;
  bool operator==(const Block&) const = default;
};

/// Ordered list of blocks. Offsets are assigned contiguously by `add`.
class Layout {
 public:
  Layout& add(std::string name, std::vector<std::size_t> dims);

  const std::vector<Block>& blocks() const { return blocks_; }
  std::size_t size() const { return size_; }

  /// Block that owns flat coordinate `index`.
  const Block& block_at(std::size_t index) const;

  bool operator==(const Layout& other) const { return blocks_ == other.blocks_; }

 private:
  std::vector<Block> blocks_;
  std::size_t size_ = 0;
};

using LayoutPtr = std::shared_ptr<const Layout>;

/// Flat 64-bit model parameters tagged with their layout. All arithmetic
/// requires identical layouts and throws LayoutError otherwise.
class ParamVector {
 public:
  ParamVector() = default;
  /// Zero vector shaped by `layout`.
  explicit ParamVector(LayoutPtr layout);
  ParamVector(LayoutPtr layout, std::vector<double> values);

  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }
  const LayoutPtr& layout() const { return layout_; }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }

  std::span<double> block(const Block& b) { return values().subspan(b.offset, b.size()); }
  std::span<const double> block(const Block& b) const {
    return values().subspan(b.offset, b.size());
  }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  bool same_layout(const ParamVector& other) const;
  void require_same_layout(const ParamVector& other) const;

  ParamVector& operator+=(const ParamVector& other);
  ParamVector& operator-=(const ParamVector& other);
  ParamVector& operator*=(double scale);
  /// this += scale * x
  ParamVector& axpy(double scale, const ParamVector& x);

  friend ParamVector operator+(ParamVector a, const ParamVector& b) { return a += b; }
  friend ParamVector operator-(ParamVector a, const ParamVector& b) { return a -= b; }
  friend ParamVector operator*(ParamVector a, double s) { return a *= s; }
  friend ParamVector operator*(double s, ParamVector a) { return a *= s; }

  double dot(const ParamVector& other) const;
  double norm() const;
  bool all_finite() const;
  /// Name of the first block containing a non-finite value, empty if none.
  std::string first_nonfinite_block() const;

  /// Deep, bitwise equality of layout and values.
  bool operator==(const ParamVector& other) const;

 private:
  LayoutPtr layout_;
  std::vector<double> values_;
};

/// Uniform mean x_0 + sum_i (x_i - x_0) / n, summed in the given order;
/// exact when all inputs are equal.
ParamVector mean(std::span<const ParamVector> vectors);

/// Weighted mean x_0 + sum_i w_i (x_i - x_0) / sum_i w_i, summed in the
/// given order.
ParamVector weighted_mean(std::span<const ParamVector> vectors, std::span<const double> weights);

/// Largest absolute coordinate difference; layouts must match.
double max_abs_diff(const ParamVector& a, const ParamVector& b);

}  // namespace flsim
