#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace relprobe {

// Dense row-major float32 matrix. Activations and intermediate values all
// live in this type; a vector is a 1×n matrix or a std::vector<float>.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, float fill = 0.0f)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<float> data);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<float> values() { return data_; }
  std::span<const float> values() const { return data_; }
  const std::vector<float>& storage() const { return data_; }

  Matrix& operator+=(const Matrix& other);

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

enum class DType { f32, f16, bf16 };

float half_to_float(std::uint16_t bits);
float bfloat16_to_float(std::uint16_t bits);
std::uint16_t float_to_bfloat16(float value);

// A read-only projection weight stored as [out_features × in_features], the
// layout used by checkpoints for linear layers. Values may be kept in 16-bit
// storage; every product accumulates in float32.
class WeightMatrix {
 public:
  WeightMatrix() = default;
  explicit WeightMatrix(Matrix values);
  WeightMatrix(std::size_t rows, std::size_t cols, DType dtype, std::vector<std::uint16_t> bits);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  DType dtype() const { return dtype_; }
  bool empty() const { return rows_ == 0; }

  float at(std::size_t r, std::size_t c) const;
  void copy_row(std::size_t r, std::span<float> out) const;

  // out[i][o] = Σ_k x[i][k] · W[o][k]   (x: n×cols, out: n×rows)
  Matrix project(const Matrix& x) const;
  // Same, restricted to input columns [col_begin, col_begin + x.cols()) of W.
  Matrix project_columns(const Matrix& x, std::size_t col_begin) const;
  // Single row of `project` for one input vector.
  std::vector<float> project_vector(std::span<const float> x) const;

  Matrix to_matrix() const;

 private:
  void row_f32(std::size_t r, std::size_t begin, std::size_t count, float* out) const;

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  DType dtype_ = DType::f32;
  std::vector<float> f32_;
  std::vector<std::uint16_t> half_;
};

// Dot product with eight interleaved partial sums combined in a fixed order,
// so results are identical from run to run.
float dot(const float* a, const float* b, std::size_t n);

}  // namespace relprobe
