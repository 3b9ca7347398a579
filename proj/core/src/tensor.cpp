#include "relprobe/tensor.hpp"

#include <bit>
#include <cstring>
#include <utility>

#include "relprobe/errors.hpp"

namespace relprobe {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw ShapeError("matrix data size does not match " + std::to_string(rows_) + "x" +
                     std::to_string(cols_));
  }
}

Matrix& Matrix::operator+=(const Matrix& other) {
  if (other.rows_ != rows_ || other.cols_ != cols_) {
    throw ShapeError("matrix addition with mismatched shapes");
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

float half_to_float(std::uint16_t bits) {
  const std::uint32_t sign = static_cast<std::uint32_t>(bits & 0x8000u) << 16;
  std::uint32_t exponent = (bits >> 10) & 0x1fu;
  std::uint32_t mantissa = bits & 0x3ffu;
  std::uint32_t out;
  if (exponent == 0) {
    if (mantissa == 0) {
      out = sign;
    } else {
      // subnormal: renormalize
      exponent = 127 - 15 + 1;
      while ((mantissa & 0x400u) == 0) {
        mantissa <<= 1;
        --exponent;
      }
      mantissa &= 0x3ffu;
      out = sign | (exponent << 23) | (mantissa << 13);
    }
  } else if (exponent == 0x1f) {
    out = sign | 0x7f800000u | (mantissa << 13);
  } else {
    out = sign | ((exponent + 127 - 15) << 23) | (mantissa << 13);
  }
  return std::bit_cast<float>(out);
}

float bfloat16_to_float(std::uint16_t bits) {
  return std::bit_cast<float>(static_cast<std::uint32_t>(bits) << 16);
}

std::uint16_t float_to_bfloat16(float value) {
  std::uint32_t bits = std::bit_cast<std::uint32_t>(value);
  if ((bits & 0x7fffffffu) > 0x7f800000u) return static_cast<std::uint16_t>((bits >> 16) | 0x40u);
  // round to nearest even
  bits += 0x7fffu + ((bits >> 16) & 1u);
  return static_cast<std::uint16_t>(bits >> 16);
}

namespace {

// Eight float lanes held as two 4-wide halves, which every x86-64 and
// AArch64 target maps to registers. Lane arithmetic, and therefore rounding,
// is the same everywhere.
typedef float Quad __attribute__((vector_size(16)));

struct Lanes {
  Quad lo = {0, 0, 0, 0};
  Quad hi = {0, 0, 0, 0};
};

inline Quad load_quad(const float* p) {
  Quad v;
  std::memcpy(&v, p, sizeof(v));
  return v;
}

inline void fma_lanes(Lanes& acc, const float* a, const float* b) {
  acc.lo += load_quad(a) * load_quad(b);
  acc.hi += load_quad(a + 4) * load_quad(b + 4);
}

inline void fma_tail(Lanes& acc, const float* a, const float* b, std::size_t count) {
  float ta[8] = {}, tb[8] = {};
  for (std::size_t j = 0; j < count; ++j) {
    ta[j] = a[j];
    tb[j] = b[j];
  }
  fma_lanes(acc, ta, tb);
}

inline float reduce_lanes(const Lanes& acc) {
  const Quad s = acc.lo + acc.hi;
  return (s[0] + s[1]) + (s[2] + s[3]);
}

// Four dot products against one shared vector; each result is bit-identical
// to dot() on the same inputs.
void dot4(const float* a0, const float* a1, const float* a2, const float* a3, const float* b, std::size_t n,
          float* out) {
  Lanes c0, c1, c2, c3;
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    fma_lanes(c0, a0 + i, b + i);
    fma_lanes(c1, a1 + i, b + i);
    fma_lanes(c2, a2 + i, b + i);
    fma_lanes(c3, a3 + i, b + i);
  }
  if (i < n) {
    fma_tail(c0, a0 + i, b + i, n - i);
    fma_tail(c1, a1 + i, b + i, n - i);
    fma_tail(c2, a2 + i, b + i, n - i);
    fma_tail(c3, a3 + i, b + i, n - i);
  }
  out[0] = reduce_lanes(c0);
  out[1] = reduce_lanes(c1);
  out[2] = reduce_lanes(c2);
  out[3] = reduce_lanes(c3);
}

}  // namespace

float dot(const float* a, const float* b, std::size_t n) {
  Lanes acc;
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) fma_lanes(acc, a + i, b + i);
  if (i < n) fma_tail(acc, a + i, b + i, n - i);
  return reduce_lanes(acc);
}

WeightMatrix::WeightMatrix(Matrix values)
    : rows_(values.rows()), cols_(values.cols()), dtype_(DType::f32), f32_(values.storage()) {}

WeightMatrix::WeightMatrix(std::size_t rows, std::size_t cols, DType dtype,
                           std::vector<std::uint16_t> bits)
    : rows_(rows), cols_(cols), dtype_(dtype), half_(std::move(bits)) {
  if (dtype == DType::f32) throw ShapeError("16-bit constructor used with f32 dtype");
  if (half_.size() != rows * cols) throw ShapeError("weight storage size mismatch");
}

void WeightMatrix::row_f32(std::size_t r, std::size_t begin, std::size_t count, float* out) const {
  const std::size_t base = r * cols_ + begin;
  if (dtype_ == DType::f32) {
    std::memcpy(out, f32_.data() + base, count * sizeof(float));
  } else if (dtype_ == DType::bf16) {
    for (std::size_t c = 0; c < count; ++c) out[c] = bfloat16_to_float(half_[base + c]);
  } else {
    for (std::size_t c = 0; c < count; ++c) out[c] = half_to_float(half_[base + c]);
  }
}

float WeightMatrix::at(std::size_t r, std::size_t c) const {
  float v;
  row_f32(r, c, 1, &v);
  return v;
}

void WeightMatrix::copy_row(std::size_t r, std::span<float> out) const {
  if (out.size() != cols_) throw ShapeError("copy_row: output width mismatch");
  row_f32(r, 0, cols_, out.data());
}

Matrix WeightMatrix::project(const Matrix& x) const { return project_columns(x, 0); }

Matrix WeightMatrix::project_columns(const Matrix& x, std::size_t col_begin) const {
  const std::size_t width = x.cols();
  if (col_begin + width > cols_) {
    throw ShapeError("projection input width " + std::to_string(width) + " exceeds weight columns " +
                     std::to_string(cols_));
  }
  Matrix out(x.rows(), rows_);
  std::vector<float> buffer(width);
  for (std::size_t o = 0; o < rows_; ++o) {
    const float* w;
    if (dtype_ == DType::f32) {
      w = f32_.data() + o * cols_ + col_begin;
    } else {
      row_f32(o, col_begin, width, buffer.data());
      w = buffer.data();
    }
    std::size_t i = 0;
    for (; i + 4 <= x.rows(); i += 4) {
      float r[4];
      dot4(x.row(i).data(), x.row(i + 1).data(), x.row(i + 2).data(), x.row(i + 3).data(), w, width, r);
      for (std::size_t k = 0; k < 4; ++k) out(i + k, o) = r[k];
    }
    for (; i < x.rows(); ++i) out(i, o) = dot(x.row(i).data(), w, width);
  }
  return out;
}

std::vector<float> WeightMatrix::project_vector(std::span<const float> x) const {
  if (x.size() != cols_) throw ShapeError("projection vector width mismatch");
  std::vector<float> out(rows_);
  std::vector<float> buffer(cols_);
  for (std::size_t o = 0; o < rows_; ++o) {
    const float* w;
    if (dtype_ == DType::f32) {
      w = f32_.data() + o * cols_;
    } else {
      row_f32(o, 0, cols_, buffer.data());
      w = buffer.data();
    }
    out[o] = dot(x.data(), w, cols_);
  }
  return out;
}

Matrix WeightMatrix::to_matrix() const {
  Matrix m(rows_, cols_);
  for (std::size_t r = 0; r < rows_; ++r) row_f32(r, 0, cols_, m.row(r).data());
  return m;
}

}  // namespace relprobe
