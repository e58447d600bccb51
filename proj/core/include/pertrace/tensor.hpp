#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace pertrace {

using Vector = std::vector<float>;

/// Dense row-major float matrix with value semantics.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, float fill = 0.0f);
    Matrix(std::size_t rows, std::size_t cols, std::vector<float> data);
    Matrix(std::initializer_list<std::initializer_list<float>> rows);

    static Matrix identity(std::size_t n);
    /// Column vector (n x 1).
    static Matrix column(std::span<const float> v);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    float& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    float operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<float> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const float> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    Vector col(std::size_t c) const;
    void set_col(std::size_t c, std::span<const float> v);

    float* data() noexcept { return data_.data(); }
    const float* data() const noexcept { return data_.data(); }
    std::span<const float> values() const noexcept { return data_; }
    std::vector<float>& storage() noexcept { return data_; }

    /// Rows [begin, end) as a new matrix.
    Matrix slice_rows(std::size_t begin, std::size_t end) const;
    /// Columns [begin, end) as a new matrix.
    Matrix slice_cols(std::size_t begin, std::size_t end) const;

    bool all_finite() const noexcept;

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<float> data_;
};

// Products. Accumulation is in float for the engine kernels and in double for
// the `*_d` analysis helpers.

/// C = A * B
Matrix matmul(const Matrix& a, const Matrix& b);
/// C = A * B^T
Matrix matmul_bt(const Matrix& a, const Matrix& b);
/// C = A^T * B
Matrix matmul_at(const Matrix& a, const Matrix& b);
/// C = A * B with double accumulators.
Matrix matmul_d(const Matrix& a, const Matrix& b);
/// y = x * A (row vector times matrix), double accumulators.
Vector vecmat(std::span<const float> x, const Matrix& a);
/// y = A * x, double accumulators.
Vector matvec(const Matrix& a, std::span<const float> x);

/// out[0..n) += x[0..k) * W  for row-major W (k x n); float accumulation.
void gemv_row_accumulate(std::span<const float> x, const Matrix& w, std::span<float> out);

Matrix transpose(const Matrix& a);
Matrix add(const Matrix& a, const Matrix& b);
Matrix subtract(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, float s);
Matrix outer(std::span<const float> u, std::span<const float> v);

double dot(std::span<const float> a, std::span<const float> b);
double norm(std::span<const float> a);
double frobenius_norm(const Matrix& a);
/// Largest absolute entry-wise difference.
double max_abs_diff(const Matrix& a, const Matrix& b);
double max_abs_diff(std::span<const float> a, std::span<const float> b);

Vector normalized(std::span<const float> v);

namespace kernels {

/// C = A * op(B) + beta * C on raw row-major buffers, float accumulation.
/// op(B) is B (k x n, row stride ldb) or, with trans_b, B^T for B stored n x k.
void sgemm(bool trans_b, std::size_t m, std::size_t n, std::size_t k, const float* a, std::size_t lda,
           const float* b, std::size_t ldb, float* c, std::size_t ldc, float beta);

/// y = A x for row-major A (rows x cols).
void sgemv(std::size_t rows, std::size_t cols, const float* a, const float* x, float* y);

/// True when products are backed by an external BLAS.
bool using_blas() noexcept;

} // namespace kernels

/// Cosine similarity; throws NumericError on a zero vector.
double cosine(std::span<const float> u, std::span<const float> v);

/// In-place numerically stable softmax over one row.
void softmax_inplace(std::span<float> row);
/// Row-wise softmax.
Matrix softmax_rows(const Matrix& logits);

/// Row-wise layer normalization with optional gain and bias (empty = identity).
Matrix layer_norm_rows(const Matrix& x, std::span<const float> gain, std::span<const float> bias, float eps);
/// Row-wise RMS normalization with gain.
Matrix rms_norm_rows(const Matrix& x, std::span<const float> gain, float eps);

} // namespace pertrace
