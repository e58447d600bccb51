#include "pertrace/tensor.hpp"

#include "pertrace/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/core.h>

#ifdef PERTRACE_HAVE_OPENBLAS
#include <cblas.h>
#endif

namespace pertrace {

Matrix::Matrix(std::size_t rows, std::size_t cols, float fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_)
        throw ShapeError(fmt::format("matrix data has {} values, expected {}x{}", data_.size(), rows_, cols_));
}

Matrix::Matrix(std::initializer_list<std::initializer_list<float>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
        if (r.size() != cols_) throw ShapeError("ragged matrix initializer");
        data_.insert(data_.end(), r.begin(), r.end());
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0f;
    return m;
}

Matrix Matrix::column(std::span<const float> v) {
    return Matrix(v.size(), 1, std::vector<float>(v.begin(), v.end()));
}

Vector Matrix::col(std::size_t c) const {
    Vector out(rows_);
    for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
    return out;
}

void Matrix::set_col(std::size_t c, std::span<const float> v) {
    if (v.size() != rows_) throw ShapeError("set_col: length mismatch");
    for (std::size_t r = 0; r < rows_; ++r) (*this)(r, c) = v[r];
}

Matrix Matrix::slice_rows(std::size_t begin, std::size_t end) const {
    if (begin > end || end > rows_) throw ShapeError("slice_rows out of range");
    return Matrix(end - begin, cols_,
                  std::vector<float>(data_.begin() + static_cast<std::ptrdiff_t>(begin * cols_),
                                     data_.begin() + static_cast<std::ptrdiff_t>(end * cols_)));
}

Matrix Matrix::slice_cols(std::size_t begin, std::size_t end) const {
    if (begin > end || end > cols_) throw ShapeError("slice_cols out of range");
    Matrix out(rows_, end - begin);
    for (std::size_t r = 0; r < rows_; ++r)
        std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(r * cols_ + begin), end - begin, out.row(r).begin());
    return out;
}

bool Matrix::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

namespace {

void require_inner(std::size_t a, std::size_t b, const char* op) {
    if (a != b) throw ShapeError(fmt::format("{}: inner dimensions differ ({} vs {})", op, a, b));
}

} // namespace

namespace kernels {

#ifdef PERTRACE_HAVE_OPENBLAS
namespace {
void pin_blas_threads() {
    static const bool once = [] {
        openblas_set_num_threads(1);
        return true;
    }();
    (void)once;
}
} // namespace
#endif

bool using_blas() noexcept {
#ifdef PERTRACE_HAVE_OPENBLAS
    return true;
#else
    return false;
#endif
}

void sgemm(bool trans_b, std::size_t m, std::size_t n, std::size_t k, const float* a, std::size_t lda,
           const float* b, std::size_t ldb, float* c, std::size_t ldc, float beta) {
    if (m == 0 || n == 0) return;
#ifdef PERTRACE_HAVE_OPENBLAS
    pin_blas_threads();
    cblas_sgemm(CblasRowMajor, CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m),
                static_cast<int>(n), static_cast<int>(k), 1.0f, a, static_cast<int>(lda), b, static_cast<int>(ldb),
                beta, c, static_cast<int>(ldc));
#else
    for (std::size_t i = 0; i < m; ++i) {
        float* __restrict crow = c + i * ldc;
        if (beta == 0.0f) {
            std::fill_n(crow, n, 0.0f);
        } else if (beta != 1.0f) {
            for (std::size_t j = 0; j < n; ++j) crow[j] *= beta;
        }
        const float* arow = a + i * lda;
        if (trans_b) {
            for (std::size_t j = 0; j < n; ++j) {
                const float* brow = b + j * ldb;
                float acc = 0.0f;
                for (std::size_t t = 0; t < k; ++t) acc += arow[t] * brow[t];
                crow[j] += acc;
            }
        } else {
            for (std::size_t t = 0; t < k; ++t) {
                const float av = arow[t];
                if (av == 0.0f) continue;
                const float* __restrict brow = b + t * ldb;
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    }
#endif
}

void sgemv(std::size_t rows, std::size_t cols, const float* a, const float* x, float* y) {
    if (rows == 0) return;
#ifdef PERTRACE_HAVE_OPENBLAS
    pin_blas_threads();
    cblas_sgemv(CblasRowMajor, CblasNoTrans, static_cast<int>(rows), static_cast<int>(cols), 1.0f, a,
                static_cast<int>(cols), x, 1, 0.0f, y, 1);
#else
    for (std::size_t i = 0; i < rows; ++i) {
        const float* arow = a + i * cols;
        float acc = 0.0f;
        for (std::size_t t = 0; t < cols; ++t) acc += arow[t] * x[t];
        y[i] = acc;
    }
#endif
}

} // namespace kernels

Matrix matmul(const Matrix& a, const Matrix& b) {
    require_inner(a.cols(), b.rows(), "matmul");
    Matrix c(a.rows(), b.cols());
    kernels::sgemm(false, a.rows(), b.cols(), a.cols(), a.data(), a.cols(), b.data(), b.cols(), c.data(), c.cols(),
                   0.0f);
    return c;
}

Matrix matmul_bt(const Matrix& a, const Matrix& b) {
    require_inner(a.cols(), b.cols(), "matmul_bt");
    Matrix c(a.rows(), b.rows());
    kernels::sgemm(true, a.rows(), b.rows(), a.cols(), a.data(), a.cols(), b.data(), b.cols(), c.data(), c.cols(),
                   0.0f);
    return c;
}

Matrix matmul_at(const Matrix& a, const Matrix& b) {
    require_inner(a.rows(), b.rows(), "matmul_at");
    Matrix c(a.cols(), b.cols());
    for (std::size_t t = 0; t < a.rows(); ++t) {
        const auto arow = a.row(t);
        const auto brow = b.row(t);
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const float av = arow[i];
            if (av == 0.0f) continue;
            float* crow = c.data() + i * c.cols();
            for (std::size_t j = 0; j < b.cols(); ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

Matrix matmul_d(const Matrix& a, const Matrix& b) {
    require_inner(a.cols(), b.rows(), "matmul_d");
    Matrix c(a.rows(), b.cols());
    std::vector<double> acc(b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double av = a(i, k);
            if (av == 0.0) continue;
            const auto brow = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) acc[j] += av * brow[j];
        }
        for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) = static_cast<float>(acc[j]);
    }
    return c;
}

Vector vecmat(std::span<const float> x, const Matrix& a) {
    require_inner(x.size(), a.rows(), "vecmat");
    std::vector<double> acc(a.cols(), 0.0);
    for (std::size_t k = 0; k < a.rows(); ++k) {
        const double xv = x[k];
        if (xv == 0.0) continue;
        const auto arow = a.row(k);
        for (std::size_t j = 0; j < a.cols(); ++j) acc[j] += xv * arow[j];
    }
    return Vector(acc.begin(), acc.end());
}

Vector matvec(const Matrix& a, std::span<const float> x) {
    require_inner(a.cols(), x.size(), "matvec");
    Vector y(a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) y[i] = static_cast<float>(dot(a.row(i), x));
    return y;
}

void gemv_row_accumulate(std::span<const float> x, const Matrix& w, std::span<float> out) {
    require_inner(x.size(), w.rows(), "gemv_row_accumulate");
    require_inner(out.size(), w.cols(), "gemv_row_accumulate");
    const std::size_t n = w.cols();
    float* __restrict o = out.data();
    for (std::size_t k = 0; k < x.size(); ++k) {
        const float xv = x[k];
        if (xv == 0.0f) continue;
        const float* __restrict wrow = w.data() + k * n;
        for (std::size_t j = 0; j < n; ++j) o[j] += xv * wrow[j];
    }
}

Matrix transpose(const Matrix& a) {
    Matrix t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

Matrix add(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("add: shape mismatch");
    Matrix c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] += b.data()[i];
    return c;
}

Matrix subtract(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("subtract: shape mismatch");
    Matrix c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] -= b.data()[i];
    return c;
}

Matrix scale(const Matrix& a, float s) {
    Matrix c = a;
    for (auto& v : c.storage()) v *= s;
    return c;
}

Matrix outer(std::span<const float> u, std::span<const float> v) {
    Matrix m(u.size(), v.size());
    for (std::size_t i = 0; i < u.size(); ++i)
        for (std::size_t j = 0; j < v.size(); ++j) m(i, j) = u[i] * v[j];
    return m;
}

double dot(std::span<const float> a, std::span<const float> b) {
    require_inner(a.size(), b.size(), "dot");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * b[i];
    return acc;
}

double norm(std::span<const float> a) { return std::sqrt(dot(a, a)); }

double frobenius_norm(const Matrix& a) { return norm(a.values()); }

double max_abs_diff(std::span<const float> a, std::span<const float> b) {
    require_inner(a.size(), b.size(), "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
    return m;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("max_abs_diff: shape mismatch");
    return max_abs_diff(a.values(), b.values());
}

Vector normalized(std::span<const float> v) {
    const double n = norm(v);
    if (n == 0.0) throw NumericError("cannot normalize a zero vector");
    Vector out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i] / n);
    return out;
}

double cosine(std::span<const float> u, std::span<const float> v) {
    require_inner(u.size(), v.size(), "cosine");
    const double nu = norm(u);
    const double nv = norm(v);
    if (nu == 0.0 || nv == 0.0) throw NumericError("cosine of a zero vector");
    return std::clamp(dot(u, v) / (nu * nv), -1.0, 1.0);
}

void softmax_inplace(std::span<float> row) {
    if (row.empty()) return;
    const float mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (auto& v : row) {
        v = std::exp(v - mx);
        sum += v;
    }
    const float inv = static_cast<float>(1.0 / sum);
    for (auto& v : row) v *= inv;
}

Matrix softmax_rows(const Matrix& logits) {
    Matrix out = logits;
    for (std::size_t r = 0; r < out.rows(); ++r) softmax_inplace(out.row(r));
    return out;
}

Matrix layer_norm_rows(const Matrix& x, std::span<const float> gain, std::span<const float> bias, float eps) {
    const std::size_t d = x.cols();
    if ((!gain.empty() && gain.size() != d) || (!bias.empty() && bias.size() != d))
        throw ShapeError("layer_norm_rows: parameter length mismatch");
    Matrix out(x.rows(), d);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const auto in = x.row(r);
        double mean = 0.0;
        for (float v : in) mean += v;
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (float v : in) var += (v - mean) * (v - mean);
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        auto o = out.row(r);
        for (std::size_t j = 0; j < d; ++j) {
            double y = (in[j] - mean) * inv;
            if (!gain.empty()) y *= gain[j];
            if (!bias.empty()) y += bias[j];
            o[j] = static_cast<float>(y);
        }
    }
    return out;
}

Matrix rms_norm_rows(const Matrix& x, std::span<const float> gain, float eps) {
    const std::size_t d = x.cols();
    if (!gain.empty() && gain.size() != d) throw ShapeError("rms_norm_rows: gain length mismatch");
    Matrix out(x.rows(), d);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const auto in = x.row(r);
        double ms = 0.0;
        for (float v : in) ms += static_cast<double>(v) * v;
        const double inv = 1.0 / std::sqrt(ms / static_cast<double>(d) + eps);
        auto o = out.row(r);
        for (std::size_t j = 0; j < d; ++j) o[j] = static_cast<float>(in[j] * inv * (gain.empty() ? 1.0 : gain[j]));
    }
    return out;
}

} // namespace pertrace
