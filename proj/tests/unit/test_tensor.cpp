#include "pertrace/errors.hpp"
#include "pertrace/tensor.hpp"

#include "oracles/precise.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace pertrace;

namespace {

Matrix random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c) {
    std::normal_distribution<float> nd;
    Matrix m(r, c);
    for (float& v : m.storage()) v = nd(rng);
    return m;
}

double naive_entry(const Matrix& a, const Matrix& b, std::size_t i, std::size_t j) {
    long double s = 0;
    for (std::size_t k = 0; k < a.cols(); ++k) s += static_cast<long double>(a(i, k)) * b(k, j);
    return static_cast<double>(s);
}

} // namespace

TEST_CASE("matrix construction and slicing") {
    const Matrix m{{1, 2, 3}, {4, 5, 6}};
    CHECK(m.rows() == 2);
    CHECK(m.cols() == 3);
    CHECK(m(1, 2) == 6.0f);
    CHECK(m.col(1) == Vector{2, 5});
    CHECK(m.slice_rows(1, 2) == Matrix{{4, 5, 6}});
    CHECK(m.slice_cols(1, 3) == Matrix{{2, 3}, {5, 6}});
    CHECK(transpose(m) == Matrix{{1, 4}, {2, 5}, {3, 6}});
    CHECK_THROWS_AS(Matrix(2, 2, std::vector<float>(3)), ShapeError);
    CHECK_THROWS_AS((Matrix{{1, 2}, {3}}), ShapeError);
    CHECK_THROWS_AS(m.slice_rows(1, 3), ShapeError);
}

TEST_CASE("products agree with a long double reference") {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t m = 1 + rng() % 9, k = 1 + rng() % 40, n = 1 + rng() % 9;
        const Matrix a = random_matrix(rng, m, k);
        const Matrix b = random_matrix(rng, k, n);
        const Matrix c = matmul(a, b);
        const Matrix cd = matmul_d(a, b);
        const Matrix cbt = matmul_bt(a, transpose(b));
        const Matrix cat = matmul_at(transpose(a), b);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                const double ref = naive_entry(a, b, i, j);
                const double tol = 1e-5 * (1.0 + std::sqrt(static_cast<double>(k)));
                CHECK(std::abs(c(i, j) - ref) < tol);
                CHECK(std::abs(cd(i, j) - ref) < 1e-5);
                CHECK(std::abs(cbt(i, j) - ref) < tol);
                CHECK(std::abs(cat(i, j) - ref) < tol);
            }
        const Vector x(a.row(0).begin(), a.row(0).end());
        const Vector xb = vecmat(x, b);
        for (std::size_t j = 0; j < n; ++j) CHECK(std::abs(xb[j] - naive_entry(a, b, 0, j)) < 1e-5);
        const Vector bx = matvec(transpose(b), x);
        for (std::size_t j = 0; j < n; ++j) CHECK(std::abs(bx[j] - naive_entry(a, b, 0, j)) < 1e-5);
    }
    CHECK_THROWS_AS(matmul(Matrix(2, 3), Matrix(2, 3)), ShapeError);
}

TEST_CASE("sgemm accumulates with beta") {
    const Matrix a{{1, 2}, {3, 4}};
    const Matrix b{{5, 6}, {7, 8}};
    Matrix c{{1, 1}, {1, 1}};
    kernels::sgemm(false, 2, 2, 2, a.data(), 2, b.data(), 2, c.data(), 2, 1.0f);
    CHECK(c == Matrix{{20, 23}, {44, 51}});
    Matrix d(2, 2);
    kernels::sgemm(true, 2, 2, 2, a.data(), 2, b.data(), 2, d.data(), 2, 0.0f);
    CHECK(d == Matrix{{17, 23}, {39, 53}});
}

TEST_CASE("softmax is stable and normalized") {
    Vector row = {1000.0f, 1001.0f, 999.0f};
    softmax_inplace(row);
    double s = 0;
    for (float v : row) s += v;
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(row[1] > row[0]);
    const Matrix p = softmax_rows(Matrix{{0, 0}, {-1e4f, 0}});
    CHECK(p(0, 0) == doctest::Approx(0.5));
    CHECK(p(1, 1) == doctest::Approx(1.0));
}

TEST_CASE("layer norm and rms norm") {
    const Matrix x{{1, 2, 3, 4}};
    const Matrix ln = layer_norm_rows(x, {}, {}, 0.0f);
    double mean = 0, var = 0;
    for (float v : ln.row(0)) mean += v;
    for (float v : ln.row(0)) var += v * v;
    CHECK(mean == doctest::Approx(0.0).epsilon(1e-6));
    CHECK(var / 4 == doctest::Approx(1.0).epsilon(1e-5));
    const Vector g = {2, 2, 2, 2}, b = {1, 1, 1, 1};
    const Matrix lg = layer_norm_rows(x, g, b, 0.0f);
    CHECK(lg(0, 0) == doctest::Approx(2 * ln(0, 0) + 1));
    const Matrix rms = rms_norm_rows(x, g, 0.0f);
    const double r = std::sqrt((1 + 4 + 9 + 16) / 4.0);
    CHECK(rms(0, 3) == doctest::Approx(2 * 4 / r));
    CHECK_THROWS_AS(layer_norm_rows(x, Vector{1}, {}, 0.0f), ShapeError);
}

TEST_CASE("cosine and norms") {
    std::mt19937_64 rng(5);
    for (int i = 0; i < 50; ++i) {
        const Matrix m = random_matrix(rng, 2, 1 + rng() % 64);
        const double c = cosine(m.row(0), m.row(1));
        CHECK(std::abs(c - static_cast<double>(oracle::precise_cosine(m.row(0), m.row(1)))) < 1e-12);
    }
    CHECK_THROWS_AS(cosine(Vector{0, 0}, Vector{1, 0}), NumericError);
    CHECK_THROWS_AS(normalized(Vector{0, 0}), NumericError);
    CHECK(norm(Vector{3, 4}) == doctest::Approx(5.0));
    CHECK(frobenius_norm(Matrix{{3, 0}, {0, 4}}) == doctest::Approx(5.0));
    CHECK(max_abs_diff(Matrix{{1, 2}}, Matrix{{1, 2.5f}}) == doctest::Approx(0.5));
}

TEST_CASE("outer, add, subtract, scale") {
    const Vector u = {1, 2}, v = {3, 4, 5};
    const Matrix o = outer(u, v);
    CHECK(o == Matrix{{3, 4, 5}, {6, 8, 10}});
    CHECK(add(o, o) == scale(o, 2.0f));
    CHECK(subtract(o, o) == Matrix(2, 3));
    CHECK(Matrix::identity(2) == Matrix{{1, 0}, {0, 1}});
    CHECK(Matrix::column(u) == Matrix{{1}, {2}});
}
