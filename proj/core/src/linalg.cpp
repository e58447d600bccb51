#include "pertrace/linalg.hpp"

#include "pertrace/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/core.h>

namespace pertrace {

namespace {

constexpr int kMaxSweeps = 80;
constexpr double kJacobiTol = 1e-15;

// Column-major double workspace: col(j) is contiguous.
struct ColMatrix {
    std::size_t rows = 0, cols = 0;
    std::vector<double> data;
    double* col(std::size_t j) { return data.data() + j * rows; }
    const double* col(std::size_t j) const { return data.data() + j * rows; }
};

void require_finite(const Matrix& a, const char* op) {
    if (!a.all_finite()) throw NumericError(fmt::format("{}: input contains non-finite values", op));
}

// Orthonormal completion of the given column set in double precision.
void complete_columns(ColMatrix& q, std::size_t have, const std::vector<bool>& valid) {
    const std::size_t d = q.rows;
    std::size_t candidate = 0;
    for (std::size_t j = 0; j < have; ++j) {
        if (valid[j]) continue;
        while (candidate < d) {
            std::vector<double> v(d, 0.0);
            v[candidate++] = 1.0;
            for (int pass = 0; pass < 2; ++pass) {
                for (std::size_t i = 0; i < have; ++i) {
                    if (i == j || (!valid[i] && i > j)) continue;
                    const double* c = q.col(i);
                    double p = 0.0;
                    for (std::size_t r = 0; r < d; ++r) p += c[r] * v[r];
                    for (std::size_t r = 0; r < d; ++r) v[r] -= p * c[r];
                }
            }
            double n = 0.0;
            for (double x : v) n += x * x;
            n = std::sqrt(n);
            if (n > 1e-8) {
                double* c = q.col(j);
                for (std::size_t r = 0; r < d; ++r) c[r] = v[r] / n;
                break;
            }
        }
    }
}

// One-sided Jacobi for m >= n.
SvdResult jacobi_tall(const Matrix& a) {
    const std::size_t m = a.rows();
    const std::size_t n = a.cols();
    ColMatrix w{m, n, std::vector<double>(m * n)};
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) w.data[j * m + i] = a(i, j);
    ColMatrix v{n, n, std::vector<double>(n * n, 0.0)};
    for (std::size_t j = 0; j < n; ++j) v.data[j * n + j] = 1.0;

    for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double* cp = w.col(p);
                double* cq = w.col(q);
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (std::size_t r = 0; r < m; ++r) {
                    alpha += cp[r] * cp[r];
                    beta += cq[r] * cq[r];
                    gamma += cp[r] * cq[r];
                }
                if (gamma == 0.0 || std::abs(gamma) <= kJacobiTol * std::sqrt(alpha * beta)) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t r = 0; r < m; ++r) {
                    const double x = cp[r], y = cq[r];
                    cp[r] = c * x - s * y;
                    cq[r] = s * x + c * y;
                }
                double* vp = v.col(p);
                double* vq = v.col(q);
                for (std::size_t r = 0; r < n; ++r) {
                    const double x = vp[r], y = vq[r];
                    vp[r] = c * x - s * y;
                    vq[r] = s * x + c * y;
                }
            }
        }
        if (!rotated) break;
    }

    std::vector<double> sigma(n);
    for (std::size_t j = 0; j < n; ++j) {
        const double* c = w.col(j);
        double acc = 0.0;
        for (std::size_t r = 0; r < m; ++r) acc += c[r] * c[r];
        sigma[j] = std::sqrt(acc);
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

    const double smax = n == 0 ? 0.0 : sigma[order[0]];
    const double cutoff = std::max(smax * 1e-13, 1e-300);

    ColMatrix u{m, n, std::vector<double>(m * n, 0.0)};
    ColMatrix vs{n, n, std::vector<double>(n * n, 0.0)};
    std::vector<bool> valid(n, false);
    std::vector<double> s_sorted(n);
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t j = order[k];
        s_sorted[k] = sigma[j];
        std::copy_n(v.col(j), n, vs.col(k));
        if (sigma[j] > cutoff) {
            const double* c = w.col(j);
            double* uc = u.col(k);
            for (std::size_t r = 0; r < m; ++r) uc[r] = c[r] / sigma[j];
            valid[k] = true;
        } else {
            s_sorted[k] = 0.0;
        }
    }
    complete_columns(u, n, valid);

    SvdResult out{Matrix(m, n), Vector(n), Matrix(n, n)};
    for (std::size_t k = 0; k < n; ++k) {
        const double* vc = vs.col(k);
        double sign = 1.0;
        for (std::size_t r = 0; r < n; ++r) {
            if (std::abs(vc[r]) > 1e-12) {
                sign = vc[r] < 0.0 ? -1.0 : 1.0;
                break;
            }
        }
        out.s[k] = static_cast<float>(s_sorted[k]);
        for (std::size_t r = 0; r < n; ++r) out.v(r, k) = static_cast<float>(sign * vc[r]);
        const double* uc = u.col(k);
        for (std::size_t r = 0; r < m; ++r) out.u(r, k) = static_cast<float>(sign * uc[r]);
    }
    return out;
}

} // namespace

SvdResult svd(const Matrix& a) {
    require_finite(a, "svd");
    if (a.rows() >= a.cols()) return jacobi_tall(a);
    SvdResult t = jacobi_tall(transpose(a));
    // A^T = U S V^T  =>  A = V S U^T. Re-apply the sign rule to the new right vectors.
    SvdResult out{std::move(t.v), std::move(t.s), std::move(t.u)};
    for (std::size_t k = 0; k < out.s.size(); ++k) {
        float sign = 1.0f;
        for (std::size_t r = 0; r < out.v.rows(); ++r) {
            if (std::abs(out.v(r, k)) > 1e-12f) {
                sign = out.v(r, k) < 0.0f ? -1.0f : 1.0f;
                break;
            }
        }
        if (sign < 0.0f) {
            for (std::size_t r = 0; r < out.v.rows(); ++r) out.v(r, k) = -out.v(r, k);
            for (std::size_t r = 0; r < out.u.rows(); ++r) out.u(r, k) = -out.u(r, k);
        }
    }
    return out;
}

SymmetricEigen symmetric_eigen(std::vector<double> a, std::size_t n) {
    if (a.size() != n * n) throw ShapeError("symmetric_eigen: expected n*n entries");
    for (double x : a)
        if (!std::isfinite(x)) throw NumericError("symmetric_eigen: non-finite input");
    std::vector<double> v(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
    auto at = [&](std::size_t i, std::size_t j) -> double& { return a[i * n + j]; };

    for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
        double off = 0.0, total = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                total += at(i, j) * at(i, j);
                if (i != j) off += at(i, j) * at(i, j);
            }
        if (off <= 1e-30 * std::max(total, 1e-300)) break;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = at(p, q);
                if (apq == 0.0) continue;
                const double theta = (at(q, q) - at(p, p)) / (2.0 * apq);
                const double t = std::copysign(1.0, theta) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = at(k, p), akq = at(k, q);
                    at(k, p) = c * akp - s * akq;
                    at(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = at(p, k), aqk = at(q, k);
                    at(p, k) = c * apk - s * aqk;
                    at(q, k) = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v[k * n + p], vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return at(x, x) > at(y, y); });
    SymmetricEigen out;
    out.n = n;
    out.values.resize(n);
    out.vectors.assign(n * n, 0.0);
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t j = order[k];
        out.values[k] = at(j, j);
        double sign = 1.0;
        for (std::size_t r = 0; r < n; ++r) {
            if (std::abs(v[r * n + j]) > 1e-14) {
                sign = v[r * n + j] < 0.0 ? -1.0 : 1.0;
                break;
            }
        }
        for (std::size_t r = 0; r < n; ++r) out.vectors[r * n + k] = sign * v[r * n + j];
    }
    return out;
}

Matrix complete_orthonormal(const Matrix& q, std::size_t k) {
    const std::size_t d = q.rows();
    if (k > d) throw ShapeError("complete_orthonormal: more columns than dimensions");
    ColMatrix w{d, k, std::vector<double>(d * k, 0.0)};
    std::vector<bool> valid(k, false);
    for (std::size_t j = 0; j < std::min(k, q.cols()); ++j) {
        for (std::size_t r = 0; r < d; ++r) w.data[j * d + r] = q(r, j);
        valid[j] = true;
    }
    complete_columns(w, k, valid);
    Matrix out(d, k);
    for (std::size_t j = 0; j < k; ++j)
        for (std::size_t r = 0; r < d; ++r) out(r, j) = static_cast<float>(w.data[j * d + r]);
    return out;
}

PcaBasis pca_fit(const Matrix& samples, std::size_t n_components, bool allow_degenerate) {
    const std::size_t n = samples.rows();
    const std::size_t d = samples.cols();
    if (n_components == 0 || n_components > d)
        throw ConfigError(fmt::format("pca_fit: {} components requested for dimension {}", n_components, d));
    if (n == 0) throw DataError("pca_fit: no samples");
    if (!allow_degenerate && n < n_components + 1)
        throw DataError(fmt::format("pca_fit: {} samples cannot support {} components", n, n_components));
    require_finite(samples, "pca_fit");

    std::vector<double> mean(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) mean[j] += samples(i, j);
    for (auto& m : mean) m /= static_cast<double>(n);

    Matrix centered(n, d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) centered(i, j) = static_cast<float>(samples(i, j) - mean[j]);

    const SvdResult dec = svd(centered);
    const std::size_t r = dec.s.size();
    double total = 0.0;
    for (float s : dec.s) total += static_cast<double>(s) * s;

    PcaBasis out;
    out.mean.assign(mean.begin(), mean.end());
    out.spectrum.resize(r, 0.0f);
    const double denom = n > 1 ? static_cast<double>(n - 1) : 1.0;
    std::size_t supported = 0;
    const double smax = r == 0 ? 0.0 : dec.s[0];
    for (std::size_t i = 0; i < r; ++i) {
        if (total > 0.0) out.spectrum[i] = static_cast<float>(static_cast<double>(dec.s[i]) * dec.s[i] / total);
        if (smax > 0.0 && dec.s[i] > smax * 1e-6) ++supported;
    }
    out.rank_deficient = supported < n_components;

    Matrix comps = dec.v.slice_cols(0, std::min(n_components, dec.v.cols()));
    if (comps.cols() < n_components) comps = complete_orthonormal(comps, n_components);
    out.components = std::move(comps);
    out.explained_variance_ratio.resize(n_components, 0.0f);
    out.variances.resize(n_components, 0.0f);
    for (std::size_t i = 0; i < std::min(n_components, r); ++i) {
        out.explained_variance_ratio[i] = out.spectrum[i];
        out.variances[i] = static_cast<float>(static_cast<double>(dec.s[i]) * dec.s[i] / denom);
    }
    return out;
}

Vector pca_project(const PcaBasis& basis, std::span<const float> x) {
    if (x.size() != basis.mean.size()) throw ShapeError("pca_project: dimension mismatch");
    const std::size_t k = basis.components.cols();
    Vector out(k);
    for (std::size_t c = 0; c < k; ++c) {
        double acc = 0.0;
        for (std::size_t r = 0; r < x.size(); ++r)
            acc += (static_cast<double>(x[r]) - basis.mean[r]) * basis.components(r, c);
        out[c] = static_cast<float>(acc);
    }
    return out;
}

} // namespace pertrace
