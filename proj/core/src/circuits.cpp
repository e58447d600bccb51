#include "pertrace/circuits.hpp"

#include "pertrace/errors.hpp"
#include "pertrace/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <random>
#include <set>

#include <fmt/core.h>

namespace pertrace {

namespace {

using DVec = std::vector<double>;

void check_head(const ModelBundle& model, const ComponentId& head) {
    if (!head.is_head()) throw ConfigError(fmt::format("{} is not an attention head", head.label()));
    if (head.layer < 0 || head.layer >= model.arch.n_layers || head.head < 0 || head.head >= model.arch.n_heads)
        throw ConfigError(fmt::format("head {} outside the architecture", head.label()));
}

double ddot(const DVec& a, const DVec& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

DVec to_double(std::span<const float> v) { return DVec(v.begin(), v.end()); }

Vector to_float(const DVec& v) { return Vector(v.begin(), v.end()); }

void normalize_d(DVec& v) {
    const double n = std::sqrt(ddot(v, v));
    if (n > 0.0)
        for (double& x : v) x /= n;
}

} // namespace

// Decision subspace ----------------------------------------------------------

std::vector<DecisionSample> collect_decision_outputs(const ModelBundle& model, const std::vector<PromptPair>& pairs,
                                                     const ComponentId& head, int jobs) {
    check_head(model, head);
    std::vector<DecisionSample> out(2 * pairs.size());
    RecordOptions rec;
    rec.head_contrib = true;
    const auto l = static_cast<std::size_t>(head.layer);
    const auto h = static_cast<std::size_t>(head.head);
    parallel_for(out.size(), jobs, [&](std::size_t k) {
        const PromptPair& p = pairs[k / 2];
        const bool clean = k % 2 == 0;
        const RunTrace tr = run(model, clean ? p.clean_ids : p.persuasive_ids, {}, rec);
        DecisionSample s;
        s.example_id = p.id;
        s.condition = clean ? "clean" : "persuasive";
        s.chosen = decision_readout(tr, p.option_token_ids).argmax;
        auto row = tr.head_contrib[l][h].row(tr.length() - 1);
        s.output.assign(row.begin(), row.end());
        out[k] = std::move(s);
    });
    return out;
}

Matrix DecisionSubspace::projector() const { return matmul_d(basis, transpose(basis)); }

Vector DecisionSubspace::coordinates(std::span<const float> x) const {
    if (x.size() != mean.size()) throw ShapeError("subspace coordinates: dimension mismatch");
    Vector centered(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) centered[i] = x[i] - mean[i];
    return vecmat(centered, basis);
}

double DecisionSubspace::top3_ratio() const {
    double s = 0.0;
    for (std::size_t i = 0; i < std::min<std::size_t>(3, explained_variance_ratio.size()); ++i)
        s += explained_variance_ratio[i];
    return s;
}

DecisionSubspace fit_decision_subspace(const std::vector<DecisionSample>& samples, const ComponentId& head) {
    if (samples.empty()) throw DataError("decision subspace: no samples");
    const std::size_t d = samples.front().output.size();
    if (d < 3) throw ConfigError("decision subspace needs a model width of at least 3");
    Matrix x(samples.size(), d);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (samples[i].output.size() != d) throw ShapeError("decision samples differ in width");
        std::copy(samples[i].output.begin(), samples[i].output.end(), x.row(i).begin());
    }
    const PcaBasis pca = pca_fit(x, 3, true);
    DecisionSubspace s;
    s.head = head;
    s.mean = pca.mean;
    s.basis = pca.components;
    s.explained_variance_ratio = pca.spectrum;
    s.rank_deficient = pca.rank_deficient;

    std::array<DVec, 4> sums;
    for (auto& v : sums) v.assign(3, 0.0);
    for (const auto& smp : samples) {
        if (smp.chosen < 0 || smp.chosen > 3) throw DataError("decision sample with an invalid chosen option");
        const Vector c = s.coordinates(smp.output);
        const auto k = static_cast<std::size_t>(smp.chosen);
        for (std::size_t j = 0; j < 3; ++j) sums[k][j] += c[j];
        ++s.counts[k];
    }
    for (std::size_t k = 0; k < 4; ++k) {
        if (s.counts[k] == 0) {
            s.centroids_partial = true;
            continue;
        }
        s.centroids[k].resize(3);
        for (std::size_t j = 0; j < 3; ++j)
            s.centroids[k][j] = static_cast<float>(sums[k][j] / static_cast<double>(s.counts[k]));
    }
    return s;
}

namespace {

struct Nearest {
    int vertex = -1;
    double best = 0.0;
    double second = 0.0;
    bool tie = false;
};

Nearest nearest_centroid(const DecisionSubspace& s, const Vector& c, int prefer) {
    Nearest n;
    std::vector<std::pair<double, int>> dist;
    for (int k = 0; k < 4; ++k) {
        const auto& cen = s.centroids[static_cast<std::size_t>(k)];
        if (cen.empty()) continue;
        double d2 = 0.0;
        for (std::size_t j = 0; j < 3; ++j) d2 += (static_cast<double>(c[j]) - cen[j]) * (static_cast<double>(c[j]) - cen[j]);
        dist.emplace_back(std::sqrt(d2), k);
    }
    if (dist.empty()) throw DataError("decision subspace has no centroids");
    std::sort(dist.begin(), dist.end());
    n.vertex = dist[0].second;
    n.best = dist[0].first;
    n.second = dist.size() > 1 ? dist[1].first : std::numeric_limits<double>::infinity();
    constexpr double kTieTol = 1e-9;
    for (const auto& [dd, k] : dist)
        if (k != n.vertex && dd - n.best <= kTieTol * std::max(1.0, n.best)) {
            n.tie = true;
            if (k == prefer) n.vertex = prefer;
        }
    return n;
}

} // namespace

JumpResult classify_jump(const DecisionSubspace& s, std::span<const float> clean_output,
                         std::span<const float> pers_output) {
    const Nearest c = nearest_centroid(s, s.coordinates(clean_output), -1);
    const Nearest p = nearest_centroid(s, s.coordinates(pers_output), c.vertex);
    JumpResult r;
    r.clean_vertex = c.vertex;
    r.pers_vertex = p.vertex;
    r.jumped = c.vertex != p.vertex;
    r.margin = std::isfinite(p.second) ? p.second - p.best : 0.0;
    r.clean_margin = std::isfinite(c.second) ? c.second - c.best : 0.0;
    r.tie = c.tie || p.tie;
    return r;
}

// OV analysis ----------------------------------------------------------------

std::vector<std::size_t> top_mass_positions(std::span<const float> row, const TokenSpan& span, double mass) {
    if (span.empty()) return {};
    if (span.end > row.size()) throw ShapeError("option span outside the attention row");
    std::vector<std::size_t> pos(span.size());
    std::iota(pos.begin(), pos.end(), span.begin);
    std::stable_sort(pos.begin(), pos.end(), [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
    double total = 0.0;
    for (std::size_t p : pos) total += row[p];
    std::vector<std::size_t> out;
    double acc = 0.0;
    for (std::size_t p : pos) {
        out.push_back(p);
        acc += row[p];
        if (acc >= mass * total) break;
    }
    return out;
}

OVAnalysis ov_analysis(const ModelBundle& model, const DecisionSubspace& subspace, const std::vector<PromptPair>& pairs,
                       const std::vector<DecisionSample>& samples, double mass, int jobs) {
    check_head(model, subspace.head);
    if (!(mass > 0.0 && mass <= 1.0)) throw ConfigError("attention mass share must be in (0, 1]");
    const std::size_t d = static_cast<std::size_t>(model.arch.d_model);
    if (subspace.basis.rows() != d || subspace.basis.cols() != 3) throw ShapeError("subspace basis must be d x 3");
    const int layer = subspace.head.layer;
    const auto l = static_cast<std::size_t>(layer);
    const auto h = static_cast<std::size_t>(subspace.head.head);

    OVAnalysis out;
    out.head = subspace.head;
    const Matrix w_ov = circuit_matrices(model, layer, subspace.head.head).w_ov;
    const Matrix m = transpose(matmul_d(w_ov, subspace.basis));  // 3 x d
    const SvdResult sv = svd(m);
    out.v_opt = sv.v;
    out.singular_values = sv.s;
    out.c_dec = matmul_d(subspace.basis, m);

    RecordOptions rec;
    rec.attn_inputs = true;
    rec.attention = true;
    std::vector<std::vector<OptionProjection>> per(2 * pairs.size());
    std::vector<std::array<DVec, 4>> ov_sums(2 * pairs.size());
    std::vector<std::array<std::size_t, 4>> ov_counts(2 * pairs.size());
    parallel_for(per.size(), jobs, [&](std::size_t k) {
        const PromptPair& p = pairs[k / 2];
        const bool clean = k % 2 == 0;
        const RunTrace tr = run(model, clean ? p.clean_ids : p.persuasive_ids, {}, rec);
        if (tr.attention.empty() || tr.attention[l][h].empty()) throw DataError("attention trace absent");
        const auto row = tr.attention[l][h].row(tr.length() - 1);
        for (auto& v : ov_sums[k]) v.assign(d, 0.0);
        ov_counts[k].fill(0);
        for (int o = 0; o < 4; ++o) {
            const auto& span = p.spans.options[static_cast<std::size_t>(o)];
            for (std::size_t pos : top_mass_positions(row, span, mass)) {
                const auto x = tr.attn_input[l].row(pos);
                OptionProjection pr;
                pr.example_id = p.id;
                pr.condition = clean ? "clean" : "persuasive";
                pr.option = o;
                pr.position = pos;
                pr.attention = row[pos];
                pr.coords = vecmat(x, out.v_opt);
                per[k].push_back(std::move(pr));
                const Vector mapped = vecmat(x, w_ov);
                auto& acc = ov_sums[k][static_cast<std::size_t>(o)];
                for (std::size_t c = 0; c < d; ++c) acc[c] += mapped[c];
                ++ov_counts[k][static_cast<std::size_t>(o)];
            }
        }
    });

    std::array<DVec, 4> ov_mean, dec_mean;
    std::array<std::size_t, 4> ov_n{}, dec_n{};
    for (std::size_t o = 0; o < 4; ++o) {
        ov_mean[o].assign(d, 0.0);
        dec_mean[o].assign(d, 0.0);
    }
    for (std::size_t k = 0; k < per.size(); ++k) {
        for (auto& pr : per[k]) out.projections.push_back(std::move(pr));
        for (std::size_t o = 0; o < 4; ++o) {
            for (std::size_t c = 0; c < d; ++c) ov_mean[o][c] += ov_sums[k][o][c];
            ov_n[o] += ov_counts[k][o];
        }
    }
    for (const auto& s : samples) {
        const auto o = static_cast<std::size_t>(s.chosen);
        if (s.output.size() != d) throw ShapeError("decision sample width differs from the model");
        for (std::size_t c = 0; c < d; ++c) dec_mean[o][c] += s.output[c];
        ++dec_n[o];
    }
    auto finish = [&](std::array<DVec, 4>& means, const std::array<std::size_t, 4>& n, std::array<bool, 4>& present) {
        DVec grand(d, 0.0);
        std::size_t k = 0;
        for (std::size_t o = 0; o < 4; ++o) {
            present[o] = n[o] > 0;
            if (!present[o]) continue;
            for (double& v : means[o]) v /= static_cast<double>(n[o]);
            for (std::size_t c = 0; c < d; ++c) grand[c] += means[o][c];
            ++k;
        }
        if (k == 0) return;
        for (std::size_t o = 0; o < 4; ++o)
            if (present[o])
                for (std::size_t c = 0; c < d; ++c) means[o][c] -= grand[c] / static_cast<double>(k);
    };
    finish(ov_mean, ov_n, out.ov_present);
    finish(dec_mean, dec_n, out.decision_present);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) {
            out.alignment[i][j] = 0.0;
            if (!out.ov_present[i] || !out.decision_present[j]) continue;
            const double na = std::sqrt(ddot(ov_mean[i], ov_mean[i]));
            const double nb = std::sqrt(ddot(dec_mean[j], dec_mean[j]));
            if (na == 0.0 || nb == 0.0) continue;
            out.alignment[i][j] = std::clamp(ddot(ov_mean[i], dec_mean[j]) / (na * nb), -1.0, 1.0);
        }
    return out;
}

// Rank-1 QK factorization ----------------------------------------------------

QKDataset build_qk_dataset(const ModelBundle& model, const std::vector<PromptPair>& pairs, const ComponentId& head,
                           int jobs) {
    check_head(model, head);
    const auto l = static_cast<std::size_t>(head.layer);
    const std::size_t d = static_cast<std::size_t>(model.arch.d_model);
    const std::size_t dk = static_cast<std::size_t>(model.arch.d_head);
    const bool rotary = model.arch.positional() == PositionalScheme::rotary;

    Matrix wk, fold;  // fold = (W_K^T W_K)^-1 W_K^T, dk x d
    if (rotary) {
        wk = model.w_k(head.layer, head.head);
        std::vector<double> gram(dk * dk, 0.0);
        for (std::size_t a = 0; a < dk; ++a)
            for (std::size_t b = 0; b < dk; ++b) {
                double s = 0.0;
                for (std::size_t r = 0; r < d; ++r) s += static_cast<double>(wk(r, a)) * wk(r, b);
                gram[a * dk + b] = s;
            }
        const SymmetricEigen eg = symmetric_eigen(gram, dk);
        if (eg.values.back() <= 1e-10 * std::max(1.0, eg.values.front()))
            throw NumericError(fmt::format("{}: W_K is rank deficient, rotary keys cannot be folded", head.label()));
        fold = Matrix(dk, d);
        for (std::size_t a = 0; a < dk; ++a)
            for (std::size_t r = 0; r < d; ++r) {
                double s = 0.0;
                for (std::size_t b = 0; b < dk; ++b) {
                    double inv = 0.0;
                    for (std::size_t e = 0; e < dk; ++e)
                        inv += eg.vector_entry(a, e) * eg.vector_entry(b, e) / eg.values[e];
                    s += inv * wk(r, b);
                }
                fold(a, r) = static_cast<float>(s);
            }
    }

    QKDataset ds;
    ds.head = head;
    ds.d = d;
    ds.rotary_folded = rotary;
    ds.examples.resize(2 * pairs.size());
    RecordOptions rec;
    rec.attn_inputs = true;
    parallel_for(ds.examples.size(), jobs, [&](std::size_t k) {
        const PromptPair& p = pairs[k / 2];
        const bool clean = k % 2 == 0;
        const RunTrace tr = run(model, clean ? p.clean_ids : p.persuasive_ids, {}, rec);
        const Matrix& x = tr.attn_input[l];
        const std::size_t T = tr.length();
        QKExample ex;
        ex.example_id = p.id;
        ex.condition = clean ? "clean" : "persuasive";
        ex.r_q.assign(x.row(T - 1).begin(), x.row(T - 1).end());
        ex.r_k = x;
        ex.options = p.spans.options;
        if (rotary) {
            for (std::size_t j = 0; j < T; ++j) {
                Vector kv = vecmat(x.row(j), wk);
                Vector rot = kv;
                rotate_head_vector(rot, static_cast<double>(j) - static_cast<double>(T - 1), model.arch.rope_theta);
                for (std::size_t a = 0; a < dk; ++a) rot[a] -= kv[a];
                const Vector dx = vecmat(rot, fold);
                auto row = ex.r_k.row(j);
                for (std::size_t c = 0; c < d; ++c) row[c] += dx[c];
            }
        }
        ds.examples[k] = std::move(ex);
    });
    return ds;
}

namespace {

struct PreparedExample {
    DVec r;   // query representation
    DVec rk;  // T x d
    DVec y;   // target logits
    std::size_t t = 0;
    double w = 0.0;
    double yy = 0.0;
};

struct Problem {
    std::size_t d = 0;
    DVec wqk;  // d x d row-major
    std::vector<PreparedExample> ex;
};

Problem prepare(const QKDataset& data, const Matrix& w_qk, double eps, const std::vector<std::size_t>& idx) {
    Problem pb;
    pb.d = data.d;
    const std::size_t d = data.d;
    if (w_qk.rows() != d || w_qk.cols() != d) throw ShapeError("W_QK does not match the dataset width");
    pb.wqk.assign(w_qk.values().begin(), w_qk.values().end());
    for (std::size_t n : idx) {
        const QKExample& e = data.examples[n];
        if (e.r_q.size() != d || e.r_k.cols() != d || e.r_k.rows() == 0)
            throw ShapeError(fmt::format("QK example {} has inconsistent dimensions", e.example_id));
        PreparedExample p;
        p.r = to_double(e.r_q);
        p.rk.assign(e.r_k.values().begin(), e.r_k.values().end());
        p.t = e.r_k.rows();
        DVec v(d, 0.0);  // W_QK^T r_q
        for (std::size_t a = 0; a < d; ++a)
            for (std::size_t b = 0; b < d; ++b) v[b] += pb.wqk[a * d + b] * p.r[a];
        p.y.assign(p.t, 0.0);
        for (std::size_t j = 0; j < p.t; ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < d; ++c) s += p.rk[j * d + c] * v[c];
            p.y[j] = s;
        }
        p.yy = ddot(p.y, p.y);
        p.w = 1.0 / (p.yy + eps);
        pb.ex.push_back(std::move(p));
    }
    return pb;
}

DVec wqk_times(const Problem& pb, const DVec& u) {
    DVec z(pb.d, 0.0);
    for (std::size_t a = 0; a < pb.d; ++a) {
        double s = 0.0;
        for (std::size_t b = 0; b < pb.d; ++b) s += pb.wqk[a * pb.d + b] * u[b];
        z[a] = s;
    }
    return z;
}

DVec wqk_t_times(const Problem& pb, const DVec& u) {
    DVec t(pb.d, 0.0);
    for (std::size_t a = 0; a < pb.d; ++a)
        for (std::size_t b = 0; b < pb.d; ++b) t[b] += pb.wqk[a * pb.d + b] * u[a];
    return t;
}

// R_K u for one example.
DVec keys_times(const PreparedExample& e, const DVec& u, std::size_t d) {
    DVec a(e.t, 0.0);
    for (std::size_t j = 0; j < e.t; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < d; ++c) s += e.rk[j * d + c] * u[c];
        a[j] = s;
    }
    return a;
}

double objective(const Problem& pb, const DVec& uq, const DVec& uk) {
    if (pb.ex.empty()) return 0.0;
    const double c = ddot(uq, wqk_times(pb, uk));
    double f = 0.0;
    for (const auto& e : pb.ex) {
        const DVec a = keys_times(e, uk, pb.d);
        const double m = c * ddot(uq, e.r);
        double res = 0.0;
        for (std::size_t j = 0; j < e.t; ++j) {
            const double r = e.y[j] - m * a[j];
            res += r * r;
        }
        f += e.w * res;
    }
    return f / static_cast<double>(pb.ex.size());
}

// Both blocks are a convex quadratic over a sphere. With u_q fixed,
// w = u_k (u_k . t) lies on the sphere with diameter t = W_QK^T u_q and the
// fitted logits are beta_n R_K w. With u_k fixed, v = u_q (u_q . z) lies on the
// sphere with diameter z = W_QK u_k and the fitted logits are (r_n . v) a_n.
struct SphereQuadratic {
    std::function<DVec(const DVec&)> apply;  // x -> A x
    DVec b;                                   // f(x) = C - 2 b.x + x.A x
    DVec center;                              // radius is |center|
};

SphereQuadratic key_block(const Problem& pb, const DVec& uq) {
    const std::size_t d = pb.d;
    const double inv_n = 1.0 / static_cast<double>(pb.ex.size());
    auto beta = std::make_shared<DVec>();
    SphereQuadratic q;
    q.b.assign(d, 0.0);
    for (const auto& e : pb.ex) {
        const double bn = ddot(uq, e.r);
        beta->push_back(bn);
        const double s = inv_n * e.w * bn;
        if (s == 0.0) continue;
        for (std::size_t j = 0; j < e.t; ++j)
            for (std::size_t c = 0; c < d; ++c) q.b[c] += s * e.y[j] * e.rk[j * d + c];
    }
    q.center = wqk_t_times(pb, uq);
    for (double& v : q.center) v *= 0.5;
    q.apply = [&pb, beta, inv_n, d](const DVec& x) {
        DVec out(d, 0.0);
        for (std::size_t n = 0; n < pb.ex.size(); ++n) {
            const auto& e = pb.ex[n];
            const double s = inv_n * e.w * (*beta)[n] * (*beta)[n];
            if (s == 0.0) continue;
            const DVec a = keys_times(e, x, d);
            for (std::size_t j = 0; j < e.t; ++j)
                for (std::size_t c = 0; c < d; ++c) out[c] += s * a[j] * e.rk[j * d + c];
        }
        return out;
    };
    return q;
}

SphereQuadratic query_block(const Problem& pb, const DVec& uk) {
    const std::size_t d = pb.d;
    const double inv_n = 1.0 / static_cast<double>(pb.ex.size());
    auto weight = std::make_shared<DVec>();
    SphereQuadratic q;
    q.b.assign(d, 0.0);
    for (const auto& e : pb.ex) {
        const DVec a = keys_times(e, uk, d);
        weight->push_back(inv_n * e.w * ddot(a, a));
        const double s = inv_n * e.w * ddot(a, e.y);
        for (std::size_t c = 0; c < d; ++c) q.b[c] += s * e.r[c];
    }
    q.center = wqk_times(pb, uk);
    for (double& v : q.center) v *= 0.5;
    q.apply = [&pb, weight, d](const DVec& x) {
        DVec out(d, 0.0);
        for (std::size_t n = 0; n < pb.ex.size(); ++n) {
            const auto& e = pb.ex[n];
            const double s = (*weight)[n] * ddot(e.r, x);
            for (std::size_t c = 0; c < d; ++c) out[c] += s * e.r[c];
        }
        return out;
    };
    return q;
}

// argmin z^T A z - 2 g^T z subject to |z| = rho, A symmetric k x k.
DVec sphere_minimizer(const std::vector<double>& a, std::size_t k, const DVec& g, double rho) {
    const SymmetricEigen eg = symmetric_eigen(a, k);
    const double lmin = eg.values[k - 1];
    DVec gamma(k, 0.0);
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t r = 0; r < k; ++r) gamma[i] += eg.vector_entry(r, i) * g[r];
    const double gnorm = std::sqrt(ddot(gamma, gamma));
    auto coords = [&](double mu) {
        DVec c(k, 0.0);
        for (std::size_t i = 0; i < k; ++i) {
            const double gap = eg.values[i] - mu;
            if (gap > 0.0) c[i] = gamma[i] / gap;
        }
        return c;
    };
    // The multiplier lies in [lmin - |g| / rho, lmin); the norm grows with it.
    double lo = lmin - gnorm / rho, hi = lmin;
    for (int it = 0; it < 200 && hi - lo > 1e-15 * std::max(1.0, std::abs(lmin)); ++it) {
        const double mid = 0.5 * (lo + hi);
        const DVec c = coords(mid);
        if (ddot(c, c) > rho * rho) hi = mid;
        else lo = mid;
    }
    DVec c = coords(lo);
    const double n2 = ddot(c, c);
    if (n2 < rho * rho) {
        // Fill the remaining norm along the lowest eigenvector (hard case).
        const std::size_t m = k - 1;
        const double tau = std::sqrt(rho * rho - n2);
        double lin = eg.values[m] * c[m] - gamma[m];
        c[m] += lin > 0.0 ? -tau : tau;
    }
    const double cn = std::sqrt(ddot(c, c));
    if (cn > 0.0)
        for (double& v : c) v *= rho / cn;
    DVec z(k, 0.0);
    for (std::size_t r = 0; r < k; ++r)
        for (std::size_t i = 0; i < k; ++i) z[r] += eg.vector_entry(r, i) * c[i];
    return z;
}

// Exact minimizer of the block quadratic over the sphere, restricted to the
// span of the centre, the current and previous points, the gradient and b.
DVec subspace_step(const SphereQuadratic& q, const DVec& x, const DVec& x_prev) {
    const std::size_t d = x.size();
    const DVec ax = q.apply(x);
    DVec grad(d);
    for (std::size_t i = 0; i < d; ++i) grad[i] = ax[i] - q.b[i];
    std::vector<DVec> basis;
    for (const DVec* v : std::initializer_list<const DVec*>{&q.center, &x, &grad, &x_prev, &q.b}) {
        const double nv = std::sqrt(ddot(*v, *v));
        if (nv == 0.0) continue;
        DVec u = *v;
        for (int pass = 0; pass < 2; ++pass)
            for (const auto& bv : basis) {
                const double p = ddot(u, bv);
                for (std::size_t i = 0; i < d; ++i) u[i] -= p * bv[i];
            }
        const double nu = std::sqrt(ddot(u, u));
        if (nu <= 1e-10 * nv) continue;
        for (double& val : u) val /= nu;
        basis.push_back(std::move(u));
    }
    const std::size_t k = basis.size();
    if (k == 0) return x;
    std::vector<DVec> abasis;
    for (const auto& bv : basis) abasis.push_back(q.apply(bv));
    std::vector<double> ar(k * k);
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = i; j < k; ++j) {
            const double v = 0.5 * (ddot(basis[i], abasis[j]) + ddot(basis[j], abasis[i]));
            ar[i * k + j] = v;
            ar[j * k + i] = v;
        }
    DVec cr(k), g(k);
    for (std::size_t i = 0; i < k; ++i) cr[i] = ddot(basis[i], q.center);
    for (std::size_t i = 0; i < k; ++i) {
        double acr = 0.0;
        for (std::size_t j = 0; j < k; ++j) acr += ar[i * k + j] * cr[j];
        g[i] = ddot(basis[i], q.b) - acr;
    }
    const double rho = std::sqrt(ddot(q.center, q.center));
    const DVec z = sphere_minimizer(ar, k, g, rho);
    DVec out(d, 0.0);
    for (std::size_t i = 0; i < k; ++i) {
        const double coef = cr[i] + z[i];
        for (std::size_t r = 0; r < d; ++r) out[r] += coef * basis[i][r];
    }
    return out;
}

// Point on the block sphere represented by unit vector u.
DVec lift(const DVec& u, const DVec& center) {
    const double s = 2.0 * ddot(u, center);
    DVec w = u;
    for (double& v : w) v *= s;
    return w;
}

struct FitState {
    DVec uq, uk;
    double f = 0.0;
    int iterations = 0;
    bool converged = false;
};

FitState optimize(const Problem& pb, DVec uq, DVec uk, const Rank1Options& opt) {
    FitState st;
    double f = objective(pb, uq, uk);
    DVec uq_prev = uq, uk_prev = uk;
    auto block = [&](bool key) {
        const SphereQuadratic q = key ? key_block(pb, uq) : query_block(pb, uk);
        DVec& u = key ? uk : uq;
        DVec& u_prev = key ? uk_prev : uq_prev;
        const DVec w = subspace_step(q, lift(u, q.center), lift(u_prev, q.center));
        const double nw = std::sqrt(ddot(w, w));
        if (!(nw > 0.0) || !std::isfinite(nw)) return;
        DVec cand = w;
        for (double& v : cand) v /= nw;
        const double fc = key ? objective(pb, uq, cand) : objective(pb, cand, uk);
        if (fc <= f) {
            u_prev = u;
            u = std::move(cand);
            f = fc;
        }
    };
    for (int it = 1; it <= opt.max_iter; ++it) {
        const double prev = f;
        block(true);
        block(false);
        st.iterations = it;
        // Weights normalize each example, so f near 1e-24 is an exact fit.
        if (f <= 1e-24 || prev - f <= opt.tolerance * prev) {
            st.converged = true;
            break;
        }
    }
    st.uq = std::move(uq);
    st.uk = std::move(uk);
    st.f = f;
    return st;
}

// Top singular pair of W_QK by power iteration on W^T W.
std::pair<DVec, DVec> top_singular_pair(const Problem& pb) {
    const std::size_t d = pb.d;
    DVec v(d);
    for (std::size_t i = 0; i < d; ++i) v[i] = 1.0 + 0.01 * static_cast<double>(i % 7);
    normalize_d(v);
    DVec u(d, 0.0);
    for (int it = 0; it < 500; ++it) {
        u = wqk_times(pb, v);
        normalize_d(u);
        DVec nv = wqk_t_times(pb, u);
        normalize_d(nv);
        double diff = 0.0;
        for (std::size_t i = 0; i < d; ++i) diff = std::max(diff, std::abs(nv[i] - v[i]));
        v = std::move(nv);
        if (diff < 1e-12) break;
    }
    if (ddot(u, u) == 0.0) u[0] = 1.0;
    if (ddot(v, v) == 0.0) v[0] = 1.0;
    return {u, v};
}

DVec random_unit(std::mt19937_64& rng, std::size_t d) {
    std::normal_distribution<double> nd;
    DVec v(d);
    for (double& x : v) x = nd(rng);
    normalize_d(v);
    return v;
}

RoutingFeature fit_problem(const Problem& pb, const QKDataset& data, const std::vector<std::size_t>& idx,
                           const Rank1Options& opt) {
    if (pb.ex.empty()) throw DataError("rank-1 fit: no examples");
    const std::size_t d = pb.d;
    std::vector<std::pair<DVec, DVec>> starts;
    starts.push_back(top_singular_pair(pb));
    std::mt19937_64 rng(opt.seed);
    for (int r = 0; r < opt.restarts; ++r) {
        DVec a = random_unit(rng, d);
        DVec b = random_unit(rng, d);
        starts.emplace_back(std::move(a), std::move(b));
    }
    FitState best;
    bool have = false;
    bool any_converged = false;
    for (const auto& [q0, k0] : starts) {
        FitState st = optimize(pb, q0, k0, opt);
        any_converged = any_converged || st.converged;
        if (!have || st.f < best.f) {
            best = std::move(st);
            have = true;
        }
    }
    // Query-side factor positive on average, then coupling positive.
    double mean_q = 0.0;
    for (std::size_t n : idx) mean_q += dot(data.examples[n].r_q, to_float(best.uq));
    if (mean_q < 0.0)
        for (double& v : best.uq) v = -v;
    const double c = ddot(best.uq, wqk_times(pb, best.uk));
    if (c < 0.0)
        for (double& v : best.uk) v = -v;

    RoutingFeature rf;
    rf.u_q = to_float(best.uq);
    rf.u_k = to_float(best.uk);
    rf.coupling = std::abs(c);
    rf.train_objective = best.f;
    rf.epsilon = opt.epsilon;
    rf.iterations = best.iterations;
    rf.converged = best.converged || (any_converged && best.f <= 1e-12);
    return rf;
}

std::vector<std::size_t> all_indices(std::size_t n) {
    std::vector<std::size_t> v(n);
    std::iota(v.begin(), v.end(), std::size_t{0});
    return v;
}

} // namespace

double rank1_objective(const QKDataset& data, const Matrix& w_qk, std::span<const float> u_q,
                       std::span<const float> u_k, double epsilon) {
    const Problem pb = prepare(data, w_qk, epsilon, all_indices(data.examples.size()));
    return objective(pb, to_double(u_q), to_double(u_k));
}

RoutingFeature fit_rank1_qk_once(const QKDataset& data, const Matrix& w_qk, const Rank1Options& options) {
    const auto idx = all_indices(data.examples.size());
    const Problem pb = prepare(data, w_qk, options.epsilon, idx);
    RoutingFeature rf = fit_problem(pb, data, idx, options);
    rf.folds = 0;
    return rf;
}

RoutingFeature fit_rank1_qk(const QKDataset& data, const Matrix& w_qk, const Rank1Options& options) {
    if (options.folds < 2) throw ConfigError("cross-validation needs at least 2 folds");
    // Folds group the prompts of one example together.
    std::vector<std::string> ids;
    std::map<std::string, std::size_t> group;
    for (const auto& e : data.examples)
        if (group.emplace(e.example_id, ids.size()).second) ids.push_back(e.example_id);
    const auto k = static_cast<std::size_t>(options.folds);
    if (ids.size() < k)
        throw ConfigError(fmt::format("{} folds requested but only {} examples", options.folds, ids.size()));
    std::vector<std::size_t> order = all_indices(ids.size());
    std::mt19937_64 rng(options.seed ^ 0x5bd1e995ull);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    std::vector<std::size_t> fold_of(ids.size());
    for (std::size_t i = 0; i < order.size(); ++i) fold_of[order[i]] = i % k;

    std::vector<double> fold_obj(k);
    bool converged = true;
    for (std::size_t f = 0; f < k; ++f) {
        std::vector<std::size_t> train, test;
        for (std::size_t n = 0; n < data.examples.size(); ++n)
            (fold_of[group.at(data.examples[n].example_id)] == f ? test : train).push_back(n);
        const Problem ptrain = prepare(data, w_qk, options.epsilon, train);
        const RoutingFeature rf = fit_problem(ptrain, data, train, options);
        converged = converged && rf.converged;
        const Problem ptest = prepare(data, w_qk, options.epsilon, test);
        fold_obj[f] = objective(ptest, to_double(rf.u_q), to_double(rf.u_k));
    }
    RoutingFeature out = fit_rank1_qk_once(data, w_qk, options);
    out.folds = options.folds;
    out.fold_objectives = fold_obj;
    out.cv_mean = std::accumulate(fold_obj.begin(), fold_obj.end(), 0.0) / static_cast<double>(k);
    double var = 0.0;
    for (double v : fold_obj) var += (v - out.cv_mean) * (v - out.cv_mean);
    out.cv_std = std::sqrt(var / static_cast<double>(k - 1));
    out.converged = out.converged && converged;
    return out;
}

FactoredLogit factored_logit(const RoutingFeature& f, const Matrix& w_qk, std::span<const float> r_key,
                             std::span<const float> r_query) {
    const std::size_t d = f.u_k.size();
    if (f.u_q.size() != d || r_key.size() != d || r_query.size() != d || w_qk.rows() != d || w_qk.cols() != d)
        throw ShapeError("factored logit: dimension mismatch");
    FactoredLogit out;
    out.key_side = dot(f.u_k, r_key);
    out.coupling = dot(f.u_q, matvec(w_qk, f.u_k));
    out.query_side = dot(f.u_q, r_query);
    out.product = out.key_side * out.coupling * out.query_side;
    return out;
}

// Composition ----------------------------------------------------------------

double composition_score(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows())
        throw ShapeError(fmt::format("composition score: inner dimensions {} and {} differ", a.cols(), b.rows()));
    const double na = frobenius_norm(a), nb = frobenius_norm(b);
    if (na == 0.0 || nb == 0.0) throw NumericError("composition score of a zero matrix");
    const double v = frobenius_norm(matmul_d(a, b)) / (na * nb);
    return std::clamp(v, 0.0, 1.0);
}

double composition_score_spectral(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows())
        throw ShapeError(fmt::format("composition score: inner dimensions {} and {} differ", a.cols(), b.rows()));
    const SvdResult sa = svd(a);
    const SvdResult sb = svd(b);
    double num = 0.0, ea = 0.0, eb = 0.0;
    for (double s : sa.s) ea += s * s;
    for (double l : sb.s) eb += l * l;
    if (ea == 0.0 || eb == 0.0) throw NumericError("composition score of a zero matrix");
    const std::size_t inner = a.cols();
    for (std::size_t i = 0; i < sa.s.size(); ++i) {
        const double si = static_cast<double>(sa.s[i]) * sa.s[i];
        if (si == 0.0) continue;
        for (std::size_t j = 0; j < sb.s.size(); ++j) {
            const double lj = static_cast<double>(sb.s[j]) * sb.s[j];
            double c = 0.0;
            for (std::size_t r = 0; r < inner; ++r) c += static_cast<double>(sa.v(r, i)) * sb.u(r, j);
            num += si * lj * c * c;
        }
    }
    return std::clamp(std::sqrt(num / (ea * eb)), 0.0, 1.0);
}

Matrix routing_component(const RoutingFeature& f, const Matrix& w_qk) {
    const double c = dot(f.u_q, matvec(w_qk, f.u_k));
    Matrix out = outer(f.u_k, f.u_q);
    for (auto& v : out.storage()) v = static_cast<float>(v * c);
    return out;
}

std::vector<CompositionEntry> CompositionScan::ranked() const {
    std::vector<CompositionEntry> out;
    for (const auto& e : entries)
        if (e.score) out.push_back(e);
    std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return *a.score > *b.score; });
    return out;
}

CompositionScan composition_scan(const ModelBundle& model, const RoutingFeature& feature,
                                 const ComponentId& decision_head, int jobs) {
    check_head(model, decision_head);
    const std::size_t d = static_cast<std::size_t>(model.arch.d_model);
    if (feature.u_k.size() != d || feature.u_q.size() != d)
        throw ShapeError("routing feature width differs from the model");
    const Matrix w_qk = circuit_matrices(model, decision_head.layer, decision_head.head).w_qk;
    const double coupling = dot(feature.u_q, matvec(w_qk, feature.u_k));
    if (coupling == 0.0) throw NumericError("routing component is zero (coupling vanishes)");
    // B = c u_k u_q^T is rank one, so ||AB||_F / (||A||_F ||B||_F) = ||A u_k|| / (||A||_F ||u_k||).
    const double uk_norm = norm(feature.u_k);
    CompositionScan scan;
    scan.decision_head = decision_head;
    for (int l = 0; l < decision_head.layer; ++l)
        for (int h = 0; h < model.arch.n_heads; ++h) scan.entries.push_back({ComponentId::attention(l, h), std::nullopt});
    parallel_for(scan.entries.size(), jobs, [&](std::size_t i) {
        auto& e = scan.entries[i];
        const Matrix a = circuit_matrices(model, e.head.layer, e.head.head).w_ov;
        if (frobenius_norm(a) == 0.0) return;
        e.score = std::clamp(norm(matvec(a, feature.u_k)) / (frobenius_norm(a) * uk_norm), 0.0, 1.0);
    });
    return scan;
}

} // namespace pertrace
