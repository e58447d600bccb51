#include "pertrace/engine.hpp"
#include "pertrace/errors.hpp"

#include "oracles/naive_forward.hpp"
#include "support/test_models.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace pertrace;

namespace {

double rows_diff(const Matrix& m, const oracle::Rows& r) {
    double e = 0;
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) e = std::max(e, std::abs(m(i, j) - r[i][j]) / (1.0 + std::abs(r[i][j])));
    return e;
}

double logits_diff(const Vector& a, const std::vector<double>& b) {
    double e = 0;
    for (std::size_t i = 0; i < a.size(); ++i) e = std::max(e, std::abs(a[i] - b[i]) / (1.0 + std::abs(b[i])));
    return e;
}

Matrix random_rows(std::mt19937_64& rng, std::size_t r, std::size_t c) {
    std::normal_distribution<float> nd;
    Matrix m(r, c);
    for (float& v : m.storage()) v = nd(rng);
    return m;
}

oracle::Rows to_rows(const Matrix& m) {
    oracle::Rows r(m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i) r[i].assign(m.row(i).begin(), m.row(i).end());
    return r;
}

std::vector<std::size_t> some_positions(std::mt19937_64& rng, std::size_t t) {
    std::vector<std::size_t> p;
    for (std::size_t i = 0; i < t; ++i)
        if (rng() % 2) p.push_back(i);
    if (p.empty()) p.push_back(t - 1);
    return p;
}

} // namespace

TEST_CASE("component labels") {
    CHECK(ComponentId::attention(3, 5).label() == "L3H5");
    CHECK(ComponentId::mlp(2).label() == "L2MLP");
    CHECK(ComponentId::parse("L1H0") == ComponentId::attention(1, 0));
    CHECK(ComponentId::parse("L4MLP") == ComponentId::mlp(4));
    CHECK_THROWS(ComponentId::parse("H1L0"));
}

TEST_CASE("forward pass matches the double precision oracle") {
    std::mt19937_64 rng(42);
    for (int trial = 0; trial < 40; ++trial) {
        const auto spec = testing::random_spec(rng);
        const ModelBundle m = testing::random_model(spec, 1000 + trial);
        const auto ids = testing::random_tokens(rng, 2 + rng() % 10, m.arch.vocab_size);
        const RunTrace tr = run(m, ids, {}, RecordOptions::all());
        const auto ref = oracle::naive_forward(m, ids);
        CAPTURE(trial);
        CAPTURE(family_name(spec.family));
        CHECK(logits_diff(tr.logits, ref.logits) < 2e-4);
        for (std::size_t l = 0; l <= static_cast<std::size_t>(spec.layers); ++l)
            CHECK(rows_diff(tr.residual[l], ref.residual[l]) < 2e-4);
        for (std::size_t l = 0; l < static_cast<std::size_t>(spec.layers); ++l) {
            CHECK(rows_diff(tr.attn_input[l], ref.attn_input[l]) < 2e-4);
            CHECK(rows_diff(tr.mlp_out[l], ref.mlp_out[l]) < 2e-4);
            for (std::size_t h = 0; h < static_cast<std::size_t>(spec.heads); ++h) {
                CHECK(rows_diff(tr.attention[l][h], ref.pattern[l][h]) < 2e-5);
                CHECK(rows_diff(tr.head_contrib[l][h], ref.head_contrib[l][h]) < 2e-4);
            }
        }
    }
}

TEST_CASE("overrides match the oracle") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 30; ++trial) {
        const auto spec = testing::random_spec(rng);
        const ModelBundle m = testing::random_model(spec, 2000 + trial);
        const std::size_t T = 3 + rng() % 6;
        const auto ids = testing::random_tokens(rng, T, m.arch.vocab_size);
        const auto d = static_cast<std::size_t>(spec.d_model);
        OverrideSet o;
        oracle::NaiveOverrides no;
        const int l = static_cast<int>(rng() % static_cast<std::uint64_t>(spec.layers));
        const int h = static_cast<int>(rng() % static_cast<std::uint64_t>(spec.heads));
        {
            auto pos = some_positions(rng, T);
            Matrix v = random_rows(rng, pos.size(), d);
            o.components.push_back({ComponentId::attention(l, h), pos, v});
            no.components.push_back({l, h, pos, to_rows(v)});
        }
        {
            auto pos = some_positions(rng, T);
            Matrix v = random_rows(rng, pos.size(), d);
            const int lm = static_cast<int>(rng() % static_cast<std::uint64_t>(spec.layers));
            o.components.push_back({ComponentId::mlp(lm), pos, v});
            no.components.push_back({lm, -1, pos, to_rows(v)});
        }
        {
            auto pos = some_positions(rng, T);
            Matrix rows(pos.size(), T);
            for (std::size_t i = 0; i < pos.size(); ++i) {
                double z = 0;
                for (std::size_t j = 0; j <= pos[i]; ++j) z += rows(i, j) = static_cast<float>(rng() % 100 + 1);
                for (std::size_t j = 0; j <= pos[i]; ++j) rows(i, j) = static_cast<float>(rows(i, j) / z);
            }
            const int hp = static_cast<int>(rng() % static_cast<std::uint64_t>(spec.heads));
            o.patterns.push_back({l, hp, pos, rows});
            no.patterns.push_back({l, hp, pos, to_rows(rows)});
        }
        {
            auto pos = some_positions(rng, T);
            Matrix v = random_rows(rng, pos.size(), d);
            const int ld = static_cast<int>(rng() % static_cast<std::uint64_t>(spec.layers));
            o.deltas.push_back({ld, pos, v});
            no.deltas.push_back({ld, -1, pos, to_rows(v)});
        }
        const RunTrace tr = run(m, ids, o, RecordOptions::all());
        const auto ref = oracle::naive_forward(m, ids, no);
        CAPTURE(trial);
        CHECK(logits_diff(tr.logits, ref.logits) < 2e-4);
        for (std::size_t k = 0; k <= static_cast<std::size_t>(spec.layers); ++k)
            CHECK(rows_diff(tr.residual[k], ref.residual[k]) < 2e-4);
    }
}

TEST_CASE("attention is causal and normalized, residual is additive") {
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 30; ++trial) {
        const auto spec = testing::random_spec(rng);
        const ModelBundle m = testing::random_model(spec, 3000 + trial);
        const std::size_t T = 1 + rng() % 12;
        const auto ids = testing::random_tokens(rng, T, m.arch.vocab_size);
        const RunTrace tr = run(m, ids, {}, RecordOptions::all());
        for (std::size_t l = 0; l < static_cast<std::size_t>(spec.layers); ++l) {
            for (const Matrix& p : tr.attention[l])
                for (std::size_t i = 0; i < T; ++i) {
                    double s = 0;
                    for (std::size_t j = 0; j < T; ++j) {
                        if (j > i) CHECK(p(i, j) == 0.0f);
                        s += p(i, j);
                    }
                    CHECK(std::abs(s - 1.0) < 1e-5);
                }
            Matrix sum = tr.residual[l];
            for (const Matrix& c : tr.head_contrib[l]) sum = add(sum, c);
            sum = add(sum, tr.mlp_out[l]);
            CHECK(max_abs_diff(sum, tr.residual[l + 1]) <= 1e-4 * (1.0 + frobenius_norm(sum)));
        }
    }
}

TEST_CASE("resume reproduces a full run and rejects early overrides") {
    std::mt19937_64 rng(13);
    for (int trial = 0; trial < 20; ++trial) {
        auto spec = testing::random_spec(rng);
        spec.layers = 2 + trial % 2;
        const ModelBundle m = testing::random_model(spec, 4000 + trial);
        const std::size_t T = 2 + rng() % 8;
        const auto ids = testing::random_tokens(rng, T, m.arch.vocab_size);
        const RunTrace base = run(m, ids);
        const int start = 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(spec.layers - 1));
        OverrideSet o;
        const std::vector<std::size_t> pos = {T - 1};
        o.deltas.push_back({start, pos, random_rows(rng, 1, static_cast<std::size_t>(spec.d_model))});
        const RunTrace full = run(m, ids, o);
        const RunTrace part = resume(m, base, start, o);
        CHECK(max_abs_diff(full.logits, part.logits) == 0.0);
        CHECK(max_abs_diff(run(m, ids).logits, resume(m, base, 0, {}).logits) == 0.0);
        OverrideSet early;
        early.deltas.push_back({0, pos, Matrix(1, static_cast<std::size_t>(spec.d_model))});
        CHECK_THROWS_AS(resume(m, base, start, early), ConfigError);
    }
}

TEST_CASE("self patching is the identity") {
    std::mt19937_64 rng(19);
    for (int trial = 0; trial < 30; ++trial) {
        const auto spec = testing::random_spec(rng);
        const ModelBundle m = testing::random_model(spec, 5000 + trial);
        const std::size_t T = 2 + rng() % 8;
        const auto ids = testing::random_tokens(rng, T, m.arch.vocab_size);
        const RunTrace base = run(m, ids, {}, RecordOptions::all());
        std::vector<std::size_t> all(T);
        for (std::size_t i = 0; i < T; ++i) all[i] = i;
        const int l = static_cast<int>(rng() % static_cast<std::uint64_t>(spec.layers));
        const int h = static_cast<int>(rng() % static_cast<std::uint64_t>(spec.heads));
        OverrideSet o;
        o.components.push_back({ComponentId::attention(l, h), all, base.head_contrib[l][h]});
        o.components.push_back({ComponentId::mlp(l), all, base.mlp_out[l]});
        o.patterns.push_back({l, h, all, base.attention[l][h]});
        CHECK(max_abs_diff(run(m, ids, o).logits, base.logits) <= 1e-5);
    }
}

TEST_CASE("invalid inputs are rejected") {
    const ModelBundle m = testing::random_model({}, 1);
    CHECK_THROWS_AS(run(m, std::vector<int>{}), DataError);
    CHECK_THROWS_AS(run(m, std::vector<int>{m.arch.vocab_size}), DataError);
    CHECK_THROWS_AS(run(m, std::vector<int>(65, 1)), DataError);
    OverrideSet o;
    o.components.push_back({ComponentId::attention(0, 9), {0}, Matrix(1, 16)});
    CHECK_THROWS_AS(run(m, std::vector<int>{1, 2}, o), ShapeError);
    OverrideSet p;
    p.deltas.push_back({0, {5}, Matrix(1, 16)});
    CHECK_THROWS_AS(run(m, std::vector<int>{1, 2}, p), ShapeError);
}

TEST_CASE("rotary rotation is relative and invertible") {
    std::mt19937_64 rng(23);
    std::normal_distribution<float> nd;
    for (int trial = 0; trial < 50; ++trial) {
        Vector q(8), k(8);
        for (float& v : q) v = nd(rng);
        for (float& v : k) v = nd(rng);
        const double s = static_cast<double>(rng() % 30), t = static_cast<double>(rng() % 30);
        Vector q1 = q, k1 = k, q2 = q, k2 = k;
        rotate_head_vector(q1, s, 10000.0f);
        rotate_head_vector(k1, t, 10000.0f);
        rotate_head_vector(q2, s + 5, 10000.0f);
        rotate_head_vector(k2, t + 5, 10000.0f);
        CHECK(dot(q1, k1) == doctest::Approx(dot(q2, k2)).epsilon(1e-4));
        rotate_head_vector(q1, -s, 10000.0f);
        CHECK(max_abs_diff(q1, q) < 1e-4);
    }
}

TEST_CASE("decision readout") {
    const std::array<int, 4> opts = {1, 2, 3, 4};
    Vector logits(6, 0.0f);
    logits[3] = 2.0f;
    const Readout r = decision_readout(logits, opts);
    CHECK(r.argmax == 2);
    CHECK_FALSE(r.tie);
    double s = 0;
    for (double p : r.p_renorm) s += p;
    CHECK(s == doctest::Approx(1.0));
    CHECK(r.p_raw[2] == doctest::Approx(std::exp(2.0) / (5 + std::exp(2.0))));
    Vector shifted = logits;
    for (float& v : shifted) v += 123.0f;
    const Readout rs = decision_readout(shifted, opts);
    for (std::size_t k = 0; k < 4; ++k) {
        CHECK(std::abs(rs.p_raw[k] - r.p_raw[k]) <= 1e-6);
        CHECK(std::abs(rs.p_renorm[k] - r.p_renorm[k]) <= 1e-6);
    }
    const Readout tie = decision_readout(Vector(6, 0.0f), opts);
    CHECK(tie.argmax == 0);
    CHECK(tie.tie);
}

TEST_CASE("circuit matrices and greedy decoding") {
    std::mt19937_64 rng(29);
    for (int trial = 0; trial < 10; ++trial) {
        const auto spec = testing::random_spec(rng);
        const ModelBundle m = testing::random_model(spec, 6000 + trial);
        const int l = spec.layers - 1, h = spec.heads - 1;
        const auto c = circuit_matrices(m, l, h);
        const Matrix qk = scale(matmul_bt(m.w_q(l, h), m.w_k(l, h)), 1.0f / std::sqrt(static_cast<float>(spec.d_head)));
        CHECK(max_abs_diff(c.w_qk, qk) < 1e-5);
        CHECK(max_abs_diff(c.w_ov, matmul(m.w_v(l, h), m.w_o(l, h))) < 1e-5);

        const auto ids = testing::random_tokens(rng, 3, m.arch.vocab_size);
        const auto out = greedy_decode(m, ids, 2);
        REQUIRE(out.size() == 5);
        std::vector<int> prefix(ids);
        for (int step = 0; step < 2; ++step) {
            const auto ref = oracle::naive_forward(m, prefix).logits;
            const auto best = std::max_element(ref.begin(), ref.end()) - ref.begin();
            CHECK(out[prefix.size()] == static_cast<int>(best));
            prefix.push_back(out[prefix.size()]);
        }
    }
}
