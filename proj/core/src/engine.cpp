#include "pertrace/engine.hpp"

#include "pertrace/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <regex>

#include <fmt/core.h>

namespace pertrace {

std::string ComponentId::label() const {
    return is_head() ? fmt::format("L{}H{}", layer, head) : fmt::format("L{}MLP", layer);
}

ComponentId ComponentId::parse(const std::string& text) {
    static const std::regex head_re(R"(^L?(\d+)[:H](\d+)$)", std::regex::icase);
    static const std::regex mlp_re(R"(^L?(\d+)[:]?MLP$)", std::regex::icase);
    std::smatch m;
    if (std::regex_match(text, m, head_re)) return attention(std::stoi(m[1]), std::stoi(m[2]));
    if (std::regex_match(text, m, mlp_re)) return mlp(std::stoi(m[1]));
    throw ConfigError(fmt::format("cannot parse component '{}' (expected L:H, LxHy or LxMLP)", text));
}

int OverrideSet::earliest_layer(int n_layers) const {
    int e = n_layers;
    for (const auto& c : components) e = std::min(e, c.id.layer);
    for (const auto& p : patterns) e = std::min(e, p.layer);
    for (const auto& d : deltas) e = std::min(e, d.layer);
    return e;
}

namespace {

float gelu_tanh(float x) {
    constexpr float k = 0.7978845608028654f;
    return 0.5f * x * (1.0f + std::tanh(k * (x + 0.044715f * x * x * x)));
}

float silu(float x) { return x / (1.0f + std::exp(-x)); }

Matrix normalize(const ModelBundle& m, const Matrix& x, const Vector& gain, const Vector& bias) {
    if (m.arch.family == Family::gpt2) return layer_norm_rows(x, gain, bias, m.arch.norm_eps);
    return rms_norm_rows(x, gain, m.arch.norm_eps);
}

void add_bias(Matrix& x, const Vector& b) {
    if (b.empty()) return;
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto row = x.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) row[c] += b[c];
    }
}

void apply_rotary(Matrix& x, int n_heads, int d_head, float theta) {
    const auto half = static_cast<std::size_t>(d_head / 2);
    std::vector<double> inv_freq(half);
    for (std::size_t i = 0; i < half; ++i)
        inv_freq[i] = std::pow(static_cast<double>(theta), -2.0 * static_cast<double>(i) / d_head);
    for (std::size_t pos = 0; pos < x.rows(); ++pos) {
        auto row = x.row(pos);
        for (std::size_t i = 0; i < half; ++i) {
            const double ang = static_cast<double>(pos) * inv_freq[i];
            const auto c = static_cast<float>(std::cos(ang));
            const auto s = static_cast<float>(std::sin(ang));
            for (int h = 0; h < n_heads; ++h) {
                float* v = row.data() + static_cast<std::size_t>(h * d_head);
                const float a = v[i], b = v[i + half];
                v[i] = a * c - b * s;
                v[i + half] = b * c + a * s;
            }
        }
    }
}

void check_positions(const std::vector<std::size_t>& positions, std::size_t rows, std::size_t cols,
                     std::size_t expect_cols, std::size_t t, const std::string& what) {
    if (rows != positions.size() || cols != expect_cols)
        throw ShapeError(fmt::format("{}: payload is {}x{}, expected {}x{}", what, rows, cols, positions.size(),
                                     expect_cols));
    for (std::size_t p : positions)
        if (p >= t) throw ShapeError(fmt::format("{}: position {} outside sequence of length {}", what, p, t));
}

void validate_overrides(const ModelBundle& m, const OverrideSet& o, std::size_t t) {
    const auto d = static_cast<std::size_t>(m.arch.d_model);
    for (const auto& c : o.components) {
        if (c.id.layer < 0 || c.id.layer >= m.arch.n_layers || (c.id.is_head() && (c.id.head < 0 || c.id.head >= m.arch.n_heads)))
            throw ShapeError(fmt::format("component override {} outside the architecture", c.id.label()));
        check_positions(c.positions, c.values.rows(), c.values.cols(), d, t, "component override " + c.id.label());
    }
    for (const auto& p : o.patterns) {
        if (p.layer < 0 || p.layer >= m.arch.n_layers || p.head < 0 || p.head >= m.arch.n_heads)
            throw ShapeError(fmt::format("pattern override L{}H{} outside the architecture", p.layer, p.head));
        check_positions(p.positions, p.rows.rows(), p.rows.cols(), t, t, fmt::format("pattern override L{}H{}", p.layer, p.head));
    }
    for (const auto& r : o.deltas) {
        if (r.layer < 0 || r.layer >= m.arch.n_layers)
            throw ShapeError(fmt::format("residual delta at layer {} outside the architecture", r.layer));
        check_positions(r.positions, r.delta.rows(), r.delta.cols(), d, t, fmt::format("residual delta at layer {}", r.layer));
    }
}

void validate_tokens(const ModelBundle& m, std::span<const int> ids) {
    if (ids.empty()) throw DataError("empty token sequence");
    if (ids.size() > static_cast<std::size_t>(m.arch.max_positions))
        throw DataError(fmt::format("sequence of {} tokens exceeds max_positions {}", ids.size(), m.arch.max_positions));
    for (int id : ids)
        if (id < 0 || id >= m.arch.vocab_size)
            throw DataError(fmt::format("token id {} outside vocabulary of {}", id, m.arch.vocab_size));
}

void replace_rows(Matrix& target, const std::vector<std::size_t>& positions, const Matrix& values) {
    for (std::size_t i = 0; i < positions.size(); ++i) {
        auto src = values.row(i);
        std::copy(src.begin(), src.end(), target.row(positions[i]).begin());
    }
}

void prepare_records(const ModelBundle& m, const RecordOptions& rec, RunTrace& tr) {
    const auto L = static_cast<std::size_t>(m.arch.n_layers);
    const auto H = static_cast<std::size_t>(m.arch.n_heads);
    if (rec.attn_inputs) tr.attn_input.resize(L);
    if (rec.head_out) tr.head_out.assign(L, std::vector<Matrix>(H));
    if (rec.head_contrib) tr.head_contrib.assign(L, std::vector<Matrix>(H));
    if (rec.attention) tr.attention.assign(L, std::vector<Matrix>(H));
    if (rec.attn_logits) tr.attn_logits.assign(L, std::vector<Matrix>(H));
    if (rec.mlp_out) tr.mlp_out.resize(L);
}

void run_layer(const ModelBundle& m, int l, Matrix& x, const OverrideSet& o, const RecordOptions& rec, RunTrace& tr) {
    const auto& a = m.arch;
    const auto& w = m.weights.layers[static_cast<std::size_t>(l)];
    const std::size_t T = x.rows();
    const auto d = static_cast<std::size_t>(a.d_model);
    const auto dk = static_cast<std::size_t>(a.d_head);
    const std::size_t hq = static_cast<std::size_t>(a.n_heads) * dk;
    const std::size_t hkv = static_cast<std::size_t>(a.n_kv_heads) * dk;

    for (const auto& dl : o.deltas) {
        if (dl.layer != l) continue;
        for (std::size_t i = 0; i < dl.positions.size(); ++i) {
            auto row = x.row(dl.positions[i]);
            auto dv = dl.delta.row(i);
            for (std::size_t c = 0; c < d; ++c) row[c] += dv[c];
        }
    }
    tr.residual[static_cast<std::size_t>(l)] = x;

    const Matrix h = normalize(m, x, w.ln1_gain, w.ln1_bias);
    Matrix q = matmul(h, w.wq);
    Matrix k = matmul(h, w.wk);
    Matrix v = matmul(h, w.wv);
    add_bias(q, w.bq);
    add_bias(k, w.bk);
    add_bias(v, w.bv);
    if (a.positional() == PositionalScheme::rotary) {
        apply_rotary(q, a.n_heads, a.d_head, a.rope_theta);
        apply_rotary(k, a.n_kv_heads, a.d_head, a.rope_theta);
    }
    if (rec.attn_inputs) tr.attn_input[static_cast<std::size_t>(l)] = h;

    const float scale = 1.0f / std::sqrt(static_cast<float>(dk));
    const float bo_share = 1.0f / static_cast<float>(a.n_heads);
    Matrix attn_sum(T, d);
    Matrix pattern(T, T);
    Matrix z(T, dk);
    Matrix contrib(T, d);
    for (int hd = 0; hd < a.n_heads; ++hd) {
        const std::size_t qo = static_cast<std::size_t>(hd) * dk;
        const std::size_t ko = static_cast<std::size_t>(hd / a.kv_group()) * dk;
        // Scores, causal mask, softmax.
        std::fill(pattern.storage().begin(), pattern.storage().end(), 0.0f);
        kernels::sgemm(true, T, T, dk, q.data() + qo, hq, k.data() + ko, hkv, pattern.data(), T, 0.0f);
        Matrix* logits_rec = nullptr;
        if (rec.attn_logits) logits_rec = &tr.attn_logits[static_cast<std::size_t>(l)][static_cast<std::size_t>(hd)];
        if (logits_rec) *logits_rec = Matrix(T, T, -std::numeric_limits<float>::infinity());
        for (std::size_t i = 0; i < T; ++i) {
            auto row = pattern.row(i);
            for (std::size_t j = 0; j <= i; ++j) row[j] *= scale;
            if (logits_rec) std::copy_n(row.begin(), i + 1, logits_rec->row(i).begin());
            softmax_inplace(row.subspan(0, i + 1));
            std::fill(row.begin() + static_cast<std::ptrdiff_t>(i + 1), row.end(), 0.0f);
        }
        for (const auto& pp : o.patterns)
            if (pp.layer == l && pp.head == hd) replace_rows(pattern, pp.positions, pp.rows);
        if (rec.attention) tr.attention[static_cast<std::size_t>(l)][static_cast<std::size_t>(hd)] = pattern;

        kernels::sgemm(false, T, dk, T, pattern.data(), T, v.data() + ko, hkv, z.data(), dk, 0.0f);
        if (rec.head_out) tr.head_out[static_cast<std::size_t>(l)][static_cast<std::size_t>(hd)] = z;

        kernels::sgemm(false, T, d, dk, z.data(), dk, w.wo.data() + qo * d, d, contrib.data(), d, 0.0f);
        if (!w.bo.empty())
            for (std::size_t i = 0; i < T; ++i) {
                auto row = contrib.row(i);
                for (std::size_t c = 0; c < d; ++c) row[c] += w.bo[c] * bo_share;
            }
        for (const auto& cp : o.components)
            if (cp.id.is_head() && cp.id.layer == l && cp.id.head == hd) replace_rows(contrib, cp.positions, cp.values);
        if (rec.head_contrib) tr.head_contrib[static_cast<std::size_t>(l)][static_cast<std::size_t>(hd)] = contrib;

        float* __restrict s = attn_sum.data();
        const float* __restrict c = contrib.data();
        for (std::size_t i = 0; i < T * d; ++i) s[i] += c[i];
    }

    {
        float* __restrict xs = x.data();
        const float* __restrict s = attn_sum.data();
        for (std::size_t i = 0; i < T * d; ++i) xs[i] += s[i];
    }

    const Matrix h2 = normalize(m, x, w.ln2_gain, w.ln2_bias);
    Matrix act = matmul(h2, w.w_in);
    add_bias(act, w.b_in);
    if (a.family == Family::gpt2) {
        for (auto& val : act.storage()) val = gelu_tanh(val);
    } else {
        const Matrix gate = matmul(h2, w.w_gate);
        for (std::size_t i = 0; i < act.size(); ++i) act.data()[i] *= silu(gate.data()[i]);
    }
    Matrix mlp = matmul(act, w.w_out);
    add_bias(mlp, w.b_out);
    for (const auto& cp : o.components)
        if (!cp.id.is_head() && cp.id.layer == l) replace_rows(mlp, cp.positions, cp.values);
    if (rec.mlp_out) tr.mlp_out[static_cast<std::size_t>(l)] = mlp;

    float* __restrict xs = x.data();
    const float* __restrict mv = mlp.data();
    for (std::size_t i = 0; i < T * d; ++i) xs[i] += mv[i];
}

void finish(const ModelBundle& m, Matrix& x, RunTrace& tr) {
    tr.residual[static_cast<std::size_t>(m.arch.n_layers)] = x;
    tr.logits = logits_from_residual(m, x.row(x.rows() - 1));
    Matrix last(1, x.cols(), Vector(x.row(x.rows() - 1).begin(), x.row(x.rows() - 1).end()));
    const Matrix fh = normalize(m, last, m.weights.final_gain, m.weights.final_bias);
    tr.final_hidden = Vector(fh.values().begin(), fh.values().end());
}

} // namespace

Vector logits_from_residual(const ModelBundle& m, std::span<const float> residual_row) {
    Matrix last(1, residual_row.size(), Vector(residual_row.begin(), residual_row.end()));
    const Matrix fh = normalize(m, last, m.weights.final_gain, m.weights.final_bias);
    Vector logits(m.weights.unembed.rows());
    kernels::sgemv(m.weights.unembed.rows(), m.weights.unembed.cols(), m.weights.unembed.data(), fh.data(),
                   logits.data());
    if (!m.weights.unembed_bias.empty())
        for (std::size_t i = 0; i < logits.size(); ++i) logits[i] += m.weights.unembed_bias[i];
    return logits;
}

RunTrace run(const ModelBundle& m, std::span<const int> ids, const OverrideSet& o, const RecordOptions& rec) {
    validate_tokens(m, ids);
    const std::size_t T = ids.size();
    validate_overrides(m, o, T);
    const auto d = static_cast<std::size_t>(m.arch.d_model);

    RunTrace tr;
    tr.token_ids.assign(ids.begin(), ids.end());
    tr.residual.resize(static_cast<std::size_t>(m.arch.n_layers) + 1);
    prepare_records(m, rec, tr);

    Matrix x(T, d);
    for (std::size_t i = 0; i < T; ++i) {
        auto row = x.row(i);
        auto e = m.weights.embed.row(static_cast<std::size_t>(ids[i]));
        std::copy(e.begin(), e.end(), row.begin());
        if (m.arch.positional() == PositionalScheme::learned_absolute) {
            auto p = m.weights.positional.row(i);
            for (std::size_t c = 0; c < d; ++c) row[c] += p[c];
        }
    }
    for (int l = 0; l < m.arch.n_layers; ++l) run_layer(m, l, x, o, rec, tr);
    finish(m, x, tr);
    return tr;
}

RunTrace resume(const ModelBundle& m, const RunTrace& base, int start_layer, const OverrideSet& o,
                const RecordOptions& rec) {
    if (start_layer < 0 || start_layer > m.arch.n_layers)
        throw ShapeError(fmt::format("resume layer {} outside 0..{}", start_layer, m.arch.n_layers));
    if (base.residual.size() != static_cast<std::size_t>(m.arch.n_layers) + 1 ||
        base.residual[static_cast<std::size_t>(start_layer)].empty())
        throw DataError("resume: base trace lacks the residual stream");
    if (o.earliest_layer(m.arch.n_layers) < start_layer)
        throw ConfigError(fmt::format("resume from layer {} cannot apply overrides below it", start_layer));
    const std::size_t T = base.length();
    validate_overrides(m, o, T);

    RunTrace tr;
    tr.token_ids = base.token_ids;
    tr.residual.resize(static_cast<std::size_t>(m.arch.n_layers) + 1);
    prepare_records(m, rec, tr);
    const auto s = static_cast<std::size_t>(start_layer);
    for (std::size_t l = 0; l < s; ++l) {
        tr.residual[l] = base.residual[l];
        if (rec.attn_inputs && l < base.attn_input.size()) tr.attn_input[l] = base.attn_input[l];
        if (rec.head_out && l < base.head_out.size()) tr.head_out[l] = base.head_out[l];
        if (rec.head_contrib && l < base.head_contrib.size()) tr.head_contrib[l] = base.head_contrib[l];
        if (rec.attention && l < base.attention.size()) tr.attention[l] = base.attention[l];
        if (rec.attn_logits && l < base.attn_logits.size()) tr.attn_logits[l] = base.attn_logits[l];
        if (rec.mlp_out && l < base.mlp_out.size()) tr.mlp_out[l] = base.mlp_out[l];
    }
    Matrix x = base.residual[s];
    for (int l = start_layer; l < m.arch.n_layers; ++l) run_layer(m, l, x, o, rec, tr);
    finish(m, x, tr);
    return tr;
}

CircuitMatrices circuit_matrices(const ModelBundle& m, int layer, int head) {
    if (layer < 0 || layer >= m.arch.n_layers || head < 0 || head >= m.arch.n_heads)
        throw ShapeError(fmt::format("head L{}H{} outside the architecture", layer, head));
    const Matrix wq = m.w_q(layer, head);
    const Matrix wk = m.w_k(layer, head);
    Matrix qk = matmul_d(wq, transpose(wk));
    const float s = 1.0f / std::sqrt(static_cast<float>(m.arch.d_head));
    for (auto& v : qk.storage()) v *= s;
    return {std::move(qk), matmul_d(m.w_v(layer, head), m.w_o(layer, head))};
}

Readout decision_readout(std::span<const float> logits, const std::array<int, 4>& ids) {
    for (std::size_t i = 0; i < 4; ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= logits.size())
            throw DataError(fmt::format("option token id {} outside logits of size {}", ids[i], logits.size()));
        for (std::size_t j = 0; j < i; ++j)
            if (ids[i] == ids[j]) throw DataError(fmt::format("duplicate option token id {}", ids[i]));
    }
    const float mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (float v : logits) z += std::exp(static_cast<double>(v) - mx);
    Readout r;
    double opt_sum = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
        r.p_raw[i] = std::exp(static_cast<double>(logits[static_cast<std::size_t>(ids[i])]) - mx) / z;
        opt_sum += r.p_raw[i];
    }
    for (std::size_t i = 0; i < 4; ++i) r.p_renorm[i] = r.p_raw[i] / opt_sum;
    for (std::size_t i = 1; i < 4; ++i)
        if (r.p_raw[i] > r.p_raw[static_cast<std::size_t>(r.argmax)]) r.argmax = static_cast<int>(i);
    for (std::size_t i = 0; i < 4; ++i)
        if (static_cast<int>(i) != r.argmax && r.p_raw[i] == r.p_raw[static_cast<std::size_t>(r.argmax)]) r.tie = true;
    return r;
}

Readout decision_readout(const RunTrace& trace, const std::array<int, 4>& ids) {
    return decision_readout(trace.logits, ids);
}

void rotate_head_vector(std::span<float> v, double position, float theta) {
    const std::size_t half = v.size() / 2;
    const auto dh = static_cast<double>(v.size());
    for (std::size_t i = 0; i < half; ++i) {
        const double ang = position * std::pow(static_cast<double>(theta), -2.0 * static_cast<double>(i) / dh);
        const double c = std::cos(ang), s = std::sin(ang);
        const double a = v[i], b = v[i + half];
        v[i] = static_cast<float>(a * c - b * s);
        v[i + half] = static_cast<float>(b * c + a * s);
    }
}

std::vector<int> greedy_decode(const ModelBundle& m, std::vector<int> ids, int n) {
    for (int step = 0; step < n; ++step) {
        const RunTrace tr = run(m, ids);
        const auto best = std::max_element(tr.logits.begin(), tr.logits.end()) - tr.logits.begin();
        ids.push_back(static_cast<int>(best));
    }
    return ids;
}

} // namespace pertrace
