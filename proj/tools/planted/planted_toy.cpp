#include "planted_toy.hpp"

#include "pertrace/report.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <set>

#include <fmt/core.h>
#include <fmt/format.h>

namespace pertrace::planted {

namespace fs = std::filesystem;

namespace {

constexpr int kHeadDim = kWidth / kHeads;
constexpr int kMlp = 4 * kWidth;

const std::array<std::string, 8> kEntities = {"paris", "rome", "lima", "oslo", "cairo", "delhi", "tokyo", "quito"};
const std::vector<std::string> kFiller = {
    "which", "city",    "is",     "the",     "capital", "answer", "of",     "country", "experts",   "say",    "trust",
    "me",    "clearly", "everyone", "knows", "it",      "must",   "be",     "sources", "confirm",   "really", "believe",
    "obviously", "true", "surely", "indeed", "many",    "agree",  "famous", "people",  "think",     "so",     "yes",
    "right", "fact",    "hear",   "that",    "this",    "always", "was",    "not"};

// Feature columns of the Hadamard basis.
constexpr int kSlot0 = 1;
constexpr int kRank = 4;
constexpr int kNormFill = 5;
constexpr int kRoute = 6;
constexpr int kAnswerFlag = 7;
constexpr int kSink = 8;
constexpr int kJunk = 9;
constexpr int kEntity0 = 10;
constexpr int kMention0 = 18;
constexpr int kFiller0 = 26;

constexpr std::array<std::array<double, 3>, 4> kTetra = {{{1, 1, 1}, {1, -1, -1}, {-1, 1, -1}, {-1, -1, 1}}};

std::string capitalize(std::string s) {
    if (!s.empty()) s[0] = static_cast<char>(s[0] - 'a' + 'A');
    return s;
}

std::vector<std::string> surface_words() {
    std::vector<std::string> w = {"Q", " C", " 1", " 2", " 3", " 4", " A"};
    for (const auto& e : kEntities) w.push_back(" " + e);
    for (const auto& e : kEntities) w.push_back(" " + capitalize(e));
    for (const auto& f : kFiller) w.push_back(" " + f);
    return w;
}

// Byte-mapped form of an ASCII word (leading space becomes the mapped space).
std::string mapped(const std::string& word) {
    const auto& table = byte_to_unicode();
    std::string out;
    for (unsigned char c : word) out += table[c];
    return out;
}

std::vector<std::string> mapped_symbols(const std::string& word) {
    const auto& table = byte_to_unicode();
    std::vector<std::string> out;
    for (unsigned char c : word) out.push_back(table[c]);
    return out;
}

Tokenizer build_tokenizer() {
    std::vector<std::string> vocab;
    std::vector<std::pair<std::string, std::string>> merges;
    std::set<std::pair<std::string, std::string>> seen;
    for (const auto& w : surface_words()) {
        vocab.push_back(mapped(w));
        const auto sym = mapped_symbols(w);
        std::string prefix = sym[0];
        for (std::size_t i = 1; i < sym.size(); ++i) {
            if (seen.insert({prefix, sym[i]}).second) merges.emplace_back(prefix, sym[i]);
            prefix += sym[i];
        }
    }
    return Tokenizer(std::move(vocab), std::move(merges));
}

double unit_uniform(std::mt19937_64& rng) { return (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53; }

double gaussian(std::mt19937_64& rng) {
    const double u1 = unit_uniform(rng), u2 = unit_uniform(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::array<int, 4> shuffled4(std::mt19937_64& rng) {
    std::array<int, 4> p = {0, 1, 2, 3};
    for (std::size_t i = 3; i > 0; --i) std::swap(p[i], p[rng() % (i + 1)]);
    return p;
}

void axpy(Vector& y, double a, const Vector& x) {
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += static_cast<float>(a * x[i]);
}

// Unit vertices of the regular 7-simplex in R^7 (Helmert coordinates).
std::array<std::array<double, 7>, 8> simplex_vertices() {
    std::array<std::array<double, 7>, 8> s{};
    for (int k = 1; k <= 7; ++k) {
        const double c = 1.0 / std::sqrt(static_cast<double>(k * (k + 1)));
        for (int i = 0; i < k; ++i) s[static_cast<std::size_t>(i)][static_cast<std::size_t>(k - 1)] = c;
        s[static_cast<std::size_t>(k)][static_cast<std::size_t>(k - 1)] = -k * c;
    }
    for (auto& row : s) {
        double n = 0.0;
        for (double v : row) n += v * v;
        n = std::sqrt(n);
        for (double& v : row) v /= n;
    }
    return s;
}

} // namespace

Vector hadamard_column(int i) {
    Vector v(kWidth);
    const float s = 1.0f / std::sqrt(static_cast<float>(kWidth));
    for (int r = 0; r < kWidth; ++r)
        v[static_cast<std::size_t>(r)] = (std::popcount(static_cast<unsigned>(r & i)) % 2 == 0) ? s : -s;
    return v;
}

Vector routing_direction() { return hadamard_column(kRoute); }

Vector slot_vector(int k) {
    Vector v(kWidth, 0.0f);
    for (int c = 0; c < 3; ++c)
        axpy(v, kTetra[static_cast<std::size_t>(k)][static_cast<std::size_t>(c)] / std::sqrt(3.0), hadamard_column(kSlot0 + c));
    return v;
}

ComponentId decision_head() { return ComponentId::attention(1, 0); }
ComponentId writer_head() { return ComponentId::attention(0, 1); }
ComponentId decoy_writer_head() { return ComponentId::attention(0, 2); }
int writer_layer() { return 0; }

ModelBundle build_model(const Parameters& p) {
    ModelBundle b;
    auto& a = b.arch;
    a.family = Family::gpt2;
    a.n_layers = kLayers;
    a.n_heads = kHeads;
    a.n_kv_heads = kHeads;
    a.d_model = kWidth;
    a.d_head = kHeadDim;
    a.d_mlp = kMlp;
    a.vocab_size = kVocab;
    a.max_positions = 64;
    a.norm_eps = 1e-5f;
    a.tied_embeddings = false;
    b.tokenizer = build_tokenizer();
    b.name = "planted-toy";

    const std::size_t d = kWidth;
    auto col = hadamard_column;
    std::vector<Vector> E, F, G;
    for (int i = 0; i < 8; ++i) E.push_back(col(kEntity0 + i));
    for (int i = 0; i < 8; ++i) F.push_back(col(kMention0 + i));
    for (int i = 0; i < 6; ++i) G.push_back(col(kFiller0 + i));
    const Vector U = col(kRoute), Qd = col(kAnswerFlag), B = col(kSink), J = col(kJunk), L = col(kRank),
                 N = col(kNormFill);

    auto& w = b.weights;
    w.embed = Matrix(kVocab, d);
    auto set_row = [&](int r, const Vector& v) { std::copy(v.begin(), v.end(), w.embed.row(static_cast<std::size_t>(r)).begin()); };
    set_row(0, B);
    {
        Vector v(d, 0.0f);
        axpy(v, p.filler_bias, G[0]);
        axpy(v, 0.5, G[1]);
        set_row(1, v);
    }
    for (int k = 0; k < 4; ++k) {
        const double rank = p.rank_step * (k + 1);
        const double fill = std::sqrt(p.label_norm * p.label_norm - rank * rank - p.slot_scale * p.slot_scale);
        Vector v(d, 0.0f);
        axpy(v, p.slot_scale, slot_vector(k));
        axpy(v, rank, L);
        axpy(v, fill, N);
        set_row(2 + k, v);
    }
    {
        Vector v(d, 0.0f);
        axpy(v, p.answer_query, Qd);
        set_row(6, v);
    }
    for (int i = 0; i < 8; ++i) {
        Vector v = E[static_cast<std::size_t>(i)];
        if (i < 4) axpy(v, p.entity_routing, U);
        set_row(7 + i, v);
        set_row(15 + i, F[static_cast<std::size_t>(i)]);
    }
    std::mt19937_64 rng(p.embedding_seed);
    for (std::size_t f = 0; f < kFiller.size(); ++f) {
        std::array<double, 5> r{};
        double n = 0.0;
        for (double& x : r) {
            x = gaussian(rng);
            n += x * x;
        }
        n = std::sqrt(n);
        Vector v(d, 0.0f);
        axpy(v, p.filler_bias, G[0]);
        for (std::size_t j = 0; j < 5; ++j) axpy(v, 0.7 * r[j] / n, G[j + 1]);
        set_row(23 + static_cast<int>(f), v);
    }

    w.positional = Matrix(64, d);
    const std::size_t hd = kHeads * kHeadDim;
    for (int l = 0; l < kLayers; ++l) {
        LayerWeights lw;
        lw.ln1_gain.assign(d, 1.0f);
        lw.ln1_bias.assign(d, 0.0f);
        lw.ln2_gain.assign(d, 1.0f);
        lw.ln2_bias.assign(d, 0.0f);
        lw.wq = Matrix(d, hd);
        lw.wk = Matrix(d, hd);
        lw.wv = Matrix(d, hd);
        lw.wo = Matrix(hd, d);
        lw.bq.assign(hd, 0.0f);
        lw.bk.assign(hd, 0.0f);
        lw.bv.assign(hd, 0.0f);
        lw.bo.assign(d, 0.0f);
        lw.w_in = Matrix(d, kMlp);
        lw.b_in.assign(kMlp, 0.0f);
        lw.w_out = Matrix(kMlp, d);
        lw.b_out.assign(d, 0.0f);
        w.layers.push_back(std::move(lw));
    }
    auto put_col = [&](Matrix& m, int head, int c, const Vector& v, double s) {
        const auto cc = static_cast<std::size_t>(head * kHeadDim + c);
        for (std::size_t r = 0; r < d; ++r) m(r, cc) += static_cast<float>(s * v[r]);
    };
    auto put_row = [&](Matrix& m, int head, int c, const Vector& v, double s) {
        const auto rr = static_cast<std::size_t>(head * kHeadDim + c);
        for (std::size_t k = 0; k < d; ++k) m(rr, k) += static_cast<float>(s * v[k]);
    };

    // Layer 0 head 0: entity tokens read the slot code of the preceding label.
    auto& l0 = w.layers[0];
    Vector entity_sum(d, 0.0f);
    for (const auto& e : E) axpy(entity_sum, 1.0, e);
    put_col(l0.wq, 0, 0, entity_sum, p.binder_query);
    put_col(l0.wk, 0, 0, L, 1.0);
    for (int c = 0; c < 3; ++c) {
        put_col(l0.wv, 0, c, col(kSlot0 + c), 1.0);
        put_row(l0.wo, 0, c, col(kSlot0 + c), p.binder_gain);
    }
    // Layer 0 heads 1 and 2: an entity token matching a mention in the context
    // writes the routing direction (head 2 adds junk on top).
    const auto sigma = simplex_vertices();
    for (int h : {1, 2}) {
        for (int i = 0; i < 8; ++i)
            for (int c = 0; c < 7; ++c) {
                const double s = p.writer_match * sigma[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)];
                put_col(l0.wq, h, c, E[static_cast<std::size_t>(i)], s);
                put_col(l0.wk, h, c, F[static_cast<std::size_t>(i)], s);
            }
        put_col(l0.wk, h, 7, B, 1.0);
        l0.bq[static_cast<std::size_t>(h * kHeadDim + 7)] = static_cast<float>(p.sink_bias);
        Vector mention_sum(d, 0.0f);
        for (const auto& f : F) axpy(mention_sum, 1.0 / std::sqrt(32.0), f);
        put_col(l0.wv, h, 0, mention_sum, 1.0);
    }
    put_row(l0.wo, 1, 0, U, p.writer_gain);
    {
        Vector uj = U;
        axpy(uj, 1.0, J);
        put_row(l0.wo, 2, 0, uj, p.writer_gain);
    }
    // Layer 1 head 0: the answer slot attends to the option carrying the
    // routing direction and copies its slot code.
    auto& l1 = w.layers[1];
    put_col(l1.wq, 0, 0, Qd, p.decision_query);
    put_col(l1.wk, 0, 0, U, p.decision_key);
    for (int c = 0; c < 3; ++c) {
        put_col(l1.wv, 0, c, col(kSlot0 + c), 1.0);
        put_row(l1.wo, 0, c, col(kSlot0 + c), p.copy_gain);
    }

    w.final_gain.assign(d, 1.0f);
    w.final_bias.assign(d, 0.0f);
    w.unembed = Matrix(kVocab, d);
    for (int k = 0; k < 4; ++k) {
        const Vector s = slot_vector(k);
        for (std::size_t c = 0; c < d; ++c) w.unembed(static_cast<std::size_t>(2 + k), c) = static_cast<float>(p.readout_gain * s[c]);
    }
    a.validate();
    return b;
}

std::vector<QAExample> build_corpus(const Parameters& p) {
    const std::vector<std::vector<std::string>> questions = {
        {"which", "city", "is", "the", "capital"}, {"which", "is", "the", "answer"}, {"the", "capital", "of", "this", "country"}};
    const std::vector<std::vector<std::string>> prefixes = {
        {"experts", "say"}, {"trust", "me"}, {"everyone", "knows"}, {"sources", "confirm"}, {"many", "people", "think"}};
    const std::vector<std::vector<std::string>> tails = {{"is", "right"}, {"must", "be", "true"}, {"was", "always", "so"}, {"indeed"}, {}};
    std::mt19937_64 rng(p.corpus_seed);
    std::vector<QAExample> out;
    const std::size_t n_flip = p.n_examples * 7 / 10;
    const std::size_t n_noflip = p.n_examples * 9 / 10;
    for (std::size_t n = 0; n < p.n_examples; ++n) {
        const int truth = static_cast<int>(n % 4);
        const auto fperm = shuffled4(rng);
        std::array<int, 4> falses{};
        for (std::size_t i = 0; i < 4; ++i) falses[i] = fperm[i] + 4;
        const std::array<int, 4> canon = {truth, falses[0], falses[1], falses[2]};
        const bool flip = n < n_flip, noflip = n >= n_flip && n < n_noflip;
        const int mention = noflip ? falses[3] : canon[1];
        const int correct_canon = (flip || noflip) ? 0 : 2;
        const auto perm = shuffled4(rng);

        QAExample ex;
        ex.id = fmt::format("toy-{:02}", n);
        ex.question = fmt::format("{}", fmt::join(questions[n % 3], " "));
        for (std::size_t k = 0; k < 4; ++k) {
            ex.options[k] = kEntities[static_cast<std::size_t>(canon[static_cast<std::size_t>(perm[k])])];
            if (perm[k] == correct_canon) ex.correct_index = static_cast<int>(k);
            if (perm[k] == 1) ex.target_index = static_cast<int>(k);
        }
        const std::string pre = fmt::format("{}", fmt::join(prefixes[n % 5], " "));
        const std::string kw = " " + capitalize(kEntities[static_cast<std::size_t>(mention)]);
        ex.persuasion_text = pre + kw;
        if (!tails[n % 5].empty()) ex.persuasion_text += " " + fmt::format("{}", fmt::join(tails[n % 5], " "));
        ex.keyword_spans.emplace_back(pre.size(), pre.size() + kw.size());
        ex.validate();
        out.push_back(std::move(ex));
    }
    return out;
}

PromptTemplate toy_template() { return PromptTemplate::builtin("toy"); }

void write_fixture(const fs::path& dir, const Parameters& p) {
    fs::create_directories(dir);
    const ModelBundle model = build_model(p);
    save_model(model, dir / "model");

    std::vector<nlohmann::ordered_json> rows;
    for (const auto& ex : build_corpus(p)) rows.push_back(to_json(ex));
    write_jsonl(dir / "corpus.jsonl", rows);

    nlohmann::ordered_json tpl;
    const PromptTemplate t = toy_template();
    tpl["name"] = t.name;
    tpl["system"] = t.system;
    tpl["body"] = t.body;
    tpl["labels"] = t.labels;
    write_json(dir / "template.json", tpl);

    nlohmann::ordered_json truth;
    truth["decision_head"] = decision_head().label();
    truth["writer_head"] = writer_head().label();
    truth["decoy_writer_head"] = decoy_writer_head().label();
    truth["writer_layer"] = writer_layer();
    truth["routing_direction"] = routing_direction();
    truth["option_vertices"] = nlohmann::ordered_json::array();
    for (int k = 0; k < 4; ++k) truth["option_vertices"].push_back(slot_vector(k));
    truth["n_examples"] = p.n_examples;
    write_json(dir / "planted.json", truth);

    std::ofstream cfg(dir / "toy.cfg", std::ios::binary | std::ios::trunc);
    cfg << "template=toy\n"
           "shuffle_options=false\n"
           "seed=0\n"
           "folds=10\n"
           "epsilon=1e-8\n"
           "alphas=-4,-3,-2,-1,0,1,2,3,4,5,6\n"
           "windows=all\n";
}

} // namespace pertrace::planted
