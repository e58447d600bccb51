// Acceptance runner: one PASS/FAIL/SKIP line per criterion, indented details
// below it. Exits nonzero only when a criterion fails.

#include "pertrace/circuits.hpp"
#include "pertrace/engine.hpp"
#include "pertrace/interventions.hpp"
#include "pertrace/linalg.hpp"
#include "pertrace/model.hpp"
#include "pertrace/prompts.hpp"
#include "pertrace/report.hpp"

#include "oracles/grid_rank1.hpp"
#include "planted/planted_toy.hpp"
#include "support/test_models.hpp"

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <fmt/core.h>

using namespace pertrace;
namespace fs = std::filesystem;

namespace {

constexpr int kCases = 200;

struct Check {
    std::string name;
    bool ok = true;
    std::string detail;
};

enum class Status { pass, fail, skip };

struct Criterion {
    std::string name;
    Status status = Status::pass;
    std::vector<Check> checks;
    std::string note;
    double seconds = 0.0;
};

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

Status summarize(const std::vector<Check>& checks) {
    for (const auto& c : checks)
        if (!c.ok) return Status::fail;
    return Status::pass;
}

// Runs `body` and turns an escaping exception into a failed check.
void guarded(std::vector<Check>& checks, const std::string& name, const std::function<void(Check&)>& body) {
    Check c{name, true, ""};
    try {
        body(c);
    } catch (const std::exception& e) {
        c.ok = false;
        c.detail = fmt::format("threw: {}", e.what());
    }
    checks.push_back(std::move(c));
}

Vector random_unit(std::mt19937_64& rng, std::size_t d) {
    std::normal_distribution<float> nd;
    Vector v(d);
    for (float& x : v) x = nd(rng);
    return normalized(v);
}

Matrix random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c) {
    std::normal_distribution<float> nd;
    Matrix m(r, c);
    for (float& v : m.storage()) v = nd(rng);
    return m;
}

std::vector<std::size_t> all_positions(std::size_t n) {
    std::vector<std::size_t> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = i;
    return v;
}

// Options occupy tokens 1-2, 3-4, 5-6, 7-8; the answer slot is last.
PromptPair synthetic_pair(std::mt19937_64& rng, int vocab) {
    PromptPair p;
    p.id = "s";
    p.kind = "qa";
    p.clean_ids = testing::random_tokens(rng, 11, vocab);
    p.persuasive_ids = p.clean_ids;
    for (std::size_t k = 0; k < 4; ++k) p.spans.options[k] = {1 + 2 * k, 3 + 2 * k};
    p.spans.answer_slot = 10;
    p.correct_index = static_cast<int>(rng() % 4);
    p.target_index = (p.correct_index + 1) % 4;
    for (std::size_t k = 0; k < 4; ++k) p.option_token_ids[k] = static_cast<int>(k) * 7 + 3;
    return p;
}

QKDataset random_dataset(std::mt19937_64& rng, std::size_t d, std::size_t n) {
    QKDataset ds;
    ds.head = ComponentId::attention(1, 0);
    ds.d = d;
    for (std::size_t i = 0; i < n; ++i) {
        QKExample e;
        e.example_id = "e" + std::to_string(i);
        e.condition = "clean";
        e.r_q = random_unit(rng, d);
        for (float& v : e.r_q) v *= 2.0f;
        e.r_k = random_matrix(rng, 3 + rng() % 5, d);
        ds.examples.push_back(std::move(e));
    }
    return ds;
}

oracle::GridProblem to_grid(const QKDataset& ds, const Matrix& w, double eps) {
    oracle::GridProblem p;
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) p.w[i * 3 + j] = w(i, j);
    p.epsilon = eps;
    for (const auto& e : ds.examples) {
        oracle::GridExample g;
        g.r_q = {e.r_q[0], e.r_q[1], e.r_q[2]};
        for (std::size_t j = 0; j < e.r_k.rows(); ++j) g.r_k.push_back({e.r_k(j, 0), e.r_k(j, 1), e.r_k(j, 2)});
        p.examples.push_back(std::move(g));
    }
    return p;
}

Vector negated(Vector v) {
    for (float& x : v) x = -x;
    return v;
}

// Tracks the worst value seen over a property's cases.
struct Worst {
    double value = 0.0;
    int failures = 0;
    void add(double v, bool ok) {
        value = std::max(value, v);
        failures += ok ? 0 : 1;
    }
};

void record(Check& c, const Worst& w, const char* what, double bound) {
    c.ok = w.failures == 0;
    c.detail = fmt::format("{} cases, worst {} {:.3g} (bound {:.0e}), {} failing", kCases, what, w.value, bound,
                           w.failures);
}

// Planted model -----------------------------------------------------------------

int run_cli(const std::string& args, const fs::path& log) {
    const std::string cmd = fmt::format("'{}' {} > '{}' 2>&1", PERTRACE_CLI, args, log.string());
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Criterion planted_end_to_end() {
    Criterion cr{"planted model end-to-end"};
    const fs::path fixture = testing::fixture_dir();
    const fs::path out = testing::temp_dir("acceptance-planted");
    const auto planted = read_json(fixture / "planted.json");
    const std::string decision = planted["decision_head"], writer = planted["writer_head"];
    const int writer_layer = planted["writer_layer"];
    Vector routing;
    for (const auto& v : planted["routing_direction"]) routing.push_back(v.get<float>());

    const std::string base =
        fmt::format("--model '{}' --corpus '{}' --config '{}' --out '{}' --jobs 1 --format json",
                    (fixture / "model").string(), (fixture / "corpus.jsonl").string(),
                    (fixture / "toy.cfg").string(), out.string());
    const auto t0 = Clock::now();
    bool ran = true;
    for (const char* cmd : {"localize", "geometry", "ov", "qk", "steer", "window", "compose"}) {
        const int code = run_cli(fmt::format("{} {}", cmd, base), out / fmt::format("{}.log", cmd));
        if (code != 0) {
            cr.checks.push_back({cmd, false, fmt::format("exit code {}", code)});
            ran = false;
        }
    }
    const double seconds = since(t0);
    cr.seconds = seconds;
    if (ran) {
        const auto result = [&](const char* cmd) { return read_json(out / fmt::format("{}.json", cmd))["result"]; };
        guarded(cr.checks, "localize", [&](Check& c) {
            const auto ranking = result("localize")["ranking"];
            const std::string top = ranking[0]["label"];
            const double r_top = ranking[0]["R"];
            double others = 0.0;
            for (std::size_t i = 1; i < ranking.size(); ++i)
                others = std::max(others, std::abs(ranking[i]["R"].get<double>()));
            c.ok = top == decision && r_top >= 0.5 && others <= 0.05;
            c.detail = fmt::format("top {} R={:.4f}, max other |R|={:.4g} over {} components", top, r_top, others,
                                   ranking.size());
        });
        guarded(cr.checks, "geometry", [&](Check& c) {
            const auto g = result("geometry");
            const double top3 = g["subspace"]["top3_explained_variance"];
            const double agree = g["jump_flip_agreement"];
            int clusters = 0;
            for (const auto& n : g["subspace"]["counts"]) clusters += n.get<int>() > 0 ? 1 : 0;
            c.ok = top3 >= 0.999 && agree >= 0.95 && clusters == 4;
            c.detail = fmt::format("{} occupied vertices, top-3 variance {:.6f}, jump/flip agreement {:.4f}", clusters,
                                   top3, agree);
        });
        guarded(cr.checks, "ov", [&](Check& c) {
            const auto o = result("ov");
            const double diag = o["diagonal_min"], off = o["off_diagonal_max"];
            c.ok = diag >= 0.99 && off <= 0.0;
            c.detail = fmt::format("alignment diagonal min {:.4f}, off-diagonal max {:.4f}", diag, off);
        });
        guarded(cr.checks, "qk", [&](Check& c) {
            const auto q = result("qk");
            const Vector u_k = vector_from_blob(q["u_k"]);
            const double cos = std::abs(cosine(u_k, routing));
            const double cv = q["cv_mean"];
            c.ok = cos >= 0.99 && cv <= 1e-3;
            c.detail = fmt::format("|cos(u_k, planted)| {:.6f}, validation objective {:.3g}", cos, cv);
        });
        guarded(cr.checks, "steer", [&](Check& c) {
            const auto s = result("steer");
            const double last = s["selection_rate"].back();
            c.ok = s["monotone"].get<bool>() && last == 1.0;
            c.detail = fmt::format("monotone {}, selection rate at alpha={} is {}", s["monotone"].get<bool>(),
                                   s["alphas"].back().get<double>(), last);
        });
        guarded(cr.checks, "window", [&](Check& c) {
            const auto best = result("window")["best_denoise_window"];
            const int start = best["start"], length = best["length"];
            c.ok = start == writer_layer && length == 1;
            c.detail = fmt::format("best denoising window starts at layer {} with length {}", start, length);
        });
        guarded(cr.checks, "compose", [&](Check& c) {
            const auto ranking = result("compose")["ranking"];
            const std::string top = ranking[0]["label"];
            c.ok = top == writer;
            c.detail = fmt::format("top writer {} score {:.4f}", top, ranking[0]["score"].get<double>());
        });
    }
    cr.checks.push_back({"runtime", seconds <= 60.0, fmt::format("{:.2f} s single-threaded (bound 60 s)", seconds)});
    cr.status = summarize(cr.checks);
    fs::remove_all(out);
    return cr;
}

// Numerical properties ----------------------------------------------------------

Criterion numerical_properties() {
    Criterion cr{"numerical property suites"};
    const auto t0 = Clock::now();

    guarded(cr.checks, "svd reconstruction", [](Check& c) {
        std::mt19937_64 rng(1001);
        Worst w;
        for (int i = 0; i < kCases; ++i) {
            const std::size_t m = 1 + rng() % 24, n = 1 + rng() % 24;
            Matrix a = random_matrix(rng, m, n);
            if (i % 4 == 0 && n > 2) a.set_col(n - 1, a.col(0));
            const SvdResult r = svd(a);
            Matrix us = r.u;
            for (std::size_t row = 0; row < us.rows(); ++row)
                for (std::size_t j = 0; j < r.s.size(); ++j) us(row, j) *= r.s[j];
            const double err = frobenius_norm(subtract(matmul_bt(us, r.v), a)) / frobenius_norm(a);
            w.add(err, err <= 1e-4);
        }
        record(c, w, "relative error", 1e-4);
    });

    guarded(cr.checks, "residual additivity", [](Check& c) {
        std::mt19937_64 rng(1002);
        Worst w;
        for (int i = 0; i < kCases; ++i) {
            const auto spec = testing::random_spec(rng);
            const ModelBundle m = testing::random_model(spec, 20000 + i);
            const auto ids = testing::random_tokens(rng, 1 + rng() % 12, m.arch.vocab_size);
            RecordOptions rec;
            rec.head_contrib = rec.mlp_out = true;
            const RunTrace tr = run(m, ids, {}, rec);
            double worst = 0.0;
            for (std::size_t l = 0; l < static_cast<std::size_t>(spec.layers); ++l) {
                Matrix sum = tr.residual[l];
                for (const Matrix& h : tr.head_contrib[l]) sum = add(sum, h);
                sum = add(sum, tr.mlp_out[l]);
                worst = std::max(worst, max_abs_diff(sum, tr.residual[l + 1]) / (1.0 + frobenius_norm(sum)));
            }
            w.add(worst, worst <= 1e-4);
        }
        record(c, w, "relative deviation", 1e-4);
    });

    guarded(cr.checks, "attention rows", [](Check& c) {
        std::mt19937_64 rng(1003);
        Worst w;
        int leaks = 0;
        for (int i = 0; i < kCases; ++i) {
            const auto spec = testing::random_spec(rng);
            const ModelBundle m = testing::random_model(spec, 21000 + i);
            const std::size_t T = 1 + rng() % 12;
            RecordOptions rec;
            rec.attention = true;
            const RunTrace tr = run(m, testing::random_tokens(rng, T, m.arch.vocab_size), {}, rec);
            double worst = 0.0;
            bool causal = true;
            for (const auto& layer : tr.attention)
                for (const Matrix& p : layer)
                    for (std::size_t r = 0; r < T; ++r) {
                        double s = 0.0;
                        for (std::size_t j = 0; j < T; ++j) {
                            if (j > r && p(r, j) != 0.0f) causal = false;
                            s += p(r, j);
                        }
                        worst = std::max(worst, std::abs(s - 1.0));
                    }
            leaks += causal ? 0 : 1;
            w.add(worst, worst <= 1e-5 && causal);
        }
        record(c, w, "|row sum - 1|", 1e-5);
        c.detail += fmt::format(", {} with future mass", leaks);
    });

    guarded(cr.checks, "self-patching identity", [](Check& c) {
        std::mt19937_64 rng(1004);
        std::array<Worst, 3> w;
        for (int i = 0; i < kCases; ++i) {
            const auto spec = testing::random_spec(rng);
            const ModelBundle m = testing::random_model(spec, 22000 + i);
            const std::size_t T = 2 + rng() % 8;
            const auto ids = testing::random_tokens(rng, T, m.arch.vocab_size);
            const RunTrace base = run(m, ids, {}, RecordOptions::all());
            const auto pos = all_positions(T);
            const auto l = static_cast<std::size_t>(rng() % static_cast<std::uint64_t>(spec.layers));
            const auto h = static_cast<std::size_t>(rng() % static_cast<std::uint64_t>(spec.heads));
            const int li = static_cast<int>(l), hi = static_cast<int>(h);
            std::array<OverrideSet, 3> sites;
            sites[0].components.push_back({ComponentId::attention(li, hi), pos, base.head_contrib[l][h]});
            sites[1].components.push_back({ComponentId::mlp(li), pos, base.mlp_out[l]});
            sites[2].patterns.push_back({li, hi, pos, base.attention[l][h]});
            for (std::size_t s = 0; s < 3; ++s) {
                const double d = max_abs_diff(run(m, ids, sites[s]).logits, base.logits);
                w[s].add(d, d <= 1e-5);
            }
        }
        const double worst = std::max({w[0].value, w[1].value, w[2].value});
        c.ok = w[0].failures + w[1].failures + w[2].failures == 0;
        c.detail = fmt::format("{} cases per site, worst logit change head {:.3g}, mlp {:.3g}, pattern {:.3g} "
                               "(bound 1e-05, overall {:.3g})",
                               kCases, w[0].value, w[1].value, w[2].value, worst);
    });

    guarded(cr.checks, "composition score", [](Check& c) {
        std::mt19937_64 rng(1005);
        Worst w;
        int out_of_range = 0;
        for (int i = 0; i < kCases; ++i) {
            const std::size_t m = 1 + rng() % 16, k = 1 + rng() % 16, n = 1 + rng() % 16;
            Matrix a = random_matrix(rng, m, k), b = random_matrix(rng, k, n);
            if (i % 5 == 0) b = matmul(transpose(a), random_matrix(rng, m, n));
            const double s = composition_score(a, b);
            const bool in_range = s >= 0.0 && s <= 1.0;
            out_of_range += in_range ? 0 : 1;
            const double diff = std::abs(s - composition_score_spectral(a, b));
            w.add(diff, diff <= 1e-5 && in_range);
        }
        record(c, w, "formula disagreement", 1e-5);
        c.detail += fmt::format(", {} outside [0,1]", out_of_range);
    });

    guarded(cr.checks, "rank-1 on exact bilinear forms", [](Check& c) {
        std::mt19937_64 rng(1006);
        Worst w;
        for (int i = 0; i < kCases; ++i) {
            const std::size_t d = 3 + rng() % 14;
            const Vector a = random_unit(rng, d), b = random_unit(rng, d);
            const Matrix wqk = scale(outer(a, b), 0.5f + static_cast<float>(rng() % 4));
            const QKDataset ds = random_dataset(rng, d, 12);
            Rank1Options opt;
            opt.seed = static_cast<std::uint64_t>(i);
            opt.folds = 3;
            opt.restarts = 2;
            const RoutingFeature f = fit_rank1_qk(ds, wqk, opt);
            const double worst = std::max(f.train_objective, f.cv_mean);
            w.add(worst, worst <= 1e-8);
        }
        record(c, w, "objective", 1e-8);
    });

    guarded(cr.checks, "rank-1 against a d=3 grid search", [](Check& c) {
        std::mt19937_64 rng(1007);
        Worst w;
        for (int i = 0; i < kCases; ++i) {
            const QKDataset ds = random_dataset(rng, 3, 6);
            const Matrix wqk = random_matrix(rng, 3, 3);
            Rank1Options opt;
            opt.seed = static_cast<std::uint64_t>(i);
            const RoutingFeature f = fit_rank1_qk_once(ds, wqk, opt);
            const auto grid = oracle::grid_minimum(to_grid(ds, wqk, opt.epsilon));
            const double diff = std::abs(f.train_objective - grid.objective);
            w.add(diff, diff <= 2e-3);
        }
        record(c, w, "objective gap", 2e-3);
    });

    guarded(cr.checks, "softmax shift invariance", [](Check& c) {
        std::mt19937_64 rng(1008);
        std::normal_distribution<float> nd(0.0f, 4.0f);
        Worst w;
        for (int i = 0; i < kCases; ++i) {
            Vector logits(8 + rng() % 300);
            // Dyadic logits and integer shifts keep the shifted inputs exact in float.
            for (float& v : logits) v = std::round(nd(rng) * 1024.0f) / 1024.0f;
            std::vector<int> order(logits.size());
            std::iota(order.begin(), order.end(), 0);
            std::shuffle(order.begin(), order.end(), rng);
            const std::array<int, 4> opts = {order[0], order[1], order[2], order[3]};
            Vector shifted = logits;
            const auto shift = static_cast<float>(std::uniform_int_distribution<int>(-500, 500)(rng));
            for (float& v : shifted) v += shift;
            const Readout a = decision_readout(logits, opts), b = decision_readout(shifted, opts);
            double diff = 0.0;
            for (std::size_t k = 0; k < 4; ++k)
                diff = std::max({diff, std::abs(a.p_raw[k] - b.p_raw[k]), std::abs(a.p_renorm[k] - b.p_renorm[k])});
            const Matrix sa = softmax_rows(Matrix(1, logits.size(), logits));
            const Matrix sb = softmax_rows(Matrix(1, shifted.size(), shifted));
            diff = std::max(diff, max_abs_diff(sa, sb));
            w.add(diff, diff <= 1e-6);
        }
        record(c, w, "probability change", 1e-6);
    });

    guarded(cr.checks, "steering at alpha 0", [](Check& c) {
        std::mt19937_64 rng(1009);
        Worst w;
        for (int i = 0; i < kCases; ++i) {
            const auto spec = testing::random_spec(rng);
            const ModelBundle m = testing::random_model(spec, 23000 + i);
            const PromptPair p = synthetic_pair(rng, m.arch.vocab_size);
            const SteeringConfig cfg{random_unit(rng, static_cast<std::size_t>(spec.d_model)), {0.0},
                                     static_cast<int>(rng() % static_cast<std::uint64_t>(spec.layers))};
            const auto pts = steer(m, p, p.clean_ids, cfg, p.target_index);
            const Readout base = decision_readout(run(m, p.clean_ids), p.option_token_ids);
            double diff = 0.0;
            for (std::size_t k = 0; k < 4; ++k) diff = std::max(diff, std::abs(pts[0].readout.p_raw[k] - base.p_raw[k]));
            w.add(diff, diff == 0.0 && pts[0].choice == base.argmax);
        }
        record(c, w, "probability change", 0.0);
    });

    guarded(cr.checks, "sign-flip symmetry", [](Check& c) {
        std::mt19937_64 rng(1010);
        Worst steer_w, factor_w;
        for (int i = 0; i < kCases; ++i) {
            const auto spec = testing::random_spec(rng);
            const ModelBundle m = testing::random_model(spec, 24000 + i);
            const PromptPair p = synthetic_pair(rng, m.arch.vocab_size);
            const Vector dir = random_unit(rng, static_cast<std::size_t>(spec.d_model));
            const int layer = static_cast<int>(rng() % static_cast<std::uint64_t>(spec.layers));
            const SteeringConfig pos{dir, {-2.0, 1.0, 3.0}, layer};
            const SteeringConfig neg{negated(dir), {2.0, -1.0, -3.0}, layer};
            const auto a = steer(m, p, p.clean_ids, pos, p.target_index);
            const auto b = steer(m, p, p.clean_ids, neg, p.target_index);
            double diff = 0.0;
            bool same_choice = true;
            for (std::size_t s = 0; s < a.size(); ++s) {
                same_choice = same_choice && a[s].choice == b[s].choice;
                for (std::size_t k = 0; k < 4; ++k)
                    diff = std::max(diff, std::abs(a[s].readout.p_raw[k] - b[s].readout.p_raw[k]));
            }
            steer_w.add(diff, diff <= 1e-6 && same_choice);

            const std::size_t d = 3 + rng() % 10;
            const QKDataset ds = random_dataset(rng, d, 5);
            const Matrix wqk = random_matrix(rng, d, d);
            const Vector uq = random_unit(rng, d), uk = random_unit(rng, d);
            const double f0 = rank1_objective(ds, wqk, uq, uk, 1e-8);
            double gap = 0.0;
            for (const auto& [q, k] : {std::pair{negated(uq), uk}, std::pair{uq, negated(uk)},
                                       std::pair{negated(uq), negated(uk)}})
                gap = std::max(gap, std::abs(rank1_objective(ds, wqk, q, k, 1e-8) - f0) / (1.0 + f0));
            const RoutingFeature fa{uq, uk}, fb{negated(uq), negated(uk)};
            gap = std::max(gap, max_abs_diff(routing_component(fa, wqk), routing_component(fb, wqk)));
            factor_w.add(gap, gap <= 1e-6);
        }
        c.ok = steer_w.failures == 0 && factor_w.failures == 0;
        c.detail = fmt::format("{} cases, worst steering difference {:.3g}, worst factor difference {:.3g} "
                               "(bound 1e-06), {} failing",
                               kCases, steer_w.value, factor_w.value, steer_w.failures + factor_w.failures);
    });

    cr.seconds = since(t0);
    cr.checks.push_back(
        {"runtime", cr.seconds <= 120.0, fmt::format("{:.2f} s for all property suites (bound 120 s)", cr.seconds)});
    cr.status = summarize(cr.checks);
    return cr;
}

// Prompt construction -----------------------------------------------------------

std::string decode_span(const Tokenizer& tok, const std::vector<int>& ids, const TokenSpan& s) {
    return tok.decode(std::span<const int>(ids).subspan(s.begin, s.size()));
}

// A span covers a field when it decodes to it, possibly with the one leading
// separator the tokenizer merges into the first word.
bool covers(const std::string& decoded, const std::string& field) {
    if (decoded == field) return true;
    return decoded.size() == field.size() + 1 && (decoded[0] == ' ' || decoded[0] == '\n') &&
           decoded.compare(1, std::string::npos, field) == 0;
}

int argmax_prefix(const Vector& logits, std::size_t n) {
    return static_cast<int>(std::max_element(logits.begin(), logits.begin() + static_cast<std::ptrdiff_t>(n)) -
                            logits.begin());
}

Criterion prompt_construction() {
    Criterion cr{"prompt construction"};
    const auto t0 = Clock::now();
    constexpr int kExamples = 1000;
    Tokenizer tok = testing::byte_tokenizer();
    const int pad = tok.add_special("<|pad|>");

    guarded(cr.checks, "length matching", [&](Check& c) {
        std::mt19937_64 rng(2001);
        int bad = 0;
        for (int i = 0; i < kExamples; ++i) {
            const PromptTemplate tpl = PromptTemplate::builtin(i % 2 ? "farm" : "toy");
            const QAExample ex = testing::random_qa_example(rng, "q" + std::to_string(i));
            const PromptPair p = build_pair(ex, tok, seeded_permutation(5, static_cast<std::size_t>(i)), tpl, pad, 5);
            bool ok = p.clean_ids.size() == p.persuasive_ids.size();
            if (p.has_corrupted()) ok = ok && p.corrupted_ids.size() == p.persuasive_ids.size();
            const GeoExample gx = testing::random_geo_example(rng, "g" + std::to_string(i));
            const PromptPair g = build_geo_pair(gx, tok, PromptTemplate::builtin("geo"), pad);
            ok = ok && g.clean_ids.size() == g.persuasive_ids.size();
            bad += ok ? 0 : 1;
        }
        c.ok = bad == 0;
        c.detail = fmt::format("{} question and {} source-selection examples, {} mismatched", kExamples, kExamples, bad);
    });

    guarded(cr.checks, "span round trip", [&](Check& c) {
        std::mt19937_64 rng(2002);
        int bad = 0;
        for (int i = 0; i < kExamples; ++i) {
            const PromptTemplate tpl = PromptTemplate::builtin(i % 2 ? "farm" : "toy");
            const QAExample ex = testing::random_qa_example(rng, "q" + std::to_string(i));
            const Permutation perm = seeded_permutation(7, static_cast<std::size_t>(i));
            const PromptPair p = build_pair(ex, tok, perm, tpl, pad, 7);
            const QAExample shown = apply_permutation(ex, perm);
            bool ok = covers(decode_span(tok, p.persuasive_ids, p.spans.context), shown.persuasion_text) &&
                      covers(decode_span(tok, p.persuasive_ids, p.spans.question), shown.question) &&
                      tok.decode(p.persuasive_ids) == p.rendered;
            for (std::size_t k = 0; k < 4; ++k)
                ok = ok && covers(decode_span(tok, p.persuasive_ids, p.spans.options[k]), shown.options[k]);
            for (std::size_t t = 0; t < p.length(); ++t)
                ok = ok && (p.spans.context.contains(t) ? p.clean_ids[t] == pad : p.clean_ids[t] == p.persuasive_ids[t]);
            bad += ok ? 0 : 1;
        }
        c.ok = bad == 0;
        c.detail = fmt::format("{} examples, {} with a span that does not decode to its field", kExamples, bad);
    });

    guarded(cr.checks, "permutation bookkeeping", [&](Check& c) {
        std::mt19937_64 rng(2003);
        int bad = 0;
        for (int i = 0; i < kExamples; ++i) {
            const Permutation p = seeded_permutation(rng(), static_cast<std::size_t>(i));
            const QAExample ex = testing::random_qa_example(rng, "p");
            const QAExample shown = apply_permutation(ex, p);
            const QAExample back = apply_permutation(shown, inverse_permutation(p));
            const bool ok = is_permutation(p) && inverse_permutation(inverse_permutation(p)) == p &&
                            back.options == ex.options && back.correct_index == ex.correct_index &&
                            back.target_index == ex.target_index &&
                            shown.options[static_cast<std::size_t>(shown.correct_index)] ==
                                ex.options[static_cast<std::size_t>(ex.correct_index)];
            bad += ok ? 0 : 1;
        }
        c.ok = bad == 0;
        c.detail = fmt::format("{} permutations, {} not involutive", kExamples, bad);
    });

    guarded(cr.checks, "pad expansion", [&](Check& c) {
        int prompts = 0, changed = 0;
        const auto compare = [&](const ModelBundle& ref, const ModelBundle& expanded, const std::vector<int>& ids,
                                 const std::array<int, 4>& opts) {
            const RunTrace a = run(ref, ids), b = run(expanded, ids);
            const auto v = static_cast<std::size_t>(ref.arch.vocab_size);
            const bool same = greedy_decode(ref, ids, 1).back() == greedy_decode(expanded, ids, 1).back() &&
                              argmax_prefix(a.logits, v) == argmax_prefix(b.logits, v) &&
                              decision_readout(a, opts).argmax == decision_readout(b, opts).argmax;
            ++prompts;
            changed += same ? 0 : 1;
        };
        const ModelBundle toy = load_model(testing::fixture_dir() / "model");
        const PromptTemplate tpl = PromptTemplate::load(testing::fixture_dir() / "template.json");
        const ModelBundle toy_padded = expand_vocab_with_pad(toy);
        for (const QAExample& ex : load_qa_corpus(testing::fixture_dir() / "corpus.jsonl")) {
            const PromptPair p =
                build_pair(ex, toy_padded.tokenizer, identity_permutation(), tpl, toy_padded.arch.pad_token_id);
            compare(toy, toy_padded, p.persuasive_ids, p.option_token_ids);
        }
        std::mt19937_64 rng(2004);
        for (int i = 0; i < 40; ++i) {
            auto spec = testing::random_spec(rng);
            spec.max_positions = 1024;
            const ModelBundle m = testing::random_model(spec, 25000 + i);
            const PromptPair p =
                build_pair(testing::random_qa_example(rng, "r"), tok, identity_permutation(),
                           PromptTemplate::builtin("toy"), pad);
            compare(m, expand_vocab_with_pad(m), p.persuasive_ids, p.option_token_ids);
        }
        c.ok = changed == 0;
        c.detail = fmt::format("{} prompts on the planted fixture and random models, {} with a changed choice",
                               prompts, changed);
    });

    cr.seconds = since(t0);
    cr.status = summarize(cr.checks);
    return cr;
}

// Real model --------------------------------------------------------------------

Criterion real_model_smoke() {
    Criterion cr{"GPT-2 small smoke test"};
    const char* dir_env = std::getenv("PERTRACE_GPT2_DIR");
    if (!dir_env || !*dir_env) {
        cr.status = Status::skip;
        cr.note = "set PERTRACE_GPT2_DIR to an exported GPT-2 small checkpoint with reference_transcript.json";
        return cr;
    }
    const fs::path dir = dir_env;
    const fs::path transcript = dir / "reference_transcript.json";
    if (!fs::exists(dir / "config.json") || !fs::exists(transcript)) {
        cr.status = Status::skip;
        cr.note = fmt::format("{} lacks config.json or reference_transcript.json", dir.string());
        return cr;
    }
    const auto t0 = Clock::now();
    std::optional<ModelBundle> model;
    guarded(cr.checks, "load", [&](Check& c) {
        model = load_model(dir);
        c.detail = fmt::format("{} layers, {} heads, vocab {}", model->arch.n_layers, model->arch.n_heads,
                               model->arch.vocab_size);
    });
    if (model) {
        guarded(cr.checks, "greedy transcript", [&](Check& c) {
            const auto ref = read_json(transcript);
            const auto prompt = ref["prompt_ids"].get<std::vector<int>>();
            const auto expected = ref["generated_ids"].get<std::vector<int>>();
            const auto got = greedy_decode(*model, prompt, static_cast<int>(expected.size()));
            const std::vector<int> tail(got.begin() + static_cast<std::ptrdiff_t>(prompt.size()), got.end());
            c.ok = prompt.size() == 16 && tail == expected;
            c.detail = fmt::format("{} prompt tokens, {} of {} generated tokens match", prompt.size(),
                                   std::inner_product(tail.begin(), tail.end(), expected.begin(), 0, std::plus<>(),
                                                      [](int a, int b) { return a == b ? 1 : 0; }),
                                   expected.size());
        });
        guarded(cr.checks, "full head sweep", [&](Check& c) {
            const ModelBundle padded = expand_vocab_with_pad(*model);
            std::mt19937_64 rng(3001);
            std::vector<PromptPair> pairs;
            for (int i = 0; i < 10; ++i)
                pairs.push_back(build_pair(testing::random_qa_example(rng, "s" + std::to_string(i)), padded.tokenizer,
                                           identity_permutation(), PromptTemplate::builtin("farm"),
                                           padded.arch.pad_token_id));
            const auto heads = all_components(padded.arch, false);
            const auto s0 = Clock::now();
            const RestorationReport rep = restoration_sweep(padded, pairs, heads);
            const double secs = since(s0);
            c.ok = rep.entries.size() == heads.size() && secs <= 600.0;
            c.detail = fmt::format("{} heads over {} examples in {:.1f} s (bound 600 s)", rep.entries.size(),
                                   pairs.size(), secs);
        });
    }
    cr.seconds = since(t0);
    cr.status = summarize(cr.checks);
    return cr;
}

const char* label(Status s) {
    switch (s) {
    case Status::pass: return "PASS";
    case Status::fail: return "FAIL";
    case Status::skip: return "SKIP";
    }
    return "?";
}

} // namespace

int main() {
    const std::vector<std::function<Criterion()>> suites = {planted_end_to_end, numerical_properties,
                                                             prompt_construction, real_model_smoke};
    bool failed = false;
    for (const auto& suite : suites) {
        Criterion cr;
        try {
            cr = suite();
        } catch (const std::exception& e) {
            cr.status = Status::fail;
            cr.note = fmt::format("threw: {}", e.what());
        }
        fmt::print("{} {}", label(cr.status), cr.name);
        if (cr.status != Status::skip) fmt::print(" ({:.2f} s)", cr.seconds);
        fmt::print("\n");
        if (!cr.note.empty()) fmt::print("    {}\n", cr.note);
        for (const auto& c : cr.checks) fmt::print("    [{}] {}: {}\n", c.ok ? "ok" : "FAILED", c.name, c.detail);
        std::fflush(stdout);
        failed = failed || cr.status == Status::fail;
    }
    return failed ? 1 : 0;
}
