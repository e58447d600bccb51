#include "pertrace/interventions.hpp"

#include "pertrace/errors.hpp"
#include "pertrace/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <fmt/core.h>

namespace pertrace {

std::vector<ComponentId> all_components(const ArchDescriptor& arch, bool include_mlp) {
    std::vector<ComponentId> out;
    for (int l = 0; l < arch.n_layers; ++l)
        for (int h = 0; h < arch.n_heads; ++h) out.push_back(ComponentId::attention(l, h));
    if (include_mlp)
        for (int l = 0; l < arch.n_layers; ++l) out.push_back(ComponentId::mlp(l));
    return out;
}

PatchPositions parse_patch_positions(const std::string& text) {
    if (text == "all") return PatchPositions::all;
    if (text == "final") return PatchPositions::final;
    throw ConfigError(fmt::format("patch positions must be 'all' or 'final', got '{}'", text));
}

const char* to_string(PatchPositions p) { return p == PatchPositions::all ? "all" : "final"; }

namespace {

double prob(const Readout& r, int option, bool renorm) {
    const auto k = static_cast<std::size_t>(option);
    return renorm ? r.p_renorm[k] : r.p_raw[k];
}

void check_pair(const PromptPair& p, std::size_t index) {
    if (p.clean_ids.size() != p.persuasive_ids.size())
        throw DataError(fmt::format("pair {} ({}): clean and persuasive prompts differ in length ({} vs {})", index,
                                    p.id, p.clean_ids.size(), p.persuasive_ids.size()));
    if (p.correct_index < 0 || p.correct_index > 3 || p.target_index < 0 || p.target_index > 3)
        throw DataError(fmt::format("pair {} ({}): missing correct or target option", index, p.id));
}

std::vector<std::size_t> iota_positions(std::size_t n) {
    std::vector<std::size_t> v(n);
    std::iota(v.begin(), v.end(), std::size_t{0});
    return v;
}

Matrix gather_rows(const Matrix& src, const std::vector<std::size_t>& positions) {
    Matrix out(positions.size(), src.cols());
    for (std::size_t i = 0; i < positions.size(); ++i) {
        auto s = src.row(positions[i]);
        std::copy(s.begin(), s.end(), out.row(i).begin());
    }
    return out;
}

const Matrix& contribution(const RunTrace& tr, const ComponentId& c) {
    const auto l = static_cast<std::size_t>(c.layer);
    return c.is_head() ? tr.head_contrib[l][static_cast<std::size_t>(c.head)] : tr.mlp_out[l];
}

} // namespace

std::vector<RestorationEntry> RestorationReport::ranked() const {
    std::vector<RestorationEntry> out = entries;
    std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.mean > b.mean; });
    return out;
}

RestorationReport restoration_sweep(const ModelBundle& model, const std::vector<PromptPair>& pairs,
                                    const std::vector<ComponentId>& components, PatchPositions positions,
                                    bool renormalized, int jobs) {
    for (std::size_t i = 0; i < pairs.size(); ++i) check_pair(pairs[i], i);
    for (const auto& c : components)
        if (c.layer < 0 || c.layer >= model.arch.n_layers || (c.is_head() && (c.head < 0 || c.head >= model.arch.n_heads)))
            throw ConfigError(fmt::format("component {} outside the architecture", c.label()));

    RestorationReport rep;
    rep.positions = positions;
    rep.renormalized = renormalized;
    rep.entries.resize(components.size());
    for (std::size_t c = 0; c < components.size(); ++c) {
        rep.entries[c].id = components[c];
        rep.entries[c].delta_correct.resize(pairs.size());
        rep.entries[c].delta_target.resize(pairs.size());
    }
    RecordOptions rec;
    rec.head_contrib = true;
    rec.mlp_out = true;

    for (std::size_t e = 0; e < pairs.size(); ++e) {
        const PromptPair& p = pairs[e];
        const RunTrace clean = run(model, p.clean_ids, {}, rec);
        const RunTrace pers = run(model, p.persuasive_ids);
        const Readout base = decision_readout(pers, p.option_token_ids);
        const Readout cr = decision_readout(clean, p.option_token_ids);
        rep.example_ids.push_back(p.id);
        rep.baseline_correct.push_back(prob(base, p.correct_index, renormalized));
        rep.clean_correct.push_back(prob(cr, p.correct_index, renormalized));
        const auto pos = positions == PatchPositions::all ? iota_positions(p.length())
                                                          : std::vector<std::size_t>{p.length() - 1};
        parallel_for(components.size(), jobs, [&](std::size_t c) {
            const ComponentId& id = components[c];
            OverrideSet o;
            o.components.push_back({id, pos, gather_rows(contribution(clean, id), pos)});
            const RunTrace patched = resume(model, pers, id.layer, o);
            const Readout r = decision_readout(patched, p.option_token_ids);
            rep.entries[c].delta_correct[e] =
                prob(r, p.correct_index, renormalized) - prob(base, p.correct_index, renormalized);
            rep.entries[c].delta_target[e] = prob(r, p.target_index, renormalized) - prob(base, p.target_index, renormalized);
        });
    }
    for (auto& en : rep.entries) {
        if (pairs.empty()) continue;
        en.mean = std::accumulate(en.delta_correct.begin(), en.delta_correct.end(), 0.0) / static_cast<double>(pairs.size());
        en.mean_target =
            std::accumulate(en.delta_target.begin(), en.delta_target.end(), 0.0) / static_cast<double>(pairs.size());
    }
    return rep;
}

PatternPatchResult attention_pattern_patch(const ModelBundle& model, const PromptPair& pair, int layer, int head) {
    check_pair(pair, 0);
    if (layer < 0 || layer >= model.arch.n_layers || head < 0 || head >= model.arch.n_heads)
        throw ConfigError(fmt::format("head L{}H{} outside the architecture", layer, head));
    RecordOptions rec;
    rec.attention = true;
    rec.head_contrib = true;
    const RunTrace clean = run(model, pair.clean_ids, {}, rec);
    const RunTrace pers = run(model, pair.persuasive_ids);
    const Readout base = decision_readout(pers, pair.option_token_ids);
    const auto pos = iota_positions(pair.length());
    const auto l = static_cast<std::size_t>(layer);
    const auto h = static_cast<std::size_t>(head);

    OverrideSet po;
    po.patterns.push_back({layer, head, pos, clean.attention[l][h]});
    const Readout pr = decision_readout(resume(model, pers, layer, po), pair.option_token_ids);

    OverrideSet fo;
    fo.components.push_back({ComponentId::attention(layer, head), pos, clean.head_contrib[l][h]});
    const Readout fr = decision_readout(resume(model, pers, layer, fo), pair.option_token_ids);

    PatternPatchResult out;
    out.patched_choice = pr.argmax;
    out.full_choice = fr.argmax;
    out.repaired = pr.argmax == pair.correct_index;
    out.full_repaired = fr.argmax == pair.correct_index;
    const auto c = static_cast<std::size_t>(pair.correct_index);
    const auto t = static_cast<std::size_t>(pair.target_index);
    out.delta_target = pr.p_raw[t] - base.p_raw[t];
    out.delta_correct = pr.p_raw[c] - base.p_raw[c];
    return out;
}

PatternPatchSummary attention_pattern_study(const ModelBundle& model, const std::vector<PromptPair>& pairs, int layer,
                                            int head, int jobs) {
    std::vector<int> flipped(pairs.size(), 0);
    parallel_for(pairs.size(), jobs, [&](std::size_t i) {
        check_pair(pairs[i], i);
        const RunTrace pers = run(model, pairs[i].persuasive_ids);
        flipped[i] = decision_readout(pers, pairs[i].option_token_ids).argmax == pairs[i].target_index;
    });
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < pairs.size(); ++i)
        if (flipped[i]) idx.push_back(i);
    PatternPatchSummary s;
    s.n_pairs = pairs.size();
    s.results.resize(idx.size());
    parallel_for(idx.size(), jobs, [&](std::size_t k) {
        s.results[k] = attention_pattern_patch(model, pairs[idx[k]], layer, head);
    });
    std::size_t rp = 0, rf = 0;
    for (std::size_t k = 0; k < idx.size(); ++k) {
        s.example_ids.push_back(pairs[idx[k]].id);
        rp += s.results[k].repaired;
        rf += s.results[k].full_repaired;
    }
    if (!idx.empty()) {
        s.pattern_repair_rate = static_cast<double>(rp) / static_cast<double>(idx.size());
        s.full_repair_rate = static_cast<double>(rf) / static_cast<double>(idx.size());
    }
    return s;
}

std::vector<double> SteeringConfig::default_alphas() {
    std::vector<double> a(21);
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = -6.0 + 0.6 * static_cast<double>(i);
    return a;
}

std::vector<SteeringPoint> steer(const ModelBundle& model, const PromptPair& pair, std::span<const int> prompt_ids,
                                 const SteeringConfig& config, int target_option) {
    const auto d = static_cast<std::size_t>(model.arch.d_model);
    if (config.direction.size() != d)
        throw ConfigError(fmt::format("steering direction has {} entries, model width is {}", config.direction.size(), d));
    const double n = norm(config.direction);
    if (std::abs(n - 1.0) > 1e-6) throw ConfigError(fmt::format("steering direction norm {} is not 1", n));
    if (config.decision_layer < 0 || config.decision_layer >= model.arch.n_layers)
        throw ConfigError(fmt::format("decision layer {} outside the architecture", config.decision_layer));
    if (target_option < 0 || target_option > 3) throw ConfigError("steering target must be an option index 0..3");
    if (prompt_ids.size() != pair.length()) throw DataError(fmt::format("pair {}: prompt length mismatch", pair.id));
    const TokenSpan span = pair.spans.options[static_cast<std::size_t>(target_option)];
    if (span.empty()) throw DataError(fmt::format("pair {}: option {} has no tokens", pair.id, target_option + 1));
    if (span.contains(pair.spans.answer_slot))
        throw ConfigError(fmt::format("pair {}: steering span overlaps the answer slot", pair.id));

    std::vector<std::size_t> pos(span.size());
    std::iota(pos.begin(), pos.end(), span.begin);
    const RunTrace base = run(model, prompt_ids);
    std::vector<SteeringPoint> out;
    for (double alpha : config.alphas) {
        SteeringPoint sp;
        sp.alpha = alpha;
        if (alpha == 0.0) {
            sp.readout = decision_readout(base, pair.option_token_ids);
        } else {
            Matrix delta(pos.size(), d);
            for (std::size_t i = 0; i < pos.size(); ++i)
                for (std::size_t c = 0; c < d; ++c)
                    delta(i, c) = static_cast<float>(alpha * static_cast<double>(config.direction[c]));
            OverrideSet o;
            o.deltas.push_back({config.decision_layer, pos, std::move(delta)});
            sp.readout = decision_readout(resume(model, base, config.decision_layer, o), pair.option_token_ids);
        }
        sp.choice = sp.readout.argmax;
        out.push_back(sp);
    }
    return out;
}

bool SteeringReport::monotone() const {
    for (std::size_t i = 1; i < selection_rate.size(); ++i)
        if (selection_rate[i] + 1e-12 < selection_rate[i - 1]) return false;
    return true;
}

SteeringReport steering_sweep(const ModelBundle& model, const std::vector<PromptPair>& pairs,
                              const SteeringConfig& config, int jobs) {
    std::vector<double> alphas = config.alphas;
    if (!std::is_sorted(alphas.begin(), alphas.end())) throw ConfigError("alpha grid must be ascending");
    SteeringReport rep;
    rep.alphas = alphas;
    for (const auto& p : pairs) {
        if (p.correct_index < 0) throw DataError(fmt::format("pair {}: no reference answer to steer away from", p.id));
        for (int t = 0; t < 4; ++t)
            if (t != p.correct_index) rep.rows.push_back({p.id, t, {}});
    }
    std::vector<std::vector<SteeringPoint>> points(rep.rows.size());
    std::size_t row = 0;
    std::vector<std::pair<std::size_t, int>> work;
    for (std::size_t i = 0; i < pairs.size(); ++i)
        for (int t = 0; t < 4; ++t)
            if (t != pairs[i].correct_index) work.emplace_back(i, t);
    parallel_for(work.size(), jobs, [&](std::size_t w) {
        const auto& [i, t] = work[w];
        points[w] = steer(model, pairs[i], pairs[i].clean_ids, config, t);
    });
    rep.trials = work.size();
    rep.selection_rate.assign(alphas.size(), 0.0);
    rep.mean_p_target.assign(alphas.size(), 0.0);
    for (row = 0; row < work.size(); ++row) {
        const int t = work[row].second;
        for (std::size_t a = 0; a < alphas.size(); ++a) {
            const auto& pt = points[row][a];
            rep.rows[row].choices.push_back(pt.choice);
            rep.selection_rate[a] += pt.choice == t;
            rep.mean_p_target[a] += pt.readout.p_renorm[static_cast<std::size_t>(t)];
        }
    }
    if (rep.trials > 0)
        for (std::size_t a = 0; a < alphas.size(); ++a) {
            rep.selection_rate[a] /= static_cast<double>(rep.trials);
            rep.mean_p_target[a] /= static_cast<double>(rep.trials);
        }
    return rep;
}

std::vector<LayerWindow> all_windows(int n_layers) {
    std::vector<LayerWindow> out{{0, 0}};
    for (int len = 1; len <= n_layers; ++len)
        for (int s = 0; s + len <= n_layers; ++s) out.push_back({s, len});
    return out;
}

std::vector<LayerWindow> parse_windows(const std::string& text, int n_layers) {
    if (text.empty() || text == "all") return all_windows(n_layers);
    std::vector<LayerWindow> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto colon = item.find(':');
        if (colon == std::string::npos) throw ConfigError(fmt::format("window '{}' must be start:length", item));
        LayerWindow w;
        try {
            w.start = std::stoi(item.substr(0, colon));
            w.length = std::stoi(item.substr(colon + 1));
        } catch (const std::exception&) {
            throw ConfigError(fmt::format("window '{}' must be start:length", item));
        }
        if (w.start < 0 || w.length < 0 || w.start + w.length > n_layers)
            throw ConfigError(fmt::format("window {}:{} outside layers 0..{}", w.start, w.length, n_layers - 1));
        out.push_back(w);
    }
    return out;
}

WindowPatchReport window_patch(const ModelBundle& model, const std::vector<PromptPair>& pairs,
                               const std::vector<LayerWindow>& windows, int jobs) {
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        check_pair(pairs[i], i);
        if (!pairs[i].has_corrupted() || pairs[i].keyword_tokens.empty())
            throw DataError(fmt::format("pair {} ({}): keyword spans missing, no corrupted prompt", i, pairs[i].id));
        if (pairs[i].corrupted_ids.size() != pairs[i].persuasive_ids.size())
            throw DataError(fmt::format("pair {} ({}): corrupted prompt length differs", i, pairs[i].id));
    }
    for (const auto& w : windows)
        if (w.start < 0 || w.length < 0 || w.start + w.length > model.arch.n_layers)
            throw ConfigError(fmt::format("window {}:{} outside the architecture", w.start, w.length));

    const std::size_t N = pairs.size();
    const std::size_t W = windows.size();
    std::vector<int> pers_choice(N), corr_choice(N);
    std::vector<std::vector<int>> den(W, std::vector<int>(N)), noi(W, std::vector<int>(N));
    RecordOptions rec;
    rec.head_contrib = true;

    for (std::size_t e = 0; e < N; ++e) {
        const PromptPair& p = pairs[e];
        const RunTrace pers = run(model, p.persuasive_ids, {}, rec);
        const RunTrace corr = run(model, p.corrupted_ids, {}, rec);
        pers_choice[e] = decision_readout(pers, p.option_token_ids).argmax;
        corr_choice[e] = decision_readout(corr, p.option_token_ids).argmax;
        const auto field = p.spans.option_field();
        auto patched = [&](const RunTrace& into, const RunTrace& from, const LayerWindow& w) {
            OverrideSet o;
            for (int l = w.start; l < w.start + w.length; ++l)
                for (int h = 0; h < model.arch.n_heads; ++h) {
                    const auto& src = from.head_contrib[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)];
                    o.components.push_back({ComponentId::attention(l, h), field, gather_rows(src, field)});
                }
            return decision_readout(resume(model, into, w.start, o), p.option_token_ids).argmax;
        };
        parallel_for(W, jobs, [&](std::size_t w) {
            if (windows[w].length == 0) {
                den[w][e] = pers_choice[e];
                noi[w][e] = corr_choice[e];
                return;
            }
            den[w][e] = patched(pers, corr, windows[w]);
            noi[w][e] = patched(corr, pers, windows[w]);
        });
    }

    auto frac = [&](const std::vector<int>& choices, bool target) {
        if (N == 0) return 0.0;
        std::size_t k = 0;
        for (std::size_t e = 0; e < N; ++e)
            k += choices[e] == (target ? pairs[e].target_index : pairs[e].correct_index);
        return static_cast<double>(k) / static_cast<double>(N);
    };
    WindowPatchReport rep;
    for (const auto& p : pairs) rep.example_ids.push_back(p.id);
    rep.persuasive_robustness = frac(pers_choice, false);
    rep.corrupted_robustness = frac(corr_choice, false);
    rep.persuasive_success = frac(pers_choice, true);
    rep.corrupted_success = frac(corr_choice, true);
    for (std::size_t w = 0; w < W; ++w) {
        WindowEntry en;
        en.window = windows[w];
        en.denoise_robustness = frac(den[w], false);
        en.denoise_delta = en.denoise_robustness - rep.persuasive_robustness;
        en.noise_robustness = frac(noi[w], false);
        en.noise_delta = en.noise_robustness - rep.corrupted_robustness;
        en.noise_success_delta = frac(noi[w], true) - rep.corrupted_success;
        rep.entries.push_back(en);
    }
    const WindowEntry* best = nullptr;
    for (const auto& en : rep.entries) {
        if (en.window.length == 0) continue;
        if (!best || en.denoise_delta > best->denoise_delta + 1e-12 ||
            (std::abs(en.denoise_delta - best->denoise_delta) <= 1e-12 &&
             (en.window.length < best->window.length ||
              (en.window.length == best->window.length && en.window.start < best->window.start))))
            best = &en;
    }
    if (best && best->denoise_delta > 0.0) rep.best_denoise = best->window;
    return rep;
}

} // namespace pertrace
