#include "commands.hpp"

#include "pertrace/circuits.hpp"
#include "pertrace/errors.hpp"
#include "pertrace/hash.hpp"
#include "pertrace/interventions.hpp"
#include "pertrace/model.hpp"
#include "pertrace/prompts.hpp"
#include "pertrace/report.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <fmt/core.h>

namespace pertrace::cli {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

struct Options {
    std::string command;
    std::string model;
    std::string corpus;
    std::string out = ".";
    std::string family;
    std::string template_name = "farm";
    bool shuffle_options = false;
    std::uint64_t seed = 0;
    int jobs = 1;
    std::string format = "both";
    bool strict = false;
    std::string head;
    std::string components = "all";
    std::string positions = "all";
    bool renormalize = false;
    bool pattern_patch = false;
    double mass = 0.9;
    std::string alphas = "default";
    int folds = 10;
    double epsilon = 1e-8;
    int restarts = 8;
    int max_iter = 500;
    std::string windows = "all";
};

// Every knob that can change an output, one key=value per line.
std::string resolved_config(const Options& o) {
    std::string s;
    auto add = [&](const char* key, const auto& value) { s += fmt::format("{}={}\n", key, value); };
    add("model", o.model);
    add("family", o.family.empty() ? "auto" : o.family);
    add("corpus", o.corpus);
    add("out", o.out);
    add("template", o.template_name);
    add("shuffle_options", o.shuffle_options);
    add("seed", o.seed);
    add("jobs", o.jobs);
    add("format", o.format);
    add("strict", o.strict);
    add("head", o.head.empty() ? "auto" : o.head);
    add("components", o.components);
    add("positions", o.positions);
    add("renormalize", o.renormalize);
    add("pattern_patch", o.pattern_patch);
    add("mass", num(o.mass));
    add("alphas", o.alphas);
    add("folds", o.folds);
    add("epsilon", num(o.epsilon));
    add("restarts", o.restarts);
    add("max_iter", o.max_iter);
    add("windows", o.windows);
    return s;
}

double parse_number(const std::string& text, const char* what) {
    try {
        std::size_t used = 0;
        const double v = std::stod(text, &used);
        if (used != text.size() || !std::isfinite(v)) throw std::invalid_argument(text);
        return v;
    } catch (const std::exception&) {
        throw ConfigError(fmt::format("{}: '{}' is not a number", what, text));
    }
}

// "default", "a..b", "a..b:step" or a comma list.
std::vector<double> parse_alphas(const std::string& text) {
    if (text == "default") return SteeringConfig::default_alphas();
    if (const auto dots = text.find(".."); dots != std::string::npos) {
        const auto colon = text.find(':', dots);
        const double a = parse_number(text.substr(0, dots), "alphas");
        const auto len = colon == std::string::npos ? std::string::npos : colon - dots - 2;
        const double b = parse_number(text.substr(dots + 2, len), "alphas");
        const double step = colon == std::string::npos ? 1.0 : parse_number(text.substr(colon + 1), "alphas");
        if (!(step > 0.0) || b < a) throw ConfigError(fmt::format("alphas: '{}' is not an increasing range", text));
        const auto n = static_cast<std::size_t>(std::floor((b - a) / step + 1e-9)) + 1;
        std::vector<double> out(n);
        for (std::size_t i = 0; i < n; ++i) out[i] = a + step * static_cast<double>(i);
        return out;
    }
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_number(item, "alphas"));
    if (out.empty()) throw ConfigError("alphas: empty grid");
    return out;
}

// "L:H" or "L<l>H<h>".
ComponentId parse_head(const std::string& text, const ArchDescriptor& arch) {
    ComponentId id;
    if (const auto colon = text.find(':'); colon != std::string::npos) {
        try {
            id = ComponentId::attention(std::stoi(text.substr(0, colon)), std::stoi(text.substr(colon + 1)));
        } catch (const std::exception&) {
            throw ConfigError(fmt::format("head '{}' must be L:H", text));
        }
    } else {
        id = ComponentId::parse(text);
    }
    if (!id.is_head()) throw ConfigError(fmt::format("'{}' is not an attention head", text));
    if (id.layer < 0 || id.layer >= arch.n_layers || id.head < 0 || id.head >= arch.n_heads)
        throw ConfigError(fmt::format("head {} is outside the model ({} layers, {} heads)", id.label(), arch.n_layers,
                                      arch.n_heads));
    return id;
}

std::vector<ComponentId> parse_components(const std::string& text, const ArchDescriptor& arch) {
    if (text == "all") return all_components(arch, true);
    if (text == "heads") return all_components(arch, false);
    std::vector<ComponentId> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const ComponentId id = ComponentId::parse(item);
        if (id.layer < 0 || id.layer >= arch.n_layers || (id.is_head() && (id.head < 0 || id.head >= arch.n_heads)))
            throw ConfigError(fmt::format("component {} is outside the model", item));
        out.push_back(id);
    }
    if (out.empty()) throw ConfigError("component list is empty");
    return out;
}

class Session {
public:
    explicit Session(const Options& o) : opt_(o), out_dir_(o.out) {
        if (!fs::is_directory(o.model)) throw ConfigError(fmt::format("model directory {} does not exist", o.model));
        if (!fs::is_regular_file(o.corpus)) throw ConfigError(fmt::format("corpus {} does not exist", o.corpus));
        if (opt_.jobs < 0) throw ConfigError("--jobs must be non-negative");

        ModelBundle loaded = load_model(o.model);
        checksum_ = loaded.checksum;
        if (!o.family.empty() && o.family != family_name(loaded.arch.family))
            throw ConfigError(fmt::format("--family {} does not match the checkpoint ({})", o.family,
                                          family_name(loaded.arch.family)));
        if (!loaded.arch.pad_token_id) {
            model_ = expand_vocab_with_pad(loaded);
            fmt::print(stderr, "note: added pad token {} (mean embedding)\n", *model_.arch.pad_token_id);
        } else {
            model_ = std::move(loaded);
        }

        tpl_ = fs::is_regular_file(o.template_name) ? PromptTemplate::load(o.template_name)
                                                     : PromptTemplate::builtin(o.template_name);
        geo_ = tpl_.body.find("{query}") != std::string::npos;
        if (geo_) {
            geo_examples_ = load_geo_corpus(o.corpus);
            for (const auto& ex : geo_examples_)
                all_pairs_.push_back(build_geo_pair(ex, model_.tokenizer, tpl_, model_.arch.pad_token_id));
        } else {
            qa_examples_ = load_qa_corpus(o.corpus);
            for (std::size_t i = 0; i < qa_examples_.size(); ++i) {
                const Permutation perm =
                    o.shuffle_options ? seeded_permutation(o.seed, i) : identity_permutation();
                all_pairs_.push_back(
                    build_pair(qa_examples_[i], model_.tokenizer, perm, tpl_, model_.arch.pad_token_id, o.seed));
            }
        }

        meta_.command = o.command;
        meta_.config = resolved_config(o);
        meta_.config_hash = hex64(fnv1a64(meta_.config));
        meta_.seed = o.seed;
        meta_.model_checksum = checksum_;
        meta_.generated_at = utc_timestamp();
        fs::create_directories(out_dir_);
    }

    const Options& options() const { return opt_; }
    const ModelBundle& model() const { return model_; }
    const PromptTemplate& prompt_template() const { return tpl_; }
    bool source_selection() const { return geo_; }
    const std::vector<QAExample>& qa_examples() const { return qa_examples_; }
    const std::vector<PromptPair>& all_pairs() const { return all_pairs_; }
    const RunMetadata& metadata() const { return meta_; }

    /// Pairs the model answers correctly without persuasion.
    const std::vector<PromptPair>& pairs() {
        if (!filtered_) {
            filtered_ = filter_clean_correct(model_, all_pairs_, opt_.jobs);
            if (filtered_->empty()) throw DataError("no examples after filtering");
            fmt::print(stderr, "{} of {} examples kept after clean-correct filtering\n", filtered_->size(),
                       all_pairs_.size());
        }
        return *filtered_;
    }

    bool want_json() const { return opt_.format != "csv"; }
    bool want_csv() const { return opt_.format != "json"; }
    fs::path path(const std::string& file) const { return out_dir_ / file; }

    void emit_json(const std::string& name, ordered_json result) const {
        if (!want_json()) return;
        ordered_json j;
        j["metadata"] = meta_.to_json();
        j["result"] = std::move(result);
        write_json(path(name + ".json"), j);
    }

    CsvWriter csv(const std::string& name, const std::vector<std::string>& header) const {
        return CsvWriter(path(name + ".csv"), meta_, header);
    }

    /// The --head override, else the top-ranked head of localize.json.
    ComponentId decision_head() const {
        if (!opt_.head.empty()) return parse_head(opt_.head, model_.arch);
        const fs::path art = path("localize.json");
        if (!fs::is_regular_file(art))
            throw ConfigError("no decision head: pass --head L:H or run localize with the same --out first");
        const auto j = read_json(art);
        try {
            for (const auto& e : j.at("result").at("ranking")) {
                const ComponentId id = ComponentId::parse(e.at("label").get<std::string>());
                if (id.is_head()) {
                    fmt::print(stderr, "decision head {} taken from {}\n", id.label(), art.string());
                    return parse_head(id.label(), model_.arch);
                }
            }
        } catch (const nlohmann::json::exception& e) {
            throw DataError(fmt::format("{}: {}", art.string(), e.what()));
        }
        throw DataError(fmt::format("{} ranks no attention head", art.string()));
    }

private:
    Options opt_;
    fs::path out_dir_;
    ModelBundle model_;
    std::string checksum_;
    PromptTemplate tpl_;
    bool geo_ = false;
    std::vector<QAExample> qa_examples_;
    std::vector<GeoExample> geo_examples_;
    std::vector<PromptPair> all_pairs_;
    std::optional<std::vector<PromptPair>> filtered_;
    RunMetadata meta_;
};

std::vector<std::string> coords_row(const std::string& id, const std::string& condition, const Vector& c, int vertex) {
    return {id, condition, num(c.at(0)), num(c.at(1)), num(c.at(2)), std::to_string(vertex)};
}

int cmd_localize(Session& s) {
    const auto& o = s.options();
    const auto& pairs = s.pairs();
    const auto comps = parse_components(o.components, s.model().arch);
    const RestorationReport rep =
        restoration_sweep(s.model(), pairs, comps, parse_patch_positions(o.positions), o.renormalize, o.jobs);
    ordered_json result = to_json(rep);
    const auto ranked = rep.ranked();
    if (o.pattern_patch) {
        const auto top = std::find_if(ranked.begin(), ranked.end(), [](const auto& e) { return e.id.is_head(); });
        if (top != ranked.end()) {
            ordered_json pp = to_json(attention_pattern_study(s.model(), pairs, top->id.layer, top->id.head, o.jobs));
            pp["head"] = top->id.label();
            result["pattern_patch"] = std::move(pp);
        }
    }
    s.emit_json("localize", std::move(result));
    if (s.want_csv()) {
        auto csv = s.csv("localize", {"rank", "label", "kind", "layer", "head", "R", "mean_delta_p_target"});
        for (std::size_t i = 0; i < ranked.size(); ++i) {
            const auto& e = ranked[i];
            csv.row({std::to_string(i + 1), e.id.label(), e.id.is_head() ? "head" : "mlp", std::to_string(e.id.layer),
                     e.id.is_head() ? std::to_string(e.id.head) : "", num(e.mean), num(e.mean_target)});
        }
    }
    if (!ranked.empty()) fmt::print("top component {} R={:.4f}\n", ranked.front().id.label(), ranked.front().mean);
    return kOk;
}

int cmd_geometry(Session& s) {
    const auto& o = s.options();
    const auto& pairs = s.pairs();
    const ComponentId head = s.decision_head();
    const auto samples = collect_decision_outputs(s.model(), pairs, head, o.jobs);
    const DecisionSubspace sub = fit_decision_subspace(samples, head);
    if (sub.rank_deficient) fmt::print(stderr, "warning: degenerate PCA, fewer than 3 directions carry variance\n");

    ordered_json jumps = ordered_json::array();
    std::size_t agree = 0;
    std::vector<std::vector<std::string>> rows;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto& clean = samples[2 * i];
        const auto& pers = samples[2 * i + 1];
        const JumpResult jr = classify_jump(sub, clean.output, pers.output);
        const bool flipped = clean.chosen != pers.chosen;
        if (flipped == jr.jumped) ++agree;
        jumps.push_back({{"id", pairs[i].id},
                         {"clean_choice", clean.chosen},
                         {"persuasive_choice", pers.chosen},
                         {"behavioral_flip", flipped},
                         {"clean_vertex", jr.clean_vertex},
                         {"persuasive_vertex", jr.pers_vertex},
                         {"jumped", jr.jumped},
                         {"margin", jr.margin},
                         {"tie", jr.tie}});
        rows.push_back(coords_row(pairs[i].id, "clean", sub.coordinates(clean.output), jr.clean_vertex));
        rows.push_back(coords_row(pairs[i].id, "persuasive", sub.coordinates(pers.output), jr.pers_vertex));
    }
    const double rate = static_cast<double>(agree) / static_cast<double>(pairs.size());
    ordered_json result;
    result["head"] = head.label();
    result["n_pairs"] = pairs.size();
    result["degenerate"] = sub.rank_deficient;
    result["jump_flip_agreement"] = rate;
    result["subspace"] = to_json(sub);
    result["jumps"] = std::move(jumps);
    s.emit_json("geometry", std::move(result));
    if (s.want_csv()) {
        auto csv = s.csv("geometry", {"example_id", "condition", "x", "y", "z", "vertex"});
        for (const auto& r : rows) csv.row(r);
    }
    fmt::print("head {} top-3 variance {:.6f} jump/flip agreement {:.4f}\n", head.label(), sub.top3_ratio(), rate);
    return kOk;
}

int cmd_ov(Session& s) {
    const auto& o = s.options();
    const auto& pairs = s.pairs();
    const ComponentId head = s.decision_head();
    const auto samples = collect_decision_outputs(s.model(), pairs, head, o.jobs);
    const DecisionSubspace sub = fit_decision_subspace(samples, head);
    const OVAnalysis a = ov_analysis(s.model(), sub, pairs, samples, o.mass, o.jobs);

    double diag_min = 1.0, off_max = -1.0;
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t k = 0; k < 4; ++k) {
            if (!a.ov_present[i] || !a.decision_present[k]) continue;
            if (i == k) diag_min = std::min(diag_min, a.alignment[i][k]);
            else off_max = std::max(off_max, a.alignment[i][k]);
        }
    ordered_json result;
    result["head"] = head.label();
    result["mass"] = o.mass;
    result["diagonal_min"] = diag_min;
    result["off_diagonal_max"] = off_max;
    result["analysis"] = to_json(a);
    s.emit_json("ov", std::move(result));
    if (s.want_csv()) {
        auto csv = s.csv("ov", {"ov_option", "decision_option", "cosine"});
        for (std::size_t i = 0; i < 4; ++i)
            for (std::size_t k = 0; k < 4; ++k)
                csv.row({std::to_string(i), std::to_string(k),
                         a.ov_present[i] && a.decision_present[k] ? num(a.alignment[i][k]) : ""});
        auto proj = s.csv("ov_projections",
                          {"example_id", "condition", "option", "position", "attention", "x", "y", "z"});
        for (const auto& p : a.projections)
            proj.row({p.example_id, p.condition, std::to_string(p.option), std::to_string(p.position),
                      num(p.attention), num(p.coords.at(0)), num(p.coords.at(1)), num(p.coords.at(2))});
    }
    fmt::print("head {} alignment diagonal min {:.4f} off-diagonal max {:.4f}\n", head.label(), diag_min, off_max);
    return kOk;
}

struct FittedFeature {
    RoutingFeature feature;
    bool reused = false;
};

RoutingFeature fit_feature(Session& s, const ComponentId& head) {
    const auto& o = s.options();
    const QKDataset ds = build_qk_dataset(s.model(), s.pairs(), head, o.jobs);
    Rank1Options ro;
    ro.folds = o.folds;
    ro.epsilon = o.epsilon;
    ro.restarts = o.restarts;
    ro.max_iter = o.max_iter;
    ro.seed = o.seed;
    return fit_rank1_qk(ds, circuit_matrices(s.model(), head.layer, head.head).w_qk, ro);
}

// qk.json from the same output directory when it was fitted for `head`.
FittedFeature routing_feature(Session& s, const ComponentId& head) {
    const fs::path art = s.path("qk.json");
    if (fs::is_regular_file(art)) {
        const auto j = read_json(art);
        const auto& r = j.at("result");
        if (r.value("head", std::string()) == head.label()) {
            fmt::print(stderr, "routing feature taken from {}\n", art.string());
            return {feature_from_json(r), true};
        }
    }
    return {fit_feature(s, head), false};
}

int convergence_status(const Session& s, const RoutingFeature& f) {
    if (f.converged) return kOk;
    fmt::print(stderr, "warning: rank-1 fit did not converge within the iteration budget\n");
    return s.options().strict ? kConvergence : kOk;
}

int cmd_qk(Session& s) {
    const ComponentId head = s.decision_head();
    const RoutingFeature f = fit_feature(s, head);
    ordered_json result;
    result["head"] = head.label();
    result["rotary_folded"] = s.model().arch.positional() == PositionalScheme::rotary;
    result["restarts"] = s.options().restarts;
    result["seed"] = s.options().seed;
    result.update(to_json(f));
    s.emit_json("qk", std::move(result));
    if (s.want_csv()) {
        auto csv = s.csv("qk", {"fold", "test_objective"});
        for (std::size_t i = 0; i < f.fold_objectives.size(); ++i)
            csv.row({std::to_string(i), num(f.fold_objectives[i])});
    }
    fmt::print("head {} train objective {:.3e} cv {:.3e} +- {:.3e} coupling {:.4f}\n", head.label(),
               f.train_objective, f.cv_mean, f.cv_std, f.coupling);
    return convergence_status(s, f);
}

int cmd_steer(Session& s) {
    const auto& o = s.options();
    const ComponentId head = s.decision_head();
    const FittedFeature ff = routing_feature(s, head);
    SteeringConfig cfg;
    cfg.direction = ff.feature.u_k;
    const double n = norm(cfg.direction);
    if (!(n > 0.0)) throw NumericError("routing direction is zero");
    for (float& v : cfg.direction) v = static_cast<float>(v / n);
    cfg.alphas = parse_alphas(o.alphas);
    cfg.decision_layer = head.layer;
    const SteeringReport rep = steering_sweep(s.model(), s.pairs(), cfg, o.jobs);
    ordered_json result;
    result["head"] = head.label();
    result["decision_layer"] = head.layer;
    result["direction"] = "u_k";
    result["direction_reused"] = ff.reused;
    result.update(to_json(rep));
    s.emit_json("steer", std::move(result));
    if (s.want_csv()) {
        auto csv = s.csv("steer", {"alpha", "selection_rate", "mean_p_target"});
        for (std::size_t i = 0; i < rep.alphas.size(); ++i)
            csv.row({num(rep.alphas[i]), num(rep.selection_rate[i]), num(rep.mean_p_target[i])});
    }
    fmt::print("{} trials, monotone {}, final selection rate {:.4f}\n", rep.trials, rep.monotone(),
               rep.selection_rate.empty() ? 0.0 : rep.selection_rate.back());
    return ff.reused ? kOk : convergence_status(s, ff.feature);
}

int cmd_window(Session& s) {
    const auto& o = s.options();
    const auto windows = parse_windows(o.windows, s.model().arch.n_layers);
    const WindowPatchReport rep = window_patch(s.model(), s.pairs(), windows, o.jobs);
    s.emit_json("window", to_json(rep));
    if (s.want_csv()) {
        auto csv = s.csv("window", {"start", "length", "denoise_robustness", "denoise_delta", "noise_robustness",
                                    "noise_delta", "noise_success_delta"});
        for (const auto& e : rep.entries)
            csv.row({std::to_string(e.window.start), std::to_string(e.window.length), num(e.denoise_robustness),
                     num(e.denoise_delta), num(e.noise_robustness), num(e.noise_delta), num(e.noise_success_delta)});
    }
    if (rep.best_denoise)
        fmt::print("best denoising window start {} length {}\n", rep.best_denoise->start, rep.best_denoise->length);
    else
        fmt::print("no window improves robustness\n");
    return kOk;
}

int cmd_compose(Session& s) {
    const auto& o = s.options();
    const ComponentId head = s.decision_head();
    const FittedFeature ff = routing_feature(s, head);
    const CompositionScan scan = composition_scan(s.model(), ff.feature, head, o.jobs);
    ordered_json result = to_json(scan);
    result["feature_reused"] = ff.reused;
    s.emit_json("compose", std::move(result));
    if (s.want_csv()) {
        auto csv = s.csv("compose", {"layer", "head", "score"});
        for (const auto& e : scan.entries)
            csv.row({std::to_string(e.head.layer), std::to_string(e.head.head), e.score ? num(*e.score) : ""});
    }
    const auto ranked = scan.ranked();
    if (!ranked.empty()) fmt::print("top writer {} score {:.4f}\n", ranked.front().head.label(), *ranked.front().score);
    return ff.reused ? kOk : convergence_status(s, ff.feature);
}

int cmd_prompts(Session& s) {
    const auto& pairs = s.all_pairs();
    if (pairs.empty()) throw DataError("corpus has no examples");
    std::vector<ordered_json> rows;
    std::size_t snapped = 0, prefix_missing = 0;
    for (const auto& p : pairs) {
        ordered_json a = span_annotations(p, s.model().tokenizer);
        a["rendered"] = p.rendered;
        rows.push_back(std::move(a));
        if (p.keyword_snapped) ++snapped;
        if (p.prefix_missing) ++prefix_missing;
    }
    if (s.want_json()) write_jsonl(s.path("prompts.jsonl"), rows);

    ordered_json result;
    result["template"] = s.prompt_template().to_json();
    result["n_examples"] = pairs.size();
    result["keyword_spans_snapped"] = snapped;
    if (s.source_selection()) {
        result["prefix_missing"] = prefix_missing;
        result["padding_agreement"] = nullptr;
    } else {
        const PaddingAgreement pa = padding_agreement(s.model(), s.qa_examples(), pairs, s.prompt_template(),
                                                      s.options().jobs);
        result["padding_agreement"] = {{"rate", pa.rate},
                                       {"padded_choice", pa.padded_choice},
                                       {"removed_choice", pa.removed_choice}};
        if (s.want_csv()) {
            auto csv = s.csv("prompts", {"example_id", "length", "padded_choice", "removed_choice", "agree"});
            for (std::size_t i = 0; i < pairs.size(); ++i)
                csv.row({pairs[i].id, std::to_string(pairs[i].length()), std::to_string(pa.padded_choice[i]),
                         std::to_string(pa.removed_choice[i]),
                         pa.padded_choice[i] == pa.removed_choice[i] ? "1" : "0"});
        }
        fmt::print("padded vs removed context argmax agreement {:.4f}\n", pa.rate);
    }
    s.emit_json("prompts", std::move(result));
    fmt::print("{} prompt pairs written\n", pairs.size());
    return kOk;
}

// Comma-separated values arrive split, from the command line and from config files alike.
struct ListOptions {
    std::vector<std::string> components, alphas, windows;

    void apply(Options& o) const {
        auto join = [](const std::vector<std::string>& parts, std::string& target) {
            if (parts.empty()) return;
            std::string s;
            for (std::size_t i = 0; i < parts.size(); ++i) s += (i ? "," : "") + parts[i];
            target = s;
        };
        join(components, o.components);
        join(alphas, o.alphas);
        join(windows, o.windows);
    }
};

void add_options(CLI::App& app, Options& o, ListOptions& lists) {
    app.add_option("--model", o.model, "Model directory (model.safetensors, config.json, vocab.json, merges.txt)");
    app.add_option("--family", o.family, "Expected architecture family")->check(CLI::IsMember({"gpt2", "llama"}));
    app.add_option("--corpus", o.corpus, "Corpus JSONL");
    app.add_option("--out", o.out, "Output directory")->capture_default_str();
    app.add_option("--template", o.template_name, "Builtin template (farm, geo, toy) or template JSON file")
        ->capture_default_str();
    app.add_flag("--shuffle-options,--shuffle_options", o.shuffle_options, "Permute options per example by seed");
    app.add_option("--seed", o.seed, "Seed for permutations and restarts")->capture_default_str();
    app.add_option("--jobs", o.jobs, "Worker threads (0 = all cores)")->capture_default_str();
    app.add_option("--format", o.format, "Output format")
        ->check(CLI::IsMember({"json", "csv", "both"}))
        ->capture_default_str();
    app.add_flag("--strict", o.strict, "Treat convergence warnings as failures (exit 4)");
    app.add_option("--head", o.head, "Decision head L:H (default: top head of localize.json)");
    app.add_option("--components", lists.components, "all, heads, or a list such as L0H1,L1MLP")
        ->delimiter(',')
        ->default_str(o.components);
    app.add_option("--positions", o.positions, "Patched positions: all or final")
        ->check(CLI::IsMember({"all", "final"}))
        ->capture_default_str();
    app.add_flag("--renormalize", o.renormalize, "Use probabilities renormalized over the four options");
    app.add_flag("--pattern-patch,--pattern_patch", o.pattern_patch, "Also patch attention patterns of the top head");
    app.add_option("--mass", o.mass, "Attention mass kept per option span")->capture_default_str();
    app.add_option("--alphas", lists.alphas, "Steering grid: default, a..b[:step] or a comma list")
        ->delimiter(',')
        ->allow_extra_args(false)
        ->default_str(o.alphas);
    app.add_option("--folds", o.folds, "Cross-validation folds")->capture_default_str();
    app.add_option("--epsilon", o.epsilon, "Denominator stabilizer of the rank-1 objective")->capture_default_str();
    app.add_option("--restarts", o.restarts, "Random restarts of the rank-1 fit")->capture_default_str();
    app.add_option("--max-iter,--max_iter", o.max_iter, "Iteration budget per start of the rank-1 fit")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    app.add_option("--windows", lists.windows, "Layer windows start:length,... or all")
        ->delimiter(',')
        ->default_str(o.windows);
}

} // namespace

int run(int argc, char** argv) {
    CLI::App app{"Circuit tracing for persuasion-induced errors in decoder-only transformers", "pertrace"};
    app.set_version_flag("--version", kVersion);
    app.set_config("--config", "", "key=value configuration file");
    app.allow_config_extras(false);
    app.require_subcommand(1);
    app.fallthrough();
    Options o;
    ListOptions lists;
    add_options(app, o, lists);

    using Handler = int (*)(Session&);
    const std::vector<std::tuple<const char*, const char*, Handler>> commands = {
        {"localize", "Rank heads and MLPs by mean restoration effect", cmd_localize},
        {"geometry", "Decision subspace of the decision head and jump labels", cmd_geometry},
        {"ov", "Alignment of OV-transported option content with decision vertices", cmd_ov},
        {"qk", "Cross-validated rank-1 routing factorization of W_QK", cmd_qk},
        {"steer", "Steer along the routing direction over an alpha grid", cmd_steer},
        {"window", "Layer-window patching at option-field positions", cmd_window},
        {"compose", "Composition of upstream OV circuits with the routing component", cmd_compose},
        {"prompts", "Span annotations and padding agreement for the corpus", cmd_prompts},
    };
    std::vector<CLI::App*> subs;
    for (const auto& [name, help, fn] : commands) subs.push_back(app.add_subcommand(name, help));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kConfig;
    }
    lists.apply(o);

    try {
        for (std::size_t i = 0; i < commands.size(); ++i) {
            if (!subs[i]->parsed()) continue;
            o.command = std::get<0>(commands[i]);
            if (o.model.empty()) throw ConfigError("--model is required");
            if (o.corpus.empty()) throw ConfigError("--corpus is required");
            Session session(o);
            return std::get<2>(commands[i])(session);
        }
        throw ConfigError("no subcommand given");
    } catch (const ConfigError& e) {
        fmt::print(stderr, "config error: {}\n", e.what());
        return kConfig;
    } catch (const DataError& e) {
        fmt::print(stderr, "data error: {}\n", e.what());
        return kData;
    } catch (const NumericError& e) {
        fmt::print(stderr, "numerical error: {}\n", e.what());
        return kData;
    } catch (const std::exception& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return kFailure;
    }
}

} // namespace pertrace::cli
