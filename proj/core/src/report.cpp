#include "pertrace/report.hpp"

#include "pertrace/errors.hpp"

#include <array>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <ctime>

#include <fmt/core.h>

namespace pertrace {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

ordered_json component_json(const ComponentId& c) {
    ordered_json j;
    j["label"] = c.label();
    j["kind"] = c.is_head() ? "head" : "mlp";
    j["layer"] = c.layer;
    if (c.is_head()) j["head"] = c.head;
    return j;
}

ordered_json finite_or_null(double v) { return std::isfinite(v) ? ordered_json(v) : ordered_json(nullptr); }

} // namespace

std::string base64_encode(const std::uint8_t* data, std::size_t n) {
    std::string out;
    out.reserve((n + 2) / 3 * 4);
    for (std::size_t i = 0; i < n; i += 3) {
        std::uint32_t v = static_cast<std::uint32_t>(data[i]) << 16;
        if (i + 1 < n) v |= static_cast<std::uint32_t>(data[i + 1]) << 8;
        if (i + 2 < n) v |= data[i + 2];
        out += kAlphabet[(v >> 18) & 63];
        out += kAlphabet[(v >> 12) & 63];
        out += i + 1 < n ? kAlphabet[(v >> 6) & 63] : '=';
        out += i + 2 < n ? kAlphabet[v & 63] : '=';
    }
    return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
    std::array<int, 256> rev;
    rev.fill(-1);
    for (int i = 0; i < 64; ++i) rev[static_cast<unsigned char>(kAlphabet[i])] = i;
    if (text.size() % 4 != 0) throw DataError("base64 payload length is not a multiple of 4");
    std::vector<std::uint8_t> out;
    out.reserve(text.size() / 4 * 3);
    for (std::size_t i = 0; i < text.size(); i += 4) {
        std::uint32_t v = 0;
        int pad = 0;
        for (std::size_t k = 0; k < 4; ++k) {
            const char c = text[i + k];
            if (c == '=') {
                ++pad;
                v <<= 6;
                continue;
            }
            const int d = rev[static_cast<unsigned char>(c)];
            if (d < 0 || pad > 0) throw DataError("invalid base64 payload");
            v = (v << 6) | static_cast<std::uint32_t>(d);
        }
        out.push_back(static_cast<std::uint8_t>(v >> 16));
        if (pad < 2) out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
        if (pad < 1) out.push_back(static_cast<std::uint8_t>(v & 0xff));
    }
    return out;
}

namespace {

std::string encode_floats(std::span<const float> v) {
    std::vector<std::uint8_t> bytes(v.size() * 4);
    for (std::size_t i = 0; i < v.size(); ++i) {
        std::uint32_t bits;
        std::memcpy(&bits, &v[i], 4);
        for (std::size_t b = 0; b < 4; ++b) bytes[4 * i + b] = static_cast<std::uint8_t>(bits >> (8 * b));
    }
    return base64_encode(bytes.data(), bytes.size());
}

Vector decode_floats(const std::string& text, std::size_t expected) {
    const auto bytes = base64_decode(text);
    if (bytes.size() != expected * 4)
        throw DataError(fmt::format("tensor blob holds {} bytes, expected {}", bytes.size(), expected * 4));
    Vector v(expected);
    for (std::size_t i = 0; i < expected; ++i) {
        std::uint32_t bits = 0;
        for (std::size_t b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[4 * i + b]) << (8 * b);
        std::memcpy(&v[i], &bits, 4);
    }
    return v;
}

} // namespace

ordered_json matrix_blob(const Matrix& m) {
    ordered_json j;
    j["dtype"] = "F32";
    j["shape"] = {m.rows(), m.cols()};
    j["data"] = encode_floats(m.values());
    return j;
}

ordered_json vector_blob(std::span<const float> v) {
    ordered_json j;
    j["dtype"] = "F32";
    j["shape"] = {v.size()};
    j["data"] = encode_floats(v);
    return j;
}

Matrix matrix_from_blob(const json& j) {
    try {
        const auto shape = j.at("shape").get<std::vector<std::size_t>>();
        if (shape.size() != 2 || j.at("dtype") != "F32") throw DataError("matrix blob must be a 2-d F32 tensor");
        return Matrix(shape[0], shape[1], decode_floats(j.at("data").get<std::string>(), shape[0] * shape[1]));
    } catch (const json::exception& e) {
        throw DataError(fmt::format("malformed matrix blob: {}", e.what()));
    }
}

Vector vector_from_blob(const json& j) {
    try {
        const auto shape = j.at("shape").get<std::vector<std::size_t>>();
        if (shape.size() != 1 || j.at("dtype") != "F32") throw DataError("vector blob must be a 1-d F32 tensor");
        return decode_floats(j.at("data").get<std::string>(), shape[0]);
    } catch (const json::exception& e) {
        throw DataError(fmt::format("malformed vector blob: {}", e.what()));
    }
}

ordered_json RunMetadata::to_json() const {
    ordered_json j;
    j["command"] = command;
    j["version"] = version;
    j["config_hash"] = config_hash;
    j["seed"] = seed;
    j["model_checksum"] = model_checksum;
    j["config"] = config;
    j["generated_at"] = generated_at;
    return j;
}

std::string utc_timestamp() {
    if (const char* fixed = std::getenv("PERTRACE_FIXED_TIMESTAMP")) return fixed;
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void write_json(const std::filesystem::path& path, const ordered_json& j) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError(fmt::format("cannot write {}", path.string()));
    out << j.dump(2) << '\n';
}

json read_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError(fmt::format("cannot open {}", path.string()));
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw DataError(fmt::format("{}: {}", path.string(), e.what()));
    }
}

CsvWriter::CsvWriter(const std::filesystem::path& path, const RunMetadata& meta, const std::vector<std::string>& header)
    : out_(path, std::ios::binary | std::ios::trunc), columns_(header.size()) {
    if (!out_) throw DataError(fmt::format("cannot write {}", path.string()));
    out_ << fmt::format("# {} version={} config_hash={} seed={} model_checksum={} generated_at={}\n", meta.command,
                        meta.version, meta.config_hash, meta.seed, meta.model_checksum, meta.generated_at);
    row(header);
}

void CsvWriter::row(const std::vector<std::string>& fields) {
    if (fields.size() != columns_) throw DataError("csv row width differs from the header");
    for (std::size_t i = 0; i < fields.size(); ++i) {
        if (i) out_ << ',';
        const std::string& f = fields[i];
        if (f.find_first_of(",\"\n\r") != std::string::npos) {
            out_ << '"';
            for (char c : f) {
                if (c == '"') out_ << '"';
                out_ << c;
            }
            out_ << '"';
        } else {
            out_ << f;
        }
    }
    out_ << '\n';
}

std::string num(double v) {
    if (!std::isfinite(v)) return "nan";
    return fmt::format("{}", v);
}

ordered_json to_json(const RestorationReport& r) {
    ordered_json j;
    j["n_examples"] = r.example_ids.size();
    j["patch_positions"] = to_string(r.positions);
    j["probability"] = r.renormalized ? "renormalized" : "raw";
    j["example_ids"] = r.example_ids;
    j["baseline_p_correct"] = r.baseline_correct;
    j["clean_p_correct"] = r.clean_correct;
    j["components"] = ordered_json::array();
    for (const auto& e : r.entries) {
        ordered_json c = component_json(e.id);
        c["R"] = e.mean;
        c["mean_delta_p_target"] = e.mean_target;
        c["delta_p_correct"] = e.delta_correct;
        c["delta_p_target"] = e.delta_target;
        j["components"].push_back(std::move(c));
    }
    j["ranking"] = ordered_json::array();
    for (const auto& e : r.ranked()) j["ranking"].push_back({{"label", e.id.label()}, {"R", e.mean}});
    return j;
}

ordered_json to_json(const PatternPatchSummary& s) {
    ordered_json j;
    j["n_pairs"] = s.n_pairs;
    j["n_flipped"] = s.results.size();
    j["pattern_repair_rate"] = s.pattern_repair_rate;
    j["full_output_repair_rate"] = s.full_repair_rate;
    j["examples"] = ordered_json::array();
    for (std::size_t i = 0; i < s.results.size(); ++i) {
        const auto& r = s.results[i];
        j["examples"].push_back({{"id", s.example_ids[i]},
                                 {"pattern_repaired", r.repaired},
                                 {"full_output_repaired", r.full_repaired},
                                 {"pattern_choice", r.patched_choice},
                                 {"full_output_choice", r.full_choice},
                                 {"delta_p_target", r.delta_target},
                                 {"delta_p_correct", r.delta_correct}});
    }
    return j;
}

ordered_json to_json(const SteeringReport& r) {
    ordered_json j;
    j["trials"] = r.trials;
    j["alphas"] = r.alphas;
    j["selection_rate"] = r.selection_rate;
    j["mean_p_target_renormalized"] = r.mean_p_target;
    j["monotone"] = r.monotone();
    j["rows"] = ordered_json::array();
    for (const auto& t : r.rows) j["rows"].push_back({{"id", t.example_id}, {"target", t.target}, {"choices", t.choices}});
    return j;
}

ordered_json to_json(const WindowPatchReport& r) {
    ordered_json j;
    j["robustness_definition"] = "fraction of examples whose argmax is the correct option";
    j["layer_indexing"] = "0-based";
    j["n_examples"] = r.example_ids.size();
    j["persuasive_robustness"] = r.persuasive_robustness;
    j["corrupted_robustness"] = r.corrupted_robustness;
    j["persuasive_success"] = r.persuasive_success;
    j["corrupted_success"] = r.corrupted_success;
    j["windows"] = ordered_json::array();
    for (const auto& e : r.entries)
        j["windows"].push_back({{"start", e.window.start},
                                {"length", e.window.length},
                                {"denoise_robustness", e.denoise_robustness},
                                {"denoise_delta_robustness", e.denoise_delta},
                                {"noise_robustness", e.noise_robustness},
                                {"noise_delta_robustness", e.noise_delta},
                                {"noise_delta_success", e.noise_success_delta}});
    if (r.best_denoise)
        j["best_denoise_window"] = {{"start", r.best_denoise->start}, {"length", r.best_denoise->length}};
    else
        j["best_denoise_window"] = nullptr;
    return j;
}

ordered_json to_json(const DecisionSubspace& s) {
    ordered_json j;
    j["head"] = component_json(s.head);
    j["explained_variance_ratio"] = s.explained_variance_ratio;
    j["top3_explained_variance"] = s.top3_ratio();
    j["rank_deficient"] = s.rank_deficient;
    j["centroids_partial"] = s.centroids_partial;
    j["centroids"] = ordered_json::array();
    for (std::size_t k = 0; k < 4; ++k) {
        if (s.centroids[k].empty()) j["centroids"].push_back(nullptr);
        else j["centroids"].push_back(s.centroids[k]);
    }
    j["counts"] = s.counts;
    j["mean"] = vector_blob(s.mean);
    j["basis"] = matrix_blob(s.basis);
    return j;
}

ordered_json to_json(const OVAnalysis& a) {
    ordered_json j;
    j["head"] = component_json(a.head);
    j["singular_values"] = a.singular_values;
    j["alignment"] = ordered_json::array();
    for (const auto& row : a.alignment) j["alignment"].push_back(row);
    j["ov_option_present"] = a.ov_present;
    j["decision_option_present"] = a.decision_present;
    j["v_opt"] = matrix_blob(a.v_opt);
    j["c_dec"] = matrix_blob(a.c_dec);
    return j;
}

ordered_json to_json(const RoutingFeature& f) {
    ordered_json j;
    j["coupling"] = f.coupling;
    j["train_objective"] = f.train_objective;
    j["cv_folds"] = f.folds;
    j["cv_mean"] = finite_or_null(f.cv_mean);
    j["cv_std"] = finite_or_null(f.cv_std);
    j["fold_objectives"] = f.fold_objectives;
    j["epsilon"] = f.epsilon;
    j["iterations"] = f.iterations;
    j["converged"] = f.converged;
    j["u_q"] = vector_blob(f.u_q);
    j["u_k"] = vector_blob(f.u_k);
    return j;
}

ordered_json to_json(const CompositionScan& s) {
    ordered_json j;
    j["decision_head"] = component_json(s.decision_head);
    j["scores"] = ordered_json::array();
    for (const auto& e : s.entries) {
        ordered_json row = component_json(e.head);
        row["score"] = e.score ? ordered_json(*e.score) : ordered_json(nullptr);
        j["scores"].push_back(std::move(row));
    }
    j["ranking"] = ordered_json::array();
    for (const auto& e : s.ranked()) j["ranking"].push_back({{"label", e.head.label()}, {"score", *e.score}});
    return j;
}

DecisionSubspace subspace_from_json(const json& j) {
    try {
        DecisionSubspace s;
        s.head = ComponentId::parse(j.at("head").at("label").get<std::string>());
        s.explained_variance_ratio = j.at("explained_variance_ratio").get<Vector>();
        s.rank_deficient = j.at("rank_deficient").get<bool>();
        s.centroids_partial = j.at("centroids_partial").get<bool>();
        for (std::size_t k = 0; k < 4; ++k) {
            const auto& c = j.at("centroids").at(k);
            if (!c.is_null()) s.centroids[k] = c.get<Vector>();
            s.counts[k] = j.at("counts").at(k).get<std::size_t>();
        }
        s.mean = vector_from_blob(j.at("mean"));
        s.basis = matrix_from_blob(j.at("basis"));
        return s;
    } catch (const json::exception& e) {
        throw DataError(fmt::format("malformed decision subspace artifact: {}", e.what()));
    }
}

RoutingFeature feature_from_json(const json& j) {
    try {
        RoutingFeature f;
        f.coupling = j.at("coupling").get<double>();
        f.train_objective = j.at("train_objective").get<double>();
        f.folds = j.at("cv_folds").get<int>();
        f.cv_mean = j.at("cv_mean").is_null() ? std::nan("") : j.at("cv_mean").get<double>();
        f.cv_std = j.at("cv_std").is_null() ? std::nan("") : j.at("cv_std").get<double>();
        f.fold_objectives = j.at("fold_objectives").get<std::vector<double>>();
        f.epsilon = j.at("epsilon").get<double>();
        f.iterations = j.at("iterations").get<int>();
        f.converged = j.at("converged").get<bool>();
        f.u_q = vector_from_blob(j.at("u_q"));
        f.u_k = vector_from_blob(j.at("u_k"));
        return f;
    } catch (const json::exception& e) {
        throw DataError(fmt::format("malformed routing feature artifact: {}", e.what()));
    }
}

} // namespace pertrace
