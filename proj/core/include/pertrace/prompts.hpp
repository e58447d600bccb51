#pragma once

#include "pertrace/model.hpp"
#include "pertrace/tokenizer.hpp"

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace pertrace {

struct QAExample {
    std::string id;
    std::string question;
    std::array<std::string, 4> options;
    int correct_index = 0;
    int target_index = 1;
    std::string persuasion_text;
    /// Code point ranges [begin, end) inside persuasion_text.
    std::vector<std::pair<std::size_t, std::size_t>> keyword_spans;

    void validate() const;
};

struct GeoExample {
    std::string id;
    std::string query;
    std::array<std::string, 4> sources;
    int target_source_index = 0;
    std::string optimized_text;

    void validate() const;
};

inline constexpr const char* kGeoPrefixMarker = "[BEGIN HIGH-PRIORITY RANKING METADATA]";
/// The injected ranking-metadata block placed before an optimized source.
const std::string& geo_poison_prefix();

/// Half-open token range.
struct TokenSpan {
    std::size_t begin = 0;
    std::size_t end = 0;

    std::size_t size() const { return end - begin; }
    bool empty() const { return end == begin; }
    bool contains(std::size_t i) const { return i >= begin && i < end; }
    friend bool operator==(const TokenSpan&, const TokenSpan&) = default;
};

struct SpanMap {
    TokenSpan system;
    TokenSpan question;  // the query for source-selection prompts
    TokenSpan context;   // persuasion span, or the target source for source selection
    std::array<TokenSpan, 4> options;
    std::size_t answer_slot = 0;

    /// Union of option spans plus the answer slot, ascending.
    std::vector<std::size_t> option_field() const;
    friend bool operator==(const SpanMap&, const SpanMap&) = default;
};

/// perm[k] = index of the original option shown at position k.
using Permutation = std::array<int, 4>;

Permutation identity_permutation();
Permutation inverse_permutation(const Permutation& p);
bool is_permutation(const Permutation& p);
/// Deterministic permutation for example `index` under `seed`.
Permutation seeded_permutation(std::uint64_t seed, std::size_t index);
QAExample apply_permutation(const QAExample& ex, const Permutation& p);

struct PromptTemplate {
    std::string name;
    std::string system;
    /// Text with {system}, {question}, {context}, {option_1}..{option_4}
    /// (or {query}, {source_1}..{source_4} for source selection).
    std::string body;
    std::array<std::string, 4> labels;

    static PromptTemplate builtin(const std::string& name);
    static PromptTemplate load(const std::filesystem::path& path);
    nlohmann::json to_json() const;
};

/// Rendered text plus the byte range each placeholder occupies.
struct RenderedPrompt {
    std::string text;
    std::map<std::string, std::pair<std::size_t, std::size_t>> fields;
};
RenderedPrompt render_template(const std::string& body, const std::map<std::string, std::string>& values);

struct PromptPair {
    std::string id;
    std::string kind;  // "qa" or "geo"
    std::vector<int> clean_ids;
    std::vector<int> persuasive_ids;
    std::vector<int> corrupted_ids;  // empty when no keyword spans
    SpanMap spans;
    int correct_index = -1;
    int target_index = -1;
    std::array<int, 4> option_token_ids{};
    Permutation permutation = {0, 1, 2, 3};
    std::uint64_t seed = 0;
    std::string rendered;  // persuasive (or poisoned) prompt text
    std::vector<TokenSpan> keyword_tokens;
    bool keyword_snapped = false;
    bool prefix_missing = false;

    std::size_t length() const { return persuasive_ids.size(); }
    bool has_corrupted() const { return !corrupted_ids.empty(); }
};

/// Option label token ids for a template (first token of each label).
std::array<int, 4> option_token_ids(const Tokenizer& tok, const PromptTemplate& tpl);

PromptPair build_pair(const QAExample& example, const Tokenizer& tokenizer, const Permutation& permutation,
                      const PromptTemplate& tpl, std::optional<int> pad_id, std::uint64_t seed = 0);

PromptPair build_geo_pair(const GeoExample& example, const Tokenizer& tokenizer, const PromptTemplate& tpl,
                          std::optional<int> pad_id);

/// The clean prompt with the context removed rather than padded.
std::vector<int> context_free_ids(const QAExample& example, const Tokenizer& tokenizer, const Permutation& permutation,
                                  const PromptTemplate& tpl);

/// Argmax agreement between padded clean prompts and context-free prompts.
struct PaddingAgreement {
    std::vector<std::string> example_ids;
    std::vector<int> padded_choice;
    std::vector<int> removed_choice;
    double rate = 0.0;
};
PaddingAgreement padding_agreement(const ModelBundle& model, const std::vector<QAExample>& examples,
                                   const std::vector<PromptPair>& pairs, const PromptTemplate& tpl, int jobs = 1);

/// Keeps pairs whose clean-run argmax equals correct_index. Pairs without a
/// reference answer (source selection) take the clean choice as the reference
/// and are dropped when that choice is the target.
std::vector<PromptPair> filter_clean_correct(const ModelBundle& model, const std::vector<PromptPair>& pairs,
                                             int jobs = 1);

std::vector<QAExample> load_qa_corpus(const std::filesystem::path& path);
std::vector<GeoExample> load_geo_corpus(const std::filesystem::path& path);
nlohmann::ordered_json to_json(const QAExample& ex);
nlohmann::ordered_json to_json(const GeoExample& ex);
void write_jsonl(const std::filesystem::path& path, const std::vector<nlohmann::ordered_json>& rows);

/// Span annotations for a pair (sidecar of the rendered prompt text).
nlohmann::ordered_json span_annotations(const PromptPair& pair, const Tokenizer& tokenizer);

} // namespace pertrace
