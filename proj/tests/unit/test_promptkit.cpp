#include "pertrace/errors.hpp"
#include "pertrace/prompts.hpp"

#include "support/test_models.hpp"

#include <doctest.h>

#include <fstream>
#include <random>
#include <set>

using namespace pertrace;

namespace {

struct PaddedTokenizer {
    Tokenizer tok;
    int pad = 0;
    PaddedTokenizer() : tok(testing::byte_tokenizer()) { pad = tok.add_special("<|pad|>"); }
};

std::string decode_span(const Tokenizer& tok, const std::vector<int>& ids, const TokenSpan& s) {
    return tok.decode(std::span<const int>(ids).subspan(s.begin, s.size()));
}

bool covers(const std::string& decoded, const std::string& field) {
    if (decoded == field) return true;
    return decoded.size() == field.size() + 1 && (decoded[0] == ' ' || decoded[0] == '\n') &&
           decoded.compare(1, std::string::npos, field) == 0;
}

} // namespace

TEST_CASE("permutations") {
    CHECK(is_permutation(identity_permutation()));
    CHECK_FALSE(is_permutation({0, 0, 1, 2}));
    CHECK_FALSE(is_permutation({0, 1, 2, 4}));
    std::set<Permutation> seen;
    for (std::size_t i = 0; i < 200; ++i) {
        const Permutation p = seeded_permutation(3, i);
        REQUIRE(is_permutation(p));
        CHECK(inverse_permutation(inverse_permutation(p)) == p);
        CHECK(seeded_permutation(3, i) == p);
        seen.insert(p);
    }
    CHECK(seen.size() == 24);
    std::mt19937_64 rng(1);
    const QAExample ex = testing::random_qa_example(rng, "a");
    const Permutation p = {2, 0, 3, 1};
    const QAExample q = apply_permutation(ex, p);
    CHECK(q.options[0] == ex.options[2]);
    CHECK(q.options[static_cast<std::size_t>(q.correct_index)] == ex.options[static_cast<std::size_t>(ex.correct_index)]);
    CHECK(q.options[static_cast<std::size_t>(q.target_index)] == ex.options[static_cast<std::size_t>(ex.target_index)]);
    const QAExample back = apply_permutation(q, inverse_permutation(p));
    CHECK(back.options == ex.options);
    CHECK(back.correct_index == ex.correct_index);
    CHECK_THROWS_AS(apply_permutation(ex, {0, 0, 0, 0}), ConfigError);
}

TEST_CASE("template rendering") {
    const RenderedPrompt r = render_template("a {x} b {y}!", {{"x", "XX"}, {"y", ""}});
    CHECK(r.text == "a XX b !");
    CHECK(r.fields.at("x") == std::pair<std::size_t, std::size_t>{2, 4});
    CHECK(r.fields.at("y") == std::pair<std::size_t, std::size_t>{7, 7});
    CHECK_THROWS_AS(render_template("{x", {{"x", "1"}}), ConfigError);
    CHECK_THROWS_AS(render_template("{z}", {{"x", "1"}}), ConfigError);
    CHECK_THROWS_AS(render_template("{x}{x}", {{"x", "1"}}), ConfigError);
    CHECK_THROWS_AS(PromptTemplate::builtin("nope"), ConfigError);
    const auto dir = testing::temp_dir("tpl");
    {
        std::ofstream(dir / "t.json") << PromptTemplate::builtin("farm").to_json().dump();
    }
    const PromptTemplate t = PromptTemplate::load(dir / "t.json");
    CHECK(t.body == PromptTemplate::builtin("farm").body);
    CHECK(t.labels == PromptTemplate::builtin("farm").labels);
    {
        std::ofstream(dir / "bad.json") << R"({"body": "x", "labels": [" 1"]})";
    }
    CHECK_THROWS_AS(PromptTemplate::load(dir / "bad.json"), ConfigError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("QA pairs are length matched with round-tripping spans") {
    const PaddedTokenizer pt;
    std::mt19937_64 rng(101);
    for (const char* name : {"farm", "toy"}) {
        const PromptTemplate tpl = PromptTemplate::builtin(name);
        for (int i = 0; i < 150; ++i) {
            const QAExample ex = testing::random_qa_example(rng, "q" + std::to_string(i));
            const Permutation perm = seeded_permutation(9, static_cast<std::size_t>(i));
            const PromptPair p = build_pair(ex, pt.tok, perm, tpl, pt.pad, 9);
            const QAExample shown = apply_permutation(ex, perm);
            CAPTURE(p.rendered);
            CHECK(p.clean_ids.size() == p.persuasive_ids.size());
            if (!ex.keyword_spans.empty()) CHECK(p.corrupted_ids.size() == p.persuasive_ids.size());
            CHECK(p.spans.answer_slot == p.length() - 1);
            CHECK(covers(decode_span(pt.tok, p.persuasive_ids, p.spans.context), shown.persuasion_text));
            CHECK(covers(decode_span(pt.tok, p.persuasive_ids, p.spans.question), shown.question));
            for (std::size_t k = 0; k < 4; ++k)
                CHECK(covers(decode_span(pt.tok, p.persuasive_ids, p.spans.options[k]), shown.options[k]));
            for (std::size_t t = 0; t < p.length(); ++t) {
                if (p.spans.context.contains(t)) CHECK(p.clean_ids[t] == pt.pad);
                else CHECK(p.clean_ids[t] == p.persuasive_ids[t]);
            }
            for (std::size_t k = 0; k < ex.keyword_spans.size(); ++k) {
                const auto [cb, ce] = ex.keyword_spans[k];
                const std::string kw = shown.persuasion_text.substr(
                    utf8_byte_offset(shown.persuasion_text, cb),
                    utf8_byte_offset(shown.persuasion_text, ce) - utf8_byte_offset(shown.persuasion_text, cb));
                CHECK(covers(decode_span(pt.tok, p.persuasive_ids, p.keyword_tokens[k]), kw));
                for (std::size_t t = p.keyword_tokens[k].begin; t < p.keyword_tokens[k].end; ++t)
                    CHECK(p.corrupted_ids[t] == pt.pad);
            }
            CHECK(pt.tok.decode(p.persuasive_ids) == p.rendered);
        }
    }
}

TEST_CASE("source selection pairs are length matched") {
    const PaddedTokenizer pt;
    std::mt19937_64 rng(103);
    const PromptTemplate tpl = PromptTemplate::builtin("geo");
    std::size_t missing = 0;
    for (int i = 0; i < 150; ++i) {
        const GeoExample ex = testing::random_geo_example(rng, "g" + std::to_string(i));
        const PromptPair p = build_geo_pair(ex, pt.tok, tpl, pt.pad);
        CHECK(p.clean_ids.size() == p.persuasive_ids.size());
        CHECK(p.kind == "geo");
        CHECK(p.correct_index == -1);
        CHECK(p.spans.context == p.spans.options[static_cast<std::size_t>(ex.target_source_index)]);
        for (std::size_t t = 0; t < p.length(); ++t)
            if (!p.spans.context.contains(t)) CHECK(p.clean_ids[t] == p.persuasive_ids[t]);
        std::vector<int> poisoned;
        for (std::size_t t = p.spans.context.begin; t < p.spans.context.end; ++t)
            if (p.persuasive_ids[t] != pt.pad) poisoned.push_back(p.persuasive_ids[t]);
        const std::string text = pt.tok.decode(poisoned);
        CHECK(covers(text, ex.optimized_text));
        missing += p.prefix_missing;
        CHECK(p.prefix_missing == (ex.optimized_text.find(kGeoPrefixMarker) == std::string::npos));
    }
    CHECK(missing > 0);
}

TEST_CASE("prompt construction errors") {
    const PaddedTokenizer pt;
    std::mt19937_64 rng(107);
    QAExample ex = testing::random_qa_example(rng, "e");
    CHECK_THROWS_AS(build_pair(ex, pt.tok, identity_permutation(), PromptTemplate::builtin("toy"), std::nullopt),
                    ConfigError);
    PromptTemplate noctx = PromptTemplate::builtin("toy");
    noctx.body = "Q {question} 1 {option_1} 2 {option_2} 3 {option_3} 4 {option_4} A";
    CHECK_THROWS_AS(build_pair(ex, pt.tok, identity_permutation(), noctx, pt.pad), ConfigError);
    ex.correct_index = 7;
    CHECK_THROWS(build_pair(ex, pt.tok, identity_permutation(), PromptTemplate::builtin("toy"), pt.pad));
    PromptTemplate same = PromptTemplate::builtin("toy");
    same.labels = {" 1", " 1", " 2", " 3"};
    CHECK_THROWS_AS(option_token_ids(pt.tok, same), ConfigError);
}

TEST_CASE("corpus files round trip") {
    std::mt19937_64 rng(109);
    const auto dir = testing::temp_dir("corpus");
    std::vector<QAExample> qa;
    std::vector<nlohmann::ordered_json> rows;
    for (int i = 0; i < 10; ++i) {
        qa.push_back(testing::random_qa_example(rng, "x" + std::to_string(i)));
        rows.push_back(to_json(qa.back()));
    }
    write_jsonl(dir / "qa.jsonl", rows);
    const auto back = load_qa_corpus(dir / "qa.jsonl");
    REQUIRE(back.size() == qa.size());
    for (std::size_t i = 0; i < qa.size(); ++i) {
        CHECK(back[i].id == qa[i].id);
        CHECK(back[i].options == qa[i].options);
        CHECK(back[i].keyword_spans == qa[i].keyword_spans);
        CHECK(back[i].persuasion_text == qa[i].persuasion_text);
    }
    std::vector<nlohmann::ordered_json> geo;
    for (int i = 0; i < 5; ++i) geo.push_back(to_json(testing::random_geo_example(rng, "g" + std::to_string(i))));
    write_jsonl(dir / "geo.jsonl", geo);
    CHECK(load_geo_corpus(dir / "geo.jsonl").size() == 5);
    {
        std::ofstream(dir / "bad.jsonl") << "{\"id\": \"a\"}\n";
    }
    CHECK_THROWS_AS(load_qa_corpus(dir / "bad.jsonl"), DataError);
    {
        std::ofstream(dir / "junk.jsonl") << "not json\n";
    }
    CHECK_THROWS_AS(load_qa_corpus(dir / "junk.jsonl"), DataError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("span annotations") {
    const PaddedTokenizer pt;
    std::mt19937_64 rng(113);
    const QAExample ex = testing::random_qa_example(rng, "s");
    const PromptPair p = build_pair(ex, pt.tok, identity_permutation(), PromptTemplate::builtin("toy"), pt.pad);
    const auto j = span_annotations(p, pt.tok);
    CHECK(j["id"] == "s");
    CHECK(j["spans"]["options"].size() == 4);
    CHECK(j["length"] == p.length());
    CHECK(j["spans"]["context"]["text"].get<std::string>().find(ex.persuasion_text) != std::string::npos);
}
