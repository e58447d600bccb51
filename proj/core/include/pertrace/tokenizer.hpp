#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace pertrace {

/// Token ids plus the byte range [first, second) of the input each token covers.
struct Encoding {
    std::vector<int> ids;
    std::vector<std::pair<std::size_t, std::size_t>> offsets;
};

/// Byte-level BPE tokenizer in the GPT-2 layout: vocab.json maps byte-mapped
/// token strings to ids and merges.txt lists merge pairs in priority order.
class Tokenizer {
public:
    Tokenizer() = default;
    Tokenizer(std::vector<std::string> id_to_token, std::vector<std::pair<std::string, std::string>> merges);

    static Tokenizer load(const std::filesystem::path& vocab_json, const std::filesystem::path& merges_txt);
    void save(const std::filesystem::path& vocab_json, const std::filesystem::path& merges_txt) const;

    Encoding encode_with_offsets(std::string_view text) const;
    std::vector<int> encode(std::string_view text) const;
    std::string decode(std::span<const int> ids) const;

    std::size_t vocab_size() const noexcept { return id_to_token_.size(); }
    /// Vocabulary string of an id (byte-mapped form).
    const std::string& token(int id) const;
    std::optional<int> find(std::string_view token) const;
    /// Appends a token that is never produced by encode(); returns its id.
    int add_special(const std::string& token);

    const std::vector<std::pair<std::string, std::string>>& merges() const noexcept { return merges_; }

private:
    std::vector<std::string> bpe(const std::string& word) const;

    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, int> token_to_id_;
    std::vector<std::pair<std::string, std::string>> merges_;
    std::unordered_map<std::string, int> merge_rank_;
};

/// GPT-2 style pre-tokenization: byte ranges of the pieces BPE runs on.
std::vector<std::pair<std::size_t, std::size_t>> pretokenize(std::string_view text);

/// The reversible byte -> printable-codepoint table used by byte-level BPE.
const std::vector<std::string>& byte_to_unicode();

/// Decodes UTF-8 into code points; throws DataError on malformed input.
std::vector<char32_t> utf8_decode(std::string_view s);
void utf8_append(std::string& out, char32_t cp);
/// Byte offset of the given code point index in a UTF-8 string.
std::size_t utf8_byte_offset(std::string_view s, std::size_t codepoint_index);

} // namespace pertrace
