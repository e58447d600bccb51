#include "pertrace/tokenizer.hpp"

#include "pertrace/errors.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <sstream>

#include <fmt/core.h>
#include <nlohmann/json.hpp>

namespace pertrace {

namespace fs = std::filesystem;

std::vector<char32_t> utf8_decode(std::string_view s) {
    std::vector<char32_t> out;
    out.reserve(s.size());
    std::size_t i = 0;
    while (i < s.size()) {
        const auto c = static_cast<unsigned char>(s[i]);
        std::size_t len;
        char32_t cp;
        if (c < 0x80) {
            len = 1;
            cp = c;
        } else if ((c >> 5) == 0x6) {
            len = 2;
            cp = c & 0x1f;
        } else if ((c >> 4) == 0xe) {
            len = 3;
            cp = c & 0x0f;
        } else if ((c >> 3) == 0x1e) {
            len = 4;
            cp = c & 0x07;
        } else {
            throw DataError(fmt::format("invalid UTF-8 lead byte at offset {}", i));
        }
        if (i + len > s.size()) throw DataError(fmt::format("truncated UTF-8 sequence at offset {}", i));
        for (std::size_t k = 1; k < len; ++k) {
            const auto cc = static_cast<unsigned char>(s[i + k]);
            if ((cc >> 6) != 0x2) throw DataError(fmt::format("invalid UTF-8 continuation at offset {}", i + k));
            cp = (cp << 6) | (cc & 0x3f);
        }
        out.push_back(cp);
        i += len;
    }
    return out;
}

void utf8_append(std::string& out, char32_t cp) {
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xc0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
    } else if (cp < 0x10000) {
        out.push_back(static_cast<char>(0xe0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3f)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
    } else {
        out.push_back(static_cast<char>(0xf0 | (cp >> 18)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3f)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3f)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
    }
}

std::size_t utf8_byte_offset(std::string_view s, std::size_t codepoint_index) {
    std::size_t cp = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if ((static_cast<unsigned char>(s[i]) & 0xc0) != 0x80) {
            if (cp == codepoint_index) return i;
            ++cp;
        }
    }
    if (cp == codepoint_index) return s.size();
    throw DataError(fmt::format("code point index {} beyond string of {} code points", codepoint_index, cp));
}

const std::vector<std::string>& byte_to_unicode() {
    static const std::vector<std::string> table = [] {
        std::vector<std::string> t(256);
        std::vector<bool> direct(256, false);
        for (int b = '!'; b <= '~'; ++b) direct[b] = true;
        for (int b = 0xa1; b <= 0xac; ++b) direct[b] = true;
        for (int b = 0xae; b <= 0xff; ++b) direct[b] = true;
        char32_t next = 256;
        for (int b = 0; b < 256; ++b) {
            const char32_t cp = direct[b] ? static_cast<char32_t>(b) : next++;
            utf8_append(t[b], cp);
        }
        return t;
    }();
    return table;
}

namespace {

const std::unordered_map<char32_t, unsigned char>& unicode_to_byte() {
    static const std::unordered_map<char32_t, unsigned char> table = [] {
        std::unordered_map<char32_t, unsigned char> t;
        const auto& fwd = byte_to_unicode();
        for (int b = 0; b < 256; ++b) t[utf8_decode(fwd[b]).front()] = static_cast<unsigned char>(b);
        return t;
    }();
    return table;
}

bool is_space(char32_t c) {
    return c == ' ' || (c >= 0x09 && c <= 0x0d) || (c >= 0x1c && c <= 0x1f) || c == 0x85 || c == 0xa0 ||
           c == 0x1680 || (c >= 0x2000 && c <= 0x200a) || c == 0x2028 || c == 0x2029 || c == 0x202f ||
           c == 0x205f || c == 0x3000;
}

bool is_digit(char32_t c) { return c >= '0' && c <= '9'; }

// Non-ASCII code points count as letters except for common punctuation and
// symbol blocks.
bool is_letter(char32_t c) {
    if (c < 0x80) return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z');
    if (is_space(c)) return false;
    if (c >= 0xa1 && c <= 0xbf) return c == 0xaa || c == 0xb5 || c == 0xba;
    if (c == 0xd7 || c == 0xf7) return false;
    if (c >= 0x2010 && c <= 0x2bff) return false;
    if (c >= 0x3001 && c <= 0x303f) return false;
    if (c >= 0xfe30 && c <= 0xfe4f) return false;
    if (c >= 0xff01 && c <= 0xff0f) return false;
    if (c >= 0x1f000 && c <= 0x1faff) return false;
    return true;
}

enum class CharClass { letter, digit, space, other };

CharClass classify(char32_t c) {
    if (is_space(c)) return CharClass::space;
    if (is_digit(c)) return CharClass::digit;
    if (is_letter(c)) return CharClass::letter;
    return CharClass::other;
}

std::string merge_key(const std::string& a, const std::string& b) {
    std::string k;
    k.reserve(a.size() + b.size() + 1);
    k += a;
    k.push_back(' ');
    k += b;
    return k;
}

std::size_t codepoint_count(const std::string& s) {
    std::size_t n = 0;
    for (char c : s)
        if ((static_cast<unsigned char>(c) & 0xc0) != 0x80) ++n;
    return n;
}

} // namespace

std::vector<std::pair<std::size_t, std::size_t>> pretokenize(std::string_view text) {
    const auto cps = utf8_decode(text);
    const std::size_t n = cps.size();
    std::vector<std::size_t> byte_pos(n + 1, 0);
    {
        std::size_t b = 0;
        for (std::size_t i = 0; i < n; ++i) {
            byte_pos[i] = b;
            const char32_t c = cps[i];
            b += c < 0x80 ? 1 : c < 0x800 ? 2 : c < 0x10000 ? 3 : 4;
        }
        byte_pos[n] = b;
    }
    std::vector<CharClass> cls(n);
    for (std::size_t i = 0; i < n; ++i) cls[i] = classify(cps[i]);

    std::vector<std::pair<std::size_t, std::size_t>> pieces;
    auto emit = [&](std::size_t a, std::size_t b) { pieces.emplace_back(byte_pos[a], byte_pos[b]); };

    std::size_t i = 0;
    while (i < n) {
        if (cps[i] == '\'' && i + 1 < n) {
            const char32_t a = cps[i + 1];
            const char32_t b = i + 2 < n ? cps[i + 2] : 0;
            if (a == 's' || a == 't' || a == 'm' || a == 'd') {
                emit(i, i + 2);
                i += 2;
                continue;
            }
            if ((a == 'r' && b == 'e') || (a == 'v' && b == 'e') || (a == 'l' && b == 'l')) {
                emit(i, i + 3);
                i += 3;
                continue;
            }
        }
        const std::size_t body = (cps[i] == ' ' && i + 1 < n) ? i + 1 : i;
        const CharClass bc = cls[body];
        if (bc != CharClass::space && (body == i + 1 || cls[i] != CharClass::space)) {
            std::size_t j = body;
            if (bc == CharClass::other) {
                while (j < n && cls[j] == CharClass::other) ++j;
            } else {
                while (j < n && cls[j] == bc) ++j;
            }
            emit(i, j);
            i = j;
            continue;
        }
        std::size_t k = i;
        while (k < n && cls[k] == CharClass::space) ++k;
        if (k == n || k - i == 1) {
            emit(i, k);
            i = k;
        } else {
            emit(i, k - 1);
            i = k - 1;
        }
    }
    return pieces;
}

Tokenizer::Tokenizer(std::vector<std::string> id_to_token, std::vector<std::pair<std::string, std::string>> merges)
    : id_to_token_(std::move(id_to_token)), merges_(std::move(merges)) {
    for (std::size_t i = 0; i < id_to_token_.size(); ++i) {
        if (!token_to_id_.emplace(id_to_token_[i], static_cast<int>(i)).second)
            throw DataError(fmt::format("duplicate vocabulary entry '{}'", id_to_token_[i]));
    }
    for (std::size_t r = 0; r < merges_.size(); ++r)
        merge_rank_.emplace(merge_key(merges_[r].first, merges_[r].second), static_cast<int>(r));
}

Tokenizer Tokenizer::load(const fs::path& vocab_json, const fs::path& merges_txt) {
    std::ifstream vf(vocab_json);
    if (!vf) throw DataError(fmt::format("cannot open vocabulary {}", vocab_json.string()));
    nlohmann::json v;
    try {
        v = nlohmann::json::parse(vf);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(fmt::format("{}: {}", vocab_json.string(), e.what()));
    }
    if (!v.is_object()) throw DataError(fmt::format("{}: expected a JSON object", vocab_json.string()));
    std::vector<std::string> tokens(v.size());
    std::vector<bool> seen(v.size(), false);
    for (auto it = v.begin(); it != v.end(); ++it) {
        const auto id = it.value().get<long long>();
        if (id < 0 || static_cast<std::size_t>(id) >= tokens.size() || seen[static_cast<std::size_t>(id)])
            throw DataError(fmt::format("{}: token ids must be a permutation of 0..{}", vocab_json.string(),
                                        tokens.size() - 1));
        tokens[static_cast<std::size_t>(id)] = it.key();
        seen[static_cast<std::size_t>(id)] = true;
    }

    std::ifstream mf(merges_txt);
    if (!mf) throw DataError(fmt::format("cannot open merges {}", merges_txt.string()));
    std::vector<std::pair<std::string, std::string>> merges;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(mf, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line.rfind("#version", 0) == 0) continue;
        const auto sp = line.find(' ');
        if (sp == std::string::npos || sp == 0 || sp + 1 == line.size() || line.find(' ', sp + 1) != std::string::npos)
            throw DataError(fmt::format("{}:{}: expected 'tokenA tokenB'", merges_txt.string(), lineno));
        merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
    }
    return Tokenizer(std::move(tokens), std::move(merges));
}

void Tokenizer::save(const fs::path& vocab_json, const fs::path& merges_txt) const {
    nlohmann::ordered_json v = nlohmann::ordered_json::object();
    for (std::size_t i = 0; i < id_to_token_.size(); ++i) v[id_to_token_[i]] = i;
    std::ofstream vf(vocab_json, std::ios::binary | std::ios::trunc);
    if (!vf) throw DataError(fmt::format("cannot write {}", vocab_json.string()));
    vf << v.dump() << '\n';
    std::ofstream mf(merges_txt, std::ios::binary | std::ios::trunc);
    if (!mf) throw DataError(fmt::format("cannot write {}", merges_txt.string()));
    mf << "#version: 0.2\n";
    for (const auto& [a, b] : merges_) mf << a << ' ' << b << '\n';
}

std::vector<std::string> Tokenizer::bpe(const std::string& word) const {
    std::vector<std::string> symbols;
    for (unsigned char b : word) symbols.push_back(byte_to_unicode()[b]);
    while (symbols.size() > 1) {
        int best = std::numeric_limits<int>::max();
        std::size_t at = 0;
        for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
            auto it = merge_rank_.find(merge_key(symbols[i], symbols[i + 1]));
            if (it != merge_rank_.end() && it->second < best) {
                best = it->second;
                at = i;
            }
        }
        if (best == std::numeric_limits<int>::max()) break;
        const std::string first = symbols[at];
        const std::string second = symbols[at + 1];
        std::vector<std::string> merged;
        merged.reserve(symbols.size());
        for (std::size_t i = 0; i < symbols.size();) {
            if (i + 1 < symbols.size() && symbols[i] == first && symbols[i + 1] == second) {
                merged.push_back(first + second);
                i += 2;
            } else {
                merged.push_back(symbols[i]);
                ++i;
            }
        }
        symbols = std::move(merged);
    }
    return symbols;
}

Encoding Tokenizer::encode_with_offsets(std::string_view text) const {
    Encoding out;
    for (const auto& [begin, end] : pretokenize(text)) {
        const std::string word(text.substr(begin, end - begin));
        std::size_t pos = begin;
        for (const auto& sym : bpe(word)) {
            auto it = token_to_id_.find(sym);
            if (it == token_to_id_.end())
                throw DataError(fmt::format("text piece '{}' at byte {} has no vocabulary entry", word, begin));
            const std::size_t len = codepoint_count(sym);
            out.ids.push_back(it->second);
            out.offsets.emplace_back(pos, pos + len);
            pos += len;
        }
    }
    return out;
}

std::vector<int> Tokenizer::encode(std::string_view text) const { return encode_with_offsets(text).ids; }

std::string Tokenizer::decode(std::span<const int> ids) const {
    const auto& inv = unicode_to_byte();
    std::string out;
    for (int id : ids) {
        const std::string& tok = token(id);
        const auto cps = utf8_decode(tok);
        const bool mapped = std::all_of(cps.begin(), cps.end(), [&](char32_t c) { return inv.count(c) != 0; });
        if (!mapped) {
            out += tok;
            continue;
        }
        for (char32_t c : cps) out.push_back(static_cast<char>(inv.at(c)));
    }
    return out;
}

const std::string& Tokenizer::token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size())
        throw DataError(fmt::format("token id {} outside vocabulary of {}", id, id_to_token_.size()));
    return id_to_token_[static_cast<std::size_t>(id)];
}

std::optional<int> Tokenizer::find(std::string_view token) const {
    auto it = token_to_id_.find(std::string(token));
    if (it == token_to_id_.end()) return std::nullopt;
    return it->second;
}

int Tokenizer::add_special(const std::string& token) {
    if (token_to_id_.count(token)) throw ConfigError(fmt::format("token '{}' already in vocabulary", token));
    const int id = static_cast<int>(id_to_token_.size());
    id_to_token_.push_back(token);
    token_to_id_.emplace(token, id);
    return id;
}

} // namespace pertrace
