#pragma once

// Uncased WordPiece tokenizer. Casing and surface length are captured per
// word before lowercasing so capitalization and token-length labels can be
// produced alongside the ids.

#include <cctype>
#include <cstdint>
#include <fstream>
#include <istream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mtp/error.hpp"
#include "mtp/sha256.hpp"

namespace mtp {

using TokenId = std::int32_t;

inline constexpr std::string_view kPadToken = "[PAD]";
inline constexpr std::string_view kUnkToken = "[UNK]";
inline constexpr std::string_view kClsToken = "[CLS]";
inline constexpr std::string_view kSepToken = "[SEP]";
inline constexpr std::string_view kMaskToken = "[MASK]";
inline constexpr std::size_t kMaxWordChars = 100;

class Vocabulary {
 public:
  Vocabulary() = default;

  static Vocabulary from_tokens(std::vector<std::string> tokens) {
    Vocabulary v;
    v.id_to_token_ = std::move(tokens);
    v.token_to_id_.reserve(v.id_to_token_.size());
    for (std::size_t i = 0; i < v.id_to_token_.size(); ++i) {
      auto [it, inserted] = v.token_to_id_.emplace(v.id_to_token_[i], static_cast<TokenId>(i));
      if (!inserted) {
        fail("vocab: duplicate token '", v.id_to_token_[i], "' at lines ", it->second + 1,
             " and ", i + 1);
      }
    }
    v.pad_ = v.require(kPadToken);
    v.unk_ = v.require(kUnkToken);
    v.cls_ = v.require(kClsToken);
    v.sep_ = v.require(kSepToken);
    v.mask_ = v.require(kMaskToken);
    std::string joined;
    for (const auto& t : v.id_to_token_) {
      joined += t;
      joined += '\n';
    }
    v.hash_ = sha256(joined);
    return v;
  }

  static Vocabulary load(std::istream& in) {
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      tokens.push_back(line);
    }
    return from_tokens(std::move(tokens));
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail("vocab: cannot open '", path, "'");
    return load(in);
  }

  std::size_t size() const { return id_to_token_.size(); }

  std::optional<TokenId> find(std::string_view token) const {
    auto it = token_to_id_.find(std::string(token));
    if (it == token_to_id_.end()) return std::nullopt;
    return it->second;
  }
  bool contains(std::string_view token) const { return find(token).has_value(); }

  const std::string& token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
      fail("vocab: id ", id, " out of range [0, ", id_to_token_.size(), ")");
    }
    return id_to_token_[static_cast<std::size_t>(id)];
  }

  TokenId pad_id() const { return pad_; }
  TokenId unk_id() const { return unk_; }
  TokenId cls_id() const { return cls_; }
  TokenId sep_id() const { return sep_; }
  TokenId mask_id() const { return mask_; }
  bool is_special(TokenId id) const {
    return id == pad_ || id == unk_ || id == cls_ || id == sep_ || id == mask_;
  }
  // [CLS], [SEP] and [PAD] are structural; [UNK] and [MASK] can carry content.
  bool is_structural(TokenId id) const { return id == pad_ || id == cls_ || id == sep_; }

  // SHA-256 over the token list joined with '\n'.
  const Digest& hash() const { return hash_; }

 private:
  TokenId require(std::string_view name) const {
    auto id = find(name);
    if (!id) fail("vocab: missing special token ", name);
    return *id;
  }

  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, TokenId> token_to_id_;
  TokenId pad_ = 0, unk_ = 0, cls_ = 0, sep_ = 0, mask_ = 0;
  Digest hash_{};
};

struct EncodedToken {
  TokenId id = 0;
  bool is_word_start = false;
  bool source_capitalized = false;
  std::uint32_t source_char_length = 1;
};

namespace detail {

inline bool is_utf8_continuation(unsigned char c) { return (c & 0xC0) == 0x80; }

inline std::size_t utf8_length(std::string_view s) {
  std::size_t n = 0;
  for (unsigned char c : s) n += !is_utf8_continuation(c);
  return n;
}

// Byte offsets of code point starts, plus s.size() as a sentinel.
inline std::vector<std::size_t> utf8_boundaries(std::string_view s) {
  std::vector<std::size_t> b;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!is_utf8_continuation(static_cast<unsigned char>(s[i]))) b.push_back(i);
  }
  b.push_back(s.size());
  return b;
}

inline bool is_ascii_punct(unsigned char c) { return c < 128 && std::ispunct(c); }

inline std::string ascii_lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) {
    if (static_cast<unsigned char>(c) < 128) c = static_cast<char>(std::tolower(c));
  }
  return out;
}

}  // namespace detail

// Whitespace split, then every ASCII punctuation character becomes its own
// word. Case is preserved.
inline std::vector<std::string> basic_split(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) words.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    auto c = static_cast<unsigned char>(ch);
    if (c < 128 && std::isspace(c)) {
      flush();
    } else if (detail::is_ascii_punct(c)) {
      flush();
      words.emplace_back(1, ch);
    } else {
      cur += ch;
    }
  }
  flush();
  return words;
}

// Greedy longest-match-first WordPiece. Continuation pieces carry "##".
// Returns {"[UNK]"} when no full decomposition exists.
inline std::vector<std::string> tokenize_word(std::string_view word, const Vocabulary& vocab) {
  if (word.empty()) return {};
  const auto bounds = detail::utf8_boundaries(word);
  const std::size_t nchars = bounds.size() - 1;
  if (nchars > kMaxWordChars) return {std::string(kUnkToken)};
  std::vector<std::string> pieces;
  std::size_t start = 0;
  while (start < nchars) {
    std::size_t end = nchars;
    std::string match;
    while (start < end) {
      std::string candidate(word.substr(bounds[start], bounds[end] - bounds[start]));
      if (start > 0) candidate.insert(0, "##");
      if (vocab.contains(candidate)) {
        match = std::move(candidate);
        break;
      }
      --end;
    }
    if (match.empty()) return {std::string(kUnkToken)};
    pieces.push_back(std::move(match));
    start = end;
  }
  return pieces;
}

inline std::vector<EncodedToken> encode_sentence(std::string_view text, const Vocabulary& vocab) {
  std::vector<EncodedToken> out;
  for (const auto& word : basic_split(text)) {
    const bool capitalized = std::isupper(static_cast<unsigned char>(word[0])) != 0;
    const std::string lower = detail::ascii_lower(word);
    const auto pieces = tokenize_word(lower, vocab);
    for (std::size_t i = 0; i < pieces.size(); ++i) {
      EncodedToken tok;
      tok.id = *vocab.find(pieces[i]);
      tok.is_word_start = i == 0;
      tok.source_capitalized = i == 0 && capitalized;
      if (tok.id == vocab.unk_id()) {
        tok.source_char_length = static_cast<std::uint32_t>(detail::utf8_length(word));
      } else {
        std::string_view piece = pieces[i];
        if (piece.starts_with("##")) piece.remove_prefix(2);
        tok.source_char_length = static_cast<std::uint32_t>(detail::utf8_length(piece));
      }
      out.push_back(tok);
    }
  }
  return out;
}

inline std::vector<TokenId> ids_of(const std::vector<EncodedToken>& tokens) {
  std::vector<TokenId> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(t.id);
  return ids;
}

// Joins pieces with single spaces, gluing "##" continuations to the
// previous piece.
inline std::string decode(std::span<const TokenId> ids, const Vocabulary& vocab) {
  std::string out;
  for (TokenId id : ids) {
    const std::string& piece = vocab.token(id);
    if (std::string_view(piece).starts_with("##")) {
      out += piece.substr(2);
    } else {
      if (!out.empty()) out += ' ';
      out += piece;
    }
  }
  return out;
}

// Character length used as the token-length regression target.
inline std::uint32_t piece_char_length(TokenId id, const Vocabulary& vocab) {
  std::string_view piece = vocab.token(id);
  if (piece.starts_with("##")) piece.remove_prefix(2);
  return static_cast<std::uint32_t>(std::max<std::size_t>(1, detail::utf8_length(piece)));
}

}  // namespace mtp
