#pragma once

// Text ingestion: sentence splitting, length filtering, segmentation into
// bounded-size documents, and per-document term statistics.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mtp/error.hpp"
#include "mtp/tokenizer.hpp"

namespace mtp {

inline constexpr std::size_t kMinDocumentWords = 10;
inline constexpr std::size_t kMinDocumentSentences = 4;
inline constexpr std::size_t kDefaultSegmentTokens = 1024;
inline constexpr double kStatScale = 10.0;

// Words ending in '.' that never terminate a sentence. Matching is
// case-sensitive on the whitespace-delimited word including its period.
inline constexpr std::array<std::string_view, 42> kAbbreviations = {
    "Mr.",   "Mrs.",  "Ms.",   "Dr.",  "Prof.", "Sr.",   "Jr.",  "St.",  "Mt.",
    "Gen.",  "Col.",  "Capt.", "Lt.",  "Sgt.",  "Rev.",  "Hon.", "Gov.", "Sen.",
    "Rep.",  "vs.",   "etc.",  "e.g.", "i.e.",  "cf.",   "Inc.", "Ltd.", "Co.",
    "Corp.", "No.",   "Fig.",  "Vol.", "pp.",   "U.S.",  "U.K.", "Jan.", "Feb.",
    "Aug.",  "Sept.", "Oct.",  "Nov.", "Dec.",  "approx."};

namespace detail {

inline bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

inline std::string collapse_whitespace(std::string_view s) {
  std::string out;
  bool pending = false;
  for (char c : s) {
    if (is_space(c)) {
      pending = !out.empty();
    } else {
      if (pending) out += ' ';
      pending = false;
      out += c;
    }
  }
  return out;
}

inline bool is_abbreviation(std::string_view word) {
  if (std::find(kAbbreviations.begin(), kAbbreviations.end(), word) != kAbbreviations.end()) {
    return true;
  }
  // Single-letter initials such as "J."
  return word.size() == 2 && std::isupper(static_cast<unsigned char>(word[0]));
}

inline bool opens_sentence(char c) {
  auto u = static_cast<unsigned char>(c);
  return std::isupper(u) || std::isdigit(u) || c == '"' || c == '\'' || c == '(' || c == '[';
}

inline bool is_closer(char c) { return c == '"' || c == '\'' || c == ')' || c == ']'; }

inline std::size_t count_words(std::string_view s) {
  std::size_t n = 0;
  bool in_word = false;
  for (char c : s) {
    if (is_space(c)) {
      in_word = false;
    } else if (!in_word) {
      in_word = true;
      ++n;
    }
  }
  return n;
}

}  // namespace detail

// Splits after '.', '!' or '?' (plus any closing quotes/brackets) when the
// next non-space character is uppercase, a digit, or an opening quote, and
// the terminated word is not an abbreviation. Whitespace inside a sentence
// is collapsed to single spaces.
inline std::vector<std::string> split_sentences(std::string_view text) {
  const std::string s = detail::collapse_whitespace(text);
  std::vector<std::string> out;
  std::size_t start = 0;
  std::size_t i = 0;
  while (i < s.size()) {
    char c = s[i];
    if (c != '.' && c != '!' && c != '?') {
      ++i;
      continue;
    }
    std::size_t end = i + 1;
    while (end < s.size() && (s[end] == '.' || s[end] == '!' || s[end] == '?')) ++end;
    while (end < s.size() && detail::is_closer(s[end])) ++end;
    if (end >= s.size() || s[end] != ' ' || end + 1 >= s.size() ||
        !detail::opens_sentence(s[end + 1])) {
      i = end;
      continue;
    }
    if (c == '.' && end == i + 1) {
      std::size_t ws = s.rfind(' ', i);
      ws = ws == std::string::npos ? 0 : ws + 1;
      if (ws < start) ws = start;
      if (detail::is_abbreviation(std::string_view(s).substr(ws, i + 1 - ws))) {
        i = end;
        continue;
      }
    }
    out.push_back(s.substr(start, end - start));
    start = end + 1;
    i = start;
  }
  if (start < s.size()) out.push_back(s.substr(start));
  return out;
}

struct RawDocument {
  std::string id;
  std::string text;
};

struct Sentence {
  std::string text;
  std::vector<EncodedToken> tokens;
  std::size_t word_count = 0;
};

struct Document {
  std::string id;
  std::vector<Sentence> sentences;
  std::size_t word_count = 0;
  std::size_t token_count = 0;

  std::vector<TokenId> token_ids() const {
    std::vector<TokenId> ids;
    ids.reserve(token_count);
    for (const auto& s : sentences)
      for (const auto& t : s.tokens) ids.push_back(t.id);
    return ids;
  }
};

inline bool passes_length_filter(std::size_t sentences, std::size_t words) {
  return sentences >= kMinDocumentSentences && words >= kMinDocumentWords;
}

inline Document make_document(std::string id, std::vector<Sentence> sentences) {
  Document doc;
  doc.id = std::move(id);
  doc.sentences = std::move(sentences);
  for (const auto& s : doc.sentences) {
    doc.word_count += s.word_count;
    doc.token_count += s.tokens.size();
  }
  return doc;
}

// nullopt when the document has fewer than 10 whitespace words or fewer
// than 4 sentences.
inline std::optional<Document> filter_document(const RawDocument& raw, const Vocabulary& vocab) {
  auto texts = split_sentences(raw.text);
  if (!passes_length_filter(texts.size(), detail::count_words(raw.text))) return std::nullopt;
  std::vector<Sentence> sentences;
  sentences.reserve(texts.size());
  for (auto& t : texts) {
    Sentence s;
    s.word_count = detail::count_words(t);
    s.tokens = encode_sentence(t, vocab);
    s.text = std::move(t);
    sentences.push_back(std::move(s));
  }
  return make_document(raw.id, std::move(sentences));
}

// Greedy fill at sentence boundaries: a segment takes sentences until the
// next one would push it past target_tokens. A single sentence longer than
// the target forms its own segment.
inline std::vector<Document> greedy_segments(const Document& doc,
                                             std::size_t target_tokens = kDefaultSegmentTokens) {
  std::vector<std::vector<Sentence>> groups;
  std::size_t cur_tokens = 0;
  for (const auto& s : doc.sentences) {
    if (groups.empty() || (cur_tokens > 0 && cur_tokens + s.tokens.size() > target_tokens)) {
      groups.emplace_back();
      cur_tokens = 0;
    }
    groups.back().push_back(s);
    cur_tokens += s.tokens.size();
  }
  std::vector<Document> out;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    std::string id = groups.size() == 1 ? doc.id : doc.id + "#" + std::to_string(g);
    out.push_back(make_document(std::move(id), std::move(groups[g])));
  }
  return out;
}

// greedy_segments followed by merging any segment that fails the length
// filter into its predecessor (the first segment merges forward).
inline std::vector<Document> segment_document(const Document& doc,
                                              std::size_t target_tokens = kDefaultSegmentTokens) {
  auto segs = greedy_segments(doc, target_tokens);
  auto fails = [](const Document& d) {
    return !passes_length_filter(d.sentences.size(), d.word_count);
  };
  bool merged = true;
  while (merged && segs.size() > 1) {
    merged = false;
    for (std::size_t i = 0; i < segs.size(); ++i) {
      if (!fails(segs[i])) continue;
      std::size_t into = i == 0 ? 1 : i - 1;
      std::size_t first = std::min(i, into), second = std::max(i, into);
      auto sentences = std::move(segs[first].sentences);
      for (auto& s : segs[second].sentences) sentences.push_back(std::move(s));
      segs[first] = make_document(segs[first].id, std::move(sentences));
      segs.erase(segs.begin() + static_cast<std::ptrdiff_t>(second));
      merged = true;
      break;
    }
  }
  if (segs.size() == 1) segs[0].id = doc.id;
  for (std::size_t i = 0; segs.size() > 1 && i < segs.size(); ++i) {
    segs[i].id = doc.id + "#" + std::to_string(i);
  }
  return segs;
}

using TermStats = std::map<TokenId, double>;

inline std::map<TokenId, std::uint64_t> raw_term_counts(std::span<const TokenId> ids) {
  std::map<TokenId, std::uint64_t> counts;
  for (TokenId id : ids) ++counts[id];
  return counts;
}

namespace detail {

inline TermStats scale_to_ten(const TermStats& raw) {
  double mx = 0;
  for (const auto& [_, v] : raw) mx = std::max(mx, v);
  TermStats out;
  for (const auto& [id, v] : raw) out[id] = mx > 0 ? kStatScale * v / mx : 0.0;
  return out;
}

}  // namespace detail

// tf[t] = 10 * count(t) / max count over the document.
inline TermStats compute_tf(std::span<const TokenId> ids) {
  TermStats raw;
  for (const auto& [id, c] : raw_term_counts(ids)) raw[id] = double(c);
  return detail::scale_to_ten(raw);
}

inline TermStats compute_tf(const Document& doc) { return compute_tf(doc.token_ids()); }

struct CorpusStats {
  std::uint64_t document_count = 0;
  std::map<TokenId, std::uint64_t> document_frequency;

  void add_document(std::span<const TokenId> ids) {
    ++document_count;
    for (const auto& [id, _] : raw_term_counts(ids)) ++document_frequency[id];
  }

  void merge(const CorpusStats& other) {
    document_count += other.document_count;
    for (const auto& [id, df] : other.document_frequency) document_frequency[id] += df;
  }

  std::uint64_t df(TokenId id) const {
    auto it = document_frequency.find(id);
    return it == document_frequency.end() ? 1 : it->second;
  }
};

// raw[t] = count(t) * ln(N / df(t)), then scaled so the document maximum is
// 10. Tokens unknown to the corpus statistics use df = 1.
inline TermStats compute_tfidf(std::span<const TokenId> ids, const CorpusStats& corpus) {
  if (corpus.document_count == 0) fail("compute_tfidf: corpus has no documents");
  TermStats raw;
  const double n = double(corpus.document_count);
  for (const auto& [id, c] : raw_term_counts(ids)) {
    raw[id] = double(c) * std::log(n / double(corpus.df(id)));
  }
  return detail::scale_to_ten(raw);
}

inline TermStats compute_tfidf(const Document& doc, const CorpusStats& corpus) {
  return compute_tfidf(doc.token_ids(), corpus);
}

// Splits text into documents separated by one or more blank lines.
inline std::vector<std::string> split_blank_line_blocks(std::string_view text) {
  std::vector<std::string> blocks;
  std::string cur;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t nl = text.find('\n', pos);
    std::string_view line =
        text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    bool blank = std::all_of(line.begin(), line.end(), detail::is_space);
    if (blank) {
      if (!cur.empty()) blocks.push_back(std::move(cur));
      cur.clear();
    } else {
      if (!cur.empty()) cur += '\n';
      cur += line;
    }
    if (nl == std::string_view::npos) break;
    pos = nl + 1;
  }
  if (!cur.empty()) blocks.push_back(std::move(cur));
  return blocks;
}

}  // namespace mtp
