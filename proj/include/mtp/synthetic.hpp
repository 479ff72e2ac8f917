#pragma once

// Small generated corpora for tests, demos and smoke training. Documents
// follow a fixed grammar over a closed vocabulary: every sentence opens
// with a marker word that cycles alpha -> beta -> gamma -> delta ->
// epsilon through the document, and each document draws its nouns from one
// topic. Sentence order and continuation are therefore recoverable from
// text, and topic nouns are rare across documents.

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "mtp/corpus.hpp"
#include "mtp/corpus_store.hpp"
#include "mtp/tokenizer.hpp"

namespace mtp::synthetic {

inline constexpr std::array<std::string_view, 5> kMarkers = {"Alpha", "Beta", "Gamma", "Delta",
                                                             "Epsilon"};
inline constexpr std::array<std::string_view, 10> kAdjectives = {
    "small", "bright", "quiet", "heavy", "green", "old", "quick", "cold", "tall", "soft"};
inline constexpr std::array<std::string_view, 10> kNouns = {
    "stone", "cart", "door", "lamp", "boat", "bell", "rope", "coat", "path", "wall"};
inline constexpr std::array<std::string_view, 8> kVerbs = {"moves", "holds", "finds", "pulls",
                                                           "carries", "watches", "walk", "jump"};
// Topic nouns; documents pick one row.
inline constexpr std::array<std::array<std::string_view, 4>, 8> kTopics = {{
    {"river", "fish", "reed", "bank"},
    {"forest", "oak", "moss", "fern"},
    {"harbor", "ship", "sail", "dock"},
    {"market", "coin", "stall", "bread"},
    {"mountain", "snow", "peak", "goat"},
    {"garden", "rose", "seed", "soil"},
    {"castle", "tower", "gate", "king"},
    {"desert", "sand", "camel", "dune"},
}};
inline constexpr std::array<std::string_view, 8> kFunctionWords = {"the", "a",   "near", "with",
                                                                   "and", "of", "by",   "to"};

// Vocabulary covering every generated word. "walked" and "jumping" style
// forms are produced with suffixes so WordPiece continuation pieces occur.
inline std::vector<std::string> vocabulary_tokens() {
  std::vector<std::string> v = {std::string(kPadToken), std::string(kUnkToken), std::string(kClsToken),
                                std::string(kSepToken), std::string(kMaskToken), ".", ","};
  auto add = [&](std::string_view w) { v.push_back(::mtp::detail::ascii_lower(w)); };
  for (auto w : kMarkers) add(w);
  for (auto w : kAdjectives) add(w);
  for (auto w : kNouns) add(w);
  for (auto w : kVerbs) add(w);
  for (const auto& row : kTopics)
    for (auto w : row) add(w);
  for (auto w : kFunctionWords) add(w);
  for (const char* piece : {"##ed", "##ing", "##s"}) v.emplace_back(piece);
  return v;
}

inline Vocabulary vocabulary() { return Vocabulary::from_tokens(vocabulary_tokens()); }

struct CorpusSpec {
  std::size_t documents = 40;
  std::size_t min_sentences = 6;
  std::size_t max_sentences = 12;
  std::uint64_t seed = 1;
};

namespace detail {

template <std::size_t N>
std::string_view pick(const std::array<std::string_view, N>& a, std::mt19937_64& rng) {
  return a[std::uniform_int_distribution<std::size_t>(0, N - 1)(rng)];
}

inline std::string sentence(std::string_view marker, const std::array<std::string_view, 4>& topic,
                            std::mt19937_64& rng) {
  std::string verb(pick(kVerbs, rng));
  if (verb == "walk" || verb == "jump") {
    verb += std::uniform_int_distribution<int>(0, 1)(rng) ? "ed" : "ing";
  }
  const std::string_view t1 = pick(topic, rng), t2 = pick(topic, rng);
  std::string s(marker);
  switch (std::uniform_int_distribution<int>(0, 2)(rng)) {
    case 0:
      s += " the " + std::string(pick(kAdjectives, rng)) + " " + std::string(t1) + " " + verb +
           " a " + std::string(pick(kNouns, rng)) + " near the " + std::string(t2) + ".";
      break;
    case 1:
      s += " a " + std::string(t1) + " " + verb + " the " + std::string(pick(kNouns, rng)) +
           ", and the " + std::string(t2) + "s " + verb + ".";
      break;
    default:
      s += " the " + std::string(pick(kNouns, rng)) + " of the " + std::string(t1) + " " + verb +
           " by the " + std::string(pick(kAdjectives, rng)) + " " + std::string(t2) + ".";
      break;
  }
  return s;
}

}  // namespace detail

inline std::vector<RawDocument> documents(const CorpusSpec& spec) {
  std::mt19937_64 rng(spec.seed);
  std::vector<RawDocument> docs;
  for (std::size_t d = 0; d < spec.documents; ++d) {
    const auto& topic = kTopics[std::uniform_int_distribution<std::size_t>(0, kTopics.size() - 1)(rng)];
    const std::size_t n =
        std::uniform_int_distribution<std::size_t>(spec.min_sentences, spec.max_sentences)(rng);
    std::size_t marker = std::uniform_int_distribution<std::size_t>(0, kMarkers.size() - 1)(rng);
    std::string text;
    for (std::size_t k = 0; k < n; ++k) {
      if (k) text += ' ';
      text += detail::sentence(kMarkers[(marker + k) % kMarkers.size()], topic, rng);
    }
    docs.push_back({"synthetic:" + std::to_string(d), std::move(text)});
  }
  return docs;
}

// Blank-line separated text, the input format of build_corpus.
inline std::string to_text(const std::vector<RawDocument>& docs) {
  std::string out;
  for (const auto& d : docs) out += d.text + "\n\n";
  return out;
}

inline Corpus corpus(const Vocabulary& vocab, const CorpusSpec& spec = {}) {
  return build_corpus_from_raw(documents(spec), vocab).first;
}

}  // namespace mtp::synthetic
