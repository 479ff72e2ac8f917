#pragma once

// Binary corpus store. Layout (all integers little-endian):
//
//   header:  "MTPC" | u32 version | u64 document count | 32-byte vocab SHA-256
//   record:  u32 payload bytes, then payload:
//              u32 id bytes, id (UTF-8)
//              u32 S, u32 sentence token offsets[S + 1]
//              u32 N, i32 token ids[N]
//              u8 flags[N]         bit 0 word start, bit 1 source capitalized
//              u16 char length[N]  source characters of the piece
//              f32 tf[N], f32 tfidf[N]   per position, document-scaled [0, 10]
//
// See docs/corpus_format.md.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "mtp/corpus.hpp"
#include "mtp/error.hpp"
#include "mtp/sha256.hpp"
#include "mtp/tokenizer.hpp"

namespace mtp {

inline constexpr char kCorpusMagic[4] = {'M', 'T', 'P', 'C'};
inline constexpr std::uint32_t kCorpusVersion = 1;

struct StoredDocument {
  std::string id;
  // Token offsets of sentence starts; back() == tokens.size().
  std::vector<std::uint32_t> sentence_offsets;
  std::vector<EncodedToken> tokens;
  std::vector<float> tf;
  std::vector<float> tfidf;

  std::size_t sentence_count() const { return sentence_offsets.size() - 1; }
  std::size_t token_count() const { return tokens.size(); }
  std::size_t sentence_begin(std::size_t s) const { return sentence_offsets[s]; }
  std::size_t sentence_end(std::size_t s) const { return sentence_offsets[s + 1]; }
};

struct Corpus {
  Digest vocab_hash{};
  std::vector<StoredDocument> documents;
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(const void* p, std::size_t n) {
    auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(const std::uint8_t* data, std::size_t size) : p_(data), end_(data + size) {}
  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  float f32() { return std::bit_cast<float>(u32()); }
  void bytes(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, p_, n);
    p_ += n;
  }
  std::string str() {
    std::string s(u32(), '\0');
    bytes(s.data(), s.size());
    return s;
  }
  std::size_t remaining() const { return static_cast<std::size_t>(end_ - p_); }

 private:
  void need(std::size_t n) const {
    if (remaining() < n) fail("corpus store: truncated data");
  }
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= std::uint64_t(p_[i]) << (8 * i);
    p_ += n;
    return v;
  }
  const std::uint8_t* p_;
  const std::uint8_t* end_;
};

}  // namespace detail

inline std::vector<std::uint8_t> serialize_corpus(const Corpus& corpus) {
  detail::ByteWriter w;
  w.bytes(kCorpusMagic, 4);
  w.u32(kCorpusVersion);
  w.u64(corpus.documents.size());
  w.bytes(corpus.vocab_hash.data(), corpus.vocab_hash.size());
  for (const auto& d : corpus.documents) {
    detail::ByteWriter r;
    r.str(d.id);
    r.u32(static_cast<std::uint32_t>(d.sentence_count()));
    for (auto off : d.sentence_offsets) r.u32(off);
    r.u32(static_cast<std::uint32_t>(d.tokens.size()));
    for (const auto& t : d.tokens) r.i32(t.id);
    for (const auto& t : d.tokens) {
      r.u8(static_cast<std::uint8_t>((t.is_word_start ? 1 : 0) | (t.source_capitalized ? 2 : 0)));
    }
    for (const auto& t : d.tokens) {
      r.u16(static_cast<std::uint16_t>(std::min<std::uint32_t>(t.source_char_length, 0xFFFF)));
    }
    for (float v : d.tf) r.f32(v);
    for (float v : d.tfidf) r.f32(v);
    w.u32(static_cast<std::uint32_t>(r.buffer().size()));
    w.bytes(r.buffer().data(), r.buffer().size());
  }
  return std::move(w.buffer());
}

inline Corpus deserialize_corpus(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader in(bytes.data(), bytes.size());
  char magic[4];
  in.bytes(magic, 4);
  if (std::memcmp(magic, kCorpusMagic, 4) != 0) fail("corpus store: bad magic");
  const auto version = in.u32();
  if (version != kCorpusVersion) fail("corpus store: unsupported version ", version);
  Corpus corpus;
  const auto count = in.u64();
  in.bytes(corpus.vocab_hash.data(), corpus.vocab_hash.size());
  corpus.documents.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto payload = in.u32();
    if (payload > in.remaining()) fail("corpus store: record ", i, " truncated");
    StoredDocument d;
    d.id = in.str();
    const auto s = in.u32();
    d.sentence_offsets.resize(s + 1);
    for (auto& off : d.sentence_offsets) off = in.u32();
    const auto n = in.u32();
    if (d.sentence_offsets.back() != n) fail("corpus store: record ", i, " offsets inconsistent");
    d.tokens.resize(n);
    for (auto& t : d.tokens) t.id = in.i32();
    for (auto& t : d.tokens) {
      auto f = in.u8();
      t.is_word_start = f & 1;
      t.source_capitalized = f & 2;
    }
    for (auto& t : d.tokens) t.source_char_length = in.u16();
    d.tf.resize(n);
    d.tfidf.resize(n);
    for (auto& v : d.tf) v = in.f32();
    for (auto& v : d.tfidf) v = in.f32();
    corpus.documents.push_back(std::move(d));
  }
  if (in.remaining() != 0) fail("corpus store: trailing bytes");
  return corpus;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot read '", path.string(), "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path,
                             const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail("cannot write '", path.string(), "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail("write failed for '", path.string(), "'");
}

inline Corpus load_corpus(const std::filesystem::path& path) {
  return deserialize_corpus(read_file_bytes(path));
}

// Builds the stored form of a document from its text-level form.
inline StoredDocument to_stored(const Document& doc, const CorpusStats& stats) {
  StoredDocument d;
  d.id = doc.id;
  d.sentence_offsets.push_back(0);
  for (const auto& s : doc.sentences) {
    d.tokens.insert(d.tokens.end(), s.tokens.begin(), s.tokens.end());
    d.sentence_offsets.push_back(static_cast<std::uint32_t>(d.tokens.size()));
  }
  const auto ids = doc.token_ids();
  const auto tf = compute_tf(ids);
  const auto tfidf = compute_tfidf(ids, stats);
  for (TokenId id : ids) {
    d.tf.push_back(static_cast<float>(tf.at(id)));
    d.tfidf.push_back(static_cast<float>(tfidf.at(id)));
  }
  return d;
}

struct BuildSummary {
  std::size_t raw_documents = 0;
  std::size_t accepted = 0;
  std::size_t rejected = 0;
  std::size_t segments = 0;
  CorpusStats stats;
  Digest store_hash{};
};

// Filters, segments and annotates raw documents in order. Document
// frequencies are counted over the final segments.
inline std::pair<Corpus, BuildSummary> build_corpus_from_raw(
    const std::vector<RawDocument>& raw_docs, const Vocabulary& vocab,
    std::size_t target_tokens = kDefaultSegmentTokens) {
  BuildSummary summary;
  std::vector<Document> segments;
  for (const auto& raw : raw_docs) {
    ++summary.raw_documents;
    auto doc = filter_document(raw, vocab);
    if (!doc) {
      ++summary.rejected;
      continue;
    }
    ++summary.accepted;
    for (auto& seg : segment_document(*doc, target_tokens)) segments.push_back(std::move(seg));
  }
  if (summary.accepted == 0) fail("build_corpus: zero accepted documents");
  summary.segments = segments.size();
  for (const auto& seg : segments) summary.stats.add_document(seg.token_ids());

  Corpus corpus;
  corpus.vocab_hash = vocab.hash();
  corpus.documents.reserve(segments.size());
  for (const auto& seg : segments) corpus.documents.push_back(to_stored(seg, summary.stats));
  return {std::move(corpus), std::move(summary)};
}

// Reads blank-line separated documents from each file, in the given order.
// Document ids are "<file name>:<block index>".
inline std::vector<RawDocument> read_raw_documents(const std::vector<std::filesystem::path>& inputs) {
  std::vector<RawDocument> docs;
  for (const auto& path : inputs) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("build_corpus: cannot read '", path.string(), "'");
    std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    auto blocks = split_blank_line_blocks(text);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      docs.push_back({path.filename().string() + ":" + std::to_string(b), std::move(blocks[b])});
    }
  }
  return docs;
}

inline std::pair<Corpus, BuildSummary> build_corpus_in_memory(
    const std::vector<std::filesystem::path>& inputs, const Vocabulary& vocab,
    std::size_t target_tokens = kDefaultSegmentTokens) {
  return build_corpus_from_raw(read_raw_documents(inputs), vocab, target_tokens);
}

inline BuildSummary build_corpus(const std::vector<std::filesystem::path>& inputs,
                                 const std::filesystem::path& output, const Vocabulary& vocab,
                                 std::size_t target_tokens = kDefaultSegmentTokens) {
  auto [corpus, summary] = build_corpus_in_memory(inputs, vocab, target_tokens);
  const auto bytes = serialize_corpus(corpus);
  summary.store_hash = sha256(std::span<const std::uint8_t>(bytes));
  write_file_bytes(output, bytes);
  return summary;
}

}  // namespace mtp
