#pragma once

// Per-task example construction and fixed-shape batch assembly.
//
// Rows are built from token spans of stored documents. A batch uses one
// input structure for every row:
//   continuation  QT or FS present: row i + B/2 continues the text of row i
//   pair          a sentence-pair task present: [CLS] A [SEP] B [SEP]
//   single        otherwise: [CLS] A [SEP]
// Label-producing transforms then run in a fixed order: corruption (per
// segment), truncation, sentence-order swap, trigram shuffle, masking.

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "mtp/corpus_store.hpp"
#include "mtp/error.hpp"
#include "mtp/scheduler.hpp"
#include "mtp/tasks.hpp"
#include "mtp/tokenizer.hpp"

namespace mtp {

using Rng = std::mt19937_64;

// Derives an independent stream for (seed, stream, index) via splitmix64.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0) {
  auto splitmix = [](std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
  };
  return splitmix(splitmix(splitmix(seed) ^ stream) ^ index);
}

struct MaskingConfig {
  double select_prob = 0.15;
  double mask_frac = 0.8;    // selected -> [MASK]
  double random_frac = 0.1;  // selected -> uniform random non-special id
};

struct MaskedSequence {
  std::vector<TokenId> input_ids;
  std::map<std::size_t, TokenId> mlm_targets;
  std::vector<std::size_t> mask_positions;
};

namespace detail {

inline std::vector<TokenId> content_ids(const Vocabulary& vocab) {
  std::vector<TokenId> ids;
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    if (!vocab.is_special(static_cast<TokenId>(i))) ids.push_back(static_cast<TokenId>(i));
  }
  if (ids.empty()) fail("vocabulary has no non-special tokens");
  return ids;
}

inline TokenId random_content_id(const std::vector<TokenId>& pool, Rng& rng) {
  return pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
}

}  // namespace detail

// Every non-special position is selected independently with select_prob;
// selected tokens become [MASK] (80%), a random id (10%) or stay (10%). If
// nothing was selected but something could be, one position is forced.
inline MaskedSequence apply_mlm_mask(std::span<const TokenId> ids, const Vocabulary& vocab,
                                     Rng& rng, const MaskingConfig& cfg = {}) {
  static thread_local const Vocabulary* cached_vocab = nullptr;
  static thread_local std::vector<TokenId> pool;
  if (cached_vocab != &vocab || pool.empty()) {
    pool = detail::content_ids(vocab);
    cached_vocab = &vocab;
  }
  MaskedSequence out;
  out.input_ids.assign(ids.begin(), ids.end());
  std::vector<std::size_t> maskable;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (!vocab.is_special(ids[i])) maskable.push_back(i);
  }
  std::bernoulli_distribution select(cfg.select_prob);
  for (std::size_t i : maskable) {
    if (select(rng)) out.mask_positions.push_back(i);
  }
  if (out.mask_positions.empty() && !maskable.empty()) {
    out.mask_positions.push_back(
        maskable[std::uniform_int_distribution<std::size_t>(0, maskable.size() - 1)(rng)]);
  }
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t pos : out.mask_positions) {
    out.mlm_targets[pos] = ids[pos];
    double r = u(rng);
    if (r < cfg.mask_frac) {
      out.input_ids[pos] = vocab.mask_id();
    } else if (r < cfg.mask_frac + cfg.random_frac) {
      out.input_ids[pos] = detail::random_content_id(pool, rng);
    }
  }
  return out;
}

struct CorruptionRecord {
  std::vector<TokenId> corrupted_ids;
  std::vector<std::uint8_t> token_labels;
  bool sentence_label = false;
  // For each output position, the input position it came from, or -1 for an
  // inserted token.
  std::vector<int> source_index;
};

// Each non-special position is selected with probability `rate` and then
// undergoes one of insertion (a random token is inserted after it),
// replacement (random different id) or permutation (swap with an adjacent
// non-special position), chosen uniformly. Every token touched by an
// operation is labeled. Output is truncated to max_len when max_len > 0.
inline CorruptionRecord corrupt_tokens(std::span<const TokenId> ids, const Vocabulary& vocab,
                                       Rng& rng, double rate, std::size_t max_len = 0) {
  if (!(rate >= 0.0 && rate <= 0.5)) fail("corrupt_tokens: rate ", rate, " outside [0, 0.5]");
  const auto pool = detail::content_ids(vocab);
  const std::size_t n = ids.size();
  std::vector<TokenId> cur(ids.begin(), ids.end());
  std::vector<int> src(n);
  std::vector<std::uint8_t> lab(n, 0);
  for (std::size_t i = 0; i < n; ++i) src[i] = static_cast<int>(i);
  std::vector<std::uint8_t> insert_after(n, 0);

  std::bernoulli_distribution select(rate);
  std::uniform_int_distribution<int> kind(0, 2);
  for (std::size_t i = 0; i < n; ++i) {
    if (vocab.is_special(ids[i]) || !select(rng)) continue;
    switch (kind(rng)) {
      case 0:
        insert_after[i] = 1;
        break;
      case 1: {
        TokenId repl = detail::random_content_id(pool, rng);
        for (int tries = 0; repl == cur[i] && pool.size() > 1 && tries < 16; ++tries) {
          repl = detail::random_content_id(pool, rng);
        }
        cur[i] = repl;
        src[i] = -1;
        lab[i] = 1;
        break;
      }
      default: {
        std::array<std::size_t, 2> cands{};
        std::size_t nc = 0;
        if (i > 0 && !vocab.is_special(ids[i - 1])) cands[nc++] = i - 1;
        if (i + 1 < n && !vocab.is_special(ids[i + 1])) cands[nc++] = i + 1;
        if (nc == 0) break;
        std::size_t j = cands[nc == 1 ? 0 : std::uniform_int_distribution<std::size_t>(0, 1)(rng)];
        std::swap(cur[i], cur[j]);
        std::swap(src[i], src[j]);
        lab[i] = lab[j] = 1;
        break;
      }
    }
  }

  CorruptionRecord rec;
  for (std::size_t i = 0; i < n; ++i) {
    rec.corrupted_ids.push_back(cur[i]);
    rec.token_labels.push_back(lab[i]);
    rec.source_index.push_back(src[i]);
    if (insert_after[i]) {
      rec.corrupted_ids.push_back(detail::random_content_id(pool, rng));
      rec.token_labels.push_back(1);
      rec.source_index.push_back(-1);
    }
  }
  if (max_len > 0 && rec.corrupted_ids.size() > max_len) {
    rec.corrupted_ids.resize(max_len);
    rec.token_labels.resize(max_len);
    rec.source_index.resize(max_len);
  }
  rec.sentence_label = std::any_of(rec.token_labels.begin(), rec.token_labels.end(),
                                   [](auto v) { return v != 0; });
  return rec;
}

// One-line notations of S3 in lexicographic order; class k applies
// new[i] = old[kTrigramPermutations[k][i]].
inline constexpr std::array<std::array<int, 3>, 6> kTrigramPermutations = {
    {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}}};

struct TrigramShuffle {
  std::vector<TokenId> ids;
  std::size_t start = 0;
  int permutation_class = 0;
};

// Applies permutation `cls` to ids[start..start+3).
template <typename V>
void apply_trigram_permutation(std::vector<V>& v, std::size_t start, int cls) {
  const auto& p = kTrigramPermutations[static_cast<std::size_t>(cls)];
  std::array<V, 3> old{v[start], v[start + 1], v[start + 2]};
  for (int i = 0; i < 3; ++i) v[start + static_cast<std::size_t>(i)] = old[static_cast<std::size_t>(p[static_cast<std::size_t>(i)])];
}

// Picks one window of three consecutive non-special tokens uniformly and a
// uniformly random element of S3 to apply. nullopt when no window exists.
inline std::optional<TrigramShuffle> shuffle_trigram(std::span<const TokenId> ids,
                                                     const Vocabulary& vocab, Rng& rng) {
  std::vector<std::size_t> starts;
  for (std::size_t i = 0; i + 2 < ids.size(); ++i) {
    if (!vocab.is_special(ids[i]) && !vocab.is_special(ids[i + 1]) && !vocab.is_special(ids[i + 2])) {
      starts.push_back(i);
    }
  }
  if (starts.empty()) return std::nullopt;
  TrigramShuffle out;
  out.start = starts[std::uniform_int_distribution<std::size_t>(0, starts.size() - 1)(rng)];
  out.permutation_class = std::uniform_int_distribution<int>(0, 5)(rng);
  out.ids.assign(ids.begin(), ids.end());
  apply_trigram_permutation(out.ids, out.start, out.permutation_class);
  return out;
}

// ----------------------------------------------------------------- pairs

enum class PairMode { kSingle, kNsp, kAsp, kSo, kSdp };

inline int pair_label_count(PairMode m) {
  switch (m) {
    case PairMode::kNsp:
    case PairMode::kSo: return 2;
    case PairMode::kAsp:
    case PairMode::kSdp: return 3;
    case PairMode::kSingle: return 1;
  }
  return 1;
}

// Half-open token range [begin, end) of one stored document.
struct TokenSpan {
  std::size_t doc = 0;
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
};

struct SegmentPair {
  std::vector<TokenId> tokens_a;
  std::vector<TokenId> tokens_b;
  int pair_label = 0;
  PairMode pair_mode = PairMode::kSingle;
  // Source text of each segment as it appears in the row (after any swap).
  TokenSpan span_a;
  TokenSpan span_b;
};

namespace detail {

// Sentence index containing token offset `tok`.
inline std::size_t sentence_of(const StoredDocument& d, std::size_t tok) {
  auto it = std::upper_bound(d.sentence_offsets.begin(), d.sentence_offsets.end(),
                             static_cast<std::uint32_t>(tok));
  return static_cast<std::size_t>(it - d.sentence_offsets.begin()) - 1;
}

// Whole sentences from `first` forward while they fit in budget, never
// passing sentence `limit` (exclusive). A first sentence longer than the
// budget is truncated.
inline TokenSpan fill_forward(const StoredDocument& d, std::size_t doc, std::size_t first,
                              std::size_t limit, std::size_t budget) {
  TokenSpan s{doc, d.sentence_begin(first), d.sentence_begin(first)};
  for (std::size_t k = first; k < limit; ++k) {
    std::size_t len = d.sentence_end(k) - d.sentence_begin(k);
    if (s.size() + len > budget) {
      if (s.size() == 0) s.end = s.begin + budget;
      break;
    }
    s.end = d.sentence_end(k);
  }
  return s;
}

// Whole sentences ending at sentence `last_excl` (exclusive), growing
// backwards while they fit. A single overlong sentence keeps its tail.
inline TokenSpan fill_backward(const StoredDocument& d, std::size_t doc, std::size_t last_excl,
                               std::size_t budget) {
  TokenSpan s{doc, d.sentence_begin(last_excl), d.sentence_begin(last_excl)};
  for (std::size_t k = last_excl; k-- > 0;) {
    std::size_t len = d.sentence_end(k) - d.sentence_begin(k);
    if (s.size() + len > budget) {
      if (s.size() == 0) s.begin = s.end - budget;
      break;
    }
    s.begin = d.sentence_begin(k);
  }
  return s;
}

// Tokens from an arbitrary offset: the rest of the current sentence, then
// whole sentences while they fit.
inline TokenSpan fill_from_token(const StoredDocument& d, std::size_t doc, std::size_t start,
                                 std::size_t budget) {
  TokenSpan s{doc, start, start};
  std::size_t k = sentence_of(d, start);
  for (; k < d.sentence_count(); ++k) {
    std::size_t from = std::max<std::size_t>(start, d.sentence_begin(k));
    std::size_t len = d.sentence_end(k) - from;
    if (s.size() + len > budget) {
      if (s.size() == 0) s.end = s.begin + budget;
      break;
    }
    s.end = d.sentence_end(k);
  }
  return s;
}

inline std::vector<TokenId> span_ids(const Corpus& c, const TokenSpan& s) {
  const auto& d = c.documents[s.doc];
  std::vector<TokenId> ids;
  ids.reserve(s.size());
  for (std::size_t i = s.begin; i < s.end; ++i) ids.push_back(d.tokens[i].id);
  return ids;
}

template <typename T>
T uniform_index(Rng& rng, T lo, T hi) {  // inclusive
  return std::uniform_int_distribution<T>(lo, hi)(rng);
}

}  // namespace detail

// Builds one labeled sentence pair whose combined length fits `budget`
// tokens (max_seq_len - 3). Labels:
//   nsp  1 = B follows A, 0 = B from another document          (p = 1/2)
//   asp  0 = B follows A, 1 = B precedes A, 2 = other document (p = 1/3)
//   so   0 = adjacent in order, 1 = adjacent and swapped        (p = 1/2)
//   sdp  0 = B follows A, 1 = same document with a gap of at least one
//        sentence, 2 = other document                            (p = 1/3)
inline SegmentPair build_sentence_pair(const Corpus& corpus, PairMode mode, std::size_t budget,
                                       Rng& rng) {
  const std::size_t ndocs = corpus.documents.size();
  if (ndocs == 0) fail("build_sentence_pair: empty corpus");
  if (budget < 2) fail("build_sentence_pair: budget ", budget, " too small for two segments");
  if (mode == PairMode::kSingle) fail("build_sentence_pair: single mode has no pair");
  if (mode != PairMode::kSo && ndocs < 2) {
    fail("build_sentence_pair: mode needs a different document but the corpus has one");
  }

  enum class Rel { kFollows, kPrecedes, kForeign, kGap };
  int label = 0;
  Rel rel = Rel::kFollows;
  switch (mode) {
    case PairMode::kNsp:
      label = std::bernoulli_distribution(0.5)(rng) ? 1 : 0;
      rel = label == 1 ? Rel::kFollows : Rel::kForeign;
      break;
    case PairMode::kAsp:
      label = detail::uniform_index(rng, 0, 2);
      rel = label == 0 ? Rel::kFollows : label == 1 ? Rel::kPrecedes : Rel::kForeign;
      break;
    case PairMode::kSo:
      label = std::bernoulli_distribution(0.5)(rng) ? 1 : 0;
      rel = Rel::kFollows;
      break;
    case PairMode::kSdp:
      label = detail::uniform_index(rng, 0, 2);
      rel = label == 0 ? Rel::kFollows : label == 1 ? Rel::kGap : Rel::kForeign;
      break;
    case PairMode::kSingle: break;
  }

  const std::size_t budget_a = std::max<std::size_t>(1, budget / 2);
  for (int attempt = 0; attempt < 1000; ++attempt) {
    const std::size_t di = detail::uniform_index<std::size_t>(rng, 0, ndocs - 1);
    const auto& d = corpus.documents[di];
    const std::size_t n = d.sentence_count();
    if (n < 2 && rel != Rel::kForeign) continue;
    SegmentPair pair;
    pair.pair_mode = mode;
    pair.pair_label = label;
    switch (rel) {
      case Rel::kFollows: {
        std::size_t sa = detail::uniform_index<std::size_t>(rng, 0, n - 2);
        pair.span_a = detail::fill_forward(d, di, sa, n - 1, budget_a);
        // If A was cut inside a sentence, B resumes at the cut.
        pair.span_b = detail::fill_from_token(d, di, pair.span_a.end, budget - pair.span_a.size());
        break;
      }
      case Rel::kPrecedes: {
        std::size_t sa = detail::uniform_index<std::size_t>(rng, 1, n - 1);
        pair.span_a = detail::fill_forward(d, di, sa, n, budget_a);
        pair.span_b = detail::fill_backward(d, di, sa, budget - pair.span_a.size());
        break;
      }
      case Rel::kForeign: {
        std::size_t sa = detail::uniform_index<std::size_t>(rng, 0, n - 1);
        pair.span_a = detail::fill_forward(d, di, sa, n, budget_a);
        std::size_t dj = detail::uniform_index<std::size_t>(rng, 0, ndocs - 2);
        if (dj >= di) ++dj;
        const auto& e = corpus.documents[dj];
        std::size_t sb = detail::uniform_index<std::size_t>(rng, 0, e.sentence_count() - 1);
        pair.span_b = detail::fill_forward(e, dj, sb, e.sentence_count(), budget - pair.span_a.size());
        break;
      }
      case Rel::kGap: {
        std::size_t sa = detail::uniform_index<std::size_t>(rng, 0, n - 1);
        pair.span_a = detail::fill_forward(d, di, sa, n, budget_a);
        const std::size_t first_a = sa;
        const std::size_t last_a = detail::sentence_of(d, pair.span_a.end - 1);
        // B starts at least two sentences after A's last sentence, or ends at
        // least one sentence before A's first.
        std::vector<std::size_t> starts;
        for (std::size_t j = last_a + 2; j < n; ++j) starts.push_back(j);
        for (std::size_t j = 0; j + 2 <= first_a; ++j) starts.push_back(j);
        if (starts.empty()) continue;
        std::size_t sb = starts[detail::uniform_index<std::size_t>(rng, 0, starts.size() - 1)];
        std::size_t limit = sb > last_a ? n : first_a - 1;
        pair.span_b = detail::fill_forward(d, di, sb, limit, budget - pair.span_a.size());
        break;
      }
    }
    if (pair.span_a.size() == 0 || pair.span_b.size() == 0) continue;
    if (mode == PairMode::kSo && label == 1) std::swap(pair.span_a, pair.span_b);
    pair.tokens_a = detail::span_ids(corpus, pair.span_a);
    pair.tokens_b = detail::span_ids(corpus, pair.span_b);
    return pair;
  }
  fail("build_sentence_pair: could not sample a valid pair; documents too short for budget ",
       budget);
}

// ----------------------------------------------------------------- batches

struct BuildConfig {
  MaskingConfig masking;
  double corruption_rate = 0.10;
};

// Where each row's text came from, in corpus token offsets, before any
// label-producing transform. Continuation rows also record the partner.
struct RowProvenance {
  TokenSpan a;
  std::optional<TokenSpan> b;
  bool swapped = false;  // segments appear as [B-text, A-text] in the row
};

struct BatchLabels {
  // Masked positions (flat index row*L + pos) and their original ids.
  std::vector<int> mlm_positions;
  std::vector<int> mlm_targets;
  // For each masked position, flat index of the left and right neighbours.
  std::vector<int> sbo_left;
  std::vector<int> sbo_right;

  // Per position (B*L); valid marks content tokens.
  std::vector<std::uint8_t> token_valid;
  std::vector<float> tf;
  std::vector<float> tfidf;
  std::vector<float> tlp;
  std::vector<int> cap;
  std::vector<int> tcp;

  // Per row: trigram start position within the row (-1 when skipped) and
  // the permutation class applied.
  std::vector<int> tgs_start;
  std::vector<int> tgs_class;

  // Per-row sentence labels, populated for the tasks present.
  std::map<Task, std::vector<int>> sentence;
};

struct TrainingBatch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<TokenId> input_ids;
  std::vector<std::uint8_t> type_ids;
  std::vector<std::uint8_t> attention_mask;
  // Real positions whose input id is not a special token ([MASK] included).
  std::vector<std::uint8_t> content_mask;
  std::uint32_t task_id = 0;
  TaskSet tasks;
  bool continuation_paired = false;
  BatchLabels labels;
  std::vector<RowProvenance> provenance;
  // Length of segment A (in tokens, excluding specials) per row as placed.
  std::vector<std::size_t> len_a;
  std::vector<std::size_t> len_b;

  std::size_t row_length(std::size_t r) const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < seq_len; ++i) n += attention_mask[r * seq_len + i];
    return n;
  }
};

namespace detail {

struct TokenInfo {
  TokenId id = 0;
  float tf = 0;
  float tfidf = 0;
  std::uint8_t cap = 0;
  float length = 1;
  std::uint8_t corrupted = 0;
};

inline std::vector<TokenInfo> span_info(const Corpus& c, const TokenSpan& s) {
  const auto& d = c.documents[s.doc];
  std::vector<TokenInfo> out;
  out.reserve(s.size());
  for (std::size_t i = s.begin; i < s.end; ++i) {
    out.push_back({d.tokens[i].id, d.tf[i], d.tfidf[i],
                   static_cast<std::uint8_t>(d.tokens[i].source_capitalized ? 1 : 0),
                   static_cast<float>(d.tokens[i].source_char_length), 0});
  }
  return out;
}

}  // namespace detail

class BatchBuilder {
 public:
  BatchBuilder(const Corpus& corpus, const Vocabulary& vocab, std::size_t batch,
               std::size_t seq_len, BuildConfig cfg = {})
      : corpus_(corpus), vocab_(vocab), batch_(batch), seq_len_(seq_len), cfg_(cfg) {
    if (corpus.documents.empty()) fail("batch builder: empty corpus");
    if (batch == 0) fail("batch builder: batch size must be positive");
    if (seq_len < 8) fail("batch builder: max_seq_len ", seq_len, " too small (need >= 8)");
    if (corpus.vocab_hash != vocab.hash()) fail("batch builder: corpus vocab hash does not match vocabulary");
  }

  std::size_t batch_size() const { return batch_; }
  std::size_t seq_len() const { return seq_len_; }
  const Vocabulary& vocab() const { return vocab_; }
  const Corpus& corpus() const { return corpus_; }

  TrainingBatch assemble(const TaskSet& tasks, std::uint32_t task_id, Rng& rng) const {
    if (tasks.empty()) fail("assemble_batch: empty task set");
    validate_compatibility(tasks);
    TrainingBatch b;
    b.batch = batch_;
    b.seq_len = seq_len_;
    b.tasks = tasks;
    b.task_id = task_id;
    b.continuation_paired = tasks.any(needs_continuation_pairing);
    const std::size_t L = seq_len_;
    b.input_ids.assign(batch_ * L, vocab_.pad_id());
    b.type_ids.assign(batch_ * L, 0);
    b.attention_mask.assign(batch_ * L, 0);
    b.provenance.resize(batch_);
    b.len_a.assign(batch_, 0);
    b.len_b.assign(batch_, 0);

    auto& lab = b.labels;
    lab.token_valid.assign(batch_ * L, 0);
    lab.tf.assign(batch_ * L, 0.f);
    lab.tfidf.assign(batch_ * L, 0.f);
    lab.tlp.assign(batch_ * L, 0.f);
    lab.cap.assign(batch_ * L, 0);
    lab.tcp.assign(batch_ * L, 0);
    lab.tgs_start.assign(batch_, -1);
    lab.tgs_class.assign(batch_, 0);
    for (Task t : {Task::kNsp, Task::kAsp, Task::kSo, Task::kSdp, Task::kScp}) {
      if (tasks.contains(t)) lab.sentence[t].assign(batch_, 0);
    }

    PairMode mode = PairMode::kSingle;
    if (tasks.contains(Task::kNsp)) mode = PairMode::kNsp;
    if (tasks.contains(Task::kAsp)) mode = PairMode::kAsp;
    if (tasks.contains(Task::kSdp)) mode = PairMode::kSdp;
    if (tasks.contains(Task::kSo)) mode = PairMode::kSo;
    const bool paired_rows = mode != PairMode::kSingle;
    const std::size_t budget = L - (paired_rows ? 3 : 2);

    // Segment spans and pair labels per row.
    std::vector<TokenSpan> seg_a(batch_), seg_b(batch_);
    std::vector<int> pair_label(batch_, 0);
    if (b.continuation_paired) {
      if (batch_ % 2 != 0) fail("assemble_batch: continuation pairing needs an even batch, got ", batch_);
      const std::size_t half = batch_ / 2;
      for (std::size_t r = 0; r < half; ++r) {
        auto [first, second] = continuation_runs(budget, rng);
        b.provenance[r].a = first;
        b.provenance[r].b = second;
        b.provenance[r + half].a = second;
        b.provenance[r + half].b = first;
      }
      for (std::size_t r = 0; r < batch_; ++r) {
        const TokenSpan run = b.provenance[r].a;
        if (!paired_rows) {
          seg_a[r] = run;
          continue;
        }
        auto [x, y] = split_run(run);
        seg_a[r] = x;
        seg_b[r] = y;
        if (mode == PairMode::kSo && std::bernoulli_distribution(0.5)(rng)) {
          std::swap(seg_a[r], seg_b[r]);
          pair_label[r] = 1;
          b.provenance[r].swapped = true;
        }
      }
    } else if (paired_rows) {
      for (std::size_t r = 0; r < batch_; ++r) {
        auto pair = build_sentence_pair(corpus_, mode, budget, rng);
        seg_a[r] = pair.span_a;
        seg_b[r] = pair.span_b;
        pair_label[r] = pair.pair_label;
        b.provenance[r].a = pair.span_a;
        b.provenance[r].b = pair.span_b;
        b.provenance[r].swapped = mode == PairMode::kSo && pair.pair_label == 1;
      }
    } else {
      for (std::size_t r = 0; r < batch_; ++r) {
        seg_a[r] = single_run(budget, rng);
        b.provenance[r].a = seg_a[r];
      }
    }

    const bool corrupt = tasks.contains(Task::kTcp) || tasks.contains(Task::kScp);
    const bool mask = tasks.contains(Task::kMlm) || tasks.contains(Task::kSbo);
    for (std::size_t r = 0; r < batch_; ++r) {
      auto a = detail::span_info(corpus_, seg_a[r]);
      std::vector<detail::TokenInfo> bseg;
      if (paired_rows) bseg = detail::span_info(corpus_, seg_b[r]);
      if (corrupt) {
        a = corrupt_segment(a, seg_a[r].doc, rng);
        if (paired_rows) bseg = corrupt_segment(bseg, seg_b[r].doc, rng);
      }
      while (a.size() + bseg.size() > budget) {
        if (a.size() > bseg.size()) a.pop_back();
        else bseg.pop_back();
      }
      b.len_a[r] = a.size();
      b.len_b[r] = bseg.size();

      // Row layout.
      std::vector<detail::TokenInfo> row;
      std::vector<std::uint8_t> types;
      row.push_back({vocab_.cls_id()});
      types.push_back(0);
      for (auto& t : a) {
        row.push_back(t);
        types.push_back(0);
      }
      row.push_back({vocab_.sep_id()});
      types.push_back(0);
      if (paired_rows) {
        for (auto& t : bseg) {
          row.push_back(t);
          types.push_back(1);
        }
        row.push_back({vocab_.sep_id()});
        types.push_back(1);
      }

      std::vector<TokenId> ids;
      for (auto& t : row) ids.push_back(t.id);
      if (tasks.contains(Task::kTgs)) {
        if (auto sh = shuffle_trigram(ids, vocab_, rng)) {
          apply_trigram_permutation(row, sh->start, sh->permutation_class);
          ids = sh->ids;
          lab.tgs_start[r] = static_cast<int>(sh->start);
          lab.tgs_class[r] = sh->permutation_class;
        }
      }
      if (mask) {
        auto m = apply_mlm_mask(ids, vocab_, rng, cfg_.masking);
        for (std::size_t pos : m.mask_positions) {
          const int flat = static_cast<int>(r * L + pos);
          lab.mlm_positions.push_back(flat);
          lab.mlm_targets.push_back(m.mlm_targets.at(pos));
          lab.sbo_left.push_back(flat - 1);
          lab.sbo_right.push_back(flat + 1);
        }
        ids = std::move(m.input_ids);
      }

      bool any_corrupt = false;
      for (std::size_t i = 0; i < row.size(); ++i) {
        const std::size_t flat = r * L + i;
        b.input_ids[flat] = ids[i];
        b.type_ids[flat] = types[i];
        b.attention_mask[flat] = 1;
        if (vocab_.is_structural(row[i].id)) continue;
        lab.token_valid[flat] = 1;
        lab.tf[flat] = row[i].tf;
        lab.tfidf[flat] = row[i].tfidf;
        lab.tlp[flat] = row[i].length;
        lab.cap[flat] = row[i].cap;
        lab.tcp[flat] = row[i].corrupted;
        any_corrupt = any_corrupt || row[i].corrupted;
      }

      for (Task t : {Task::kNsp, Task::kAsp, Task::kSo, Task::kSdp}) {
        if (tasks.contains(t)) lab.sentence[t][r] = pair_label[r];
      }
      if (tasks.contains(Task::kScp)) lab.sentence[Task::kScp][r] = any_corrupt ? 1 : 0;
    }
    b.content_mask.assign(batch_ * L, 0);
    for (std::size_t i = 0; i < batch_ * L; ++i) {
      b.content_mask[i] = b.attention_mask[i] && !vocab_.is_special(b.input_ids[i]);
    }
    return b;
  }

 private:
  TokenSpan single_run(std::size_t budget, Rng& rng) const {
    const std::size_t di = detail::uniform_index<std::size_t>(rng, 0, corpus_.documents.size() - 1);
    const auto& d = corpus_.documents[di];
    const std::size_t s = detail::uniform_index<std::size_t>(rng, 0, d.sentence_count() - 1);
    return detail::fill_forward(d, di, s, d.sentence_count(), budget);
  }

  // Two consecutive runs of one document: the second starts at the token
  // where the first ends.
  std::pair<TokenSpan, TokenSpan> continuation_runs(std::size_t budget, Rng& rng) const {
    for (int attempt = 0; attempt < 1000; ++attempt) {
      const std::size_t di = detail::uniform_index<std::size_t>(rng, 0, corpus_.documents.size() - 1);
      const auto& d = corpus_.documents[di];
      const std::size_t n = d.sentence_count();
      if (n < 2) continue;
      const std::size_t s = detail::uniform_index<std::size_t>(rng, 0, n - 2);
      TokenSpan first = detail::fill_forward(d, di, s, n, budget);
      if (first.end >= d.token_count()) continue;
      TokenSpan second = detail::fill_from_token(d, di, first.end, budget);
      if (second.size() == 0) continue;
      return {first, second};
    }
    fail("assemble_batch: no document long enough for continuation pairing");
  }

  // Splits a run into two non-empty adjacent segments at the sentence
  // boundary closest to its middle, or at the token midpoint when the run
  // has no interior boundary.
  std::pair<TokenSpan, TokenSpan> split_run(const TokenSpan& run) const {
    const auto& d = corpus_.documents[run.doc];
    const std::size_t mid = run.begin + run.size() / 2;
    std::size_t best = 0;
    bool found = false;
    for (auto off : d.sentence_offsets) {
      if (off <= run.begin || off >= run.end) continue;
      auto dist = [&](std::size_t x) { return x > mid ? x - mid : mid - x; };
      if (!found || dist(off) < dist(best)) {
        best = off;
        found = true;
      }
    }
    if (!found) best = std::max(run.begin + 1, mid);
    if (best >= run.end) best = run.end - 1;
    return {TokenSpan{run.doc, run.begin, best}, TokenSpan{run.doc, best, run.end}};
  }

  std::vector<detail::TokenInfo> corrupt_segment(const std::vector<detail::TokenInfo>& seg,
                                                 std::size_t doc, Rng& rng) const {
    std::vector<TokenId> ids;
    for (const auto& t : seg) ids.push_back(t.id);
    auto rec = corrupt_tokens(ids, vocab_, rng, cfg_.corruption_rate);
    // Tokens that are new at a position take document-level statistics of
    // their id (0 if absent), no casing, and their own piece length.
    const auto& d = corpus_.documents[doc];
    auto stats_of = [&](TokenId id) {
      for (std::size_t i = 0; i < d.tokens.size(); ++i) {
        if (d.tokens[i].id == id) return std::pair{d.tf[i], d.tfidf[i]};
      }
      return std::pair{0.f, 0.f};
    };
    std::vector<detail::TokenInfo> out;
    for (std::size_t i = 0; i < rec.corrupted_ids.size(); ++i) {
      detail::TokenInfo info;
      if (rec.source_index[i] >= 0) {
        info = seg[static_cast<std::size_t>(rec.source_index[i])];
      } else {
        info.id = rec.corrupted_ids[i];
        auto [tf, tfidf] = stats_of(info.id);
        info.tf = tf;
        info.tfidf = tfidf;
        info.cap = 0;
        info.length = static_cast<float>(piece_char_length(info.id, vocab_));
      }
      info.corrupted = rec.token_labels[i];
      out.push_back(info);
    }
    return out;
  }

  const Corpus& corpus_;
  const Vocabulary& vocab_;
  std::size_t batch_;
  std::size_t seq_len_;
  BuildConfig cfg_;
};

inline TrainingBatch assemble_batch(const TaskSet& tasks, const Corpus& corpus,
                                    const Vocabulary& vocab, std::size_t batch,
                                    std::size_t seq_len, Rng& rng, std::uint32_t task_id = 0,
                                    BuildConfig cfg = {}) {
  return BatchBuilder(corpus, vocab, batch, seq_len, cfg).assemble(tasks, task_id, rng);
}

}  // namespace mtp
