#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "mtp/checkpoint.hpp"
#include "mtp/corpus_store.hpp"
#include "mtp/error.hpp"
#include "mtp/losses.hpp"
#include "mtp/model.hpp"
#include "mtp/optim.hpp"
#include "mtp/scheduler.hpp"
#include "mtp/taskbuild.hpp"
#include "mtp/tokenizer.hpp"

namespace mtp {

struct TrainConfig {
  std::string corpus_path;
  std::string vocab_path;
  std::string output_dir;
  Strategy strategy = Strategy::kSum;
  std::vector<Task> tasks{Task::kMlm};
  std::uint64_t total_tokens = 0;
  std::size_t batch_size = 128;
  std::size_t max_seq_len = 128;
  std::uint64_t seed = 1;
  std::uint64_t checkpoint_interval = 0;  // tokens; 0 = total / 10
  double base_lr = 1e-4;
  double warmup_frac = 0.01;
  std::size_t layers = 2;
  std::size_t hidden = 64;
  std::size_t heads = 2;
  double dropout = 0.1;
  std::size_t vocab_size = 0;  // filled from the vocabulary
  double corruption_rate = 0.10;
  std::size_t prefetch = 4;  // queued batches; 0 builds inline

  std::uint64_t step_tokens() const { return std::uint64_t(batch_size) * max_seq_len; }

  ModelConfig model_config() const {
    ModelConfig m;
    m.layers = layers;
    m.hidden = hidden;
    m.heads = heads;
    m.vocab = vocab_size;
    m.max_seq_len = max_seq_len;
    m.dropout = dropout;
    return m;
  }
};

struct ConfigKey {
  const char* name;
  const char* help;
};

inline constexpr ConfigKey kTrainConfigKeys[] = {
    {"corpus", "path of the binary corpus store"},
    {"vocab", "path of the WordPiece vocabulary (one token per line)"},
    {"output_dir", "directory for metrics.jsonl and checkpoints (empty: none)"},
    {"strategy", "sum | inc | alt | alt_plus | cmtl | cmtl_plus"},
    {"tasks", "comma-separated task names (MLM,TF,TF-IDF,SBO,TGS,TCP,Cap,TLP,NSP,ASP,SO,SDP,SCP,QT,FS)"},
    {"total_tokens", "token budget; one step consumes batch_size * max_seq_len"},
    {"batch_size", "rows per batch (default 128)"},
    {"max_seq_len", "tokens per row including specials (default 128)"},
    {"seed", "seed for initialization, batches and dropout (default 1)"},
    {"checkpoint_interval", "tokens between checkpoints (default total_tokens / 10)"},
    {"base_lr", "peak learning rate (default 1e-4)"},
    {"warmup_frac", "fraction of tokens used for linear warmup (default 0.01)"},
    {"layers", "encoder layers (default 2)"},
    {"hidden", "hidden size (default 64)"},
    {"heads", "attention heads (default 2)"},
    {"dropout", "dropout probability (default 0.1)"},
    {"vocab_size", "vocabulary size; set from the vocabulary when omitted"},
    {"corruption_rate", "TCP/SCP corruption probability per token (default 0.10)"},
    {"prefetch", "batches built ahead on a worker thread (default 4; 0 = inline)"},
};

namespace detail {

template <typename V>
V parse_number(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    V out;
    if constexpr (std::is_floating_point_v<V>) {
      out = static_cast<V>(std::stod(value, &used));
    } else {
      const double d = std::stod(value, &used);
      if (d < 0 || d != std::floor(d)) throw std::invalid_argument("not a non-negative integer");
      out = static_cast<V>(d);
    }
    if (used != value.size()) throw std::invalid_argument("trailing characters");
    return out;
  } catch (const std::exception&) {
    fail("config: bad value '", value, "' for key '", key, "'");
  }
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

}  // namespace detail

inline void set_config_value(TrainConfig& c, const std::string& key, const std::string& value) {
  using detail::parse_number;
  if (key == "corpus") c.corpus_path = value;
  else if (key == "vocab") c.vocab_path = value;
  else if (key == "output_dir") c.output_dir = value;
  else if (key == "strategy") c.strategy = parse_strategy(value);
  else if (key == "tasks") c.tasks = parse_task_list(value);
  else if (key == "total_tokens") c.total_tokens = parse_number<std::uint64_t>(key, value);
  else if (key == "batch_size") c.batch_size = parse_number<std::size_t>(key, value);
  else if (key == "max_seq_len") c.max_seq_len = parse_number<std::size_t>(key, value);
  else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, value);
  else if (key == "checkpoint_interval") c.checkpoint_interval = parse_number<std::uint64_t>(key, value);
  else if (key == "base_lr") c.base_lr = parse_number<double>(key, value);
  else if (key == "warmup_frac") c.warmup_frac = parse_number<double>(key, value);
  else if (key == "layers") c.layers = parse_number<std::size_t>(key, value);
  else if (key == "hidden") c.hidden = parse_number<std::size_t>(key, value);
  else if (key == "heads") c.heads = parse_number<std::size_t>(key, value);
  else if (key == "dropout") c.dropout = parse_number<double>(key, value);
  else if (key == "vocab_size") c.vocab_size = parse_number<std::size_t>(key, value);
  else if (key == "corruption_rate") c.corruption_rate = parse_number<double>(key, value);
  else if (key == "prefetch") c.prefetch = parse_number<std::size_t>(key, value);
  else fail("config: unknown key '", key, "'");
}

// Flat key=value lines; '#' starts a comment.
inline TrainConfig parse_train_config(std::istream& in) {
  TrainConfig c;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) fail("config line ", lineno, ": expected key=value");
    set_config_value(c, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  return c;
}

inline TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail("config: cannot open '", path.string(), "'");
  return parse_train_config(in);
}

inline std::string format_train_config(const TrainConfig& c) {
  std::ostringstream o;
  o.precision(17);
  std::string tasks;
  for (Task t : c.tasks) tasks += (tasks.empty() ? "" : ",") + std::string(task_name(t));
  o << "corpus=" << c.corpus_path << "\n"
    << "vocab=" << c.vocab_path << "\n"
    << "output_dir=" << c.output_dir << "\n"
    << "strategy=" << strategy_name(c.strategy) << "\n"
    << "tasks=" << tasks << "\n"
    << "total_tokens=" << c.total_tokens << "\n"
    << "batch_size=" << c.batch_size << "\n"
    << "max_seq_len=" << c.max_seq_len << "\n"
    << "seed=" << c.seed << "\n"
    << "checkpoint_interval=" << c.checkpoint_interval << "\n"
    << "base_lr=" << c.base_lr << "\n"
    << "warmup_frac=" << c.warmup_frac << "\n"
    << "layers=" << c.layers << "\n"
    << "hidden=" << c.hidden << "\n"
    << "heads=" << c.heads << "\n"
    << "dropout=" << c.dropout << "\n"
    << "vocab_size=" << c.vocab_size << "\n"
    << "corruption_rate=" << c.corruption_rate << "\n"
    << "prefetch=" << c.prefetch << "\n";
  return o.str();
}

struct StepMetrics {
  std::uint64_t step = 0;
  std::uint64_t tokens_seen = 0;
  double lr = 0;
  std::map<Task, double> losses;
  double total_loss = 0;
  double wall_ms = 0;
  std::uint32_t task_id = 0;
  std::uint32_t stage = 0;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["step"] = step;
    j["tokens_seen"] = tokens_seen;
    j["lr"] = lr;
    j["task_id"] = task_id;
    j["stage"] = stage;
    nlohmann::ordered_json l = nlohmann::ordered_json::object();
    for (const auto& [t, v] : losses) l[std::string(task_name(t))] = v;
    j["losses"] = l;
    j["loss"] = total_loss;
    j["wall_ms"] = wall_ms;
    return j;
  }
};

// Fixed-capacity blocking queue between the batch builder and the step loop.
template <typename V>
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t capacity) : capacity_(std::max<std::size_t>(1, capacity)) {}

  // false once the queue is closed.
  bool push(V value) {
    std::unique_lock lock(mu_);
    not_full_.wait(lock, [&] { return closed_ || items_.size() < capacity_; });
    if (closed_) return false;
    items_.push_back(std::move(value));
    not_empty_.notify_one();
    return true;
  }

  // nullopt once closed and drained.
  std::optional<V> pop() {
    std::unique_lock lock(mu_);
    not_empty_.wait(lock, [&] { return closed_ || !items_.empty(); });
    if (items_.empty()) return std::nullopt;
    V v = std::move(items_.front());
    items_.pop_front();
    not_full_.notify_one();
    return v;
  }

  void close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    not_full_.notify_all();
    not_empty_.notify_all();
  }

 private:
  std::size_t capacity_;
  std::mutex mu_;
  std::condition_variable not_full_, not_empty_;
  std::deque<V> items_;
  bool closed_ = false;
};

namespace detail {
inline constexpr std::uint64_t kInitStream = 1;
inline constexpr std::uint64_t kBatchStream = 2;
inline constexpr std::uint64_t kDropoutStream = 3;
inline constexpr std::uint64_t kProbeStream = 4;
}  // namespace detail

inline TrainingBatch batch_for_step(const BatchBuilder& builder, const Schedule& schedule,
                                    std::uint64_t seed, std::uint64_t step) {
  const auto plan = next_step(schedule, step);
  Rng rng(mix_seed(seed, detail::kBatchStream, step));
  return builder.assemble(plan.tasks, plan.task_id, rng);
}

class Trainer {
 public:
  Trainer(TrainConfig config, const Corpus& corpus, const Vocabulary& vocab)
      : config_(prepare(std::move(config), vocab)),
        corpus_(corpus),
        vocab_(vocab),
        schedule_(make_schedule(config_.strategy, config_.tasks, config_.total_tokens, config_.step_tokens())),
        builder_(corpus, vocab, config_.batch_size, config_.max_seq_len,
                 BuildConfig{MaskingConfig{}, config_.corruption_rate}),
        model_(config_.model_config(), mix_seed(config_.seed, detail::kInitStream)) {
    if (corpus.vocab_hash != vocab.hash()) {
      fail("train: corpus vocab hash ", to_hex(corpus.vocab_hash), " does not match vocabulary ",
           to_hex(vocab.hash()));
    }
    if (schedule_.task_vocab() > model_.config().task_vocab) {
      fail("train: schedule uses ", schedule_.task_vocab(), " task ids, model supports ",
           model_.config().task_vocab);
    }
    adam_.init(model_.parameters());
  }

  const TrainConfig& config() const { return config_; }
  const Schedule& schedule() const { return schedule_; }
  Model<float>& model() { return model_; }
  const Model<float>& model() const { return model_; }
  const BatchBuilder& builder() const { return builder_; }
  std::uint64_t next_step() const { return next_step_; }
  std::uint64_t tokens_seen() const { return tokens_seen_; }
  bool finished() const { return next_step_ >= schedule_.size(); }

  CheckpointData checkpoint() const {
    return capture(model_, adam_, format_train_config(config_), next_step_, tokens_seen_);
  }

  void restore_from(const CheckpointData& c) {
    restore(c, model_, &adam_);
    if (c.next_step > schedule_.size()) fail("resume: checkpoint step ", c.next_step, " beyond schedule");
    next_step_ = c.next_step;
    tokens_seen_ = c.tokens_seen;
  }

  // Runs until the schedule ends or max_steps more steps have executed.
  // Writes metrics.jsonl and checkpoints when output_dir is set.
  std::vector<StepMetrics> run(std::optional<std::uint64_t> max_steps = std::nullopt,
                               const std::function<void(const StepMetrics&)>& on_step = {}) {
    const std::uint64_t end =
        max_steps ? std::min<std::uint64_t>(schedule_.size(), next_step_ + *max_steps) : schedule_.size();
    std::vector<StepMetrics> log;
    std::ofstream metrics;
    if (!config_.output_dir.empty()) {
      std::filesystem::create_directories(config_.output_dir);
      metrics.open(std::filesystem::path(config_.output_dir) / "metrics.jsonl",
                   next_step_ == 0 ? std::ios::trunc : std::ios::app);
      if (!metrics) fail("train: cannot write metrics in '", config_.output_dir, "'");
    }
    const std::uint64_t interval =
        config_.checkpoint_interval ? config_.checkpoint_interval
                                    : std::max<std::uint64_t>(1, schedule_.total_tokens() / 10);

    Prefetcher prefetch(*this, next_step_, end);
    while (next_step_ < end) {
      const auto t0 = std::chrono::steady_clock::now();
      TrainingBatch batch = prefetch.get(next_step_);
      StepMetrics m = step(batch);
      m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      if (metrics) metrics << m.to_json().dump() << "\n" << std::flush;
      if (on_step) on_step(m);
      log.push_back(std::move(m));
      if (!config_.output_dir.empty() &&
          (tokens_seen_ / interval != (tokens_seen_ - config_.step_tokens()) / interval || finished())) {
        const auto dir = std::filesystem::path(config_.output_dir);
        save_checkpoint(dir / ("checkpoint-" + std::to_string(next_step_) + ".mtpt"), checkpoint());
        if (finished()) save_checkpoint(dir / "final.mtpt", checkpoint());
      }
    }
    return log;
  }

 private:
  static TrainConfig prepare(TrainConfig c, const Vocabulary& vocab) {
    if (c.vocab_size == 0) c.vocab_size = vocab.size();
    if (c.vocab_size != vocab.size()) {
      fail("train: config vocab_size ", c.vocab_size, " differs from vocabulary size ", vocab.size());
    }
    if (c.tasks.empty()) fail("train: no tasks");
    if (c.batch_size == 0 || c.max_seq_len == 0) fail("train: batch_size and max_seq_len must be positive");
    if (c.total_tokens < c.step_tokens()) {
      fail("train: total_tokens ", c.total_tokens, " smaller than one batch (", c.step_tokens(), ")");
    }
    return c;
  }

  StepMetrics step(const TrainingBatch& batch) {
    const std::uint64_t k = next_step_;
    const auto& plan = schedule_.steps[k];
    Rng drop_rng(mix_seed(config_.seed, detail::kDropoutStream, k));
    auto hidden = model_.forward(batch, drop_rng, true);
    auto losses = batch_losses(model_, hidden, batch);
    auto total = combine_losses(losses);
    StepMetrics m;
    m.step = k;
    m.task_id = plan.task_id;
    m.stage = plan.stage;
    m.total_loss = total.item();
    for (const auto& l : losses) m.losses[l.task] = l.item();
    if (!std::isfinite(m.total_loss)) fail("train: non-finite loss at step ", k);
    zero_grads(model_.parameters());
    backward(total);
    tokens_seen_ += plan.tokens;
    m.tokens_seen = tokens_seen_;
    m.lr = lr_at(double(tokens_seen_), double(schedule_.total_tokens()), config_.base_lr, config_.warmup_frac);
    adam_step(model_.parameters(), adam_, m.lr);
    ++next_step_;
    return m;
  }

  // Builds batches [begin, end) ahead of the step loop on one worker.
  class Prefetcher {
   public:
    Prefetcher(const Trainer& t, std::uint64_t begin, std::uint64_t end) : t_(t), queue_(t.config_.prefetch) {
      if (t.config_.prefetch == 0 || begin >= end) return;
      worker_ = std::thread([this, begin, end] {
        try {
          for (std::uint64_t k = begin; k < end; ++k) {
            if (!queue_.push({k, batch_for_step(t_.builder_, t_.schedule_, t_.config_.seed, k)})) return;
          }
        } catch (...) {
          std::lock_guard lock(error_mu_);
          error_ = std::current_exception();
        }
        queue_.close();
      });
    }
    ~Prefetcher() {
      queue_.close();
      if (worker_.joinable()) worker_.join();
    }

    TrainingBatch get(std::uint64_t step) {
      if (!worker_.joinable()) return batch_for_step(t_.builder_, t_.schedule_, t_.config_.seed, step);
      auto item = queue_.pop();
      if (!item) {
        std::lock_guard lock(error_mu_);
        if (error_) std::rethrow_exception(error_);
        fail("train: batch queue ended before step ", step);
      }
      if (item->first != step) fail("train: batch for step ", item->first, " arrived at step ", step);
      return std::move(item->second);
    }

   private:
    const Trainer& t_;
    BoundedQueue<std::pair<std::uint64_t, TrainingBatch>> queue_;
    std::thread worker_;
    std::mutex error_mu_;
    std::exception_ptr error_;
  };

  TrainConfig config_;
  const Corpus& corpus_;
  const Vocabulary& vocab_;
  Schedule schedule_;
  BatchBuilder builder_;
  Model<float> model_;
  AdamState<float> adam_;
  std::uint64_t next_step_ = 0;
  std::uint64_t tokens_seen_ = 0;
};

// Rebuilds a trainer from a checkpoint, ready to continue.
inline Trainer resume_trainer(const CheckpointData& c, const Corpus& corpus, const Vocabulary& vocab) {
  std::istringstream in(c.config_text);
  Trainer t(parse_train_config(in), corpus, vocab);
  t.restore_from(c);
  return t;
}

inline Model<float> model_from_checkpoint(const CheckpointData& c) {
  std::istringstream in(c.config_text);
  const auto cfg = parse_train_config(in);
  Model<float> m(cfg.model_config(), 0);
  restore(c, m);
  return m;
}

// Mean per-task loss over `batches` fixed evaluation batches (no dropout).
template <typename T>
std::map<Task, double> evaluate_losses(const Model<T>& model, const BatchBuilder& builder,
                                       const TaskSet& tasks, std::size_t batches, std::uint64_t seed) {
  std::map<Task, double> sums;
  for (std::size_t i = 0; i < batches; ++i) {
    Rng rng(mix_seed(seed, 99, i));
    auto batch = builder.assemble(tasks, 0, rng);
    auto hidden = model.forward(batch, rng, false);
    for (const auto& l : batch_losses(model, hidden, batch)) sums[l.task] += l.item() / double(batches);
  }
  return sums;
}

// ------------------------------------------------------------------- probe

// Sentence-order probe: adjacent segment pairs from held-out documents,
// label 1 when swapped. A fresh 2-way head is trained on the pooled [CLS]
// features of the frozen encoder.
struct ProbeSpec {
  std::size_t train_pairs = 512;
  std::size_t test_pairs = 512;
  std::size_t epochs = 3;
  std::size_t batch = 16;
  std::size_t seq_len = 64;
  double lr = 1e-2;
  std::uint64_t seed = 1;
  // Every k-th document is held out for testing.
  std::size_t holdout_every = 4;
};

struct ProbeResult {
  double accuracy = 0;
  double train_accuracy = 0;
  std::size_t test_examples = 0;
};

namespace detail {

inline Corpus corpus_subset(const Corpus& c, std::size_t every, bool held_out) {
  Corpus out;
  out.vocab_hash = c.vocab_hash;
  for (std::size_t i = 0; i < c.documents.size(); ++i) {
    if ((i % every == 0) == held_out) out.documents.push_back(c.documents[i]);
  }
  if (out.documents.size() < 2) fail("probe: corpus too small to split (", c.documents.size(), " documents)");
  return out;
}

inline void probe_features(const Model<float>& model, const Corpus& corpus, const Vocabulary& vocab,
                           const ProbeSpec& spec, std::size_t pairs, std::uint64_t stream,
                           std::vector<float>& x, std::vector<int>& y) {
  BatchBuilder builder(corpus, vocab, spec.batch, spec.seq_len);
  const TaskSet so{Task::kSo};
  for (std::size_t b = 0; y.size() < pairs; ++b) {
    Rng rng(mix_seed(spec.seed, stream, b));
    auto batch = builder.assemble(so, 0, rng);
    auto hidden = model.forward(batch, rng, false);
    auto feats = model.pooled(hidden, batch.batch, batch.seq_len);
    const auto& labels = batch.labels.sentence.at(Task::kSo);
    for (std::size_t r = 0; r < batch.batch && y.size() < pairs; ++r) {
      auto row = feats.values().subspan(r * feats.cols(), feats.cols());
      x.insert(x.end(), row.begin(), row.end());
      y.push_back(labels[r]);
    }
  }
}

}  // namespace detail

inline ProbeResult evaluate_probe(const Model<float>& model, const Corpus& corpus, const Vocabulary& vocab,
                                  const ProbeSpec& spec = {}) {
  if (spec.seq_len > model.config().max_seq_len) {
    fail("probe: seq_len ", spec.seq_len, " exceeds model max_seq_len ", model.config().max_seq_len);
  }
  const Corpus train_c = detail::corpus_subset(corpus, spec.holdout_every, false);
  const Corpus test_c = detail::corpus_subset(corpus, spec.holdout_every, true);
  const std::size_t H = model.config().hidden;
  std::vector<float> xtr, xte;
  std::vector<int> ytr, yte;
  detail::probe_features(model, train_c, vocab, spec, spec.train_pairs, detail::kProbeStream, xtr, ytr);
  detail::probe_features(model, test_c, vocab, spec, spec.test_pairs, detail::kProbeStream + 1, xte, yte);

  // Pooled features of a barely trained encoder vary on a tiny scale; put
  // every dimension on unit scale using train-split statistics.
  for (std::size_t d = 0; d < H; ++d) {
    double sum = 0, sq = 0;
    for (std::size_t i = 0; i < ytr.size(); ++i) sum += xtr[i * H + d];
    const double mean = sum / double(ytr.size());
    for (std::size_t i = 0; i < ytr.size(); ++i) sq += (xtr[i * H + d] - mean) * (xtr[i * H + d] - mean);
    const double sd = std::max(std::sqrt(sq / double(ytr.size())), 1e-6);
    for (auto* x : {&xtr, &xte})
      for (std::size_t i = 0; i < x->size() / H; ++i) (*x)[i * H + d] = float(((*x)[i * H + d] - mean) / sd);
  }

  Rng rng(mix_seed(spec.seed, detail::kProbeStream, 1000));
  std::normal_distribution<double> normal(0.0, 0.02);
  std::vector<float> w0(H * 2);
  for (auto& v : w0) v = static_cast<float>(normal(rng));
  std::vector<Parameter<float>> head{{"probe.weight", Tensor<float>::from({H, 2}, w0, true), true},
                                     {"probe.bias", Tensor<float>::zeros({2}, true), false}};
  AdamState<float> adam;
  adam.config.weight_decay = 0;
  adam.init(head);

  auto logits_of = [&](const std::vector<float>& x, std::size_t begin, std::size_t n) {
    auto xs = Tensor<float>::from({n, H}, std::vector<float>(x.begin() + long(begin * H), x.begin() + long((begin + n) * H)));
    return add_row(matmul(xs, head[0].tensor), head[1].tensor);
  };

  std::vector<std::size_t> order(ytr.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < spec.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t s = 0; s < order.size(); s += spec.batch) {
      const std::size_t n = std::min(spec.batch, order.size() - s);
      std::vector<float> xb;
      std::vector<int> yb;
      for (std::size_t i = s; i < s + n; ++i) {
        xb.insert(xb.end(), xtr.begin() + long(order[i] * H), xtr.begin() + long((order[i] + 1) * H));
        yb.push_back(ytr[order[i]]);
      }
      auto loss = cross_entropy(logits_of(xb, 0, n), std::span<const int>(yb));
      zero_grads(head);
      backward(loss);
      adam_step(head, adam, spec.lr);
    }
  }

  auto accuracy = [&](const std::vector<float>& x, const std::vector<int>& y) {
    auto logits = logits_of(x, 0, y.size());
    std::size_t correct = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      const int pred = logits.at(i, 1) > logits.at(i, 0) ? 1 : 0;
      correct += pred == y[i];
    }
    return double(correct) / double(y.size());
  };
  ProbeResult r;
  r.accuracy = accuracy(xte, yte);
  r.train_accuracy = accuracy(xtr, ytr);
  r.test_examples = yte.size();
  return r;
}

}  // namespace mtp
