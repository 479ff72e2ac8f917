#pragma once

// BERT-style encoder with learned task embeddings and one head per task.
// Hidden states are kept as [batch * seq, hidden] matrices.

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "mtp/error.hpp"
#include "mtp/optim.hpp"
#include "mtp/taskbuild.hpp"
#include "mtp/tasks.hpp"
#include "mtp/tensor.hpp"

namespace mtp {

struct ModelConfig {
  std::size_t layers = 2;
  std::size_t hidden = 64;
  std::size_t heads = 2;
  std::size_t vocab = 0;
  std::size_t max_seq_len = 128;
  std::size_t type_vocab = 2;
  std::size_t task_vocab = kTaskCount;
  double dropout = 0.1;
  // Heads to instantiate.
  TaskSet head_tasks = TaskSet(kAllTasks.begin(), kAllTasks.end());

  std::size_t ffn() const { return 4 * hidden; }

  void validate() const {
    if (layers == 0) fail("model config: layers must be positive");
    if (hidden == 0 || heads == 0 || hidden % heads != 0) {
      fail("model config: hidden ", hidden, " not divisible by heads ", heads);
    }
    if (vocab == 0) fail("model config: vocab size must be positive");
    if (max_seq_len < 2) fail("model config: max_seq_len must be >= 2");
    if (task_vocab == 0) fail("model config: task_vocab must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) fail("model config: dropout ", dropout, " outside [0,1)");
  }
};

inline int task_classes(Task t) {
  switch (t) {
    case Task::kCap:
    case Task::kTcp:
    case Task::kNsp:
    case Task::kSo:
    case Task::kScp: return 2;
    case Task::kAsp:
    case Task::kSdp: return 3;
    case Task::kTgs: return 6;
    default: return 0;
  }
}

inline bool is_regression_task(Task t) {
  return t == Task::kTf || t == Task::kTfIdf || t == Task::kTlp;
}
inline bool is_token_class_task(Task t) { return t == Task::kCap || t == Task::kTcp; }
inline bool is_sentence_class_task(Task t) {
  return t == Task::kNsp || t == Task::kAsp || t == Task::kSo || t == Task::kSdp || t == Task::kScp;
}

struct ParamSpec {
  std::string name;
  Shape shape;
  enum class Init { kNormal, kZero, kOne } init = Init::kNormal;
  bool decay = true;
};

namespace detail {

inline std::string head_prefix(Task t) {
  std::string s = "head.";
  for (char c : task_name(t)) {
    if (c != '-') s += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  return s;
}

inline void dense_specs(std::vector<ParamSpec>& out, const std::string& name, std::size_t in,
                        std::size_t outd) {
  out.push_back({name + ".weight", {in, outd}, ParamSpec::Init::kNormal, true});
  out.push_back({name + ".bias", {outd}, ParamSpec::Init::kZero, false});
}

inline void ln_specs(std::vector<ParamSpec>& out, const std::string& name, std::size_t h) {
  out.push_back({name + ".gamma", {h}, ParamSpec::Init::kOne, false});
  out.push_back({name + ".beta", {h}, ParamSpec::Init::kZero, false});
}

}  // namespace detail

// Every parameter of a configuration, in a fixed order.
inline std::vector<ParamSpec> parameter_specs(const ModelConfig& c) {
  c.validate();
  const std::size_t H = c.hidden;
  std::vector<ParamSpec> s;
  s.push_back({"embed.token", {c.vocab, H}});
  s.push_back({"embed.position", {c.max_seq_len, H}});
  s.push_back({"embed.type", {c.type_vocab, H}});
  s.push_back({"embed.task", {c.task_vocab, H}});
  detail::ln_specs(s, "embed.ln", H);
  for (std::size_t l = 0; l < c.layers; ++l) {
    const std::string p = "layer" + std::to_string(l);
    for (const char* m : {".q", ".k", ".v", ".o"}) detail::dense_specs(s, p + ".attn" + m, H, H);
    detail::ln_specs(s, p + ".attn_ln", H);
    detail::dense_specs(s, p + ".ffn.in", H, c.ffn());
    detail::dense_specs(s, p + ".ffn.out", c.ffn(), H);
    detail::ln_specs(s, p + ".ffn_ln", H);
  }
  detail::dense_specs(s, "pooler", H, H);
  for (Task t : c.head_tasks.tasks()) {
    const std::string p = detail::head_prefix(t);
    switch (t) {
      case Task::kMlm:
        detail::dense_specs(s, p + ".transform", H, H);
        detail::ln_specs(s, p + ".ln", H);
        s.push_back({p + ".out_bias", {c.vocab}, ParamSpec::Init::kZero, false});
        break;
      case Task::kSbo:
        detail::dense_specs(s, p + ".transform", 2 * H, H);
        s.push_back({p + ".out_bias", {c.vocab}, ParamSpec::Init::kZero, false});
        break;
      case Task::kTgs:
        detail::dense_specs(s, p, 3 * H, 6);
        break;
      case Task::kQt:
      case Task::kFs:
        break;
      default:
        detail::dense_specs(s, p, H, is_regression_task(t) ? 1 : static_cast<std::size_t>(task_classes(t)));
        break;
    }
  }
  return s;
}

inline std::uint64_t parameter_count(const ModelConfig& c) {
  std::uint64_t n = 0;
  for (const auto& s : parameter_specs(c)) n += shape_size(s.shape);
  return n;
}

// Per-task predictions together with the targets they are scored against.
template <typename T>
struct HeadOutput {
  Task task = Task::kMlm;
  // Classification (MLM, SBO, token and sentence k-way, TGS).
  Tensor<T> logits;
  std::vector<int> class_targets;
  // Regression (TF, TF-IDF, TLP).
  Tensor<T> predictions;
  std::vector<T> value_targets;
  // QT: [CLS] of the first and second half.
  Tensor<T> cls_first;
  Tensor<T> cls_second;
  // FS: each pair (cls_rows[i], token_rows[i]) couples a [CLS] vector with
  // a content token of the partner row.
  Tensor<T> fs_cls;
  Tensor<T> fs_tokens;
  std::size_t count = 0;
};

template <typename T>
class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, 0.02);
    for (auto& spec : parameter_specs(config_)) {
      std::vector<T> values(shape_size(spec.shape), T{0});
      if (spec.init == ParamSpec::Init::kOne) {
        std::fill(values.begin(), values.end(), T{1});
      } else if (spec.init == ParamSpec::Init::kNormal) {
        for (auto& v : values) {
          double x;
          do x = normal(rng);
          while (std::abs(x) > 0.04);
          v = static_cast<T>(x);
        }
      }
      index_[spec.name] = params_.size();
      params_.push_back({spec.name, Tensor<T>::from(spec.shape, std::move(values), true), spec.decay});
    }
  }

  // Copies own their weights; tensors alone would share storage.
  Model(const Model& other) : config_(other.config_), index_(other.index_) {
    params_.reserve(other.params_.size());
    for (const auto& p : other.params_) {
      const auto v = p.tensor.values();
      params_.push_back({p.name, Tensor<T>::from(p.tensor.shape(), std::vector<T>(v.begin(), v.end()),
                                                 p.tensor.requires_grad()),
                         p.decay});
    }
  }
  Model& operator=(const Model& other) {
    if (this != &other) *this = Model(other);
    return *this;
  }
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const ModelConfig& config() const { return config_; }
  std::vector<Parameter<T>>& parameters() { return params_; }
  const std::vector<Parameter<T>>& parameters() const { return params_; }
  std::uint64_t parameter_count() const {
    std::uint64_t n = 0;
    for (const auto& p : params_) n += p.tensor.size();
    return n;
  }

  const Tensor<T>& param(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) fail("model: no parameter named '", name, "'");
    return params_[it->second].tensor;
  }
  bool has_param(const std::string& name) const { return index_.count(name) != 0; }

  // Sum of token, position, type and task embeddings, then layer-norm and
  // dropout. Output [B*L, H].
  Tensor<T> embed(const TrainingBatch& batch, Rng& rng, bool training) const {
    const std::size_t B = batch.batch, L = batch.seq_len;
    if (L > config_.max_seq_len) fail("embed: sequence length ", L, " exceeds max_seq_len ", config_.max_seq_len);
    if (batch.task_id >= config_.task_vocab) {
      fail("embed: task id ", batch.task_id, " out of range for task_vocab ", config_.task_vocab);
    }
    std::vector<int> tok(B * L), pos(B * L), typ(B * L), task(B * L, static_cast<int>(batch.task_id));
    for (std::size_t i = 0; i < B * L; ++i) {
      if (batch.input_ids[i] < 0 || static_cast<std::size_t>(batch.input_ids[i]) >= config_.vocab) {
        fail("embed: token id ", batch.input_ids[i], " out of range for vocab ", config_.vocab);
      }
      tok[i] = batch.input_ids[i];
      pos[i] = static_cast<int>(i % L);
      typ[i] = batch.type_ids[i];
    }
    auto x = add(add(embedding_lookup(param("embed.token"), std::span<const int>(tok)),
                     embedding_lookup(param("embed.position"), std::span<const int>(pos))),
                 add(embedding_lookup(param("embed.type"), std::span<const int>(typ)),
                     embedding_lookup(param("embed.task"), std::span<const int>(task))));
    x = layer_norm(x, param("embed.ln.gamma"), param("embed.ln.beta"));
    return dropout(x, config_.dropout, rng, training);
  }

  // Post-layer-norm transformer stack. attention_probs, if given, receives
  // one [B][heads][L][L] buffer per layer.
  Tensor<T> encode(const Tensor<T>& embeddings, std::span<const std::uint8_t> attention_mask,
                   std::size_t batch, std::size_t seq, Rng& rng, bool training,
                   std::vector<std::vector<T>>* attention_probs = nullptr) const {
    Tensor<T> x = embeddings;
    const AttentionShape shape{batch, seq, config_.heads};
    for (std::size_t l = 0; l < config_.layers; ++l) {
      const std::string p = "layer" + std::to_string(l);
      auto q = dense(x, p + ".attn.q");
      auto k = dense(x, p + ".attn.k");
      auto v = dense(x, p + ".attn.v");
      std::vector<T>* probs = nullptr;
      if (attention_probs) probs = &attention_probs->emplace_back();
      auto a = multi_head_attention(q, k, v, attention_mask, shape, config_.dropout, rng, training, probs);
      auto o = dropout(dense(a, p + ".attn.o"), config_.dropout, rng, training);
      x = layer_norm(add(x, o), param(p + ".attn_ln.gamma"), param(p + ".attn_ln.beta"));
      auto f = dense(gelu(dense(x, p + ".ffn.in")), p + ".ffn.out");
      f = dropout(f, config_.dropout, rng, training);
      x = layer_norm(add(x, f), param(p + ".ffn_ln.gamma"), param(p + ".ffn_ln.beta"));
    }
    return x;
  }

  Tensor<T> forward(const TrainingBatch& batch, Rng& rng, bool training) const {
    return encode(embed(batch, rng, training), batch.attention_mask, batch.batch, batch.seq_len,
                  rng, training);
  }

  // Hidden state at position 0 of every row -> [B, H].
  Tensor<T> cls_rows(const Tensor<T>& hidden, std::size_t batch, std::size_t seq) const {
    std::vector<int> rows(batch);
    for (std::size_t b = 0; b < batch; ++b) rows[b] = static_cast<int>(b * seq);
    return gather_rows(hidden, std::span<const int>(rows));
  }

  Tensor<T> pooled(const Tensor<T>& hidden, std::size_t batch, std::size_t seq) const {
    return mtp::tanh(dense(cls_rows(hidden, batch, seq), "pooler"));
  }

  HeadOutput<T> head_forward(Task task, const Tensor<T>& hidden, const TrainingBatch& batch) const {
    if (!config_.head_tasks.contains(task)) fail("head_forward: model has no head for ", task_name(task));
    if (!batch.tasks.contains(task)) fail("head_forward: batch carries no labels for ", task_name(task));
    const auto& lab = batch.labels;
    const std::size_t B = batch.batch, L = batch.seq_len;
    const std::string p = detail::head_prefix(task);
    HeadOutput<T> out;
    out.task = task;

    if (task == Task::kMlm || task == Task::kSbo) {
      if (lab.mlm_positions.empty()) fail("head_forward: ", task_name(task), " labels missing (no masked positions)");
      Tensor<T> h;
      if (task == Task::kMlm) {
        h = gelu(dense(gather_rows(hidden, std::span<const int>(lab.mlm_positions)), p + ".transform"));
        h = layer_norm(h, param(p + ".ln.gamma"), param(p + ".ln.beta"));
      } else {
        auto left = gather_rows(hidden, std::span<const int>(lab.sbo_left));
        auto right = gather_rows(hidden, std::span<const int>(lab.sbo_right));
        h = gelu(dense(concat_cols(std::vector<Tensor<T>>{left, right}), p + ".transform"));
      }
      out.logits = add_row(matmul_nt(h, param("embed.token")), param(p + ".out_bias"));
      out.class_targets = lab.mlm_targets;
      out.count = lab.mlm_positions.size();
      return out;
    }

    if (is_regression_task(task) || is_token_class_task(task)) {
      std::vector<int> rows;
      for (std::size_t i = 0; i < B * L; ++i)
        if (lab.token_valid[i]) rows.push_back(static_cast<int>(i));
      if (rows.empty()) fail("head_forward: ", task_name(task), " labels missing (no content tokens)");
      auto y = dense(gather_rows(hidden, std::span<const int>(rows)), p);
      out.count = rows.size();
      if (is_regression_task(task)) {
        const auto& src = task == Task::kTf ? lab.tf : task == Task::kTfIdf ? lab.tfidf : lab.tlp;
        out.predictions = reshape(y, {rows.size()});
        for (int r : rows) out.value_targets.push_back(static_cast<T>(src[static_cast<std::size_t>(r)]));
      } else {
        const auto& src = task == Task::kCap ? lab.cap : lab.tcp;
        out.logits = y;
        for (int r : rows) out.class_targets.push_back(src[static_cast<std::size_t>(r)]);
      }
      return out;
    }

    if (task == Task::kTgs) {
      std::vector<int> r0, r1, r2;
      for (std::size_t b = 0; b < B; ++b) {
        if (lab.tgs_start[b] < 0) continue;
        int base = static_cast<int>(b * L) + lab.tgs_start[b];
        r0.push_back(base);
        r1.push_back(base + 1);
        r2.push_back(base + 2);
        out.class_targets.push_back(lab.tgs_class[b]);
      }
      out.count = r0.size();
      if (r0.empty()) return out;
      auto cat = concat_cols(std::vector<Tensor<T>>{gather_rows(hidden, std::span<const int>(r0)),
                                                    gather_rows(hidden, std::span<const int>(r1)),
                                                    gather_rows(hidden, std::span<const int>(r2))});
      out.logits = dense(cat, p);
      return out;
    }

    if (is_sentence_class_task(task)) {
      auto it = lab.sentence.find(task);
      if (it == lab.sentence.end()) fail("head_forward: ", task_name(task), " labels missing");
      out.logits = dense(pooled(hidden, B, L), p);
      out.class_targets = it->second;
      out.count = B;
      return out;
    }

    // QT and FS compare [CLS] of one half with the other half.
    if (!batch.continuation_paired) fail("head_forward: ", task_name(task), " needs a continuation-paired batch");
    if (B % 2 != 0) fail("head_forward: ", task_name(task), " needs an even batch, got ", B);
    const std::size_t half = B / 2;
    auto cls = cls_rows(hidden, B, L);
    if (task == Task::kQt) {
      std::vector<int> first(half), second(half);
      for (std::size_t i = 0; i < half; ++i) {
        first[i] = static_cast<int>(i);
        second[i] = static_cast<int>(i + half);
      }
      out.cls_first = gather_rows(cls, std::span<const int>(first));
      out.cls_second = gather_rows(cls, std::span<const int>(second));
      out.count = half;
      return out;
    }
    std::vector<int> cls_idx, tok_idx;
    for (std::size_t r = 0; r < half; ++r) {
      const std::size_t partner = r + half;
      for (std::size_t i = 0; i < L; ++i) {
        if (!batch.content_mask[partner * L + i]) continue;
        cls_idx.push_back(static_cast<int>(r));
        tok_idx.push_back(static_cast<int>(partner * L + i));
      }
    }
    out.count = cls_idx.size();
    if (cls_idx.empty()) return out;
    out.fs_cls = gather_rows(cls, std::span<const int>(cls_idx));
    out.fs_tokens = gather_rows(hidden, std::span<const int>(tok_idx));
    return out;
  }

  Tensor<T> dense(const Tensor<T>& x, const std::string& name) const {
    return add_row(matmul(x, param(name + ".weight")), param(name + ".bias"));
  }

 private:
  ModelConfig config_;
  std::vector<Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace mtp
