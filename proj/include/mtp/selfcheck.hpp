#pragma once

// End-to-end gradient check of one task: embeddings -> encoder -> head ->
// loss, in double precision with dropout off, on a synthetic batch.

#include <cstdint>
#include <functional>
#include <vector>

#include "mtp/gradcheck.hpp"
#include "mtp/losses.hpp"
#include "mtp/model.hpp"
#include "mtp/synthetic.hpp"
#include "mtp/taskbuild.hpp"

namespace mtp {

struct TaskGradCheckSetup {
  std::size_t layers = 2;
  std::size_t hidden = 32;
  std::size_t heads = 2;
  std::size_t batch = 8;
  std::size_t seq_len = 24;
  std::uint64_t seed = 7;
  // Entries sampled per parameter (0 = all).
  std::size_t max_entries_per_param = 16;
  double eps = 1e-5;
  // Gradients that are exactly zero (key biases under softmax) still show
  // ~1e-10 of central-difference roundoff; the floor keeps those from
  // reading as relative errors.
  double abs_floor = 1e-5;
};

inline GradCheckResult gradcheck_task(Task task, const Corpus& corpus, const Vocabulary& vocab,
                                      const TaskGradCheckSetup& s = {}) {
  ModelConfig cfg;
  cfg.layers = s.layers;
  cfg.hidden = s.hidden;
  cfg.heads = s.heads;
  cfg.vocab = vocab.size();
  cfg.max_seq_len = s.seq_len;
  cfg.dropout = 0.0;
  cfg.head_tasks = TaskSet{task};
  // Init scale 0.02 gives near-zero head outputs; a larger scale makes the
  // check exercise non-trivial curvature.
  Model<double> model(cfg, s.seed);
  Rng init(s.seed + 1);
  std::normal_distribution<double> normal(0.0, 0.3);
  for (auto& p : model.parameters()) {
    if (!p.decay) continue;
    for (auto& v : p.tensor.mutable_values()) v = normal(init);
  }

  Rng rng(mix_seed(s.seed, 11));
  const TrainingBatch batch = assemble_batch(TaskSet{task}, corpus, vocab, s.batch, s.seq_len, rng);
  auto loss_fn = [&]() {
    Rng unused(0);
    auto hidden = model.forward(batch, unused, false);
    return compute_task_loss(model.head_forward(task, hidden, batch)).value;
  };
  GradCheckOptions opts;
  opts.eps = s.eps;
  opts.abs_floor = s.abs_floor;
  opts.max_entries_per_param = s.max_entries_per_param;
  opts.seed = s.seed;
  return check_gradients(loss_fn, model.parameters(), opts);
}

}  // namespace mtp
