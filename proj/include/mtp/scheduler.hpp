#pragma once

// Task-combination strategies: which tasks train at each step, with which
// task-id embedding, and for how many tokens.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "mtp/error.hpp"
#include "mtp/tasks.hpp"

namespace mtp {

enum class Strategy { kSum, kInc, kAlt, kAltPlus, kCmtl, kCmtlPlus };

inline std::string_view strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kSum: return "sum";
    case Strategy::kInc: return "inc";
    case Strategy::kAlt: return "alt";
    case Strategy::kAltPlus: return "alt_plus";
    case Strategy::kCmtl: return "cmtl";
    case Strategy::kCmtlPlus: return "cmtl_plus";
  }
  return "?";
}

inline Strategy parse_strategy(std::string_view s) {
  std::string k;
  for (char c : s) k += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (k == "sum" || k == "sum.") return Strategy::kSum;
  if (k == "inc" || k == "inc.") return Strategy::kInc;
  if (k == "alt" || k == "alt.") return Strategy::kAlt;
  if (k == "alt_plus" || k == "alt+" || k == "alt.+" || k == "altplus") return Strategy::kAltPlus;
  if (k == "cmtl") return Strategy::kCmtl;
  if (k == "cmtl_plus" || k == "cmtl+" || k == "cmtlplus") return Strategy::kCmtlPlus;
  fail("unknown strategy '", s, "' (expected sum, inc, alt, alt_plus, cmtl, cmtl_plus)");
}

inline bool adds_mlm_every_step(Strategy s) {
  return s == Strategy::kAltPlus || s == Strategy::kCmtlPlus;
}

// Tasks in the same step must agree on how rows are built. Sentence ordering
// and continuation pairing need contiguous text, which a randomly drawn
// second segment breaks; the random-segment tasks also disagree with each
// other on label protocol.
inline std::optional<std::string> compatibility_error(const TaskSet& set) {
  const auto tasks = set.tasks();
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    for (std::size_t j = i + 1; j < tasks.size(); ++j) {
      Task a = tasks[i], b = tasks[j];
      bool ra = needs_random_second_segment(a), rb = needs_random_second_segment(b);
      bool conflict = (ra && rb) ||
                      (ra && (b == Task::kSo || needs_continuation_pairing(b))) ||
                      (rb && (a == Task::kSo || needs_continuation_pairing(a)));
      if (conflict) {
        return detail::concat("incompatible tasks ", task_name(a), " and ", task_name(b),
                              ": they require different input structures");
      }
    }
  }
  return std::nullopt;
}

inline void validate_compatibility(const TaskSet& set) {
  if (auto err = compatibility_error(set)) fail(*err);
}

// Continual multi-task allocation. budget[stage][task] in tokens; stage i
// (0-based) introduces task i with C*(i+2) tokens and gives C to each
// earlier task, C = T / (N(N+1)). Cells are cut at cumulative boundaries
// rounded to whole batches, so each is within one batch of its exact share
// and the table sums to T. `chunk` is C rounded to a batch, for display.
struct CmtlAllocation {
  std::size_t tasks = 0;
  std::uint64_t total_tokens = 0;
  std::uint64_t chunk = 0;
  std::vector<std::vector<std::uint64_t>> budget;

  std::uint64_t task_total(std::size_t task) const {
    std::uint64_t s = 0;
    for (const auto& stage : budget) s += stage[task];
    return s;
  }
  std::uint64_t stage_total(std::size_t stage) const {
    std::uint64_t s = 0;
    for (auto v : budget[stage]) s += v;
    return s;
  }
  std::uint64_t table_total() const {
    std::uint64_t s = 0;
    for (std::size_t i = 0; i < tasks; ++i) s += stage_total(i);
    return s;
  }
};

inline CmtlAllocation cmtl_allocation(std::size_t n, std::uint64_t total_tokens,
                                      std::uint64_t batch_tokens = 1) {
  if (n == 0) fail("cmtl_allocation: need at least one task");
  if (batch_tokens == 0) fail("cmtl_allocation: batch_tokens must be positive");
  CmtlAllocation a;
  a.tasks = n;
  a.total_tokens = total_tokens;
  // Stage s gives earlier tasks one chunk each and task s the remaining
  // s + 2 chunks, C = T / (N(N+1)).
  const std::uint64_t chunks = n * (n + 1);
  auto round_to_batch = [&](unsigned __int128 num, std::uint64_t den) {
    const unsigned __int128 q = (num * 2 + den * batch_tokens) / (2 * (unsigned __int128)den * batch_tokens);
    return static_cast<std::uint64_t>(q) * batch_tokens;
  };
  a.chunk = round_to_batch(total_tokens, chunks);
  // Cells are cut at batch-rounded cumulative boundaries, so every cell is
  // within one batch of its exact share and the table sums to T.
  a.budget.assign(n, std::vector<std::uint64_t>(n, 0));
  std::uint64_t units = 0, prev = 0;
  for (std::size_t stage = 0; stage < n; ++stage) {
    for (std::size_t t = 0; t <= stage; ++t) {
      units += t < stage ? 1 : stage + 2;
      const std::uint64_t edge =
          units == chunks ? total_tokens
                          : std::min<std::uint64_t>(total_tokens, round_to_batch((unsigned __int128)total_tokens * units, chunks));
      a.budget[stage][t] = edge - prev;
      prev = edge;
    }
  }
  return a;
}

struct ScheduleStep {
  TaskSet tasks;
  std::uint64_t tokens = 0;
  std::uint32_t task_id = 0;
  std::uint32_t stage = 0;
};

struct Schedule {
  Strategy strategy = Strategy::kSum;
  std::vector<Task> tasks;  // user order
  std::uint64_t batch_tokens = 0;
  std::vector<ScheduleStep> steps;
  std::optional<CmtlAllocation> allocation;

  std::size_t size() const { return steps.size(); }
  std::uint64_t total_tokens() const {
    std::uint64_t s = 0;
    for (const auto& st : steps) s += st.tokens;
    return s;
  }
  std::uint32_t task_vocab() const {
    std::uint32_t m = 0;
    for (const auto& st : steps) m = std::max(m, st.task_id + 1);
    return m;
  }
};

namespace detail {

// Interleaves counts[j] emissions of each j so that every index is spread
// evenly: the next index is the one whose next slot (done+0.5)/count comes
// first, ties to the lower index.
inline std::vector<std::size_t> proportional_interleave(const std::vector<std::uint64_t>& counts) {
  std::vector<std::uint64_t> done(counts.size(), 0);
  std::uint64_t total = 0;
  for (auto c : counts) total += c;
  std::vector<std::size_t> order;
  order.reserve(total);
  for (std::uint64_t k = 0; k < total; ++k) {
    std::size_t best = counts.size();
    double best_t = 0;
    for (std::size_t j = 0; j < counts.size(); ++j) {
      if (done[j] >= counts[j]) continue;
      double t = (double(done[j]) + 0.5) / double(counts[j]);
      if (best == counts.size() || t < best_t) {
        best = j;
        best_t = t;
      }
    }
    ++done[best];
    order.push_back(best);
  }
  return order;
}

}  // namespace detail

// Builds the per-step plan. One step is one batch of batch_tokens token
// slots; the step count is floor(T / batch_tokens).
inline Schedule make_schedule(Strategy strategy, const std::vector<Task>& tasks,
                              std::uint64_t total_tokens, std::uint64_t batch_tokens) {
  if (tasks.empty()) fail("make_schedule: task list is empty");
  if (batch_tokens == 0) fail("make_schedule: batch_tokens must be positive");
  if (total_tokens < batch_tokens) {
    fail("make_schedule: total tokens ", total_tokens, " smaller than one batch (",
         batch_tokens, ")");
  }
  for (std::size_t i = 0; i < tasks.size(); ++i)
    for (std::size_t j = i + 1; j < tasks.size(); ++j)
      if (tasks[i] == tasks[j]) fail("make_schedule: duplicate task ", task_name(tasks[i]));

  Schedule sched;
  sched.strategy = strategy;
  sched.tasks = tasks;
  sched.batch_tokens = batch_tokens;
  const std::uint64_t n_steps = total_tokens / batch_tokens;

  std::vector<Task> aux;
  for (Task t : tasks)
    if (t != Task::kMlm) aux.push_back(t);
  const bool plus = adds_mlm_every_step(strategy);
  if (plus) {
    if (aux.size() == tasks.size()) {
      fail("make_schedule: strategy ", strategy_name(strategy), " requires MLM in the task list");
    }
    if (aux.empty()) fail("make_schedule: strategy ", strategy_name(strategy), " needs auxiliary tasks");
  }

  // Distinct task sets get distinct embedding ids only for the alternating
  // and continual strategies.
  const bool per_set_ids = strategy != Strategy::kSum && strategy != Strategy::kInc;
  std::map<std::uint32_t, std::uint32_t> ids;
  auto push = [&](TaskSet set, std::uint64_t tokens, std::uint32_t stage) {
    validate_compatibility(set);
    std::uint32_t id = 0;
    if (per_set_ids) id = ids.emplace(set.mask(), static_cast<std::uint32_t>(ids.size())).first->second;
    sched.steps.push_back({set, tokens, id, stage});
  };

  switch (strategy) {
    case Strategy::kSum: {
      TaskSet all(tasks.begin(), tasks.end());
      for (std::uint64_t s = 0; s < n_steps; ++s) push(all, batch_tokens, 0);
      break;
    }
    case Strategy::kInc: {
      const std::uint64_t n = tasks.size();
      const std::uint64_t per_phase = n_steps / n;
      for (std::uint64_t phase = 0; phase < n; ++phase) {
        TaskSet set(tasks.begin(), tasks.begin() + static_cast<std::ptrdiff_t>(phase + 1));
        std::uint64_t count = phase + 1 == n ? n_steps - per_phase * (n - 1) : per_phase;
        for (std::uint64_t s = 0; s < count; ++s) push(set, batch_tokens, static_cast<std::uint32_t>(phase));
      }
      break;
    }
    case Strategy::kAlt:
    case Strategy::kAltPlus: {
      const auto& cycle = plus ? aux : tasks;
      for (std::uint64_t s = 0; s < n_steps; ++s) {
        TaskSet set{cycle[s % cycle.size()]};
        if (plus) set.insert(Task::kMlm);
        push(set, batch_tokens, 0);
      }
      break;
    }
    case Strategy::kCmtl:
    case Strategy::kCmtlPlus: {
      const auto& staged = plus ? aux : tasks;
      auto alloc = cmtl_allocation(staged.size(), total_tokens, batch_tokens);
      for (std::size_t stage = 0; stage < staged.size(); ++stage) {
        std::vector<std::uint64_t> counts(staged.size(), 0);
        for (std::size_t t = 0; t <= stage; ++t) counts[t] = alloc.budget[stage][t] / batch_tokens;
        for (std::size_t t : detail::proportional_interleave(counts)) {
          TaskSet set{staged[t]};
          if (plus) set.insert(Task::kMlm);
          push(set, batch_tokens, static_cast<std::uint32_t>(stage));
        }
      }
      sched.allocation = std::move(alloc);
      break;
    }
  }
  return sched;
}

struct StepPlan {
  TaskSet tasks;
  std::uint32_t task_id = 0;
};

inline StepPlan next_step(const Schedule& sched, std::size_t step_index) {
  if (step_index >= sched.steps.size()) {
    fail("next_step: step ", step_index, " out of range (schedule has ", sched.steps.size(),
         " steps)");
  }
  const auto& st = sched.steps[step_index];
  return {st.tasks, st.task_id};
}

inline std::map<Task, std::uint64_t> token_accounting(const Schedule& sched) {
  std::map<Task, std::uint64_t> totals;
  for (Task t : sched.tasks) totals[t] = 0;
  for (const auto& st : sched.steps)
    for (Task t : st.tasks.tasks()) totals[t] += st.tokens;
  return totals;
}

// Text form: a header comment, then one line per step:
//   <step index> <comma-joined task names> <token budget> <task id> <stage>
inline void write_schedule(std::ostream& out, const Schedule& sched,
                           std::uint64_t total_tokens = 0) {
  out << "# strategy=" << strategy_name(sched.strategy) << " batch_tokens=" << sched.batch_tokens
      << " total_tokens=" << (total_tokens ? total_tokens : sched.total_tokens()) << " tasks=";
  for (std::size_t i = 0; i < sched.tasks.size(); ++i) {
    out << (i ? "," : "") << task_name(sched.tasks[i]);
  }
  out << "\n";
  for (std::size_t i = 0; i < sched.steps.size(); ++i) {
    const auto& st = sched.steps[i];
    out << i << ' ' << st.tasks.to_string() << ' ' << st.tokens << ' ' << st.task_id << ' '
        << st.stage << '\n';
  }
}

inline Schedule read_schedule(std::istream& in) {
  Schedule sched;
  std::uint64_t total_tokens = 0;
  std::string line;
  if (!std::getline(in, line) || !line.starts_with("# ")) fail("schedule: missing header");
  std::istringstream hdr(line.substr(2));
  std::string field;
  while (hdr >> field) {
    auto eq = field.find('=');
    if (eq == std::string::npos) continue;
    auto key = field.substr(0, eq), value = field.substr(eq + 1);
    if (key == "strategy") sched.strategy = parse_strategy(value);
    else if (key == "batch_tokens") sched.batch_tokens = std::stoull(value);
    else if (key == "total_tokens") total_tokens = std::stoull(value);
    else if (key == "tasks") sched.tasks = parse_task_list(value);
  }
  std::size_t expected = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::size_t index;
    std::string names;
    ScheduleStep st;
    if (!(ls >> index >> names >> st.tokens >> st.task_id >> st.stage)) {
      fail("schedule: malformed line '", line, "'");
    }
    if (index != expected++) fail("schedule: step ", index, " out of order");
    for (Task t : parse_task_list(names)) st.tasks.insert(t);
    sched.steps.push_back(st);
  }
  if ((sched.strategy == Strategy::kCmtl || sched.strategy == Strategy::kCmtlPlus) &&
      total_tokens && sched.batch_tokens) {
    std::size_t n = sched.tasks.size();
    if (sched.strategy == Strategy::kCmtlPlus) {
      n -= static_cast<std::size_t>(std::count(sched.tasks.begin(), sched.tasks.end(), Task::kMlm));
    }
    if (n) sched.allocation = cmtl_allocation(n, total_tokens, sched.batch_tokens);
  }
  return sched;
}

}  // namespace mtp
