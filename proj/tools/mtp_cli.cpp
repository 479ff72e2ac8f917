// mtp: corpus preparation, schedules, training, probes and significance tests.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mtp/analysis.hpp"
#include "mtp/corpus_store.hpp"
#include "mtp/scheduler.hpp"
#include "mtp/selfcheck.hpp"
#include "mtp/synthetic.hpp"
#include "mtp/trainer.hpp"

namespace fs = std::filesystem;
using namespace mtp;

namespace {

std::vector<fs::path> list_inputs(const fs::path& input) {
  if (!fs::exists(input)) fail("input '", input.string(), "' does not exist");
  std::vector<fs::path> files;
  if (fs::is_directory(input)) {
    for (const auto& e : fs::directory_iterator(input))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
  } else {
    files.push_back(input);
  }
  if (files.empty()) fail("input directory '", input.string(), "' has no files");
  return files;
}

int cmd_prepare(const std::string& input, const std::string& vocab_path, const std::string& out,
                std::size_t segment_tokens) {
  const auto vocab = Vocabulary::load(vocab_path);
  auto [corpus, summary] = build_corpus_in_memory(list_inputs(input), vocab, segment_tokens);
  const auto bytes = serialize_corpus(corpus);
  const auto hash = to_hex(sha256(std::span<const std::uint8_t>(bytes)));
  std::cout << "documents read:     " << summary.raw_documents << "\n"
            << "accepted:           " << summary.accepted << "\n"
            << "rejected:           " << summary.rejected << "\n"
            << "stored segments:    " << summary.segments << "\n";
  if (fs::exists(out) && read_file_bytes(out) == bytes) {
    std::cout << "store up to date (sha256 " << hash << ")\n";
    return 0;
  }
  write_file_bytes(out, bytes);
  std::cout << "wrote " << out << " (sha256 " << hash << ")\n";
  return 0;
}

std::string human(std::uint64_t v) {
  std::ostringstream o;
  if (v == 0) return "0";
  if (v >= 1000000000ull) o << std::fixed << std::setprecision(2) << double(v) / 1e9 << "B";
  else if (v >= 1000000ull) o << std::fixed << std::setprecision(2) << double(v) / 1e6 << "M";
  else if (v >= 1000ull && v % 1000 == 0) o << v / 1000 << "k";
  else o << v;
  return o.str();
}

void print_allocation(const CmtlAllocation& a, const std::vector<std::string>& names, bool compact) {
  auto fmt = [&](std::uint64_t v) { return compact ? human(v) : std::to_string(v); };
  std::cout << "CMTL allocation: N=" << a.tasks << " T=" << a.total_tokens << " C=" << a.chunk << "\n";
  std::cout << std::left << std::setw(10) << "Task";
  for (std::size_t s = 0; s < a.tasks; ++s) std::cout << std::right << std::setw(14) << ("Stage " + std::to_string(s + 1));
  std::cout << std::setw(14) << "Total" << "\n";
  for (std::size_t t = 0; t < a.tasks; ++t) {
    std::cout << std::left << std::setw(10) << names[t];
    for (std::size_t s = 0; s < a.tasks; ++s) std::cout << std::right << std::setw(14) << fmt(a.budget[s][t]);
    std::cout << std::setw(14) << fmt(a.task_total(t)) << "\n";
  }
  std::cout << std::left << std::setw(10) << "Stage sum";
  for (std::size_t s = 0; s < a.tasks; ++s) std::cout << std::right << std::setw(14) << fmt(a.stage_total(s));
  std::cout << std::setw(14) << fmt(a.table_total()) << "\n";
}

int cmd_schedule(const std::string& strategy_s, const std::string& tasks_s, double tokens_d,
                 std::uint64_t batch_tokens, bool compact, const std::string& steps_out) {
  if (!(tokens_d >= 1) || tokens_d != std::floor(tokens_d)) fail("--tokens must be a positive integer");
  const auto tokens = static_cast<std::uint64_t>(tokens_d);
  const Strategy strategy = parse_strategy(strategy_s);
  const bool cmtl = strategy == Strategy::kCmtl || strategy == Strategy::kCmtlPlus;

  // "--tasks 4" names abstract tasks 1..4 (CMTL tables only).
  const bool numeric = !tasks_s.empty() &&
                       std::all_of(tasks_s.begin(), tasks_s.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); });
  if (numeric) {
    if (!cmtl) fail("--tasks as a count is only meaningful for cmtl strategies; pass task names");
    const std::size_t n = std::stoul(tasks_s);
    std::vector<std::string> names;
    for (std::size_t i = 0; i < n; ++i) names.push_back(std::to_string(i + 1));
    print_allocation(cmtl_allocation(n, tokens, batch_tokens), names, compact);
    return 0;
  }

  const auto tasks = parse_task_list(tasks_s);
  if (tasks.empty()) fail("--tasks is empty");
  const std::uint64_t steps = tokens / std::max<std::uint64_t>(1, batch_tokens);
  if (cmtl && steps_out.empty()) {
    std::vector<Task> staged;
    for (Task t : tasks)
      if (strategy == Strategy::kCmtl || t != Task::kMlm) staged.push_back(t);
    if (strategy == Strategy::kCmtlPlus && staged.size() == tasks.size()) fail("cmtl_plus requires MLM in the task list");
    if (staged.empty()) fail("cmtl_plus needs auxiliary tasks");
    for (Task t : staged) {
      TaskSet set{t};
      if (strategy == Strategy::kCmtlPlus) set.insert(Task::kMlm);
      validate_compatibility(set);
    }
    std::vector<std::string> names;
    for (Task t : staged) names.emplace_back(task_name(t));
    print_allocation(cmtl_allocation(staged.size(), tokens, batch_tokens), names, compact);
    if (strategy == Strategy::kCmtlPlus) std::cout << "MLM joins every step: " << steps * batch_tokens << " tokens\n";
    return 0;
  }
  if (steps > 20'000'000) fail("schedule of ", steps, " steps is too large to materialize; raise --batch-tokens");
  const auto sched = make_schedule(strategy, tasks, tokens, batch_tokens);
  if (sched.allocation) {
    std::vector<std::string> names;
    for (Task t : tasks)
      if (strategy == Strategy::kCmtl || t != Task::kMlm) names.emplace_back(task_name(t));
    print_allocation(*sched.allocation, names, compact);
  }
  std::cout << "strategy " << strategy_name(strategy) << ", " << sched.size() << " steps of " << batch_tokens
            << " tokens, " << sched.task_vocab() << " task id(s)\n";
  std::cout << "per-task tokens:\n";
  for (const auto& [t, n] : token_accounting(sched)) std::cout << "  " << std::left << std::setw(8) << task_name(t) << n << "\n";
  if (!steps_out.empty()) {
    std::ofstream out(steps_out);
    if (!out) fail("cannot write '", steps_out, "'");
    write_schedule(out, sched, tokens);
  }
  return 0;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& resume, std::uint64_t max_steps, bool quiet) {
  TrainConfig cfg = load_train_config(config_path);
  for (const auto& kv : overrides) {
    auto eq = kv.find('=');
    if (eq == std::string::npos) fail("--set expects key=value, got '", kv, "'");
    set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (cfg.corpus_path.empty() || cfg.vocab_path.empty()) fail("config must set corpus and vocab");
  const auto vocab = Vocabulary::load(cfg.vocab_path);
  const auto corpus = load_corpus(cfg.corpus_path);
  Trainer trainer(cfg, corpus, vocab);
  if (!resume.empty()) {
    trainer.restore_from(load_checkpoint(resume));
    std::cout << "resumed at step " << trainer.next_step() << "\n";
  }
  std::cout << "schedule: " << trainer.schedule().size() << " steps, model parameters "
            << trainer.model().parameter_count() << "\n";
  const std::uint64_t every = std::max<std::uint64_t>(1, trainer.schedule().size() / 20);
  auto log = trainer.run(max_steps ? std::optional<std::uint64_t>(max_steps) : std::nullopt,
                         [&](const StepMetrics& m) {
                           if (!quiet && (m.step % every == 0 || m.step + 1 == trainer.schedule().size())) {
                             std::cout << m.to_json().dump() << "\n";
                           }
                         });
  if (!log.empty()) {
    std::cout << "finished step " << log.back().step << ", tokens " << log.back().tokens_seen << ", loss "
              << log.back().total_loss << "\n";
  }
  return 0;
}

int cmd_analyze(const std::string& runs_path, const std::string& baseline, std::size_t sims,
                std::uint64_t seed, bool pooled) {
  std::ifstream in(runs_path);
  if (!in) fail("cannot open '", runs_path, "'");
  const auto runs = parse_runs_csv(in);
  std::cout << std::left << std::setw(10) << "label" << std::right << std::setw(12) << "mean" << std::setw(10)
            << "std" << std::setw(16) << "Lilliefors p" << "\n";
  for (const auto& r : runs) {
    const auto ms = mean_std(r);
    const auto lf = lilliefors_test(r.scores, sims, seed);
    std::cout << std::left << std::setw(10) << r.label << std::right << std::fixed << std::setprecision(4)
              << std::setw(12) << ms.mean << std::setw(10) << ms.std << std::setw(16) << std::setprecision(3) << lf.p
              << "\n";
  }
  auto base = std::find_if(runs.begin(), runs.end(), [&](const RunStats& r) { return r.label == baseline; });
  if (base == runs.end()) fail("baseline '", baseline, "' not found in ", runs_path);
  std::vector<const RunStats*> others;
  std::vector<double> raw;
  for (const auto& r : runs) {
    if (&r == &*base) continue;
    others.push_back(&r);
    raw.push_back(ttest_independent(r.scores, base->scores, pooled ? TTestKind::kPooled : TTestKind::kWelch).p);
  }
  const auto corrected = bonferroni(raw, raw.size());
  std::cout << (pooled ? "pooled" : "Welch") << " t-tests vs " << baseline << ", Bonferroni m=" << raw.size() << "\n";
  for (std::size_t i = 0; i < others.size(); ++i) {
    const auto t = ttest_independent(others[i]->scores, base->scores, pooled ? TTestKind::kPooled : TTestKind::kWelch);
    std::cout << "  " << std::left << std::setw(8) << others[i]->label << " t=" << std::setprecision(4) << t.t
              << " df=" << t.df << " p=" << std::scientific << std::setprecision(3) << raw[i]
              << " corrected p=" << corrected[i] << std::fixed << "\n";
  }
  return 0;
}

int cmd_gradcheck(const std::string& tasks_s, TaskGradCheckSetup setup, double tolerance) {
  const auto vocab = synthetic::vocabulary();
  const auto corpus = synthetic::corpus(vocab, {24, 6, 10, setup.seed});
  std::vector<Task> tasks = tasks_s == "all" ? std::vector<Task>(kAllTasks.begin(), kAllTasks.end())
                                             : parse_task_list(tasks_s);
  double worst = 0;
  for (Task t : tasks) {
    const auto r = gradcheck_task(t, corpus, vocab, setup);
    worst = std::max(worst, r.max_rel_error);
    std::cout << std::left << std::setw(8) << task_name(t) << " max rel error " << std::scientific
              << std::setprecision(3) << r.max_rel_error << " (" << r.entries_checked << " entries, worst "
              << r.worst_param << "[" << r.worst_index << "])\n";
  }
  std::cout << "overall max rel error " << worst << (worst < tolerance ? " < " : " >= ") << tolerance << "\n";
  return worst < tolerance ? 0 : 1;
}

int cmd_probe(const std::string& checkpoint, const std::string& corpus_path, const std::string& vocab_path,
              ProbeSpec spec) {
  const auto vocab = Vocabulary::load(vocab_path);
  const auto corpus = load_corpus(corpus_path);
  if (corpus.vocab_hash != vocab.hash()) fail("probe: corpus vocab hash does not match vocabulary");
  const auto model = model_from_checkpoint(load_checkpoint(checkpoint));
  spec.seq_len = std::min(spec.seq_len, model.config().max_seq_len);
  const auto r = evaluate_probe(model, corpus, vocab, spec);
  std::cout << "probe accuracy " << std::fixed << std::setprecision(4) << r.accuracy << " on " << r.test_examples
            << " held-out pairs (train accuracy " << r.train_accuracy << ")\n";
  return 0;
}

int cmd_synth(const std::string& out_dir, synthetic::CorpusSpec spec) {
  fs::create_directories(out_dir);
  {
    std::ofstream v(fs::path(out_dir) / "vocab.txt");
    for (const auto& t : synthetic::vocabulary_tokens()) v << t << "\n";
  }
  std::ofstream d(fs::path(out_dir) / "documents.txt");
  d << synthetic::to_text(synthetic::documents(spec));
  std::cout << "wrote " << spec.documents << " documents and vocab.txt to " << out_dir << "\n";
  return 0;
}

std::string config_keys_help() {
  std::string s = "Config keys (key=value, one per line):\n";
  for (const auto& k : kTrainConfigKeys) s += "  " + std::string(k.name) + ": " + k.help + "\n";
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-task pre-training toolkit"};
  app.require_subcommand(1);

  std::string input, vocab, out;
  std::size_t segment_tokens = kDefaultSegmentTokens;
  auto* prepare = app.add_subcommand("prepare", "filter, segment and annotate text into a corpus store");
  prepare->add_option("--input", input, "file or directory of blank-line separated documents")->required();
  prepare->add_option("--vocab", vocab, "WordPiece vocabulary")->required();
  prepare->add_option("--out", out, "output corpus store")->required();
  prepare->add_option("--segment-tokens", segment_tokens, "target segment size in tokens");

  std::string strategy_pos, strategy_opt, tasks_s;
  double tokens = 0;
  std::uint64_t batch_tokens = 1;
  bool compact = false;
  std::string steps_out;
  auto* schedule = app.add_subcommand("schedule", "print a CMTL stage table and per-task token totals");
  schedule->add_option("STRATEGY", strategy_pos, "sum | inc | alt | alt_plus | cmtl | cmtl_plus");
  schedule->add_option("--strategy", strategy_opt, "same as the positional argument");
  schedule->add_option("--tasks", tasks_s, "task count (cmtl) or comma-separated task names")->required();
  schedule->add_option("--tokens", tokens, "total token budget (accepts 10e9)")->required();
  schedule->add_option("--batch-tokens", batch_tokens, "tokens per step (default 1)");
  schedule->add_flag("--compact", compact, "print budgets as 20k / 1.67B");
  schedule->add_option("--steps-out", steps_out, "write the step list to this file");

  std::string config_path, resume;
  std::vector<std::string> overrides;
  std::uint64_t max_steps = 0;
  bool quiet = false;
  auto* train = app.add_subcommand("train", "train according to a key=value config");
  train->add_option("--config", config_path, "config file")->required();
  train->add_option("--set", overrides, "override a config key (key=value), repeatable");
  train->add_option("--resume", resume, "checkpoint to continue from");
  train->add_option("--max-steps", max_steps, "stop after this many steps (0 = run to the end)");
  train->add_flag("--quiet", quiet, "do not echo metrics");
  train->footer(config_keys_help());

  std::string runs, baseline = "MLM";
  std::size_t sims = 100000;
  std::uint64_t seed = 20210901;
  bool pooled = false;
  auto* analyze = app.add_subcommand("analyze", "mean/std, Lilliefors and corrected t-tests over run scores");
  analyze->add_option("--runs", runs, "CSV: label,run1..runk")->required();
  analyze->add_option("--baseline", baseline, "label every other row is compared against");
  analyze->add_option("--simulations", sims, "Monte Carlo samples for Lilliefors p-values");
  analyze->add_option("--seed", seed, "Monte Carlo seed");
  analyze->add_flag("--pooled", pooled, "pooled-variance t-test instead of Welch");

  std::string gc_tasks = "all";
  TaskGradCheckSetup gc;
  double tolerance = 1e-4;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every head and loss");
  gradcheck->add_option("--tasks", gc_tasks, "comma-separated tasks or 'all'");
  gradcheck->add_option("--layers", gc.layers);
  gradcheck->add_option("--hidden", gc.hidden);
  gradcheck->add_option("--heads", gc.heads);
  gradcheck->add_option("--batch", gc.batch);
  gradcheck->add_option("--seq-len", gc.seq_len);
  gradcheck->add_option("--entries", gc.max_entries_per_param, "entries sampled per parameter (0 = all)");
  gradcheck->add_option("--seed", gc.seed);
  gradcheck->add_option("--tolerance", tolerance);

  std::string ckpt, probe_corpus, probe_vocab;
  ProbeSpec probe_spec;
  auto* probe = app.add_subcommand("probe", "sentence-order probe accuracy of a checkpoint");
  probe->add_option("--checkpoint", ckpt)->required();
  probe->add_option("--corpus", probe_corpus)->required();
  probe->add_option("--vocab", probe_vocab)->required();
  probe->add_option("--seed", probe_spec.seed);
  probe->add_option("--epochs", probe_spec.epochs);
  probe->add_option("--pairs", probe_spec.train_pairs, "training pairs (test uses the same count)");
  probe->add_option("--seq-len", probe_spec.seq_len);

  std::string synth_out;
  synthetic::CorpusSpec synth_spec;
  auto* synth = app.add_subcommand("synth", "write a synthetic corpus and its vocabulary");
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--documents", synth_spec.documents);
  synth->add_option("--seed", synth_spec.seed);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*prepare) return cmd_prepare(input, vocab, out, segment_tokens);
    if (*schedule) {
      const std::string s = !strategy_opt.empty() ? strategy_opt : strategy_pos;
      if (s.empty()) fail("schedule: give a strategy");
      return cmd_schedule(s, tasks_s, tokens, batch_tokens, compact, steps_out);
    }
    if (*train) return cmd_train(config_path, overrides, resume, max_steps, quiet);
    if (*analyze) return cmd_analyze(runs, baseline, sims, seed, pooled);
    if (*gradcheck) return cmd_gradcheck(gc_tasks, gc, tolerance);
    if (*probe) {
      probe_spec.test_pairs = probe_spec.train_pairs;
      return cmd_probe(ckpt, probe_corpus, probe_vocab, probe_spec);
    }
    if (*synth) return cmd_synth(synth_out, synth_spec);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
