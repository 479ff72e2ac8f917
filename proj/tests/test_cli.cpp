#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args) {
  const std::string cmd = std::string(MTP_CLI_PATH) + " " + args + " 2>&1";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf{};
  while (std::size_t n = fread(buf.data(), 1, buf.size(), p)) r.out.append(buf.data(), n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

bool contains(const std::string& s, const std::string& needle) { return s.find(needle) != std::string::npos; }

// Whitespace-split row of the schedule table whose first cell is `label`.
std::vector<std::string> table_row(const std::string& text, const std::string& label) {
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::vector<std::string> cells;
    for (std::string c; ls >> c;) cells.push_back(c);
    if (!cells.empty() && cells[0] == label) return cells;
  }
  return {};
}

class Workspace : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("mtp_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  void synth_and_prepare(std::size_t docs) {
    ASSERT_EQ(run("synth --out " + dir_.string() + " --documents " + std::to_string(docs)).code, 0);
    auto r = run("prepare --input " + path("documents.txt") + " --vocab " + path("vocab.txt") + " --out " +
                 path("c.mtpc"));
    ASSERT_EQ(r.code, 0) << r.out;
  }

  fs::path dir_;
};

}  // namespace

TEST(CliSchedule, FourTaskTwoHundredK) {
  auto r = run("schedule cmtl --tasks 4 --tokens 200000");
  ASSERT_EQ(r.code, 0) << r.out;
  const std::vector<std::vector<std::string>> rows{{"1", "20000", "10000", "10000", "10000", "50000"},
                                                   {"2", "0", "30000", "10000", "10000", "50000"},
                                                   {"3", "0", "0", "40000", "10000", "50000"},
                                                   {"4", "0", "0", "0", "50000", "50000"}};
  for (const auto& want : rows) EXPECT_EQ(table_row(r.out, want[0]), want) << r.out;
}

TEST(CliSchedule, ThreeTaskCompact) {
  auto r = run("schedule cmtl --tasks 3 --tokens 10e9 --compact");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(table_row(r.out, "1"), (std::vector<std::string>{"1", "1.67B", "833.33M", "833.33M", "3.33B"}));
  EXPECT_EQ(table_row(r.out, "3"), (std::vector<std::string>{"3", "0", "0", "3.33B", "3.33B"}));
}

TEST(CliSchedule, NamedTasksAndErrors) {
  auto r = run("schedule cmtl_plus --tasks MLM,QT,SO,TF-IDF --tokens 409600 --batch-tokens 1024");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(contains(r.out, "N=3")) << r.out;
  EXPECT_TRUE(contains(r.out, "MLM joins every step")) << r.out;
  EXPECT_NE(run("schedule cmtl --tasks 0 --tokens 100").code, 0);
  EXPECT_NE(run("schedule cmtl --tasks MLM,XYZ --tokens 100").code, 0);
  EXPECT_NE(run("schedule shuffle --tasks 2 --tokens 100").code, 0);
}

TEST(CliAnalyze, PublishedRuns) {
  auto r = run(std::string("analyze --runs ") + MTP_DATA_DIR + "/published_runs.csv");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(contains(r.out, "corrected p=2.547e-03")) << r.out;
  EXPECT_TRUE(contains(r.out, "corrected p=1.069e-06")) << r.out;
  auto pooled = run(std::string("analyze --pooled --runs ") + MTP_DATA_DIR + "/published_runs.csv");
  ASSERT_EQ(pooled.code, 0);
  EXPECT_FALSE(contains(pooled.out, "corrected p=2.547e-03")) << pooled.out;
}

TEST_F(Workspace, AnalyzeBadInput) {
  EXPECT_NE(run("analyze --runs " + path("missing.csv")).code, 0);
  std::ofstream(path("bad.csv")) << "label,a,b\nX,1,oops\n";
  auto r = run("analyze --runs " + path("bad.csv"));
  EXPECT_NE(r.code, 0);
  EXPECT_TRUE(contains(r.out, "error")) << r.out;
}

TEST_F(Workspace, PrepareIsIdempotent) {
  synth_and_prepare(5);
  auto again = run("prepare --input " + path("documents.txt") + " --vocab " + path("vocab.txt") + " --out " +
                   path("c.mtpc"));
  EXPECT_EQ(again.code, 0);
  EXPECT_TRUE(contains(again.out, "store up to date")) << again.out;
}

TEST_F(Workspace, PrepareRejectsEmptyOrMissingInput) {
  ASSERT_EQ(run("synth --out " + dir_.string() + " --documents 2").code, 0);
  std::ofstream(path("empty.txt")).close();
  auto empty = run("prepare --input " + path("empty.txt") + " --vocab " + path("vocab.txt") + " --out " +
                   path("e.mtpc"));
  EXPECT_NE(empty.code, 0);
  EXPECT_TRUE(contains(empty.out, "zero accepted documents")) << empty.out;
  EXPECT_FALSE(fs::exists(path("e.mtpc")));
  auto missing = run("prepare --input " + path("none.txt") + " --vocab " + path("vocab.txt") + " --out " +
                     path("e.mtpc"));
  EXPECT_NE(missing.code, 0);
  EXPECT_TRUE(contains(missing.out, "does not exist")) << missing.out;
}

TEST_F(Workspace, TrainProbeAndResume) {
  synth_and_prepare(60);
  std::ofstream(path("t.conf")) << "corpus=" << path("c.mtpc") << "\nvocab=" << path("vocab.txt")
                                << "\noutput_dir=" << path("run")
                                << "\ntasks=MLM,SO\ntotal_tokens=4096\nbatch_size=8\nmax_seq_len=64\n"
                                   "hidden=16\nlayers=1\n";
  auto t = run("train --quiet --config " + path("t.conf"));
  ASSERT_EQ(t.code, 0) << t.out;
  EXPECT_TRUE(fs::exists(path("run/final.mtpt")));
  EXPECT_TRUE(fs::exists(path("run/metrics.jsonl")));

  auto p = run("probe --checkpoint " + path("run/final.mtpt") + " --corpus " + path("c.mtpc") + " --vocab " +
               path("vocab.txt") + " --pairs 64 --epochs 1");
  ASSERT_EQ(p.code, 0) << p.out;
  EXPECT_TRUE(contains(p.out, "probe accuracy")) << p.out;

  // Resuming from the step-4 checkpoint ends where the full run ended.
  auto resumed = run("train --quiet --config " + path("t.conf") + " --set output_dir=" + path("run2") +
                     " --resume " + path("run/checkpoint-4.mtpt"));
  ASSERT_EQ(resumed.code, 0) << resumed.out;
  auto last_line = [](const std::string& s) {
    auto end = s.find_last_not_of('\n');
    return s.substr(s.rfind('\n', end) + 1, end - s.rfind('\n', end));
  };
  EXPECT_EQ(last_line(resumed.out), last_line(t.out));
}

TEST_F(Workspace, TrainRejectsIncompatibleTasksAndBadConfig) {
  synth_and_prepare(10);
  std::ofstream(path("t.conf")) << "corpus=" << path("c.mtpc") << "\nvocab=" << path("vocab.txt")
                                << "\ntotal_tokens=4096\nbatch_size=8\nmax_seq_len=64\n";
  auto r = run("train --config " + path("t.conf") + " --set tasks=SO,NSP");
  EXPECT_NE(r.code, 0);
  EXPECT_TRUE(contains(r.out, "incompatible")) << r.out;
  EXPECT_NE(run("train --config " + path("t.conf") + " --set colour=blue").code, 0);
  EXPECT_NE(run("train --config " + path("missing.conf")).code, 0);
}

TEST(CliGradcheck, PassesOnTwoTasks) {
  auto r = run("gradcheck --tasks MLM,SO --entries 4");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(contains(r.out, "overall max rel error")) << r.out;
}

TEST(Cli, UnknownSubcommandFails) { EXPECT_NE(run("bogus").code, 0); }
