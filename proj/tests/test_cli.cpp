#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "qexplain/cli.hpp"
#include "qexplain/trace.hpp"
#include "support.hpp"

using namespace qx;
using nlohmann::json;

namespace {

struct CliRun {
  int code = 0;
  std::string out;
  std::string err;
};

CliRun cli(std::vector<std::string> args) {
  args.insert(args.begin(), "qexplain");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  CliRun r;
  r.code = cli_main(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::size_t count_lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) n += !line.empty();
  return n;
}

// gen-traces, split, rollout and a short training in `dir`.
void pipeline(const test::TempDir& dir) {
  ASSERT_EQ(cli({"gen-traces", "--kind", "abr", "--n", "10", "--duration", "120", "-o", dir / "all.jsonl"}).code, 0);
  ASSERT_EQ(cli({"split", "--kind", "abr", "--traces", dir / "all.jsonl", "--train-out", dir / "train.jsonl", "--holdout-out",
                 dir / "holdout.jsonl"})
                .code,
            0);
  ASSERT_EQ(cli({"rollout", "--env", "abr", "--traces", dir / "train.jsonl", "-o", dir / "data.jsonl"}).code, 0);
  std::ofstream(dir / "small.json") << json{{"trunk_widths", {16, 16}}, {"head_widths", {8}}, {"stage1_epochs", 3},
                                            {"stage2_epochs", 1}}
                                           .dump();
  ASSERT_EQ(cli({"train", "--data", dir / "data.jsonl", "--config", dir / "small.json", "-o", dir / "m.json"}).code,
            0);
}

}  // namespace

TEST(Cli, GenTracesWritesOneLinePerTrace) {
  test::TempDir dir;
  const CliRun r = cli({"gen-traces", "--kind", "cc", "--n", "50", "-o", dir / "cc.jsonl", "--json"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(json::parse(r.out).at("n"), 50);
  EXPECT_EQ(count_lines(dir / "cc.jsonl"), 50u);
  EXPECT_EQ(load_traces(dir / "cc.jsonl", TraceKind::cc).size(), 50u);
}

TEST(Cli, HelpAndParseErrors) {
  EXPECT_EQ(cli({"--help"}).code, 0);
  EXPECT_NE(cli({"gen-traces", "--bogus-flag"}).code, 0);
  EXPECT_NE(cli({"gen-traces", "--kind", "video", "-o", "x.jsonl"}).code, 0);
  const CliRun missing = cli({"train"});
  EXPECT_EQ(missing.code, 1);
  EXPECT_FALSE(missing.err.empty());
}

TEST(Cli, MissingInputIsAUserError) {
  test::TempDir dir;
  const CliRun r = cli({"rollout", "--traces", dir / "absent.jsonl", "-o", dir / "d.jsonl"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("absent.jsonl"), std::string::npos);
}

TEST(Cli, TrainingTwiceGivesTheSameDigest) {
  test::TempDir dir;
  ASSERT_NO_FATAL_FAILURE(pipeline(dir));
  const std::vector<std::string> args{"train", "--data", dir / "data.jsonl", "--config", dir / "small.json", "--json"};
  auto a = args, b = args;
  a.insert(a.end(), {"-o", dir / "a.json"});
  b.insert(b.end(), {"-o", dir / "b.json"});
  const CliRun ra = cli(a), rb = cli(b);
  ASSERT_EQ(ra.code, 0) << ra.err;
  ASSERT_EQ(rb.code, 0) << rb.err;
  EXPECT_EQ(json::parse(ra.out).at("digest"), json::parse(rb.out).at("digest"));
}

TEST(Cli, EvaluateCsvHasOneRowPerQueryComponent) {
  test::TempDir dir;
  ASSERT_NO_FATAL_FAILURE(pipeline(dir));
  const CliRun r = cli({"evaluate", "--model", dir / "m.json", "--holdout", dir / "holdout.jsonl", "--csv",
                     dir / "f.csv", "--summary", dir / "s.json", "--tables", dir / "tables"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream in(dir / "s.json");
  const json summary = json::parse(in);
  ASSERT_FALSE(summary.empty());
  std::size_t expected = 0;
  for (const auto& m : summary) {
    std::size_t live = 0;
    for (const auto& [name, c] : m.at("components").items()) live += !c.at("excluded").get<bool>();
    expected += m.at("queries").get<std::size_t>() * live;
  }
  EXPECT_EQ(count_lines(dir / "f.csv"), expected + 1);
  EXPECT_TRUE(std::filesystem::exists(dir / "tables" / "fidelity_hist.tsv"));
  EXPECT_TRUE(std::filesystem::exists(dir / "tables" / "events.tsv"));
}

TEST(Cli, ExplainAndBench) {
  test::TempDir dir;
  ASSERT_NO_FATAL_FAILURE(pipeline(dir));
  const TraceSet holdout = load_traces(dir / "holdout.jsonl", TraceKind::abr);
  const std::string state = holdout.traces.front().id + "@5";
  const CliRun e = cli({"explain", "--model", dir / "m.json", "--holdout", dir / "holdout.jsonl", "--state", state,
                     "--action", "3", "--json"});
  ASSERT_EQ(e.code, 0) << e.err;
  EXPECT_EQ(json::parse(e.out).at("components").size(), 3u);
  EXPECT_EQ(cli({"explain", "--model", dir / "m.json", "--holdout", dir / "holdout.jsonl", "--state", "none@0"}).code,
            1);
  const CliRun b = cli({"bench", "--model", dir / "m.json", "--holdout", dir / "holdout.jsonl", "--train",
                     dir / "train.jsonl", "--n", "5", "--json"});
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_FALSE(json::parse(b.out).empty());
}
