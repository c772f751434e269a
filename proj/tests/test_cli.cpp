#include <gtest/gtest.h>

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "reflora/cli.hpp"

using reflora::parse_and_dispatch;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "reflora");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = parse_and_dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::string& path) {
  std::ifstream f(path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> v;
  std::istringstream is(s);
  for (std::string l; std::getline(is, l);) v.push_back(l);
  return v;
}

std::string body(const std::string& s) {
  std::string b;
  for (const auto& l : lines(s)) {
    if (l.rfind("#", 0) != 0) b += l + "\n";
  }
  return b;
}

std::string tmp(const std::string& name) { return ::testing::TempDir() + name; }

}  // namespace

TEST(Cli, NoArgumentsIsUsageError) {
  const Result r = invoke({});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("usage"), std::string::npos);
}

TEST(Cli, UnknownCommand) { EXPECT_EQ(invoke({"fit"}).code, 2); }

TEST(Cli, HelpAndVersion) {
  EXPECT_EQ(invoke({"--help"}).code, 0);
  const Result r = invoke({"mf", "--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("--eta"), std::string::npos);
  EXPECT_EQ(invoke({"--version"}).out, std::string(reflora::kVersion) + "\n");
}

TEST(Cli, MfHappyPath) {
  const std::string path = tmp("cli_mf.csv");
  const Result r = invoke({"mf", "--method", "reflora", "--eta", "0.01", "--steps", "20", "--seed",
                           "42", "--out", path});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto ls = lines(slurp(path));
  ASSERT_GT(ls.size(), 5u);
  EXPECT_EQ(ls[0], std::string("# reflora ") + reflora::kVersion);
  EXPECT_EQ(ls[1].rfind("# command: reflora mf ", 0), 0u);
  bool saw_seed = false, saw_header = false;
  std::size_t data_rows = 0;
  for (const auto& l : ls) {
    if (l == "# seed: 42") saw_seed = true;
    if (l == "step,loss,norm_a,norm_b,grad_norm_a,grad_norm_b,balance_gap,step_time_ns") saw_header = true;
    else if (l[0] != '#') ++data_rows;
  }
  EXPECT_TRUE(saw_seed);
  EXPECT_TRUE(saw_header);
  EXPECT_EQ(data_rows, 21u);
}

TEST(Cli, ZeroEtaTheoremExactIsUsageError) {
  const Result r = invoke({"mf", "--eta", "0", "--mode", "theorem-exact", "--lipschitz", "1"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("--eta"), std::string::npos);
  EXPECT_NE(r.err.find("discontinuity"), std::string::npos);
}

TEST(Cli, BadFlagValuesNameTheFlag) {
  Result r = invoke({"mf", "--method", "sgd"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("--method"), std::string::npos);
  r = invoke({"mf", "--eta", "abc"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("--eta"), std::string::npos);
  r = invoke({"mf", "--no-such-flag"});
  EXPECT_EQ(r.code, 2);
  r = invoke({"mf", "--steps", "1", "--out", "/nonexistent-dir/x.csv"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("--out"), std::string::npos);
}

TEST(Cli, RuntimeErrorExitsOne) {
  const Result r = invoke({"mf", "--steps", "2", "--sigma-a", "0", "--warmup", "0"});
  EXPECT_EQ(r.code, 1);
}

TEST(Cli, BoundScanGridExcludesZero) {
  const Result r = invoke({"bound-scan", "--eta-min", "-0.5", "--eta-max", "0.5", "--points", "101"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::size_t identity = 0, exact = 0;
  for (const auto& l : lines(body(r.out))) {
    if (l.rfind("eta,", 0) == 0) continue;
    const auto c = l.find(',');
    EXPECT_NE(std::stod(l.substr(0, c)), 0.0);
    if (l.find(",identity,") != std::string::npos) ++identity;
    if (l.find(",theorem-exact,") != std::string::npos) ++exact;
  }
  EXPECT_EQ(identity, 100u);
  EXPECT_EQ(exact, 100u);
}

TEST(Cli, ConfigFileEquivalentToFlags) {
  const std::string cfg = tmp("cli.cfg");
  {
    std::ofstream f(cfg);
    f << "# experiment\nmethod = scaledgd\neta = 0.02\nsteps = 15\nm = 20\nn = 16\nr = 2\n";
  }
  const Result a = invoke({"mf", "--config", cfg});
  const Result b = invoke({"mf", "--method", "scaledgd", "--eta", "0.02", "--steps", "15", "--m",
                           "20", "--n", "16", "--r", "2"});
  ASSERT_EQ(a.code, 0) << a.err;
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_EQ(a.out, b.out);

  // Flags override the file.
  const Result c = invoke({"mf", "--config", cfg, "--eta", "0.01"});
  EXPECT_NE(c.out.find("# config: eta = 0.01\n"), std::string::npos);
}

TEST(Cli, HeaderCommandReproducesBody) {
  const Result first = invoke({"linreg", "--method", "reflora-s", "--mode", "theorem-exact",
                               "--steps", "30", "--seed", "9"});
  ASSERT_EQ(first.code, 0) << first.err;
  std::string cmd;
  for (const auto& l : lines(first.out)) {
    if (l.rfind("# command: reflora ", 0) == 0) cmd = l.substr(19);
  }
  ASSERT_FALSE(cmd.empty());
  std::vector<std::string> args;
  std::istringstream is(cmd);
  for (std::string t; is >> t;) args.push_back(t);
  const Result again = invoke(args);
  ASSERT_EQ(again.code, 0) << again.err;
  EXPECT_EQ(again.out, first.out);
}

TEST(Cli, ResolvedConfigReplaysExactly) {
  const Result first = invoke({"mf", "--method", "lora", "--eta", "0.03", "--steps", "40"});
  const std::string cfg = tmp("cli_replay.cfg");
  {
    std::ofstream f(cfg);
    for (const auto& l : lines(first.out)) {
      if (l.rfind("# config: ", 0) == 0) f << l.substr(10) << "\n";
    }
  }
  const Result again = invoke({"mf", "--config", cfg});
  ASSERT_EQ(again.code, 0) << again.err;
  EXPECT_EQ(body(again.out), body(first.out));
}

TEST(Cli, CompareEmitsWideTable) {
  const Result r = invoke({"compare", "--methods", "lora,reflora,scaledgd", "--steps", "10", "--m",
                           "20", "--n", "15", "--r", "2"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto ls = lines(body(r.out));
  EXPECT_EQ(ls[0].rfind("step,lora:loss,", 0), 0u);
  EXPECT_NE(ls[0].find("reflora:loss"), std::string::npos);
  EXPECT_NE(ls[0].find("scaledgd:loss"), std::string::npos);
  EXPECT_EQ(ls.size(), 12u);
}

TEST(Cli, OverheadSmall) {
  const Result r = invoke({"overhead", "--dims", "40x30", "--ranks", "2,4", "--repeats", "10"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(lines(body(r.out)).size(), 9u);
  EXPECT_EQ(invoke({"overhead", "--repeats", "3"}).code, 2);
  EXPECT_EQ(invoke({"overhead", "--dims", "40by30"}).code, 2);
}

TEST(Cli, PropsReport) {
  const Result ok = invoke({"props-report", "--trials", "1"});
  EXPECT_EQ(ok.code, 0) << ok.out;
  EXPECT_NE(ok.out.find("PASS"), std::string::npos);
  const Result bad = invoke({"props-report", "--trials", "1", "--inject-fault"});
  EXPECT_NE(bad.code, 0);
  EXPECT_NE(bad.out.find("refactor.stationarity"), std::string::npos);
  EXPECT_NE(bad.out.find("FAIL"), std::string::npos);
}

TEST(Cli, DumpInstanceReadable) {
  const std::string path = tmp("cli_instance.txt");
  const Result r = invoke({"mf", "--steps", "1", "--m", "5", "--n", "4", "--r", "2",
                           "--dump-instance", path});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string text = slurp(path);
  EXPECT_EQ(text.rfind("# reflora", 0), 0u);
  EXPECT_NE(text.find("reflora-instance mf m=5 n=4 r=2 seed=42"), std::string::npos);
}
