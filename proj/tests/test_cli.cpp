#include <gtest/gtest.h>

#include "cli_harness.hpp"

namespace {

bench::Benchmark small() {
  bench::Params p;
  p.classes = 4;
  p.dim = 12;
  p.pool_per_class = 6;
  p.test_queries = 40;
  p.candidates_per_class = 8;
  return bench::make(p);
}

class Cli : public testing::Test {
 protected:
  static void SetUpTestSuite() { dir_ = new std::filesystem::path(cli::write_benchmark(small(), "unit")); }
  static void TearDownTestSuite() { delete dir_; }

  static std::string all_inputs() {
    return cli::set_args(*dir_, "support") + cli::set_args(*dir_, "pool") + cli::set_args(*dir_, "test") +
           cli::text_args(*dir_);
  }
  static const std::filesystem::path& dir() { return *dir_; }

 private:
  static std::filesystem::path* dir_;
};

std::filesystem::path* Cli::dir_ = nullptr;

}  // namespace

TEST_F(Cli, EvalReportLine) {
  const auto r = cli::run("eval" + all_inputs() + " --shots 4 --synth 2 --epochs 2");
  ASSERT_EQ(r.exit_code, 0);
  const auto report = cafo::parse_report(r.out);
  EXPECT_EQ(report.mode, "adaptive-zs");
  EXPECT_EQ(report.shots, 4u);
  EXPECT_EQ(report.synth, 2u);
  EXPECT_EQ(cafo::format_report(report) + "\n", r.out);
}

TEST_F(Cli, TrainPrintsEpochsAndSavesKeys) {
  const auto prefix = (dir() / "trained").string();
  const auto r = cli::run("train" + cli::set_args(dir(), "support") + cli::set_args(dir(), "pool") +
                          cli::text_args(dir()) + " --shots 4 --synth 1 --epochs 3 --out-prefix " + prefix);
  ASSERT_EQ(r.exit_code, 0);
  EXPECT_EQ(r.out.rfind("epoch=1 loss=", 0), 0u) << r.out;
  EXPECT_NE(r.out.find("\nepoch=3 loss="), std::string::npos);
  const auto keys = cafo::read_embeddings(prefix + ".clip.cafo");
  EXPECT_EQ(keys.rows(), 20);
  EXPECT_EQ(cafo::read_labels(prefix + ".cafl").size(), 20u);

  const auto e = cli::run("eval" + cli::set_args(dir(), "test") + cli::text_args(dir()) +
                          " --shots 4 --synth 1 --cache-prefix " + prefix);
  ASSERT_EQ(e.exit_code, 0);
  EXPECT_GT(cafo::parse_report(e.out).acc_ensemble, 0.5);
}

TEST_F(Cli, FilterKeepsTopCandidates) {
  const auto prefix = (dir() / "filtered").string();
  const auto r = cli::run("filter" + cli::set_args(dir(), "pool") + cli::text_args(dir()) + " --synth 3 --out-prefix " +
                          prefix);
  ASSERT_EQ(r.exit_code, 0);
  const auto labels = cafo::read_labels(prefix + ".cafl");
  EXPECT_EQ(labels.labels, (std::vector<std::uint32_t>{0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3}));
}

TEST_F(Cli, ZeroShotAndSweep) {
  const std::string inputs = cli::set_args(dir(), "pool") + cli::set_args(dir(), "test") + cli::text_args(dir());
  const auto z = cli::run("zeroshot" + inputs + " --synth 2 --epochs 1");
  ASSERT_EQ(z.exit_code, 0);
  EXPECT_EQ(cafo::parse_report(z.out).shots, 0u);

  const auto out = dir() / "sweep.csv";
  const auto s = cli::run("sweep" + all_inputs() + " --shots 2 --epochs 1 --axis k-prime --values 2,1 --out " +
                          out.string());
  ASSERT_EQ(s.exit_code, 0);
  const auto csv = cli::slurp(out);
  EXPECT_EQ(csv.rfind("value,accuracy\n1,", 0), 0u) << csv;
  EXPECT_NE(csv.find("\n2,"), std::string::npos);
}

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(cli::run("").exit_code, 2);
  EXPECT_EQ(cli::run("eval --bogus").exit_code, 2);
  EXPECT_EQ(cli::run("eval" + all_inputs() + " --models dino --ensemble average").exit_code, 2);
  EXPECT_EQ(cli::run("eval" + all_inputs() + " --shots 50").exit_code, 2);
  EXPECT_EQ(cli::run("eval" + cli::set_args(dir(), "support") + cli::text_args(dir()) +
                     " --test-clip /nonexistent.cafo --test-dino x --test-labels y")
                .exit_code,
            2);
  // A corrupt feature file is a runtime failure.
  const auto bad = dir() / "bad.cafo";
  std::ofstream(bad) << "NOPE";
  const auto d = dir().string() + "/";
  EXPECT_EQ(cli::run("eval" + cli::set_args(dir(), "support") + cli::text_args(dir()) + " --shots 2 --test-clip " +
                     bad.string() + " --test-dino " + d + "test_dino.cafo --test-labels " + d + "test_labels.cafl")
                .exit_code,
            1);
  EXPECT_EQ(cli::run("eval --help").exit_code, 0);
}
