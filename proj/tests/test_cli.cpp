#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <fstream>

#include "common.hpp"

using namespace nlden;
using nlden::testing::scratch_dir;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
};

Run cli(const std::string& args) {
  const std::string cmd = std::string("\"") + NLDEN_CLI_PATH + "\" " + args + " 2>&1";
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return {-1, ""};
  std::string out;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, p)) out.append(buf, n);
  const int status = pclose(p);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

const std::string kTiny =
    "--set preset=desk --set batch_size=4 --set patch_size=16 --set base_channels=4 --set nl_radius=1 "
    "--set disc_widths=4,4,8,8,8,1 --set patches_per_slice=2 --set image_size=32 --set phantoms=8 "
    "--set test_fraction=0.25 ";

const fs::path& dataset() {
  static const fs::path dir = [] {
    auto d = scratch_dir("cli_data");
    cli(kTiny + "--out-dir \"" + d.string() + "\" phantom-gen");
    return d;
  }();
  return dir;
}

}  // namespace

TEST(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(cli("").code, 1);
  EXPECT_EQ(cli("frobnicate").code, 1);
  EXPECT_EQ(cli("train --no-such-flag").code, 1);
  EXPECT_EQ(cli("--help").code, 0);
}

TEST(Cli, ConfigErrorsExitTwo) {
  const auto r = cli("--set bogus=1 phantom-gen");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("bogus"), std::string::npos);
  EXPECT_EQ(cli("--set variant=M9 train").code, 2);
  const auto dir = scratch_dir("cli_cfg");
  std::ofstream(dir / "bad.cfg") << "preset = desk\nlr_g = -1\n";
  EXPECT_EQ(cli("--config \"" + (dir / "bad.cfg").string() + "\" --out-dir \"" + dir.string() +
                "\" train --data \"" + dataset().string() + "\"")
                .code,
            2);
}

TEST(Cli, IoErrorsExitFour) {
  EXPECT_EQ(cli("evaluate --source low --data /nonexistent/dir").code, 4);
  EXPECT_EQ(cli("--config /nonexistent.cfg phantom-gen").code, 4);
  EXPECT_EQ(cli("denoise --checkpoint /nonexistent.nlck --input a --output b").code, 4);
}

TEST(Cli, PhantomGenWritesLayout) {
  const auto d = dataset();
  EXPECT_TRUE(fs::exists(d / "manifest.txt"));
  EXPECT_TRUE(fs::exists(d / "phantoms" / "p0007_meta.txt"));
  EXPECT_EQ(read_tensor(d / "phantoms" / "p0000_clean.nlt1").shape(), (Shape{1, 32, 32}));
}

TEST(Cli, TrainEvaluateDenoiseRoundTrip) {
  const auto run = scratch_dir("cli_run");
  const std::string data = "--data \"" + dataset().string() + "\"";
  const std::string out = "--out-dir \"" + run.string() + "\" ";
  auto r = cli(kTiny + "--set max_iters=3 --seed 4 " + out + "train --variant M3 " + data);
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(fs::exists(run / "final.nlck"));
  EXPECT_NE(slurp(run / "config.txt").find("variant = M3"), std::string::npos);
  EXPECT_NE(slurp(run / "config.txt").find("seed = 4"), std::string::npos);

  r = cli(out + "evaluate --checkpoint \"" + (run / "final.nlck").string() + "\" " + data);
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(r.out.substr(0, r.out.find('\n')), "id,rmse,psnr,ssim,cnr,tml");
  EXPECT_EQ(slurp(run / "eval.csv"), r.out);

  r = cli(out + "evaluate --source clean --output \"" + (run / "clean.csv").string() + "\" " + data);
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find(",0,inf,1,"), std::string::npos) << r.out;

  const std::string in = (dataset() / "phantoms" / "p0000_low.nlt1").string();
  const std::string ck = "--checkpoint \"" + (run / "final.nlck").string() + "\" ";
  r = cli("denoise " + ck + "--input \"" + in + "\" --output \"" + (run / "a.nlt1").string() + "\" --pgm \"" +
          (run / "a.pgm").string() + "\"");
  ASSERT_EQ(r.code, 0) << r.out;
  cli("denoise " + ck + "--input \"" + in + "\" --output \"" + (run / "b.nlt1").string() + "\"");
  EXPECT_EQ(read_tensor(run / "a.nlt1").shape(), (Shape{1, 32, 32}));
  EXPECT_EQ(slurp(run / "a.nlt1"), slurp(run / "b.nlt1"));
  EXPECT_TRUE(fs::exists(run / "a.pgm"));

  r = cli(kTiny + "--set base_channels=8 denoise " + ck + "--input \"" + in + "\" --output \"" +
          (run / "c.nlt1").string() + "\"");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("base_channels"), std::string::npos) << r.out;

  r = cli(out + "dump-weights --id p0000 " + ck + data);
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(read_tensor(run / "p0000_weights.nlt1").shape(), (Shape{1, 1, 32, 32}));
  EXPECT_EQ(read_tensor(run / "p0000_attention.nlt1").shape(), (Shape{1, 8, 8, 9}));
}

TEST(Cli, RadiusSweepCoversEndpoints) {
  const auto run = scratch_dir("cli_sweep");
  const auto r = cli(kTiny + "--set max_iters=2 --out-dir \"" + run.string() + "\" ablate --radius-sweep --radii 0,1,full --data \"" +
                     dataset().string() + "\"");
  ASSERT_EQ(r.code, 0) << r.out;
  const auto csv = slurp(run / "radius_sweep.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "radius,psnr,rmse,ssim");
  EXPECT_NE(csv.find("\n0,"), std::string::npos);
  EXPECT_NE(csv.find("\nfull,"), std::string::npos);
}

TEST(Cli, GradcheckReportsInjectedFault) {
  auto r = cli("gradcheck --seeds 2 --inject-fault conv2d");
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.out.find("conv2d"), std::string::npos);
  EXPECT_NE(r.out.find("FAIL"), std::string::npos) << r.out;
  r = cli("gradcheck --seeds 2");
  EXPECT_EQ(r.code, 0) << r.out;
}
