#include <gtest/gtest.h>

#include <fstream>
#include <regex>
#include <sstream>

#include "helpers.hpp"
#include "hvm/cli.hpp"
#include "hvm/config.hpp"
#include "hvm/image_io.hpp"

using namespace hvm;
using hvm::test::TempDir;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "hvmunet");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

const char* kSmall = R"(name = "cli"
[model]
channels = [4, 8, 16, 32, 64, 128]
input_size = 32
state_dim = 4
[data]
source = "synthetic"
synthetic_count = 4
train_fraction = 0.5
val_fraction = 0.5
augment = false
[train]
epochs = 1
batch_size = 2
)";

fs::path write_config(const fs::path& dir, const std::string& text, const std::string& name = "small.toml") {
  std::ofstream(dir / name) << text;
  return dir / name;
}

std::vector<fs::path> entries(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

std::size_t summary_total(const std::string& text) {
  std::smatch m;
  EXPECT_TRUE(std::regex_search(text, m, std::regex(R"(\ntotal\s+(\d+))")));
  return std::stoul(m[1]);
}

}  // namespace

TEST(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run({}).code, kExitUsage);
  EXPECT_EQ(run({"fly"}).code, kExitUsage);
  EXPECT_EQ(run({"--help"}).code, kExitOk);
  EXPECT_EQ(run({"train", "--config", "/nonexistent/x.toml"}).code, kExitUsage);
  auto r = run({"summary", "--model.depth", "3"});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("model.depth"), std::string::npos) << r.err;
  EXPECT_EQ(run({"summary", "--train.lr_init"}).code, kExitUsage);
  EXPECT_EQ(run({"summary", "--model.orders", "2,3"}).code, kExitUsage);
}

TEST(Cli, TrainWritesRunDirectoryWithOverrides) {
  TempDir dir("cli_train");
  const auto cfg = write_config(dir.path(), kSmall);
  auto r = run({"train", "--config", cfg.string(), "--out", (dir.path() / "runs").string(), "--model.orders",
                "1,2,3,4", "--seed", "17"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  auto runs = entries(dir.path() / "runs");
  ASSERT_EQ(runs.size(), 1u);
  EXPECT_NE(runs[0].filename().string().find("-cli"), std::string::npos);
  for (const char* f : {"config.snapshot", "log.csv", "best.ckpt"}) EXPECT_TRUE(fs::exists(runs[0] / f)) << f;

  const auto snap = load_config(runs[0] / "config.snapshot");
  EXPECT_EQ(snap.model.orders, (std::vector<std::size_t>{1, 2, 3, 4}));
  EXPECT_EQ(snap.train.seed, 17u);
  // Replaying the snapshot reproduces it.
  std::stringstream raw;
  raw << std::ifstream(runs[0] / "config.snapshot").rdbuf();
  EXPECT_EQ(snapshot(parse_config(raw.str())), raw.str());

  // A checkpoint built with different orders is refused with both hashes.
  auto bad = run({"eval", "--config", cfg.string(), "--checkpoint", (runs[0] / "best.ckpt").string()});
  EXPECT_EQ(bad.code, kExitRuntime);
  EXPECT_NE(bad.err.find(hash_hex(snap.model.hash())), std::string::npos) << bad.err;
  EXPECT_NE(bad.err.find(hash_hex(load_config(cfg).model.hash())), std::string::npos) << bad.err;

  auto good = run({"eval", "--config", (runs[0] / "config.snapshot").string(), "--checkpoint",
                   (runs[0] / "best.ckpt").string(), "--split", "val", "--out", (dir.path() / "m.csv").string()});
  EXPECT_EQ(good.code, kExitOk) << good.err;
  EXPECT_NE(good.out.find("DSC "), std::string::npos);
  std::ifstream csv(dir.path() / "m.csv");
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header, "split,tp,tn,fp,fn,dsc,se,sp,acc");
}

TEST(Cli, TrainIsDeterministic) {
  TempDir dir("cli_det");
  const auto cfg = write_config(dir.path(), kSmall);
  auto a = run({"train", "--config", cfg.string(), "--out", (dir.path() / "a").string()});
  auto b = run({"train", "--config", cfg.string(), "--out", (dir.path() / "b").string()});
  ASSERT_EQ(a.code, kExitOk) << a.err;
  ASSERT_EQ(b.code, kExitOk) << b.err;
  auto read = [](const fs::path& p) {
    std::stringstream s;
    s << std::ifstream(p).rdbuf();
    return s.str();
  };
  const auto ra = entries(dir.path() / "a")[0], rb = entries(dir.path() / "b")[0];
  EXPECT_EQ(read(ra / "log.csv"), read(rb / "log.csv"));
  EXPECT_EQ(read(ra / "config.snapshot"), read(rb / "config.snapshot"));
}

TEST(Cli, MissingMasksDirIsNamed) {
  TempDir dir("cli_missing");
  fs::create_directories(dir.path() / "images");
  const auto missing = (dir.path() / "no_masks").string();
  const auto cfg = write_config(dir.path(), std::string(kSmall) + "[data]\nsource = \"folder\"\nimages_dir = \"" +
                                                (dir.path() / "images").string() + "\"\nmasks_dir = \"" + missing +
                                                "\"\n");
  auto r = run({"train", "--config", cfg.string(), "--out", dir.path().string()});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find(missing), std::string::npos) << r.err;
}

TEST(Cli, SynthPredictAndMaskEval) {
  TempDir dir("cli_predict");
  const auto data = dir.path() / "data";
  ASSERT_EQ(run({"synth", "--count", "3", "--size", "40", "--seed", "2", "--out", data.string()}).code, kExitOk);
  EXPECT_EQ(entries(data / "images").size(), 3u);

  // Truth scored against itself.
  auto self = run({"eval", "--pred-dir", (data / "masks").string(), "--truth-dir", (data / "masks").string()});
  ASSERT_EQ(self.code, kExitOk) << self.err;
  EXPECT_NE(self.out.find("DSC 1.0000"), std::string::npos) << self.out;

  const auto cfg = write_config(dir.path(), kSmall);
  auto tr = run({"train", "--config", cfg.string(), "--out", (dir.path() / "runs").string()});
  ASSERT_EQ(tr.code, kExitOk) << tr.err;
  const auto run_dir = entries(dir.path() / "runs")[0];
  const auto preds = dir.path() / "preds";
  auto pr = run({"predict", "--config", (run_dir / "config.snapshot").string(), "--checkpoint",
                 (run_dir / "best.ckpt").string(), "--images", (data / "images").string(), "--out", preds.string()});
  ASSERT_EQ(pr.code, kExitOk) << pr.err;
  auto files = entries(preds);
  EXPECT_EQ(files.size(), 9u);  // prob, mask and overlay per image
  std::size_t masks = 0;
  for (const auto& f : files) {
    if (f.filename().string().ends_with("_mask.png")) {
      ++masks;
      auto m = read_image(f, 1);
      EXPECT_EQ(m.height, 40u);  // original resolution
      for (auto v : m.pixels) ASSERT_TRUE(v == 0 || v == 255);
    }
  }
  EXPECT_EQ(masks, 3u);
  EXPECT_EQ(run({"predict", "--config", cfg.string(), "--checkpoint", (run_dir / "best.ckpt").string()}).code,
            kExitUsage);
}

TEST(Cli, GradcheckPrimitivesPass) {
  TempDir dir("cli_grad");
  auto r = run({"gradcheck", "--only", "primitive:*", "--out", (dir.path() / "g.csv").string()});
  EXPECT_EQ(r.code, kExitOk) << r.out;
  EXPECT_NE(r.out.find("all suites passed"), std::string::npos);
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
  EXPECT_EQ(run({"gradcheck", "--only", "no_such_suite"}).code, kExitUsage);
}

TEST(Cli, SummaryGrowsWithOrder) {
  auto full = run({"summary", "--model.orders", "2,3,4,5"});
  auto flat = run({"summary", "--model.orders", "1,1,1,1"});
  ASSERT_EQ(full.code, kExitOk) << full.err;
  ASSERT_EQ(flat.code, kExitOk) << flat.err;
  EXPECT_GT(summary_total(full.out), summary_total(flat.out));
  EXPECT_NE(full.out.find("enc.stage3.hvss"), std::string::npos);
}
