#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "osuda/cli.hpp"
#include "osuda/data.hpp"
#include "osuda/image_io.hpp"
#include "support.hpp"

namespace osuda {
namespace {

namespace fs = std::filesystem;
using testing::TempDir;

struct Invocation {
  int code;
  std::string out;
  std::string err;
};

Invocation run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

// One run directory per train call under out.
fs::path only_run_dir(const fs::path& out) {
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(out)) dirs.push_back(e.path());
  if (dirs.size() != 1) throw std::runtime_error("expected one run directory in " + out.string());
  return dirs[0];
}

class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("cli");
    const auto r = run({"make-synth", "--out", (dir_->path() / "synth").string(), "--n-per-class", "4", "--classes",
                        "3", "--size", "16"});
    ASSERT_EQ(r.code, 0) << r.err;
    std::ofstream(dir_->path() / "run.cfg") << "epochs=2\nbatch_size=4\ninput_size=16\ncm_lr=0.01\n"
                                               "aum_base_channels=4\nclassifier_backbone=small_cnn\n"
                                               "classifier_width=4\ntest_mode=true\n"
                                            << "source_root=" << (dir_->path() / "synth" / "source").string() << "\n"
                                            << "target_root=" << (dir_->path() / "synth" / "target").string() << "\n";
  }
  static void TearDownTestSuite() { delete dir_; }

  static std::string cfg() { return (dir_->path() / "run.cfg").string(); }

  // Trains with the given overrides into a fresh directory and returns the
  // run directory.
  static fs::path train(const std::string& tag, const std::vector<std::string>& sets) {
    const auto out = dir_->path() / ("runs-" + tag);
    std::vector<std::string> args{"train", "--config", cfg(), "--out", out.string()};
    for (const auto& s : sets) {
      args.push_back("--set");
      args.push_back(s);
    }
    const auto r = run(args);
    EXPECT_EQ(r.code, 0) << r.err;
    return only_run_dir(out);
  }

  static TempDir* dir_;
};

TempDir* CliTest::dir_ = nullptr;

TEST_F(CliTest, MakeSynthIsByteIdenticalAndLoadable) {
  TempDir again("cli-synth");
  const auto r = run({"make-synth", "--out", again.path().string(), "--n-per-class", "4", "--classes", "3", "--size", "16"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto a = load_image_folder(dir_->path() / "synth" / "target");
  const auto b = load_image_folder(again.path() / "target");
  ASSERT_EQ(a.size(), 12u);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(file_bytes(a.samples[i].path), file_bytes(b.samples[i].path));
  EXPECT_TRUE(fs::exists(again.path() / "provenance.json"));
  EXPECT_EQ(read_image(a.samples[0].path).width, 16);
}

TEST_F(CliTest, TrainWritesManifestCheckpointAndReport) {
  const auto run_dir = train("smoke", {"epochs=1", "variant=DE", "use_rec_loss=true"});
  for (const char* name : {"manifest.json", "config.cfg", "completion.json", "checkpoint.osc", "train_log.jsonl",
                           "metrics.json", "metrics.csv", "metrics.md"}) {
    EXPECT_TRUE(fs::exists(run_dir / name)) << name;
  }
  std::ifstream mf(run_dir / "manifest.json");
  const auto manifest = nlohmann::json::parse(mf);
  EXPECT_EQ(manifest.at("method"), "DE+RL");
  EXPECT_EQ(manifest.at("config").at("epochs"), "1");
  EXPECT_EQ(manifest.at("config").at("mixup_alpha"), "5");
  EXPECT_EQ(manifest.at("datasets").at("source").at("size"), 12);
  std::ifstream cf(run_dir / "completion.json");
  EXPECT_EQ(nlohmann::json::parse(cf).at("status"), "completed");
  EXPECT_NE(run_dir.filename().string().find("DE+RL"), std::string::npos);
}

TEST_F(CliTest, ReportedLabelFollowsTheOverrides) {
  const auto out = dir_->path() / "runs-label";
  const auto r = run({"train", "--config", cfg(), "--out", out.string(), "--set", "max_steps=1", "--set", "variant=DE",
                      "--set", "use_rec_loss=true"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out.rfind("DE+RL\n", 0), 0u) << r.out;
  EXPECT_NE(r.out.find("| Mean |"), std::string::npos);
}

TEST_F(CliTest, ConfigAndDataErrorsUseTheirExitCodes) {
  const auto out = (dir_->path() / "runs-errors").string();
  const auto unknown = run({"train", "--config", cfg(), "--out", out, "--set", "epochz=1"});
  EXPECT_EQ(unknown.code, kExitUsage);
  EXPECT_NE(unknown.err.find("epochz"), std::string::npos);

  const auto invalid = run({"train", "--config", cfg(), "--out", out, "--set", "use_rec_loss=true"});
  EXPECT_EQ(invalid.code, kExitUsage);
  EXPECT_NE(invalid.err.find("use_rec_loss"), std::string::npos);

  const std::string missing = (dir_->path() / "no-such-dataset").string();
  const auto data = run({"train", "--config", cfg(), "--out", out, "--set", "source_root=" + missing});
  EXPECT_EQ(data.code, kExitData);
  EXPECT_NE(data.err.find(missing), std::string::npos);

  const auto no_config = run({"train", "--config", (dir_->path() / "absent.cfg").string()});
  EXPECT_EQ(no_config.code, kExitData);

  EXPECT_EQ(run({}).code, kExitUsage);
  EXPECT_EQ(run({"frobnicate"}).code, kExitUsage);
  EXPECT_EQ(run({"eval"}).code, kExitUsage);
  EXPECT_EQ(run({"--help"}).code, kExitOk);
}

TEST_F(CliTest, EvalIsDeterministicAndChecksClasses) {
  const auto run_dir = train("eval", {"max_steps=2"});
  const auto ckpt = (run_dir / "checkpoint.osc").string();
  const auto first = run({"eval", "--checkpoint", ckpt});
  const auto second = run({"eval", "--checkpoint", ckpt, "--out", (dir_->path() / "eval-out").string()});
  ASSERT_EQ(first.code, 0) << first.err;
  EXPECT_EQ(first.out, second.out);
  EXPECT_NE(first.out.find("| Mean |"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir_->path() / "eval-out" / "metrics.json"));

  TempDir two("cli-two");
  ASSERT_EQ(run({"make-synth", "--out", two.path().string(), "--n-per-class", "4", "--classes", "2", "--size", "16"}).code,
            0);
  const auto mismatch = run({"eval", "--checkpoint", ckpt, "--data", (two.path() / "target").string()});
  EXPECT_EQ(mismatch.code, kExitData);
  EXPECT_NE(mismatch.err.find("classes"), std::string::npos);
}

TEST_F(CliTest, CorruptedCheckpointIsRejected) {
  const auto bad = dir_->path() / "bad.osc";
  std::ofstream(bad) << "OSUDACON garbage";
  const auto r = run({"eval", "--checkpoint", bad.string()});
  EXPECT_EQ(r.code, kExitData);
  EXPECT_NE(r.err.find("checkpoint"), std::string::npos);

  const auto run_dir = train("corrupt", {"max_steps=1"});
  std::string bytes = file_bytes(run_dir / "checkpoint.osc");
  bytes[bytes.size() / 2] ^= 0x10;
  std::ofstream(dir_->path() / "flipped.osc", std::ios::binary) << bytes;
  const auto flipped = run({"eval", "--checkpoint", (dir_->path() / "flipped.osc").string()});
  EXPECT_EQ(flipped.code, kExitData);
}

TEST_F(CliTest, AugmentDumpWritesThreePanelGrids) {
  const auto de = train("dump-de", {"max_steps=2", "variant=DE", "use_rec_loss=true"});
  const auto se = train("dump-se", {"max_steps=2"});
  const auto de_out = dir_->path() / "grids-de";
  const auto se_out = dir_->path() / "grids-se";
  ASSERT_EQ(run({"augment-dump", "--checkpoint", (de / "checkpoint.osc").string(), "--n", "4", "--out", de_out.string()}).code,
            0);
  ASSERT_EQ(run({"augment-dump", "--checkpoint", (se / "checkpoint.osc").string(), "--n", "4", "--out", se_out.string()}).code,
            0);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(de_out)) {
    ++files;
    const auto img = read_image(e.path());
    EXPECT_EQ(img.width, 3 * 16);
    EXPECT_EQ(img.height, 16);
  }
  EXPECT_EQ(files, 4u);

  // Same inputs (source and target panels), different augmented panels.
  double diff = 0;
  for (const char* name : {"grid_000.png", "grid_001.png", "grid_002.png", "grid_003.png"}) {
    const auto a = read_image(de_out / name);
    const auto b = read_image(se_out / name);
    for (int y = 0; y < 16; ++y) {
      for (int x = 0; x < 48; ++x) {
        for (int c = 0; c < 3; ++c) {
          const auto i = static_cast<std::size_t>((y * 48 + x) * 3 + c);
          if (x < 32) {
            EXPECT_EQ(a.pixels[i], b.pixels[i]);
          } else {
            diff += std::abs(int(a.pixels[i]) - int(b.pixels[i]));
          }
        }
      }
    }
  }
  EXPECT_GT(diff, 0.0);

  const auto source_only = train("dump-so", {"max_steps=1", "use_augmenter=false"});
  const auto r = run({"augment-dump", "--checkpoint", (source_only / "checkpoint.osc").string(), "--out",
                      (dir_->path() / "grids-so").string()});
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("augmentation module"), std::string::npos);
}

}  // namespace
}  // namespace osuda
