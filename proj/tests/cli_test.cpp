// Copyright 2026 The TaskSeg Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "taskseg/annotations.hpp"
#include "taskseg/config.hpp"
#include "taskseg/dataset.hpp"
#include "taskseg/synthetic.hpp"
#include "test_util.hpp"

namespace {

std::string g_cli;

int run(const std::string& args, const std::string& out_file = "/dev/null") {
  const std::string cmd = g_cli + " " + args + " >" + out_file + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST(Cli, PipelineSmoke) {
  const std::string dir = tsu::scratch_dir("cli_pipe");
  ASSERT_EQ(run("synth-gen --seed 1 --count 3 --height 32 --width 32 --out " + dir + "/data"), 0);
  taskseg::Config cfg;
  cfg.model_dim = 16;
  cfg.model_queries = 8;
  cfg.model_text_len = 6;
  cfg.model_text_ctx = 2;
  cfg.model_context_width = 10;
  cfg.train_iters = 8;
  cfg.train_dataset = dir + "/data";
  cfg.train_checkpoint = dir + "/ck.tsg";
  cfg.train_trace = dir + "/trace.tsv";
  {
    std::ofstream f(dir + "/cfg");
    f << cfg.serialize();
  }
  ASSERT_EQ(run("train --config " + dir + "/cfg"), 0);
  ASSERT_EQ(run("eval --checkpoint " + dir + "/ck.tsg --data " + dir + "/data --task semantic --out " +
                dir + "/report.tsv --pred-out " + dir + "/preds"),
            0);
  const std::string report = slurp(dir + "/report.tsv");
  EXPECT_NE(report.find("miou\t"), std::string::npos);
  EXPECT_TRUE(std::filesystem::exists(dir + "/preds/panoptic.meta"));
}

TEST(Cli, DeriveGtTwoCarScene) {
  // Dataset with two same-class things over one stuff region.
  const std::string dir = tsu::scratch_dir("cli_derive");
  taskseg::ClassTable classes;
  classes.entries = {{0, "road", false}, {1, "car", true}};
  taskseg::Dataset ds;
  ds.classes = classes;
  taskseg::DatasetSample s;
  s.file_name = "two_cars.png";
  s.label.width = 8;
  s.label.height = 8;
  s.label.segment_map.assign(64, 1);
  for (int i = 0; i < 4; ++i) {
    s.label.segment_map[static_cast<std::size_t>(i)] = 2;       // car one, row 0
    s.label.segment_map[static_cast<std::size_t>(32 + i)] = 3;  // car two, row 4
  }
  s.label.segments = {{1, 0, false}, {2, 1, true}, {3, 1, true}};
  s.image.width = 8;
  s.image.height = 8;
  s.image.pixels.assign(8 * 8 * 3, 64);
  ds.samples.push_back(s);
  taskseg::write_dataset(dir + "/data", ds);

  ASSERT_EQ(run("derive-gt --data " + dir + "/data --task instance --out " + dir + "/derived"), 0);
  const std::string summary = slurp(dir + "/derived/targets.tsv");
  EXPECT_EQ(std::count(summary.begin(), summary.end(), '\n'), 2);  // exactly two instance masks
  EXPECT_TRUE(std::filesystem::exists(dir + "/derived/two_cars.t0.png"));
  EXPECT_TRUE(std::filesystem::exists(dir + "/derived/two_cars.t1.png"));
  EXPECT_FALSE(std::filesystem::exists(dir + "/derived/two_cars.t2.png"));
}

TEST(Cli, PredictionFilesDifferAcrossTaskTokens) {
  const std::string dir = tsu::scratch_dir("cli_taskdiff");
  ASSERT_EQ(run("synth-gen --seed 2 --count 3 --height 32 --width 32 --out " + dir + "/data"), 0);
  taskseg::Config cfg;
  cfg.model_dim = 16;
  cfg.model_queries = 8;
  cfg.model_text_len = 6;
  cfg.model_text_ctx = 2;
  cfg.model_context_width = 10;
  cfg.train_iters = 40;
  cfg.train_seed = 4;
  cfg.train_dataset = dir + "/data";
  cfg.train_checkpoint = dir + "/ck.tsg";
  cfg.train_trace = dir + "/trace.tsv";
  cfg.post_object_threshold = 0.15f;  // keep early-training predictions non-empty
  cfg.post_overlap_threshold = 0.5f;
  {
    std::ofstream f(dir + "/cfg");
    f << cfg.serialize();
  }
  ASSERT_EQ(run("train --config " + dir + "/cfg"), 0);
  ASSERT_EQ(run("eval --checkpoint " + dir + "/ck.tsg --data " + dir + "/data --task panoptic --out " +
                dir + "/rp.tsv --pred-out " + dir + "/pred_pan"),
            0);
  ASSERT_EQ(run("eval --checkpoint " + dir + "/ck.tsg --data " + dir + "/data --task semantic --out " +
                dir + "/rs.tsv --pred-out " + dir + "/pred_sem"),
            0);
  bool any_differs = false;
  for (const auto& entry :
       std::filesystem::recursive_directory_iterator(dir + "/pred_pan")) {
    if (!entry.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(entry.path(), dir + "/pred_pan");
    const std::string a = slurp(entry.path().string());
    const std::string b = slurp((std::filesystem::path(dir + "/pred_sem") / rel).string());
    if (a != b) any_differs = true;
  }
  EXPECT_TRUE(any_differs);
}

TEST(Cli, UnknownFlagPrintsUsageAndExitsOne) {
  const std::string dir = tsu::scratch_dir("cli_usage");
  EXPECT_EQ(run("synth-gen --bogus 3", dir + "/out.txt"), 1);
  const std::string out = slurp(dir + "/out.txt");
  EXPECT_NE(out.find("Usage"), std::string::npos);
}

TEST(Cli, MissingInputsExitTwo) {
  EXPECT_EQ(run("eval --checkpoint /nonexistent/ck.tsg --data /nonexistent"), 2);
  EXPECT_EQ(run("audit --data /nonexistent"), 2);
}

TEST(Cli, ValidationFailuresExitOne) {
  const std::string dir = tsu::scratch_dir("cli_val");
  {
    std::ofstream f(dir + "/bad.cfg");
    f << "model.queries=5\n";
  }
  EXPECT_EQ(run("train --config " + dir + "/bad.cfg"), 1);
}

int main(int argc, char** argv) {
  ::testing::InitGoogleTest(&argc, argv);
  if (argc > 1) g_cli = argv[1];
  if (g_cli.empty()) {
    std::fprintf(stderr, "usage: cli_test <path-to-taskseg-binary>\n");
    return 2;
  }
  return RUN_ALL_TESTS();
}
