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
//
// Command-line front end. Subcommands: synth-gen, derive-gt, train, eval,
// audit. Exit codes: 0 success, 1 validation/usage, 2 I/O.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "taskseg/taskseg.hpp"

namespace {

using taskseg::Config;
using taskseg::Dataset;
using taskseg::TaskKind;

int cmd_synth_gen(std::uint64_t seed, int count, int height, int width, const std::string& out) {
  const auto classes = taskseg::default_class_table();
  taskseg::generate_synthetic(seed, count, height, width, classes, out);
  std::cout << "wrote " << count << " scenes to " << out << "\n";
  return 0;
}

int cmd_derive_gt(const std::string& data, const std::string& task_name, const std::string& out) {
  const TaskKind task = taskseg::task_from_string(task_name);
  Dataset ds = taskseg::read_dataset(data);
  std::filesystem::create_directories(out);
  std::ofstream summary(std::filesystem::path(out) / "targets.tsv");
  if (!summary) throw taskseg::IoError("cannot write targets.tsv under " + out);
  for (const auto& sample : ds.samples) {
    const auto gt = taskseg::derive_task_gt(sample.label, ds.classes, task);
    const std::string stem = sample.file_name.substr(0, sample.file_name.rfind('.'));
    for (std::size_t t = 0; t < gt.targets.size(); ++t) {
      const auto& target = gt.targets[t];
      long area = 0;
      taskseg::Rgb8Image mask_img;
      mask_img.width = gt.width;
      mask_img.height = gt.height;
      mask_img.pixels.assign(static_cast<std::size_t>(gt.width) * gt.height * 3, 0);
      for (std::size_t i = 0; i < target.mask.size(); ++i)
        if (target.mask[i]) {
          ++area;
          mask_img.pixels[3 * i] = mask_img.pixels[3 * i + 1] = mask_img.pixels[3 * i + 2] = 255;
        }
      taskseg::write_png_rgb8(
          (std::filesystem::path(out) / (stem + ".t" + std::to_string(t) + ".png")).string(),
          mask_img);
      summary << sample.file_name << '\t' << t << '\t' << target.class_id << '\t'
              << ds.classes.at(target.class_id).name << '\t' << area << '\n';
    }
    std::cout << sample.file_name << ": " << gt.targets.size() << " " << task_name
              << " targets\n";
  }
  return 0;
}

int cmd_train(const std::string& config_path, bool seed_set, std::uint64_t seed,
              const std::string& data_override) {
  Config cfg = config_path.empty() ? Config{} : Config::load(config_path);
  if (seed_set) cfg.train_seed = seed;
  if (!data_override.empty()) cfg.train_dataset = data_override;
  cfg.validate();
  const auto result = taskseg::run_training(cfg);
  std::cout << "trained " << cfg.train_iters << " iterations; checkpoint " << cfg.train_checkpoint
            << ", trace " << cfg.train_trace << "\n";
  if (!result.trace.empty())
    std::cout << "final loss " << result.trace.back().total << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data, const std::string& task_name,
             std::string out, const std::string& pred_out) {
  const TaskKind task = taskseg::task_from_string(task_name);
  const auto ck = taskseg::read_checkpoint(checkpoint);
  taskseg::Model model = taskseg::load_model(ck);
  Dataset ds = taskseg::read_dataset(data);
  taskseg::PredictionSet preds;
  const auto report = taskseg::evaluate_model(model, ds, task, ck.config, &preds);
  const std::string text = taskseg::format_report(report, ds.classes);
  if (out.empty()) out = "report_" + task_name + ".tsv";
  std::ofstream f(out);
  if (!f) throw taskseg::IoError("cannot write report: " + out);
  f << text;
  std::cout << text;
  if (!pred_out.empty()) taskseg::write_panoptic_predictions(pred_out, ds, preds.panoptic);
  return 0;
}

int cmd_audit(const std::string& data, std::string instances, const std::string& out) {
  if (instances.empty()) instances = data;
  Dataset ds = taskseg::read_dataset(data);
  const auto supplied = taskseg::read_instance_annotations(instances);
  const auto findings = taskseg::audit_instances(ds, supplied);
  const std::string text = taskseg::format_findings(findings);
  std::cout << text;
  if (!out.empty()) {
    std::ofstream f(out);
    if (!f) throw taskseg::IoError("cannot write audit report: " + out);
    f << text;
  }
  std::cout << "audit: " << findings.size() << " finding(s)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"task-conditioned universal segmentation toolkit"};
  app.require_subcommand(1);

  std::uint64_t seed = 0;
  int count = 12, height = 64, width = 64;
  std::string out_dir = "data";
  auto* synth = app.add_subcommand("synth-gen", "generate a synthetic dataset");
  synth->add_option("--seed", seed, "rng seed");
  synth->add_option("--count", count, "number of scenes");
  synth->add_option("--height", height, "scene height (pixels)");
  synth->add_option("--width", width, "scene width (pixels)");
  synth->add_option("--out", out_dir, "output dataset directory");

  std::string data = "data", task_name = "panoptic", derive_out = "derived";
  auto* derive = app.add_subcommand("derive-gt", "derive task ground truth from panoptic labels");
  derive->add_option("--data", data, "dataset directory");
  derive->add_option("--task", task_name, "panoptic|instance|semantic")
      ->check(CLI::IsMember({"panoptic", "instance", "semantic"}));
  derive->add_option("--out", derive_out, "output directory");

  std::string config_path, train_data;
  std::uint64_t train_seed = 0;
  auto* train = app.add_subcommand("train", "run the joint training loop");
  train->add_option("--config", config_path, "config file (key=value lines)");
  auto* seed_opt = train->add_option("--seed", train_seed, "override train.seed");
  train->add_option("--data", train_data, "override train.dataset");

  std::string checkpoint = "checkpoint.tsg", eval_data = "data", eval_task = "panoptic";
  std::string report_out, pred_out;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint under one task token");
  eval->add_option("--checkpoint", checkpoint, "checkpoint path");
  eval->add_option("--data", eval_data, "dataset directory");
  eval->add_option("--task", eval_task, "panoptic|instance|semantic")
      ->check(CLI::IsMember({"panoptic", "instance", "semantic"}));
  eval->add_option("--out", report_out, "report path (default report_<task>.tsv)");
  eval->add_option("--pred-out", pred_out, "directory for panoptic prediction dumps");

  std::string audit_data = "data", audit_instances_dir, audit_out;
  auto* audit = app.add_subcommand("audit", "panoptic/instance consistency report");
  audit->add_option("--data", audit_data, "dataset directory (panoptic source)");
  audit->add_option("--instances", audit_instances_dir,
                    "directory with instance/ and instance.meta (default --data)");
  audit->add_option("--out", audit_out, "write findings to this file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (synth->parsed()) return cmd_synth_gen(seed, count, height, width, out_dir);
    if (derive->parsed()) return cmd_derive_gt(data, task_name, derive_out);
    if (train->parsed()) return cmd_train(config_path, seed_opt->count() > 0, train_seed, train_data);
    if (eval->parsed()) return cmd_eval(checkpoint, eval_data, eval_task, report_out, pred_out);
    if (audit->parsed()) return cmd_audit(audit_data, audit_instances_dir, audit_out);
  } catch (const taskseg::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 2;
  } catch (const taskseg::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
