#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "ppg/model.hpp"
#include "ppg/synth.hpp"
#include "ppg/train.hpp"

namespace ppg {

// Everything a command can be configured with. Files hold one `key = value`
// per line; '#' starts a comment. Unknown or repeated keys are errors.
//
// Model keys mirror ModelConfig (the init seed is `model_seed`). Training:
// learning_rate, momentum, weight_decay, steps, shots, seed. Episodes:
// data_seed, classes (comma list), episode_shots, noise, deformation,
// empty_object, shuffle_classes; height/width are shared with the model.
// Evaluation: eval_shots, repeats, eval_seed. Paths: data, out, ckpt.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  EpisodeSpec episode;
  bool shuffle_classes = true;
  EvalConfig eval;
  std::map<std::string, std::string> paths;

  std::string path(const std::string& key) const;
};

RunConfig parse_run_config(const std::string& text, const std::string& source = "<config>");
RunConfig load_run_config(const std::filesystem::path& path);

std::string format_run_config(const RunConfig& c);

}  // namespace ppg
