#include "ppg/config.hpp"

#include <charconv>
#include <functional>
#include <set>
#include <sstream>

#include "ppg/errors.hpp"
#include "ppg/io.hpp"

namespace ppg {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_value(const std::string& v) {
  T out{};
  const char* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError("'" + v + "' is not a valid number");
  return out;
}

bool parse_flag(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("'" + v + "' is not a boolean");
}

std::vector<ObjectClass> parse_classes(const std::string& v) {
  std::vector<ObjectClass> out;
  std::istringstream is(v);
  std::string item;
  while (std::getline(is, item, ',')) out.push_back(parse_class(trim(item)));
  return out;
}

using Setter = std::function<void(RunConfig&, const std::string&)>;

template <class T>
Setter num(T RunConfig::*group, auto member) {
  return [group, member](RunConfig& c, const std::string& v) {
    auto& field = (c.*group).*member;
    field = parse_value<std::remove_reference_t<decltype(field)>>(v);
  };
}

template <class T>
Setter flag(T RunConfig::*group, bool T::*member) {
  return [group, member](RunConfig& c, const std::string& v) { (c.*group).*member = parse_flag(v); };
}

Setter path_key(const std::string& key) {
  return [key](RunConfig& c, const std::string& v) { c.paths[key] = v; };
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    using M = ModelConfig;
    t["height"] = [](RunConfig& c, const std::string& v) {
      c.model.height = c.episode.height = parse_value<std::size_t>(v);
    };
    t["width"] = [](RunConfig& c, const std::string& v) {
      c.model.width = c.episode.width = parse_value<std::size_t>(v);
    };
    t["channels"] = num(&RunConfig::model, &M::channels);
    t["patch"] = num(&RunConfig::model, &M::patch);
    t["vim_embed"] = num(&RunConfig::model, &M::vim_embed);
    t["vim_state"] = num(&RunConfig::model, &M::vim_state);
    t["vim_depth"] = num(&RunConfig::model, &M::vim_depth);
    t["heads"] = num(&RunConfig::model, &M::heads);
    t["ccm_blocks"] = num(&RunConfig::model, &M::ccm_blocks);
    t["cbam_ratio"] = num(&RunConfig::model, &M::cbam_ratio);
    t["hires_channels"] = num(&RunConfig::model, &M::hires_channels);
    t["backbone_layers"] = num(&RunConfig::model, &M::backbone_layers);
    t["lora_rank"] = num(&RunConfig::model, &M::lora_rank);
    t["lora_alpha"] = num(&RunConfig::model, &M::lora_alpha);
    t["backbone_seed"] = num(&RunConfig::model, &M::backbone_seed);
    t["model_seed"] = num(&RunConfig::model, &M::seed);
    t["use_selection"] = flag(&RunConfig::model, &M::use_selection);
    t["use_ccm"] = flag(&RunConfig::model, &M::use_ccm);
    t["train_lora"] = flag(&RunConfig::model, &M::train_lora);

    t["learning_rate"] = [](RunConfig& c, const std::string& v) { c.train.sgd.learning_rate = parse_value<double>(v); };
    t["momentum"] = [](RunConfig& c, const std::string& v) { c.train.sgd.momentum = parse_value<double>(v); };
    t["weight_decay"] = [](RunConfig& c, const std::string& v) { c.train.sgd.weight_decay = parse_value<double>(v); };
    t["steps"] = num(&RunConfig::train, &TrainConfig::steps);
    t["shots"] = num(&RunConfig::train, &TrainConfig::shots);
    t["seed"] = num(&RunConfig::train, &TrainConfig::seed);

    t["data_seed"] = num(&RunConfig::episode, &EpisodeSpec::seed);
    t["classes"] = [](RunConfig& c, const std::string& v) { c.episode.classes = parse_classes(v); };
    t["episode_shots"] = num(&RunConfig::episode, &EpisodeSpec::shots);
    t["noise"] = num(&RunConfig::episode, &EpisodeSpec::noise);
    t["deformation"] = num(&RunConfig::episode, &EpisodeSpec::deformation);
    t["empty_object"] = flag(&RunConfig::episode, &EpisodeSpec::empty_object);
    t["shuffle_classes"] = [](RunConfig& c, const std::string& v) { c.shuffle_classes = parse_flag(v); };

    t["eval_shots"] = num(&RunConfig::eval, &EvalConfig::shots);
    t["repeats"] = num(&RunConfig::eval, &EvalConfig::repeats);
    t["eval_seed"] = num(&RunConfig::eval, &EvalConfig::seed);

    for (const char* k : {"data", "out", "ckpt"}) t[k] = path_key(k);
    return t;
  }();
  return table;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

std::string RunConfig::path(const std::string& key) const {
  const auto it = paths.find(key);
  return it == paths.end() ? std::string() : it->second;
}

RunConfig parse_run_config(const std::string& text, const std::string& source) {
  RunConfig c;
  std::set<std::string> seen;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string where = source + ":" + std::to_string(lineno) + ": ";
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(where + "expected 'key = value'");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty()) throw ParseError(where + "expected 'key = value'");
    const auto it = setters().find(key);
    if (it == setters().end()) throw ParseError(where + "unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ParseError(where + "key '" + key + "' given twice");
    try {
      it->second(c, value);
    } catch (const std::exception& e) {
      throw ParseError(where + key + ": " + e.what());
    }
  }
  try {
    c.model.validate();
    c.episode.validate();
  } catch (const std::exception& e) {
    throw ConfigError(source + ": " + e.what());
  }
  if (!(c.train.sgd.learning_rate > 0) || c.train.sgd.momentum < 0 || c.train.sgd.weight_decay < 0)
    throw ConfigError(source + ": learning_rate must be positive, momentum and weight_decay non-negative");
  if (c.train.shots == 0 || c.eval.shots == 0 || c.eval.repeats == 0)
    throw ConfigError(source + ": shots, eval_shots and repeats must be at least 1");
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  return parse_run_config(read_text_file(path), path.string());
}

std::string format_run_config(const RunConfig& c) {
  std::ostringstream os;
  for (const auto& [k, v] : c.model.to_map()) os << (k == "seed" ? "model_seed" : k) << " = " << v << '\n';
  os << "learning_rate = " << fmt(c.train.sgd.learning_rate) << '\n'
     << "momentum = " << fmt(c.train.sgd.momentum) << '\n'
     << "weight_decay = " << fmt(c.train.sgd.weight_decay) << '\n'
     << "steps = " << c.train.steps << '\n'
     << "shots = " << c.train.shots << '\n'
     << "seed = " << c.train.seed << '\n'
     << "data_seed = " << c.episode.seed << '\n';
  os << "classes = ";
  for (std::size_t i = 0; i < c.episode.classes.size(); ++i) os << (i ? "," : "") << class_name(c.episode.classes[i]);
  os << '\n'
     << "episode_shots = " << c.episode.shots << '\n'
     << "noise = " << fmt(c.episode.noise) << '\n'
     << "deformation = " << fmt(c.episode.deformation) << '\n'
     << "empty_object = " << (c.episode.empty_object ? "true" : "false") << '\n'
     << "shuffle_classes = " << (c.shuffle_classes ? "true" : "false") << '\n'
     << "eval_shots = " << c.eval.shots << '\n'
     << "repeats = " << c.eval.repeats << '\n'
     << "eval_seed = " << c.eval.seed << '\n';
  for (const auto& [k, v] : c.paths) os << k << " = " << v << '\n';
  return os.str();
}

}  // namespace ppg
