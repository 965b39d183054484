// ppg: data generation, training, evaluation, inference, gradient checks
// and support sweeps for the proxy prompt model.
//
// Exit codes: 0 success, 1 usage or I/O error, 2 numerical failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "ppg/config.hpp"
#include "ppg/errors.hpp"
#include "ppg/io.hpp"
#include "ppg/module_checks.hpp"
#include "ppg/ops.hpp"
#include "ppg/train.hpp"

namespace fs = std::filesystem;
using namespace ppg;

namespace {

constexpr int kOk = 0, kUsage = 1, kNumeric = 2;

std::vector<Episode> load_data(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw UsageError("data directory not found: " + dir.string());
  return load_suite(dir);
}

void print_report(const MetricsReport& r) {
  std::printf("dice mean %.4f std %.4f | iou mean %.4f std %.4f\n", r.mean_dice, r.std_dice, r.mean_iou, r.std_iou);
  for (std::size_t i = 0; i < r.object_dice.size(); ++i)
    std::printf("  object %zu: dice %.4f iou %.4f\n", i, r.object_dice[i], r.object_iou[i]);
}

// --- gen-data ---------------------------------------------------------------

struct GenArgs {
  std::string spec, out;
  std::size_t count = 16;
  bool force = false;
};

int gen_data(const GenArgs& a) {
  const RunConfig rc = a.spec.empty() ? RunConfig{} : load_run_config(a.spec);
  const fs::path out = a.out;
  if (fs::exists(out) && !fs::is_empty(out)) {
    if (!a.force) throw UsageError(out.string() + " is not empty (use --force to overwrite)");
    fs::remove_all(out);
  }
  fs::create_directories(out);
  const auto suite = generate_suite(rc.episode, a.count, rc.shuffle_classes);
  std::ostringstream index;
  for (std::size_t i = 0; i < suite.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "ep%04zu", i);
    save_episode(out / name, suite[i]);
    index << name << '\n';
  }
  write_text_file(out / "index.txt", index.str());
  write_text_file(out / "spec.cfg", format_run_config(rc));
  std::printf("wrote %zu episodes to %s\n", suite.size(), out.string().c_str());
  return kOk;
}

// --- train ------------------------------------------------------------------

struct TrainArgs {
  std::string config, data, out;
  long steps = -1;
};

int train_cmd(const TrainArgs& a) {
  RunConfig rc = a.config.empty() ? RunConfig{} : load_run_config(a.config);
  if (a.steps >= 0) rc.train.steps = static_cast<std::size_t>(a.steps);
  const std::string data = a.data.empty() ? rc.path("data") : a.data;
  const std::string out = a.out.empty() ? rc.path("out") : a.out;
  if (data.empty() || out.empty()) throw UsageError("train needs --data and --out (or data/out config keys)");
  const auto episodes = load_data(data);
  ProxyPromptModel model(rc.model);
  const std::size_t every = std::max<std::size_t>(1, rc.train.steps / 20);
  const TrainResult r = train(model, episodes, rc.train, [&](std::size_t step, double loss) {
    if ((step + 1) % every == 0) std::printf("step %zu loss %.5f\n", step + 1, loss);
    std::fflush(stdout);
  });
  fs::create_directories(out);
  write_text_file(fs::path(out) / "loss.csv", loss_curve_csv(r.losses));
  if (r.diverged) {
    std::fprintf(stderr, "training diverged: %s\n", r.message.c_str());
    return kNumeric;
  }
  model.save(out);
  write_text_file(fs::path(out) / "run.cfg", format_run_config(rc));
  std::printf("saved checkpoint to %s\n", out.c_str());
  return kOk;
}

// --- eval -------------------------------------------------------------------

struct EvalArgs {
  std::string ckpt, data, pool, out;
  std::size_t k = 4, repeats = 5;
  std::uint64_t seed = 1;
  bool oracle = false;
};

int eval_cmd(const EvalArgs& a) {
  const auto episodes = load_data(a.data);
  const auto pool = a.pool.empty() ? episodes : load_data(a.pool);
  EvalConfig ec;
  ec.shots = a.k;
  ec.repeats = a.repeats;
  ec.seed = a.seed;
  MetricsReport r;
  if (a.oracle) {
    r = evaluate(oracle_predictor(), episodes, pool, ec);
  } else {
    if (a.ckpt.empty()) throw UsageError("eval needs --ckpt unless --oracle is given");
    const ProxyPromptModel m = ProxyPromptModel::load(a.ckpt);
    r = evaluate(model_predictor(m), episodes, pool, ec);
  }
  print_report(r);
  if (!a.out.empty()) write_text_file(a.out, r.to_csv());
  return kOk;
}

// --- infer ------------------------------------------------------------------

struct InferArgs {
  std::string ckpt, target, support, out;
  std::size_t k = 1;
  std::uint64_t seed = 1;
  bool dump_map = false, dump_prompt = false;
};

void write_plane(const fs::path& base, const Tensor& plane, std::size_t h, std::size_t w) {
  save_tensor(base.string() + ".ppgt", plane);
  write_pgm(base.string() + ".pgm", plane.data(), h, w);
}

int infer_cmd(const InferArgs& a) {
  if (!fs::is_directory(a.target)) throw UsageError("target episode not found: " + a.target);
  const Episode ep = load_episode(a.target);
  const ProxyPromptModel m = ProxyPromptModel::load(a.ckpt);
  SupportSet support;
  if (a.support.empty()) {
    support = own_support(ep, a.k);
  } else {
    Rng rng(a.seed);
    support = support_from_pool(load_data(a.support), ep.classes, a.k, rng);
  }
  Prediction p;
  {
    NoGradScope ng;
    p = m.forward(ep.target, support);
  }
  const fs::path out = a.out;
  fs::create_directories(out);
  const std::size_t n = p.probs.dim(0), h = p.probs.dim(1), w = p.probs.dim(2);
  const ObjectScores s = score_objects(p.probs, ep.gt);
  for (std::size_t i = 0; i < n; ++i) {
    Tensor mask = reshape(slice(p.probs, 0, i, i + 1), {h, w}).clone();
    for (double& v : mask.mutable_data()) v = v > 0.5 ? 1.0 : 0.0;
    write_plane(out / ("mask_" + std::to_string(i)), mask, h, w);
    std::printf("object %zu (%s): dice %.4f iou %.4f\n", i, class_name(ep.classes[i]).c_str(), s.dice[i], s.iou[i]);
  }
  save_tensor(out / "probs.ppgt", p.probs);
  if (a.dump_map)
    write_plane(out / "selective_map", p.csm.normalized, p.csm.normalized.dim(0), p.csm.normalized.dim(1));
  if (a.dump_prompt) save_tensor(out / "prompt.ppgt", p.prompt);
  return kOk;
}

// --- gradcheck --------------------------------------------------------------

struct GradArgs {
  std::vector<std::string> modules;
  double tol = 1e-4;
  bool fixture = false;
};

int gradcheck_cmd(const GradArgs& a) {
  std::vector<std::string> modules = a.modules;
  if (modules.empty()) throw UsageError("gradcheck: --modules needs at least one module name");
  if (modules.size() == 1 && modules[0] == "all") modules = checkable_modules();
  if (a.fixture) modules.push_back(kCorruptedFixture);
  GradCheckOptions opt;
  opt.tolerance = a.tol;
  bool ok = true;
  for (const auto& mod : modules) {
    for (const auto& c : run_module_checks(mod, opt)) {
      const bool pass = c.report.passed();
      std::printf("%-16s %-22s max rel %.3e  %s\n", mod.c_str(), c.name.c_str(), c.report.max_rel_error(),
                  pass ? "ok" : "FAIL");
      ok = ok && pass;
    }
  }
  return ok ? kOk : kNumeric;
}

// --- sweep ------------------------------------------------------------------

struct SweepArgs {
  std::string ckpt_dir, data, pool, out;
  std::vector<std::size_t> ks{1, 2, 4, 8}, ms;
  std::size_t repeats = 5;
  std::uint64_t seed = 1;
};

int sweep_cmd(const SweepArgs& a) {
  const auto episodes = load_data(a.data);
  const auto pool = a.pool.empty() ? episodes : load_data(a.pool);
  std::vector<std::size_t> ms = a.ms;
  if (ms.empty()) {
    if (!fs::is_directory(a.ckpt_dir)) throw UsageError("checkpoint directory not found: " + a.ckpt_dir);
    for (const auto& e : fs::directory_iterator(a.ckpt_dir)) {
      const std::string name = e.path().filename().string();
      if (e.is_directory() && name.size() > 1 && name[0] == 'M' &&
          name.find_first_not_of("0123456789", 1) == std::string::npos)
        ms.push_back(std::stoul(name.substr(1)));
    }
    std::sort(ms.begin(), ms.end());
  }
  if (ms.empty()) throw UsageError("no M<m> checkpoints under " + a.ckpt_dir);
  std::map<std::size_t, ProxyPromptModel> models;
  for (std::size_t m : ms) models.emplace(m, ProxyPromptModel::load(fs::path(a.ckpt_dir) / ("M" + std::to_string(m))));
  const auto rows = support_sweep([&](std::size_t m) { return model_predictor(models.at(m)); }, episodes, pool, a.ks,
                                  ms, a.repeats, a.seed);
  const std::string csv = sweep_csv(rows);
  std::fputs(csv.c_str(), stdout);
  if (!a.out.empty()) write_text_file(a.out, csv);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Proxy prompt generator: few-shot segmentation with learned prompts"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "Generate a synthetic episode suite");
  g->add_option("--spec", gen.spec, "Config file with episode keys");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--count", gen.count, "Number of episodes")->check(CLI::PositiveNumber);
  g->add_flag("--force", gen.force, "Overwrite a non-empty output directory");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Episodic training");
  t->add_option("--config", tr.config, "Run config file");
  t->add_option("--data", tr.data, "Training suite directory");
  t->add_option("--out", tr.out, "Checkpoint directory");
  t->add_option("--steps", tr.steps, "Override the step count");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint over repeated support draws");
  e->add_option("--ckpt", ev.ckpt, "Checkpoint directory");
  e->add_option("--data", ev.data, "Evaluation suite directory")->required();
  e->add_option("--pool", ev.pool, "Support pool suite (default: the evaluation suite)");
  e->add_option("--K", ev.k, "Support shots")->check(CLI::PositiveNumber);
  e->add_option("--repeats", ev.repeats, "Support draws")->check(CLI::PositiveNumber);
  e->add_option("--seed", ev.seed, "Draw seed");
  e->add_option("--out", ev.out, "CSV report path");
  e->add_flag("--oracle", ev.oracle, "Score the ground truth instead of a model");

  InferArgs in;
  auto* i = app.add_subcommand("infer", "Segment one episode's target");
  i->add_option("--ckpt", in.ckpt, "Checkpoint directory")->required();
  i->add_option("--target", in.target, "Episode directory")->required();
  i->add_option("--support", in.support, "Support pool suite (default: the episode's own supports)");
  i->add_option("--K", in.k, "Support shots")->check(CLI::PositiveNumber);
  i->add_option("--seed", in.seed, "Draw seed for --support");
  i->add_option("--out", in.out, "Output directory")->required();
  i->add_flag("--dump-selective-map", in.dump_map, "Write the normalized selective map");
  i->add_flag("--dump-prompt", in.dump_prompt, "Write the prompt tensor");

  GradArgs gc;
  auto* c = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  c->add_option("--modules", gc.modules, "Modules to check, or 'all'")->delimiter(',')->required()->expected(0, -1);
  c->add_option("--tol", gc.tol, "Relative error tolerance");
  c->add_flag("--with-fixture", gc.fixture, "Also run the deliberately broken fixture");

  SweepArgs sw;
  auto* s = app.add_subcommand("sweep", "Mean/std Dice over (M, K)");
  s->add_option("--ckpt-dir", sw.ckpt_dir, "Directory with M<m> checkpoint subdirectories")->required();
  s->add_option("--data", sw.data, "Evaluation suite directory")->required();
  s->add_option("--pool", sw.pool, "Support pool suite");
  s->add_option("--K", sw.ks, "Shot counts")->delimiter(',');
  s->add_option("--M", sw.ms, "Training-set sizes (default: every M<m> subdirectory)")->delimiter(',');
  s->add_option("--repeats", sw.repeats, "Support draws")->check(CLI::PositiveNumber);
  s->add_option("--seed", sw.seed, "Draw seed");
  s->add_option("--out", sw.out, "CSV path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return kUsage;
  }

  try {
    if (*g) return gen_data(gen);
    if (*t) return train_cmd(tr);
    if (*e) return eval_cmd(ev);
    if (*i) return infer_cmd(in);
    if (*c) return gradcheck_cmd(gc);
    if (*s) return sweep_cmd(sw);
  } catch (const NumericError& err) {
    std::fprintf(stderr, "numerical error: %s\n", err.what());
    return kNumeric;
  } catch (const std::exception& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kUsage;
  }
  return kUsage;
}
