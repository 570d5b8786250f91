#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "json.hpp"
#include "lfdepth/config.hpp"
#include "lfdepth/errors.hpp"
#include "lfdepth/gradcheck.hpp"
#include "lfdepth/metrics.hpp"
#include "lfdepth/synthdata.hpp"
#include "lfdepth/train.hpp"

namespace fs = std::filesystem;
using namespace lfd;

namespace {

void write_text(const fs::path& file, const std::string& text) {
  if (file.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(file.parent_path(), ec);
  }
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + file.string() + "'");
  out << text;
  if (!out) throw IoError("write failed for '" + file.string() + "'");
}

struct GenerateArgs {
  std::string out;
  Index scenes = 40;
  std::vector<Index> size = {64, 64};
  Index slices = 12;
  std::uint64_t seed = 0;
  double blur_gain = 4.0;
};

int cmd_generate(const GenerateArgs& a) {
  GenSpec spec;
  spec.height = a.size[0];
  spec.width = a.size[1];
  spec.slices = a.slices;
  spec.seed = a.seed;
  spec.blur_gain = a.blur_gain;
  spec.validate();
  const Manifest m = generate_dataset(a.out, a.scenes, spec, worker_threads());
  std::printf("wrote %lld scenes to %s (train %zu, test %zu)\n", static_cast<long long>(a.scenes), a.out.c_str(),
              m.train.size(), m.test.size());
  return 0;
}

struct TrainArgs {
  std::string data;
  std::string config;
  std::string out;
  bool resume = false;
  Index stop_after = 0;
};

void print_epoch(const std::string& tag, const EpochRecord& e) {
  std::printf("%sepoch %3lld  loss %.6f  rms %.4f  abs_rel %.4f  d1 %.4f\n", tag.c_str(),
              static_cast<long long>(e.epoch), e.mean_loss, e.metrics.rms, e.metrics.abs_rel, e.metrics.delta1);
  std::fflush(stdout);
}

int cmd_train(const TrainArgs& a) {
  RunConfig cfg;
  if (!a.config.empty()) cfg = load_run_config(a.config);
  const std::string data = !a.data.empty() ? a.data : cfg.data_dir;
  const std::string out = !a.out.empty() ? a.out : cfg.out_dir;
  if (data.empty()) throw UsageError("train needs --data");
  if (out.empty()) throw UsageError("train needs --out");
  const auto scenes = load_split(data, "train");
  Trainer trainer = a.resume ? Trainer::resume(out) : Trainer(cfg.network, cfg.train, cfg.seed);
  trainer.fit(scenes, a.stop_after, [&](const EpochRecord& e) {
    print_epoch("", e);
    trainer.save(out);
  });
  trainer.save(out);
  std::printf("checkpoint: %s (epoch %lld, step %lld)\n", out.c_str(), static_cast<long long>(trainer.epoch()),
              static_cast<long long>(trainer.global_step()));
  return 0;
}

struct EvalArgs {
  std::string data;
  std::string ckpt;
  std::string split = "test";
  std::string out;
  bool gt_as_prediction = false;
};

int cmd_eval(const EvalArgs& a) {
  if (a.ckpt.empty() && !a.gt_as_prediction) throw UsageError("eval needs --ckpt");
  LoadedModel model;
  if (!a.gt_as_prediction) model = load_model(a.ckpt);
  const auto scenes = load_split(a.data, a.split);
  const auto rows = evaluate_scenes(model.net.get(), scenes, worker_threads(), a.gt_as_prediction);

  nlohmann::ordered_json j;
  j["split"] = a.split;
  j["scenes"] = nlohmann::ordered_json::array();
  std::vector<std::pair<std::string, DepthMetrics>> table;
  std::vector<DepthMetrics> all;
  for (const auto& r : rows) {
    j["scenes"].push_back({{"name", r.name}, {"metrics", metrics_to_json(r.metrics)}});
    table.emplace_back(r.name, r.metrics);
    all.push_back(r.metrics);
  }
  const DepthMetrics agg = aggregate(all);
  j["aggregate"] = metrics_to_json(agg);
  table.emplace_back("mean", agg);
  std::fputs(format_metrics_table(table).c_str(), stdout);
  if (!a.out.empty()) write_text(a.out, j.dump(2) + "\n");
  return 0;
}

struct InferArgs {
  std::string scene;
  std::string ckpt;
  std::string out;
};

int cmd_infer(const InferArgs& a) {
  const LoadedModel model = load_model(a.ckpt);
  const Scene scene = read_scene(a.scene);
  if (scene.slices() != model.config.slices) {
    throw UsageError("scene has " + std::to_string(scene.slices()) + " focal slices; the checkpoint expects " +
                     std::to_string(model.config.slices));
  }
  if (scene.height() != model.config.height || scene.width() != model.config.width) {
    throw UsageError("scene is " + std::to_string(scene.height()) + "x" + std::to_string(scene.width()) +
                     "; the checkpoint expects " + std::to_string(model.config.height) + "x" +
                     std::to_string(model.config.width));
  }
  write_depth_pgm(predict_depth(*model.net, scene), a.out);
  std::printf("wrote %s (%lldx%lld)\n", a.out.c_str(), static_cast<long long>(scene.width()),
              static_cast<long long>(scene.height()));
  return 0;
}

struct AblateArgs {
  std::string data;
  std::vector<std::string> ladder;
  std::string out;
  std::string config;
};

int cmd_ablate(const AblateArgs& a) {
  std::vector<std::string> ladder;
  for (const auto& id : a.ladder) {
    if (id == "all") {
      for (const auto& e : ablation_ladder()) ladder.push_back(e.id);
    } else {
      ladder.push_back(id);
    }
  }
  for (const auto& id : ladder) ladder_entry(id);
  RunConfig cfg;
  if (!a.config.empty()) cfg = load_run_config(a.config);
  const auto train = load_split(a.data, "train");
  const auto test = load_split(a.data, "test");
  const auto rows = ablation_run(train, test, ladder, cfg.network, cfg.train, cfg.seed, worker_threads(),
                                 [](const std::string& id, const EpochRecord& e) { print_epoch("[" + id + "] ", e); });

  std::vector<std::pair<std::string, DepthMetrics>> table;
  nlohmann::ordered_json j;
  j["seed"] = cfg.seed;
  j["network"] = to_json(cfg.network);
  j["train"] = to_json(cfg.train);
  j["rows"] = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    table.emplace_back(r.label, r.metrics);
    nlohmann::ordered_json row;
    row["id"] = r.id;
    row["label"] = r.label;
    row["metrics"] = metrics_to_json(r.metrics);
    row["parameters"] = r.parameters;
    row["converged"] = r.converged;
    row["epoch_loss"] = nlohmann::ordered_json::array();
    for (const auto& e : r.log.epochs) row["epoch_loss"].push_back(e.mean_loss);
    row["moving_average_loss"] = moving_average_loss(r.log, 5);
    j["rows"].push_back(row);
  }
  const std::string md = format_metrics_table(table);
  std::fputs(md.c_str(), stdout);
  write_text(fs::path(a.out) / "ablation.md", md);
  write_text(fs::path(a.out) / "ablation.json", j.dump(2) + "\n");
  return 0;
}

struct GradcheckArgs {
  std::string module;
  std::uint64_t seed = 0;
  std::size_t samples = 0;
  std::string json;
  std::string fault = "none";
};

int cmd_gradcheck(const GradcheckArgs& a) {
  if (a.fault == "sigmoid") {
    detail::set_gradient_fault(detail::GradientFault::Sigmoid);
  } else if (a.fault == "matmul") {
    detail::set_gradient_fault(detail::GradientFault::Matmul);
  }
  const GradcheckReport r = run_gradcheck(a.module, a.seed, a.samples);
  std::fputs(format_gradcheck_report(r).c_str(), stdout);
  if (!a.json.empty()) write_text(a.json, gradcheck_to_json(r).dump(2) + "\n");
  if (!r.passed()) throw NumericalCheckError("gradient check failed for '" + a.module + "'");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Light-field depth estimation: data generation, training, evaluation and checks"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Write a synthetic focal-stack dataset");
  g->add_option("--out", gen.out, "Dataset directory")->required();
  g->add_option("--scenes", gen.scenes, "Number of scenes")->check(CLI::PositiveNumber);
  g->add_option("--size", gen.size, "Height and width")->expected(2);
  g->add_option("--slices", gen.slices, "Focal slices per scene");
  g->add_option("--seed", gen.seed, "Dataset seed");
  g->add_option("--blur-gain", gen.blur_gain, "Blur sigma in pixels per unit depth offset");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model on the train split");
  t->add_option("--data", tr.data, "Dataset directory");
  t->add_option("--config", tr.config, "Run config JSON");
  t->add_option("--out", tr.out, "Checkpoint directory");
  t->add_flag("--resume", tr.resume, "Continue from the checkpoint in --out");
  t->add_option("--stop-after", tr.stop_after, "Stop after this many epochs in this invocation");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
  e->add_option("--data", ev.data, "Dataset directory")->required();
  e->add_option("--ckpt", ev.ckpt, "Checkpoint directory or file");
  e->add_option("--split", ev.split, "train or test");
  e->add_option("--out", ev.out, "Metrics JSON output");
  e->add_flag("--gt-as-prediction", ev.gt_as_prediction, "Score the ground truth against itself");

  InferArgs in;
  auto* i = app.add_subcommand("infer", "Predict depth for one scene directory");
  i->add_option("--scene", in.scene, "Scene directory")->required();
  i->add_option("--ckpt", in.ckpt, "Checkpoint directory or file")->required();
  i->add_option("--out", in.out, "Output 16-bit PGM")->required();

  AblateArgs ab;
  auto* a = app.add_subcommand("ablate", "Train and evaluate ladder variants");
  a->add_option("--data", ab.data, "Dataset directory")->required();
  a->add_option("--ladder", ab.ladder, "Comma-separated ladder ids, or 'all'")->required()->delimiter(',');
  a->add_option("--out", ab.out, "Report directory")->required();
  a->add_option("--config", ab.config, "Run config JSON (network, schedule, seed)");

  GradcheckArgs gc;
  auto* c = app.add_subcommand("gradcheck", "Finite-difference gradient check");
  c->add_option("--module", gc.module, "ops, cru, cmfa or model")->required();
  c->add_option("--seed", gc.seed, "Seed");
  c->add_option("--samples", gc.samples, "Entries checked per model tensor (0 = all)");
  c->add_option("--json", gc.json, "Report JSON output");
  c->add_option("--inject-fault", gc.fault)->check(CLI::IsMember({"none", "sigmoid", "matmul"}))->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForAllHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    std::fprintf(stderr, "error[%s]: %s\n", error_code_name(ErrorCode::Usage), err.what());
    return exit_code_for(ErrorCode::Usage);
  }

  try {
    if (*g) return cmd_generate(gen);
    if (*t) return cmd_train(tr);
    if (*e) return cmd_eval(ev);
    if (*i) return cmd_infer(in);
    if (*a) return cmd_ablate(ab);
    if (*c) return cmd_gradcheck(gc);
  } catch (const Error& err) {
    std::fprintf(stderr, "error[%s]: %s\n", error_code_name(err.code()), err.what());
    return exit_code_for(err.code());
  } catch (const std::exception& err) {
    std::fprintf(stderr, "error[E_INTERNAL]: %s\n", err.what());
    return 4;
  }
  return 0;
}
