#include "e2kd/cli.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <optional>

#include <CLI11.hpp>
#include <torch/torch.h>

#include "e2kd/archive.hpp"
#include "e2kd/data.hpp"
#include "e2kd/distill.hpp"
#include "e2kd/frozen_store.hpp"
#include "e2kd/json_util.hpp"
#include "e2kd/metrics.hpp"
#include "e2kd/nets.hpp"
#include "report.hpp"
#include "run_dir.hpp"

namespace e2kd::cli {
namespace {

struct Common {
  std::string out;
  bool force = false;
  std::string config;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c, bool with_config = true) {
  cmd->add_option("--out", c.out, "Output directory (relative to $E2KD_OUTPUT_ROOT)")->required();
  cmd->add_flag("--force", c.force, "Replace an existing output directory");
  if (with_config) {
    cmd->add_option("--config", c.config, "JSON config file");
    cmd->add_option("--set", c.overrides, "Override a config key: key.sub=value")->take_all();
  }
}

json load_config(const Common& c, json base) {
  if (!c.config.empty()) base.merge_patch(read_config(c.config));
  return apply_overrides(std::move(base), c.overrides);
}

json accuracy_summary(const Model& model, const DatasetSplit& split) {
  json out = json::object();
  for (const auto* part : {&split.test_id, &split.test_ood}) {
    if (part->size() == 0) continue;
    auto correct = top1_correct(predict_logits(model, *part), *part);
    out[part == &split.test_id ? "test_id_accuracy" : "test_ood_accuracy"] =
        correct.to(torch::kFloat64).mean().item<double>();
  }
  return out;
}

// Per-epoch records go to a line-delimited log as they are produced.
std::function<void(const EpochRecord&)> epoch_logger(const RunDir& dir, std::ostream& err) {
  auto path = dir / "metrics.jsonl";
  return [path, &err](const EpochRecord& r) {
    std::ofstream f(path, std::ios::app);
    f << to_json(r).dump() << "\n";
    err << "epoch " << r.epoch << " loss " << r.train_loss << " val_acc " << r.val_accuracy << " val_agr "
        << r.val_agreement << "\n";
  };
}

std::string shell_join(const std::vector<std::string>& args) {
  std::string s = "e2kd";
  for (const auto& a : args) {
    bool plain = !a.empty() && std::all_of(a.begin(), a.end(), [](char c) {
      return std::isalnum(static_cast<unsigned char>(c)) || std::string_view("-_./=:,+").find(c) != std::string::npos;
    });
    s += " " + (plain ? a : "'" + a + "'");
  }
  return s;
}

// ---------------------------------------------------------------------------

struct GenerateArgs {
  Common c;
  std::string kind;
};

int cmd_generate(const GenerateArgs& a, const std::string& cmdline, std::ostream& out) {
  json cfg;
  DatasetSplit split;
  if (a.kind == "biased") {
    cfg = load_config(a.c, to_json(BiasedParams{}));
    split = generate_biased_dataset(biased_params_from_json(cfg));
  } else {
    cfg = load_config(a.c, to_json(ShapesParams{}));
    split = generate_shapes_dataset(shapes_params_from_json(cfg));
  }
  cfg["kind"] = a.kind;
  RunDir dir(a.c.out, a.c.force, cmdline);
  save_dataset(split, dir / "dataset.e2kd");
  dir.write_json("config.json", cfg);
  dir.set_config(cfg);
  dir.set_seeds({{"data", split.seed}});
  dir.set_field("outputs", {{"dataset", {{"digest", file_digest(dir / "dataset.e2kd")},
                                         {"fingerprint", dataset_fingerprint(split)},
                                         {"counts",
                                          {{"train", split.train.size()},
                                           {"val", split.val.size()},
                                           {"test_id", split.test_id.size()},
                                           {"test_ood", split.test_ood.size()}}}}}});
  dir.finish();
  out << dir.path().string() << "\n";
  return kOk;
}

struct TeacherArgs {
  Common c;
  std::string dataset;
};

int cmd_train_teacher(const TeacherArgs& a, const std::string& cmdline, std::ostream& out, std::ostream& err) {
  auto data_path = resolve_input(a.dataset, "dataset.e2kd");
  auto split = load_dataset(data_path);
  json base = {{"model", {{"family", "std_cnn"}, {"depth_preset", "teacher"}}}, {"train", to_json(TeacherConfig{})}};
  json cfg = load_config(a.c, base);
  require_known_keys(cfg, {"model", "train"}, "train-teacher config");
  cfg["model"]["num_classes"] = split.train.num_classes;
  auto spec = spec_from_json(cfg["model"]);
  auto tcfg = teacher_config_from_json(cfg["train"]);
  cfg = {{"model", to_json(spec)}, {"train", to_json(tcfg)}};

  RunDir dir(a.c.out, a.c.force, cmdline);
  dir.add_input("dataset", data_path);
  dir.set_config(cfg);
  dir.set_seeds({{"model", spec.seed}, {"train", tcfg.seed}, {"data", split.seed}});
  dir.write_json("config.json", cfg);
  if (split.correlation != 0.5 && split.kind == "biased") {
    err << "warning: teacher trained on biased data (correlation " << split.correlation << ")\n";
  }
  TrainOptions opts;
  opts.checkpoint_dir = dir / "checkpoints";
  opts.on_epoch = epoch_logger(dir, err);
  auto result = train_teacher(Model(spec), {split.train, split.val}, tcfg, opts);
  save_checkpoint(result.model, dir / "teacher.ckpt",
                  {{"dataset_fingerprint", dataset_fingerprint(split)}, {"best_epoch", result.history.best_epoch}});
  dir.write_json("history.json", to_json(result.history));
  dir.write_json("eval.json", accuracy_summary(result.model, split));
  dir.set_field("outputs", {{"model_id", result.model.model_id()}, {"teacher_digest", result.model.digest()}});
  dir.finish();
  out << dir.path().string() << "\n";
  return kOk;
}

struct FreezeArgs {
  Common c;
  std::string teacher, dataset, method, split = "train";
  int64_t batch_size = 32;
};

int cmd_freeze(const FreezeArgs& a, const std::string& cmdline, std::ostream& out) {
  auto teacher_path = resolve_input(a.teacher, "teacher.ckpt");
  auto data_path = resolve_input(a.dataset, "dataset.e2kd");
  auto teacher = load_checkpoint(teacher_path);
  auto split = load_dataset(data_path);
  auto method = a.method.empty() ? default_method(teacher.family()) : explain_method_from_string(a.method);
  const Dataset* part = a.split == "train" ? &split.train : &split.val;
  auto store = freeze(teacher, *part, method, a.batch_size);

  RunDir dir(a.c.out, a.c.force, cmdline);
  dir.add_input("teacher", teacher_path);
  dir.add_input("dataset", data_path);
  json cfg = {{"method", to_string(method)}, {"split", a.split}, {"batch_size", a.batch_size}};
  dir.set_config(cfg);
  store.save(dir / "store.e2kd");
  dir.set_field("outputs", {{"store", store.manifest()}});
  dir.finish();
  out << dir.path().string() << "\n";
  return kOk;
}

struct DistillArgs {
  Common c;
  std::string teacher, dataset, store, eval_config;
  std::string student_family, student_preset = "student";
  std::vector<double> taus, lambdas;  // sweep only
};

struct DistillInputs {
  fs::path teacher_path, data_path;
  std::optional<fs::path> store_path;
  Model teacher;
  DatasetSplit split;
  std::optional<FrozenStore> store;
  ModelSpec student_spec;
  DistillConfig cfg;
  json cfg_json;
};

DistillInputs load_distill_inputs(const DistillArgs& a) {
  auto teacher_path = resolve_input(a.teacher, "teacher.ckpt");
  auto data_path = resolve_input(a.dataset, "dataset.e2kd");
  DistillInputs in{teacher_path, data_path, std::nullopt, load_checkpoint(teacher_path), load_dataset(data_path),
                   std::nullopt, ModelSpec{}, DistillConfig{}, json()};
  auto family = a.student_family.empty() ? in.teacher.family() : family_from_string(a.student_family);
  auto base = to_json(default_distill_config(family));
  base["loss"]["multilabel"] = in.split.train.multilabel;
  in.cfg_json = load_config(a.c, base);
  in.cfg = distill_config_from_json(in.cfg_json);
  in.cfg_json = to_json(in.cfg);
  in.student_spec = default_spec(family, preset_from_string(a.student_preset), in.split.train.num_classes, in.cfg.seed);
  validate(in.cfg, family);
  if (!a.store.empty()) {
    in.store_path = resolve_input(a.store, "store.e2kd");
    in.store = FrozenStore::load(*in.store_path);
    const auto& m = in.store->manifest();
    if (m.value("dataset_fingerprint", "") != dataset_fingerprint(in.split.train)) {
      throw IntegrityError("frozen store was built from a different dataset than '" + data_path.string() + "'");
    }
    if (m.value("teacher_digest", "") != in.teacher.digest()) {
      throw IntegrityError("frozen store was built from a different teacher than '" + teacher_path.string() + "'");
    }
  }
  if (in.cfg.frozen && !in.store) throw IntegrityError("frozen=true needs --store");
  return in;
}

void record_inputs(RunDir& dir, const DistillInputs& in) {
  dir.add_input("teacher", in.teacher_path);
  dir.add_input("dataset", in.data_path);
  if (in.store_path) dir.add_input("store", *in.store_path);
  dir.set_seeds({{"train", in.cfg.seed}, {"student", in.student_spec.seed}, {"data", in.split.seed}});
  dir.set_field("student_spec", to_json(in.student_spec));
}

EvalConfig load_eval_config(const std::string& path) {
  return path.empty() ? EvalConfig{} : eval_config_from_json(read_config(path));
}

void write_report(RunDir& dir, const MetricsReport& report) {
  dir.write_json("report.json", to_json(report));
  dir.write_text("shift_curve.tsv", shift_curve_tsv(report));
}

int cmd_distill(const DistillArgs& a, const std::string& cmdline, std::ostream& out, std::ostream& err) {
  auto in = load_distill_inputs(a);
  auto eval_cfg = load_eval_config(a.eval_config);
  RunDir dir(a.c.out, a.c.force, cmdline);
  record_inputs(dir, in);
  dir.set_config(in.cfg_json);
  dir.write_json("config.json", in.cfg_json);
  if (!a.eval_config.empty()) dir.write_json("eval_config.json", to_json(eval_cfg));

  TrainOptions opts;
  opts.checkpoint_dir = dir / "checkpoints";
  opts.on_epoch = epoch_logger(dir, err);
  auto result = distill(in.teacher, Model(in.student_spec), {in.split.train, in.split.val}, in.cfg,
                        in.store ? &*in.store : nullptr, opts);
  save_checkpoint(result.model, dir / "student.ckpt", {{"best_epoch", result.history.best_epoch}});
  dir.write_json("history.json", to_json(result.history));
  write_report(dir, evaluate(result.model, in.teacher, in.split.test_id, in.split.test_ood, eval_cfg));
  dir.set_field("outputs", {{"model_id", result.model.model_id()}});
  dir.finish();
  out << dir.path().string() << "\n";
  return kOk;
}

int cmd_sweep(const DistillArgs& a, const std::string& cmdline, std::ostream& out, std::ostream& err) {
  if (a.taus.empty() || a.lambdas.empty()) throw UsageError("sweep: --taus and --lambdas are required");
  auto in = load_distill_inputs(a);
  RunDir dir(a.c.out, a.c.force, cmdline);
  record_inputs(dir, in);
  dir.set_config({{"base", in.cfg_json}, {"taus", a.taus}, {"lambdas", a.lambdas}});

  auto inner = distill_runner(in.teacher, in.student_spec, {in.split.train, in.split.val}, in.store ? &*in.store : nullptr);
  auto result = sweep(make_grid(a.taus, a.lambdas), in.cfg, [&](const DistillConfig& c) {
    err << "sweep point tau " << c.loss.tau << " lambda " << c.loss.lambda_exp << "\n";
    return inner(c);
  });
  json runs = json::array();
  for (const auto& r : result.runs) {
    runs.push_back({{"tau", r.point.tau},
                    {"lambda", r.point.lambda},
                    {"ok", r.ok},
                    {"error", r.error},
                    {"val_accuracy", r.val_accuracy},
                    {"val_agreement", r.val_agreement},
                    {"epochs", to_json(r.history)["epochs"]}});
  }
  dir.write_json("sweep.json", {{"runs", runs}, {"best_index", result.best_index}});
  dir.write_json("best_config.json", to_json(result.best));
  dir.finish();
  out << dir.path().string() << "\n";
  return kOk;
}

struct EvaluateArgs {
  Common c;
  std::string student, teacher, dataset;
};

int cmd_evaluate(const EvaluateArgs& a, const std::string& cmdline, std::ostream& out) {
  auto student_path = resolve_input(a.student, "student.ckpt");
  auto teacher_path = resolve_input(a.teacher, "teacher.ckpt");
  auto data_path = resolve_input(a.dataset, "dataset.e2kd");
  auto eval_json = load_config(a.c, to_json(EvalConfig{}));
  auto eval_cfg = eval_config_from_json(eval_json);
  auto student = load_checkpoint(student_path);
  auto teacher = load_checkpoint(teacher_path);
  auto split = load_dataset(data_path);

  RunDir dir(a.c.out, a.c.force, cmdline);
  dir.add_input("student", student_path);
  dir.add_input("teacher", teacher_path);
  dir.add_input("dataset", data_path);
  dir.set_config(to_json(eval_cfg));
  write_report(dir, evaluate(student, teacher, split.test_id, split.test_ood, eval_cfg));
  dir.finish();
  out << dir.path().string() << "\n";
  return kOk;
}

struct ReportArgs {
  Common c;
  std::vector<std::string> runs;
};

std::string safe_label(const std::string& s) {
  std::string out;
  for (char ch : s) out += (std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_') ? ch : '_';
  return out.empty() ? "run" : out;
}

int cmd_report(const ReportArgs& a, const std::string& cmdline, std::ostream& out, std::ostream& err) {
  std::vector<ReportRow> rows;
  std::map<std::string, int> seen;
  int skipped = 0;
  for (const auto& r : a.runs) {
    fs::path p(r);
    if (!fs::exists(p) && !p.is_absolute()) p = output_path(r);
    if (!fs::exists(p / "manifest.json") || !fs::exists(p / "report.json") || !fs::exists(p / "shift_curve.tsv")) {
      err << "warning: skipping incomplete run '" << r << "'\n";
      ++skipped;
      continue;
    }
    auto label = safe_label(fs::absolute(p).lexically_normal().filename().string());
    if (int n = ++seen[label]; n > 1) label += "_" + std::to_string(n);
    rows.push_back({label, p, read_artifact_json(p / "report.json"), read_file(p / "shift_curve.tsv")});
  }
  if (rows.empty()) throw DataError("report: no completed runs");

  RunDir dir(a.c.out, a.c.force, cmdline);
  for (const auto& r : rows) dir.add_input("run:" + r.label, r.dir / "report.json");
  dir.set_config({{"runs", a.runs}});
  dir.write_text("table.txt", table_text(rows));
  dir.write_text("table.csv", table_csv(rows));
  dir.write_json("table.json", table_json(rows));
  dir.write_text("group_accuracy.svg", group_bars_svg(rows));
  dir.write_text("shift_curves.svg", shift_curves_svg(rows));
  fs::create_directory(dir / "curves");
  for (const auto& r : rows) write_file(dir / "curves" / (r.label + ".tsv"), r.curve_tsv);
  dir.set_field("skipped", skipped);
  dir.finish();
  out << table_text(rows);
  return skipped ? kIntegrity : kOk;
}

}  // namespace

json apply_overrides(json config, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + o + "'");
    auto key = o.substr(0, eq), raw = o.substr(eq + 1);
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    json* node = &config;
    size_t start = 0;
    for (size_t dot; (dot = key.find('.', start)) != std::string::npos; start = dot + 1) {
      node = &(*node)[key.substr(start, dot - start)];
      if (!node->is_object() && !node->is_null()) throw UsageError("--set: '" + key + "' descends into a non-object");
    }
    (*node)[key.substr(start)] = value;
  }
  return config;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const UsageError*>(&e) || dynamic_cast<const ConfigError*>(&e) ||
      dynamic_cast<const UnsupportedError*>(&e)) {
    return kUsage;
  }
  if (dynamic_cast<const TrainingError*>(&e)) return kTraining;
  return kIntegrity;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Explanation-enhanced knowledge distillation experiments", "e2kd"};
  app.require_subcommand(1);
  app.set_version_flag("--version", E2KD_VERSION);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Generate a synthetic dataset archive");
  g->add_option("--kind", gen.kind, "biased | shapes")->required()->check(CLI::IsMember({"biased", "shapes"}));
  add_common(g, gen.c);

  TeacherArgs tt;
  auto* t = app.add_subcommand("train-teacher", "Train a teacher with label supervision");
  t->add_option("--dataset", tt.dataset, "Dataset archive or directory")->required();
  add_common(t, tt.c);

  FreezeArgs fz;
  auto* f = app.add_subcommand("freeze", "Precompute teacher logits and explanations");
  f->add_option("--teacher", fz.teacher)->required();
  f->add_option("--dataset", fz.dataset)->required();
  f->add_option("--method", fz.method, "cam | gradcam | bcos (default: the teacher's natural method)");
  f->add_option("--split", fz.split)->check(CLI::IsMember({"train", "val"}));
  f->add_option("--batch-size", fz.batch_size)->check(CLI::PositiveNumber);
  add_common(f, fz.c, false);

  DistillArgs ds, sw;
  for (auto [name, args_ptr] : {std::pair{"distill", &ds}, std::pair{"sweep", &sw}}) {
    auto& d = *args_ptr;
    auto* cmd = app.add_subcommand(name, std::string(name) == "distill" ? "Distill a student from a teacher"
                                                                        : "Grid search over (tau, lambda)");
    cmd->add_option("--teacher", d.teacher)->required();
    cmd->add_option("--dataset", d.dataset)->required();
    cmd->add_option("--store", d.store, "Frozen store (needed when frozen=true)");
    cmd->add_option("--student-family", d.student_family, "std_cnn | bcos_cnn | bcos_vit (default: teacher's)");
    cmd->add_option("--student-preset", d.student_preset, "student | teacher");
    if (std::string(name) == "distill") {
      cmd->add_option("--eval-config", d.eval_config, "EvalConfig JSON file");
    } else {
      cmd->add_option("--taus", d.taus)->delimiter(',')->required();
      cmd->add_option("--lambdas", d.lambdas)->delimiter(',')->required();
    }
    add_common(cmd, d.c);
  }

  EvaluateArgs ev;
  auto* e = app.add_subcommand("evaluate", "Evaluate a student against its teacher");
  e->add_option("--student", ev.student)->required();
  e->add_option("--teacher", ev.teacher)->required();
  e->add_option("--dataset", ev.dataset)->required();
  add_common(e, ev.c);

  ReportArgs rp;
  auto* r = app.add_subcommand("report", "Tables and plots over completed runs");
  r->add_option("runs", rp.runs, "Run directories")->required();
  add_common(r, rp.c, false);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& pe) {
    int code = app.exit(pe, out, err);
    return code == 0 ? kOk : kUsage;
  }

  const auto cmdline = shell_join(args);
  try {
    if (*g) return cmd_generate(gen, cmdline, out);
    if (*t) return cmd_train_teacher(tt, cmdline, out, err);
    if (*f) return cmd_freeze(fz, cmdline, out);
    if (app.got_subcommand("distill")) return cmd_distill(ds, cmdline, out, err);
    if (app.got_subcommand("sweep")) return cmd_sweep(sw, cmdline, out, err);
    if (*e) return cmd_evaluate(ev, cmdline, out);
    if (*r) return cmd_report(rp, cmdline, out, err);
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return exit_code_for(ex);
  }
  return kUsage;
}

}  // namespace e2kd::cli
