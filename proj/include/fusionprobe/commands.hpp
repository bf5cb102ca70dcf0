#pragma once

// Commands behind the fusionprobe tool. run_cli maps failures to exit codes:
// 0 success, 1 usage error, 2 validation failure, 3 numerical failure.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "fusionprobe/checkpoint.hpp"
#include "fusionprobe/evaluator.hpp"
#include "fusionprobe/grad_check.hpp"
#include "fusionprobe/manifest.hpp"
#include "fusionprobe/synth.hpp"
#include "fusionprobe/trainer.hpp"

namespace fprobe {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitValidation = 2, kExitNumerical = 3 };

inline int exit_code_for(ErrorCode code) {
  if (is_numerical(code)) return kExitNumerical;
  return code == ErrorCode::kInvalidArgument ? kExitUsage : kExitValidation;
}

/// Everything a train / sweep run needs; serialised into the output directory.
struct RunConfig {
  std::string manifest;
  FusionHeadConfig head;
  /// Heads trained by `sweep`.
  std::vector<FusionKind> heads;
  TrainConfig train;
  std::string trained_view;
  std::string out;
};

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json heads = nlohmann::json::array();
  for (auto k : c.heads) heads.push_back(std::string(to_string(k)));
  return {{"manifest", c.manifest},     {"head", to_json(c.head)}, {"heads", heads},
          {"train", to_json(c.train)},  {"trained_view", c.trained_view}, {"out", c.out}};
}

/// Applies the keys present in `j` on top of `base`.
inline RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base = {}) {
  try {
    base.manifest = j.value("manifest", base.manifest);
    if (j.contains("head")) base.head = head_config_from_json(j.at("head"), base.head);
    if (j.contains("heads")) {
      base.heads.clear();
      for (const auto& h : j.at("heads")) base.heads.push_back(parse_fusion_kind(h.get<std::string>()));
    }
    if (j.contains("train")) base.train = train_config_from_json(j.at("train"), base.train);
    base.trained_view = j.value("trained_view", base.trained_view);
    base.out = j.value("out", base.out);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kBadFormat, std::string("run config: ") + e.what());
  }
  return base;
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  const std::string text = read_file_bytes(path);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kBadFormat, path.string() + ": " + e.what());
  }
}

inline void write_text(const std::filesystem::path& path, const std::string& text) { write_file_bytes(path, text); }

inline std::string dump_json(const nlohmann::json& j) { return j.dump(2) + "\n"; }

/// Resolves the manifest path and trained view of a run and loads the manifest.
inline DatasetManifest load_run_manifest(RunConfig& cfg) {
  require(!cfg.manifest.empty(), ErrorCode::kInvalidArgument, "no manifest given (--manifest or config \"manifest\")");
  DatasetManifest m = load_manifest(cfg.manifest);
  if (cfg.trained_view.empty()) cfg.trained_view = cfg.train.trained_view;
  if (cfg.trained_view.empty() && m.trained_view) cfg.trained_view = *m.trained_view;
  require(!cfg.trained_view.empty(), ErrorCode::kInvalidArgument,
          "no trained view given and the manifest does not name one");
  cfg.train.trained_view = cfg.trained_view;
  return m;
}

inline ValidationReport cmd_validate(const std::filesystem::path& manifest, std::ostream& out) {
  auto report = validate_manifest(load_manifest(manifest));
  out << dump_json(report.to_json());
  return report;
}

inline DatasetManifest cmd_synth(const SynthConfig& cfg, const std::filesystem::path& out_dir, std::ostream& out) {
  auto m = generate(cfg, out_dir);
  write_text(out_dir / "synth_config.json", dump_json(to_json(cfg)));
  out << "wrote " << m.records.size() << " videos to " << (out_dir / "manifest.json").string() << "\n";
  return m;
}

struct TrainOutputs {
  TrainResult result;
  std::filesystem::path final_checkpoint;
  std::filesystem::path best_checkpoint;
};

/// Trains one head and writes final/best checkpoints, the JSONL log and the
/// resolved run config into `dir`.
inline TrainOutputs train_into(const DatasetManifest& manifest, const RunConfig& cfg, const std::filesystem::path& dir,
                               std::ostream& out) {
  auto result = train(manifest, cfg.head, cfg.train, [&](const EpochRecord& r) {
    if (r.epoch == 0 || (r.epoch + 1) % 10 == 0 || r.val_balanced_acc)
      out << "  epoch " << r.epoch << " loss " << r.loss << " train_acc " << r.train_acc
          << (r.val_balanced_acc ? " val_bal_acc " + std::to_string(*r.val_balanced_acc) : std::string()) << "\n";
  });
  // The output directory stays out of the checkpoint so reruns elsewhere are byte-identical.
  nlohmann::json run = to_json(cfg);
  run.erase("out");
  const nlohmann::json meta{{"run", run}, {"epochs", cfg.train.epochs}, {"trained_view", cfg.trained_view}};
  nlohmann::json best_meta = meta;
  best_meta["best_epoch"] = result.best_epoch;
  best_meta["best_val_balanced_acc"] =
      result.best_val_balanced_acc ? nlohmann::json(*result.best_val_balanced_acc) : nlohmann::json(nullptr);
  TrainOutputs o{std::move(result), dir / "checkpoint_final.fpck", dir / "checkpoint_best.fpck"};
  save_checkpoint(o.final_checkpoint, o.result.final_model, meta);
  save_checkpoint(o.best_checkpoint, o.result.best_model, best_meta);
  write_text(dir / "train_log.jsonl", o.result.log_jsonl());
  write_text(dir / "run_config.json", dump_json(to_json(cfg)));
  return o;
}

inline TrainOutputs cmd_train(RunConfig cfg, std::ostream& out) {
  require(!cfg.out.empty(), ErrorCode::kInvalidArgument, "no output directory given (--out or config \"out\")");
  const auto manifest = load_run_manifest(cfg);
  out << "training " << to_string(cfg.head.kind) << " on view " << cfg.trained_view << "\n";
  return train_into(manifest, cfg, cfg.out, out);
}

inline void write_report(const EvalReport& report, const std::filesystem::path& dir) {
  write_text(dir / "eval_report.json", dump_json(report.to_json()));
  write_text(dir / "eval_report.csv", report.to_csv());
}

inline EvalReport cmd_eval(const std::filesystem::path& checkpoint, const std::filesystem::path& manifest_path,
                           std::string trained_view, const std::filesystem::path& out_dir, std::ostream& out) {
  const auto manifest = load_manifest(manifest_path);
  if (!manifest.has_split(Split::kTest))
    throw Error(ErrorCode::kEmptySplit, "manifest '" + manifest_path.string() + "' has no records in split 'test'");
  const auto ck = load_checkpoint(checkpoint);
  if (trained_view.empty()) trained_view = ck.meta.value("trained_view", std::string());
  if (trained_view.empty() && manifest.trained_view) trained_view = *manifest.trained_view;
  require(!trained_view.empty(), ErrorCode::kInvalidArgument, "no trained view given");
  auto report = evaluate(ck.model, manifest, trained_view);
  write_report(report, out_dir);
  for (const auto& w : report.warnings) out << "warning: " << w << "\n";
  out << report.to_csv();
  return report;
}

inline std::vector<EmbeddingRow> cmd_export(const std::filesystem::path& checkpoint,
                                            const std::filesystem::path& manifest_path,
                                            const std::filesystem::path& out_csv, std::ostream& out) {
  const auto manifest = load_manifest(manifest_path);
  const auto ck = load_checkpoint(checkpoint);
  auto rows = export_embeddings(ck.model, manifest);
  write_text(out_csv, embeddings_csv(rows));
  out << "wrote " << rows.size() << " rows to " << out_csv.string() << "\n";
  return rows;
}

inline const char* const kSweepMetrics[] = {"balanced_acc", "top1", "top5"};

/// Rows (head, view, metric, value): every head x every manifest view for each metric.
inline std::string sweep_csv(const std::vector<std::pair<FusionKind, EvalReport>>& reports,
                             const std::vector<std::string>& views) {
  std::ostringstream os;
  os << std::setprecision(6) << std::fixed;
  os << "head,view,metric,value\n";
  for (const char* metric : kSweepMetrics)
    for (const auto& [kind, report] : reports)
      for (const auto& view : views) {
        os << to_string(kind) << ',' << view << ',' << metric << ',';
        if (const auto* v = report.find(view)) {
          const std::string m(metric);
          os << (m == "balanced_acc" ? v->metrics.balanced_acc : m == "top1" ? v->metrics.top1 : v->metrics.top5);
        }
        os << '\n';
      }
  return os.str();
}

struct SweepOutputs {
  std::vector<std::pair<FusionKind, EvalReport>> reports;
  std::string csv;
};

inline SweepOutputs cmd_sweep(RunConfig cfg, std::ostream& out) {
  require(!cfg.out.empty(), ErrorCode::kInvalidArgument, "no output directory given (--out or config \"out\")");
  require(!cfg.heads.empty(), ErrorCode::kInvalidArgument, "sweep needs at least one head (--head or config \"heads\")");
  const auto manifest = load_run_manifest(cfg);
  const std::filesystem::path root = cfg.out;
  SweepOutputs s;
  nlohmann::json summary = nlohmann::json::array();
  for (FusionKind kind : cfg.heads) {
    RunConfig one = cfg;
    one.head.kind = kind;
    one.heads = {kind};
    const auto dir = root / std::string(to_string(kind));
    out << "training " << to_string(kind) << "\n";
    auto trained = train_into(manifest, one, dir, out);
    auto report = evaluate(trained.result.best_model, manifest, cfg.trained_view);
    write_report(report, dir);
    const auto* tv = report.find(cfg.trained_view);
    summary.push_back({{"head", to_string(kind)},
                       {"trained_view_balanced_acc", tv ? nlohmann::json(tv->metrics.balanced_acc) : nlohmann::json()},
                       {"cross_view_balanced_acc",
                        report.cross_view ? nlohmann::json(report.cross_view->balanced_acc) : nlohmann::json()},
                       {"overall_balanced_acc", report.overall.balanced_acc}});
    s.reports.emplace_back(kind, std::move(report));
  }
  s.csv = sweep_csv(s.reports, manifest.views);
  write_text(root / "sweep.csv", s.csv);
  write_text(root / "sweep_summary.json", dump_json(summary));
  write_text(root / "run_config.json", dump_json(to_json(cfg)));
  out << dump_json(summary);
  return s;
}

/// Runs the full gradient-check suite; false when any check exceeds `tol`.
inline bool cmd_gradcheck(double tol, std::ostream& out) {
  bool ok = true;
  for (const auto& e : gradient_suite()) {
    const bool pass = e.result.passed(tol);
    ok = ok && pass;
    out << (pass ? "ok   " : "FAIL ") << std::left << std::setw(20) << to_string(e.kind) << " seed " << e.seed
        << "  max_rel_err " << std::scientific << std::setprecision(3) << e.result.max_relative_error << "  worst "
        << e.result.worst << std::defaultfloat << "\n";
  }
  return ok;
}

namespace detail {

/// Copies a user-supplied config file verbatim next to the run outputs.
inline void copy_config(const std::string& config, const std::string& out_dir) {
  if (config.empty() || out_dir.empty()) return;
  write_text(std::filesystem::path(out_dir) / "config_source.json", read_file_bytes(config));
}

}  // namespace detail

/// Entry point of the command-line tool. Flags are applied first; values in a
/// --config file then override them.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Temporal fusion heads and linear probes over frozen video embeddings", "fusionprobe"};
  app.require_subcommand(1);

  std::string manifest, trained_view, out_path, config, checkpoint, bench = "order";
  std::vector<std::string> heads;
  std::optional<std::size_t> epochs;
  std::optional<std::uint64_t> seed;
  double tol = 1e-3;

  auto* validate = app.add_subcommand("validate", "Check a dataset manifest against its embedding files");
  validate->add_option("--manifest", manifest, "Manifest JSON")->required();

  auto* synth = app.add_subcommand("synth", "Generate a synthetic benchmark");
  synth->add_option("--bench", bench, "Canonical bench: order or shift")->check(CLI::IsMember({"order", "shift"}));
  synth->add_option("--config", config, "Synth config JSON (overrides flags)");
  synth->add_option("--seed", seed, "Generator seed");
  synth->add_option("--out", out_path, "Output directory")->required();

  auto add_run_flags = [&](CLI::App* sub, bool many_heads) {
    sub->add_option("--manifest", manifest, "Manifest JSON");
    if (many_heads)
      sub->add_option("--head", heads, "Fusion head(s) to sweep")->delimiter(',');
    else
      sub->add_option("--head", heads, "Fusion head")->expected(1);
    sub->add_option("--trained-view", trained_view, "Training view");
    sub->add_option("--epochs", epochs, "Training epochs");
    sub->add_option("--seed", seed, "Seed for initialisation and sampling");
    sub->add_option("--out", out_path, "Output directory");
    sub->add_option("--config", config, "Run config JSON (overrides flags)");
  };
  auto* train_cmd = app.add_subcommand("train", "Train a fusion head + probe");
  add_run_flags(train_cmd, false);
  auto* sweep = app.add_subcommand("sweep", "Train and evaluate several heads");
  add_run_flags(sweep, true);

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint per view");
  eval->add_option("--checkpoint", checkpoint, "FPCK checkpoint")->required();
  eval->add_option("--manifest", manifest, "Manifest JSON")->required();
  eval->add_option("--trained-view", trained_view, "Training view (default: from checkpoint)");
  eval->add_option("--out", out_path, "Output directory")->required();

  auto* exp = app.add_subcommand("export", "Export fused test-video features as CSV");
  exp->add_option("--checkpoint", checkpoint, "FPCK checkpoint")->required();
  exp->add_option("--manifest", manifest, "Manifest JSON")->required();
  exp->add_option("--out", out_path, "Output CSV")->required();

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every head");
  grad->add_option("--tol", tol, "Maximum relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*validate) {
      cmd_validate(manifest, out);
    } else if (*synth) {
      SynthConfig cfg = bench == "order" ? order_bench() : shift_bench();
      if (seed) cfg.seed = *seed;
      if (!config.empty()) cfg = synth_config_from_json(read_json_file(config), cfg);
      cmd_synth(cfg, out_path, out);
    } else if (*train_cmd || *sweep) {
      RunConfig cfg;
      cfg.manifest = manifest;
      cfg.trained_view = trained_view;
      cfg.out = out_path;
      if (epochs) cfg.train.epochs = *epochs;
      if (seed) {
        cfg.train.seed = *seed;
        cfg.head.seed = *seed;
      }
      for (const auto& h : heads) cfg.heads.push_back(parse_fusion_kind(h));
      if (!cfg.heads.empty()) cfg.head.kind = cfg.heads.front();
      if (!config.empty()) cfg = run_config_from_json(read_json_file(config), cfg);
      if (*train_cmd) {
        cmd_train(cfg, out);
      } else {
        cmd_sweep(cfg, out);
      }
      detail::copy_config(config, cfg.out);
    } else if (*eval) {
      cmd_eval(checkpoint, manifest, trained_view, out_path, out);
    } else if (*exp) {
      cmd_export(checkpoint, manifest, out_path, out);
    } else if (*grad) {
      if (!cmd_gradcheck(tol, out)) {
        err << "error: gradient check failed\n";
        return kExitNumerical;
      }
    }
  } catch (const Error& e) {
    err << "error [" << to_string(e.code()) << "]: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  }
  return kExitOk;
}

}  // namespace fprobe
