// mmfusion command-line tool: synth, split, train, eval, gradcheck, report.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "mmfusion/corpus_tools.hpp"
#include "mmfusion/error.hpp"
#include "mmfusion/gradcheck.hpp"
#include "mmfusion/io.hpp"
#include "mmfusion/metrics.hpp"
#include "mmfusion/trainer.hpp"
#include "run_manifest.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mmfusion;
using mmfusion::cli::RunManifest;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitRuntime = 3;

struct Output {
  bool color = false;

  std::string paint(const std::string& text, const char* code) const {
    return color ? std::string("\033[") + code + "m" + text + "\033[0m" : text;
  }
  std::string ok(const std::string& t) const { return paint(t, "32"); }
  std::string bad(const std::string& t) const { return paint(t, "31"); }
};

Output g_out;

void log(const std::string& msg) { std::cerr << msg << '\n'; }

std::string fmt(const char* pattern, double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), pattern, x);
  return buf;
}

json read_json(const fs::path& path) {
  try {
    return json::parse(io::read_file(path));
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) { io::write_file_atomic(path, j.dump(2) + "\n"); }

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create " + dir.string() + ": " + ec.message());
}

RunManifest start_manifest(const std::string& command, const std::vector<std::string>& argv) {
  RunManifest m;
  m.command = command;
  m.argv = argv;
  m.started_at = cli::utc_timestamp();
  return m;
}

std::vector<std::size_t> parse_size_list(const std::string& text, const std::string& flag) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string field;
  while (std::getline(ss, field, ',')) {
    const long long v = io::parse_int(field, flag);
    if (v < 1) throw ValidationError(flag + ": values must be positive");
    out.push_back(static_cast<std::size_t>(v));
  }
  if (out.empty()) throw ValidationError(flag + ": empty list");
  return out;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> n_videos;
  std::optional<double> noise_std;
};

void cmd_synth(const SynthArgs& a, const std::vector<std::string>& argv) {
  RunManifest man = start_manifest("synth", argv);
  SynthConfig c = a.config.empty() ? SynthConfig{} : synth_config_from_json(read_json(a.config));
  if (!a.config.empty()) man.add_input("config", a.config);
  if (a.seed) c.seed = *a.seed;
  if (a.n_videos) c.n_videos = *a.n_videos;
  if (a.noise_std) c.noise_std = *a.noise_std;
  c.validate();

  const fs::path out(a.out);
  ensure_dir(out);
  generate_synthetic_corpus(c, out);
  write_json(out / "synth_config.json", synth_config_to_json(c));
  man.config = synth_config_to_json(c);
  man.seed = c.seed;
  man.corpus = out.string();
  man.write(out);
  log("wrote " + std::to_string(c.n_videos) + " videos to " + out.string());
}

// ---------------------------------------------------------------------------

struct SplitArgs {
  std::string corpus;
  std::size_t k = 5;
  std::uint64_t seed = 0;
  std::string out;
  std::string official;
  bool stratify = false;
};

void check_known(const std::set<std::string>& known, const std::vector<std::string>& ids, const std::string& where) {
  for (const auto& id : ids) {
    if (!known.count(id)) throw ValidationError(where + ": id '" + id + "' is not in the corpus");
  }
}

void cmd_split(const SplitArgs& a, const std::vector<std::string>& argv) {
  RunManifest man = start_manifest("split", argv);
  const Corpus corpus = load_corpus(a.corpus);
  man.add_input("corpus", a.corpus);
  const auto all_ids = corpus.ids();
  const std::set<std::string> known(all_ids.begin(), all_ids.end());

  std::vector<SplitSpec> splits;
  std::vector<std::string> pool = all_ids;
  if (!a.official.empty()) {
    man.add_input("official", a.official);
    const json j = read_json(a.official);
    std::vector<std::string> train_ids, val_ids;
    try {
      train_ids = j.at("train").get<std::vector<std::string>>();
      val_ids = j.at("val").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
      throw ValidationError(a.official + ": expected {\"train\": [...], \"val\": [...]}: " + e.what());
    }
    check_known(known, train_ids, a.official);
    check_known(known, val_ids, a.official);
    const auto cleaned = dedup_overlap(train_ids, val_ids);
    for (const auto& id : val_ids) {
      if (std::find(cleaned.begin(), cleaned.end(), id) == cleaned.end()) {
        log("removed '" + id + "' from the official val set (also in train)");
      }
    }
    splits.push_back({"Official", train_ids, cleaned});
    pool = train_ids;
    pool.insert(pool.end(), cleaned.begin(), cleaned.end());
  }

  std::vector<SplitSpec> folds;
  if (a.stratify) {
    std::vector<int> strata;
    for (const auto& id : pool) strata.push_back(dominant_label(*corpus.find(id)));
    folds = make_stratified_kfold(pool, strata, a.k, a.seed);
  } else {
    folds = make_kfold(pool, a.k, a.seed);
  }
  splits.insert(splits.end(), folds.begin(), folds.end());

  const fs::path out(a.out);
  if (out.has_parent_path()) ensure_dir(out.parent_path());
  save_splits(out, splits);
  man.config = {{"k", a.k}, {"stratify", a.stratify}};
  man.seed = a.seed;
  man.corpus = a.corpus;
  man.write(out.parent_path().empty() ? fs::path(".") : out.parent_path());
  for (const auto& s : splits) {
    log(s.name + ": " + std::to_string(s.train_ids.size()) + " train, " + std::to_string(s.val_ids.size()) + " val");
  }
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string corpus;
  std::string split;
  std::string split_name = "Split1";
  std::string mode = "attention";
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<double> lr;
  std::optional<double> weight_decay;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> batch_size;
  std::optional<std::size_t> hidden;
  std::optional<std::size_t> attn;
  std::optional<std::string> optimizer;
  bool quiet = false;
};

void cmd_train(const TrainArgs& a, const std::vector<std::string>& argv) {
  RunManifest man = start_manifest("train", argv);
  const FusionMode mode = parse_mode(a.mode);
  TrainConfig c = a.config.empty() ? TrainConfig{} : config_from_json(read_json(a.config));
  if (a.seed) c.seed = *a.seed;
  if (a.lr) c.lr = *a.lr;
  if (a.weight_decay) c.weight_decay = *a.weight_decay;
  if (a.epochs) c.max_epochs = *a.epochs;
  if (a.batch_size) c.batch_size = *a.batch_size;
  if (a.hidden) c.hidden = *a.hidden;
  if (a.attn) c.attn = *a.attn;
  if (a.optimizer) {
    json j = config_to_json(c);
    j["optimizer"] = *a.optimizer;
    c = config_from_json(j);
  }
  c.validate();

  const Corpus corpus = load_corpus(a.corpus);
  const auto splits = load_splits(a.split);
  const SplitSpec& split = find_split(splits, a.split_name);
  man.add_input("corpus", a.corpus);
  man.add_input("split", a.split);
  if (!a.config.empty()) man.add_input("config", a.config);

  const fs::path out(a.out);
  ensure_dir(out);
  const std::size_t epochs = c.max_epochs;
  auto on_epoch = [&](const EpochRecord& r, const FusionParams&) {
    if (!a.quiet) {
      log("epoch " + std::to_string(r.epoch) + "/" + std::to_string(epochs) + "  loss " + fmt("%.4f", r.train_loss) +
          "  val_f1 " + fmt("%.4f", r.val_macro_f1) + "  lr " + fmt("%g", r.lr));
    }
    return false;
  };
  const TrainResult result =
      train(corpus.select(split.train_ids), corpus.select(split.val_ids), corpus.dims, c, mode, on_epoch);

  write_json(out / "config.json", config_to_json(c));
  io::write_file_atomic(out / "history.csv", history_csv(result.history));
  save_checkpoint(out / "best.ckpt", result.params, c.seed);

  man.config = {{"train", config_to_json(c)}, {"mode", mode_name(mode)}, {"split", split.name}};
  man.seed = c.seed;
  man.corpus = a.corpus;
  man.write(out);
  if (result.best_epoch > 0) {
    const auto& best = result.history[result.best_epoch - 1];
    std::cout << "best epoch " << result.best_epoch << " val macro-F1 " << format_percent(best.val_macro_f1) << "\n";
  } else {
    std::cout << "no epochs run; wrote initial parameters\n";
  }
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string corpus;
  std::string split;
  std::string split_name = "Split1";
  std::string subset = "val";
  std::string ckpt;
  std::string out;
  std::string name;
};

void cmd_eval(const EvalArgs& a, const std::vector<std::string>& argv) {
  RunManifest man = start_manifest("eval", argv);
  const Corpus corpus = load_corpus(a.corpus);
  const auto splits = load_splits(a.split);
  const SplitSpec& split = find_split(splits, a.split_name);
  const Checkpoint ck = load_checkpoint(a.ckpt);
  man.add_input("corpus", a.corpus);
  man.add_input("split", a.split);
  man.add_input("checkpoint", a.ckpt);

  const ModelDims& d = ck.params.dims();
  if (d.face != corpus.dims.face || d.audio != corpus.dims.audio || d.pose != corpus.dims.pose) {
    throw ValidationError(a.ckpt + ": checkpoint expects feature dims " + std::to_string(d.face) + "/" +
                          std::to_string(d.audio) + "/" + std::to_string(d.pose) + " but the corpus has " +
                          std::to_string(corpus.dims.face) + "/" + std::to_string(corpus.dims.audio) + "/" +
                          std::to_string(corpus.dims.pose));
  }
  const auto& ids = a.subset == "train" ? split.train_ids : split.val_ids;
  const WindowSet windows(corpus.select(ids));
  if (windows.empty()) throw ValidationError("split '" + split.name + "' has no " + a.subset + " windows");
  const EvalReport report = evaluate(windows, ck.params);

  const std::string name = a.name.empty() ? std::string(mode_label(ck.params.mode())) : a.name;
  const fs::path out(a.out);
  ensure_dir(out);
  io::write_file_atomic(out / "report.md", render_report(report, ReportStyle::Markdown, name));
  io::write_file_atomic(out / "report.csv", render_report(report, ReportStyle::Csv, name));
  json j = report_to_json(report);
  j["model"] = name;
  write_json(out / "report.json", j);

  man.config = {{"split", split.name}, {"subset", a.subset}, {"mode", mode_name(ck.params.mode())}};
  man.seed = ck.seed;
  man.corpus = a.corpus;
  man.write(out);
  std::cout << render_report(report, ReportStyle::Markdown, name);
}

// ---------------------------------------------------------------------------

struct GradcheckArgs {
  std::string dims = "8,8,4,16,16";
  std::string mode = "all";
  std::uint64_t seed = 42;
  std::string steps = "1,3,12";
  double tol = 1e-4;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  const auto dv = parse_size_list(a.dims, "--dims");
  if (dv.size() != 5) throw ValidationError("--dims: expected face,audio,pose,hidden,attn");
  const ModelDims dims{dv[0], dv[1], dv[2], dv[3], dv[4]};
  std::vector<FusionMode> modes;
  if (a.mode == "all") {
    modes.assign(kFusionModes.begin(), kFusionModes.end());
  } else {
    modes.push_back(parse_mode(a.mode));
  }
  const auto steps = parse_size_list(a.steps, "--T");

  double worst = 0.0;
  for (FusionMode m : modes) {
    for (std::size_t t : steps) {
      const GradCheckResult r = gradient_check(dims, m, t, a.seed);
      worst = std::max(worst, r.max_rel_error);
      const bool pass = r.max_rel_error < a.tol;
      char line[256];
      std::snprintf(line, sizeof(line), "%-12s T=%-3zu params=%-6zu max_rel_err=%.3e max_abs_err=%.3e worst=%s ",
                    std::string(mode_name(m)).c_str(), t, r.param_count, r.max_rel_error, r.max_abs_error,
                    r.worst_param.c_str());
      std::cout << line << (pass ? g_out.ok("PASS") : g_out.bad("FAIL")) << "\n";
    }
  }
  const bool pass = worst < a.tol;
  std::cout << "max relative error " << fmt("%.3e", worst) << " (tolerance " << fmt("%g", a.tol) << ") "
            << (pass ? g_out.ok("PASS") : g_out.bad("FAIL")) << "\n";
  return pass ? 0 : kExitRuntime;
}

// ---------------------------------------------------------------------------

struct ReportArgs {
  std::vector<std::string> runs;
  std::string out;
};

void cmd_report(const ReportArgs& a, const std::vector<std::string>& argv) {
  RunManifest man = start_manifest("report", argv);
  std::vector<TableRow> rows;
  for (const auto& run : a.runs) {
    const fs::path file = fs::path(run) / "report.json";
    const json j = read_json(file);
    std::string name = fs::path(run).filename().string();
    if (j.contains("model") && j["model"].is_string()) name = j["model"].get<std::string>();
    rows.push_back(table_row(name, report_from_json(j)));
    man.add_input(run, file);
  }
  const fs::path out(a.out);
  ensure_dir(out);
  io::write_file_atomic(out / "comparison.md", render_table(rows, ReportStyle::Markdown));
  io::write_file_atomic(out / "comparison.csv", render_table(rows, ReportStyle::Csv));
  man.write(out);
  std::cout << render_table(rows, ReportStyle::Markdown);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal attention-fusion expression recognition toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  bool plain = false;
  app.add_flag("--plain", plain, "Plain output without ANSI colors (also when NO_COLOR is set)");

  const std::vector<std::string> args(argv, argv + argc);
  auto check_exists = CLI::ExistingPath;

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic corpus");
  s->add_option("--config", synth.config, "SynthConfig JSON file")->check(CLI::ExistingFile);
  s->add_option("--out", synth.out, "Output corpus directory")->required();
  s->add_option("--seed", synth.seed, "Override the config seed");
  s->add_option("--n-videos", synth.n_videos, "Override the number of videos");
  s->add_option("--noise-std", synth.noise_std, "Override the feature noise");

  SplitArgs split;
  auto* sp = app.add_subcommand("split", "Write k-fold splits.json for a corpus");
  sp->add_option("--corpus", split.corpus, "Corpus directory")->required()->check(check_exists);
  sp->add_option("--k", split.k, "Number of folds")->capture_default_str();
  sp->add_option("--seed", split.seed, "Shuffle seed")->capture_default_str();
  sp->add_option("--out", split.out, "Output splits.json")->required();
  sp->add_option("--official", split.official, "JSON {train, val} official split; overlap is removed from val")
      ->check(CLI::ExistingFile);
  sp->add_flag("--stratify", split.stratify, "Balance folds by each video's dominant label");

  TrainArgs train_args;
  auto* t = app.add_subcommand("train", "Train one fusion model");
  t->add_option("--corpus", train_args.corpus, "Corpus directory")->required()->check(check_exists);
  t->add_option("--split", train_args.split, "splits.json")->required()->check(CLI::ExistingFile);
  t->add_option("--split-name", train_args.split_name, "Split to use")->capture_default_str();
  t->add_option("--mode", train_args.mode, "current_face | video_only | concat | attention")->capture_default_str();
  t->add_option("--config", train_args.config, "TrainConfig JSON file")->check(CLI::ExistingFile);
  t->add_option("--out", train_args.out, "Run directory")->required();
  t->add_option("--seed", train_args.seed, "Override seed");
  t->add_option("--lr", train_args.lr, "Override learning rate");
  t->add_option("--weight-decay", train_args.weight_decay, "Override weight decay");
  t->add_option("--epochs", train_args.epochs, "Override max epochs");
  t->add_option("--batch-size", train_args.batch_size, "Override batch size");
  t->add_option("--hidden", train_args.hidden, "Override RNN hidden width");
  t->add_option("--attn", train_args.attn, "Override attention width");
  t->add_option("--optimizer", train_args.optimizer, "adamw | sgd");
  t->add_flag("--quiet", train_args.quiet, "No per-epoch log lines");

  EvalArgs eval_args;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
  e->add_option("--corpus", eval_args.corpus, "Corpus directory")->required()->check(check_exists);
  e->add_option("--split", eval_args.split, "splits.json")->required()->check(CLI::ExistingFile);
  e->add_option("--split-name", eval_args.split_name, "Split to use")->capture_default_str();
  e->add_option("--subset", eval_args.subset, "val | train")->capture_default_str()->check(CLI::IsMember({"val", "train"}));
  e->add_option("--ckpt", eval_args.ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  e->add_option("--out", eval_args.out, "Output directory")->required();
  e->add_option("--name", eval_args.name, "Row label (default: the mode's label)");

  GradcheckArgs gc;
  auto* g = app.add_subcommand("gradcheck", "Compare analytic gradients with finite differences");
  g->add_option("--dims", gc.dims, "face,audio,pose,hidden,attn")->capture_default_str();
  g->add_option("--mode", gc.mode, "all or one mode name")->capture_default_str();
  g->add_option("--seed", gc.seed, "Seed for parameters and inputs")->capture_default_str();
  g->add_option("--T", gc.steps, "Comma-separated window lengths")->capture_default_str();
  g->add_option("--tol", gc.tol, "Maximum relative error")->capture_default_str();

  ReportArgs rep;
  auto* r = app.add_subcommand("report", "Merge eval outputs into one comparison table");
  r->add_option("--runs", rep.runs, "Eval output directories")->required()->check(CLI::ExistingDirectory);
  r->add_option("--out", rep.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : kExitValidation;
  }

  g_out.color = !plain && std::getenv("NO_COLOR") == nullptr && isatty(STDOUT_FILENO);

  try {
    if (*s) cmd_synth(synth, args);
    if (*sp) cmd_split(split, args);
    if (*t) cmd_train(train_args, args);
    if (*e) cmd_eval(eval_args, args);
    if (*g) return cmd_gradcheck(gc);
    if (*r) cmd_report(rep, args);
    return 0;
  } catch (const ValidationError& err) {
    std::cerr << g_out.bad("error") << ": " << err.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& err) {
    std::cerr << g_out.bad("error") << ": " << err.what() << "\n";
    return kExitRuntime;
  }
}
