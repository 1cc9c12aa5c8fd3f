#include "deepimp/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <thread>

#include "deepimp/gradcheck.hpp"
#include "deepimp/rnn_head.hpp"
#include "deepimp/train.hpp"

namespace deepimp::cli {

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

// `key = value` lines; '#' starts a comment. Keys name long flags without the
// dashes; command-line flags win.
void apply_config(CLI::App& sub, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read config file " + path);
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError(path + ":" + std::to_string(n) + ": expected key = value");
    }
    std::string key = trim(line.substr(0, eq));
    std::replace(key.begin(), key.end(), '_', '-');
    const std::string value = trim(line.substr(eq + 1));
    CLI::Option* opt = sub.get_option_no_throw("--" + key);
    if (!opt || key == "config") {
      throw UsageError(path + ":" + std::to_string(n) + ": unknown key '" + key + "' for " +
                       sub.get_name());
    }
    if (opt->count() > 0) continue;
    opt->add_result(value);
    opt->run_callback();
  }
}

std::size_t resolve_threads(std::size_t flag) {
  if (flag > 0) return flag;
  if (const char* env = std::getenv("DI_THREADS")) {
    char* end = nullptr;
    const unsigned long v = std::strtoul(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return v;
    throw UsageError("DI_THREADS must be a positive integer");
  }
  return 1;
}

std::size_t parse_trait(const std::string& s) {
  const auto& names = trait_names();
  for (std::size_t k = 0; k < kTraitCount; ++k) {
    if (s == names[k]) return k;
  }
  if (s.size() == 1 && s[0] >= '0' && s[0] <= '4') return static_cast<std::size_t>(s[0] - '0');
  throw UsageError("trait must be 0-4 or one of openness, agreeableness, conscientiousness, "
                   "neuroticism, extraversion; got '" + s + "'");
}

std::string trait_line(const std::string& id, const TraitVector& v) {
  char buf[128];
  std::snprintf(buf, sizeof buf, ",%.6f,%.6f,%.6f,%.6f,%.6f", v[0], v[1], v[2], v[3], v[4]);
  return id + buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_file_atomic(path, text.data(), text.size());
}

struct Common {
  std::uint64_t seed = 0;
  std::size_t threads = 0;
  std::string config;
};

void add_common(CLI::App& sub, Common& c) {
  sub.add_option("--seed", c.seed, "Seed for every stochastic step");
  sub.add_option("--threads", c.threads, "Worker cap (falls back to DI_THREADS)");
  sub.add_option("--config", c.config, "File of key = value defaults");
}

const std::map<std::string, Split> kSplits{
    {"train", Split::train}, {"validation", Split::validation}, {"test", Split::test}};

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Audiovisual residual network for apparent-personality regression", "deepimp"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  Common common;

  // synth
  SynthOptions synth;
  std::string synth_out;
  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic dataset");
  add_common(*synth_cmd, common);
  synth_cmd->add_option("--n", synth.count, "Number of clips")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--out", synth_out, "Output directory")->required();
  synth_cmd->add_option("--seconds", synth.seconds, "Clip length")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--fps", synth.fps, "Frames per second")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--height", synth.height, "Frame height")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--width", synth.width, "Frame width")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--validation", synth.validation, "Trailing clips tagged validation");

  // train / finetune
  TrainConfig tc;
  std::string manifest_path, out_dir, resume, checkpoint_path, trait_text;
  std::size_t period = 300;
  auto add_train_flags = [&](CLI::App& sub) {
    add_common(sub, common);
    sub.add_option("--manifest", manifest_path, "Dataset manifest")->required();
    sub.add_option("--out", out_dir, "Output directory")->required();
    sub.add_option("--epochs", tc.epochs, "Epochs")->check(CLI::PositiveNumber);
    sub.add_option("--batch-size", tc.batch_size, "Mini-batch size (>= 2)")->check(CLI::Range(2, 1 << 20));
    sub.add_option("--checkpoint-every", tc.checkpoint_every, "Checkpoint cadence in epochs");
    sub.add_option("--period", period, "Epochs between learning-rate decays")->check(CLI::PositiveNumber);
  };
  auto* train_cmd = app.add_subcommand("train", "Train the five-trait network");
  add_train_flags(*train_cmd);
  train_cmd->add_flag("--mini", tc.mini, "Miniature architecture");
  train_cmd->add_option("--resume", resume, "Checkpoint to resume from");

  auto* finetune_cmd = app.add_subcommand("finetune", "Fine-tune a single-trait head");
  add_train_flags(*finetune_cmd);
  finetune_cmd->add_option("--checkpoint", checkpoint_path, "Base checkpoint")->required();
  finetune_cmd->add_option("--trait", trait_text, "Trait index 0-4 or name")->required();

  // eval / predict / extract-features
  std::string split_text = "validation";
  EvalOptions eval_opts;
  std::string report_path;
  bool mini_flag = false;
  auto add_inference_flags = [&](CLI::App& sub) {
    add_common(sub, common);
    sub.add_option("--checkpoint", checkpoint_path, "Network checkpoint")->required();
    sub.add_option("--manifest", manifest_path, "Dataset manifest")->required();
    sub.add_option("--split", split_text, "train, validation or test")
        ->check(CLI::IsMember({"train", "validation", "test"}));
    sub.add_option("--frame-stride", eval_opts.inference.frame_stride, "Use every n-th frame")
        ->check(CLI::PositiveNumber);
  };
  auto* eval_cmd = app.add_subcommand("eval", "Score a checkpoint on a split");
  add_inference_flags(*eval_cmd);
  eval_cmd->add_option("--out", report_path, "Report CSV (default: next to the checkpoint)");
  auto* predict_cmd = app.add_subcommand("predict", "Print per-clip trait predictions");
  add_inference_flags(*predict_cmd);
  auto* extract_cmd = app.add_subcommand("extract-features", "Cache per-second features");
  add_inference_flags(*extract_cmd);
  extract_cmd->add_option("--out", report_path, "Feature cache file")->required();

  // recurrent head
  RnnTrainConfig rc;
  std::string features_path, head_path;
  std::size_t hidden = kRnnHidden;
  double dropout = 0.5;
  auto* train_rnn_cmd = app.add_subcommand("train-rnn", "Train the recurrent head on cached features");
  add_common(*train_rnn_cmd, common);
  train_rnn_cmd->add_option("--features", features_path, "Feature cache")->required();
  train_rnn_cmd->add_option("--out", head_path, "Head output file")->required();
  train_rnn_cmd->add_option("--epochs", rc.epochs, "Epochs")->check(CLI::PositiveNumber);
  train_rnn_cmd->add_option("--batch-size", rc.batch_size, "Sequences per step")->check(CLI::PositiveNumber);
  train_rnn_cmd->add_option("--truncation", rc.truncation, "Backpropagation window")->check(CLI::PositiveNumber);
  train_rnn_cmd->add_option("--hidden", hidden, "LSTM units per layer")->check(CLI::PositiveNumber);
  train_rnn_cmd->add_option("--dropout", dropout, "Dropout rate")->check(CLI::Range(0.0, 0.99));
  train_rnn_cmd->add_option("--alpha", rc.adam.alpha, "Adam step size")->check(CLI::PositiveNumber);

  auto* predict_rnn_cmd = app.add_subcommand("predict-rnn", "Print recurrent-head predictions");
  add_inference_flags(*predict_rnn_cmd);
  predict_rnn_cmd->add_option("--head", head_path, "Recurrent head file")->required();

  // gradcheck
  GradcheckOptions gc;
  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient table");
  add_common(*gradcheck_cmd, common);
  gradcheck_cmd->add_flag("--mini", mini_flag, "Miniature network (the only size checked)");
  gradcheck_cmd->add_option("--samples", gc.network_samples, "Entries per network tensor (0: all)");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return ok;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return ok;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return usage;
  }

  CLI::App* sub = app.get_subcommands().front();
  try {
    if (!common.config.empty()) apply_config(*sub, common.config);
    const std::size_t threads = resolve_threads(common.threads);
    eval_opts.threads = threads;

    if (sub == synth_cmd) {
      synth.seed = common.seed;
      const Manifest m = synth_dataset(synth, synth_out);
      out << "wrote " << m.rows.size() << " clips to " << synth_out << "\n";
      return ok;
    }

    if (sub == train_cmd || sub == finetune_cmd) {
      tc.seed = common.seed;
      tc.out_dir = out_dir;
      tc.schedule.period = static_cast<std::uint32_t>(period);
      const Manifest manifest = load_manifest(manifest_path);
      TrainResult result;
      if (sub == train_cmd) {
        std::optional<Checkpoint> start;
        if (!resume.empty()) {
          start = load_checkpoint(resume, tc.architecture());
        }
        result = train(tc, manifest, std::move(start));
      } else {
        const std::size_t trait = parse_trait(trait_text);
        const Checkpoint base = load_checkpoint(checkpoint_path);
        result = finetune_per_trait(base, trait, tc, load_split(manifest, Split::train));
      }
      const auto& last = result.log.empty() ? EpochLog{} : result.log.back();
      out << "epochs " << result.checkpoint.epoch << ", final train_mae " << last.train_mae
          << ", checkpoint " << (std::filesystem::path(out_dir) / "final.bin").string() << "\n";
      return ok;
    }

    if (sub == eval_cmd || sub == predict_cmd || sub == extract_cmd || sub == predict_rnn_cmd) {
      const Split split = kSplits.at(split_text);
      const Manifest manifest = load_manifest(manifest_path);
      const Checkpoint ckpt = load_checkpoint(checkpoint_path);
      if (sub == eval_cmd) {
        const EvalReport report = evaluate(ckpt.params, manifest, split, eval_opts);
        for (const auto& f : report.failures) err << "excluded " << f << "\n";
        const std::string csv = format_report_csv(report);
        const std::filesystem::path path =
            report_path.empty() ? std::filesystem::path(checkpoint_path).parent_path() /
                                      ("eval_" + split_text + ".csv")
                                : std::filesystem::path(report_path);
        write_text(path, csv);
        out << csv;
        return ok;
      }
      if (sub == predict_cmd) {
        if (ckpt.params.arch.outputs != kTraitCount) {
          throw UsageError("predict needs a five-output checkpoint");
        }
        for (const auto& p : predict_split(ckpt.params, manifest, split, eval_opts)) {
          if (!p.output) {
            err << "excluded " << p.clip_id << ": " << p.error << "\n";
            continue;
          }
          TraitVector v;
          for (std::size_t k = 0; k < kTraitCount; ++k) v[k] = (*p.output)[k];
          out << trait_line(p.clip_id, v) << "\n";
        }
        return ok;
      }
      if (sub == extract_cmd) {
        const FeatureSet set = extract_feature_set(manifest, split, ckpt.params, threads);
        save_feature_cache(set, report_path);
        out << "wrote features for " << set.features.size() << " clips to " << report_path << "\n";
        return ok;
      }
      const RnnHeadParams<float> head = load_rnn_head(head_path);
      const auto rows = manifest.rows_for(split);
      std::vector<std::optional<TraitVector>> preds(rows.size());
      std::vector<std::string> errors(rows.size());
      parallel_for(rows.size(), threads, [&](std::size_t i) {
        try {
          preds[i] = predict_rnn(load_clip(manifest.resolve(rows[i])), ckpt.params, head);
        } catch (const DataError& e) {
          errors[i] = e.what();
        }
      });
      for (std::size_t i = 0; i < rows.size(); ++i) {
        if (preds[i]) {
          out << trait_line(rows[i].clip_id, *preds[i]) << "\n";
        } else {
          err << "excluded " << rows[i].clip_id << ": " << errors[i] << "\n";
        }
      }
      return ok;
    }

    if (sub == train_rnn_cmd) {
      rc.seed = common.seed;
      const FeatureSet data = load_feature_cache(features_path);
      if (data.features.empty()) throw DataError("feature cache is empty");
      auto head = build_rnn_head(data.features.front().extent(1), common.seed, hidden, kTraitCount, dropout);
      const RnnTrainResult result = train_rnn(data, std::move(head), rc);
      save_rnn_head(result.params, head_path);
      out << "epochs " << rc.epochs << ", final train_mae " << result.epoch_loss.back()
          << ", eval-mode mae " << rnn_mae(data, result.params) << "\n";
      return ok;
    }

    if (sub == gradcheck_cmd) {
      gc.seed = common.seed;
      const auto rows = run_gradcheck(gc);
      out << format_gradcheck(rows);
      const bool pass = std::all_of(rows.begin(), rows.end(), [](const auto& r) { return r.pass(); });
      return pass ? ok : numeric_failure;
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return usage;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return usage;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return numeric_failure;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return data_error;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return usage;
  } catch (const std::exception& e) {
    err << "data error: " << e.what() << "\n";
    return data_error;
  }
  return usage;
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace deepimp::cli
