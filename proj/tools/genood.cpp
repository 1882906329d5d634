#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "genood/config.hpp"
#include "genood/detectors.hpp"
#include "genood/dump.hpp"
#include "genood/errors.hpp"
#include "genood/extract.hpp"
#include "genood/metrics.hpp"
#include "genood/protocol.hpp"
#include "genood/synthetic.hpp"
#include "genood/tokenizer.hpp"

namespace fs = std::filesystem;
using namespace genood;

namespace {

// Bad flag values; reported with exit status 1 like parse errors.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <typename F>
auto flag_value(F&& convert) {
  try {
    return convert();
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
}

std::string fmt(double v, int precision = 6) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

void ensure_dir(const fs::path& dir) {
  if (!dir.empty()) fs::create_directories(dir);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
}

std::vector<double> read_score_values(const fs::path& path, const std::string& split) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::string first;
  std::getline(in, first);
  std::vector<double> values;
  if (first.rfind("id\tsplit\tdetector\tscore", 0) == 0) {
    for (const auto& row : detectors::read_scores(path)) {
      if (split.empty() || row.split == split) values.push_back(row.score);
    }
  } else {
    in.seekg(0);
    std::string token;
    while (in >> token) {
      try {
        size_t used = 0;
        values.push_back(std::stod(token, &used));
        if (used != token.size()) throw std::invalid_argument(token);
      } catch (const std::exception&) {
        throw FormatError("'" + path.string() + "': not a number: '" + token + "'");
      }
    }
  }
  if (values.empty()) throw EmptyInputError("no scores in '" + path.string() + "'");
  return values;
}

// Flags shared by train, bench and compare-tuning; each overrides the value
// loaded from --config when given.
struct RunFlags {
  std::string config_path;
  std::string regime, shots, seeds, detectors, mode, base_model, out_dir;
  int64_t task_seed = -1;
  int epochs = 0, batch_size = 0, pretrain_epochs = -1;
  double lr = 0.0;
  bool lora = false, track_curves = false;

  void add_to(CLI::App* app, bool with_seeds) {
    app->add_option("--config", config_path, "run config file (key = value)");
    app->add_option("--regime", regime, "far | near");
    app->add_option("--shots", shots, "1 | 5 | 10 | full");
    if (with_seeds) app->add_option("--seeds", seeds, "comma-separated seed list");
    app->add_option("--detectors", detectors, "comma-separated detector list");
    app->add_option("--mode", mode, "generative | discriminative");
    app->add_option("--task-seed", task_seed, "seed of the synthetic corpus");
    app->add_option("--epochs", epochs, "training epochs");
    app->add_option("--lr", lr, "peak learning rate");
    app->add_option("--batch-size", batch_size, "examples per optimizer step");
    app->add_flag("--lora", lora, "train low-rank adapters only");
    app->add_option("--base-model", base_model, "start from this checkpoint");
    app->add_option("--pretrain-epochs", pretrain_epochs,
                    "epochs of base-model pretraining when no --base-model");
    app->add_flag("--track-curves", track_curves, "record per-epoch OOD metrics");
    app->add_option("--out-dir", out_dir, "output directory")->required();
  }

  RunConfig resolve() const {
    RunConfig c = config_path.empty() ? RunConfig{} : RunConfig::load(config_path);
    flag_value([&] {
      if (!regime.empty()) c.regime = parse_regime(regime);
      if (!shots.empty()) c.shots = Shots::parse(shots);
      if (!seeds.empty()) {
        c.seeds.clear();
        std::stringstream ss(seeds);
        std::string s;
        while (std::getline(ss, s, ',')) {
          try {
            c.seeds.push_back(std::stoi(s));
          } catch (const std::exception&) {
            throw ConfigError("--seeds: not an integer: '" + s + "'");
          }
        }
      }
      if (!detectors.empty()) {
        c.detectors.clear();
        std::stringstream ss(detectors);
        std::string s;
        while (std::getline(ss, s, ',')) c.detectors.push_back(parse_detector(s));
      }
      if (!mode.empty()) c.train.mode = parse_tuning_mode(mode);
      if (task_seed >= 0) c.task_seed = static_cast<uint64_t>(task_seed);
      if (epochs > 0) c.train.epochs = epochs;
      if (lr > 0.0) c.train.lr = lr;
      if (batch_size > 0) c.train.batch_size = batch_size;
      if (lora) c.train.lora = true;
      if (!base_model.empty()) c.base_model = base_model;
      if (pretrain_epochs >= 0) c.pretrain_epochs = pretrain_epochs;
      if (track_curves) c.track_ood_curves = true;
      c.out_dir = out_dir;
      c.validate();
      return 0;
    });
    return c;
  }
};

toylm::ToyLM base_model_for(const RunConfig& config) {
  std::vector<toylm::CurvePoint> curve;
  auto base = bench::build_base_model(config, &curve);
  if (config.base_model.empty()) {
    toylm::save_checkpoint(base, config.out_dir / "base_model.gtlm");
    if (!curve.empty()) toylm::write_curve(config.out_dir / "pretrain_curve.tsv", curve);
  }
  return base;
}

int cmd_inspect(const std::string& path) {
  const auto dump = read_dump(path);
  std::map<int32_t, size_t> counts;
  size_t unlabeled = 0;
  for (const auto& r : dump.records) {
    if (r.label_index) {
      ++counts[*r.label_index];
    } else {
      ++unlabeled;
    }
  }
  std::cout << "format: EDF1 v" << dump.format_version << "\n"
            << "n: " << dump.size() << "\n"
            << "d: " << dump.dim << "\n"
            << "K: " << dump.num_classes() << "\n";
  for (size_t k = 0; k < dump.num_classes(); ++k) {
    std::cout << "class " << k << ": " << dump.class_names[k] << " ("
              << counts[static_cast<int32_t>(k)] << " records)\n";
  }
  std::cout << "unlabeled: " << unlabeled << "\n";
  return 0;
}

struct FitFlags {
  std::string manifest, detector, out_dir;
  int shots = 0;
  uint64_t seed = 1;
};

EmbeddingDump fit_dump_for(const DatasetManifest& m, const FitFlags& f) {
  auto fit = read_dump(m.fit_split == FitSplit::kTrain ? m.id_train : m.id_val);
  if (f.shots > 0) fit = subsample_per_class(fit, f.shots, f.seed);
  return fit;
}

int cmd_fit(const FitFlags& f) {
  const auto kind = flag_value([&] { return parse_detector(f.detector); });
  const auto manifest = DatasetManifest::load(f.manifest);
  const auto fit = fit_dump_for(manifest, f);
  const auto det = detectors::fit_detector(kind, fit);
  std::ostringstream os;
  os << "detector = " << to_string(kind) << "\n"
     << "fit_split = " << to_string(manifest.fit_split) << "\n"
     << "fit_records = " << fit.size() << "\n"
     << "dim = " << fit.dim << "\n";
  if (const auto* g = std::get_if<detectors::GaussianBank>(&det.state)) {
    os << "classes = " << g->classes.size() << "\n"
       << "shrinkage = " << fmt(g->shrinkage, 17) << "\n";
  } else if (const auto* c = std::get_if<detectors::CosineBank>(&det.state)) {
    os << "bank_size = " << c->bank.rows() << "\n";
  }
  ensure_dir(f.out_dir);
  write_text(fs::path(f.out_dir) / ("fit_" + to_string(kind) + ".txt"), os.str());
  std::cout << os.str();
  return 0;
}

int cmd_score(const FitFlags& f) {
  const auto kind = flag_value([&] { return parse_detector(f.detector); });
  const auto manifest = DatasetManifest::load(f.manifest);
  manifest.check_consistency();
  const auto det = detectors::fit_detector(kind, fit_dump_for(manifest, f));
  const std::string name = to_string(kind);
  std::vector<detectors::ScoreRow> rows;
  auto score_split = [&](const fs::path& path, const std::string& split) {
    const auto dump = read_dump(path);
    auto scores = detectors::score_records(det, dump);
    for (size_t i = 0; i < scores.size(); ++i) {
      rows.push_back({dump.records[i].id, split, name, scores[i]});
    }
    return scores;
  };
  const auto id_scores = score_split(manifest.id_test, "id_test");
  std::cout << std::left << std::setw(16) << "ood_set" << std::right << std::setw(10)
            << "AUROC" << std::setw(10) << "FAR@95" << std::setw(10) << "AUPR" << "\n"
            << std::fixed << std::setprecision(4);
  for (const auto& [set, path] : manifest.ood_sets) {
    const auto ood = score_split(path, "ood." + set);
    const auto m = metrics::evaluate(id_scores, ood);
    std::cout << std::left << std::setw(16) << set << std::right << std::setw(10) << m.auroc
              << std::setw(10) << m.far95 << std::setw(10) << m.aupr << "\n";
  }
  ensure_dir(f.out_dir);
  detectors::write_scores(fs::path(f.out_dir) / (name + ".scores.tsv"), rows);
  return 0;
}

int cmd_metrics(const std::string& id_path, const std::string& ood_path,
                const std::string& id_split, const std::string& ood_split) {
  const auto id = read_score_values(id_path, id_split);
  const auto ood = read_score_values(ood_path, ood_split);
  const auto m = metrics::evaluate(id, ood);
  std::cout << "AUROC " << fmt(m.auroc) << "\n"
            << "FAR@95 " << fmt(m.far95) << "\n"
            << "AUPR " << fmt(m.aupr) << "\n";
  return 0;
}

int cmd_anisotropy(const std::string& path) {
  const auto dump = read_dump(path);
  std::cout << fmt(metrics::anisotropy(detectors::embedding_matrix(dump)), 8) << "\n";
  return 0;
}

int cmd_train(const RunFlags& flags, int seed) {
  const auto config = flags.resolve();
  ensure_dir(config.out_dir);
  const auto task = bench::generate_task(config.regime, config.task_seed);
  auto model = base_model_for(config);
  auto train_set = task.train;
  auto val_set = task.val;
  if (!config.shots.is_full()) {
    train_set = bench::subsample_shots(task.train, *config.shots.per_class,
                                       static_cast<uint64_t>(seed));
    val_set = bench::subsample_shots(task.val, *config.shots.per_class,
                                     static_cast<uint64_t>(seed) + 0x9e37);
  }
  const auto map = ClassTokenMap::build(
      task.class_names, [](const std::string& s) { return toylm::byte_tokenize(s); });
  const auto result = toylm::train(model, train_set, val_set, map, config.train,
                                   static_cast<uint64_t>(seed));
  toylm::save_checkpoint(model, config.out_dir / "model.gtlm");
  toylm::write_curve(config.out_dir / "curve.tsv", result.curve);
  const double acc = model.has_classifier_head()
                         ? toylm::discriminative_accuracy(model, task.test)
                         : toylm::generative_accuracy(model, task.test, map);
  std::cout << "epochs_run " << result.epochs_run << "\n"
            << "best_epoch " << result.best_epoch << "\n"
            << "best_val_accuracy " << fmt(result.best_validation) << "\n"
            << "test_accuracy " << fmt(acc) << "\n";
  return 0;
}

int cmd_bench(const RunFlags& flags) {
  const auto config = flags.resolve();
  ensure_dir(config.out_dir);
  const auto task = bench::generate_task(config.regime, config.task_seed);
  const auto report = bench::run_protocol(task, config, base_model_for(config));
  std::cout << report.to_table();
  return 0;
}

int cmd_compare(const RunFlags& flags) {
  const auto config = flags.resolve();
  ensure_dir(config.out_dir);
  const auto task = bench::generate_task(config.regime, config.task_seed);
  const auto cmp = bench::compare_tuning_modes(task, config, base_model_for(config));
  std::cout << "late-epoch AUROC (last 5 epochs, mean over seeds and OOD sets)\n";
  for (auto kind : config.detectors) {
    std::cout << std::left << std::setw(12) << to_string(kind) << " generative "
              << fmt(cmp.late_epoch_auroc(TuningMode::kGenerative, kind), 4)
              << "  discriminative "
              << fmt(cmp.late_epoch_auroc(TuningMode::kDiscriminative, kind), 4) << "\n";
  }
  return 0;
}

int cmd_quantize(const std::string& path, const std::string& mode, const std::string& out_dir) {
  const auto precision = flag_value([&] { return toylm::parse_precision(mode); });
  const auto dump = read_dump(path);
  const auto q = toylm::quantize_sim(dump, precision);
  double max_err = 0.0;
  for (size_t i = 0; i < dump.records.size(); ++i) {
    const auto& a = dump.records[i].embedding;
    const auto& b = q.records[i].embedding;
    for (size_t j = 0; j < a.size(); ++j) {
      max_err = std::max(max_err, std::abs(static_cast<double>(a[j]) - b[j]));
    }
  }
  ensure_dir(out_dir);
  const fs::path out = fs::path(out_dir) / (fs::path(path).stem().string() + "." + mode + ".edf1");
  write_dump(q, out);
  std::cout << "wrote " << out.string() << "\n"
            << "max_abs_embedding_error " << fmt(max_err) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Post-hoc OOD detection toolkit for generative classifiers"};
  app.require_subcommand(1);

  std::string inspect_path;
  auto* inspect = app.add_subcommand("inspect", "print the header and label counts of a dump");
  inspect->add_option("dump", inspect_path, "EDF1 file")->required();

  FitFlags fit_flags;
  auto add_fit_flags = [&](CLI::App* cmd) {
    cmd->add_option("--manifest", fit_flags.manifest, "dataset manifest")->required();
    cmd->add_option("--detector", fit_flags.detector, "msp_renorm | energy | maha | cosine")
        ->required();
    cmd->add_option("--shots", fit_flags.shots, "fit on this many records per class");
    cmd->add_option("--seed", fit_flags.seed, "seed for --shots subsampling");
    cmd->add_option("--out-dir", fit_flags.out_dir, "output directory")->required();
  };
  auto* fit = app.add_subcommand("fit", "fit a detector on the manifest's fit split");
  add_fit_flags(fit);
  auto* score = app.add_subcommand("score", "fit, then score id_test and every OOD set");
  add_fit_flags(score);

  std::string id_path, ood_path, id_split, ood_split;
  auto* metrics_cmd = app.add_subcommand("metrics", "AUROC, FAR@95 and AUPR of two score files");
  metrics_cmd->add_option("--id", id_path, "ID scores (score TSV or one number per line)")
      ->required();
  metrics_cmd->add_option("--ood", ood_path, "OOD scores")->required();
  metrics_cmd->add_option("--id-split", id_split, "only rows of this split (score TSV)");
  metrics_cmd->add_option("--ood-split", ood_split, "only rows of this split (score TSV)");

  std::string aniso_path;
  auto* aniso = app.add_subcommand("anisotropy", "mean pairwise cosine of a dump's embeddings");
  aniso->add_option("dump", aniso_path, "EDF1 file")->required();

  RunFlags train_flags;
  int train_seed = 1;
  auto* train = app.add_subcommand("train", "fine-tune the toy model on a synthetic task");
  train_flags.add_to(train, false);
  train->add_option("--seed", train_seed, "training and subsampling seed");

  RunFlags bench_flags;
  auto* bench_cmd = app.add_subcommand("bench", "zero-grad vs fine-tuned protocol over seeds");
  bench_flags.add_to(bench_cmd, true);

  RunFlags compare_flags;
  auto* compare = app.add_subcommand("compare-tuning",
                                     "generative vs discriminative tuning curves");
  compare_flags.add_to(compare, true);

  std::string q_path, q_mode, q_out;
  auto* quantize = app.add_subcommand("quantize", "simulate reduced-precision storage of a dump");
  quantize->add_option("dump", q_path, "EDF1 file")->required();
  quantize->add_option("--mode", q_mode, "f32 | f16_sim | int8_sim")->required();
  quantize->add_option("--out-dir", q_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  }

  try {
    if (*inspect) return cmd_inspect(inspect_path);
    if (*fit) return cmd_fit(fit_flags);
    if (*score) return cmd_score(fit_flags);
    if (*metrics_cmd) return cmd_metrics(id_path, ood_path, id_split, ood_split);
    if (*aniso) return cmd_anisotropy(aniso_path);
    if (*train) return cmd_train(train_flags, train_seed);
    if (*bench_cmd) return cmd_bench(bench_flags);
    if (*compare) return cmd_compare(compare_flags);
    if (*quantize) return cmd_quantize(q_path, q_mode, q_out);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const genood::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
