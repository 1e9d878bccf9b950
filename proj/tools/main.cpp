// Command line for the readmission pipeline: synthetic cohort generation,
// training, evaluation, modality ablation and gradient verification.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "readmit/config.hpp"
#include "readmit/errors.hpp"
#include "readmit/gradcheck.hpp"
#include "readmit/metrics.hpp"
#include "readmit/model.hpp"
#include "readmit/optim.hpp"

namespace {

using readmit::RunConfig;
using json = nlohmann::json;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitGradcheck = 4;

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw readmit::DataError("cannot open '" + path + "' for writing");
  out << text;
}

// The merged config lands beside each command's outputs, making every run
// replayable.
void write_effective_config(const RunConfig& cfg, const std::string& command) {
  std::filesystem::create_directories(cfg.paths.out_dir);
  write_text(cfg.resolve(command + ".config.json"), cfg.to_json_string());
}

std::unique_ptr<readmit::EmbeddingProvider> make_provider(const RunConfig& cfg) {
  if (!cfg.paths.note_embeddings.empty())
    return std::make_unique<readmit::FileEmbeddings>(cfg.resolve(cfg.paths.note_embeddings));
  return std::make_unique<readmit::HashingEmbedder>(cfg.d_note,
                                                    readmit::Rng(cfg.seed).child(200).seed());
}

readmit::Model build_model(const RunConfig& cfg, const readmit::Cohort& cohort,
                           const readmit::EmbeddingProvider& provider) {
  int d_ehr = 0, d_img = 0;
  if (cfg.model.use_ehr) d_ehr = static_cast<int>(cohort.admissions.at(0).ehr.at(0).size());
  if (cfg.model.use_image) d_img = static_cast<int>(cohort.admissions.at(0).image.at(0).size());
  return readmit::Model(cfg.model, d_ehr, d_img, provider.dim(), cfg.seed);
}

readmit::PreparedBatch prepare_batch(const RunConfig& cfg, const readmit::Model& model,
                                     const readmit::Cohort& cohort,
                                     const readmit::EmbeddingProvider& provider) {
  std::vector<std::string> order;
  for (const auto& a : cohort.admissions) order.push_back(a.admission_id);
  readmit::ModalityFeatures ehr_feats, img_feats;
  const readmit::ModalityFeatures* ehr_ptr = nullptr;
  const readmit::ModalityFeatures* img_ptr = nullptr;
  if (cfg.model.use_ehr && !cfg.paths.ehr_features.empty()) {
    ehr_feats = readmit::ingest_modality_features(cfg.resolve(cfg.paths.ehr_features),
                                                  readmit::Modality::ehr, model.d_ehr_raw(), order);
    ehr_ptr = &ehr_feats;
  }
  if (cfg.model.use_image && !cfg.paths.image_features.empty()) {
    img_feats =
        readmit::ingest_modality_features(cfg.resolve(cfg.paths.image_features),
                                          readmit::Modality::image, model.d_img_raw(), order);
    img_ptr = &img_feats;
  }
  return model.prepare(cohort, provider, ehr_ptr, img_ptr);
}

int cmd_generate(const RunConfig& cfg) {
  const readmit::Cohort cohort = readmit::generate_synthetic_cohort(cfg.synth);
  std::filesystem::create_directories(cfg.paths.out_dir);
  readmit::save_cohort(cohort, cfg.resolve(cfg.paths.cohort));
  write_effective_config(cfg, "generate");
  int pos = 0;
  for (const auto& a : cohort.admissions) pos += a.label;
  std::cout << "wrote " << cohort.size() << " admissions (" << pos << " positive) to "
            << cfg.resolve(cfg.paths.cohort) << "\n";
  return kExitOk;
}

readmit::MetricsReport test_report(const readmit::Model& model,
                                   const readmit::PreparedBatch& batch) {
  const auto scores = readmit::predict_scores(model, batch);
  std::vector<double> s;
  std::vector<int> y;
  for (int i : batch.test_idx) {
    s.push_back(scores[static_cast<std::size_t>(i)]);
    y.push_back(batch.label_vec[static_cast<std::size_t>(i)]);
  }
  return readmit::evaluate_scores(s, y);
}

int cmd_train(const RunConfig& cfg) {
  const readmit::Cohort cohort = readmit::load_cohort(cfg.resolve(cfg.paths.cohort));
  const auto provider = make_provider(cfg);
  readmit::Model model = build_model(cfg, cohort, *provider);
  const readmit::PreparedBatch batch = prepare_batch(cfg, model, cohort, *provider);

  const readmit::TrainResult result = readmit::train_model(model, batch, cfg.train);

  std::filesystem::create_directories(cfg.paths.out_dir);
  model.params().restore(result.best_params);
  model.save_checkpoint(cfg.resolve(cfg.paths.checkpoint));
  readmit::write_history_jsonl(result.history, cfg.resolve(cfg.paths.history));
  write_effective_config(cfg, "train");

  if (result.aborted) {
    std::cerr << "training aborted: " << result.abort_reason
              << " (last good checkpoint written)\n";
    return kExitNumeric;
  }
  std::cout << "trained " << result.history.size() << " epochs; best val AUC "
            << std::setprecision(4) << result.best_val_auc << " at epoch " << result.best_epoch
            << "; checkpoint " << cfg.resolve(cfg.paths.checkpoint) << "\n";
  return kExitOk;
}

int cmd_evaluate(RunConfig cfg, bool seed_given) {
  const readmit::Cohort cohort = readmit::load_cohort(cfg.resolve(cfg.paths.cohort));
  readmit::Model model = readmit::Model::load_checkpoint(cfg.resolve(cfg.paths.checkpoint));
  // embeddings must match training; default to the checkpoint's seed
  if (!seed_given) {
    cfg.seed = model.seed();
    cfg.synth.seed = cfg.seed;
    cfg.train.seed = cfg.seed;
  }
  RunConfig eval_cfg = cfg;
  eval_cfg.model = model.config();
  eval_cfg.d_note = model.d_note();  // hashing embedder must match training width
  const auto provider = make_provider(eval_cfg);
  const readmit::PreparedBatch batch = prepare_batch(eval_cfg, model, cohort, *provider);
  readmit::PrecisionGuard guard(cfg.train.precision);
  const readmit::MetricsReport report = test_report(model, batch);

  std::filesystem::create_directories(cfg.paths.out_dir);
  write_text(cfg.resolve(cfg.paths.report), report.to_json() + "\n");
  write_effective_config(cfg, "evaluate");
  std::cout << report.to_json() << "\n";
  return kExitOk;
}

int cmd_ablate(const RunConfig& cfg) {
  const readmit::Cohort cohort = readmit::load_cohort(cfg.resolve(cfg.paths.cohort));
  struct Variant {
    std::string name;
    bool ehr, image, note;
  };
  const std::vector<Variant> variants = {{"full", true, true, true},
                                         {"ehr_only", true, false, false},
                                         {"image_only", false, true, false},
                                         {"note_only", false, false, true}};
  json out;
  out["seed"] = cfg.seed;
  std::cout << std::left << std::setw(12) << "model" << std::setw(20) << "modalities"
            << std::setw(26) << "test AUC [95% CI]" << "test ACC\n";
  for (const auto& v : variants) {
    RunConfig run = cfg;
    run.model.use_ehr = v.ehr;
    run.model.use_image = v.image;
    run.model.use_note = v.note;
    const auto provider = make_provider(run);
    readmit::Model model = build_model(run, cohort, *provider);
    const readmit::PreparedBatch batch = prepare_batch(run, model, cohort, *provider);
    const readmit::TrainResult result = readmit::train_model(model, batch, run.train);
    if (result.aborted) {
      std::cerr << "ablation variant '" << v.name << "' aborted: " << result.abort_reason << "\n";
      return kExitNumeric;
    }
    model.params().restore(result.best_params);
    readmit::PrecisionGuard guard(run.train.precision);
    const readmit::MetricsReport report = test_report(model, batch);

    json r;
    r["modalities"] = std::string(v.ehr ? "ehr+" : "") + (v.image ? "image+" : "") +
                      (v.note ? "note+" : "");
    r["best_val_auc"] = result.best_val_auc;
    r["best_epoch"] = result.best_epoch;
    r["epochs_run"] = result.history.size();
    r["test_auc"] = report.auc;
    r["test_ci"] = {report.ci_low, report.ci_high};
    r["test_acc"] = report.acc;
    out["variants"][v.name] = r;

    std::ostringstream ci;
    ci << std::fixed << std::setprecision(4) << report.auc << " [" << report.ci_low << ", "
       << report.ci_high << "]";
    std::string mods = r["modalities"].get<std::string>();
    if (!mods.empty()) mods.pop_back();
    std::cout << std::left << std::setw(12) << v.name << std::setw(20) << mods << std::setw(26)
              << ci.str() << std::fixed << std::setprecision(4) << report.acc << "\n";
  }
  std::filesystem::create_directories(cfg.paths.out_dir);
  write_text(cfg.resolve(cfg.paths.ablation), out.dump(2) + "\n");
  write_effective_config(cfg, "ablate");
  return kExitOk;
}

int cmd_gradcheck(int seeds) {
  std::string log;
  const bool ok = readmit::run_gradcheck_suite(seeds, log);
  if (!ok) {
    std::cerr << "gradient checks FAILED:\n" << log;
    return kExitGradcheck;
  }
  std::cout << "gradient checks passed (" << seeds << " seeds)\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multimodal spatiotemporal graph-transformer for readmission prediction"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--set", overrides, "override a config key, e.g. --set model.d=32");

  // common direct flags, applied after --set
  struct Flags {
    std::optional<std::uint64_t> seed;
    std::optional<double> lr;
    std::optional<int> epochs;
    std::optional<int> n;
    std::optional<std::string> cohort, checkpoint, report, out_dir, precision;
  } flags;
  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--seed", flags.seed, "root seed for every random stream");
    cmd->add_option("--out-dir", flags.out_dir, "directory for outputs");
    cmd->add_option("--cohort", flags.cohort, "cohort JSONL path");
  };

  auto* gen = app.add_subcommand("generate", "write a synthetic cohort");
  add_common(gen);
  gen->add_option("--n", flags.n, "number of admissions");

  auto* train = app.add_subcommand("train", "train on a cohort file");
  add_common(train);
  train->add_option("--lr", flags.lr, "learning rate");
  train->add_option("--epochs", flags.epochs, "epoch budget");
  train->add_option("--precision", flags.precision, "f32 or f64");
  train->add_option("--checkpoint", flags.checkpoint, "checkpoint output path");

  auto* eval = app.add_subcommand("evaluate", "report test-split metrics for a checkpoint");
  add_common(eval);
  eval->add_option("--checkpoint", flags.checkpoint, "checkpoint path");
  eval->add_option("--report", flags.report, "report output path");

  auto* ablate = app.add_subcommand("ablate", "train unimodal and full variants, same seed");
  add_common(ablate);
  ablate->add_option("--lr", flags.lr, "learning rate");
  ablate->add_option("--epochs", flags.epochs, "epoch budget per variant");
  ablate->add_option("--precision", flags.precision, "f32 or f64");

  int gradcheck_seeds = 20;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  grad->add_option("--seeds", gradcheck_seeds, "random seeds per op family");

  auto* dump = app.add_subcommand("dump-config", "print the merged effective config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitUsage;
  }

  try {
    RunConfig cfg = readmit::load_run_config(config_path, overrides);
    if (flags.seed) {
      cfg.seed = *flags.seed;
      cfg.synth.seed = *flags.seed;
      cfg.train.seed = *flags.seed;
    }
    if (flags.lr) cfg.train.lr = *flags.lr;
    if (flags.epochs) cfg.train.epochs = *flags.epochs;
    if (flags.n) cfg.synth.n_admissions = *flags.n;
    if (flags.cohort) cfg.paths.cohort = *flags.cohort;
    if (flags.checkpoint) cfg.paths.checkpoint = *flags.checkpoint;
    if (flags.report) cfg.paths.report = *flags.report;
    if (flags.out_dir) cfg.paths.out_dir = *flags.out_dir;
    if (flags.precision) cfg.train.precision = readmit::precision_from_name(*flags.precision);
    cfg.model.validate();
    cfg.train.validate();

    if (gen->parsed()) return cmd_generate(cfg);
    if (train->parsed()) return cmd_train(cfg);
    if (eval->parsed()) return cmd_evaluate(cfg, static_cast<bool>(flags.seed));
    if (ablate->parsed()) return cmd_ablate(cfg);
    if (grad->parsed()) return cmd_gradcheck(gradcheck_seeds);
    if (dump->parsed()) {
      std::cout << cfg.to_json_string();
      return kExitOk;
    }
    return kExitUsage;
  } catch (const readmit::UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const readmit::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const readmit::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const readmit::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
}
