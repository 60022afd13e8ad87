// pcae: synthetic data, training, scoring and evaluation of point-cloud autoencoders.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "pcae/anomaly.hpp"
#include "pcae/checkpoint.hpp"
#include "pcae/gradcheck.hpp"
#include "pcae/pointcloud_io.hpp"
#include "pcae/run_config.hpp"
#include "pcae/synthdata.hpp"
#include "pcae/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace pcae;

namespace {

constexpr const char* kResolvedConfig = "run_config.txt";

/// Options shared by every subcommand that reads a RunConfig.
struct ConfigFlags {
  std::vector<std::string> config_files;
  std::vector<std::string> assignments;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;

  void attach(CLI::App* app) {
    app->add_option("--config", config_files, "key=value config file (repeatable, later files win)");
    app->add_option("--set", assignments, "override one key, e.g. --set epochs=40 (repeatable)");
    app->add_option("--seed", seed, "master seed");
    app->add_option("--threads", threads, "worker thread cap");
  }

  /// Defaults, then files in order, then --set, then dedicated flags.
  RunConfig resolve() const {
    RunConfig rc;
    for (const auto& f : config_files) rc.merge_file(f);
    for (const auto& a : assignments) rc.set_assignment(a);
    if (seed) rc.set("seed", std::to_string(*seed));
    if (threads) rc.set("threads", std::to_string(*threads));
    return rc;
  }
};

json metrics_json(const anomaly::Metrics& m, double auc, double threshold) {
  json j;
  j["P"] = m.precision;
  j["R"] = m.recall;
  j["F1"] = m.f1;
  j["AUC"] = auc;
  j["threshold"] = threshold;
  j["tp"] = m.tp;
  j["fp"] = m.fp;
  j["tn"] = m.tn;
  j["fn"] = m.fn;
  return j;
}

anomaly::AnomalyReport make_report(PointCloudAutoencoder& model, const synth::LabeledSet& set, std::size_t threads) {
  auto clouds = synth::clouds_of(set);
  auto ev = evaluate(model, clouds, 16, threads);
  anomaly::AnomalyReport r;
  for (std::size_t i = 0; i < set.size(); ++i) {
    anomaly::ReportRow row;
    row.id = set[i].id;
    row.label = set[i].label == synth::Label::Fractured ? 1 : 0;
    row.recon_error = ev.recon_error[i];
    if (!ev.log_likelihood.empty()) row.log_likelihood = ev.log_likelihood[i];
    r.rows.push_back(row);
  }
  return r;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p);
  if (!out) throw FormatError("cannot write " + p.string());
  out << s;
}

// ---------------------------------------------------------------------------

int cmd_synth(const ConfigFlags& flags, const fs::path& out) {
  const RunConfig rc = flags.resolve();
  auto ds = synth::make_dataset(rc.split(), rc.dataset());
  synth::save_dataset(out, ds, rc.format());
  rc.write(out / kResolvedConfig);
  std::cout << "wrote " << ds.train.size() + ds.val.size() + ds.test.size() << " clouds to " << out.string() << '\n';
  return 0;
}

int cmd_train(const ConfigFlags& flags, const std::string& variant, const fs::path& data, const fs::path& out,
              std::optional<std::size_t> epochs, bool quiet) {
  RunConfig rc = flags.resolve();
  if (!variant.empty()) rc.set("variant", variant);
  if (epochs) rc.set("epochs", std::to_string(*epochs));
  const TrainConfig tc = rc.train();
  const ModelConfig mc = rc.model();
  auto ds = synth::load_dataset(data);
  std::vector<PointCloud> validation;
  for (const auto& s : ds.val)
    if (s.label == synth::Label::Healthy) validation.push_back(s.cloud);

  fs::create_directories(out);
  rc.write(out / kResolvedConfig);
  write_text(out / "seed.txt", std::to_string(rc.seed()) + "\n");

  auto res = train(synth::clouds_of(ds.train), tc, mc, validation, [&](const EpochRecord& r, PointCloudAutoencoder&) {
    if (!quiet)
      std::fprintf(stderr, "epoch %zu  recon %.6g  kl %.6g  beta %.3g  val %.6g  %.1fs\n", r.epoch + 1, r.recon, r.kl,
                   r.beta, r.monitored, r.seconds);
  });
  save_checkpoint(res.model, out / "final.ckpt");
  std::ofstream log(out / "train_log.csv");
  res.log.write_csv(log);
  std::cout << "trained " << variant_name(tc.variant) << " for " << res.log.records.size() << " epochs ("
            << res.log.steps << " steps" << (res.log.early_stopped ? ", early stop" : "") << "); checkpoint "
            << (out / "final.ckpt").string() << '\n';
  return 0;
}

int cmd_reconstruct(const fs::path& model_path, const std::vector<std::string>& inputs, const fs::path& out,
                    bool normalize_input) {
  auto model = load_checkpoint(model_path);
  fs::create_directories(out);
  for (const auto& in : inputs) {
    PointCloud x = read_cloud(in);
    std::optional<NormalizationRecord> rec;
    if (normalize_input) {
      auto n = normalize(x);
      x = n.cloud;
      rec = n.record;
    }
    auto s = anomaly::score(model, x);
    const std::string stem = fs::path(in).stem().string();
    PointCloud mean = rec ? denormalize(s.recon.mean, *rec) : s.recon.mean;
    std::vector<std::vector<double>> var_cols;
    if (has_variance_head(model.variant()))
      for (std::size_t c = 0; c < 3; ++c) {
        std::vector<double> col;
        for (const auto& v : s.recon.var) col.push_back(v[c]);
        var_cols.push_back(std::move(col));
      }
    write_xyz(out / (stem + "_recon.xyz"), mean, var_cols);
    std::vector<std::vector<double>> cols{s.point_error};
    if (!s.point_log_prob.empty()) cols.push_back(s.point_log_prob);
    write_xyz(out / (stem + "_points.xyz"), rec ? denormalize(x, *rec) : x, cols);
    std::printf("%s  recon_error %.9g", stem.c_str(), s.recon_error);
    if (s.log_likelihood) std::printf("  log_likelihood %.9g", *s.log_likelihood);
    std::printf("\n");
  }
  return 0;
}

anomaly::Thresholds thresholds_from_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw FormatError("cannot read " + p.string());
  json j = json::parse(in);
  anomaly::Thresholds t;
  t.rec.threshold = j.at("thresholds").at("rec").get<double>();
  if (!j["thresholds"]["ll"].is_null()) {
    t.ll = anomaly::ThresholdFit{};
    t.ll->threshold = j["thresholds"]["ll"].get<double>();
  }
  return t;
}

int cmd_score(const ConfigFlags& flags, const fs::path& model_path, const fs::path& data, const std::string& split,
              const fs::path& out, const std::string& thresholds) {
  const RunConfig rc = flags.resolve();
  auto model = load_checkpoint(model_path);
  auto ds = synth::load_dataset(data);
  auto report = make_report(model, ds.split(split), rc.threads());
  if (!thresholds.empty()) report.apply(thresholds_from_json(thresholds));
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  std::ofstream os(out);
  if (!os) throw FormatError("cannot write " + out.string());
  report.write_csv(os);
  std::cout << "scored " << report.rows.size() << " clouds from " << split << " -> " << out.string() << '\n';
  return 0;
}

int cmd_eval(const ConfigFlags& flags, const fs::path& model_path, const fs::path& data, const fs::path& out,
             const std::string& report_path) {
  const RunConfig rc = flags.resolve();
  auto model = load_checkpoint(model_path);
  auto ds = synth::load_dataset(data);
  auto val = make_report(model, ds.val, rc.threads());
  auto test = make_report(model, ds.test, rc.threads());
  const auto vy = val.labels(), ty = test.labels();
  const auto th = anomaly::fit_thresholds(val.errors(), val.log_likelihoods(), vy);
  test.apply(th);

  json j;
  j["model"] = model_path.filename().string();
  j["variant"] = std::string(variant_name(model.variant()));
  j["validation_size"] = val.rows.size();
  j["test_size"] = test.rows.size();
  j["thresholds"]["rec"] = th.rec.threshold;
  j["thresholds"]["ll"] = th.ll ? json(th.ll->threshold) : json(nullptr);
  j["degenerate"]["rec"] = th.rec.degenerate;
  j["degenerate"]["ll"] = th.ll ? json(th.ll->degenerate) : json(nullptr);

  const auto err = test.errors();
  j["rec"] = metrics_json(anomaly::metrics(err, ty, th.rec.threshold), anomaly::roc_auc(err, ty), th.rec.threshold);
  if (th.ll) {
    const auto ll = test.log_likelihoods();
    j["ll"] = metrics_json(anomaly::metrics(ll, ty, th.ll->threshold, anomaly::Direction::LowerIsAnomalous),
                           anomaly::roc_auc(ll, ty, anomaly::Direction::LowerIsAnomalous), th.ll->threshold);
  } else {
    j["ll"] = nullptr;
  }
  const std::string text = j.dump(2) + "\n";
  if (out.empty()) {
    std::cout << text;
  } else {
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    write_text(out, text);
    std::cout << "rec: AUC " << j["rec"]["AUC"].get<double>() << "  F1 " << j["rec"]["F1"].get<double>();
    if (th.ll) std::cout << "   ll: AUC " << j["ll"]["AUC"].get<double>() << "  F1 " << j["ll"]["F1"].get<double>();
    std::cout << "\nwrote " << out.string() << '\n';
  }
  if (!report_path.empty()) {
    std::ofstream os(report_path);
    if (!os) throw FormatError("cannot write " + report_path);
    test.write_csv(os);
  }
  return 0;
}

int cmd_gradcheck(std::uint64_t seed, bool quick) {
  auto results = run_gradient_suite(seed, {}, !quick);
  bool ok = true;
  for (const auto& r : results) {
    std::printf("%-4s %-55s entries %7zu  max_rel %.3e  max_abs %.3e\n", r.passed ? "ok" : "FAIL", r.name.c_str(),
                r.entries, r.max_rel_error, r.max_abs_error);
    ok = ok && r.passed;
  }
  std::printf("%s\n", ok ? "all gradients match" : "gradient mismatch");
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Probabilistic point-cloud autoencoders for shape anomaly detection"};
  app.require_subcommand(1);

  ConfigFlags synth_flags, train_flags, score_flags, eval_flags;

  fs::path synth_out;
  auto* synth = app.add_subcommand("synth", "generate a synthetic vertebra dataset");
  synth_flags.attach(synth);
  synth->add_option("--out", synth_out, "output directory")->required();

  std::string variant;
  fs::path train_data, train_out;
  std::optional<std::size_t> epochs;
  bool quiet = false;
  auto* train_cmd = app.add_subcommand("train", "train one variant on a dataset");
  train_flags.attach(train_cmd);
  train_cmd->add_option("--variant", variant, "ae, sigma-ae, vae or sigma-vae");
  train_cmd->add_option("--data", train_data, "dataset directory")->required();
  train_cmd->add_option("--out", train_out, "run directory")->required();
  train_cmd->add_option("--epochs", epochs, "epoch budget");
  train_cmd->add_flag("--quiet", quiet, "no per-epoch progress");

  fs::path rec_model, rec_out;
  std::vector<std::string> rec_inputs;
  bool rec_normalize = false;
  auto* rec = app.add_subcommand("reconstruct", "write reconstructions and per-point error maps");
  rec->add_option("--model", rec_model, "checkpoint")->required();
  rec->add_option("--out", rec_out, "output directory")->required();
  rec->add_flag("--normalize", rec_normalize, "normalise inputs first and map outputs back");
  rec->add_option("inputs", rec_inputs, "cloud files (.xyz or binary)")->required();

  fs::path score_model, score_data, score_out;
  std::string score_split = "test", score_thresholds;
  auto* score = app.add_subcommand("score", "per-cloud anomaly scores for one split");
  score_flags.attach(score);
  score->add_option("--model", score_model, "checkpoint")->required();
  score->add_option("--data", score_data, "dataset directory")->required();
  score->add_option("--split", score_split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  score->add_option("--out", score_out, "CSV report")->required();
  score->add_option("--thresholds", score_thresholds, "eval JSON whose thresholds fill the verdict columns");

  fs::path eval_model, eval_data, eval_out;
  std::string eval_report;
  auto* eval = app.add_subcommand("eval", "fit thresholds on val, report P/R/F1/AUC on test");
  eval_flags.attach(eval);
  eval->add_option("--model", eval_model, "checkpoint")->required();
  eval->add_option("--data", eval_data, "dataset directory")->required();
  eval->add_option("--out", eval_out, "JSON summary (stdout when omitted)");
  eval->add_option("--report", eval_report, "also write the test-split CSV report");

  std::uint64_t gc_seed = 1;
  bool gc_quick = false;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  gc->add_option("--seed", gc_seed, "seed for random inputs");
  gc->add_flag("--quick", gc_quick, "skip the whole-model check");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*synth) return cmd_synth(synth_flags, synth_out);
    if (*train_cmd) return cmd_train(train_flags, variant, train_data, train_out, epochs, quiet);
    if (*rec) return cmd_reconstruct(rec_model, rec_inputs, rec_out, rec_normalize);
    if (*score) return cmd_score(score_flags, score_model, score_data, score_split, score_out, score_thresholds);
    if (*eval) return cmd_eval(eval_flags, eval_model, eval_data, eval_out, eval_report);
    if (*gc) return cmd_gradcheck(gc_seed, gc_quick);
  } catch (const ConfigError& e) {
    std::cerr << "pcae: config error: " << e.what() << '\n';
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "pcae: usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "pcae: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
