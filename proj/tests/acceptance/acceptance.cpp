// Acceptance suite: one PASS/FAIL line per criterion. Exit status is non-zero
// when any selected criterion fails.
//
//   pcae_acceptance [--workdir DIR] [--only name[,name...]] [--list]

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "pcae/anomaly.hpp"
#include "pcae/checkpoint.hpp"
#include "pcae/gradcheck.hpp"
#include "pcae/synthdata.hpp"
#include "pcae/training.hpp"

#ifndef PCAE_CLI_PATH
#define PCAE_CLI_PATH "pcae_cli"
#endif

namespace fs = std::filesystem;
using namespace pcae;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

PointCloud random_cloud(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<Point3> pts(n);
  for (auto& p : pts) p = {d(rng), d(rng), d(rng)};
  return PointCloud(std::move(pts));
}

/// Points on a coarse integer grid: many exact distance ties.
PointCloud grid_cloud(std::size_t n, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> d(-4, 4);
  std::vector<Point3> pts(n);
  for (auto& p : pts) p = {double(d(rng)), double(d(rng)), double(d(rng))};
  return PointCloud(std::move(pts));
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string("\"") + PCAE_CLI_PATH + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int rc = std::system(cmd.c_str());
  return rc == -1 ? -1 : (WIFEXITED(rc) ? WEXITSTATUS(rc) : 128);
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// ---------------------------------------------------------------------------

Outcome gradient_suite(const fs::path&) {
  const auto t0 = Clock::now();
  auto results = run_gradient_suite(1);
  const double secs = seconds_since(t0);
  bool ok = true;
  double worst = 0.0;
  std::string worst_name;
  for (const auto& r : results) {
    std::printf("    %-4s %-58s rel %.2e\n", r.passed ? "ok" : "FAIL", r.name.c_str(), r.max_rel_error);
    ok = ok && r.passed;
    if (r.max_rel_error >= worst) {
      worst = r.max_rel_error;
      worst_name = r.name;
    }
  }
  return {ok && secs < 120.0,
          fmt("%zu checks, worst rel error %.2e (%s), %.1f s (limit 120 s)", results.size(), worst, worst_name.c_str(),
              secs)};
}

Outcome loss_identities(const fs::path&) {
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<std::size_t> size(20, 300);
  double max_sigma_gap = 0.0, max_vae_gap = 0.0, max_asym = 0.0, max_self = 0.0, min_value = 1e300;
  for (int t = 0; t < 100; ++t) {
    auto x = random_cloud(size(rng), rng);
    auto y = random_cloud(size(rng), rng);
    const double cd = chamfer_distance(x, y);
    for (bool weighted : {false, true}) {
      const double sc = sigma_chamfer(x, ReconDistribution::unit_variance(y), weighted);
      max_sigma_gap = std::max(max_sigma_gap, std::abs(sc - cd));
    }
    // Variational loss at beta = 0 against the deterministic loss on the same reconstruction.
    LatentGaussian g;
    std::normal_distribution<double> n(0.0, 1.0);
    for (int k = 0; k < 8; ++k) {
      g.mu.push_back(n(rng));
      g.log_var.push_back(n(rng));
    }
    auto recon = ReconDistribution::unit_variance(y);
    std::uniform_real_distribution<double> u(0.2, 3.0);
    for (auto& v : recon.var) v = {u(rng), u(rng), u(rng)};
    max_vae_gap = std::max(max_vae_gap, std::abs(model_loss(Variant::VAE, x, recon, g, 0.0) -
                                                 model_loss(Variant::AE, x, recon, std::nullopt, 0.0)));
    max_vae_gap = std::max(max_vae_gap, std::abs(model_loss(Variant::SigmaVAE, x, recon, g, 0.0) -
                                                 model_loss(Variant::SigmaAE, x, recon, std::nullopt, 0.0)));
    max_asym = std::max(max_asym, std::abs(cd - chamfer_distance(y, x)));
    min_value = std::min(min_value, cd);
    max_self = std::max(max_self, chamfer_distance(x, x));
  }
  const bool ok = max_sigma_gap <= 1e-12 && max_vae_gap == 0.0 && max_asym <= 1e-12 && min_value >= 0.0 &&
                  max_self == 0.0;
  return {ok, fmt("100 pairs: |sigma(var=1)-chamfer| %.1e, |VAE(b=0)-AE| %.1e, asymmetry %.1e, min %.3g, "
                  "self-distance %.1e",
                  max_sigma_gap, max_vae_gap, max_asym, min_value, max_self)};
}

Outcome oracle_equivalence(const fs::path&) {
  std::mt19937_64 rng(202);
  // KD-tree against brute force, including tie-heavy grid clouds.
  std::size_t mismatches = 0, queries = 0;
  for (int c = 0; c < 10; ++c) {
    auto target = c % 2 ? grid_cloud(400, rng) : random_cloud(400, rng);
    KdTree tree(target.points());
    for (int q = 0; q < 100; ++q, ++queries) {
      auto qp = c % 2 ? grid_cloud(1, rng)[0] : random_cloud(1, rng)[0];
      if (!(tree.nearest(qp) == nearest_neighbor_brute(qp, target.points()))) ++mismatches;
    }
  }
  // KL closed form against Monte Carlo.
  double worst_kl = 0.0;
  for (int t = 0; t < 5; ++t) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    LatentGaussian g;
    for (int k = 0; k < 8; ++k) {
      g.mu.push_back(u(rng));
      g.log_var.push_back(u(rng));
    }
    const auto sigma = g.sigma();
    std::normal_distribution<double> n(0.0, 1.0);
    double acc = 0.0;
    const int samples = 1000000;
    for (int s = 0; s < samples; ++s) {
      double log_ratio = 0.0;
      for (std::size_t k = 0; k < g.mu.size(); ++k) {
        const double e = n(rng);
        const double z = g.mu[k] + sigma[k] * e;
        log_ratio += -0.5 * g.log_var[k] - 0.5 * e * e + 0.5 * z * z;  // log q(z) - log p(z)
      }
      acc += log_ratio;
    }
    worst_kl = std::max(worst_kl, std::abs(acc / samples - kl_divergence(g)));
  }
  // AUC against the pairwise Mann-Whitney count.
  std::size_t auc_mismatch = 0;
  for (int t = 0; t < 50; ++t) {
    std::uniform_int_distribution<int> len(5, 80), lvl(0, 12);
    const int n = len(rng);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (int i = 0; i < n; ++i) {
      s[i] = lvl(rng) * 0.25;
      y[i] = i < std::max(1, n / 3) ? 1 : 0;
    }
    std::shuffle(y.begin(), y.end(), rng);
    for (auto d : {anomaly::Direction::HigherIsAnomalous, anomaly::Direction::LowerIsAnomalous})
      if (anomaly::roc_auc(s, y, d) != anomaly::pairwise_auc(s, y, d)) ++auc_mismatch;
  }
  const bool ok = mismatches == 0 && worst_kl < 0.01 && auc_mismatch == 0;
  return {ok, fmt("kd-tree mismatches %zu/%zu, max |KL - MC| %.4f (limit 0.01), AUC mismatches %zu/100", mismatches,
                  queries, worst_kl, auc_mismatch)};
}

Outcome permutation_invariance(const fs::path&) {
  std::mt19937_64 rng(303);
  std::size_t checks = 0, failures = 0;
  synth::ShapeParams sp;
  sp.num_points = ModelConfig::desk().num_points;
  for (auto v : {Variant::AE, Variant::SigmaVAE}) {
    PointCloudAutoencoder model(v, ModelConfig::desk(), 17);
    model.set_mode(Mode::Eval);
    auto flat = [](const Encoding& e) {
      if (auto* c = std::get_if<LatentCode>(&e)) return c->z;
      const auto& g = std::get<LatentGaussian>(e);
      std::vector<double> out(g.mu);
      out.insert(out.end(), g.log_var.begin(), g.log_var.end());
      return out;
    };
    for (std::uint64_t c = 0; c < 20; ++c) {
      sp.seed = 1000 + c;
      auto x = normalize(synth::make_vertebra(sp)).cloud;
      const auto ref = flat(model.encode(x));
      std::vector<Point3> pts(x.begin(), x.end());
      for (int p = 0; p < 100; ++p) {
        std::shuffle(pts.begin(), pts.end(), rng);
        ++checks;
        if (flat(model.encode(PointCloud(pts))) != ref) ++failures;
      }
    }
  }
  return {failures == 0, fmt("%zu permuted encodings (ae and sigma-vae, 20 clouds x 100 permutations), %zu differ",
                             checks, failures)};
}

Outcome overfit(const fs::path&) {
  // Batch norm needs two clouds per batch. Two copies of the same cloud make
  // every per-batch feature variance in the decoder's dense branch zero, so the
  // batch holds the target plus a second healthy cloud; only the target is scored.
  const auto t0 = Clock::now();
  const ModelConfig mc = ModelConfig::full();
  synth::ShapeParams sp;
  sp.num_points = mc.num_points;
  sp.seed = 11;
  const auto target = normalize(synth::make_vertebra(sp)).cloud;
  sp.seed = 12;
  const auto companion = normalize(synth::make_vertebra(sp)).cloud;
  std::vector<PointCloud> data{target, companion};

  TrainConfig tc;
  tc.variant = Variant::AE;
  tc.learning_rate = 5e-4;
  tc.lr_schedule = LrSchedule::Constant;
  tc.batch_size = 2;
  tc.epochs = 2000;  // one step per epoch
  tc.augment = false;
  tc.patience = 0;
  tc.seed = 5;

  const std::size_t check_every = 10;
  double best = 1e300;
  std::size_t reached_at = 0;
  struct Reached {};
  std::optional<PointCloudAutoencoder> snapshot;
  try {
    train(data, tc, mc, {}, [&](const EpochRecord& r, PointCloudAutoencoder& m) {
      if ((r.epoch + 1) % check_every != 0) return;
      // Train-mode forward of the training batch: the quantity being optimised.
      NoGradGuard g;
      auto stats = m.batch_norm_stats();
      std::vector<std::pair<std::vector<double>, std::vector<double>>> saved;
      for (auto* s : stats) saved.emplace_back(s->running_mean, s->running_var);
      auto out = m.forward(stack_clouds(data), 2, nullptr);
      for (std::size_t i = 0; i < stats.size(); ++i) std::tie(stats[i]->running_mean, stats[i]->running_var) = saved[i];
      const PointCloud recon(points_from_tensor(out.decoded.mean, 0, mc.num_points));
      const double e = chamfer_distance(target, recon, ChamferReduction::PerPointMean);
      best = std::min(best, e);
      std::printf("    step %4zu  per-point chamfer %.6f  %.0f s\n", r.epoch + 1, e, seconds_since(t0));
      std::fflush(stdout);
      if (e < 1e-3) {
        reached_at = r.epoch + 1;
        snapshot.emplace(m);
        throw Reached{};
      }
    });
  } catch (const Reached&) {
  }
  const double secs = seconds_since(t0);
  std::string eval_note;
  if (snapshot) {
    recalibrate_batch_norm(*snapshot, data, 2);
    const double e = chamfer_distance(target, snapshot->reconstruct(target).mean, ChamferReduction::PerPointMean);
    eval_note = fmt("; eval-mode error after batch-norm recalibration %.6f", e);
  }
  const bool ok = reached_at > 0 && secs < 300.0;
  return {ok, reached_at ? fmt("per-point chamfer < 1e-3 after %zu steps (best %.6f), %.0f s (limit 300 s)%s",
                               reached_at, best, secs, eval_note.c_str())
                         : fmt("best per-point chamfer %.6f after 2000 steps, %.0f s", best, secs)};
}

Outcome end_to_end(const fs::path& work) {
  const auto t0 = Clock::now();
  const fs::path dir = work / "e2e";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const fs::path cfg = dir / "e2e.cfg";
  {
    std::ofstream c(cfg);
    c << "# desk-scale synthetic benchmark\n"
         "preset=desk\nnum_points=512\nseed=2024\n"
         "epochs=50\nbatch_size=16\nlearning_rate=0.0005\nlr_schedule=cosine\n";
  }
  const std::string common = "--config \"" + cfg.string() + "\"";
  if (run_cli("synth " + common + " --out \"" + (dir / "data").string() + "\"", dir / "synth.log") != 0)
    return {false, "synth failed, see " + (dir / "synth.log").string()};
  bool ok = true;
  std::string detail;
  for (const char* v : {"ae", "sigma-ae", "vae", "sigma-vae"}) {
    const fs::path run = dir / v;
    const auto tv = Clock::now();
    if (run_cli("train " + common + " --quiet --variant " + v + " --data \"" + (dir / "data").string() + "\" --out \"" +
                    run.string() + "\"",
                dir / (std::string(v) + "_train.log")) != 0)
      return {false, std::string("train failed for ") + v};
    if (run_cli("eval " + common + " --model \"" + (run / "final.ckpt").string() + "\" --data \"" +
                    (dir / "data").string() + "\" --out \"" + (run / "eval.json").string() + "\"",
                dir / (std::string(v) + "_eval.log")) != 0)
      return {false, std::string("eval failed for ") + v};
    auto j = nlohmann::json::parse(read_file(run / "eval.json"));
    const double auc = j["rec"]["AUC"], f1 = j["rec"]["F1"];
    bool v_ok = auc >= 0.85 && f1 >= 0.75;
    std::string line = fmt("%s rec AUC %.3f F1 %.3f", v, auc, f1);
    if (!j["ll"].is_null()) {
      const double lauc = j["ll"]["AUC"], lf1 = j["ll"]["F1"];
      v_ok = v_ok && lauc >= 0.85 && lf1 >= 0.75;
      line += fmt(", ll AUC %.3f F1 %.3f", lauc, lf1);
    }
    std::printf("    %-4s %s (%.0f s)\n", v_ok ? "ok" : "FAIL", line.c_str(), seconds_since(tv));
    std::fflush(stdout);
    ok = ok && v_ok;
    detail += (detail.empty() ? "" : "; ") + line;
  }
  const double secs = seconds_since(t0);
  return {ok && secs < 1800.0, detail + fmt("; %.0f s total (limit 1800 s)", secs)};
}

Outcome determinism(const fs::path& work) {
  const fs::path dir = work / "determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const fs::path cfg = dir / "small.cfg";
  {
    std::ofstream c(cfg);
    c << "preset=reduced\nnum_points=64\nseed=99\nepochs=3\nbatch_size=4\n"
         "train_healthy=12\nval_healthy=6\nval_fractured=6\ntest_healthy=6\ntest_fractured=6\n";
  }
  const std::string common = "--config \"" + cfg.string() + "\"";
  for (const char* rep : {"a", "b"}) {
    const fs::path r = dir / rep;
    if (run_cli("synth " + common + " --out \"" + (r / "data").string() + "\"", r.string() + "_synth.log") != 0 ||
        run_cli("train " + common + " --quiet --variant sigma-vae --data \"" + (r / "data").string() + "\" --out \"" +
                    (r / "run").string() + "\"",
                r.string() + "_train.log") != 0 ||
        run_cli("eval " + common + " --model \"" + (r / "run" / "final.ckpt").string() + "\" --data \"" +
                    (r / "data").string() + "\" --out \"" + (r / "eval.json").string() + "\"",
                r.string() + "_eval.log") != 0)
      return {false, std::string("pipeline failed in repetition ") + rep};
  }
  const bool same_data = read_file(dir / "a" / "data" / "manifest.csv") == read_file(dir / "b" / "data" / "manifest.csv");
  const auto ck_a = read_file(dir / "a" / "run" / "final.ckpt"), ck_b = read_file(dir / "b" / "run" / "final.ckpt");
  const auto ev_a = read_file(dir / "a" / "eval.json"), ev_b = read_file(dir / "b" / "eval.json");
  const bool ok = same_data && !ck_a.empty() && ck_a == ck_b && !ev_a.empty() && ev_a == ev_b;
  return {ok, fmt("manifest %s, checkpoint %s (%zu bytes), metric JSON %s", same_data ? "identical" : "differs",
                  ck_a == ck_b ? "bitwise identical" : "differs", ck_a.size(),
                  ev_a == ev_b ? "identical" : "differs")};
}

Outcome sigma_variance(const fs::path&) {
  // sigma-AE on healthy clouds; compare mean predicted variance at the
  // predicted points nearest to process vs body input points.
  const ModelConfig mc = ModelConfig::desk();
  synth::DatasetOptions opt;
  opt.shape.num_points = mc.num_points;
  synth::SplitSpec spec;
  spec.train_healthy = 96;
  spec.val_healthy = 20;
  spec.val_fractured = 0;
  spec.test_healthy = 0;
  spec.test_fractured = 0;
  int wins = 0;
  std::string detail;
  for (std::uint64_t run = 0; run < 5; ++run) {
    opt.master_seed = 500 + run;
    auto ds = synth::make_dataset(spec, opt);
    TrainConfig tc;
    tc.variant = Variant::SigmaAE;
    tc.epochs = 50;
    tc.batch_size = 8;  // the variance head needs a few hundred steps to leave its initial scale
    tc.patience = 0;
    tc.seed = 700 + run;
    auto res = train(synth::clouds_of(ds.train), tc, mc);
    double body = 0.0, proc = 0.0;
    std::size_t nb = 0, np = 0;
    for (const auto& s : ds.val) {
      auto recon = res.model.reconstruct(s.cloud);
      auto match = match_all(s.cloud.points(), recon.mean.points());
      for (std::size_t i = 0; i < s.cloud.size(); ++i) {
        const auto& v = recon.var[match[i].index];
        const double mv = (v[0] + v[1] + v[2]) / 3.0;
        if (s.parts[i] == synth::Part::Process) {
          proc += mv;
          ++np;
        } else {
          body += mv;
          ++nb;
        }
      }
    }
    body /= static_cast<double>(nb);
    proc /= static_cast<double>(np);
    const bool win = proc > body;
    wins += win;
    std::printf("    run %llu: process %.5f vs body %.5f %s\n", static_cast<unsigned long long>(run), proc, body,
                win ? "ok" : "reversed");
    std::fflush(stdout);
    detail += fmt("%s%.4f/%.4f", run ? ", " : "", proc, body);
  }
  return {wins >= 4, fmt("process > body variance in %d/5 runs (process/body: %s)", wins, detail.c_str())};
}

struct Criterion {
  const char* name;
  const char* title;
  std::function<Outcome(const fs::path&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  fs::path work = fs::temp_directory_path() / "pcae_acceptance";
  std::vector<std::string> only;
  bool list = false;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--workdir" && i + 1 < argc) {
      work = argv[++i];
    } else if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string s; std::getline(ss, s, ',');) only.push_back(s);
    } else if (a == "--list") {
      list = true;
    } else {
      std::cerr << "usage: pcae_acceptance [--workdir DIR] [--only name,...] [--list]\n";
      return 2;
    }
  }

  const std::vector<Criterion> criteria{
      {"gradients", "Gradient suite", gradient_suite},
      {"identities", "Loss identities", loss_identities},
      {"oracles", "Oracle equivalence", oracle_equivalence},
      {"permutation", "Encoder permutation invariance", permutation_invariance},
      {"overfit", "Overfit check", overfit},
      {"e2e", "End-to-end synthetic benchmark", end_to_end},
      {"determinism", "Determinism", determinism},
      {"sigma", "Sigma-variant behavioural check", sigma_variance},
  };
  if (list) {
    for (const auto& c : criteria) std::cout << c.name << "  " << c.title << '\n';
    return 0;
  }
  fs::create_directories(work);

  int failed = 0, ran = 0;
  std::vector<std::string> summary;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.name) == only.end()) continue;
    std::printf("[%s] %s\n", c.name, c.title);
    std::fflush(stdout);
    Outcome o;
    try {
      o = c.run(work);
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    ++ran;
    failed += !o.pass;
    const std::string line = std::string(o.pass ? "PASS" : "FAIL") + "  " + c.title + ": " + o.detail;
    std::printf("%s\n\n", line.c_str());
    std::fflush(stdout);
    summary.push_back(line);
  }
  std::printf("==== summary ====\n");
  for (const auto& s : summary) std::printf("%s\n", s.c_str());
  std::printf("%d/%d criteria passed\n", ran - failed, ran);
  return failed == 0 ? 0 : 1;
}
