// Command-line front end. Every failure is reported on stderr as
// "pbn: [stage] message" with a nonzero exit code.

#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "pbn/error.hpp"
#include "pbn/experiment.hpp"
#include "pbn/features.hpp"
#include "pbn/harness.hpp"
#include "pbn/hmm.hpp"
#include "pbn/network.hpp"

namespace {

using namespace pbn;
namespace fs = std::filesystem;

std::string file_hash(const std::vector<fs::path>& paths) {
  std::uint64_t h = fnv1a64("");
  for (const auto& p : paths) {
    std::ifstream in(p, std::ios::binary);
    const std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    h = fnv1a64(bytes.data(), bytes.size(), h);
  }
  return hex64(h);
}

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  for (std::string cell; std::getline(ss, cell, ',');) {
    try {
      out.push_back(std::stod(cell));
    } catch (const std::exception&) {
      throw ConfigError("bad number '" + cell + "' in list");
    }
  }
  return out;
}

FeatureConfig preset(const std::string& name) {
  if (name == "exp1") return FeatureConfig::exp1();
  if (name == "exp2") return FeatureConfig::exp2();
  throw ConfigError("unknown feature preset " + name);
}

void print_sweep(const std::string& column, const std::vector<SweepPoint>& points) {
  std::cout << column << ",errors\n";
  for (const auto& p : points) std::cout << p.value << ',' << p.errors << '\n';
}

template <class F>
void stage(const char* name, F&& fn) {
  try {
    fn();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Projected belief network classifiers and experiment harness"};
  app.require_subcommand(1);

  // extract-features
  auto* ex = app.add_subcommand("extract-features", "Log band energies of WAV files");
  std::vector<std::string> ex_inputs;
  std::string ex_preset = "exp2", ex_output, ex_csv_dir;
  ex->add_option("inputs", ex_inputs, "Mono WAV files")->required();
  ex->add_option("--preset", ex_preset, "Feature preset: exp1 or exp2")->capture_default_str();
  ex->add_option("-o,--output", ex_output, "Binary feature file")->required();
  ex->add_option("--csv-dir", ex_csv_dir, "Also write one CSV (plus JSON sidecar) per map here");

  // make-folds
  auto* mf = app.add_subcommand("make-folds", "Random 4:1 holdouts over a labelled manifest");
  std::string mf_manifest, mf_output;
  int mf_folds = 4;
  std::uint64_t mf_seed = 1;
  mf->add_option("--manifest", mf_manifest, "CSV with id,label,path columns")->required();
  mf->add_option("--folds", mf_folds, "Number of folds")->capture_default_str();
  mf->add_option("--seed", mf_seed, "Seed")->capture_default_str();
  mf->add_option("-o,--output", mf_output, "Fold JSON")->required();

  // train
  auto* tr = app.add_subcommand("train", "Train the class-m network (and HMM) of one fold");
  std::string tr_config, tr_fold = "A", tr_output, tr_history, tr_hmm;
  int tr_class = 0;
  tr->add_option("--config", tr_config, "Experiment config")->required();
  tr->add_option("--fold", tr_fold, "Fold name")->capture_default_str();
  tr->add_option("--class", tr_class, "Class index")->required();
  tr->add_option("-o,--output", tr_output, "Network file")->required();
  tr->add_option("--history", tr_history, "Per-epoch history CSV");
  tr->add_option("--hmm", tr_hmm, "Also train an HMM on the tapped maps and write it here");

  // eval
  auto* ev = app.add_subcommand("eval", "Score a fold's test events, or evaluate a score CSV");
  std::string ev_config, ev_fold = "A", ev_scores, ev_output, ev_confusion, ev_cache;
  std::vector<std::string> ev_models, ev_hmms;
  double ev_confidence = 0.0;
  ev->add_option("--config", ev_config, "Experiment config (with --models)");
  ev->add_option("--fold", ev_fold, "Fold name")->capture_default_str();
  ev->add_option("--models", ev_models, "Network files, one per class in class order");
  ev->add_option("--hmms", ev_hmms, "HMM files for PBN-DA-HMM scoring, one per class");
  ev->add_option("--confidence", ev_confidence, "Output confidence for PBN-DA scores (default: config eval value)");
  ev->add_option("--scores", ev_scores, "Evaluate this score CSV instead of models");
  ev->add_option("-o,--output", ev_output, "Score CSV to write");
  ev->add_option("--confusion", ev_confusion, "Confusion CSV to write");
  ev->add_option("--cache", ev_cache, "Likelihood cache CSV to write (PBN-DA only)");

  // sweep-self-combination
  auto* sc = app.add_subcommand("sweep-self-combination", "Errors against the output confidence C");
  std::string sc_cache, sc_grid = "1,3,10,30,100,300,1000,3000,10000", sc_output;
  sc->add_option("--cache", sc_cache, "Likelihood cache CSV")->required();
  sc->add_option("--grid", sc_grid, "Comma-separated C values")->capture_default_str();
  sc->add_option("-o,--output", sc_output, "Sweep CSV");

  // sweep-ensemble
  auto* se = app.add_subcommand("sweep-ensemble", "Errors of a + f b against the factor f");
  std::string se_a, se_b, se_factors = "0,1000,2000,4000,6000,8000,12000,16000", se_output;
  se->add_option("--a", se_a, "Score CSV a")->required();
  se->add_option("--b", se_b, "Score CSV b")->required();
  se->add_option("--factors", se_factors, "Comma-separated factors")->capture_default_str();
  se->add_option("-o,--output", se_output, "Sweep CSV");

  // demo2d
  auto* dm = app.add_subcommand("demo2d", "Two-class 2-D alignment demo with likelihood grids");
  Demo2dConfig dm_cfg;
  std::string dm_out;
  dm->add_option("-o,--out", dm_out, "Output directory")->required();
  dm->add_option("--seeds", dm_cfg.seeds, "Number of seeds")->capture_default_str();
  dm->add_option("--seed", dm_cfg.seed, "First seed")->capture_default_str();
  dm->add_option("--epochs", dm_cfg.epochs, "Epochs per network")->capture_default_str();
  dm->add_option("--ce-scale", dm_cfg.ce_scale, "Cross-entropy scale of the aligned networks")->capture_default_str();
  dm->add_option("--step", dm_cfg.step, "Adam step")->capture_default_str();
  dm->add_option("--confidence", dm_cfg.confidence, "Output confidence C for training and scoring")->capture_default_str();
  dm->add_option("--grid", dm_cfg.grid, "Grid points per axis")->capture_default_str();

  // run
  auto* rn = app.add_subcommand("run", "Run a whole experiment from a config");
  std::string rn_config, rn_out;
  bool rn_dry = false;
  rn->add_option("--config", rn_config, "Experiment config")->required();
  rn->add_option("-o,--out", rn_out, "Artifacts directory");
  rn->add_flag("--dry-run", rn_dry, "Validate the config and print the plan");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*ex) {
      stage("extract-features", [&] {
        const FeatureConfig cfg = preset(ex_preset);
        std::vector<FeatureMap> maps;
        for (const auto& in : ex_inputs) {
          const auto w = read_wav(in);
          if (w.sample_rate != cfg.sample_rate) {
            throw ConfigError(in + ": sample rate " + std::to_string(w.sample_rate) + " differs from the preset");
          }
          maps.push_back(extract(cfg, w.samples, fs::path(in).filename().string()));
          if (!ex_csv_dir.empty()) {
            fs::create_directories(ex_csv_dir);
            write_feature_csv(fs::path(ex_csv_dir) / (fs::path(in).stem().string() + ".csv"), maps.back());
          }
        }
        write_features(ex_output, maps);
        std::cerr << "[extract-features] " << maps.size() << " map(s) of " << maps.front().frames() << "x"
                  << maps.front().bands() << '\n';
      });
    } else if (*mf) {
      stage("make-folds", [&] {
        std::ifstream in(mf_manifest);
        if (!in) throw Error("cannot read " + mf_manifest);
        std::vector<int> labels;
        std::string line;
        std::getline(in, line);
        while (std::getline(in, line)) {
          if (line.empty() || line[0] == '#') continue;
          std::stringstream ss(line);
          std::string id, label;
          std::getline(ss, id, ',');
          std::getline(ss, label, ',');
          labels.push_back(std::stoi(label));
        }
        save_folds(mf_output, make_folds(labels, mf_folds, mf_seed), file_hash({mf_manifest}));
      });
    } else if (*tr) {
      stage("train", [&] {
        const auto cfg = ExperimentConfig::load(tr_config);
        const auto data = load_experiment_data(cfg);
        const EventSet train = data.events.subset(data.fold(tr_fold).train_indices());
        if (tr_class < 0 || tr_class >= cfg.classes) throw ConfigError("class index out of range");
        Rng rng(cfg.seed * 1000003ULL + static_cast<std::uint64_t>(tr_class));
        std::vector<EpochRecord> history;
        const NetworkModel net = train_class_network(cfg, train, tr_class, rng, &history);
        save_network(net, tr_output);
        if (!tr_history.empty()) write_history_csv(tr_history, history, cfg.hash);
        if (!tr_hmm.empty()) save_hmm(train_class_hmm(cfg, net, train, tr_class, rng), tr_hmm);
        std::cerr << "[train] " << history.size() << " epochs, final training errors "
                  << (history.empty() ? -1 : history.back().errors) << '\n';
      });
    } else if (*ev) {
      stage("eval", [&] {
        ScoreTable table;
        std::string hash;
        if (!ev_scores.empty()) {
          table = read_score_csv(ev_scores);
          hash = file_hash({ev_scores});
        } else {
          if (ev_config.empty() || ev_models.empty()) throw ConfigError("eval needs --scores, or --config and --models");
          const auto cfg = ExperimentConfig::load(ev_config);
          hash = cfg.hash;
          const auto data = load_experiment_data(cfg);
          const EventSet test = data.events.subset(data.fold(ev_fold).test_indices());
          std::vector<NetworkModel> models;
          for (const auto& p : ev_models) models.push_back(load_network(p));
          if (static_cast<int>(models.size()) != cfg.classes) throw ConfigError("need one network per class");
          if (!ev_hmms.empty()) {
            if (ev_hmms.size() != models.size()) throw ConfigError("need one HMM per class");
            std::vector<TappedClassModel> tapped;
            for (std::size_t m = 0; m < models.size(); ++m) tapped.push_back({models[m], load_hmm(ev_hmms[m])});
            table = hmm_score_table(tapped, test);
          } else {
            const auto cache = build_likelihood_cache(models, test.ids, test.samples);
            if (!ev_cache.empty()) write_cache_csv(ev_cache, cache, hash);
            table = cache_scores(cache, ev_confidence > 0.0 ? ev_confidence : cfg.eval_confidence);
          }
          if (!ev_output.empty()) write_score_csv(ev_output, table, hash);
        }
        const EvalResult r = evaluate(table);
        if (!ev_confusion.empty()) write_confusion_csv(ev_confusion, r, hash);
        std::cout << "errors," << r.errors << "\nevents," << r.events << "\nfailed," << r.failed << '\n';
      });
    } else if (*sc) {
      stage("sweep-self-combination", [&] {
        const auto cache = read_cache_csv(sc_cache);
        const auto points = self_combination_sweep(cache, parse_list(sc_grid));
        if (!sc_output.empty()) write_sweep_csv(sc_output, "confidence", points, file_hash({sc_cache}));
        print_sweep("confidence", points);
      });
    } else if (*se) {
      stage("sweep-ensemble", [&] {
        const auto points = ensemble_sweep(read_score_csv(se_a), read_score_csv(se_b), parse_list(se_factors));
        if (!se_output.empty()) write_sweep_csv(se_output, "factor", points, file_hash({se_a, se_b}));
        print_sweep("factor", points);
      });
    } else if (*dm) {
      stage("demo2d", [&] {
        const auto r = demo2d(dm_cfg, dm_out);
        std::cout << "da_train_errors," << r.total(&Demo2dSeed::da_train_errors) << "\nml_test_errors,"
                  << r.total(&Demo2dSeed::ml_test_errors) << "\nda_test_errors,"
                  << r.total(&Demo2dSeed::da_test_errors) << "\ntest_events," << r.total(&Demo2dSeed::test_events)
                  << '\n';
      });
    } else if (*rn) {
      ExperimentConfig cfg;
      stage("config", [&] { cfg = ExperimentConfig::load(rn_config); });
      if (!rn_dry && rn_out.empty()) throw StageError("config", "--out is required unless --dry-run is given");
      RunOptions opts;
      opts.dry_run = rn_dry;
      opts.log = rn_dry ? &std::cout : &std::cerr;
      const auto r = run_experiment(cfg, rn_out, opts);
      for (const auto& f : r.folds) {
        for (const auto& m : f.methods) std::cout << f.fold << ',' << m.method << ',' << m.errors << ',' << m.events << '\n';
      }
    }
  } catch (const StageError& e) {
    std::cerr << "pbn: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "pbn: [internal] " << e.what() << '\n';
    return 1;
  }
  return 0;
}
