// xformer: data generation, training, evaluation and diagnostics.
//
// Exit codes: 0 ok, 1 usage, 2 validation failure, 3 numerical failure.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "xformer/xformer.hpp"

namespace fs = std::filesystem;
using namespace xformer;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitValidation = 2;
constexpr int kExitNumerical = 3;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string dataset;
  std::string checkpoint;
  std::string variant;
  bool dual_space = false;
};

KeyValueConfig load_kv(const Common& c) {
  if (c.config.empty()) return {};
  auto kv = KeyValueConfig::load(c.config);
  check_config_keys(kv);
  return kv;
}

ModelConfig model_config(const Common& c, const KeyValueConfig& kv) {
  ModelConfig m;
  apply_config(kv, m);
  if (!c.variant.empty()) m.variant = parse_variant(c.variant);
  if (c.dual_space) m.attention.dual_space = true;
  m.validate();
  return m;
}

TrainConfig train_config(const Common& c, const KeyValueConfig& kv) {
  TrainConfig t;
  apply_config(kv, t);
  if (c.seed) t.seed = *c.seed;
  t.validate();
  return t;
}

std::vector<StructureRecord> require_dataset(const Common& c) {
  if (c.dataset.empty()) throw ValidationError("--dataset is required");
  auto recs = load_dataset(c.dataset);
  if (recs.empty()) throw ValidationError("dataset is empty: " + c.dataset);
  return recs;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path);
  out << text;
  if (!out) throw ValidationError("write failed: " + path);
}

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ValidationError("bad number in list: '" + item + "'");
    }
  }
  if (out.empty()) throw ValidationError("empty list");
  return out;
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const Common& c, int count) {
  if (c.out.empty()) throw ValidationError("--out is required");
  SyntheticSpec spec;
  if (count >= 0) spec.count = count;
  const auto data = generate_synthetic(spec, c.seed.value_or(0));
  save_dataset(c.out, data.records);
  write_text(c.out + ".manifest.json", data.manifest.dump(2) + "\n");
  std::printf("wrote %zu records to %s (max doubling change %.3g)\n", data.records.size(), c.out.c_str(),
              data.manifest["oracle"]["max_doubling_change"].get<double>());
  return kExitOk;
}

int cmd_train(const Common& c, const std::string& val_path) {
  if (c.out.empty()) throw ValidationError("--out is required");
  const auto kv = load_kv(c);
  const auto mcfg = model_config(c, kv);
  const auto tcfg = train_config(c, kv);
  const auto train_set = require_dataset(c);
  std::vector<StructureRecord> val_set;
  if (!val_path.empty()) val_set = load_dataset(val_path);

  const fs::path dir(c.out);
  fs::create_directories(dir);
  std::ofstream log(dir / "train_log.csv");
  log << "epoch,lr,train_mae,val_mae,wall_seconds\n";
  TrainOptions opts;
  opts.on_epoch = [&](const EpochLog& e) {
    log << e.epoch << ',' << format_double(e.lr) << ',' << format_double(e.train_mae) << ','
        << (e.val_mae ? format_double(*e.val_mae) : "") << ',' << e.wall_seconds << '\n';
    log.flush();
    std::printf("epoch %d  lr %.3e  train %.5f", e.epoch, e.lr, e.train_mae);
    if (e.val_mae) std::printf("  val %.5f", *e.val_mae);
    std::printf("\n");
    std::fflush(stdout);
  };
  ModelParams init = init_params(mcfg, tcfg.seed);
  if (!c.checkpoint.empty()) init = load_checkpoint(c.checkpoint, mcfg);
  const auto res = train(std::move(init), train_set, val_set, tcfg, opts);
  save_checkpoint(res.final_params, (dir / "final.ckpt").string());
  save_checkpoint(res.swa_params, (dir / "swa.ckpt").string());

  nlohmann::json manifest = {{"dataset", c.dataset},
                             {"records", train_set.size()},
                             {"model", to_json(mcfg)},
                             {"training", to_json(tcfg)},
                             {"steps", res.steps},
                             {"final_train_mae", res.history.back().train_mae}};
  if (!val_set.empty()) {
    manifest["validation"] = val_path;
    manifest["final_val_mae"] = evaluate(res.final_params, val_set).mae;
    manifest["swa_val_mae"] = evaluate(res.swa_params, val_set).mae;
    manifest["constant_baseline_mae"] = constant_predictor_mae(train_set, val_set);
  }
  write_text((dir / "manifest.json").string(), manifest.dump(2) + "\n");
  std::printf("checkpoints written to %s\n", dir.string().c_str());
  return kExitOk;
}

ModelParams require_checkpoint(const Common& c) {
  if (c.checkpoint.empty()) throw ValidationError("--checkpoint is required");
  return load_checkpoint(c.checkpoint);
}

int cmd_eval(const Common& c) {
  const auto p = require_checkpoint(c);
  const auto recs = require_dataset(c);
  const auto r = evaluate(p, recs);
  if (!c.out.empty()) {
    std::ostringstream csv;
    csv << "id,target,prediction\n";
    for (std::size_t i = 0; i < recs.size(); ++i) {
      csv << recs[i].id << ',' << (recs[i].target ? format_double(*recs[i].target) : "") << ','
          << format_double(r.predictions[i]) << '\n';
    }
    write_text(c.out, csv.str());
  }
  std::printf("mae %.17g over %zu records\n", r.mae, recs.size());
  return kExitOk;
}

int cmd_predict(const Common& c) {
  const auto p = require_checkpoint(c);
  const auto recs = require_dataset(c);
  std::ostringstream csv;
  csv << "id,prediction\n";
  for (const auto& r : recs) csv << r.id << ',' << format_double(predict(r.structure, p)) << '\n';
  if (c.out.empty()) {
    std::cout << csv.str();
  } else {
    write_text(c.out, csv.str());
  }
  return kExitOk;
}

int cmd_params(const Common& c) {
  const auto kv = load_kv(c);
  const auto cfg = model_config(c, kv);
  const auto count = parameter_count(init_params(cfg, 0));
  std::printf("total %zu\n", count.total);
  for (std::size_t b = 0; b < count.per_block.size(); ++b) std::printf("block %zu %zu\n", b, count.per_block[b]);
  return kExitOk;
}

int cmd_check(const Common& c, int sample, bool control) {
  auto recs = require_dataset(c);
  if (sample > 0 && static_cast<std::size_t>(sample) < recs.size()) recs.erase(recs.begin() + sample, recs.end());
  std::vector<CrystalStructure> structures;
  for (const auto& r : recs) structures.push_back(r.structure);
  ModelParams p;
  if (!c.checkpoint.empty()) {
    p = load_checkpoint(c.checkpoint);
  } else {
    const auto kv = load_kv(c);
    p = init_params(model_config(c, kv), c.seed.value_or(0));
    calibrate_model(p, structures);
  }
  p.config.attention.cartesian_bias_control = control;
  const auto rep = check_invariances(p, structures, c.seed.value_or(0));
  const InvarianceTolerances tol;
  std::printf("structures %zu\n", structures.size());
  std::printf("permutation %.3e (tol %.0e) %s\n", rep.max.permutation, tol.permutation, rep.permutation_ok ? "ok" : "FAIL");
  std::printf("e3          %.3e (tol %.0e) %s\n", rep.max.euclidean, tol.euclidean, rep.euclidean_ok ? "ok" : "FAIL");
  std::printf("periodic    %.3e (tol %.0e) %s\n", rep.max.periodic, tol.periodic, rep.periodic_ok ? "ok" : "FAIL");
  return rep.permutation_ok && rep.euclidean_ok && rep.periodic_ok ? kExitOk : kExitValidation;
}

int cmd_converge(const Common& c, const std::string& sigmas, const std::string& coverages, int cutoff) {
  CrystalStructure s = CrystalStructure::from_fractional(Lattice::cubic(2.0), {{0, 0, 0}}, {6});
  if (!c.dataset.empty()) s = require_dataset(c).front().structure;
  const auto rows = convergence_table(s, parse_list(sigmas), parse_list(coverages), cutoff);
  std::ostringstream csv;
  write_convergence_csv(csv, rows);
  if (c.out.empty()) {
    std::cout << csv.str();
  } else {
    write_text(c.out, csv.str());
  }
  for (const auto& r : rows) {
    if (!(r.bound >= r.residual)) {
      std::fprintf(stderr, "bound violated at sigma=%g c=%g pair (%zu,%zu)\n", r.sigma, r.coverage, r.i, r.j);
      return kExitNumerical;
    }
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"periodic-attention crystal property models"};
  app.require_subcommand(1);
  Common c;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", c.config, "key=value config file");
    sub->add_option("--seed", c.seed, "random seed");
    sub->add_option("--out", c.out, "output path");
    sub->add_option("--dataset", c.dataset, "JSONL dataset");
    sub->add_option("--checkpoint", c.checkpoint, "model checkpoint");
    sub->add_option("--variant", c.variant, "full | simplified")->check(CLI::IsMember({"full", "simplified"}));
    sub->add_flag("--dual-space", c.dual_space, "split heads between real and reciprocal space");
  };

  int count = -1;
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic pair-energy dataset");
  common(gen);
  gen->add_option("--count", count, "number of structures (default 640)");

  std::string val_path;
  auto* tr = app.add_subcommand("train", "train a model; --out is a directory");
  common(tr);
  tr->add_option("--val", val_path, "validation JSONL");

  auto* ev = app.add_subcommand("eval", "MAE of a checkpoint on a dataset");
  common(ev);
  auto* pr = app.add_subcommand("predict", "predictions as CSV");
  common(pr);
  auto* pa = app.add_subcommand("params", "parameter counts");
  common(pa);

  int sample = 20;
  bool control = false;
  auto* ck = app.add_subcommand("check", "permutation, E(3) and periodic invariance");
  common(ck);
  ck->add_option("--sample", sample, "structures taken from the dataset");
  ck->add_flag("--cartesian-control", control, "add a raw-coordinate logit bias (must fail E(3))");

  std::string sigmas = "0.5,1.0,1.4,2.0";
  std::string coverages = "2,3.5,5,7";
  int cutoff = 12;
  auto* cv = app.add_subcommand("converge", "lattice-sum truncation study as CSV");
  common(cv);
  cv->add_option("--sigmas", sigmas, "comma-separated sigma values");
  cv->add_option("--coverages", coverages, "comma-separated coverage multipliers");
  cv->add_option("--cutoff", cutoff, "brute-force cutoff");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen) return cmd_gen_data(c, count);
    if (*tr) return cmd_train(c, val_path);
    if (*ev) return cmd_eval(c);
    if (*pr) return cmd_predict(c);
    if (*pa) return cmd_params(c);
    if (*ck) return cmd_check(c, sample, control);
    if (*cv) return cmd_converge(c, sigmas, coverages, cutoff);
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitValidation;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical error: %s\n", e.what());
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitValidation;
  }
  return kExitUsage;
}
