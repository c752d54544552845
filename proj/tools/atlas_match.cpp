// atlas-match: dataset generation, training, evaluation and registration.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "atlas_match/atlas_match.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace atlas_match;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::string manifest, checkpoint, out;

  int input_size = 128;
  int embed_dim = 64;
  std::string loss = "triplet";
  std::string mining = "semi_hard";
  bool mining_set = false;
  std::optional<double> margin;
  int batch = 16;

  int max_iterations = 10000;
  int patience = 2000;
  int validate_every = 250;
  double learning_rate = 1e-4;
  std::optional<double> final_learning_rate;
  std::uint64_t seed = 0;

  int bins = 32;
  int num_resolutions = 3;
  int reg_iterations = 1000;
  int samples = 10000;
  bool random_sample_region = false;
  std::string pyramid = "recursive";
  int trials = 100;

  int regressor_input = 128;
  int pretrain_iterations = 3000;
  int finetune_iterations = 100;
  int pairs_per_iteration = 4;
  int finetune_pairs = 8;

  json to_json() const {
    json model{{"input_size", input_size}, {"embed_dim", embed_dim}, {"loss", loss}, {"mining", mining},
               {"batch", batch}};
    model["margin"] = margin ? json(*margin) : json(nullptr);
    const json final_lr = final_learning_rate ? json(*final_learning_rate) : json(nullptr);
    return {{"paths", {{"manifest", manifest}, {"checkpoint", checkpoint}, {"out", out}}},
            {"model", model},
            {"training",
             {{"max_iterations", max_iterations},
              {"patience", patience},
              {"validate_every", validate_every},
              {"learning_rate", learning_rate},
              {"final_learning_rate", final_lr},
              {"seed", seed}}},
            {"registration",
             {{"bins", bins},
              {"num_resolutions", num_resolutions},
              {"max_iterations", reg_iterations},
              {"samples", samples},
              {"random_sample_region", random_sample_region},
              {"pyramid", pyramid},
              {"trials", trials}}},
            {"regressor",
             {{"input_size", regressor_input},
              {"pretrain_iterations", pretrain_iterations},
              {"finetune_iterations", finetune_iterations},
              {"pairs_per_iteration", pairs_per_iteration},
              {"finetune_pairs", finetune_pairs}}}};
  }

  PyramidConfig pyramid_config() const {
    PyramidConfig c;
    c.num_resolutions = num_resolutions;
    c.max_iterations = reg_iterations;
    c.samples = samples;
    c.random_sample_region = random_sample_region;
    c.pyramid = parse_pyramid_kind(pyramid);
    c.bins = bins;
    return c;
  }

  TrainConfig train_config() const {
    TrainConfig t;
    t.loss = parse_loss_kind(loss);
    t.mining = parse_mining_mode(mining);
    t.batch_size = batch;
    t.margin = margin;
    t.max_iterations = max_iterations;
    t.patience = patience;
    t.validate_every = validate_every;
    t.learning_rate = learning_rate;
    t.final_learning_rate = final_learning_rate;
    t.seed = seed;
    t.input_size = input_size;
    t.embed_dim = embed_dim;
    return t;
  }
};

// Reads `key` from section `sec` into `dst` when present.
template <typename T>
bool take(const json& sec, const char* key, T& dst) {
  if (!sec.contains(key)) return false;
  dst = sec.at(key).get<T>();
  return true;
}

void check_keys(const json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw UsageError("config: '" + where + "' must be an object");
  for (const auto& [k, v] : obj.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || k == a;
    if (!ok) throw UsageError("config: unknown key '" + where + "." + k + "'");
  }
}

void load_config(const fs::path& path, RunConfig& c) {
  json j;
  try {
    j = json::parse(read_file_bytes(path));
  } catch (const json::exception& e) {
    throw UsageError("config: " + std::string(e.what()));
  } catch (const Error& e) {
    throw UsageError("config: " + std::string(e.what()));
  }
  try {
    check_keys(j, "", {"paths", "model", "training", "registration", "regressor"});
    const json empty = json::object();
    const json& paths = j.contains("paths") ? j["paths"] : empty;
    const json& model = j.contains("model") ? j["model"] : empty;
    const json& training = j.contains("training") ? j["training"] : empty;
    const json& reg = j.contains("registration") ? j["registration"] : empty;
    const json& rgr = j.contains("regressor") ? j["regressor"] : empty;
    check_keys(paths, "paths", {"manifest", "checkpoint", "out"});
    check_keys(model, "model", {"input_size", "embed_dim", "loss", "mining", "margin", "batch"});
    check_keys(training, "training", {"max_iterations", "patience", "validate_every", "learning_rate", "final_learning_rate", "seed"});
    check_keys(reg, "registration",
               {"bins", "num_resolutions", "max_iterations", "samples", "random_sample_region", "pyramid", "trials"});
    check_keys(rgr, "regressor",
               {"input_size", "pretrain_iterations", "finetune_iterations", "pairs_per_iteration", "finetune_pairs"});
    take(paths, "manifest", c.manifest);
    take(paths, "checkpoint", c.checkpoint);
    take(paths, "out", c.out);
    take(model, "input_size", c.input_size);
    take(model, "embed_dim", c.embed_dim);
    take(model, "loss", c.loss);
    c.mining_set = take(model, "mining", c.mining) || c.mining_set;
    if (model.contains("margin") && !model["margin"].is_null()) c.margin = model["margin"].get<double>();
    take(model, "batch", c.batch);
    take(training, "max_iterations", c.max_iterations);
    take(training, "patience", c.patience);
    take(training, "validate_every", c.validate_every);
    take(training, "learning_rate", c.learning_rate);
    if (training.contains("final_learning_rate") && !training["final_learning_rate"].is_null()) {
      c.final_learning_rate = training["final_learning_rate"].get<double>();
    }
    take(training, "seed", c.seed);
    take(reg, "bins", c.bins);
    take(reg, "num_resolutions", c.num_resolutions);
    take(reg, "max_iterations", c.reg_iterations);
    take(reg, "samples", c.samples);
    take(reg, "random_sample_region", c.random_sample_region);
    take(reg, "pyramid", c.pyramid);
    take(reg, "trials", c.trials);
    take(rgr, "input_size", c.regressor_input);
    take(rgr, "pretrain_iterations", c.pretrain_iterations);
    take(rgr, "finetune_iterations", c.finetune_iterations);
    take(rgr, "pairs_per_iteration", c.pairs_per_iteration);
    take(rgr, "finetune_pairs", c.finetune_pairs);
  } catch (const json::exception& e) {
    throw UsageError("config: " + std::string(e.what()));
  }
}

std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("ATLAS_MATCH_SEED");
  if (s == nullptr || *s == '\0') return std::nullopt;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(s, &end, 10);
  if (end == s || *end != '\0') throw UsageError("ATLAS_MATCH_SEED must be an unsigned integer");
  return v;
}

// Flags registered against a subcommand and applied after the config file,
// so that anything given on the command line wins.
class Command {
 public:
  Command(CLI::App& parent, const std::string& name, const std::string& desc) : app_(parent.add_subcommand(name, desc)) {
    app_->add_option("--config", config_path_, "JSON run configuration")->check(CLI::ExistingFile);
    app_->add_flag("--no-timing", no_timing_, "Omit timing fields from reports");
  }

  template <typename T, typename F>
  CLI::Option* option(const std::string& name, F RunConfig::*field, const std::string& desc) {
    auto holder = std::make_shared<std::optional<T>>();
    auto* opt = app_->add_option(name, *holder, desc);
    apply_.push_back([holder, field](RunConfig& c) {
      if (*holder) c.*field = **holder;
    });
    return opt;
  }

  template <typename F>
  CLI::Option* option(const std::string& name, F RunConfig::*field, const std::string& desc) {
    return option<F, F>(name, field, desc);
  }

  CLI::App* app() const noexcept { return app_; }
  bool no_timing() const noexcept { return no_timing_; }

  RunConfig resolve() const {
    RunConfig c;
    if (!config_path_.empty()) load_config(config_path_, c);
    if (const auto s = env_seed()) c.seed = *s;
    for (const auto& f : apply_) f(c);
    return c;
  }

 private:
  CLI::App* app_;
  std::string config_path_;
  bool no_timing_ = false;
  std::vector<std::function<void(RunConfig&)>> apply_;
};

json build_identity() {
  return {{"program", "atlas-match"}, {"version", "0.1.0"}, {"compiler", __VERSION__}};
}

void emit(const json& report, const fs::path& file = {}) {
  const std::string text = report.dump(2) + "\n";
  if (!file.empty()) write_file_bytes(file, text);
  std::cout << text;
}

void require_path(const std::string& p, const std::string& what) {
  if (p.empty()) throw UsageError(what + " is required");
  if (!fs::exists(p)) throw UsageError(what + " '" + p + "' does not exist");
}

template <typename Fn>
auto as_usage(Fn&& fn) {
  try {
    return fn();
  } catch (const Error& e) {
    if (e.code() == ErrorCode::InvalidArgument) throw UsageError(e.what());
    throw;
  }
}

SplitCounts parse_counts(const std::string& s) {
  std::vector<int> v;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      std::size_t used = 0;
      const int n = std::stoi(part, &used);
      if (used != part.size() || n < 0) throw std::invalid_argument(part);
      v.push_back(n);
    } catch (const std::exception&) {
      throw UsageError("--counts expects four nonnegative integers a,b,c,d");
    }
  }
  if (v.size() != 4) throw UsageError("--counts expects four nonnegative integers a,b,c,d");
  return {v[0], v[1], v[2], v[3]};
}

json ranking_json(const RankingResult& r, std::optional<int> plate) {
  json j{{"id", r.query_id}, {"ground_truth", plate ? json(*plate) : json(nullptr)}};
  j["rank"] = r.ground_truth_rank ? json(*r.ground_truth_rank) : json(nullptr);
  const std::size_t head = std::min<std::size_t>(10, r.ranked.size());
  j["head"] = std::vector<int>(r.ranked.begin(), r.ranked.begin() + static_cast<std::ptrdiff_t>(head));
  return j;
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  int plates = 132;
  int size = 128;
  std::optional<std::uint64_t> seed;
  double morph = 1.0;
  std::string counts = "50,12,10,12";
  std::string out;
};

int run_gen_data(const GenDataArgs& a) {
  AtlasSpec spec;
  spec.num_plates = a.plates;
  spec.image_size = a.size;
  spec.morph_rate = a.morph;
  spec.seed = a.seed ? *a.seed : env_seed().value_or(0);
  const SplitCounts counts = parse_counts(a.counts);
  as_usage([&] {
    spec.validate();
    return 0;
  });
  const auto m = build_dataset(spec, counts, AugmentationRanges{}, spec.seed, fs::path(a.out));
  json per_split = json::object();
  for (Split s : kAllSplits) per_split[std::string(to_string(s))] = m.split(s).size();
  emit({{"command", "gen-data"},
        {"atlas", {{"plates", spec.num_plates}, {"size", spec.image_size}, {"seed", spec.seed}, {"morph", spec.morph_rate}}},
        {"entries", m.entries.size()},
        {"splits", per_split},
        {"manifest", (fs::path(a.out) / "manifest.tsv").string()},
        {"build", build_identity()}});
  return 0;
}

int run_train(const Command& cmd, bool mining_flag) {
  RunConfig c = cmd.resolve();
  c.mining_set = c.mining_set || mining_flag;
  const TrainConfig tc = as_usage([&] { return c.train_config(); });
  if (c.input_size != 64 && c.input_size != 128) throw UsageError("input size must be 64 or 128");
  if (c.batch != 16 && c.batch != 32) throw UsageError("batch must be 16 or 32");
  if (c.out.empty()) throw UsageError("--out is required");
  require_path(c.manifest, "manifest");
  if (tc.loss == LossKind::Contrastive && c.mining_set) {
    std::cerr << "warning: mining applies to the triplet loss only and is ignored\n";
  }

  const Dataset d = load_dataset(c.manifest);
  const auto train = labeled_split(d, Split::Train);
  const auto val = labeled_split(d, Split::Val1);
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = train_identifier(d.plates, train, val, tc, [](const TrainLogRow& row) {
    std::cerr << "iteration " << row.iteration << " val1_mae " << *row.val_mae << "\n";
  });
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const fs::path out(c.out);
  fs::create_directories(out);
  save_checkpoint(r.checkpoint, out / "checkpoint.amck");
  write_file_bytes(out / "train_log.csv", format_train_log_csv(r.log));
  json report{{"command", "train"},
              {"config", c.to_json()},
              {"best_iteration", r.best_iteration},
              {"best_val1_mae", r.best_val_mae},
              {"iterations_run", r.iterations_run},
              {"early_stopped", r.early_stopped},
              {"checkpoint", (out / "checkpoint.amck").string()},
              {"build", build_identity()}};
  if (!cmd.no_timing()) report["seconds"] = secs;
  emit(report, out / "train_report.json");
  return 0;
}

int run_evaluate(const Command& cmd, const std::string& split_name, const std::string& baseline) {
  RunConfig c = cmd.resolve();
  const Split split = as_usage([&] { return parse_split(split_name); });
  require_path(c.manifest, "manifest");
  const bool mi = baseline == "mi";
  const PyramidConfig pc = as_usage([&] {
    auto p = c.pyramid_config();
    p.validate();
    return p;
  });
  if (!mi) require_path(c.checkpoint, "checkpoint");

  const Dataset d = load_dataset(c.manifest);
  const auto queries = labeled_split(d, split);
  Evaluation ev;
  if (mi) {
    ev = evaluate_by_mi(queries, d.plates, pc, c.seed);
  } else {
    const auto net = load_checkpoint(c.checkpoint).network();
    const auto index = build_index(d.plates, net);
    ev = evaluate(queries, index, net);
  }
  json rankings = json::array();
  for (std::size_t i = 0; i < ev.rankings.size(); ++i) rankings.push_back(ranking_json(ev.rankings[i], queries[i].plate));
  json report{{"command", "evaluate"},
              {"method", mi ? "mi" : "siamese"},
              {"split", to_string(split)},
              {"config", c.to_json()},
              {"report", ev.report.to_json(!cmd.no_timing())},
              {"rankings", rankings},
              {"build", build_identity()}};
  emit(report, c.out.empty() ? fs::path() : fs::path(c.out) / "eval_report.json");
  return 0;
}

struct RegisterArgs {
  std::string fixed, moving;
  std::string mode = "optimize";
};

int run_register(const Command& cmd, const RegisterArgs& a) {
  RunConfig c = cmd.resolve();
  if (a.mode != "optimize" && a.mode != "search" && a.mode != "regress") {
    throw UsageError("mode must be optimize, search or regress");
  }
  require_path(a.fixed, "fixed image");
  require_path(a.moving, "moving image");
  if (a.mode == "regress") require_path(c.checkpoint, "checkpoint");
  if (a.mode == "search" && c.trials < 1) throw UsageError("trials must be >= 1");
  const PyramidConfig pc = as_usage([&] {
    auto p = c.pyramid_config();
    p.validate();
    return p;
  });

  const GrayImage fixed = load_pgm(a.fixed);
  const GrayImage moving = load_pgm(a.moving);
  const bool timing = !cmd.no_timing();
  const fs::path out = c.out.empty() ? fs::path() : fs::path(c.out);
  if (!out.empty()) fs::create_directories(out);

  RegistrationResult result;
  json extra = json::object();
  if (a.mode == "optimize") {
    result = register_affine(fixed, moving, pc, c.seed);
    if (!out.empty()) {
      std::string csv = "level,iteration,sampled_mi,best_mi\n";
      char buf[128];
      for (const auto& t : result.trace) {
        std::snprintf(buf, sizeof buf, "%d,%d,%.9g,%.9g\n", t.level, t.iteration, t.sampled_mi, t.best_mi);
        csv += buf;
      }
      write_file_bytes(out / "trace.csv", csv);
    }
    extra["trace_length"] = result.trace.size();
  } else if (a.mode == "search") {
    auto s = random_search(fixed, moving, c.trials, c.seed, pc);
    std::string lines;
    for (const auto& t : s.trials) lines += t.to_json(timing).dump() + "\n";
    if (!out.empty()) write_file_bytes(out / "trials.jsonl", lines);
    extra["best_trial"] = s.best_trial;
    extra["trials"] = s.trials.size();
    result = std::move(s.best);
  } else {
    const auto net = load_checkpoint(c.checkpoint).network();
    const auto t0 = std::chrono::steady_clock::now();
    result.transform = predict_affine(net, moving, fixed);
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.final_mi = WarpedMi(fixed, moving, pc.bins)(result.transform);
  }
  if (!out.empty()) {
    save_pgm(warp_affine(moving, result.transform, fixed.width(), fixed.height()), out / "moved.pgm");
  }
  json report{{"command", "register"},
              {"mode", a.mode},
              {"config", c.to_json()},
              {"result", result.to_json(timing)},
              {"build", build_identity()}};
  report.update(extra);
  emit(report, out.empty() ? fs::path() : out / "register_report.json");
  return 0;
}

int run_train_regressor(const Command& cmd) {
  RunConfig c = cmd.resolve();
  require_path(c.manifest, "manifest");
  if (c.out.empty()) throw UsageError("--out is required");
  if (c.regressor_input != 128 && c.regressor_input != 256) throw UsageError("regressor input size must be 128 or 256");
  RegressorConfig rc;
  rc.input_size = c.regressor_input;
  rc.pretrain_iterations = c.pretrain_iterations;
  rc.finetune_iterations = c.finetune_iterations;
  rc.pairs_per_iteration = c.pairs_per_iteration;
  rc.learning_rate = c.learning_rate;
  rc.seed = c.seed;
  rc.bins = c.bins;

  const Dataset d = load_dataset(c.manifest);
  std::vector<RegistrationPair> pairs;
  for (std::size_t i : d.indices(Split::Train)) {
    if (static_cast<int>(pairs.size()) >= c.finetune_pairs) break;
    pairs.push_back({d.plates[d.manifest.entries[i].plate], d.slices[i]});
  }
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = as_usage([&] { return train_regressor(d.plates, pairs, rc); });
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const fs::path out(c.out);
  fs::create_directories(out);
  save_checkpoint(r.checkpoint, out / "regressor.amck");
  json report{{"command", "train-regressor"},
              {"config", c.to_json()},
              {"finetune_pairs", pairs.size()},
              {"finetune_initial_mi", r.log.finetune_initial_mi},
              {"finetune_best_mi", r.log.finetune_best_mi},
              {"checkpoint", (out / "regressor.amck").string()},
              {"build", build_identity()}};
  if (!cmd.no_timing()) report["seconds"] = secs;
  emit(report, out / "regressor_report.json");
  return 0;
}

void model_options(Command& cmd) {
  cmd.option("--input-size", &RunConfig::input_size, "Network input size (64 or 128)");
  cmd.option("--embed-dim", &RunConfig::embed_dim, "Embedding length L");
  cmd.option("--batch", &RunConfig::batch, "Batch size (16 or 32)");
}

void registration_options(Command& cmd) {
  cmd.option("--bins", &RunConfig::bins, "Histogram bins per axis");
  cmd.option("--resolutions", &RunConfig::num_resolutions, "Pyramid levels (1-7)");
  cmd.option("--iterations", &RunConfig::reg_iterations, "Optimizer iterations per level");
  cmd.option("--samples", &RunConfig::samples, "Spatial samples per iteration");
  cmd.option("--random-region", &RunConfig::random_sample_region, "Sample from a random sub-region (true/false)");
  cmd.option("--pyramid", &RunConfig::pyramid, "recursive, shrinking or smoothing");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Atlas plate identification and affine registration"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic atlas and slice dataset");
  gen_cmd->add_option("--plates", gen.plates, "Number of plates");
  gen_cmd->add_option("--size", gen.size, "Plate size in pixels");
  gen_cmd->add_option("--seed", gen.seed, "Generator seed");
  gen_cmd->add_option("--morph", gen.morph, "Plate-to-plate morph rate");
  gen_cmd->add_option("--counts", gen.counts, "Slices per split: train,val1,val2,test");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();

  Command train(app, "train", "Train the embedding network");
  train.option("--manifest", &RunConfig::manifest, "Dataset manifest");
  train.option("--out", &RunConfig::out, "Output directory");
  model_options(train);
  train.option("--loss", &RunConfig::loss, "contrastive or triplet");
  auto* mining_opt = train.option("--mining", &RunConfig::mining, "semi_hard, hard or all");
  train.option<double>("--margin", &RunConfig::margin, "Loss margin");
  train.option("--max-iters", &RunConfig::max_iterations, "Maximum iterations");
  train.option("--patience", &RunConfig::patience, "Early-stopping patience in iterations");
  train.option("--validate-every", &RunConfig::validate_every, "Validation interval");
  train.option("--lr", &RunConfig::learning_rate, "Adam learning rate");
  train.option<double>("--final-lr", &RunConfig::final_learning_rate, "Cosine-decay the learning rate to this value");
  train.option("--seed", &RunConfig::seed, "Seed");

  Command eval(app, "evaluate", "Rank plates for every slice of a split");
  std::string split = "test", baseline;
  eval.app()->add_option("--split", split, "train, val1, val2 or test");
  eval.app()->add_option("--baseline", baseline, "Use the exhaustive MI identifier")->check(CLI::IsMember({"mi"}));
  eval.option("--manifest", &RunConfig::manifest, "Dataset manifest");
  eval.option("--checkpoint", &RunConfig::checkpoint, "Embedding checkpoint");
  eval.option("--out", &RunConfig::out, "Also write the report here");
  eval.option("--seed", &RunConfig::seed, "Seed for the MI baseline");
  registration_options(eval);

  RegisterArgs reg_args;
  Command reg(app, "register", "Affinely register a moving image to a fixed image");
  reg.app()->add_option("--fixed", reg_args.fixed, "Fixed image (PGM)")->required();
  reg.app()->add_option("--moving", reg_args.moving, "Moving image (PGM)")->required();
  reg.app()->add_option("--mode", reg_args.mode, "optimize, search or regress");
  reg.option("--checkpoint", &RunConfig::checkpoint, "Regressor checkpoint (regress mode)");
  reg.option("--trials", &RunConfig::trials, "Random-search trials");
  reg.option("--out", &RunConfig::out, "Output directory");
  reg.option("--seed", &RunConfig::seed, "Seed");
  registration_options(reg);

  RegisterArgs search_args;
  search_args.mode = "search";
  Command search(app, "search-hparams", "Random hyperparameter search (register --mode search)");
  search.app()->add_option("--fixed", search_args.fixed, "Fixed image (PGM)")->required();
  search.app()->add_option("--moving", search_args.moving, "Moving image (PGM)")->required();
  search.option("--trials", &RunConfig::trials, "Random-search trials");
  search.option("--out", &RunConfig::out, "Output directory");
  search.option("--seed", &RunConfig::seed, "Seed");
  registration_options(search);

  Command rgr(app, "train-regressor", "Train the affine regression network");
  rgr.option("--manifest", &RunConfig::manifest, "Dataset manifest");
  rgr.option("--out", &RunConfig::out, "Output directory");
  rgr.option("--input-size", &RunConfig::regressor_input, "Regressor input size (128 or 256)");
  rgr.option("--pretrain-iters", &RunConfig::pretrain_iterations, "Stage-1 iterations");
  rgr.option("--finetune-iters", &RunConfig::finetune_iterations, "Stage-2 iterations");
  rgr.option("--pairs", &RunConfig::pairs_per_iteration, "Synthetic pairs per stage-1 iteration");
  rgr.option("--finetune-pairs", &RunConfig::finetune_pairs, "Training slices used in stage 2");
  rgr.option("--lr", &RunConfig::learning_rate, "Adam learning rate");
  rgr.option("--seed", &RunConfig::seed, "Seed");
  rgr.option("--bins", &RunConfig::bins, "Histogram bins per axis");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (gen_cmd->parsed()) {
      if (!gen.seed && env_seed()) gen.seed = env_seed();
      return run_gen_data(gen);
    }
    if (train.app()->parsed()) {
      return run_train(train, mining_opt->count() > 0);
    }
    if (eval.app()->parsed()) return run_evaluate(eval, split, baseline);
    if (reg.app()->parsed()) return run_register(reg, reg_args);
    if (search.app()->parsed()) return run_register(search, search_args);
    if (rgr.app()->parsed()) return run_train_regressor(rgr);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << "error: " << to_string(e.code()) << ": " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
