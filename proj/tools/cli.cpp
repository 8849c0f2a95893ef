#include "cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "zsih/binary_io.hpp"
#include "zsih/log.hpp"
#include "zsih/pipeline.hpp"
#include "zsih/retrieval.hpp"
#include "zsih/text.hpp"

namespace zsih::cli {
namespace {

namespace fs = std::filesystem;

/// Output paths are checked up front so a bad path fails before any work.
void check_output(const std::string& path) {
  const fs::path p(path);
  const fs::path dir = p.has_parent_path() ? p.parent_path() : fs::path(".");
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) throw IoError("output directory does not exist: " + dir.string());
  if (fs::is_directory(p, ec)) throw IoError("output path is a directory: " + path);
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (!fs::is_directory(dir, ec)) throw IoError("cannot create directory " + dir);
  const auto probe = fs::path(dir) / ".zsih-write-test";
  {
    std::ofstream f(probe);
    if (!f) throw IoError("directory is not writable: " + dir);
  }
  fs::remove(probe, ec);
}

std::string join(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

void write_text(const std::string& path, const std::string& text) { io::write_file(path, text); }

struct DataArgs {
  std::string sketches, images, semantics, names, synonyms;
};

void add_data_options(CLI::App* cmd, DataArgs& a, bool need_semantics) {
  cmd->add_option("--sketches", a.sketches, "sketch feature file")->required()->check(CLI::ExistingFile);
  cmd->add_option("--images", a.images, "image feature file")->required()->check(CLI::ExistingFile);
  if (need_semantics) {
    cmd->add_option("--semantics", a.semantics, "word-vector text file")->required()->check(CLI::ExistingFile);
    cmd->add_option("--synonyms", a.synonyms, "missing<TAB>substitute name map")->check(CLI::ExistingFile);
  }
  cmd->add_option("--names", a.names, "class names, id<TAB>name per line")->check(CLI::ExistingFile);
}

FeatureStore load_modality(const std::string& path, Modality expected, const std::map<ClassId, std::string>& names) {
  auto store = load_features(path);
  if (store.modality != expected) {
    throw DatasetError(path + " holds " + to_string(store.modality) + " features, expected " + to_string(expected));
  }
  store.class_names = names;
  return store;
}

std::map<ClassId, std::string> load_names(const std::string& path, const std::vector<const FeatureStore*>& stores) {
  std::map<ClassId, std::string> names;
  if (!path.empty()) names = parse_class_names(io::read_file(path), path);
  for (const auto* s : stores) {
    for (ClassId c : s->classes()) {
      if (!names.count(c)) names[c] = s->class_name(c);
    }
  }
  return names;
}

Dataset load_dataset(const DataArgs& a) {
  Dataset d;
  d.sketches = load_modality(a.sketches, Modality::sketch, {});
  d.images = load_modality(a.images, Modality::image, {});
  const auto names = load_names(a.names, {&d.sketches, &d.images});
  d.sketches.class_names = d.images.class_names = names;
  std::map<ClassId, std::string> used;
  for (ClassId c : d.classes()) used[c] = names.at(c);
  d.semantics = load_semantics(a.semantics, used, a.synonyms);
  return d;
}

struct ConfigArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> max_iters, seed;
  std::optional<std::string> fusion;
  std::optional<double> t;
  bool no_gcn = false;
};

void add_config_options(CLI::App* cmd, ConfigArgs& a) {
  cmd->add_option("--config", a.config, "config file, key = value per line")->check(CLI::ExistingFile);
  cmd->add_option("--set", a.overrides, "config override key=value (repeatable)");
  cmd->add_option("--max-iters", a.max_iters, "training iterations T");
  cmd->add_option("--seed", a.seed, "random seed");
  cmd->add_option("--fusion", a.fusion, "kronecker, concat or mfb");
  cmd->add_option("--t", a.t, "adjacency bandwidth");
  cmd->add_flag("--no-gcn", a.no_gcn, "replace graph layers by fully-connected ones");
}

/// Config file, then --set overrides, then dedicated flags.
ZsihConfig resolve_config(const ConfigArgs& a) {
  ZsihConfig c;
  bool seeded = a.seed.has_value();
  if (!a.config.empty()) {
    const auto text = io::read_file(a.config);
    ZsihConfig probe;
    probe.seed = 0;
    const auto s0 = parse_config(text, probe).seed;
    probe.seed = 1;
    seeded = seeded || parse_config(text, probe).seed == s0;
    c = parse_config(text);
  }
  for (const auto& o : a.overrides) {
    apply_override(c, o);
    const auto key = text::trim(std::string_view(o).substr(0, o.find('=')));
    seeded = seeded || key == "seed";
  }
  if (!seeded) throw ConfigError("no seed given; pass --seed or set seed in the config");
  if (a.max_iters) c.T = *a.max_iters;
  if (a.seed) c.seed = *a.seed;
  if (a.fusion) c.fusion_mode = parse_fusion_mode(*a.fusion);
  if (a.t) c.t = *a.t;
  if (a.no_gcn) c.use_gcn = false;
  validate(c);
  return c;
}

CodeMatrix encode_store(const ModelParams<double>& params, const FeatureStore& store) {
  return binarize(encode_soft_codes(params, store), store.labels, store.modality);
}

void emit_report(const RetrievalReport& rep, const std::string& out_path, const std::string& dump_path,
                 std::ostream& out) {
  const auto text = format_report(rep);
  if (!out_path.empty()) write_text(out_path, text);
  if (!dump_path.empty()) {
    write_text(dump_path, format_pr_dump(rep));
  } else if (!out_path.empty()) {
    write_text(out_path + ".pr.tsv", format_pr_dump(rep));
  }
  out << text;
}

// ---------------------------------------------------------------------------
// Verbs

struct SynthArgs {
  std::string out_dir;
  std::uint32_t classes = 10, per_class = 50, L = 4, C = 32, dim = 8;
  double noise = 0.2;
  std::uint64_t seed = 0;
};

void run_synth(const SynthArgs& a, std::ostream& out) {
  ensure_dir(a.out_dir);
  SynthParams p{a.classes, a.per_class, a.L, a.C, a.dim, a.noise, a.seed};
  auto d = synth_dataset(p);
  save_features(join(a.out_dir, "sketches.zsft"), d.sketches);
  save_features(join(a.out_dir, "images.zsft"), d.images);
  write_text(join(a.out_dir, "semantics.txt"), format_word_vectors(d.semantics));
  write_text(join(a.out_dir, "classes.tsv"), format_class_names(d.sketches.class_names));
  out << "classes\t" << a.classes << "\nitems_per_class\t" << a.per_class << "\nfeature_map\t" << a.L << "x" << a.C
      << "\nsemantic_dim\t" << a.dim << "\nnoise\t" << text::format_double(a.noise) << "\nseed\t" << a.seed
      << "\nwritten\t" << a.out_dir << "\n";
}

struct SplitArgs {
  std::string sketches, images, out_dir;
  std::size_t unseen = 0;
  std::uint64_t seed = 0;
};

void run_split(const SplitArgs& a, std::ostream& out) {
  ensure_dir(a.out_dir);
  auto sk = load_modality(a.sketches, Modality::sketch, {});
  auto im = load_modality(a.images, Modality::image, {});
  auto classes = sk.classes();
  const auto im_classes = im.classes();
  classes.insert(classes.end(), im_classes.begin(), im_classes.end());
  auto split = make_split(classes, a.unseen, a.seed);
  write_text(join(a.out_dir, "split.txt"), format_split(split));
  save_features(join(a.out_dir, "train_sketches.zsft"), select_classes(sk, split.seen));
  save_features(join(a.out_dir, "train_images.zsft"), select_classes(im, split.seen));
  save_features(join(a.out_dir, "test_sketches.zsft"), select_classes(sk, split.unseen));
  save_features(join(a.out_dir, "test_images.zsft"), select_classes(im, split.unseen));
  out << "seen\t" << split.seen.size() << "\nunseen\t" << split.unseen.size() << "\nwritten\t" << a.out_dir << "\n";
}

struct TrainArgs {
  DataArgs data;
  ConfigArgs config;
  std::string split, out, metrics, resume;
};

void run_train(const TrainArgs& a, std::ostream& out) {
  auto config = resolve_config(a.config);
  check_output(a.out);
  const std::string metrics_path = a.metrics.empty() ? a.out + ".metrics.tsv" : a.metrics;
  check_output(metrics_path);
  const auto split = parse_split(io::read_file(a.split), a.split);
  auto data = load_dataset(a.data);
  check_seen_only(data, split);
  std::optional<Checkpoint> resume;
  if (!a.resume.empty()) resume = load_checkpoint(a.resume);

  std::ostringstream metrics;
  Checkpoint ck;
  try {
    ck = train(config, data, {.metrics = &metrics, .resume = resume ? &*resume : nullptr, .split = &split});
  } catch (const TrainingAborted& e) {
    save_checkpoint(a.out, e.last_good());
    write_text(metrics_path, metrics.str());
    throw;
  }
  save_checkpoint(a.out, ck);
  write_text(metrics_path, metrics.str());
  const auto& h = ck.loss_history;
  out << "iterations\t" << ck.iteration << "\n";
  if (!h.empty()) out << "final_loss\t" << text::format_double(h.back()) << "\n";
  out << "checkpoint\t" << a.out << "\nmetrics\t" << metrics_path << "\n";
}

struct EncodeArgs {
  std::string checkpoint, features, modality, out;
};

void run_encode(const EncodeArgs& a, std::ostream& out) {
  const auto modality = parse_modality(a.modality);
  check_output(a.out);
  const auto ck = load_checkpoint(a.checkpoint);
  const auto store = load_modality(a.features, modality, {});
  const auto codes = encode_store(ck.params, store);
  save_codes(a.out, codes);
  out << "encoded\t" << codes.size() << "\nmodality\t" << to_string(modality) << "\nbits\t" << codes.M << "\n";
}

struct RetrieveArgs {
  std::string checkpoint, queries, gallery, out, dump;
  std::vector<std::size_t> ks{100};
};

void run_retrieve(const RetrieveArgs& a, std::ostream& out) {
  if (!a.out.empty()) check_output(a.out);
  if (!a.dump.empty()) check_output(a.dump);
  const auto ck = load_checkpoint(a.checkpoint);
  const auto q = encode_store(ck.params, load_modality(a.queries, Modality::sketch, {}));
  const auto g = encode_store(ck.params, load_modality(a.gallery, Modality::image, {}));
  emit_report(evaluate(q, g, a.ks), a.out, a.dump, out);
}

struct EvalArgs {
  std::string queries, gallery, out, dump;
  std::vector<std::size_t> ks{100};
};

void run_eval(const EvalArgs& a, std::ostream& out) {
  if (!a.out.empty()) check_output(a.out);
  if (!a.dump.empty()) check_output(a.dump);
  const auto q = load_codes(a.queries);
  const auto g = load_codes(a.gallery);
  if (q.M != g.M) {
    throw DimensionError("query codes have M = " + std::to_string(q.M) + " but gallery codes have M = " +
                         std::to_string(g.M));
  }
  emit_report(evaluate(q, g, a.ks), a.out, a.dump, out);
}

struct AblateArgs {
  DataArgs data;
  ConfigArgs config;
  std::string split, test_sketches, test_images, out;
};

void run_ablate(const AblateArgs& a, std::ostream& out) {
  const auto base = resolve_config(a.config);
  if (!a.out.empty()) check_output(a.out);
  const auto split = parse_split(io::read_file(a.split), a.split);
  auto data = load_dataset(a.data);
  check_seen_only(data, split);
  const auto test_sk = load_modality(a.test_sketches, Modality::sketch, {});
  const auto test_im = load_modality(a.test_images, Modality::image, {});

  std::vector<std::pair<std::string, ZsihConfig>> settings;
  settings.emplace_back("full", base);
  for (auto mode : {FusionMode::concat, FusionMode::mfb}) {
    auto c = base;
    c.fusion_mode = mode;
    settings.emplace_back("fusion_mode=" + to_string(mode), c);
  }
  auto no_gcn = base;
  no_gcn.use_gcn = false;
  settings.emplace_back("use_gcn=false", no_gcn);
  for (double t : {1.0, 0.1, 1e-6}) {
    auto c = base;
    c.t = t;
    settings.emplace_back("t=" + text::format_double(t), c);
  }

  std::string table = "setting\tmAP@all\n";
  for (const auto& [name, cfg] : settings) {
    log::info("ablation setting " + name);
    const auto ck = train(cfg, data, {.split = &split});
    const auto rep = evaluate(encode_store(ck.params, test_sk), encode_store(ck.params, test_im), {});
    table += name + "\t" + text::format_double(rep.map_all) + "\n";
  }
  if (!a.out.empty()) write_text(a.out, table);
  out << table;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Zero-shot sketch-image hashing: data synthesis, training, encoding and retrieval evaluation", "zsih"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic two-modality dataset");
  synth_cmd->add_option("--out-dir", synth.out_dir, "output directory")->required();
  synth_cmd->add_option("--classes", synth.classes, "number of classes")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--per-class", synth.per_class, "items per class per modality")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--locations", synth.L, "feature-map locations L")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--channels", synth.C, "feature channels C")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--dim", synth.dim, "semantic vector width")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--noise", synth.noise, "item noise scale")->check(CLI::NonNegativeNumber);
  synth_cmd->add_option("--seed", synth.seed, "random seed")->required();

  SplitArgs split;
  auto* split_cmd = app.add_subcommand("split", "seeded seen/unseen class split with per-split feature files");
  split_cmd->add_option("--sketches", split.sketches)->required()->check(CLI::ExistingFile);
  split_cmd->add_option("--images", split.images)->required()->check(CLI::ExistingFile);
  split_cmd->add_option("--unseen", split.unseen, "number of unseen classes")->required();
  split_cmd->add_option("--seed", split.seed, "random seed")->required();
  split_cmd->add_option("--out-dir", split.out_dir)->required();

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "train on the seen classes");
  add_data_options(train_cmd, train_args.data, true);
  add_config_options(train_cmd, train_args.config);
  train_cmd->add_option("--split", train_args.split, "split file")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--out", train_args.out, "checkpoint path")->required();
  train_cmd->add_option("--metrics", train_args.metrics, "metrics log (default <out>.metrics.tsv)");
  train_cmd->add_option("--resume", train_args.resume, "continue from a checkpoint")->check(CLI::ExistingFile);

  EncodeArgs encode;
  auto* encode_cmd = app.add_subcommand("encode", "binary codes from a modality encoder");
  encode_cmd->add_option("--checkpoint", encode.checkpoint)->required()->check(CLI::ExistingFile);
  encode_cmd->add_option("--features", encode.features)->required()->check(CLI::ExistingFile);
  encode_cmd->add_option("--modality", encode.modality, "sketch or image")->required();
  encode_cmd->add_option("--out", encode.out, "code file")->required();

  RetrieveArgs retrieve;
  auto* retrieve_cmd = app.add_subcommand("retrieve", "encode sketch queries and an image gallery, then evaluate");
  retrieve_cmd->add_option("--checkpoint", retrieve.checkpoint)->required()->check(CLI::ExistingFile);
  retrieve_cmd->add_option("--queries", retrieve.queries, "sketch features")->required()->check(CLI::ExistingFile);
  retrieve_cmd->add_option("--gallery", retrieve.gallery, "image features")->required()->check(CLI::ExistingFile);
  retrieve_cmd->add_option("--k", retrieve.ks, "precision cut-offs")->check(CLI::PositiveNumber);
  retrieve_cmd->add_option("--out", retrieve.out, "report file");
  retrieve_cmd->add_option("--pr-dump", retrieve.dump, "tab-separated P-R points (default <out>.pr.tsv)");

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate query codes against gallery codes");
  eval_cmd->add_option("--queries", eval.queries, "query code file")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--gallery", eval.gallery, "gallery code file")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--k", eval.ks, "precision cut-offs")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--out", eval.out, "report file");
  eval_cmd->add_option("--pr-dump", eval.dump, "tab-separated P-R points (default <out>.pr.tsv)");

  AblateArgs ablate;
  auto* ablate_cmd = app.add_subcommand("ablate", "fusion, graph and bandwidth sweep, one mAP per setting");
  add_data_options(ablate_cmd, ablate.data, true);
  add_config_options(ablate_cmd, ablate.config);
  ablate_cmd->add_option("--split", ablate.split)->required()->check(CLI::ExistingFile);
  ablate_cmd->add_option("--test-sketches", ablate.test_sketches)->required()->check(CLI::ExistingFile);
  ablate_cmd->add_option("--test-images", ablate.test_images)->required()->check(CLI::ExistingFile);
  ablate_cmd->add_option("--out", ablate.out, "result table");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(std::move(reversed));
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*synth_cmd) run_synth(synth, out);
    if (*split_cmd) run_split(split, out);
    if (*train_cmd) run_train(train_args, out);
    if (*encode_cmd) run_encode(encode, out);
    if (*retrieve_cmd) run_retrieve(retrieve, out);
    if (*eval_cmd) run_eval(eval, out);
    if (*ablate_cmd) run_ablate(ablate, out);
  } catch (const ConfigError& e) {
    err << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace zsih::cli
