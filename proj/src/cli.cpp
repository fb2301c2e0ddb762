#include "dermgan/cli.hpp"

#include <CLI11.hpp>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "dermgan/classifier.hpp"
#include "dermgan/evaluation.hpp"
#include "dermgan/preprocess.hpp"
#include "dermgan/synthesis.hpp"

namespace dermgan {
namespace {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

// ---- config plumbing --------------------------------------------------------

void check_keys(const Json& j, const std::vector<std::string>& keys, const std::string& what) {
  if (!j.is_object()) throw ConfigError(what + " config must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) {
      throw ConfigError("unknown " + what + " config key '" + k + "'");
    }
  }
}

template <typename T>
T get(const Json& j, const std::string& key) {
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  }
}

/// Empty-object defaults are free-form maps; other objects accept only known keys.
void merge_strict(Json& base, const Json& over, const std::string& prefix) {
  if (!over.is_object()) throw ConfigError("config '" + (prefix.empty() ? "<root>" : prefix) + "' must be an object");
  for (const auto& [k, v] : over.items()) {
    if (!base.contains(k)) throw ConfigError("unknown config key '" + prefix + k + "'");
    Json& b = base[k];
    if (b.is_object() && !b.empty()) {
      merge_strict(b, v, prefix + k + ".");
    } else {
      b = v;
    }
  }
}

void set_dotted(Json& root, const std::string& key, const std::string& raw) {
  std::vector<std::string> parts;
  std::stringstream ss(key);
  for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);
  if (parts.empty() || key.empty()) throw ConfigError("empty override key");
  Json* node = &root;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const bool free_form = node->is_object() && node->empty();
    if (!node->is_object() || (!free_form && !node->contains(parts[i]))) {
      throw ConfigError("unknown config key '" + key + "'");
    }
    node = &(*node)[parts[i]];
  }
  if (node->is_string()) {
    *node = raw;
    return;
  }
  try {
    *node = Json::parse(raw);
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("override '" + key + "=" + raw + "': value is not valid JSON");
  }
}

Json read_config_file(const fs::path& path, const std::string& subcommand) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file '" + path.string() + "' is not valid JSON: " + e.what());
  }
  // A resolved snapshot is accepted as a config file.
  if (j.is_object() && j.contains("subcommand")) {
    if (j["subcommand"] != subcommand) {
      throw ConfigError("config file '" + path.string() + "' is a snapshot of '" +
                        j["subcommand"].get<std::string>() + "', not '" + subcommand + "'");
    }
    if (!j.contains("config")) throw ConfigError("snapshot '" + path.string() + "' has no 'config' object");
    return j["config"];
  }
  return j;
}

// ---- section codecs ---------------------------------------------------------

Json phantom_json(const PhantomConfig& c) {
  return {{"n_cases", c.n_cases},       {"image_size", c.image_size},   {"num_classes", c.num_classes},
          {"seed", c.seed},             {"per_class_counts", c.per_class_counts}, {"jitter", c.jitter},
          {"train_ratio", c.train_ratio}, {"validation_ratio", c.validation_ratio}};
}

PhantomConfig phantom_from(const Json& j) {
  check_keys(j, {"n_cases", "image_size", "num_classes", "seed", "per_class_counts", "jitter", "train_ratio",
                 "validation_ratio"},
             "phantom");
  PhantomConfig c;
  c.n_cases = get<int>(j, "n_cases");
  c.image_size = get<int>(j, "image_size");
  c.num_classes = get<int>(j, "num_classes");
  c.seed = get<uint64_t>(j, "seed");
  c.per_class_counts = get<std::vector<int>>(j, "per_class_counts");
  c.jitter = get<int>(j, "jitter");
  c.train_ratio = get<double>(j, "train_ratio");
  c.validation_ratio = get<double>(j, "validation_ratio");
  if (c.n_cases < 1 && c.per_class_counts.empty()) throw ConfigError("phantom n_cases must be >= 1");
  try {
    validate_phantom_config(c);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

Json crops_json(const CropSetConfig& c) {
  return {{"crops_per_group", c.crops_per_group}, {"target_size", c.target_size}, {"margin", c.margin},
          {"scale_max", c.scale_max}, {"seed", c.seed}};
}

CropSetConfig crops_from(const Json& j) {
  check_keys(j, {"crops_per_group", "target_size", "margin", "scale_max", "seed"}, "crop");
  CropSetConfig c;
  c.crops_per_group = get<int>(j, "crops_per_group");
  c.target_size = get<int>(j, "target_size");
  c.margin = get<int>(j, "margin");
  c.scale_max = get<double>(j, "scale_max");
  c.seed = get<uint64_t>(j, "seed");
  if (c.crops_per_group < 1) throw ConfigError("crops_per_group must be >= 1");
  if (c.target_size < 8) throw ConfigError("target_size must be >= 8");
  if (c.margin < 0) throw ConfigError("margin must be >= 0");
  if (!(c.scale_max >= 1.0)) throw ConfigError("scale_max must be >= 1");
  return c;
}

Json embedder_json(const EmbedderSpec& e) {
  return {{"kind", std::string(to_string(e.kind))}, {"dim", e.dim}, {"seed", e.seed}, {"weights", e.weights.string()}};
}

EmbedderSpec embedder_from(const Json& j) {
  check_keys(j, {"kind", "dim", "seed", "weights"}, "embedder");
  EmbedderSpec e;
  e.kind = parse_embedder(get<std::string>(j, "kind"));
  e.dim = get<int>(j, "dim");
  e.seed = get<uint64_t>(j, "seed");
  e.weights = get<std::string>(j, "weights");
  if (e.dim < 1) throw ConfigError("embedder dim must be >= 1");
  if (e.kind == EmbedderKind::kPretrainedInceptionPool3) {
    throw ConfigError(
        "embedder 'pretrained-inception-pool3' is not available in this build; use small-trained-extractor or "
        "random-projection");
  }
  return e;
}

Json fid_json(const FidSettings& f) {
  return {{"embedder", embedder_json(f.embedder)}, {"trials", f.trials}, {"subsample", f.subsample}, {"seed", f.seed}};
}

FidSettings fid_from(const Json& j) {
  check_keys(j, {"embedder", "trials", "subsample", "seed"}, "fid");
  FidSettings f;
  f.embedder = embedder_from(j.at("embedder"));
  f.trials = get<int>(j, "trials");
  f.subsample = get<int>(j, "subsample");
  f.seed = get<uint64_t>(j, "seed");
  if (f.trials < 1) throw ConfigError("fid trials must be >= 1");
  if (f.subsample < 0 || f.subsample == 1) throw ConfigError("fid subsample must be 0 or >= 2");
  return f;
}

Split split_from(const Json& j, const std::string& key) {
  try {
    return parse_split(get<std::string>(j, key));
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  }
}

std::vector<uint64_t> seeds_from(const Json& j, const std::string& key) {
  auto s = get<std::vector<uint64_t>>(j, key);
  if (s.empty()) throw ConfigError("config key '" + key + "' needs at least one seed");
  return s;
}

fs::path path_from(const Json& j, const std::string& key) {
  const auto s = get<std::string>(j, key);
  if (s.empty()) throw ConfigError("config key '" + key + "' (a path) is required");
  return s;
}

DatasetManifest manifest_at(const fs::path& p) {
  return load_manifest(fs::is_directory(p) ? p / "manifest.jsonl" : p, {.check_image_bounds = false});
}

SemanticMap sweep_source(const DatasetManifest& m, const std::string& case_id, const CodeTables& codes) {
  if (m.records.empty()) throw MapError("sweep manifest has no records");
  const CaseRecord* r = &m.records.front();
  if (!case_id.empty()) {
    r = nullptr;
    for (const auto& c : m.records)
      if (c.case_id == case_id) r = &c;
    if (r == nullptr) throw MapError("case '" + case_id + "' not found in sweep manifest");
  }
  int w = m.image_width, h = m.image_height;
  if (w <= 0 || h <= 0) std::tie(w, h) = read_png_size(m.resolve(*r));
  return map_for_record(*r, w, h, codes);
}

// ---- subcommands ------------------------------------------------------------

using Action = std::function<void(std::ostream& log)>;

struct Binding {
  std::string flag;  // e.g. "--steps"
  std::string key;   // dotted config key
  std::string help;
  std::string value;
  bool given = false;
  Binding(std::string f, std::string k, std::string h) : flag(std::move(f)), key(std::move(k)), help(std::move(h)) {}
};

struct Command {
  std::string name;
  std::string description;
  Json defaults;
  std::vector<Binding> bindings;
  /// Validates and converts `cfg`; any throw here is a config error.
  std::function<Action(const Json& cfg, const fs::path& out)> prepare;
};

std::vector<Command> commands() {
  std::vector<Command> cmds;

  PhantomConfig pc;
  cmds.push_back(
      {"phantom",
       "Render a phantom dataset with exact ground truth",
       {{"phantom", phantom_json(pc)}},
       {{"--n", "phantom.n_cases", "number of cases"},
        {"--size", "phantom.image_size", "image side in pixels"},
        {"--k", "phantom.num_classes", "number of condition classes"},
        {"--seed", "phantom.seed", "dataset seed"}},
       [](const Json& cfg, const fs::path& out) -> Action {
         const auto c = phantom_from(cfg.at("phantom"));
         return [c, out](std::ostream& log) {
           const auto m = generate_phantom_dataset(c, out);
           log << "phantom: wrote " << m.records.size() << " cases to " << out.string() << "\n";
         };
       }});

  cmds.push_back({"preprocess",
                  "Crop ROI groups of a manifest into a fixed-size crop set",
                  {{"input", ""}, {"crops", crops_json(CropSetConfig{})}},
                  {{"--input", "input", "source manifest (file or directory)"},
                   {"--target-size", "crops.target_size", "crop side in pixels"},
                   {"--crops-per-group", "crops.crops_per_group", "crops per ROI group"},
                   {"--margin", "crops.margin", "ROI grouping margin in pixels"},
                   {"--seed", "crops.seed", "crop sampling seed"}},
                  [](const Json& cfg, const fs::path& out) -> Action {
                    const auto input = path_from(cfg, "input");
                    const auto c = crops_from(cfg.at("crops"));
                    return [input, c, out](std::ostream& log) {
                      const auto m = build_crop_set(manifest_at(input), c, out);
                      log << "preprocess: wrote " << m.records.size() << " crops to " << out.string() << "\n";
                    };
                  }});

  const Json gan_defaults = {{"generator", to_json(GeneratorConfig{})},
                             {"discriminator", to_json(DiscriminatorConfig{})},
                             {"train", to_json(TrainConfig{})}};
  {
    Json d = {{"crops", ""}, {"resume_from", ""}, {"progress_every", 100}};
    d.update(gan_defaults);
    cmds.push_back({"train-gan",
                    "Train the map-to-image generator on a crop set",
                    d,
                    {{"--crops", "crops", "crop manifest (file or directory)"},
                     {"--steps", "train.steps", "optimizer steps"},
                     {"--batch-size", "train.batch_size", "batch size"},
                     {"--seed", "train.seed", "training seed"},
                     {"--precision", "train.precision", "float32 or float64"},
                     {"--resume", "resume_from", "checkpoint directory to resume from"}},
                    [](const Json& cfg, const fs::path& out) -> Action {
                      const auto crops = path_from(cfg, "crops");
                      const auto g = generator_config_from_json(cfg.at("generator"));
                      const auto d = discriminator_config_from_json(cfg.at("discriminator"));
                      const auto t = train_config_from_json(cfg.at("train"));
                      TrainOptions opts;
                      if (const auto r = get<std::string>(cfg, "resume_from"); !r.empty()) opts.resume_from = r;
                      opts.progress_every = get<int64_t>(cfg, "progress_every");
                      return [=](std::ostream& log) {
                        const auto result = train_any(manifest_at(crops), g, d, t, out, opts);
                        log << "train-gan: final checkpoint " << result.final_checkpoint.string() << "\n";
                      };
                    }});
  }

  cmds.push_back(
      {"generate",
       "Synthesize images from perturbed pool maps or explicit map triples",
       {{"checkpoint", ""},
        {"pool", ""},
        {"split", "train"},
        {"triples", Json::array()},
        {"count", 100},
        {"seed", 1},
        {"per_class_counts", Json::object()},
        {"id_prefix", "syn"}},
       {{"--checkpoint", "checkpoint", "generator checkpoint directory"},
        {"--pool", "pool", "manifest supplying the map pool and class table"},
        {"--split", "split", "pool split: train, validation or test"},
        {"--count", "count", "number of images"},
        {"--seed", "seed", "generation seed"}},
       [](const Json& cfg, const fs::path& out) -> Action {
         check_keys(cfg, {"checkpoint", "pool", "split", "triples", "count", "seed", "per_class_counts", "id_prefix"},
                    "generate");
         GenerationRequest req;
         req.checkpoint = path_from(cfg, "checkpoint");
         req.count = get<int>(cfg, "count");
         req.seed = get<uint64_t>(cfg, "seed");
         req.id_prefix = get<std::string>(cfg, "id_prefix");
         req.out_dir = out;
         if (req.count < 1) throw ConfigError("generate count must be >= 1");
         for (const auto& [k, v] : cfg.at("per_class_counts").items()) {
           try {
             req.per_class_counts[std::stoi(k)] = v.get<int>();
           } catch (const std::exception&) {
             throw ConfigError("per_class_counts entries must map class ids to counts");
           }
         }
         for (const auto& t : cfg.at("triples")) {
           try {
             MapTriple m{parse_fitzpatrick(t.at("skin").get<std::string>()), t.at("condition_id").get<int>(), {}};
             for (const auto& b : t.at("rois")) {
               const auto v = b.get<std::array<int, 4>>();
               m.rois.push_back({v[0], v[1], v[2], v[3]});
             }
             req.triples.push_back(std::move(m));
           } catch (const std::exception& e) {
             throw ConfigError(std::string("triples entries need skin, condition_id and rois: ") + e.what());
           }
         }
         const auto pool = path_from(cfg, "pool");
         const auto split = split_from(cfg, "split");
         return [req, pool, split](std::ostream& log) mutable {
           const auto src = manifest_at(pool);
           req.class_table = src.class_table;
           if (req.triples.empty()) req.pool = map_pool(src, split);
           const auto m = generate_images(req);
           log << "generate: wrote " << m.records.size() << " images to " << req.out_dir.string() << "\n";
         };
       }});

  for (const bool size_sweep_cmd : {false, true}) {
    Json d = {{"checkpoint", ""}, {"manifest", ""}, {"case_id", ""}};
    std::vector<Binding> b = {{"--checkpoint", "checkpoint", "generator checkpoint directory"},
                              {"--manifest", "manifest", "manifest holding the source map"},
                              {"--case", "case_id", "source case id (default: first record)"}};
    if (size_sweep_cmd) {
      d["scales"] = {0.5, 0.75, 1.0, 1.25, 1.5};
      b.push_back({"--scales", "scales", "JSON list of ROI scale factors"});
    }
    cmds.push_back(
        {size_sweep_cmd ? "sweep-size" : "sweep-color",
         size_sweep_cmd ? "Render one map at several ROI scales" : "Render one map at every skin tone",
         d, b,
         [size_sweep_cmd](const Json& cfg, const fs::path& out) -> Action {
           const auto ckpt = path_from(cfg, "checkpoint");
           const auto manifest = path_from(cfg, "manifest");
           const auto case_id = get<std::string>(cfg, "case_id");
           std::vector<double> scales;
           if (size_sweep_cmd) {
             scales = get<std::vector<double>>(cfg, "scales");
             if (scales.empty()) throw ConfigError("scales must be non-empty");
             for (double s : scales)
               if (!(s > 0)) throw ConfigError("scales must be positive");
           }
           return [=](std::ostream& log) {
             const auto m = manifest_at(manifest);
             const CodeTables codes(m.num_classes());
             const auto map = sweep_source(m, case_id, codes);
             const auto images = size_sweep_cmd ? size_sweep(map, scales, ckpt, codes) : color_sweep(map, ckpt, codes);
             write_sweep(images, out, size_sweep_cmd ? "size" : "color");
             log << (size_sweep_cmd ? "sweep-size" : "sweep-color") << ": wrote " << images.size() << " images\n";
           };
         }});
  }

  {
    Json d = {{"real", ""}, {"fake", ""}};
    d.update(fid_json(FidSettings{}));
    cmds.push_back({"fid",
                    "Frechet distance between two PNG directories",
                    d,
                    {{"--real", "real", "directory of real PNGs"},
                     {"--fake", "fake", "directory of generated PNGs"},
                     {"--embedder", "embedder.kind", "random-projection or small-trained-extractor"},
                     {"--weights", "embedder.weights", "classifier directory for the extractor embedder"},
                     {"--trials", "trials", "subsampling trials"},
                     {"--subsample", "subsample", "images per trial (0 = smaller set size)"},
                     {"--seed", "seed", "subsampling seed"}},
                    [](const Json& cfg, const fs::path& out) -> Action {
                      const auto real = path_from(cfg, "real");
                      const auto fake = path_from(cfg, "fake");
                      Json rest = cfg;
                      rest.erase("real");
                      rest.erase("fake");
                      const auto f = fid_from(rest);
                      return [=](std::ostream& log) {
                        const auto embedder = make_embedder(f.embedder);
                        const auto r = fid_of_sets(read_pngs(collect_pngs(real)), read_pngs(collect_pngs(fake)),
                                                   *embedder, f.trials, f.subsample, f.seed);
                        std::ofstream(out / "fid.json") << r.to_json().dump(2) << "\n";
                        log << "fid: " << r.mean << " +/- " << r.half_width << "\n";
                      };
                    }});
  }

  {
    FidSettings fid;
    fid.embedder.kind = EmbedderKind::kSmallTrainedExtractor;
    Json d = {{"crops", ""}, {"variants", kAblationColumns}, {"seeds", {1, 2, 3}}};
    d["variants"].erase(0);
    d.update(gan_defaults);
    d["fid"] = fid_json(fid);
    d["extractor"] = to_json(ClassifierConfig{});
    cmds.push_back({"ablate",
                    "Train each ablation variant per seed and tabulate FID",
                    d,
                    {{"--crops", "crops", "crop manifest (file or directory)"},
                     {"--steps", "train.steps", "optimizer steps per variant"},
                     {"--seeds", "seeds", "JSON list of seeds"},
                     {"--embedder", "fid.embedder.kind", "random-projection or small-trained-extractor"}},
                    [](const Json& cfg, const fs::path& out) -> Action {
                      const auto crops = path_from(cfg, "crops");
                      AblationSettings s;
                      const auto g = generator_config_from_json(cfg.at("generator"));
                      const auto t = train_config_from_json(cfg.at("train"));
                      s.discriminator = discriminator_config_from_json(cfg.at("discriminator"));
                      s.seeds = seeds_from(cfg, "seeds");
                      s.fid = fid_from(cfg.at("fid"));
                      s.extractor = classifier_config_from_json(cfg.at("extractor"));
                      const auto wanted = get<std::vector<std::string>>(cfg, "variants");
                      for (const auto& v : standard_variants(g, t))
                        if (std::find(wanted.begin(), wanted.end(), v.name) != wanted.end()) s.variants.push_back(v);
                      for (const auto& w : wanted)
                        if (std::none_of(s.variants.begin(), s.variants.end(),
                                         [&](const AblationVariant& v) { return v.name == w; }))
                          throw ConfigError("unknown ablation variant '" + w + "'");
                      if (s.variants.empty()) throw ConfigError("ablation needs at least one variant");
                      return [=](std::ostream& log) {
                        const auto table = run_ablation(manifest_at(crops), s, out);
                        log << table.text();
                      };
                    }});
  }

  {
    const AugmentationSettings a;
    cmds.push_back({"augment-experiment",
                    "Compare a classifier trained on real data with one trained on real plus synthetic data",
                    {{"real", ""},
                     {"synthetic", ""},
                     {"train_split", "train"},
                     {"test_split", "test"},
                     {"classifier", to_json(a.classifier)},
                     {"seeds", a.seeds},
                     {"bootstrap_resamples", a.bootstrap_resamples},
                     {"rare_class", a.rare_class}},
                    {{"--real", "real", "real manifest (train and test splits)"},
                     {"--synthetic", "synthetic", "synthetic manifest"},
                     {"--seeds", "seeds", "JSON list of seeds"},
                     {"--rare-class", "rare_class", "class id highlighted in the report (0 = none)"}},
                    [](const Json& cfg, const fs::path& out) -> Action {
                      const auto real = path_from(cfg, "real");
                      const auto synthetic = path_from(cfg, "synthetic");
                      const auto train_split = split_from(cfg, "train_split");
                      const auto test_split = split_from(cfg, "test_split");
                      AugmentationSettings s;
                      s.classifier = classifier_config_from_json(cfg.at("classifier"));
                      s.seeds = seeds_from(cfg, "seeds");
                      s.bootstrap_resamples = get<int>(cfg, "bootstrap_resamples");
                      s.rare_class = get<int>(cfg, "rare_class");
                      if (s.bootstrap_resamples < 1) throw ConfigError("bootstrap_resamples must be >= 1");
                      return [=](std::ostream& log) {
                        const auto rm = manifest_at(real);
                        if (s.classifier.n_classes < rm.num_classes() + 1) {
                          throw ConfigError("classifier.n_classes must be >= " + std::to_string(rm.num_classes() + 1));
                        }
                        const auto sm = manifest_at(synthetic);
                        const auto report = run_augmentation_experiment(
                            load_labeled(rm, train_split), load_labeled(sm, std::nullopt),
                            load_labeled(rm, test_split), s, out);
                        for (const auto& r : report.seeds) {
                          log << "augment-experiment: seed " << r.seed << " top1 " << r.top1_baseline << " -> "
                              << r.top1_augmented << " (p=" << r.p_value << ")\n";
                        }
                      };
                    }});
  }
  return cmds;
}

}  // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  auto cmds = commands();
  CLI::App app("Semantic-map-conditioned skin image synthesis pipeline", "dermgan");
  app.require_subcommand(1, 1);

  struct Common {
    std::string config;
    std::vector<std::string> overrides;
    std::string out;
  };
  std::vector<Common> common(cmds.size());
  std::vector<CLI::App*> subs;
  for (std::size_t i = 0; i < cmds.size(); ++i) {
    auto* sub = app.add_subcommand(cmds[i].name, cmds[i].description);
    sub->add_option("--config", common[i].config, "JSON config file (a resolved_config.json snapshot also works)");
    sub->add_option("--set", common[i].overrides, "override a config value: dotted.key=value (repeatable)");
    common[i].out = "runs/" + cmds[i].name;
    sub->add_option("--out", common[i].out, "output directory")->capture_default_str();
    for (auto& b : cmds[i].bindings) {
      sub->add_option(b.flag, b.value, b.help + " [" + b.key + "]");
    }
    subs.push_back(sub);
  }

  if (!args.empty() && !args[0].empty() && args[0][0] != '-' &&
      std::none_of(cmds.begin(), cmds.end(), [&](const Command& c) { return c.name == args[0]; })) {
    err << "error: unknown subcommand '" << args[0] << "'; expected one of:";
    for (const auto& c : cmds) err << " " << c.name;
    err << "\n";
    return kExitUsage;
  }
  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  std::size_t idx = 0;
  while (idx < subs.size() && !subs[idx]->parsed()) ++idx;
  auto& cmd = cmds[idx];
  auto& opt = common[idx];
  for (auto& b : cmd.bindings) b.given = subs[idx]->count(b.flag) > 0;

  const fs::path out_dir = opt.out;
  Json cfg = cmd.defaults;
  Action action;
  try {
    if (!opt.config.empty()) merge_strict(cfg, read_config_file(opt.config, cmd.name), "");
    for (const auto& b : cmd.bindings)
      if (b.given) set_dotted(cfg, b.key, b.value);
    for (const auto& o : opt.overrides) {
      const auto eq = o.find('=');
      if (eq == std::string::npos) throw ConfigError("override '" + o + "' must be key=value");
      set_dotted(cfg, o.substr(0, eq), o.substr(eq + 1));
    }
    action = cmd.prepare(cfg, out_dir);
  } catch (const std::exception& e) {
    err << "error: " << cmd.name << ": " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    fs::create_directories(out_dir);
    std::ofstream(out_dir / kResolvedConfig) << Json{{"subcommand", cmd.name}, {"config", cfg}}.dump(2) << "\n";
    action(err);
  } catch (const ConfigError& e) {
    err << "error: " << cmd.name << ": " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << cmd.name << ": " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

int run_command(const std::vector<std::string>& args) { return run_command(args, std::cout, std::cerr); }

}  // namespace dermgan
