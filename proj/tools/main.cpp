#include <csignal>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "gramsmear/alserver.hpp"
#include "gramsmear/bagging.hpp"
#include "gramsmear/error.hpp"
#include "gramsmear/evaluate.hpp"
#include "gramsmear/image_io.hpp"
#include "gramsmear/model.hpp"
#include "gramsmear/optimize.hpp"
#include "gramsmear/synthsmear.hpp"

using namespace gramsmear;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct RunOptions {
  std::string manifest;
  std::string mode;
  std::string config;
  std::string embeddings;
  std::string out;
  std::string checkpoint;
  std::optional<std::uint64_t> seed;
  std::optional<std::uint64_t> split_seed;
  std::optional<int> epochs;
  int folds = 3;
  std::optional<int> fold;
  int threads = 1;
  std::vector<std::string> categories;
};

struct Resolved {
  DatasetManifest manifest;
  std::vector<Bag> bags;
  ModelConfig model;
  TrainConfig train;
  CrossvalOptions cv;
  std::optional<EmbeddingTable> table;
  const EmbeddingTable* table_ptr() const { return table ? &*table : nullptr; }
};

json read_json_file(const std::string& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw DataError(path + ": " + e.what());
  }
}

void log_config(const char* what, const json& j) { std::cerr << what << " resolved config: " << j.dump() << "\n"; }

Resolved resolve(const RunOptions& o, bool need_train_config = true) {
  Resolved r;
  r.manifest = read_manifest(o.manifest);
  if (!o.mode.empty() && mode_from_string(o.mode) != r.manifest.mode) {
    throw DataError("--mode " + o.mode + " does not match manifest mode " + to_string(r.manifest.mode));
  }
  const Mode mode = r.manifest.mode;
  json cfg = o.config.empty() ? json::object() : read_json_file(o.config);
  for (const auto& [key, _] : cfg.items()) {
    if (key != "model" && key != "train" && key != "crossval") throw DataError("config: unknown section '" + key + "'");
  }
  json mj = cfg.value("model", json::object());
  mj["mode"] = to_string(mode);
  r.model = model_config_from_json(mj);
  r.model.categories = r.manifest.category_count();
  if (need_train_config) {
    r.train = train_config_from_json(cfg.value("train", json::object()), TrainConfig::defaults(mode));
    r.train.mode = mode;
    if (o.seed) r.train.seed = *o.seed;
    if (o.epochs) r.train.epochs = *o.epochs;
    r.train.threads = o.threads;
    r.train.validate();
  }
  const json cv = cfg.value("crossval", json::object());
  r.cv.folds = cv.value("folds", o.folds);
  if (o.folds != 3) r.cv.folds = o.folds;
  r.cv.split_seed = cv.value("split_seed", o.seed.value_or(0));
  if (o.split_seed) r.cv.split_seed = *o.split_seed;

  LoadOptions load;
  load.threads = o.threads;
  if (r.model.encoder == EncoderKind::frozen_table) {
    if (o.embeddings.empty()) throw DataError("frozen-table encoder needs --embeddings");
    r.table = load_embeddings(o.embeddings);
    r.model.embed_dim = r.table->dim();
    load.with_pixels = false;
  } else if (need_train_config) {
    load.context_margin = r.train.augment.translate_jitter;
  }
  r.model.validate();
  r.bags = load_bags(r.manifest, fs::path(o.manifest).parent_path(), load);
  return r;
}

fs::path suffixed(const fs::path& p, const std::string& suffix) {
  auto out = p.parent_path() / (p.stem().string() + suffix + p.extension().string());
  return out;
}

void check_model_matches(const MilModel<float>& m, const Resolved& r) {
  if (m.config.mode != r.manifest.mode) {
    throw DataError("checkpoint is a " + to_string(m.config.mode) + " model but the manifest is " + to_string(r.manifest.mode));
  }
  if (m.config.categories != r.manifest.category_count()) {
    throw DataError("checkpoint has " + std::to_string(m.config.categories) + " categories, manifest has " +
                    std::to_string(r.manifest.category_count()));
  }
  if (m.config.encoder == EncoderKind::frozen_table && !r.table) throw DataError("frozen-table checkpoint needs --embeddings");
}

std::vector<const Bag*> select_bags(const Resolved& r, const RunOptions& o, bool test) {
  std::vector<const Bag*> out;
  if (!o.fold) {
    for (const auto& b : r.bags) out.push_back(&b);
    return out;
  }
  const auto fa = patient_stratified_folds(r.manifest, r.cv.folds, r.cv.split_seed);
  for (auto i : test ? fa.test_indices(r.manifest, *o.fold) : fa.train_indices(r.manifest, *o.fold)) out.push_back(&r.bags[i]);
  return out;
}

void add_common(CLI::App* sub, RunOptions& o, bool manifest = true) {
  if (manifest) sub->add_option("--manifest", o.manifest, "Dataset manifest (JSON Lines)")->required()->check(CLI::ExistingFile);
  sub->add_option("--mode", o.mode, "bacteria or fungi (must match the manifest)");
  sub->add_option("--threads", o.threads, "Worker threads")->check(CLI::PositiveNumber);
}

void add_training(CLI::App* sub, RunOptions& o) {
  sub->add_option("--config", o.config, "JSON config with model/train/crossval sections")->check(CLI::ExistingFile);
  sub->add_option("--embeddings", o.embeddings, "EMB1 frozen embedding file")->check(CLI::ExistingFile);
  sub->add_option("--seed", o.seed, "Training and split seed");
  sub->add_option("--split-seed", o.split_seed, "Fold assignment seed (defaults to --seed)");
  sub->add_option("--epochs", o.epochs, "Override the epoch count")->check(CLI::NonNegativeNumber);
  sub->add_option("--folds", o.folds, "Cross-validation folds")->check(CLI::Range(2, 100));
}

AlServer* g_server = nullptr;

void on_signal(int) {
  if (g_server) g_server->stop();
}

SegmenterParams read_params(const std::string& file, const SegmenterParams& base, CLI::App* sub, double thr, int lo,
                            int hi, int conn) {
  SegmenterParams p = file.empty() ? base : segmenter_params_from_json(read_json_file(file));
  if (sub->count("--threshold")) p.chroma_threshold = thr;
  if (sub->count("--min-area")) p.min_area = lo;
  if (sub->count("--max-area")) p.max_area = hi;
  if (sub->count("--connectivity")) p.connectivity = conn;
  validate(p);
  return p;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gramsmear: Gram-smear segmentation, MIL classification and evaluation toolkit"};
  app.require_subcommand(1);
  RunOptions o;

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic smear dataset");
  std::string spec_file, synth_emb;
  std::optional<int> patients, images;
  double separability = 10.0;
  int emb_dim = 8;
  synth->add_option("--spec", spec_file, "Dataset spec JSON (defaults to the built-in spec for --mode)")->check(CLI::ExistingFile);
  synth->add_option("--mode", o.mode, "bacteria or fungi");
  synth->add_option("--seed", o.seed, "Generator seed (overrides the spec)");
  synth->add_option("--out", o.out, "Output directory")->required();
  synth->add_option("--patients", patients, "Patients per category")->check(CLI::PositiveNumber);
  synth->add_option("--images", images, "Images per patient")->check(CLI::PositiveNumber);
  synth->add_option("--embeddings", synth_emb, "Also write EMB1 patch embeddings to this file");
  synth->add_option("--separability", separability, "Embedding cluster separation")->check(CLI::NonNegativeNumber);
  synth->add_option("--dim", emb_dim, "Embedding dimension")->check(CLI::PositiveNumber);
  synth->add_option("--threads", o.threads, "Worker threads")->check(CLI::PositiveNumber);

  // segment
  auto* segment = app.add_subcommand("segment", "Segment one image with the baseline segmenter");
  std::string seg_image, params_file;
  double thr = 60;
  int min_area = 12, max_area = 1 << 20, connectivity = 8, tile = 1024;
  std::optional<double> max_diameter;
  segment->add_option("--image", seg_image, "Input PNG")->required()->check(CLI::ExistingFile);
  segment->add_option("--out", o.out, "Output mask (.png for 16-bit ids, .json for RLE)")->required();
  segment->add_option("--params", params_file, "Segmenter parameter JSON")->check(CLI::ExistingFile);
  segment->add_option("--threshold", thr, "Chroma threshold");
  segment->add_option("--min-area", min_area, "Minimum instance area (px)");
  segment->add_option("--max-area", max_area, "Maximum instance area (px)");
  segment->add_option("--connectivity", connectivity, "4 or 8")->check(CLI::IsMember({4, 8}));
  segment->add_option("--tile", tile, "Tile size")->check(CLI::PositiveNumber);
  segment->add_option("--max-diameter", max_diameter, "Drop instances wider than this (px)");

  // extract
  auto* extract = app.add_subcommand("extract", "Extract patch bags for every manifest entry");
  bool packed = false, use_segmenter = false;
  add_common(extract, o);
  extract->add_option("--out", o.out, "Output directory")->required();
  extract->add_flag("--packed", packed, "Write one BAGS container per bag instead of PNG directories");
  extract->add_flag("--segment", use_segmenter, "Segment with the baseline segmenter instead of reading masks");

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a model on a manifest (or on one fold's training split)");
  add_common(train_cmd, o);
  add_training(train_cmd, o);
  train_cmd->add_option("--fold", o.fold, "Train only on this fold's training patients");
  train_cmd->add_option("--out", o.out, "Checkpoint path")->required();

  // crossval
  auto* cv_cmd = app.add_subcommand("crossval", "Patient-stratified cross-validation with the full report bundle");
  add_common(cv_cmd, o);
  add_training(cv_cmd, o);
  cv_cmd->add_option("--out", o.out, "Report bundle directory")->required();

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_common(eval_cmd, o);
  eval_cmd->add_option("--checkpoint", o.checkpoint, "Model checkpoint")->required();
  eval_cmd->add_option("--embeddings", o.embeddings, "EMB1 frozen embedding file")->check(CLI::ExistingFile);
  eval_cmd->add_option("--fold", o.fold, "Evaluate only this fold's test patients");
  eval_cmd->add_option("--folds", o.folds, "Cross-validation folds")->check(CLI::Range(2, 100));
  eval_cmd->add_option("--seed", o.seed, "Split seed used for --fold");
  eval_cmd->add_option("--split-seed", o.split_seed, "Fold assignment seed");
  eval_cmd->add_option("--out", o.out, "Report directory")->required();

  // subset
  auto* subset = app.add_subcommand("subset", "Cross-validation restricted to a category subset");
  add_common(subset, o);
  add_training(subset, o);
  subset->add_option("--categories", o.categories, "Category names (at least two)")->required()->delimiter(',');
  subset->add_option("--out", o.out, "Report bundle directory")->required();

  // export-embeddings
  auto* export_cmd = app.add_subcommand("export-embeddings", "Export one pooled vector per bag (EMB1)");
  add_common(export_cmd, o);
  export_cmd->add_option("--checkpoint", o.checkpoint, "Model checkpoint")->required();
  export_cmd->add_option("--embeddings", o.embeddings, "EMB1 frozen embedding file")->check(CLI::ExistingFile);
  export_cmd->add_option("--out", o.out, "Output EMB1 file")->required();

  // serve
  auto* serve = app.add_subcommand("serve", "Run the active-learning review server");
  std::string store_dir, host = "127.0.0.1", ui_dir;
  int port = 8080;
  serve->add_option("--store", store_dir, "Annotation store directory")->required();
  serve->add_option("--host", host, "Bind address");
  serve->add_option("--port", port, "Port (0 picks a free one)")->check(CLI::Range(0, 65535));
  serve->add_option("--ui", ui_dir, "Static UI bundle served at /")->check(CLI::ExistingDirectory);

  // al-propose
  auto* propose = app.add_subcommand("al-propose", "Queue segmenter proposals for review");
  std::vector<std::string> al_images;
  propose->add_option("--store", store_dir, "Annotation store directory")->required();
  propose->add_option("--image", al_images, "Input PNG (repeatable)")->check(CLI::ExistingFile);
  propose->add_option("--manifest", o.manifest, "Queue every image of this manifest")->check(CLI::ExistingFile);
  propose->add_option("--params", params_file, "Segmenter parameter JSON")->check(CLI::ExistingFile);
  propose->add_option("--threshold", thr, "Chroma threshold");
  propose->add_option("--min-area", min_area, "Minimum instance area (px)");
  propose->add_option("--max-area", max_area, "Maximum instance area (px)");
  propose->add_option("--connectivity", connectivity, "4 or 8")->check(CLI::IsMember({4, 8}));
  propose->add_option("--tile", tile, "Tile size")->check(CLI::PositiveNumber);

  // al-export
  auto* al_export = app.add_subcommand("al-export", "Export accepted ground truth (OK and CLEAR)");
  al_export->add_option("--store", store_dir, "Annotation store directory")->required()->check(CLI::ExistingDirectory);
  al_export->add_option("--out", o.out, "Export directory")->required();

  // al-refit
  auto* al_refit = app.add_subcommand("al-refit", "Grid-search segmenter parameters against accepted ground truth");
  std::string grid_file;
  al_refit->add_option("--store", store_dir, "Annotation store directory")->required()->check(CLI::ExistingDirectory);
  al_refit->add_option("--grid", grid_file, "Parameter grid JSON")->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (synth->parsed()) {
      DatasetSpec spec;
      if (!spec_file.empty()) {
        spec = dataset_spec_from_json(read_json_file(spec_file));
        if (!o.mode.empty() && mode_from_string(o.mode) != spec.mode) throw DataError("--mode does not match the spec");
      } else {
        const Mode m = o.mode.empty() ? Mode::bacteria : mode_from_string(o.mode);
        spec = m == Mode::bacteria ? DatasetSpec::default_bacteria() : DatasetSpec::default_fungi();
      }
      if (o.seed) spec.seed = *o.seed;
      if (patients) spec.patients_per_category = *patients;
      if (images) spec.images_per_patient = *images;
      log_config("synth", to_json(spec));
      const auto manifest = generate_dataset(spec, o.out, o.threads);
      if (!synth_emb.empty()) {
        LoadOptions load;
        load.with_pixels = false;
        load.threads = o.threads;
        const auto bags = load_bags(manifest, o.out, load);
        save_embeddings(synth_emb, generate_embeddings(bags, separability, emb_dim, spec.seed));
      }
      std::cout << manifest.entries.size() << " images written to " << o.out << "\n";
    } else if (segment->parsed()) {
      const auto p = read_params(params_file, {}, segment, thr, min_area, max_area, connectivity);
      const auto img = read_png(seg_image);
      auto mask = segment_tiled(img, p, tile);
      if (max_diameter) mask = filter_by_diameter(mask, *max_diameter);
      write_mask(o.out, mask);
      std::cout << mask.instance_count() << " instances\n";
    } else if (extract->parsed()) {
      const auto manifest = read_manifest(o.manifest);
      if (!o.mode.empty() && mode_from_string(o.mode) != manifest.mode) throw DataError("--mode does not match the manifest");
      LoadOptions load;
      load.threads = o.threads;
      if (use_segmenter) load.segmenter = SegmenterParams{};
      const auto bags = load_bags(manifest, fs::path(o.manifest).parent_path(), load);
      json summary = json::array();
      for (const auto& b : bags) {
        if (packed) {
          write_file(fs::path(o.out) / (b.bag_id + ".bags"), pack_patches(b.patches));
        } else if (!b.patches.empty()) {
          write_patch_directory(fs::path(o.out) / b.bag_id, b.patches);
        }
        summary.push_back({{"bag_id", b.bag_id}, {"patches", b.patches.size()}, {"empty", b.empty}});
      }
      write_text(fs::path(o.out) / "bags.json", summary.dump(2) + "\n");
      std::cout << bags.size() << " bags extracted\n";
    } else if (train_cmd->parsed()) {
      const auto r = resolve(o);
      json resolved = {{"model", to_json(r.model)}, {"train", to_json(r.train)}};
      if (o.fold) resolved["fold"] = {{"index", *o.fold}, {"folds", r.cv.folds}, {"split_seed", r.cv.split_seed}};
      log_config("train", resolved);
      std::vector<Bag> train_bags;
      for (const Bag* b : select_bags(r, o, false)) train_bags.push_back(*b);
      const auto result = train(r.model, train_bags, r.train, r.table_ptr());
      save_model(o.out, result.model);
      if (result.ema) save_model(suffixed(o.out, "-ema"), *result.ema);
      write_text(o.out + ".history.csv", history_csv(result.history));
      write_text(o.out + ".resolved-config.json", resolved.dump(2) + "\n");
      if (!result.history.empty()) std::cout << "final mean loss " << result.history.back().mean_loss << "\n";
    } else if (cv_cmd->parsed() || subset->parsed()) {
      const auto r = resolve(o);
      CrossvalReport report = subset->parsed()
                                  ? subset_experiment(r.manifest, r.bags, o.categories, r.model, r.train, r.cv, r.table_ptr())
                                  : crossval(r.manifest, r.bags, r.model, r.train, r.cv, r.table_ptr());
      log_config(subset->parsed() ? "subset" : "crossval", report.resolved_config);
      write_report_bundle(o.out, report);
      std::cout << confusion_table(report.aggregate, report.category_names);
      std::cout << "accuracy " << report.mean_accuracy << " +- " << report.std_accuracy << ", macro recall "
                << report.mean_macro_recall << ", macro ROC AUC " << report.mean_macro_auc << "\n";
    } else if (eval_cmd->parsed()) {
      const auto model = load_model(o.checkpoint);
      if (!o.mode.empty() && mode_from_string(o.mode) != model.config.mode) {
        throw DataError("checkpoint is a " + to_string(model.config.mode) + " model, not " + o.mode);
      }
      const auto r = resolve(o, false);
      check_model_matches(model, r);
      const auto bags = select_bags(r, o, true);
      const auto ev = evaluate_fold(model, bags, r.table_ptr(), o.threads);
      json resolved = {{"checkpoint", o.checkpoint}, {"model", to_json(model.config)}};
      if (o.fold) resolved["fold"] = {{"index", *o.fold}, {"folds", r.cv.folds}, {"split_seed", r.cv.split_seed}};
      log_config("eval", resolved);
      const fs::path out(o.out);
      json report = {{"categories", r.manifest.category_names},
                     {"metrics", to_json(ev.metrics)},
                     {"confusion_counts", ev.confusion.counts},
                     {"config", resolved}};
      write_text(out / "report.json", report.dump(2) + "\n");
      write_text(out / "roc.jsonl", scores_jsonl(ev.scored));
      const auto agg = aggregate({ev.confusion});
      write_text(out / "confusion.csv", confusion_csv(agg, r.manifest.category_names));
      write_text(out / "confusion.txt", confusion_table(agg, r.manifest.category_names));
      write_text(out / "resolved-config.json", resolved.dump(2) + "\n");
      std::cout << "accuracy " << ev.metrics.accuracy << " over " << ev.metrics.bags << " bags\n";
    } else if (export_cmd->parsed()) {
      const auto model = load_model(o.checkpoint);
      const auto r = resolve(o, false);
      check_model_matches(model, r);
      const auto table = export_embeddings(model, r.bags, r.table_ptr(), o.threads);
      save_embeddings(o.out, table);
      std::cout << table.size() << " bag embeddings of dimension " << table.dim() << "\n";
    } else if (serve->parsed()) {
      AnnotationStore store(store_dir);
      AlServer server(store, ui_dir);
      const int bound = server.bind(host, port);
      if (bound < 0) throw DataError("cannot bind " + host + ":" + std::to_string(port));
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cout << "listening on http://" << host << ":" << bound << std::endl;
      server.run();
      g_server = nullptr;
    } else if (propose->parsed()) {
      AnnotationStore store(store_dir);
      const auto p = read_params(params_file, store.segmenter(), propose, thr, min_area, max_area, connectivity);
      std::vector<std::pair<std::string, RasterImage>> imgs;
      for (const auto& f : al_images) imgs.emplace_back(fs::path(f).filename().string(), read_png(f));
      if (!o.manifest.empty()) {
        const auto m = read_manifest(o.manifest);
        for (const auto& e : m.entries) imgs.emplace_back(e.image, read_png(fs::path(o.manifest).parent_path() / e.image));
      }
      if (imgs.empty()) throw DataError("al-propose needs --image or --manifest");
      const auto ids = store.propose(imgs, p, tile);
      std::cout << ids.size() << " items proposed, " << store.stats().pending << " pending\n";
    } else if (al_export->parsed()) {
      AnnotationStore store(store_dir);
      std::cout << store.export_training_set(o.out) << " pairs exported to " << o.out << "\n";
    } else if (al_refit->parsed()) {
      AnnotationStore store(store_dir);
      const ParamGrid grid = grid_file.empty() ? ParamGrid{} : param_grid_from_json(read_json_file(grid_file));
      const auto r = store.refit(grid);
      json out = {{"params", to_json(r.params)},
                  {"score", r.score},
                  {"incumbent", to_json(r.incumbent)},
                  {"incumbent_score", r.incumbent_score},
                  {"candidates", r.candidates},
                  {"images", r.images}};
      std::cout << out.dump(2) << "\n";
    }
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
