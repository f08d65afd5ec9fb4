#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cmah/config.hpp"
#include "cmah/data.hpp"
#include "cmah/model.hpp"
#include "cmah/retrieval.hpp"
#include "cmah/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace cmah;

namespace {

class WallClock {
 public:
  WallClock() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

// One manifest per command, written next to the outputs. Everything except
// wall_time_s replays identically for identical flags and seed.
void write_manifest(const std::string& path, const std::string& command, ordered_json config,
                    uint64_t seed, const std::vector<std::pair<std::string, std::string>>& artifacts,
                    const std::vector<std::pair<std::string, int>>& versions, double wall_s) {
  ordered_json j;
  j["command"] = command;
  j["config"] = std::move(config);
  j["seed"] = seed;
  ordered_json arts = ordered_json::object();
  for (const auto& [name, p] : artifacts) arts[name] = p;
  j["artifacts"] = std::move(arts);
  ordered_json vers = ordered_json::object();
  for (const auto& [name, v] : versions) vers[name] = v;
  j["format_versions"] = std::move(vers);
  j["wall_time_s"] = wall_s;
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw FormatError("manifest: cannot open '" + path + "' for writing");
  f << j.dump(2) << "\n";
  f.flush();
  if (!f) throw FormatError("manifest: write to '" + path + "' failed");
}

std::vector<data::ShapeClass> parse_classes(const std::string& value) {
  if (!value.empty() && value.find_first_not_of("0123456789") == std::string::npos) {
    const int n = std::stoi(value);
    if (n < 1 || n > data::kShapeClassCount) {
      throw UsageError("--classes count must be between 1 and " +
                       std::to_string(data::kShapeClassCount));
    }
    auto all = data::all_shape_classes();
    return {all.begin(), all.begin() + n};
  }
  std::vector<data::ShapeClass> out;
  std::string::size_type pos = 0;
  while (pos <= value.size()) {
    const auto comma = value.find(',', pos);
    const std::string name = value.substr(pos, comma == std::string::npos ? comma : comma - pos);
    if (name.empty()) throw UsageError("--classes has an empty entry");
    out.push_back(data::shape_from_name(name));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

std::vector<int> parse_int_list(const std::string& value, const char* flag) {
  std::vector<int> out;
  std::string::size_type pos = 0;
  while (pos <= value.size()) {
    const auto comma = value.find(',', pos);
    const std::string tok = value.substr(pos, comma == std::string::npos ? comma : comma - pos);
    try {
      size_t used = 0;
      const int v = std::stoi(tok, &used);
      if (used != tok.size()) throw std::invalid_argument(tok);
      out.push_back(v);
    } catch (const std::exception&) {
      throw UsageError(std::string(flag) + ": '" + tok + "' is not an integer");
    }
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  if (out.empty()) throw UsageError(std::string(flag) + ": empty list");
  return out;
}

ordered_json spec_json(const data::SyntheticSpec& spec) {
  ordered_json classes = ordered_json::array();
  for (auto c : spec.classes) classes.push_back(data::shape_name(c));
  ordered_json j;
  j["classes"] = std::move(classes);
  j["per_class"] = spec.per_class;
  j["n_points"] = spec.n_points;
  j["image_size"] = spec.image_size;
  j["jitter"] = spec.jitter;
  j["azimuth"] = {spec.azimuth_lo, spec.azimuth_hi};
  j["elevation"] = {spec.elevation_lo, spec.elevation_hi};
  return j;
}

void check_dataset_against(const ModelConfig& mc, const std::vector<data::PairRecord>& recs,
                           bool need_images, bool need_points) {
  for (const auto& rec : recs) {
    if (need_images && (rec.image.h != mc.image_size || rec.image.w != mc.image_size)) {
      throw UsageError("dataset record " + std::to_string(rec.id) + " has a " +
                       std::to_string(rec.image.h) + "x" + std::to_string(rec.image.w) +
                       " image but the model expects " + std::to_string(mc.image_size) + "x" +
                       std::to_string(mc.image_size));
    }
    if (need_points && rec.cloud.rows() != mc.n_points) {
      throw UsageError("dataset record " + std::to_string(rec.id) + " has " +
                       std::to_string(rec.cloud.rows()) + " points but the model expects " +
                       std::to_string(mc.n_points));
    }
  }
}

struct MetricRow {
  std::string metric;
  int k = 0;
  Scalar value = 0.0;
};

void emit_rows(const std::vector<MetricRow>& rows, const std::string& format, std::ostream& os) {
  char buf[128];
  for (const auto& r : rows) {
    if (format == "table") {
      std::snprintf(buf, sizeof buf, "%-10s %6d %12.6f", r.metric.c_str(), r.k, r.value);
      os << buf << "\n";
    } else if (format == "csv") {
      std::snprintf(buf, sizeof buf, "%s,%d,%.6f", r.metric.c_str(), r.k, r.value);
      os << buf << "\n";
    } else {  // json-lines
      std::snprintf(buf, sizeof buf, "{\"metric\":\"%s\",\"k\":%d,\"value\":%.6f}",
                    r.metric.c_str(), r.k, r.value);
      os << buf << "\n";
    }
  }
}

struct StatRow {
  std::string name;
  long long params = 0;
  double flops = 0.0;
};

void emit_stats(const std::vector<StatRow>& rows, const std::string& format, std::ostream& os) {
  char buf[160];
  for (const auto& r : rows) {
    if (format == "table") {
      std::snprintf(buf, sizeof buf, "%-16s %14lld params %14.4e flops", r.name.c_str(), r.params,
                    r.flops);
      os << buf << "\n";
    } else if (format == "csv") {
      std::snprintf(buf, sizeof buf, "%s,%lld,%.4e", r.name.c_str(), r.params, r.flops);
      os << buf << "\n";
    } else {
      std::snprintf(buf, sizeof buf, "{\"component\":\"%s\",\"params\":%lld,\"flops\":%.4e}",
                    r.name.c_str(), r.params, r.flops);
      os << buf << "\n";
    }
  }
}

// Report sink: stdout by default, a file when --out was given (the manifest
// then sits next to it).
class ReportOut {
 public:
  explicit ReportOut(const std::string& path) : path_(path) {
    if (!path_.empty()) {
      file_.open(path_, std::ios::trunc);
      if (!file_) throw FormatError("report: cannot open '" + path_ + "' for writing");
    }
  }
  std::ostream& stream() { return path_.empty() ? std::cout : file_; }
  void close() {
    if (!path_.empty()) {
      file_.flush();
      if (!file_) throw FormatError("report: write to '" + path_ + "' failed");
      file_.close();
    }
  }

 private:
  std::string path_;
  std::ofstream file_;
};

int run_cli(int argc, char** argv) {
  CLI::App app{"cmah: contrastive masked autoencoder hashing for cross-modal retrieval"};
  app.require_subcommand(1);

  // ---- gen-data ----
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic paired dataset");
  std::string gen_classes = std::to_string(data::kShapeClassCount);
  int gen_per_class = 50, gen_points = 256, gen_image = 32;
  uint64_t gen_seed = 0;
  std::string gen_out;
  gen->add_option("--classes", gen_classes,
                  "class count (first n of the canonical eight) or comma-separated names");
  gen->add_option("--per-class", gen_per_class, "records per class");
  gen->add_option("--points", gen_points, "points per cloud");
  gen->add_option("--image-size", gen_image, "square image side");
  gen->add_option("--seed", gen_seed, "generation seed");
  gen->add_option("--out", gen_out, "output dataset path")->required();
  gen->callback([&]() {
    WallClock clock;
    data::SyntheticSpec spec;
    spec.classes = parse_classes(gen_classes);
    spec.per_class = gen_per_class;
    spec.n_points = gen_points;
    spec.image_size = gen_image;
    spec.seed = gen_seed;
    spec.validate();
    auto recs = data::generate(spec);
    data::write_dataset(recs, gen_out);
    std::cout << "wrote " << recs.size() << " records to " << gen_out << "\n";
    write_manifest(gen_out + ".manifest.json", "gen-data", spec_json(spec), gen_seed,
                   {{"dataset", gen_out}}, {{"dataset", 1}}, clock.seconds());
  });

  // ---- train ----
  auto* tr = app.add_subcommand("train", "train a model on a paired dataset");
  std::string tr_data, tr_preset = "desk", tr_out_dir;
  int tr_bits = 16, tr_epochs = 0;
  double tr_tau = 0.0, tr_mask_image = 0.0, tr_mask_point = 0.0;
  uint64_t tr_seed = 0;
  bool tr_deterministic = false;
  tr->add_option("--data", tr_data, "dataset file")->required();
  tr->add_option("--preset", tr_preset, "configuration preset")
      ->check(CLI::IsMember({"paper", "desk"}));
  auto* tr_bits_opt = tr->add_option("--bits", tr_bits, "hash code length");
  auto* tr_epochs_opt = tr->add_option("--epochs", tr_epochs, "training epochs");
  auto* tr_tau_opt = tr->add_option("--tau", tr_tau, "contrastive temperature");
  auto* tr_mi_opt = tr->add_option("--mask-image", tr_mask_image, "image mask ratio");
  auto* tr_mp_opt = tr->add_option("--mask-point", tr_mask_point, "point mask ratio");
  tr->add_option("--seed", tr_seed, "training seed");
  tr->add_flag("--deterministic", tr_deterministic, "pin the worker budget to one thread");
  tr->add_option("--out-dir", tr_out_dir, "output directory")->required();
  tr->callback([&]() {
    WallClock clock;
    ModelConfig mc = ModelConfig::preset(tr_preset);
    if (*tr_bits_opt) {
      if (tr_bits != 16 && tr_bits != 32 && tr_bits != 64) {
        throw UsageError("--bits must be 16, 32, or 64");
      }
      mc.code_bits = tr_bits;
    }
    if (*tr_epochs_opt) mc.epochs = tr_epochs;
    if (*tr_tau_opt) mc.tau = tr_tau;
    if (*tr_mi_opt) mc.mask_ratio_image = tr_mask_image;
    if (*tr_mp_opt) mc.mask_ratio_point = tr_mask_point;
    mc.validate();
    if (tr_deterministic) setenv("CMAH_THREADS", "1", 1);

    auto recs = data::read_dataset(tr_data);
    if (recs.empty()) throw UsageError("train: dataset '" + tr_data + "' has no records");
    check_dataset_against(mc, recs, true, true);

    fs::create_directories(tr_out_dir);
    const std::string ckpt = (fs::path(tr_out_dir) / "model.ckpt").string();
    const std::string log = (fs::path(tr_out_dir) / "train_log.jsonl").string();

    model::CmahModel m(mc, tr_seed);
    train::TrainConfig tc = train::TrainConfig::from_model_config(mc, tr_seed);
    auto result = train::train(m, data::to_samples(recs), tc, ckpt, log);
    std::cout << "trained " << result.log.records.size() << " steps, checkpoint " << ckpt << "\n";
    write_manifest((fs::path(tr_out_dir) / "manifest.json").string(), "train",
                   ordered_json::parse(mc.to_json()), tr_seed,
                   {{"checkpoint", ckpt}, {"train_log", log}}, {{"checkpoint", 1}},
                   clock.seconds());
  });

  // ---- encode ----
  auto* en = app.add_subcommand("encode", "encode a dataset into binary codes");
  std::string en_ckpt, en_data, en_modality, en_out;
  en->add_option("--ckpt", en_ckpt, "checkpoint file")->required();
  en->add_option("--data", en_data, "dataset file")->required();
  en->add_option("--modality", en_modality, "which side to encode")
      ->required()
      ->check(CLI::IsMember({"image", "point"}));
  en->add_option("--out", en_out, "output code file")->required();
  en->callback([&]() {
    WallClock clock;
    model::CmahModel m = model::CmahModel::load(en_ckpt);
    auto recs = data::read_dataset(en_data);
    if (recs.empty()) throw UsageError("encode: dataset '" + en_data + "' has no records");
    const bool imageside = en_modality == "image";
    check_dataset_against(m.config(), recs, imageside, !imageside);

    const int n = static_cast<int>(recs.size());
    RowMat codes(n, m.config().code_bits);
    parallel_for(n, [&](int64_t i) {
      const Array h = imageside ? m.encode_image_for_retrieval(recs[i].image)
                                : m.encode_points_for_retrieval(recs[i].cloud);
      codes.row(i) = model::CmahModel::binarize(h).transpose();
    });
    auto db = retrieval::CodeDatabase::from_sign_rows(
        codes, imageside ? retrieval::Modality::image : retrieval::Modality::point,
        data::labels_of(recs));
    db.save(en_out);
    std::cout << "encoded " << n << " " << en_modality << " codes (K=" << db.k() << ") to "
              << en_out << "\n";
    ordered_json cfg = ordered_json::parse(m.config().to_json());
    cfg["modality"] = en_modality;
    write_manifest(en_out + ".manifest.json", "encode", std::move(cfg), m.seed(),
                   {{"codes", en_out}, {"checkpoint", en_ckpt}, {"dataset", en_data}},
                   {{"codes", 1}, {"checkpoint", 1}, {"dataset", 1}}, clock.seconds());
  });

  // ---- eval ----
  auto* ev = app.add_subcommand("eval", "retrieval metrics from two code files");
  std::string ev_query, ev_gallery, ev_task, ev_format = "table", ev_curve = "1,5,10,20,50,100";
  std::string ev_out;
  int ev_map_k = 100;
  bool ev_no_self_exclude = false;
  ev->add_option("--query-codes", ev_query, "query code file")->required();
  ev->add_option("--gallery-codes", ev_gallery, "gallery code file")->required();
  ev->add_option("--task", ev_task, "retrieval direction")
      ->required()
      ->check(CLI::IsMember({"i2p", "p2i"}));
  ev->add_option("--map-k", ev_map_k, "ranking depth for mAP");
  ev->add_option("--curve-ks", ev_curve, "comma-separated precision@k depths");
  ev->add_option("--format", ev_format, "output row format")
      ->check(CLI::IsMember({"table", "csv", "json-lines"}));
  ev->add_flag("--no-self-exclude", ev_no_self_exclude,
               "score aligned query/gallery rows against themselves too");
  ev->add_option("--out", ev_out, "write rows to a file instead of stdout");
  ev->callback([&]() {
    WallClock clock;
    auto queries = retrieval::CodeDatabase::load(ev_query);
    auto gallery = retrieval::CodeDatabase::load(ev_gallery);
    const auto want_q = ev_task == "i2p" ? retrieval::Modality::image : retrieval::Modality::point;
    const auto want_g = ev_task == "i2p" ? retrieval::Modality::point : retrieval::Modality::image;
    if (queries.modality() != want_q || gallery.modality() != want_g) {
      throw UsageError("eval: task " + ev_task + " needs " +
                       std::string(want_q == retrieval::Modality::image ? "image" : "point") +
                       " queries and " +
                       std::string(want_g == retrieval::Modality::image ? "image" : "point") +
                       " gallery codes");
    }
    retrieval::EvalOptions opt;
    opt.k = ev_map_k;
    opt.exclude_same_index = !ev_no_self_exclude;
    const auto ks = parse_int_list(ev_curve, "--curve-ks");

    std::vector<MetricRow> rows;
    rows.push_back({"map", opt.k, retrieval::map_at_k(queries, gallery, opt)});
    for (const auto& [k, p] :
         retrieval::precision_curve(queries, gallery, ks, opt.exclude_same_index)) {
      rows.push_back({"precision", k, p});
    }
    ReportOut out(ev_out);
    emit_rows(rows, ev_format, out.stream());
    out.close();
    if (!ev_out.empty()) {
      ordered_json cfg;
      cfg["task"] = ev_task;
      cfg["map_k"] = ev_map_k;
      cfg["curve_ks"] = ks;
      cfg["exclude_same_index"] = opt.exclude_same_index;
      cfg["format"] = ev_format;
      write_manifest(ev_out + ".manifest.json", "eval", std::move(cfg), 0,
                     {{"report", ev_out}, {"query_codes", ev_query}, {"gallery_codes", ev_gallery}},
                     {{"codes", 1}}, clock.seconds());
    }
  });

  // ---- stats ----
  auto* st = app.add_subcommand("stats", "model component parameter and FLOP table");
  std::string st_preset = "desk", st_format = "table", st_out;
  int st_bits = 16;
  st->add_option("--preset", st_preset, "configuration preset")
      ->check(CLI::IsMember({"paper", "desk"}));
  auto* st_bits_opt = st->add_option("--bits", st_bits, "hash code length");
  st->add_option("--format", st_format, "output row format")
      ->check(CLI::IsMember({"table", "csv", "json-lines"}));
  st->add_option("--out", st_out, "write rows to a file instead of stdout");
  st->callback([&]() {
    WallClock clock;
    ModelConfig mc = ModelConfig::preset(st_preset);
    if (*st_bits_opt) {
      if (st_bits != 16 && st_bits != 32 && st_bits != 64) {
        throw UsageError("--bits must be 16, 32, or 64");
      }
      mc.code_bits = st_bits;
    }
    mc.validate();
    model::CmahModel m(mc, 0);
    const model::ModelStats s = m.stats();
    std::vector<StatRow> rows;
    for (const auto& c : s.components) rows.push_back({c.name, c.params, c.flops});
    rows.push_back({"hash heads", s.head_params, s.head_flops});
    rows.push_back({"total", s.total_params, s.total_flops});
    ReportOut out(st_out);
    emit_stats(rows, st_format, out.stream());
    out.close();
    if (!st_out.empty()) {
      write_manifest(st_out + ".manifest.json", "stats", ordered_json::parse(mc.to_json()), 0,
                     {{"report", st_out}}, {}, clock.seconds());
    }
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_cli(argc, argv);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
}
