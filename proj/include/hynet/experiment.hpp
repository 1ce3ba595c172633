#pragma once

// Experiment orchestration: JSON run configuration with strict validation and
// a semantic content hash, staged execution (train -> attack -> report) with
// stamp-file caching keyed on that hash, and deterministic CSV/table artifact
// rendering.
//
// Artifact layout under the output directory:
//   <model_id>/checkpoint/        trained weights (+ substitute/)
//   <model_id>/train_log.csv      per-epoch loss/accuracy
//   <model_id>/rows.csv           per-attack summary rows for this model
//   <model_id>/curves.csv         accuracy-vs-budget curve points
//   <model_id>/cw_<mode>_distortions.csv   per-sample L2 distortions
//   report.csv, curves.csv, tables.txt     merged, rendered by `report`

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hynet/attacks.hpp"
#include "hynet/checkpoint.hpp"
#include "hynet/common.hpp"
#include "hynet/dataset.hpp"
#include "hynet/mmd.hpp"
#include "hynet/model.hpp"
#include "hynet/nn.hpp"
#include "hynet/objectives.hpp"
#include "hynet/tensor.hpp"
#include "hynet/trainer.hpp"

namespace hynet {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration schema
// ---------------------------------------------------------------------------

struct ModelSpec {
  std::string id;
  std::string type;  // "baseline" (softmax head) or "conditional"
  ObjectiveKind objective = ObjectiveKind::JS;
  double beta = 0.0;
  double sigma2 = 1.0;
  std::vector<std::string> layers{"fr2"};
};

struct FgsmSpec {
  std::vector<double> grid;
  double table_eps = 0.15;
};

struct PgdSpec {
  std::vector<double> grid;
  std::size_t steps = 40;
  bool random_start = true;
  double table_eps = 0.15;
};

struct CwSpec {
  std::size_t search_rounds = 6;
  std::size_t max_iters = 150;
  double lr = 0.01;
  double initial_c = 0.001;
  std::vector<double> curve_grid;
  double table_eps = 2.0;
};

struct AttackSection {
  std::size_t subset_size = 1000;
  FgsmSpec fgsm;
  PgdSpec pgd;
  CwSpec cw;
};

struct TrainSection {
  std::size_t epochs = 20;
  std::size_t batch_size = 250;
  double lr = 0.001;
  std::size_t subset = 0;  // 0 = train on the full split
};

struct ExperimentConfig {
  std::string experiment;
  std::string dataset = "mnist";
  std::size_t num_classes = 10;
  std::uint64_t seed = 1;
  TrainSection train;
  TrainSection substitute;
  std::vector<ModelSpec> models;
  AttackSection attacks;
  std::string default_data_dir;  // path hint only; excluded from the hash
  std::string default_out_dir;   // path hint only; excluded from the hash
};

namespace detail {

inline void expect_keys(const json& j, const std::string& ctx,
                        std::initializer_list<const char*> allowed) {
  if (!j.is_object())
    throw ConfigurationError(msg("config: ", ctx, " must be an object"));
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed)
      if (it.key() == k) {
        ok = true;
        break;
      }
    if (!ok)
      throw ConfigurationError(msg("config: unknown key '", it.key(), "' in ",
                                   ctx));
  }
}

template <class T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigurationError(msg("config: bad value for '", key, "': ",
                                 e.what()));
  }
}

inline std::vector<double> get_grid(const json& j, const char* key,
                                    std::vector<double> fallback) {
  auto v = get_or<std::vector<double>>(j, key, std::move(fallback));
  if (v.empty()) throw ConfigurationError(msg("config: '", key, "' is empty"));
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!(v[i] > 0.0))
      throw ConfigurationError(msg("config: '", key, "' entries must be > 0"));
    if (i > 0 && v[i] <= v[i - 1])
      throw ConfigurationError(msg("config: '", key,
                                   "' must be strictly increasing"));
  }
  return v;
}

inline std::vector<double> default_fgsm_grid() {
  std::vector<double> g;
  for (int i = 1; i <= 20; ++i) g.push_back(0.05 * i);
  return g;
}

inline std::vector<double> default_cw_grid() {
  std::vector<double> g;
  for (int i = 1; i <= 16; ++i) g.push_back(0.25 * i);
  return g;
}

inline TrainSection parse_train_section(const json& j, const std::string& ctx,
                                        TrainSection d) {
  expect_keys(j, ctx, {"epochs", "batch_size", "lr", "subset"});
  d.epochs = get_or<std::size_t>(j, "epochs", d.epochs);
  d.batch_size = get_or<std::size_t>(j, "batch_size", d.batch_size);
  d.lr = get_or<double>(j, "lr", d.lr);
  d.subset = get_or<std::size_t>(j, "subset", d.subset);
  if (d.epochs == 0 || d.batch_size == 0 || !(d.lr > 0.0))
    throw ConfigurationError(msg("config: invalid ", ctx, " section"));
  return d;
}

}  // namespace detail

inline ExperimentConfig parse_config(const json& root) {
  detail::expect_keys(root, "top level",
                      {"experiment", "dataset", "num_classes", "seed", "train",
                       "substitute", "models", "attacks", "data_dir",
                       "out_dir"});
  ExperimentConfig cfg;
  cfg.experiment = detail::get_or<std::string>(root, "experiment", "");
  if (cfg.experiment.empty())
    throw ConfigurationError("config: 'experiment' name is required");
  cfg.dataset = detail::get_or<std::string>(root, "dataset", cfg.dataset);
  cfg.num_classes =
      detail::get_or<std::size_t>(root, "num_classes", cfg.num_classes);
  if (cfg.num_classes < 2)
    throw ConfigurationError("config: num_classes must be >= 2");
  cfg.seed = detail::get_or<std::uint64_t>(root, "seed", cfg.seed);
  cfg.default_data_dir = detail::get_or<std::string>(root, "data_dir", "");
  cfg.default_out_dir = detail::get_or<std::string>(root, "out_dir", "");

  if (root.contains("train"))
    cfg.train = detail::parse_train_section(root.at("train"), "train",
                                            cfg.train);
  TrainSection sub_default = cfg.train;
  sub_default.epochs = 10;
  cfg.substitute = root.contains("substitute")
                       ? detail::parse_train_section(root.at("substitute"),
                                                     "substitute", sub_default)
                       : sub_default;

  if (!root.contains("models") || !root.at("models").is_array() ||
      root.at("models").empty())
    throw ConfigurationError("config: non-empty 'models' array is required");
  for (const auto& jm : root.at("models")) {
    detail::expect_keys(jm, "models[]",
                        {"id", "type", "objective", "beta", "sigma2",
                         "layers"});
    ModelSpec m;
    m.id = detail::get_or<std::string>(jm, "id", "");
    m.type = detail::get_or<std::string>(jm, "type", "");
    if (m.id.empty() || m.id == "substitute" ||
        m.id.find('/') != std::string::npos)
      throw ConfigurationError(msg("config: bad model id '", m.id, "'"));
    for (const auto& other : cfg.models)
      if (other.id == m.id)
        throw ConfigurationError(msg("config: duplicate model id '", m.id,
                                     "'"));
    if (m.type != "baseline" && m.type != "conditional")
      throw ConfigurationError(msg("config: model '", m.id,
                                   "': type must be baseline|conditional"));
    if (m.type == "conditional") {
      m.objective = parse_objective(
          detail::get_or<std::string>(jm, "objective", "js"));
      m.beta = detail::get_or<double>(jm, "beta", 0.0);
      m.sigma2 = detail::get_or<double>(jm, "sigma2", 1.0);
      m.layers = detail::get_or<std::vector<std::string>>(jm, "layers",
                                                          m.layers);
      if (m.beta < 0.0)
        throw ConfigurationError(msg("config: model '", m.id,
                                     "': beta must be >= 0"));
      if (!(m.sigma2 > 0.0))
        throw ConfigurationError(msg("config: model '", m.id,
                                     "': sigma2 must be > 0"));
      if (m.layers.empty())
        throw ConfigurationError(msg("config: model '", m.id,
                                     "': layers must be non-empty"));
      for (const auto& l : m.layers)
        if (l != "fr1" && l != "fr2")
          throw ConfigurationError(msg("config: model '", m.id,
                                       "': unknown layer '", l, "'"));
    } else if (jm.contains("objective") || jm.contains("beta") ||
               jm.contains("sigma2") || jm.contains("layers")) {
      throw ConfigurationError(msg("config: model '", m.id,
                                   "': baseline models take no objective/",
                                   "regularizer keys"));
    }
    cfg.models.push_back(std::move(m));
  }

  if (root.contains("attacks")) {
    const json& ja = root.at("attacks");
    detail::expect_keys(ja, "attacks",
                        {"subset_size", "fgsm", "pgd", "cw"});
    cfg.attacks.subset_size =
        detail::get_or<std::size_t>(ja, "subset_size", 1000);
    if (ja.contains("fgsm")) {
      const json& jf = ja.at("fgsm");
      detail::expect_keys(jf, "attacks.fgsm", {"grid", "table_eps"});
      cfg.attacks.fgsm.grid =
          detail::get_grid(jf, "grid", detail::default_fgsm_grid());
      cfg.attacks.fgsm.table_eps =
          detail::get_or<double>(jf, "table_eps", 0.15);
    } else {
      cfg.attacks.fgsm.grid = detail::default_fgsm_grid();
    }
    if (ja.contains("pgd")) {
      const json& jp = ja.at("pgd");
      detail::expect_keys(jp, "attacks.pgd",
                          {"grid", "steps", "random_start", "table_eps"});
      cfg.attacks.pgd.grid =
          detail::get_grid(jp, "grid", {0.10, 0.15, 0.20, 0.30});
      cfg.attacks.pgd.steps = detail::get_or<std::size_t>(jp, "steps", 40);
      cfg.attacks.pgd.random_start =
          detail::get_or<bool>(jp, "random_start", true);
      cfg.attacks.pgd.table_eps = detail::get_or<double>(jp, "table_eps", 0.15);
      if (cfg.attacks.pgd.steps == 0)
        throw ConfigurationError("config: attacks.pgd.steps must be >= 1");
    } else {
      cfg.attacks.pgd.grid = {0.10, 0.15, 0.20, 0.30};
    }
    if (ja.contains("cw")) {
      const json& jc = ja.at("cw");
      detail::expect_keys(jc, "attacks.cw",
                          {"search_rounds", "max_iters", "lr", "initial_c",
                           "curve_grid", "table_eps"});
      cfg.attacks.cw.search_rounds =
          detail::get_or<std::size_t>(jc, "search_rounds", 6);
      cfg.attacks.cw.max_iters =
          detail::get_or<std::size_t>(jc, "max_iters", 150);
      cfg.attacks.cw.lr = detail::get_or<double>(jc, "lr", 0.01);
      cfg.attacks.cw.initial_c = detail::get_or<double>(jc, "initial_c", 0.001);
      cfg.attacks.cw.curve_grid =
          detail::get_grid(jc, "curve_grid", detail::default_cw_grid());
      cfg.attacks.cw.table_eps = detail::get_or<double>(jc, "table_eps", 2.0);
      if (cfg.attacks.cw.search_rounds == 0 || cfg.attacks.cw.max_iters == 0 ||
          !(cfg.attacks.cw.lr > 0.0) || !(cfg.attacks.cw.initial_c > 0.0))
        throw ConfigurationError("config: invalid attacks.cw section");
    } else {
      cfg.attacks.cw.curve_grid = detail::default_cw_grid();
    }
    if (cfg.attacks.subset_size == 0)
      throw ConfigurationError("config: attacks.subset_size must be >= 1");
  } else {
    cfg.attacks.fgsm.grid = detail::default_fgsm_grid();
    cfg.attacks.pgd.grid = {0.10, 0.15, 0.20, 0.30};
    cfg.attacks.cw.curve_grid = detail::default_cw_grid();
  }
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError(msg("cannot open config ", path));
  json root;
  try {
    root = json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigurationError(msg("config: parse error in ", path, ": ",
                                 e.what()));
  }
  return parse_config(root);
}

// ---------------------------------------------------------------------------
// Semantic content hash (FNV-1a over a canonical rendering; path hints are
// deliberately not part of it, so moving data around never invalidates runs)
// ---------------------------------------------------------------------------

namespace detail {

inline void canon(std::ostringstream& os, const char* key, double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  os << key << '=' << buf << ';';
}
inline void canon(std::ostringstream& os, const char* key, std::uint64_t v) {
  os << key << '=' << v << ';';
}
inline void canon(std::ostringstream& os, const char* key,
                  const std::string& v) {
  os << key << '=' << v << ';';
}
inline void canon(std::ostringstream& os, const char* key,
                  const std::vector<double>& v) {
  os << key << "=[";
  for (double x : v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    os << buf << ',';
  }
  os << "];";
}

}  // namespace detail

inline std::string canonical_config_string(const ExperimentConfig& c) {
  std::ostringstream os;
  detail::canon(os, "experiment", c.experiment);
  detail::canon(os, "dataset", c.dataset);
  detail::canon(os, "num_classes", std::uint64_t(c.num_classes));
  detail::canon(os, "seed", c.seed);
  detail::canon(os, "train.epochs", std::uint64_t(c.train.epochs));
  detail::canon(os, "train.batch_size", std::uint64_t(c.train.batch_size));
  detail::canon(os, "train.lr", c.train.lr);
  detail::canon(os, "train.subset", std::uint64_t(c.train.subset));
  detail::canon(os, "substitute.epochs", std::uint64_t(c.substitute.epochs));
  detail::canon(os, "substitute.batch_size",
                std::uint64_t(c.substitute.batch_size));
  detail::canon(os, "substitute.lr", c.substitute.lr);
  detail::canon(os, "substitute.subset", std::uint64_t(c.substitute.subset));
  for (const auto& m : c.models) {
    detail::canon(os, "model.id", m.id);
    detail::canon(os, "model.type", m.type);
    if (m.type == "conditional") {
      detail::canon(os, "model.objective", objective_name(m.objective));
      detail::canon(os, "model.beta", m.beta);
      detail::canon(os, "model.sigma2", m.sigma2);
      std::string layers;
      for (const auto& l : m.layers) layers += l + ",";
      detail::canon(os, "model.layers", layers);
    }
  }
  detail::canon(os, "attacks.subset_size",
                std::uint64_t(c.attacks.subset_size));
  detail::canon(os, "fgsm.grid", c.attacks.fgsm.grid);
  detail::canon(os, "fgsm.table_eps", c.attacks.fgsm.table_eps);
  detail::canon(os, "pgd.grid", c.attacks.pgd.grid);
  detail::canon(os, "pgd.steps", std::uint64_t(c.attacks.pgd.steps));
  detail::canon(os, "pgd.random_start",
                std::uint64_t(c.attacks.pgd.random_start ? 1 : 0));
  detail::canon(os, "pgd.table_eps", c.attacks.pgd.table_eps);
  detail::canon(os, "cw.search_rounds",
                std::uint64_t(c.attacks.cw.search_rounds));
  detail::canon(os, "cw.max_iters", std::uint64_t(c.attacks.cw.max_iters));
  detail::canon(os, "cw.lr", c.attacks.cw.lr);
  detail::canon(os, "cw.initial_c", c.attacks.cw.initial_c);
  detail::canon(os, "cw.curve_grid", c.attacks.cw.curve_grid);
  detail::canon(os, "cw.table_eps", c.attacks.cw.table_eps);
  return os.str();
}

inline std::string config_hash(const ExperimentConfig& c) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char b : canonical_config_string(c)) {
    h ^= b;
    h *= 1099511628211ull;
  }
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)h);
  return buf;
}

// ---------------------------------------------------------------------------
// Staged runner
// ---------------------------------------------------------------------------

struct RowRec {
  std::string model_id, attack, mode, norm;
  double eps = 0.0;
  std::size_t n = 0;
  double acc = 0.0;
  double mean_dist = 0.0;
  std::size_t failures = 0;
};

struct CurveRec {
  std::string model_id, attack, mode, kind;
  double eps = 0.0;
  double value = 0.0;
};

namespace detail {

inline std::string fmt_eps(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

inline std::string row_line(const RowRec& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%s,%s,%s,%s,%s,%zu,%.6f,%.6g,%zu\n",
                r.model_id.c_str(), r.attack.c_str(), r.mode.c_str(),
                r.norm.c_str(), fmt_eps(r.eps).c_str(), r.n, r.acc,
                r.mean_dist, r.failures);
  return buf;
}

inline std::string curve_line(const CurveRec& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%s,%s,%s,%s,%s,%.6f\n", r.model_id.c_str(),
                r.attack.c_str(), r.mode.c_str(), r.kind.c_str(),
                fmt_eps(r.eps).c_str(), r.value);
  return buf;
}

constexpr const char* kRowHeader =
    "model_id,attack,mode,norm,epsilon,n_samples,accuracy,"
    "mean_finite_distortion,failure_count";
constexpr const char* kCurveHeader = "model_id,attack,mode,kind,epsilon,value";

inline bool stamp_matches(const std::filesystem::path& stamp,
                          const std::string& want) {
  std::ifstream is(stamp);
  if (!is) return false;
  std::string got((std::istreambuf_iterator<char>(is)),
                  std::istreambuf_iterator<char>());
  return got == want;
}

inline void write_stamp(const std::filesystem::path& stamp,
                        const std::string& content) {
  std::ofstream os(stamp);
  if (!os) throw IoError(msg("cannot write stamp ", stamp.string()));
  os << content;
}

inline double mean_linf(const Tensor& adv, const Tensor& clean) {
  std::size_t n = adv.size(0), pix = adv.numel() / n;
  const auto& a = adv.data();
  const auto& b = clean.data();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double hi = 0.0;
    for (std::size_t p = 0; p < pix; ++p)
      hi = std::max(hi, std::abs(a[i * pix + p] - b[i * pix + p]));
    total += hi;
  }
  return total / double(n);
}

}  // namespace detail

class Experiment {
 public:
  Experiment(ExperimentConfig cfg, std::string data_dir, std::string out_dir,
             std::ostream* progress = &std::cerr)
      : cfg_(std::move(cfg)),
        data_dir_(std::move(data_dir)),
        out_dir_(std::move(out_dir)),
        progress_(progress),
        hash_(config_hash(cfg_)) {
    if (data_dir_.empty())
      throw ConfigurationError("experiment: data directory is required");
    if (out_dir_.empty())
      throw ConfigurationError("experiment: output directory is required");
  }

  const std::string& hash() const { return hash_; }
  const ExperimentConfig& config() const { return cfg_; }

  void run(const std::string& verb) {
    std::filesystem::create_directories(out_dir_);
    std::error_code ec;
    std::filesystem::remove(std::filesystem::path(out_dir_) / "FAILED", ec);
    if (verb == "train") {
      train_stage();
    } else if (verb == "attack") {
      attack_stage();
    } else if (verb == "report") {
      report_stage();
    } else if (verb == "all") {
      train_stage();
      attack_stage();
      report_stage();
    } else {
      throw ConfigurationError(msg("unknown verb '", verb,
                                   "' (known: train, attack, report, all)"));
    }
  }

  // -------------------------------------------------------------------------
  // train: every model in config order, then the substitute
  // -------------------------------------------------------------------------
  void train_stage() {
    stage_ = "train";
    const Dataset& full = train_data();
    Dataset trimmed;
    if (cfg_.train.subset > 0) trimmed = subset(full, cfg_.train.subset);
    const Dataset& train = cfg_.train.subset > 0 ? trimmed : full;
    for (std::size_t i = 0; i < cfg_.models.size(); ++i) {
      const ModelSpec& spec = cfg_.models[i];
      auto dir = model_dir(spec.id);
      auto stamp = dir / "train.stamp";
      std::string want = "train " + hash_ + "\n";
      if (detail::stamp_matches(stamp, want)) {
        note(msg("train: ", spec.id, " cached"));
        continue;
      }
      note(msg("train: ", spec.id, " (", spec.type, ")"));
      std::filesystem::create_directories(dir);
      Rng rng(mix_seed(cfg_.seed, 1000 + i));
      TrainConfig tc = train_config_for(spec);
      TrainLog log;
      if (spec.type == "conditional") {
        ConditionalClassifier model(cfg_.num_classes, rng);
        log = hynet::train(model, train, tc, progress_);
        save_checkpoint(model, (dir / "checkpoint").string(), meta_for(spec));
      } else {
        BaselineClassifier model(cfg_.num_classes, rng);
        log = hynet::train(model, train, tc, progress_);
        save_checkpoint(model, (dir / "checkpoint").string(), meta_for(spec));
      }
      log.write_csv((dir / "train_log.csv").string());
      detail::write_stamp(stamp, want);
    }

    auto sdir = model_dir("substitute");
    auto sstamp = sdir / "train.stamp";
    std::string want = "train " + hash_ + "\n";
    if (detail::stamp_matches(sstamp, want)) {
      note("train: substitute cached");
      return;
    }
    note("train: substitute (lenet)");
    std::filesystem::create_directories(sdir);
    Rng rng(mix_seed(cfg_.seed, 999));
    LeNetSubstitute sub(cfg_.num_classes, rng);
    TrainConfig tc;
    tc.objective = ObjectiveKind::CE;
    tc.beta = 0.0;
    tc.lr = cfg_.substitute.lr;
    tc.epochs = cfg_.substitute.epochs;
    tc.batch_size = cfg_.substitute.batch_size;
    tc.seed = mix_seed(cfg_.seed, 998);
    Dataset sub_trimmed;
    if (cfg_.substitute.subset > 0)
      sub_trimmed = subset(full, cfg_.substitute.subset);
    const Dataset& sub_train =
        cfg_.substitute.subset > 0 ? sub_trimmed : full;
    TrainLog log = hynet::train(sub, sub_train, tc, progress_);
    save_checkpoint(sub, (sdir / "checkpoint").string(),
                    json{{"role", "substitute"}});
    log.write_csv((sdir / "train_log.csv").string());
    detail::write_stamp(sstamp, want);
  }

  // -------------------------------------------------------------------------
  // attack: clean accuracy + the full attack grid for every model lacking a
  // fresh stamp; black-box batches are crafted once and shared
  // -------------------------------------------------------------------------
  void attack_stage() {
    stage_ = "attack";
    std::string want = "attack " + hash_ + "\n";
    std::vector<std::size_t> todo;
    for (std::size_t i = 0; i < cfg_.models.size(); ++i)
      if (!detail::stamp_matches(model_dir(cfg_.models[i].id) / "attack.stamp",
                                 want))
        todo.push_back(i);
      else
        note(msg("attack: ", cfg_.models[i].id, " cached"));
    if (todo.empty()) return;

    const Dataset& test = test_data();
    if (cfg_.attacks.subset_size > test.size())
      throw ConfigurationError(msg("attacks.subset_size ",
                                   cfg_.attacks.subset_size,
                                   " exceeds test set size ", test.size()));
    Dataset sub_set = subset(test, cfg_.attacks.subset_size);
    const Tensor& x0 = sub_set.images;
    const std::vector<std::size_t>& y = sub_set.labels;
    std::size_t n = sub_set.size();

    std::unique_ptr<ScoringModel> substitute = load_model("substitute");
    std::vector<std::unique_ptr<ScoringModel>> models;
    std::vector<std::vector<RowRec>> rows(todo.size());
    std::vector<std::vector<CurveRec>> curves(todo.size());
    std::vector<std::vector<char>> clean_ok(todo.size());
    for (std::size_t t = 0; t < todo.size(); ++t) {
      const ModelSpec& spec = cfg_.models[todo[t]];
      models.push_back(load_model(spec.id));
      note(msg("attack: clean accuracy for ", spec.id));
      double acc = accuracy(*models[t], test);
      rows[t].push_back({spec.id, "clean", "-", "-", 0.0, test.size(), acc,
                         0.0, 0});
      clean_ok[t] = correct_flags(*models[t], x0, y);
    }

    // --- max-norm attacks, black then white ---------------------------------
    run_linf_attack("fgsm", "black", substitute.get(), todo, models, clean_ok,
                    x0, y, rows, curves);
    run_linf_attack("pgd", "black", substitute.get(), todo, models, clean_ok,
                    x0, y, rows, curves);
    run_cw_attack("black", substitute.get(), todo, models, clean_ok, x0, y,
                  rows, curves);
    run_linf_attack("fgsm", "white", nullptr, todo, models, clean_ok, x0, y,
                    rows, curves);
    run_linf_attack("pgd", "white", nullptr, todo, models, clean_ok, x0, y,
                    rows, curves);
    run_cw_attack("white", nullptr, todo, models, clean_ok, x0, y, rows,
                  curves);

    for (std::size_t t = 0; t < todo.size(); ++t) {
      const ModelSpec& spec = cfg_.models[todo[t]];
      auto dir = model_dir(spec.id);
      std::filesystem::create_directories(dir);
      {
        std::ofstream os(dir / "rows.csv");
        if (!os) throw IoError(msg("cannot write rows.csv for ", spec.id));
        os << detail::kRowHeader << '\n';
        for (const auto& r : rows[t]) os << detail::row_line(r);
      }
      {
        std::ofstream os(dir / "curves.csv");
        if (!os) throw IoError(msg("cannot write curves.csv for ", spec.id));
        os << detail::kCurveHeader << '\n';
        for (const auto& r : curves[t]) os << detail::curve_line(r);
      }
      detail::write_stamp(dir / "attack.stamp", want);
    }
  }

  // -------------------------------------------------------------------------
  // report: merge per-model artifacts and render the summary table
  // -------------------------------------------------------------------------
  void report_stage() {
    stage_ = "report";
    std::vector<RowRec> rows;
    std::vector<CurveRec> curves;
    for (const auto& spec : cfg_.models) {
      auto dir = model_dir(spec.id);
      if (!std::filesystem::exists(dir / "rows.csv"))
        throw StateError(msg("report: no attack artifacts for '", spec.id,
                             "'; run the attack stage first"));
      read_rows(dir / "rows.csv", rows);
      read_curves(dir / "curves.csv", curves);
    }

    std::filesystem::path report_path =
        std::filesystem::path(out_dir_) / "report.csv";
    {
      std::ofstream os(report_path);
      if (!os) throw IoError("cannot write report.csv");
      os << "# experiment=" << cfg_.experiment << '\n';
      os << "# config_hash=" << hash_ << '\n';
      os << "# dataset=" << cfg_.dataset << '\n';
      os << detail::kRowHeader << '\n';
      for (const auto& r : rows) os << detail::row_line(r);
    }
    {
      std::ofstream os(std::filesystem::path(out_dir_) / "curves.csv");
      if (!os) throw IoError("cannot write curves.csv");
      os << "# experiment=" << cfg_.experiment << '\n';
      os << "# config_hash=" << hash_ << '\n';
      os << detail::kCurveHeader << '\n';
      for (const auto& r : curves) os << detail::curve_line(r);
    }
    render_tables(report_path);
  }

  const std::string& current_stage() const { return stage_; }

 private:
  // --- data ----------------------------------------------------------------
  const Dataset& train_data() {
    if (!train_.has_value())
      train_ = load_named_split(data_dir_, cfg_.dataset, "train");
    return *train_;
  }
  const Dataset& test_data() {
    if (!test_.has_value())
      test_ = load_named_split(data_dir_, cfg_.dataset, "test");
    return *test_;
  }

  std::filesystem::path model_dir(const std::string& id) const {
    return std::filesystem::path(out_dir_) / id;
  }

  TrainConfig train_config_for(const ModelSpec& spec) const {
    TrainConfig tc;
    tc.objective = spec.objective;
    tc.beta = spec.beta;
    tc.sigma2 = spec.sigma2;
    tc.regularized_layers = spec.layers;
    tc.lr = cfg_.train.lr;
    tc.epochs = cfg_.train.epochs;
    tc.batch_size = cfg_.train.batch_size;
    tc.seed = cfg_.seed;
    return tc;
  }

  json meta_for(const ModelSpec& spec) const {
    json j{{"model_id", spec.id}, {"config_hash", hash_}};
    if (spec.type == "conditional") {
      j["objective"] = objective_name(spec.objective);
      j["beta"] = spec.beta;
    }
    return j;
  }

  std::unique_ptr<ScoringModel> load_model(const std::string& id) {
    auto dir = model_dir(id) / "checkpoint";
    if (!std::filesystem::exists(dir / "manifest.txt"))
      throw StateError(msg("no checkpoint for '", id,
                           "'; run the train stage first"));
    std::string kind = id == "substitute" ? "substitute" : spec_for(id).type;
    Rng rng(1);  // weights are overwritten by the checkpoint
    auto model = make_model(kind, cfg_.num_classes, rng);
    load_checkpoint(*model, dir.string());
    model->set_train(false);
    return model;
  }

  const ModelSpec& spec_for(const std::string& id) const {
    for (const auto& m : cfg_.models)
      if (m.id == id) return m;
    throw ConfigurationError(msg("unknown model id '", id, "'"));
  }

  std::vector<char> correct_flags(ScoringModel& model, const Tensor& x,
                                  const std::vector<std::size_t>& y) {
    std::vector<char> ok(y.size());
    std::size_t n = x.size(0), pix = x.numel() / n;
    const std::size_t shard = 250;
    for (std::size_t start = 0; start < n; start += shard) {
      std::size_t len = std::min(shard, n - start);
      Tensor xs = Tensor::from(
          {len, x.size(1), x.size(2), x.size(3)},
          std::vector<double>(x.data().begin() + start * pix,
                              x.data().begin() + (start + len) * pix));
      auto pred = model.predict(xs);
      for (std::size_t i = 0; i < len; ++i)
        ok[start + i] = pred[i] == y[start + i];
    }
    return ok;
  }

  // Craft a full-subset adversarial batch shard by shard.
  Tensor craft(const std::string& attack, ScoringModel& craft_model,
               const Tensor& x, const std::vector<std::size_t>& y, double eps,
               std::uint64_t seed_salt) {
    std::size_t n = x.size(0), pix = x.numel() / n;
    std::vector<double> out(x.numel());
    const std::size_t shard = 250;
    for (std::size_t start = 0; start < n; start += shard) {
      std::size_t len = std::min(shard, n - start);
      Tensor xs = Tensor::from(
          {len, x.size(1), x.size(2), x.size(3)},
          std::vector<double>(x.data().begin() + start * pix,
                              x.data().begin() + (start + len) * pix));
      std::vector<std::size_t> ys(y.begin() + start, y.begin() + start + len);
      Tensor adv;
      if (attack == "fgsm") {
        adv = fgsm(craft_model, xs, ys, eps);
      } else {
        double step = 2.5 * eps / double(cfg_.attacks.pgd.steps);
        adv = pgd(craft_model, xs, ys, eps, cfg_.attacks.pgd.steps, step,
                  cfg_.attacks.pgd.random_start,
                  mix_seed(seed_salt, start / shard));
      }
      std::copy(adv.data().begin(), adv.data().end(),
                out.begin() + start * pix);
    }
    return Tensor::from(x.shape(), std::move(out));
  }

  void run_linf_attack(const std::string& attack, const std::string& mode,
                       ScoringModel* shared_craft_model,
                       const std::vector<std::size_t>& todo,
                       std::vector<std::unique_ptr<ScoringModel>>& models,
                       const std::vector<std::vector<char>>& clean_ok,
                       const Tensor& x0, const std::vector<std::size_t>& y,
                       std::vector<std::vector<RowRec>>& rows,
                       std::vector<std::vector<CurveRec>>& curves) {
    const std::vector<double>& grid = attack == "fgsm"
                                          ? cfg_.attacks.fgsm.grid
                                          : cfg_.attacks.pgd.grid;
    std::size_t n = x0.size(0);
    // correct[t][e][i]: does model t still classify sample i correctly after
    // the eps=grid[e] attack?
    std::vector<std::vector<std::vector<char>>> correct(
        todo.size(), std::vector<std::vector<char>>(grid.size()));

    for (std::size_t e = 0; e < grid.size(); ++e) {
      double eps = grid[e];
      note(msg("attack: ", attack, " ", mode, " eps=", eps));
      if (shared_craft_model) {
        std::uint64_t salt =
            mix_seed(cfg_.seed, 7000 + e + (attack == "pgd" ? 100 : 0));
        std::uint64_t before = 0;
        for (auto& m : models) before += m->backward_touch_total();
        Tensor adv = craft(attack, *shared_craft_model, x0, y, eps, salt);
        std::uint64_t after = 0;
        for (auto& m : models) after += m->backward_touch_total();
        if (after != before)
          throw ContractError(
              "black-box crafting propagated gradients through a defended "
              "model");
        check_linf(adv, x0, eps);
        double md = detail::mean_linf(adv, x0);
        for (std::size_t t = 0; t < todo.size(); ++t) {
          correct[t][e] = correct_flags(*models[t], adv, y);
          push_linf_records(t, todo, attack, mode, eps, md, correct[t][e],
                            rows, curves);
        }
      } else {
        for (std::size_t t = 0; t < todo.size(); ++t) {
          std::uint64_t salt =
              mix_seed(cfg_.seed, 8000 + 200 * todo[t] + e +
                                      (attack == "pgd" ? 100 : 0));
          Tensor adv = craft(attack, *models[t], x0, y, eps, salt);
          check_linf(adv, x0, eps);
          double md = detail::mean_linf(adv, x0);
          correct[t][e] = correct_flags(*models[t], adv, y);
          push_linf_records(t, todo, attack, mode, eps, md, correct[t][e],
                            rows, curves);
        }
      }
    }

    // Minimal-flipping-budget curve: a sample's distortion is the smallest
    // grid eps whose attack flips it; accuracy(eps) counts samples that are
    // clean-correct and not yet flipped at any budget <= eps.
    for (std::size_t t = 0; t < todo.size(); ++t) {
      std::vector<double> mindist(n,
                                  std::numeric_limits<double>::infinity());
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t e = 0; e < grid.size(); ++e)
          if (!correct[t][e][i]) {
            mindist[i] = grid[e];
            break;
          }
      for (double eps : grid) {
        std::size_t ok = 0;
        for (std::size_t i = 0; i < n; ++i)
          if (clean_ok[t][i] && mindist[i] > eps) ++ok;
        curves[t].push_back({cfg_.models[todo[t]].id, attack, mode, "mindist",
                             eps, double(ok) / double(n)});
      }
    }
  }

  void push_linf_records(std::size_t t, const std::vector<std::size_t>& todo,
                         const std::string& attack, const std::string& mode,
                         double eps, double mean_dist,
                         const std::vector<char>& ok,
                         std::vector<std::vector<RowRec>>& rows,
                         std::vector<std::vector<CurveRec>>& curves) {
    std::size_t n = ok.size(), good = 0;
    for (char c : ok) good += c ? 1 : 0;
    double acc = double(good) / double(n);
    const std::string& id = cfg_.models[todo[t]].id;
    rows[t].push_back({id, attack, mode, "linf", eps, n, acc, mean_dist, 0});
    curves[t].push_back({id, attack, mode, "fixed", eps, acc});
  }

  void run_cw_attack(const std::string& mode,
                     ScoringModel* shared_craft_model,
                     const std::vector<std::size_t>& todo,
                     std::vector<std::unique_ptr<ScoringModel>>& models,
                     const std::vector<std::vector<char>>& clean_ok,
                     const Tensor& x0, const std::vector<std::size_t>& y,
                     std::vector<std::vector<RowRec>>& rows,
                     std::vector<std::vector<CurveRec>>& curves) {
    CwConfig cc;
    cc.initial_c = cfg_.attacks.cw.initial_c;
    cc.search_rounds = cfg_.attacks.cw.search_rounds;
    cc.max_iters = cfg_.attacks.cw.max_iters;
    cc.lr = cfg_.attacks.cw.lr;

    std::size_t n = x0.size(0), pix = x0.numel() / n;
    const std::size_t shard = 250;

    // Per crafting model: distortions plus the crafted rows themselves.
    auto craft_cw = [&](ScoringModel& cm) {
      CwOutcome all;
      all.distortion.resize(n);
      std::vector<double> advbuf(x0.numel());
      for (std::size_t start = 0; start < n; start += shard) {
        std::size_t len = std::min(shard, n - start);
        Tensor xs = Tensor::from(
            {len, x0.size(1), x0.size(2), x0.size(3)},
            std::vector<double>(x0.data().begin() + start * pix,
                                x0.data().begin() + (start + len) * pix));
        std::vector<std::size_t> ys(y.begin() + start,
                                    y.begin() + start + len);
        CwOutcome o = cw_l2(cm, xs, ys, cc);
        all.failure_count += o.failure_count;
        std::copy(o.distortion.begin(), o.distortion.end(),
                  all.distortion.begin() + start);
        std::copy(o.x_adv.data().begin(), o.x_adv.data().end(),
                  advbuf.begin() + start * pix);
      }
      all.x_adv = Tensor::from(x0.shape(), std::move(advbuf));
      return all;
    };

    auto eval_cw = [&](std::size_t t, const CwOutcome& o) {
      const std::string& id = cfg_.models[todo[t]].id;
      std::vector<char> adv_ok = correct_flags(*models[t], o.x_adv, y);
      // Rational budget-eps adversary: present the crafted example only when
      // it is affordable and actually fools this model.
      auto acc_at = [&](double eps) {
        std::size_t good = 0;
        for (std::size_t i = 0; i < n; ++i) {
          bool fooled = o.distortion[i] <= eps && !adv_ok[i];
          if (clean_ok[t][i] && !fooled) ++good;
        }
        return double(good) / double(n);
      };
      for (double eps : cfg_.attacks.cw.curve_grid)
        curves[t].push_back({id, "cw", mode, "mindist", eps, acc_at(eps)});
      double finite_sum = 0.0;
      std::size_t finite_n = 0;
      for (double d : o.distortion)
        if (std::isfinite(d)) {
          finite_sum += d;
          ++finite_n;
        }
      double mean_dist = finite_n ? finite_sum / double(finite_n) : 0.0;
      rows[t].push_back({id, "cw", mode, "l2", cfg_.attacks.cw.table_eps, n,
                         acc_at(cfg_.attacks.cw.table_eps), mean_dist,
                         o.failure_count});
      // Per-sample distortions for downstream analysis.
      auto dir = model_dir(id);
      std::filesystem::create_directories(dir);
      std::ofstream os(dir / ("cw_" + mode + "_distortions.csv"));
      if (!os) throw IoError(msg("cannot write distortions for ", id));
      os << "sample_index,distortion\n";
      for (std::size_t i = 0; i < n; ++i) {
        if (std::isfinite(o.distortion[i])) {
          char buf[64];
          std::snprintf(buf, sizeof(buf), "%zu,%.9g\n", i, o.distortion[i]);
          os << buf;
        } else {
          os << i << ",inf\n";
        }
      }
    };

    if (shared_craft_model) {
      note(msg("attack: cw ", mode));
      std::uint64_t before = 0;
      for (auto& m : models) before += m->backward_touch_total();
      CwOutcome o = craft_cw(*shared_craft_model);
      std::uint64_t after = 0;
      for (auto& m : models) after += m->backward_touch_total();
      if (after != before)
        throw ContractError(
            "black-box crafting propagated gradients through a defended "
            "model");
      for (std::size_t t = 0; t < todo.size(); ++t) eval_cw(t, o);
    } else {
      for (std::size_t t = 0; t < todo.size(); ++t) {
        note(msg("attack: cw white ", cfg_.models[todo[t]].id));
        CwOutcome o = craft_cw(*models[t]);
        eval_cw(t, o);
      }
    }
  }

  // --- report helpers --------------------------------------------------------
  static std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
      if (c == ',') {
        out.push_back(cur);
        cur.clear();
      } else {
        cur += c;
      }
    }
    out.push_back(cur);
    return out;
  }

  static void read_rows(const std::filesystem::path& p,
                        std::vector<RowRec>& rows) {
    std::ifstream is(p);
    if (!is) throw IoError(msg("cannot read ", p.string()));
    std::string line;
    std::getline(is, line);  // header
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      auto f = split_csv(line);
      if (f.size() != 9)
        throw FormatError(msg("malformed row in ", p.string(), ": ", line));
      rows.push_back({f[0], f[1], f[2], f[3], std::stod(f[4]),
                      std::size_t(std::stoull(f[5])), std::stod(f[6]),
                      std::stod(f[7]), std::size_t(std::stoull(f[8]))});
    }
  }

  static void read_curves(const std::filesystem::path& p,
                          std::vector<CurveRec>& curves) {
    std::ifstream is(p);
    if (!is) throw IoError(msg("cannot read ", p.string()));
    std::string line;
    std::getline(is, line);  // header
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      auto f = split_csv(line);
      if (f.size() != 6)
        throw FormatError(msg("malformed curve in ", p.string(), ": ", line));
      curves.push_back({f[0], f[1], f[2], f[3], std::stod(f[4]),
                        std::stod(f[5])});
    }
  }

  void render_tables(const std::filesystem::path& report_path) {
    // Every printed number is looked up in report.csv itself.
    std::vector<RowRec> rows;
    {
      std::ifstream is(report_path);
      if (!is) throw IoError("cannot reread report.csv");
      std::string line;
      bool header_seen = false;
      while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        if (!header_seen) {
          header_seen = true;
          continue;
        }
        auto f = split_csv(line);
        if (f.size() != 9)
          throw FormatError(msg("malformed report row: ", line));
        rows.push_back({f[0], f[1], f[2], f[3], std::stod(f[4]),
                        std::size_t(std::stoull(f[5])), std::stod(f[6]),
                        std::stod(f[7]), std::size_t(std::stoull(f[8]))});
      }
    }

    auto lookup = [&](const std::string& id, const std::string& attack,
                      const std::string& mode, double eps,
                      std::string* out) -> bool {
      for (const auto& r : rows)
        if (r.model_id == id && r.attack == attack && r.mode == mode &&
            (attack == "clean" || std::abs(r.eps - eps) < 1e-12)) {
          char buf[32];
          std::snprintf(buf, sizeof(buf), "%.1f", 100.0 * r.acc);
          *out = buf;
          return true;
        }
      return false;
    };

    struct TableRow {
      const char* label;
      const char* attack;
      const char* mode;
      double eps;
    };
    const double fe = cfg_.attacks.fgsm.table_eps;
    const double pe = cfg_.attacks.pgd.table_eps;
    const double ce = cfg_.attacks.cw.table_eps;
    std::vector<TableRow> trows = {
        {"Clean", "clean", "-", 0.0},   {"FGSM b", "fgsm", "black", fe},
        {"PGD b", "pgd", "black", pe},  {"C&W b", "cw", "black", ce},
        {"FGSM w", "fgsm", "white", fe}, {"PGD w", "pgd", "white", pe},
        {"C&W w", "cw", "white", ce}};

    std::ofstream os(std::filesystem::path(out_dir_) / "tables.txt");
    if (!os) throw IoError("cannot write tables.txt");
    os << "Accuracy (%) on " << cfg_.dataset << " — max-norm budget "
       << detail::fmt_eps(fe) << " (single-step) / " << detail::fmt_eps(pe)
       << " (iterated), L2 budget " << detail::fmt_eps(ce)
       << " (minimum-distortion)\n\n";

    std::size_t label_w = 8;
    std::vector<std::size_t> col_w;
    for (const auto& m : cfg_.models)
      col_w.push_back(std::max<std::size_t>(m.id.size(), 6));

    os << std::string(label_w, ' ');
    for (std::size_t c = 0; c < cfg_.models.size(); ++c) {
      const std::string& id = cfg_.models[c].id;
      os << " | " << std::string(col_w[c] - id.size(), ' ') << id;
    }
    os << '\n';
    os << std::string(label_w, '-');
    for (std::size_t c = 0; c < cfg_.models.size(); ++c)
      os << "-+-" << std::string(col_w[c], '-');
    os << '\n';
    for (const auto& tr : trows) {
      std::string label = tr.label;
      os << label << std::string(label_w - label.size(), ' ');
      for (std::size_t c = 0; c < cfg_.models.size(); ++c) {
        std::string cell;
        if (!lookup(cfg_.models[c].id, tr.attack, tr.mode, tr.eps, &cell))
          cell = "—";
        os << " | ";
        // The em dash is multi-byte; pad by display width, not bytes.
        std::size_t disp = cell == "—" ? 1 : cell.size();
        os << std::string(col_w[c] > disp ? col_w[c] - disp : 0, ' ') << cell;
      }
      os << '\n';
    }
  }

  void note(const std::string& s) {
    if (progress_) {
      *progress_ << "[" << stage_ << "] " << s << '\n';
      progress_->flush();
    }
  }

  ExperimentConfig cfg_;
  std::string data_dir_, out_dir_;
  std::ostream* progress_;
  std::string hash_;
  std::string stage_ = "setup";
  std::optional<Dataset> train_, test_;
};

}  // namespace hynet
