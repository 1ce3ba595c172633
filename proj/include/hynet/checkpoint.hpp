#pragma once

// Checkpoint directory format (bit-exact round trip):
//   manifest.txt — one line per tensor: <name> f64 <dim0> <dim1> ...
//   <name>.bin   — raw little-endian doubles in row-major order
//   meta.json    — model kind, class count, architecture dims, batchnorm
//                  configuration
// Inference state only (parameter values and batchnorm running statistics);
// optimizer moments are not persisted.

#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hynet/common.hpp"
#include "hynet/model.hpp"

namespace hynet {

namespace detail {

inline void write_doubles(const std::filesystem::path& path,
                          const std::vector<double>& v) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError(msg("cannot write ", path.string()));
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(double)));
  if (!os) throw IoError(msg("short write to ", path.string()));
}

inline std::vector<double> read_doubles(const std::filesystem::path& path,
                                        std::size_t count) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(msg("cannot read ", path.string()));
  std::vector<double> v(count);
  is.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(count * sizeof(double)));
  if (static_cast<std::size_t>(is.gcount()) != count * sizeof(double))
    throw LengthError(msg("tensor file ", path.string(), " shorter than ",
                          count, " doubles"));
  return v;
}

struct NamedTensorView {
  std::string name;
  Shape shape;
  std::vector<double>* data;
};

inline std::vector<NamedTensorView> named_tensors(ScoringModel& model) {
  std::vector<NamedTensorView> out;
  for (Parameter* p : model.parameters())
    out.push_back({p->name, p->value.shape(), &p->value.data()});
  for (auto& [name, buf] : model.buffers())
    out.push_back({name, Shape{buf->size()}, buf});
  return out;
}

}  // namespace detail

inline void save_checkpoint(ScoringModel& model, const std::string& dir,
                            const nlohmann::json& extra_meta = {}) {
  std::filesystem::create_directories(dir);
  auto tensors = detail::named_tensors(model);
  std::ofstream manifest(std::filesystem::path(dir) / "manifest.txt");
  if (!manifest) throw IoError(msg("cannot write manifest in ", dir));
  for (const auto& t : tensors) {
    manifest << t.name << " f64";
    for (std::size_t d : t.shape) manifest << ' ' << d;
    manifest << '\n';
    detail::write_doubles(std::filesystem::path(dir) / (t.name + ".bin"),
                          *t.data);
  }
  nlohmann::json meta = extra_meta;
  meta["format_version"] = 1;
  meta["kind"] = model.kind();
  meta["num_classes"] = model.num_classes();
  meta["input"] = {1, 28, 28};
  meta["batchnorm"] = {{"momentum", 0.1}, {"eps", 1e-5}};
  std::ofstream mf(std::filesystem::path(dir) / "meta.json");
  mf << meta.dump(2) << '\n';
}

// Loads a checkpoint saved by save_checkpoint into a structurally identical
// model (same kind and dims). Verifies every manifest entry against the model
// and vice versa.
inline void load_checkpoint(ScoringModel& model, const std::string& dir) {
  std::filesystem::path manifest_path =
      std::filesystem::path(dir) / "manifest.txt";
  std::ifstream manifest(manifest_path);
  if (!manifest)
    throw IoError(msg("cannot read checkpoint manifest ",
                      manifest_path.string()));
  std::map<std::string, Shape> listed;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string name, dtype;
    is >> name >> dtype;
    if (dtype != "f64")
      throw FormatError(msg("manifest ", manifest_path.string(),
                            ": unsupported dtype '", dtype, "' for ", name));
    Shape shape;
    std::size_t d;
    while (is >> d) shape.push_back(d);
    listed[name] = shape;
  }
  auto tensors = detail::named_tensors(model);
  if (tensors.size() != listed.size())
    throw ConsistencyError(msg("checkpoint ", dir, " lists ", listed.size(),
                               " tensors, model has ", tensors.size()));
  for (auto& t : tensors) {
    auto it = listed.find(t.name);
    if (it == listed.end())
      throw ConsistencyError(msg("checkpoint ", dir, " missing tensor '",
                                 t.name, "'"));
    if (it->second != t.shape)
      throw ConsistencyError(msg("checkpoint tensor '", t.name, "' has shape ",
                                 shape_str(it->second), ", model wants ",
                                 shape_str(t.shape)));
    *t.data = detail::read_doubles(
        std::filesystem::path(dir) / (t.name + ".bin"), numel(t.shape));
  }
}

inline nlohmann::json read_checkpoint_meta(const std::string& dir) {
  std::ifstream mf(std::filesystem::path(dir) / "meta.json");
  if (!mf) throw IoError(msg("cannot read meta.json in ", dir));
  return nlohmann::json::parse(mf);
}

// Constructs an uninitialized model of the named kind (parameters are then
// overwritten by load_checkpoint).
inline std::unique_ptr<ScoringModel> make_model(const std::string& kind,
                                                std::size_t num_classes,
                                                Rng& rng) {
  if (kind == "conditional")
    return std::make_unique<ConditionalClassifier>(num_classes, rng);
  if (kind == "baseline")
    return std::make_unique<BaselineClassifier>(num_classes, rng);
  if (kind == "substitute")
    return std::make_unique<LeNetSubstitute>(num_classes, rng);
  throw ConfigurationError(msg("unknown model kind '", kind, "'"));
}

}  // namespace hynet
