#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "cdne/error.hpp"
#include "cdne/tensor.hpp"

namespace cdne {

static_assert(std::endian::native == std::endian::little,
              "feature files are little-endian; big-endian hosts are unsupported");

// One slide's worth of instances: a K x D feature matrix, the bag label, and
// optional grid positions used by the attention export.
struct Bag {
  std::string id;
  std::size_t label = 0;
  Tensor instances;  // K x D, no grad
  std::optional<std::vector<std::array<std::int32_t, 2>>> coords;

  std::size_t num_instances() const { return instances.rows(); }
  std::size_t dim() const { return instances.cols(); }
};

struct Dataset {
  std::vector<Bag> bags;
  std::size_t feature_dim = 0;
  std::size_t num_classes = 2;
  std::size_t negative_class = 0;

  void validate() const {
    if (num_classes < 2) throw ValidationError("dataset needs at least 2 classes");
    if (negative_class >= num_classes)
      throw ValidationError("negative_class outside [0, num_classes)");
    std::vector<std::string> ids;
    ids.reserve(bags.size());
    for (const Bag& bag : bags) ids.push_back(bag.id);
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end())
      throw ValidationError("duplicate bag ids in dataset");
    for (const Bag& bag : bags) {
      if (bag.num_instances() < 1)
        throw ValidationError("bag '" + bag.id + "' has no instances");
      if (bag.dim() != feature_dim)
        throw ValidationError("bag '" + bag.id + "' dimension differs from feature_dim");
      if (bag.label >= num_classes)
        throw ValidationError("bag '" + bag.id + "' label outside [0, num_classes)");
      if (bag.coords && bag.coords->size() != bag.num_instances())
        throw ValidationError("bag '" + bag.id + "' coords row count differs from K");
    }
  }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(num_classes, 0);
    for (const Bag& bag : bags) ++counts[bag.label];
    return counts;
  }
};

// Synthetic bag benchmark. Every bag carries a shared Gaussian offset (the
// per-bag nuisance); positive bags additionally shift a rho fraction of their
// instances by delta along a fixed per-class unit direction.
struct SyntheticSpec {
  std::size_t bags_per_class = 20;
  std::size_t num_classes = 2;
  std::size_t k_min = 8;
  std::size_t k_max = 32;
  std::size_t dim = 16;
  double positive_instance_ratio = 0.3;  // rho, fraction of witness instances
  double class_separation = 2.0;         // delta, mean shift of the witness cluster
  double bag_prior_sigma = 0.0;          // sigma_b, std of the per-bag shared offset
  double noise_sigma = 1.0;
  std::uint64_t seed = 7;

  void validate() const {
    if (bags_per_class < 1) throw ValidationError("bags_per_class must be >= 1");
    if (num_classes < 2) throw ValidationError("num_classes must be >= 2");
    if (k_min < 2) throw ValidationError("k_min must be >= 2");
    if (k_max < k_min) throw ValidationError("k_max must be >= k_min");
    if (dim < 1) throw ValidationError("dim must be >= 1");
    if (!(positive_instance_ratio > 0.0) || positive_instance_ratio > 1.0)
      throw ValidationError("positive_instance_ratio must lie in (0, 1]");
    if (class_separation < 0.0) throw ValidationError("class_separation must be >= 0");
    if (bag_prior_sigma < 0.0) throw ValidationError("bag_prior_sigma must be >= 0");
    if (noise_sigma < 0.0) throw ValidationError("noise_sigma must be >= 0");
  }
};

namespace detail {

// Features live on disk as float32; quantizing at generation time makes the
// in-memory dataset and its on-disk form round-trip exactly.
inline double quantize_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

inline std::vector<std::array<std::int32_t, 2>> grid_coords(std::size_t k) {
  const auto width = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(k))));
  std::vector<std::array<std::int32_t, 2>> coords(k);
  for (std::size_t i = 0; i < k; ++i)
    coords[i] = {static_cast<std::int32_t>(i % width), static_cast<std::int32_t>(i / width)};
  return coords;
}

}  // namespace detail

inline Dataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> unit_normal(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> k_dist(spec.k_min, spec.k_max);

  // Fixed unit directions, one per positive class, drawn before any bag.
  std::vector<std::vector<double>> directions;
  for (std::size_t c = 1; c < spec.num_classes; ++c) {
    std::vector<double> u(spec.dim);
    double norm = 0.0;
    for (double& v : u) {
      v = unit_normal(rng);
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (double& v : u) v /= norm;
    directions.push_back(std::move(u));
  }

  Dataset data;
  data.feature_dim = spec.dim;
  data.num_classes = spec.num_classes;
  data.negative_class = 0;

  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    for (std::size_t b = 0; b < spec.bags_per_class; ++b) {
      const std::size_t k = k_dist(rng);
      std::vector<double> offset(spec.dim);
      for (double& v : offset) v = spec.bag_prior_sigma * unit_normal(rng);

      std::size_t witnesses = 0;
      if (c != 0) {
        witnesses = static_cast<std::size_t>(
            std::llround(spec.positive_instance_ratio * static_cast<double>(k)));
        witnesses = std::clamp<std::size_t>(witnesses, 1, k);
      }

      std::vector<double> features(k * spec.dim);
      for (std::size_t i = 0; i < k; ++i) {
        const bool witness = c != 0 && i < witnesses;
        for (std::size_t d = 0; d < spec.dim; ++d) {
          double v = spec.noise_sigma * unit_normal(rng) + offset[d];
          if (witness) v += spec.class_separation * directions[c - 1][d];
          features[i * spec.dim + d] = detail::quantize_f32(v);
        }
      }

      Bag bag;
      char name[64];
      std::snprintf(name, sizeof(name), "c%zu-b%04zu", c, b);
      bag.id = name;
      bag.label = c;
      bag.instances = Tensor::matrix(k, spec.dim, std::move(features));
      bag.coords = detail::grid_coords(k);
      data.bags.push_back(std::move(bag));
    }
  }
  data.validate();
  return data;
}

// ---------------------------------------------------------------------------
// On-disk format.
//   manifest.json     {"feature_dim", "num_classes", "negative_class", "bags":
//                      [{"id", "label", "features", "coords"?}]}
//   features/<id>.bin u32 K, u32 D, then K*D float32 row-major
//   coords/<id>.bin   K rows of two int32
// ---------------------------------------------------------------------------

namespace detail {

inline void write_bytes(std::ofstream& out, const void* p, std::size_t n,
                        const std::string& path) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!out) throw IoError("failed writing to " + path);
}

inline void read_bytes(std::ifstream& in, void* p, std::size_t n, const std::string& what) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (in.gcount() != static_cast<std::streamsize>(n)) throw IoError("truncated read: " + what);
}

}  // namespace detail

inline void write_feature_file(const std::filesystem::path& path, const Tensor& instances) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  const auto k = static_cast<std::uint32_t>(instances.rows());
  const auto d = static_cast<std::uint32_t>(instances.cols());
  detail::write_bytes(out, &k, sizeof(k), path.string());
  detail::write_bytes(out, &d, sizeof(d), path.string());
  std::vector<float> row(instances.cols());
  for (std::size_t i = 0; i < instances.rows(); ++i) {
    for (std::size_t j = 0; j < instances.cols(); ++j)
      row[j] = static_cast<float>(instances(i, j));
    detail::write_bytes(out, row.data(), row.size() * sizeof(float), path.string());
  }
}

inline Tensor read_feature_file(const std::filesystem::path& path, const std::string& bag_id) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("missing feature file for bag '" + bag_id + "': " + path.string());
  std::uint32_t k = 0, d = 0;
  detail::read_bytes(in, &k, sizeof(k), "feature header of bag '" + bag_id + "'");
  detail::read_bytes(in, &d, sizeof(d), "feature header of bag '" + bag_id + "'");
  if (k == 0 || d == 0) throw SchemaError("bag '" + bag_id + "' has zero extent");
  std::vector<float> raw(static_cast<std::size_t>(k) * d);
  detail::read_bytes(in, raw.data(), raw.size() * sizeof(float),
                     "features of bag '" + bag_id + "'");
  std::vector<double> widened(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) widened[i] = static_cast<double>(raw[i]);
  return Tensor::matrix(k, d, std::move(widened));
}

inline void write_coords_file(const std::filesystem::path& path,
                              const std::vector<std::array<std::int32_t, 2>>& coords) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  for (const auto& c : coords)
    detail::write_bytes(out, c.data(), sizeof(std::int32_t) * 2, path.string());
}

inline std::vector<std::array<std::int32_t, 2>> read_coords_file(
    const std::filesystem::path& path, std::size_t k, const std::string& bag_id) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("missing coords file for bag '" + bag_id + "': " + path.string());
  std::vector<std::array<std::int32_t, 2>> coords(k);
  for (auto& c : coords)
    detail::read_bytes(in, c.data(), sizeof(std::int32_t) * 2,
                       "coords of bag '" + bag_id + "'");
  char extra = 0;
  if (in.read(&extra, 1); in.gcount() != 0)
    throw SchemaError("coords file of bag '" + bag_id + "' longer than K rows");
  return coords;
}

inline void write_dataset(const Dataset& data, const std::filesystem::path& dir) {
  data.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir / "features", ec);
  if (ec) throw IoError("cannot create " + (dir / "features").string());
  bool any_coords = false;
  for (const Bag& bag : data.bags) any_coords = any_coords || bag.coords.has_value();
  if (any_coords) {
    std::filesystem::create_directories(dir / "coords", ec);
    if (ec) throw IoError("cannot create " + (dir / "coords").string());
  }

  nlohmann::json manifest;
  manifest["feature_dim"] = data.feature_dim;
  manifest["num_classes"] = data.num_classes;
  manifest["negative_class"] = data.negative_class;
  manifest["bags"] = nlohmann::json::array();
  for (const Bag& bag : data.bags) {
    const std::string feat_rel = "features/" + bag.id + ".bin";
    write_feature_file(dir / feat_rel, bag.instances);
    nlohmann::json entry{{"id", bag.id}, {"label", bag.label}, {"features", feat_rel}};
    if (bag.coords) {
      const std::string coord_rel = "coords/" + bag.id + ".bin";
      write_coords_file(dir / coord_rel, *bag.coords);
      entry["coords"] = coord_rel;
    }
    manifest["bags"].push_back(std::move(entry));
  }

  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("cannot open " + (dir / "manifest.json").string() + " for writing");
  out << manifest.dump(2) << "\n";
  if (!out) throw IoError("failed writing " + (dir / "manifest.json").string());
}

inline Dataset load_dataset(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot open manifest " + manifest_path.string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("manifest " + manifest_path.string() + ": " + e.what());
  }

  for (const auto& key : {"feature_dim", "num_classes", "negative_class", "bags"})
    if (!manifest.contains(key))
      throw SchemaError("manifest missing required key '" + std::string(key) + "'");

  Dataset data;
  try {
    data.feature_dim = manifest.at("feature_dim").get<std::size_t>();
    data.num_classes = manifest.at("num_classes").get<std::size_t>();
    data.negative_class = manifest.at("negative_class").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("manifest header: ") + e.what());
  }

  const std::filesystem::path base = manifest_path.parent_path();
  for (const auto& entry : manifest.at("bags")) {
    Bag bag;
    try {
      bag.id = entry.at("id").get<std::string>();
      bag.label = entry.at("label").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError(std::string("manifest bag entry: ") + e.what());
    }
    if (bag.label >= data.num_classes)
      throw SchemaError("bag '" + bag.id + "' label outside [0, num_classes)");
    std::string feat_rel;
    std::optional<std::string> coord_rel;
    try {
      feat_rel = entry.at("features").get<std::string>();
      if (entry.contains("coords")) coord_rel = entry.at("coords").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError("manifest bag '" + bag.id + "': " + e.what());
    }
    bag.instances = read_feature_file(base / feat_rel, bag.id);
    if (bag.instances.cols() != data.feature_dim)
      throw SchemaError("bag '" + bag.id + "' feature dimension " +
                        std::to_string(bag.instances.cols()) + " != manifest feature_dim " +
                        std::to_string(data.feature_dim));
    if (coord_rel)
      bag.coords = read_coords_file(base / *coord_rel, bag.instances.rows(), bag.id);
    data.bags.push_back(std::move(bag));
  }
  data.validate();
  return data;
}

// ---------------------------------------------------------------------------
// Splits.
// ---------------------------------------------------------------------------

struct FoldSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};

// Stratified k-fold assignment. Bags are keyed by id before shuffling, so the
// split depends only on (ids, labels, folds, seed), not on bag order.
inline std::vector<FoldSplit> kfold_split(const Dataset& data, std::size_t folds,
                                          std::uint64_t seed) {
  if (folds < 2) throw ValidationError("folds must be >= 2");
  std::vector<std::vector<std::pair<std::string, std::size_t>>> by_class(data.num_classes);
  for (std::size_t i = 0; i < data.bags.size(); ++i)
    by_class[data.bags[i].label].emplace_back(data.bags[i].id, i);

  std::vector<std::size_t> fold_of(data.bags.size(), 0);
  std::mt19937_64 rng(seed);
  for (std::size_t c = 0; c < data.num_classes; ++c) {
    auto& members = by_class[c];
    if (members.size() < folds)
      throw ValidationError("class " + std::to_string(c) + " has " +
                            std::to_string(members.size()) + " bags but folds=" +
                            std::to_string(folds));
    std::sort(members.begin(), members.end());
    std::shuffle(members.begin(), members.end(), rng);
    for (std::size_t p = 0; p < members.size(); ++p) fold_of[members[p].second] = p % folds;
  }

  std::vector<FoldSplit> splits(folds);
  for (std::size_t i = 0; i < data.bags.size(); ++i)
    for (std::size_t f = 0; f < folds; ++f)
      (fold_of[i] == f ? splits[f].validation : splits[f].train).push_back(i);
  return splits;
}

}  // namespace cdne
