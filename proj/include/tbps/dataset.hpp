#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "tbps/config.hpp"
#include "tbps/geometry.hpp"
#include "tbps/image.hpp"
#include "tbps/vocab.hpp"

namespace tbps {

struct Attributes {
  std::string shirt;
  std::string pants;
  std::string accessory;
  std::string accessory_color;
  std::string build;

  bool operator==(const Attributes&) const = default;
};

struct PersonIdentity {
  int id = 0;
  Attributes attributes;

  bool operator==(const PersonIdentity&) const = default;
};

struct Person {
  BBox box;
  PersonIdentity identity;
  std::vector<std::string> captions;

  bool operator==(const Person&) const = default;
};

struct SceneSample {
  std::string image_path;  // relative to the dataset root
  Image image;
  std::vector<Person> persons;

  bool operator==(const SceneSample&) const = default;
};

struct Query {
  std::string caption;
  int scene = 0;  // index into gallery
  BBox box;
  int identity = 0;

  bool operator==(const Query&) const = default;
};

struct DatasetSplit {
  int image_w = 0;
  int image_h = 0;
  std::uint64_t seed = 0;
  DataConfig config;
  std::vector<SceneSample> train;
  std::vector<SceneSample> gallery;
  std::vector<Query> queries;

  bool operator==(const DatasetSplit& o) const;
};

// Deterministic in (config, seed); integer arithmetic only. Throws Error on
// configurations that cannot be satisfied.
DatasetSplit generate_dataset(const DataConfig& config, std::uint64_t seed);

// Caption for an identity. `variant` picks the phrasing (0 or 1); `clauses`
// keeps the first 1..3 comma-separated clauses.
std::string make_caption(const Attributes& a, int clauses, int variant);

// Inverse of make_caption for the clauses present; absent fields stay empty.
Attributes parse_caption(const std::string& caption);

nlohmann::json annotation_json(const DatasetSplit& split);

// Writes annotations.json plus one PPM per scene under `dir`.
void write_dataset(const DatasetSplit& split, const std::filesystem::path& dir);
DatasetSplit load_dataset(const std::filesystem::path& dir);

// Tokens of every caption in the split (train, gallery, queries) plus the
// reserved tokens. Throws on an empty split.
Vocabulary caption_vocabulary(const DatasetSplit& split);

std::array<std::uint8_t, 3> color_rgb(const std::string& name);

}  // namespace tbps
