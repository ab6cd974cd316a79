#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "tbps/dataset.hpp"

using namespace tbps;
namespace fs = std::filesystem;

namespace {

DataConfig small_config() {
  DataConfig c;
  c.identities = 12;
  c.train_scenes = 10;
  c.gallery_scenes = 12;
  c.query_persons = 4;
  c.distractors = 2;
  c.image_w = 64;
  c.image_h = 64;
  c.persons_max = 3;
  return c;
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("tbps_test_dataset_" + name);
  fs::remove_all(p);
  return p;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void rewrite_annotations(const fs::path& dir, const std::function<void(nlohmann::json&)>& edit) {
  nlohmann::json j = nlohmann::json::parse(read_file(dir / "annotations.json"));
  edit(j);
  std::ofstream(dir / "annotations.json") << j.dump();
}

}  // namespace

TEST_CASE("generation is deterministic in seed and config") {
  const DataConfig c = small_config();
  const DatasetSplit a = generate_dataset(c, 5), b = generate_dataset(c, 5), other = generate_dataset(c, 6);
  CHECK(a == b);
  CHECK(annotation_json(a).dump() == annotation_json(b).dump());
  CHECK_FALSE(a == other);
}

TEST_CASE("files are byte-identical across two writes") {
  const DatasetSplit s = generate_dataset(small_config(), 1);
  const fs::path d1 = temp_dir("w1"), d2 = temp_dir("w2");
  write_dataset(s, d1);
  write_dataset(s, d2);
  for (const auto& e : fs::recursive_directory_iterator(d1)) {
    if (!e.is_regular_file()) continue;
    const fs::path rel = fs::relative(e.path(), d1);
    CHECK(read_file(e.path()) == read_file(d2 / rel));
  }
}

TEST_CASE("fixed persons per scene and clause count are honoured") {
  DataConfig c = small_config();
  c.persons_min = c.persons_max = 2;
  const DatasetSplit s = generate_dataset(c, 2);
  for (const auto& scene : s.train) CHECK(scene.persons.size() == 2);
  for (const auto& scene : s.gallery) CHECK(scene.persons.size() == 2);
  for (const auto& scene : s.train)
    for (const auto& p : scene.persons)
      for (const auto& cap : p.captions) CHECK(std::count(cap.begin(), cap.end(), ',') == 2);
}

TEST_CASE("captions describe the rendered attributes") {
  const DatasetSplit s = generate_dataset(small_config(), 3);
  int checked = 0;
  for (const auto* scenes : {&s.train, &s.gallery})
    for (const auto& scene : *scenes)
      for (const auto& p : scene.persons)
        for (const auto& cap : p.captions) {
          const Attributes a = parse_caption(cap);
          CHECK(a == p.identity.attributes);
          ++checked;
        }
  CHECK(checked > 0);
  for (const auto& q : s.queries) {
    const Attributes a = parse_caption(q.caption);
    bool found = false;
    for (const auto& p : s.gallery[q.scene].persons)
      if (p.box == q.box) {
        found = true;
        CHECK(p.identity.id == q.identity);
        CHECK(a == p.identity.attributes);
      }
    CHECK(found);
  }
}

TEST_CASE("make_caption and parse_caption are inverse on each clause count") {
  Attributes a{"red", "blue", "hat", "green", "slim"};
  for (int clauses = 1; clauses <= 3; ++clauses)
    for (int variant = 0; variant < 2; ++variant) {
      const Attributes back = parse_caption(make_caption(a, clauses, variant));
      CHECK(back.build == "slim");
      CHECK(back.shirt == "red");
      CHECK(back.pants == (clauses >= 2 ? "blue" : ""));
      CHECK(back.accessory == (clauses >= 3 ? "hat" : ""));
    }
}

TEST_CASE("split hygiene and query coverage") {
  const DatasetSplit s = generate_dataset(small_config(), 4);
  CHECK(s.train.size() == 10);
  CHECK(s.gallery.size() == 12);
  CHECK(s.queries.size() == 8);
  std::set<std::string> train_paths, gallery_paths;
  for (const auto& t : s.train) train_paths.insert(t.image_path);
  for (const auto& g : s.gallery) gallery_paths.insert(g.image_path);
  for (const auto& p : train_paths) CHECK(gallery_paths.count(p) == 0);
  std::set<int> ids;
  for (const auto& g : s.gallery)
    for (const auto& p : g.persons) ids.insert(p.identity.id);
  CHECK(ids.size() == 12);  // every identity appears in the gallery
}

TEST_CASE("write then load gives a structurally equal split") {
  const DatasetSplit s = generate_dataset(small_config(), 7);
  const fs::path d = temp_dir("roundtrip");
  write_dataset(s, d);
  const DatasetSplit back = load_dataset(d);
  CHECK(back == s);
}

TEST_CASE("malformed annotations are rejected with the record index") {
  const DatasetSplit s = generate_dataset(small_config(), 8);
  const fs::path d = temp_dir("bad");
  write_dataset(s, d);
  rewrite_annotations(d, [](nlohmann::json& j) {
    auto& box = j["gallery"][3]["persons"][1]["box"];
    box[2] = box[0];
  });
  try {
    load_dataset(d);
    FAIL("accepted x2 <= x1");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("gallery[3].persons[1]") != std::string::npos);
    CHECK(std::string(e.what()).find("x2 <= x1") != std::string::npos);
  }
  write_dataset(s, d);
  rewrite_annotations(d, [](nlohmann::json& j) { j["train"][0]["persons"][0].erase("captions"); });
  try {
    load_dataset(d);
    FAIL("accepted missing captions");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("captions") != std::string::npos);
  }
  CHECK_THROWS_AS(load_dataset(temp_dir("missing")), Error);
}

TEST_CASE("impossible configurations are refused") {
  DataConfig c = small_config();
  c.identities = 100000;
  CHECK_THROWS_AS(generate_dataset(c, 0), Error);
  c = small_config();
  c.persons_min = 5;
  c.persons_max = 3;
  CHECK_THROWS_AS(generate_dataset(c, 0), Error);
  c = small_config();
  c.clauses = 4;
  CHECK_THROWS_AS(generate_dataset(c, 0), Error);
}

TEST_CASE("vocabulary covers every caption token plus reserved") {
  DatasetSplit s = generate_dataset(small_config(), 9);
  const Vocabulary v = caption_vocabulary(s);
  for (const auto& r : Vocabulary::reserved()) CHECK(v.contains(r));
  for (const auto& q : s.queries)
    for (const auto& seg : split_caption(q.caption))
      for (const auto& w : seg) CHECK(v.contains(w));
  CHECK(caption_vocabulary(s) == v);
  DatasetSplit empty;
  CHECK_THROWS_AS(caption_vocabulary(empty), Error);

  const Vocabulary small = Vocabulary::from_captions({"a red shirt", "a red hat"});
  for (const char* w : {"a", "red", "shirt", "hat", "[pad]", "[cls]", "[unk]"}) CHECK(small.contains(w));
  CHECK(small.id("hello") == Vocabulary::kUnk);
}
