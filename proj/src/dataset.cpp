#include "tbps/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <regex>
#include <set>
#include <sstream>

#include "tbps/rng.hpp"

namespace tbps {
namespace {

using nlohmann::json;

constexpr std::uint64_t kTrainStream = 1'000'000;
constexpr std::uint64_t kGalleryStream = 2'000'000;

struct PaletteEntry {
  const char* name;
  std::array<std::uint8_t, 3> rgb;
};

constexpr PaletteEntry kPalette[] = {
    {"red", {200, 30, 30}},    {"blue", {30, 60, 200}},     {"green", {30, 160, 50}},
    {"yellow", {225, 210, 40}}, {"white", {238, 238, 238}}, {"black", {22, 22, 22}},
    {"orange", {240, 130, 20}}, {"purple", {130, 40, 160}}, {"gray", {128, 128, 128}},
    {"pink", {240, 140, 190}},  {"brown", {120, 70, 30}},   {"cyan", {40, 200, 210}},
};

constexpr std::array<std::uint8_t, 3> kSkin[] = {{224, 180, 150}, {190, 140, 100}, {120, 80, 55}};

std::size_t attribute_space(const DataConfig& c) {
  return c.shirt_colors.size() * c.pants_colors.size() * c.accessory_kinds.size() *
         c.accessory_colors.size() * c.builds.size();
}

Attributes decode_attributes(const DataConfig& c, std::size_t index) {
  Attributes a;
  auto take = [&index](const std::vector<std::string>& v) {
    const std::string& s = v[index % v.size()];
    index /= v.size();
    return s;
  };
  a.shirt = take(c.shirt_colors);
  a.pants = take(c.pants_colors);
  a.accessory = take(c.accessory_kinds);
  a.accessory_color = take(c.accessory_colors);
  a.build = take(c.builds);
  return a;
}

void validate_config(const DataConfig& c) {
  require(c.image_w >= 32 && c.image_h >= 32, "configuration error: image must be at least 32x32");
  require(c.identities >= 1, "configuration error: identities must be positive");
  require(static_cast<std::size_t>(c.identities) <= attribute_space(c),
          "configuration error: " + std::to_string(c.identities) +
              " identities exceed the attribute space of " + std::to_string(attribute_space(c)));
  require(c.persons_min >= 1 && c.persons_min <= c.persons_max,
          "configuration error: need 1 <= persons_min <= persons_max");
  require(c.persons_max <= c.identities, "configuration error: persons_max exceeds identities");
  require(c.clauses >= 1 && c.clauses <= 3, "configuration error: clauses must be 1..3");
  require(c.query_captions >= 1 && c.query_captions <= 2,
          "configuration error: query_captions must be 1 or 2");
  require(c.distractors >= 0 && c.query_persons >= 0 &&
              c.query_persons + c.distractors <= c.identities,
          "configuration error: query_persons + distractors exceed identities");
  require(c.gallery_scenes >= 2 || c.identities == 0,
          "configuration error: every identity needs two gallery scenes");
  require(c.max_overlap_pct > 0 && c.max_overlap_pct < 70,
          "configuration error: max_overlap_pct must be in (0,70)");
  for (const auto* list : {&c.shirt_colors, &c.pants_colors, &c.accessory_colors})
    for (const auto& name : *list) color_rgb(name);
  for (const auto& kind : c.accessory_kinds)
    require(kind == "bag" || kind == "hat" || kind == "backpack",
            "configuration error: unknown accessory kind '" + kind + "'");
  for (const auto& b : c.builds)
    require(b == "slim" || b == "broad", "configuration error: unknown build '" + b + "'");
}

// Integer IoU test: inter / union < pct / 100.
bool overlap_ok(const BBox& a, const BBox& b, int pct) {
  const long iw = std::min<long>(a.x2, b.x2) - std::max<long>(a.x1, b.x1);
  const long ih = std::min<long>(a.y2, b.y2) - std::max<long>(a.y1, b.y1);
  if (iw <= 0 || ih <= 0) return true;
  const long inter = iw * ih;
  const long uni = static_cast<long>(a.area()) + static_cast<long>(b.area()) - inter;
  return inter * 100 < pct * uni;
}

std::uint8_t clamp8(int v) { return static_cast<std::uint8_t>(std::clamp(v, 0, 255)); }

void put(Image& img, int x, int y, const std::array<std::uint8_t, 3>& c, int noise) {
  std::uint8_t* p = img.pixel(x, y);
  for (int k = 0; k < 3; ++k) p[k] = clamp8(c[k] + noise);
}

void fill_rect(Image& img, Rng& rng, int x1, int y1, int x2, int y2,
               const std::array<std::uint8_t, 3>& c) {
  for (int y = std::max(y1, 0); y < std::min(y2, img.height); ++y)
    for (int x = std::max(x1, 0); x < std::min(x2, img.width); ++x) put(img, x, y, c, rng.range(-8, 8));
}

void render_background(Image& img, Rng& rng) {
  const int base = rng.range(85, 165);
  const std::array<int, 3> tint{rng.range(-20, 20), rng.range(-20, 20), rng.range(-20, 20)};
  const int bw = (img.width + 7) / 8, bh = (img.height + 7) / 8;
  std::vector<int> blocks(static_cast<std::size_t>(bw) * bh);
  for (int& b : blocks) b = rng.range(-25, 25);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const int off = blocks[(y / 8) * bw + x / 8] + rng.range(-6, 6);
      std::uint8_t* p = img.pixel(x, y);
      for (int k = 0; k < 3; ++k) p[k] = clamp8(base + tint[k] + off);
    }
  // Muted clutter so that not every coloured blob is a person.
  const int clutter = rng.range(3, 6);
  for (int i = 0; i < clutter; ++i) {
    const int w = rng.range(6, 18), h = rng.range(6, 18);
    const int x = rng.range(0, img.width - w), y = rng.range(0, img.height - h);
    std::array<std::uint8_t, 3> c{};
    for (int k = 0; k < 3; ++k) c[k] = clamp8((rng.range(0, 255) + 2 * base) / 3);
    fill_rect(img, rng, x, y, x + w, y + h, c);
  }
}

void render_person(Image& img, Rng& rng, const BBox& box, const Attributes& a) {
  const int x1 = static_cast<int>(box.x1), y1 = static_cast<int>(box.y1);
  const int w = static_cast<int>(box.width()), h = static_cast<int>(box.height());
  auto row = [&](int pct) { return y1 + h * pct / 100; };
  auto col = [&](int pct) { return x1 + w * pct / 100; };

  // Head: ellipse in the top 22%, tested in doubled integer coordinates.
  const auto skin = kSkin[rng.below(3)];
  const int cx2 = 2 * x1 + w, cy2 = 2 * y1 + h * 22 / 100;
  const int rx2 = std::max(2, w * 56 / 100), ry2 = std::max(2, h * 22 / 100);
  for (int y = y1; y < row(22); ++y)
    for (int x = x1; x < x1 + w; ++x) {
      const long dx = 2 * x + 1 - cx2, dy = 2 * y + 1 - cy2;
      if (dx * dx * ry2 * ry2 + dy * dy * rx2 * rx2 <= static_cast<long>(rx2) * rx2 * ry2 * ry2)
        put(img, x, y, skin, rng.range(-8, 8));
    }
  fill_rect(img, rng, x1, row(22), x1 + w, row(60), color_rgb(a.shirt));
  fill_rect(img, rng, col(8), row(60), col(46), y1 + h, color_rgb(a.pants));
  fill_rect(img, rng, col(54), row(60), col(92), y1 + h, color_rgb(a.pants));
  const auto acc = color_rgb(a.accessory_color);
  if (a.accessory == "hat")
    fill_rect(img, rng, col(20), y1, col(80), row(9), acc);
  else if (a.accessory == "bag")
    fill_rect(img, rng, x1, row(48), col(30), row(72), acc);
  else if (a.accessory == "backpack")
    fill_rect(img, rng, col(70), row(24), x1 + w, row(52), acc);
}

// Places boxes without heavy overlap. Returns false if placement failed.
bool layout_boxes(const DataConfig& c, Rng& rng, const std::vector<Attributes>& people,
                  std::vector<BBox>& boxes) {
  boxes.clear();
  for (const auto& a : people) {
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      const int h = c.image_h * rng.range(34, 50) / 100;
      const int wpct = a.build == "slim" ? rng.range(36, 42) : rng.range(50, 56);
      const int w = std::max(4, h * wpct / 100);
      const int x = rng.range(0, c.image_w - w), y = rng.range(0, c.image_h - h);
      BBox b{static_cast<double>(x), static_cast<double>(y), static_cast<double>(x + w),
             static_cast<double>(y + h)};
      if (std::all_of(boxes.begin(), boxes.end(),
                      [&](const BBox& o) { return overlap_ok(b, o, c.max_overlap_pct); })) {
        boxes.push_back(b);
        placed = true;
      }
    }
    if (!placed) return false;
  }
  return true;
}

SceneSample make_scene(const DataConfig& c, std::uint64_t scene_seed,
                       const std::vector<PersonIdentity>& identities, const std::vector<int>& ids,
                       const std::string& image_path) {
  Rng rng(scene_seed);
  std::vector<Attributes> people;
  for (int id : ids) people.push_back(identities[id].attributes);
  std::vector<BBox> boxes;
  while (!layout_boxes(c, rng, people, boxes)) {
  }
  SceneSample s;
  s.image_path = image_path;
  s.image = Image(c.image_w, c.image_h);
  render_background(s.image, rng);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    render_person(s.image, rng, boxes[i], people[i]);
    Person p;
    p.box = boxes[i];
    p.identity = identities[ids[i]];
    p.captions.push_back(make_caption(people[i], c.clauses, static_cast<int>(rng.below(2))));
    s.persons.push_back(std::move(p));
  }
  return s;
}

std::string scene_name(const char* split, std::size_t i) {
  std::ostringstream os;
  os << "images/" << split << '_';
  os.width(4);
  os.fill('0');
  os << i << ".ppm";
  return os.str();
}

json box_json(const BBox& b) {
  return json::array({static_cast<long>(b.x1), static_cast<long>(b.y1), static_cast<long>(b.x2),
                      static_cast<long>(b.y2)});
}

json scene_json(const SceneSample& s) {
  json persons = json::array();
  for (const auto& p : s.persons) {
    const auto& a = p.identity.attributes;
    persons.push_back({{"box", box_json(p.box)},
                       {"id", p.identity.id},
                       {"attributes",
                        {{"shirt", a.shirt},
                         {"pants", a.pants},
                         {"accessory", a.accessory},
                         {"accessory_color", a.accessory_color},
                         {"build", a.build}}},
                       {"captions", p.captions}});
  }
  return {{"image", s.image_path}, {"persons", persons}};
}

json data_config_json(const DataConfig& dc) {
  Config c;
  c.data = dc;
  json full = to_json(c);
  json out = json::object();
  for (const auto& [k, v] : full.items())
    if (k.rfind("data.", 0) == 0) out[k] = v;
  return out;
}

// --- loading ---

BBox parse_box(const json& j, const std::string& where, int image_w, int image_h) {
  if (!j.is_array() || j.size() != 4) throw Error(where + ": box must be [x1, y1, x2, y2]");
  for (const auto& v : j)
    if (!v.is_number_integer()) throw Error(where + ": box coordinates must be integers");
  BBox b{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
  if (b.x2 <= b.x1) throw Error(where + ": x2 <= x1");
  if (b.y2 <= b.y1) throw Error(where + ": y2 <= y1");
  if (b.x1 < 0 || b.y1 < 0 || b.x2 > image_w || b.y2 > image_h)
    throw Error(where + ": box out of image bounds");
  return b;
}

std::string get_string(const json& j, const char* key, const std::string& where) {
  if (!j.is_object() || !j.contains(key) || !j[key].is_string())
    throw Error(where + ": missing string field '" + key + "'");
  return j[key].get<std::string>();
}

SceneSample parse_scene(const json& j, const std::string& where, const std::filesystem::path& root,
                        int image_w, int image_h) {
  SceneSample s;
  s.image_path = get_string(j, "image", where);
  if (!j.contains("persons") || !j["persons"].is_array()) throw Error(where + ": missing persons array");
  for (std::size_t i = 0; i < j["persons"].size(); ++i) {
    const json& pj = j["persons"][i];
    const std::string pw = where + ".persons[" + std::to_string(i) + "]";
    if (!pj.is_object()) throw Error(pw + ": record is not an object");
    Person p;
    if (!pj.contains("box")) throw Error(pw + ": missing box");
    p.box = parse_box(pj["box"], pw, image_w, image_h);
    if (!pj.contains("id") || !pj["id"].is_number_integer() || pj["id"].get<int>() < 0)
      throw Error(pw + ": missing or negative id");
    p.identity.id = pj["id"].get<int>();
    if (!pj.contains("attributes")) throw Error(pw + ": missing attributes");
    const json& aj = pj["attributes"];
    p.identity.attributes = {get_string(aj, "shirt", pw), get_string(aj, "pants", pw),
                             get_string(aj, "accessory", pw), get_string(aj, "accessory_color", pw),
                             get_string(aj, "build", pw)};
    if (!pj.contains("captions") || !pj["captions"].is_array())
      throw Error(pw + ": missing captions array");
    if (pj["captions"].empty()) throw Error(pw + ": captions array is empty");
    for (const auto& c : pj["captions"]) {
      if (!c.is_string() || c.get<std::string>().empty())
        throw Error(pw + ": captions must be non-empty strings");
      p.captions.push_back(c.get<std::string>());
    }
    s.persons.push_back(std::move(p));
  }
  s.image = read_ppm(root / s.image_path);
  if (s.image.width != image_w || s.image.height != image_h)
    throw Error(where + ": image size differs from meta");
  return s;
}

}  // namespace

std::array<std::uint8_t, 3> color_rgb(const std::string& name) {
  for (const auto& e : kPalette)
    if (name == e.name) return e.rgb;
  throw Error("configuration error: unknown colour '" + name + "'");
}

bool DatasetSplit::operator==(const DatasetSplit& o) const {
  return image_w == o.image_w && image_h == o.image_h && seed == o.seed &&
         data_config_json(config) == data_config_json(o.config) && train == o.train &&
         gallery == o.gallery && queries == o.queries;
}

std::string make_caption(const Attributes& a, int clauses, int variant) {
  require(clauses >= 1 && clauses <= 3, "make_caption: clauses must be 1..3");
  std::vector<std::string> parts;
  parts.push_back("a " + a.build + " person " + (variant ? "in" : "wearing") + " a " + a.shirt + " shirt");
  parts.push_back(a.pants + " pants");
  const std::string verb = variant ? "with" : (a.accessory == "hat" ? "wearing" : "carrying");
  parts.push_back(verb + " a " + a.accessory_color + " " + a.accessory);
  std::string out;
  for (int i = 0; i < clauses; ++i) out += (i ? ", " : "") + parts[i];
  return out;
}

Attributes parse_caption(const std::string& caption) {
  static const std::regex first(R"(^a (\w+) person (?:wearing|in) a (\w+) shirt$)");
  static const std::regex second(R"(^(\w+) pants$)");
  static const std::regex third(R"(^(?:carrying|wearing|with) a (\w+) (\w+)$)");
  Attributes a;
  std::stringstream ss(caption);
  std::string clause;
  int index = 0;
  while (std::getline(ss, clause, ',')) {
    clause.erase(0, clause.find_first_not_of(' '));
    std::smatch m;
    if (index == 0 && std::regex_match(clause, m, first)) {
      a.build = m[1];
      a.shirt = m[2];
    } else if (index == 1 && std::regex_match(clause, m, second)) {
      a.pants = m[1];
    } else if (index == 2 && std::regex_match(clause, m, third)) {
      a.accessory_color = m[1];
      a.accessory = m[2];
    } else {
      throw Error("unparseable caption clause '" + clause + "'");
    }
    ++index;
  }
  return a;
}

DatasetSplit generate_dataset(const DataConfig& c, std::uint64_t seed) {
  validate_config(c);
  Rng rng(seed);

  // Identities: distinct attribute tuples.
  std::vector<PersonIdentity> identities;
  std::set<std::size_t> used;
  const std::size_t space = attribute_space(c);
  while (static_cast<int>(identities.size()) < c.identities) {
    const std::size_t idx = rng.below(space);
    if (!used.insert(idx).second) continue;
    identities.push_back({static_cast<int>(identities.size()), decode_attributes(c, idx)});
  }

  DatasetSplit split;
  split.image_w = c.image_w;
  split.image_h = c.image_h;
  split.seed = seed;
  split.config = c;

  auto pick_distinct = [&](Rng& r, int count) {
    std::vector<int> ids = r.permutation(c.identities);
    ids.resize(count);
    return ids;
  };

  for (int s = 0; s < c.train_scenes; ++s) {
    Rng srng(derive_seed(seed, kTrainStream + s));
    const int count = srng.range(c.persons_min, c.persons_max);
    split.train.push_back(make_scene(c, srng.next(), identities, pick_distinct(srng, count),
                                     scene_name("train", s)));
  }

  // Gallery occupancy: every identity twice, then random fill.
  std::vector<std::vector<int>> occupancy(c.gallery_scenes);
  std::vector<int> capacity(c.gallery_scenes);
  int total = 0;
  for (int s = 0; s < c.gallery_scenes; ++s) total += (capacity[s] = rng.range(c.persons_min, c.persons_max));
  require(total >= 2 * c.identities,
          "configuration error: gallery has too few person slots for two occurrences per identity");
  std::vector<int> required;
  for (int id = 0; id < c.identities; ++id) required.insert(required.end(), {id, id});
  rng.shuffle(required);
  for (int id : required) {
    std::vector<int> candidates;
    for (int s = 0; s < c.gallery_scenes; ++s)
      if (static_cast<int>(occupancy[s].size()) < capacity[s] &&
          std::find(occupancy[s].begin(), occupancy[s].end(), id) == occupancy[s].end())
        candidates.push_back(s);
    require(!candidates.empty(), "configuration error: cannot place every identity twice in the gallery");
    occupancy[candidates[rng.below(candidates.size())]].push_back(id);
  }
  for (int s = 0; s < c.gallery_scenes; ++s) {
    while (static_cast<int>(occupancy[s].size()) < capacity[s]) {
      const int id = static_cast<int>(rng.below(c.identities));
      if (std::find(occupancy[s].begin(), occupancy[s].end(), id) == occupancy[s].end())
        occupancy[s].push_back(id);
    }
    rng.shuffle(occupancy[s]);
  }
  for (int s = 0; s < c.gallery_scenes; ++s)
    split.gallery.push_back(make_scene(c, derive_seed(seed, kGalleryStream + s), identities,
                                       occupancy[s], scene_name("gallery", s)));

  // Queries: distractors are the first identities of a shuffled order and are
  // never queried.
  std::vector<int> order = rng.permutation(c.identities);
  for (int q = 0; q < c.query_persons; ++q) {
    const int id = order[c.distractors + q];
    std::vector<std::pair<int, int>> where;
    for (int s = 0; s < c.gallery_scenes; ++s)
      for (std::size_t p = 0; p < split.gallery[s].persons.size(); ++p)
        if (split.gallery[s].persons[p].identity.id == id) where.emplace_back(s, static_cast<int>(p));
    const auto [scene, idx] = where[rng.below(where.size())];
    Person& person = split.gallery[scene].persons[idx];
    person.captions.clear();
    for (int v = 0; v < c.query_captions; ++v) {
      person.captions.push_back(make_caption(person.identity.attributes, c.clauses, v));
      split.queries.push_back({person.captions.back(), scene, person.box, id});
    }
  }
  return split;
}

nlohmann::json annotation_json(const DatasetSplit& split) {
  json train = json::array(), gallery = json::array(), queries = json::array();
  for (const auto& s : split.train) train.push_back(scene_json(s));
  for (const auto& s : split.gallery) gallery.push_back(scene_json(s));
  for (const auto& q : split.queries)
    queries.push_back({{"caption", q.caption}, {"scene", q.scene}, {"box", box_json(q.box)}, {"id", q.identity}});
  return {{"meta",
           {{"image_w", split.image_w},
            {"image_h", split.image_h},
            {"seed", split.seed},
            {"config", data_config_json(split.config)}}},
          {"train", train},
          {"gallery", gallery},
          {"queries", queries}};
}

void write_dataset(const DatasetSplit& split, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  for (const auto* scenes : {&split.train, &split.gallery})
    for (const auto& s : *scenes) write_ppm(s.image, dir / s.image_path);
  std::ofstream out(dir / "annotations.json", std::ios::binary);
  require(out.good(), "cannot write " + (dir / "annotations.json").string());
  out << annotation_json(split).dump(1) << '\n';
}

DatasetSplit load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "annotations.json", std::ios::binary);
  require(in.good(), "cannot open " + (dir / "annotations.json").string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(std::string("annotations.json is not valid JSON: ") + e.what());
  }
  for (const char* key : {"meta", "train", "gallery", "queries"})
    if (!j.contains(key)) throw Error(std::string("annotations.json: missing top-level field '") + key + "'");
  const json& meta = j["meta"];
  DatasetSplit split;
  try {
    split.image_w = meta.at("image_w").get<int>();
    split.image_h = meta.at("image_h").get<int>();
    split.seed = meta.at("seed").get<std::uint64_t>();
    Config c;
    for (const auto& [k, v] : meta.at("config").items()) {
      std::string text = v.is_string() ? v.get<std::string>() : v.dump();
      if (v.is_array()) {
        text.clear();
        for (std::size_t i = 0; i < v.size(); ++i) text += (i ? "," : "") + v[i].get<std::string>();
      }
      apply_override(c, k, text);
    }
    split.config = c.data;
  } catch (const json::exception& e) {
    throw Error(std::string("meta: ") + e.what());
  }
  for (const auto& [name, target] : {std::pair{"train", &split.train}, std::pair{"gallery", &split.gallery}}) {
    if (!j[name].is_array()) throw Error(std::string(name) + ": expected an array");
    for (std::size_t i = 0; i < j[name].size(); ++i)
      target->push_back(parse_scene(j[name][i], std::string(name) + "[" + std::to_string(i) + "]", dir,
                                    split.image_w, split.image_h));
  }
  if (!j["queries"].is_array()) throw Error("queries: expected an array");
  for (std::size_t i = 0; i < j["queries"].size(); ++i) {
    const json& qj = j["queries"][i];
    const std::string where = "queries[" + std::to_string(i) + "]";
    Query q;
    q.caption = get_string(qj, "caption", where);
    if (!qj.contains("scene") || !qj["scene"].is_number_integer()) throw Error(where + ": missing scene");
    q.scene = qj["scene"].get<int>();
    if (q.scene < 0 || q.scene >= static_cast<int>(split.gallery.size()))
      throw Error(where + ": scene index out of range");
    if (!qj.contains("box")) throw Error(where + ": missing box");
    q.box = parse_box(qj["box"], where, split.image_w, split.image_h);
    if (!qj.contains("id") || !qj["id"].is_number_integer()) throw Error(where + ": missing id");
    q.identity = qj["id"].get<int>();
    const auto& persons = split.gallery[q.scene].persons;
    if (std::none_of(persons.begin(), persons.end(),
                     [&](const Person& p) { return p.box == q.box && p.identity.id == q.identity; }))
      throw Error(where + ": ground-truth box is not annotated in its gallery scene");
    split.queries.push_back(std::move(q));
  }
  return split;
}

Vocabulary caption_vocabulary(const DatasetSplit& split) {
  std::vector<std::string> captions;
  for (const auto* scenes : {&split.train, &split.gallery})
    for (const auto& s : *scenes)
      for (const auto& p : s.persons) captions.insert(captions.end(), p.captions.begin(), p.captions.end());
  for (const auto& q : split.queries) captions.push_back(q.caption);
  require(!captions.empty(), "caption_vocabulary: split has no captions");
  return Vocabulary::from_captions(captions);
}

}  // namespace tbps
