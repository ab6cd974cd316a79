#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>

#include "tbps/config.hpp"
#include "tbps/tensor.hpp"

using namespace tbps;

TEST_CASE("desk profile carries the desk benchmark sizes") {
  const Config c = make_profile("desk");
  CHECK(c.data.identities == 40);
  CHECK(c.data.train_scenes == 300);
  CHECK(c.data.gallery_scenes == 100);
  CHECK(c.data.query_persons * c.data.query_captions == 60);
  CHECK(c.data.image_w == 128);
  CHECK(c.data.image_h == 128);
  CHECK(c.train.epochs == 15);
  CHECK(c.train.batch == 4);
  CHECK(c.eval.gallery_size == 50);
  CHECK(c.model.dim == 128);
  CHECK(c.model.base_channels == 64);
  CHECK(c.model.id_channels == 32);
  CHECK(c.loss.csal_scale == doctest::Approx(10.0));
}

TEST_CASE("paper profile restores the large-scale dimensions") {
  const Config c = make_profile("paper");
  CHECK(c.model.dim == 768);
  CHECK(c.train.epochs == 12);
  CHECK(c.eval.gallery_size == 100);
  CHECK(c.loss.csal == doctest::Approx(0.1));
  CHECK(c.oim.temperature == doctest::Approx(0.1));
  CHECK(c.oim.momentum == doctest::Approx(0.5));
  CHECK(c.train.lr_det == doctest::Approx(1e-4));
  CHECK(c.train.lr_id == doctest::Approx(1e-3));
  CHECK(c.train.lr_proj == doctest::Approx(1e-4));
  CHECK_THROWS_AS(make_profile("huge"), Error);
}

TEST_CASE("overrides parse typed values and reject unknown keys") {
  Config c = make_profile("desk");
  apply_override(c, "model.dim=64");
  apply_override(c, "model.sdrpn", "false");
  apply_override(c, "loss.csal_norm=sum");
  apply_override(c, "model.anchor_scales=4,8");
  CHECK(c.model.dim == 64);
  CHECK_FALSE(c.model.sdrpn);
  CHECK(c.loss.csal_norm == "sum");
  CHECK(c.model.anchor_scales == std::vector<double>{4, 8});
  try {
    apply_override(c, "model.nope=1");
    FAIL("unknown key accepted");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("model.nope") != std::string::npos);
  }
  CHECK_THROWS_AS(apply_override(c, "model.dim=abc"), Error);
  CHECK_THROWS_AS(apply_override(c, "model.dim"), Error);
  CHECK_THROWS_AS(apply_override(c, "profile=paper"), Error);
}

TEST_CASE("every key survives a json round trip") {
  Config c = make_profile("desk");
  apply_override(c, "train.epochs=3");
  apply_override(c, "data.shirt_colors=red,blue");
  const Config back = config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
  CHECK(config_hash(back) == config_hash(c));
  const auto keys = config_keys();
  CHECK(std::find(keys.begin(), keys.end(), "loss.csal") != keys.end());
  CHECK(std::find(keys.begin(), keys.end(), "rpn.pre_nms_train") != keys.end());
}

TEST_CASE("hash distinguishes configurations") {
  Config a = make_profile("desk"), b = make_profile("desk");
  CHECK(config_hash(a) == config_hash(b));
  apply_override(b, "train.lr_det=0.5");
  CHECK(config_hash(a) != config_hash(b));
}
