#include <doctest.h>

#include "approx.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>

#include "pef/data.hpp"
#include "pef/image.hpp"

using namespace pef;
namespace fs = std::filesystem;

namespace {

fs::path make_temp_dir(const char* name) {
  fs::path dir = fs::temp_directory_path() / name;
  fs::create_directories(dir);
  return dir;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
}

const char* kTwoPersonJson = R"({
  "categories": [{"id": 1, "name": "person",
                  "keypoints": ["a", "b", "c"], "skeleton": []}],
  "images": [{"id": 10, "file_name": "a.ppm", "width": 100, "height": 80}],
  "annotations": [
    {"id": 1, "image_id": 10, "category_id": 1,
     "keypoints": [5.0, 6.0, 2, 7.0, 8.0, 0, 9.0, 10.0, 1],
     "bbox": [4, 5, 20, 30], "area": 600},
    {"id": 2, "image_id": 10, "category_id": 1,
     "keypoints": [0, 0, 0, 0, 0, 0, 0, 0, 0],
     "bbox": [0, 0, 10, 10], "area": 100}
  ]
})";

}  // namespace

TEST_CASE("coco loader keeps labeled joints and drops empty instances") {
  fs::path dir = make_temp_dir("pef_test_coco");
  write_file(dir / "ann.json", kTwoPersonJson);
  Dataset ds = load_coco_keypoints((dir / "ann.json").string());
  CHECK(ds.num_joints == 3);
  REQUIRE(ds.instances.size() == 1);  // all-unlabeled instance dropped
  const auto& inst = ds.instances[0];
  REQUIRE(inst.joints.size() == 2);  // v=0 joint dropped
  CHECK(inst.joints[0].cls == 0);
  CHECK(inst.joints[0].x == 5.0);
  CHECK(inst.joints[0].visibility == 2);
  CHECK(inst.joints[1].cls == 2);
  CHECK(inst.joints[1].visibility == 1);
  CHECK(inst.area == 600.0);
  CHECK(ds.image_for(inst).width == 100);
  fs::remove_all(dir);
}

TEST_CASE("coco loader rejects broken inputs") {
  fs::path dir = make_temp_dir("pef_test_coco_bad");
  CHECK_THROWS_AS(load_coco_keypoints((dir / "missing.json").string()),
                  DataError);
  write_file(dir / "bad.json", "this is not json {");
  CHECK_THROWS_AS(load_coco_keypoints((dir / "bad.json").string()), DataError);
  write_file(dir / "cat.json", R"({
    "categories": [{"id": 1, "keypoints": ["a"]}],
    "images": [],
    "annotations": [{"image_id": 1, "category_id": 9,
                     "keypoints": [1, 1, 2]}]
  })");
  CHECK_THROWS_AS(load_coco_keypoints((dir / "cat.json").string()), DataError);
  write_file(dir / "len.json", R"({
    "categories": [{"id": 1, "keypoints": ["a", "b"]}],
    "images": [],
    "annotations": [{"image_id": 1, "category_id": 1,
                     "keypoints": [1, 1, 2]}]
  })");
  CHECK_THROWS_AS(load_coco_keypoints((dir / "len.json").string()), DataError);
  fs::remove_all(dir);
}

TEST_CASE("crop maps the bbox center to (0.5, 0.5)") {
  Image src(100, 80, 0.3f);
  KeypointInstance inst;
  inst.bbox[0] = 20;
  inst.bbox[1] = 10;
  inst.bbox[2] = 30;
  inst.bbox[3] = 40;
  inst.area = 1200;
  inst.joints = {{0, 35.0, 30.0, 2}};  // bbox center
  CropResult res = crop_and_normalize(src, inst, 48, 64);
  CHECK(res.crop.width == 48);
  CHECK(res.crop.height == 64);
  CHECK(res.instance.joints[0].x == Approx(0.5).margin(1e-9));
  CHECK(res.instance.joints[0].y == Approx(0.5).margin(1e-9));
  // constant image stays constant under any resampling
  for (float v : res.crop.pixels) CHECK(v == Approx(0.3).margin(1e-6));
  // area scales with the square of the pixel scale
  const double s = res.src_to_crop.a;
  CHECK(res.instance.area == Approx(1200 * s * s).margin(1e-6));
}

TEST_CASE("crop affine round-trips source coordinates") {
  Image src(100, 80);
  KeypointInstance inst;
  inst.bbox[0] = 5;
  inst.bbox[1] = 7;
  inst.bbox[2] = 33;
  inst.bbox[3] = 21;
  CropResult res = crop_and_normalize(src, inst, 48, 64);
  Affine2 back = res.src_to_crop.inverse();
  for (double sx : {6.0, 17.5, 30.0}) {
    for (double sy : {8.0, 15.0, 25.5}) {
      double cx, cy, rx, ry;
      res.src_to_crop.apply(sx, sy, cx, cy);
      back.apply(cx, cy, rx, ry);
      CHECK(rx == Approx(sx).margin(1e-6));
      CHECK(ry == Approx(sy).margin(1e-6));
    }
  }
}

TEST_CASE("degenerate bbox is rejected") {
  Image src(100, 80);
  KeypointInstance inst;
  inst.bbox[0] = 99.5;  // clamps to sub-pixel width
  inst.bbox[1] = 10;
  inst.bbox[2] = 50;
  inst.bbox[3] = 20;
  CHECK_THROWS_AS(crop_and_normalize(src, inst, 48, 64), DataError);
}

TEST_CASE("identity augmentation is a bit-exact no-op") {
  std::mt19937_64 rng(1);
  SynthSample s = synth_stick_figure(rng, 17, 64, 64);
  AugmentationSpec spec = AugmentationSpec::none();
  std::mt19937_64 arng(2);
  AugmentResult res = augment(s.image, s.instance, spec, arng);
  CHECK_FALSE(res.flipped);
  CHECK(res.affine.is_identity());
  REQUIRE(res.image.pixels.size() == s.image.pixels.size());
  for (std::size_t i = 0; i < res.image.pixels.size(); ++i)
    CHECK(res.image.pixels[i] == s.image.pixels[i]);
  REQUIRE(res.instance.joints.size() == s.instance.joints.size());
  for (std::size_t i = 0; i < res.instance.joints.size(); ++i) {
    CHECK(res.instance.joints[i].x == s.instance.joints[i].x);
    CHECK(res.instance.joints[i].y == s.instance.joints[i].y);
  }
}

TEST_CASE("horizontal flip is an involution") {
  std::mt19937_64 rng(3);
  SynthSample s = synth_stick_figure(rng, 17, 64, 64);
  AugmentationSpec spec = AugmentationSpec::none();
  spec.flip_prob = 1.0;
  std::mt19937_64 arng(4);
  AugmentResult once = augment(s.image, s.instance, spec, arng);
  REQUIRE(once.flipped);
  // coordinates map x -> 1 - x and classes through the flip map
  for (const auto& j : s.instance.joints) {
    const int fc = spec.flip_map(j.cls);
    const Joint* found = nullptr;
    for (const auto& fj : once.instance.joints)
      if (fj.cls == fc) found = &fj;
    REQUIRE(found != nullptr);
    CHECK(found->x == Approx(1.0 - j.x).margin(1e-12));
    CHECK(found->y == Approx(j.y).margin(1e-12));
  }
  AugmentResult twice = augment(once.image, once.instance, spec, arng);
  REQUIRE(twice.flipped);
  for (std::size_t i = 0; i < s.instance.joints.size(); ++i) {
    CHECK(twice.instance.joints[i].cls == s.instance.joints[i].cls);
    CHECK(twice.instance.joints[i].x ==
          Approx(s.instance.joints[i].x).margin(1e-12));
    CHECK(twice.instance.joints[i].y ==
          Approx(s.instance.joints[i].y).margin(1e-12));
  }
  // interior columns survive the double flip exactly
  for (int y = 0; y < 64; ++y)
    for (int x = 1; x < 64; ++x)
      for (int c = 0; c < 3; ++c)
        CHECK(twice.image.at(x, y, c) == s.image.at(x, y, c));
}

TEST_CASE("augmentation affine agrees with the emitted joints") {
  std::mt19937_64 rng(5);
  SynthSample s = synth_stick_figure(rng, 17, 64, 64);
  AugmentationSpec spec;  // defaults: scale 0.7..1.3, rot 40, flip 0.5
  std::mt19937_64 arng(6);
  int flips = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    AugmentResult res = augment(s.image, s.instance, spec, arng);
    flips += res.flipped ? 1 : 0;
    const double det =
        res.affine.a * res.affine.e - res.affine.b * res.affine.d;
    CHECK(std::abs(det) >= spec.scale_min * spec.scale_min - 1e-9);
    CHECK(std::abs(det) <= spec.scale_max * spec.scale_max + 1e-9);
    for (const auto& j : s.instance.joints) {
      double px, py;
      res.affine.apply(j.x * 64, j.y * 64, px, py);
      const int fc = res.flipped ? spec.flip_map(j.cls) : j.cls;
      const Joint* found = nullptr;
      for (const auto& rj : res.instance.joints)
        if (rj.cls == fc) found = &rj;
      REQUIRE(found != nullptr);
      CHECK(found->x == Approx(px / 64).margin(1e-6));
      CHECK(found->y == Approx(py / 64).margin(1e-6));
      const bool inside = found->x >= 0 && found->x <= 1 && found->y >= 0 &&
                          found->y <= 1;
      if (!inside) CHECK(found->visibility == 0);
    }
  }
  CHECK(flips > 800);
  CHECK(flips < 1200);
}

TEST_CASE("flip map is an involution with fixed midline") {
  FlipMap m = FlipMap::coco17();
  for (int j = 0; j < 17; ++j) CHECK(m(m(j)) == j);
  CHECK(m(0) == 0);           // nose
  CHECK(m(1) == 2);           // eyes swap
  CHECK(m(15) == 16);         // ankles swap
  FlipMap id = FlipMap::for_joint_count(5);
  for (int j = 0; j < 5; ++j) CHECK(id(j) == j);
}

TEST_CASE("sample rng seeds separate streams") {
  CHECK(sample_rng_seed(1, 2, 3) == sample_rng_seed(1, 2, 3));
  CHECK(sample_rng_seed(1, 2, 3) != sample_rng_seed(1, 2, 4));
  CHECK(sample_rng_seed(1, 2, 3) != sample_rng_seed(1, 3, 3));
  CHECK(sample_rng_seed(2, 2, 3) != sample_rng_seed(1, 2, 3));
}

TEST_CASE("synthetic figures are deterministic and well-formed") {
  std::mt19937_64 a(42), b(42);
  SynthSample s1 = synth_stick_figure(a, 17, 64, 64);
  SynthSample s2 = synth_stick_figure(b, 17, 64, 64);
  REQUIRE(s1.image.pixels.size() == s2.image.pixels.size());
  for (std::size_t i = 0; i < s1.image.pixels.size(); ++i)
    CHECK(s1.image.pixels[i] == s2.image.pixels[i]);
  REQUIRE(s1.instance.joints.size() == 17);
  const float fg = s1.background + s1.contrast;
  for (const auto& j : s1.instance.joints) {
    CHECK(j.x >= 0.0);
    CHECK(j.x <= 1.0);
    CHECK(j.y >= 0.0);
    CHECK(j.y <= 1.0);
    CHECK(j.visibility == 2);
    // the joint disc paints the nearest pixel with the foreground value
    const int px = static_cast<int>(std::lround(j.x * 64));
    const int py = static_cast<int>(std::lround(j.y * 64));
    CHECK(s1.image.at(std::min(px, 63), std::min(py, 63), 0) == fg);
  }
  // a different K draws a chain with that many joints
  std::mt19937_64 c(7);
  SynthSample s3 = synth_stick_figure(c, 5, 32, 32);
  CHECK(s3.instance.joints.size() == 5);
}

TEST_CASE("synthetic dataset round-trips through the coco loader") {
  fs::path dir = make_temp_dir("pef_test_synth_ds");
  std::vector<SynthSample> samples;
  std::mt19937_64 rng(9);
  for (int i = 0; i < 3; ++i)
    samples.push_back(synth_stick_figure(rng, 17, 64, 64));
  write_coco_dataset(dir.string(), samples, 17);
  Dataset ds = load_coco_keypoints((dir / "annotations.json").string());
  CHECK(ds.num_joints == 17);
  REQUIRE(ds.instances.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& inst = ds.instances[i];
    const auto& src = samples[i].instance;
    REQUIRE(inst.joints.size() == src.joints.size());
    for (std::size_t j = 0; j < inst.joints.size(); ++j) {
      CHECK(inst.joints[j].cls == src.joints[j].cls);
      CHECK(inst.joints[j].x ==
            Approx(src.joints[j].x * 64).margin(1e-9));
      CHECK(inst.joints[j].y ==
            Approx(src.joints[j].y * 64).margin(1e-9));
    }
    CHECK(inst.area == Approx(src.area).margin(1e-9));
    Image img = read_ppm((fs::path(ds.root_dir) /
                          ds.image_for(inst).file_name).string());
    CHECK(img.width == 64);
    CHECK(img.height == 64);
  }
  fs::remove_all(dir);
}

TEST_CASE("ppm files round trip") {
  fs::path dir = make_temp_dir("pef_test_ppm");
  Image img(5, 4);
  std::mt19937_64 rng(10);
  for (auto& p : img.pixels)
    p = static_cast<float>(rng() % 256) / 255.f;
  write_ppm((dir / "x.ppm").string(), img);
  Image back = read_ppm((dir / "x.ppm").string());
  REQUIRE(back.width == 5);
  REQUIRE(back.height == 4);
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    CHECK(back.pixels[i] == img.pixels[i]);
  write_file(dir / "bad.ppm", "P5\n2 2\n255\nxxxx");
  CHECK_THROWS_AS(read_ppm((dir / "bad.ppm").string()), ValueError);
  CHECK_THROWS_AS(read_ppm((dir / "missing.ppm").string()), ValueError);
  fs::remove_all(dir);
}

TEST_CASE("warp under the identity copies pixels exactly") {
  std::mt19937_64 rng(11);
  SynthSample s = synth_stick_figure(rng, 17, 48, 32);
  Image out = warp(s.image, Affine2{}, 48, 32);
  for (std::size_t i = 0; i < out.pixels.size(); ++i)
    CHECK(out.pixels[i] == s.image.pixels[i]);
}
