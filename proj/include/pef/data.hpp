#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "pef/image.hpp"
#include "pef/tensor.hpp"

namespace pef {

struct DataError : std::runtime_error {
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

struct Joint {
  int cls = 0;       // 0..K-1
  double x = 0;      // crop-normalized [0,1] after cropping; source px before
  double y = 0;
  int visibility = 0;  // 0 unlabeled, 1 occluded, 2 visible
};

struct KeypointInstance {
  std::vector<Joint> joints;  // at most one per class, only labeled ones
  int image_id = 0;
  double bbox[4] = {0, 0, 0, 0};  // x, y, w, h in source pixels
  double area = 0;                // pixels^2
};

struct ImageRef {
  int id = 0;
  std::string file_name;
  int width = 0;
  int height = 0;
};

struct Dataset {
  std::vector<KeypointInstance> instances;
  std::map<int, ImageRef> images;
  int num_joints = 17;
  std::string root_dir;

  const ImageRef& image_for(const KeypointInstance& inst) const {
    auto it = images.find(inst.image_id);
    if (it == images.end())
      throw DataError("instance references unknown image id " +
                      std::to_string(inst.image_id));
    return it->second;
  }
};

// COCO 17-keypoint conventions -----------------------------------------------

inline const std::vector<std::string>& coco_joint_names() {
  static const std::vector<std::string> names = {
      "nose", "left_eye", "right_eye", "left_ear", "right_ear",
      "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
      "left_wrist", "right_wrist", "left_hip", "right_hip",
      "left_knee", "right_knee", "left_ankle", "right_ankle"};
  return names;
}

inline const std::vector<std::pair<int, int>>& coco_skeleton() {
  static const std::vector<std::pair<int, int>> edges = {
      {15, 13}, {13, 11}, {16, 14}, {14, 12}, {11, 12}, {5, 11}, {6, 12},
      {5, 6},   {5, 7},   {6, 8},   {7, 9},   {8, 10},  {1, 2},  {0, 1},
      {0, 2},   {1, 3},   {2, 4},   {3, 5},   {4, 6}};
  return edges;
}

inline std::vector<double> coco_sigmas() {
  return {0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072,
          0.062, 0.062, 0.107, 0.107, 0.087, 0.087, 0.089, 0.089};
}

// Left/right class permutation used by flip augmentation and the flip
// test; identity on midline joints and on non-COCO skeletons.
struct FlipMap {
  std::vector<int> perm;

  static FlipMap identity(int k) {
    FlipMap m;
    m.perm.resize(k);
    for (int i = 0; i < k; ++i) m.perm[i] = i;
    return m;
  }

  static FlipMap coco17() {
    FlipMap m = identity(17);
    const int pairs[8][2] = {{1, 2}, {3, 4},  {5, 6},   {7, 8},
                             {9, 10}, {11, 12}, {13, 14}, {15, 16}};
    for (auto& p : pairs) std::swap(m.perm[p[0]], m.perm[p[1]]);
    return m;
  }

  static FlipMap for_joint_count(int k) {
    return k == 17 ? coco17() : identity(k);
  }

  int operator()(int cls) const { return perm.at(static_cast<std::size_t>(cls)); }
};

// COCO keypoint annotation loading -------------------------------------------

inline Dataset load_coco_keypoints(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open annotation file: " + path);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed annotation file: " + std::string(e.what()));
  }
  Dataset ds;
  ds.root_dir = std::filesystem::path(path).parent_path().string();

  std::map<int, int> category_joints;  // id -> keypoint count
  if (doc.contains("categories")) {
    for (const auto& cat : doc["categories"]) {
      const int id = cat.at("id").get<int>();
      int k = 17;
      if (cat.contains("keypoints")) k = static_cast<int>(cat["keypoints"].size());
      category_joints[id] = k;
      ds.num_joints = k;
    }
  } else {
    category_joints[1] = 17;
  }

  if (doc.contains("images")) {
    for (const auto& im : doc["images"]) {
      ImageRef ref;
      ref.id = im.at("id").get<int>();
      ref.file_name = im.value("file_name", "");
      ref.width = im.value("width", 0);
      ref.height = im.value("height", 0);
      ds.images[ref.id] = ref;
    }
  }

  if (!doc.contains("annotations")) return ds;
  for (const auto& ann : doc["annotations"]) {
    const int cat_id = ann.value("category_id", 1);
    auto cit = category_joints.find(cat_id);
    if (cit == category_joints.end())
      throw DataError("unknown category id " + std::to_string(cat_id));
    const int k = cit->second;
    if (!ann.contains("keypoints")) continue;
    const auto& kps = ann["keypoints"];
    if (static_cast<int>(kps.size()) != 3 * k)
      throw DataError("annotation keypoints length != 3*K");
    KeypointInstance inst;
    inst.image_id = ann.value("image_id", 0);
    if (ann.contains("bbox") && ann["bbox"].size() == 4)
      for (int i = 0; i < 4; ++i) inst.bbox[i] = ann["bbox"][i].get<double>();
    inst.area = ann.value("area", inst.bbox[2] * inst.bbox[3]);
    for (int j = 0; j < k; ++j) {
      const int v = kps[3 * j + 2].get<int>();
      if (v <= 0) continue;
      Joint joint;
      joint.cls = j;
      joint.x = kps[3 * j].get<double>();
      joint.y = kps[3 * j + 1].get<double>();
      joint.visibility = v;
      inst.joints.push_back(joint);
    }
    if (!inst.joints.empty()) ds.instances.push_back(std::move(inst));
  }
  return ds;
}

// Cropping --------------------------------------------------------------------

struct CropResult {
  Image crop;
  KeypointInstance instance;  // coords crop-normalized, area in crop px^2
  Affine2 src_to_crop;        // source px -> crop px
};

// Expand the instance bbox to the crop aspect ratio, resample bilinearly
// to (out_w, out_h), and map keypoints through the same affine into [0,1].
inline CropResult crop_and_normalize(const Image& src,
                                     const KeypointInstance& inst,
                                     int out_w, int out_h) {
  double bx = inst.bbox[0], by = inst.bbox[1];
  double bw = inst.bbox[2], bh = inst.bbox[3];
  // clamp to the image
  const double x1 = std::clamp(bx, 0.0, static_cast<double>(src.width));
  const double y1 = std::clamp(by, 0.0, static_cast<double>(src.height));
  const double x2 = std::clamp(bx + bw, 0.0, static_cast<double>(src.width));
  const double y2 = std::clamp(by + bh, 0.0, static_cast<double>(src.height));
  bx = x1; by = y1; bw = x2 - x1; bh = y2 - y1;
  if (bw <= 1.0 || bh <= 1.0) throw DataError("degenerate bbox after clamping");

  const double aspect = static_cast<double>(out_w) / out_h;
  double cw = bw, ch = bh;
  if (cw / ch < aspect)
    cw = ch * aspect;
  else
    ch = cw / aspect;
  const double cx = bx + bw / 2, cy = by + bh / 2;

  const double s = static_cast<double>(out_w) / cw;  // == out_h / ch
  Affine2 fwd = Affine2::translation(-(cx - cw / 2), -(cy - ch / 2))
                    .then(Affine2::scaling(s, s));

  CropResult res;
  res.src_to_crop = fwd;
  res.crop = warp(src, fwd, out_w, out_h);
  res.instance = inst;
  res.instance.area = inst.area * s * s;
  for (auto& j : res.instance.joints) {
    double px, py;
    fwd.apply(j.x, j.y, px, py);
    j.x = px / out_w;
    j.y = py / out_h;
    if (j.x < 0 || j.x > 1 || j.y < 0 || j.y > 1) j.visibility = 0;
  }
  return res;
}

// Augmentation ----------------------------------------------------------------

struct AugmentationSpec {
  double scale_min = 0.7;
  double scale_max = 1.3;
  double rotation_deg = 40.0;  // drawn from [-rotation_deg, +rotation_deg]
  double flip_prob = 0.5;
  FlipMap flip_map = FlipMap::coco17();

  static AugmentationSpec none(int k = 17) {
    AugmentationSpec s;
    s.scale_min = 1.0;
    s.scale_max = 1.0;
    s.rotation_deg = 0.0;
    s.flip_prob = 0.0;
    s.flip_map = FlipMap::for_joint_count(k);
    return s;
  }
};

struct AugmentResult {
  Image image;
  KeypointInstance instance;
  Affine2 affine;  // crop px -> crop px, as applied to the image
  bool flipped = false;
};

// One affine (scale, rotation about the crop center, optional horizontal
// flip) applied to image and keypoints together. Joints pushed outside
// [0,1] get visibility 0; flipped joints are remapped through the flip map.
template <class Rng>
AugmentResult augment(const Image& crop, const KeypointInstance& inst,
                      const AugmentationSpec& spec, Rng& rng) {
  std::uniform_real_distribution<double> uscale(spec.scale_min, spec.scale_max);
  std::uniform_real_distribution<double> urot(-spec.rotation_deg,
                                              spec.rotation_deg);
  std::uniform_real_distribution<double> uflip(0.0, 1.0);
  const double s = uscale(rng);
  const double theta = urot(rng) * (3.14159265358979323846 / 180.0);
  const bool flip = uflip(rng) < spec.flip_prob;

  AugmentResult res;
  res.flipped = flip;
  const double cx = crop.width / 2.0, cy = crop.height / 2.0;
  Affine2 a = Affine2::translation(-cx, -cy);
  if (flip) a = a.then(Affine2::scaling(-1, 1));
  a = a.then(Affine2::rotation(theta))
          .then(Affine2::scaling(s, s))
          .then(Affine2::translation(cx, cy));
  res.affine = a;

  res.instance = inst;
  if (a.is_identity()) {
    res.image = crop;  // bit-exact no-op
  } else {
    res.image = warp(crop, a, crop.width, crop.height);
  }
  for (auto& j : res.instance.joints) {
    double px, py;
    a.apply(j.x * crop.width, j.y * crop.height, px, py);
    j.x = px / crop.width;
    j.y = py / crop.height;
    if (flip) j.cls = spec.flip_map(j.cls);
    if (j.x < 0 || j.x > 1 || j.y < 0 || j.y > 1) j.visibility = 0;
  }
  if (flip)
    std::sort(res.instance.joints.begin(), res.instance.joints.end(),
              [](const Joint& l, const Joint& r) { return l.cls < r.cls; });
  return res;
}

// Per-sample stream hashing: parallel and serial loaders see the same rng.
inline std::uint64_t sample_rng_seed(std::uint64_t seed, std::uint64_t epoch,
                                     std::uint64_t index) {
  std::uint64_t z = seed ^ (epoch * 0x9e3779b97f4a7c15ull) ^
                    (index * 0xbf58476d1ce4e5b9ull);
  z ^= z >> 30;
  z *= 0xbf58476d1ce4e5b9ull;
  z ^= z >> 27;
  z *= 0x94d049bb133111ebull;
  z ^= z >> 31;
  return z;
}

// Synthetic stick figures -----------------------------------------------------

struct SynthSample {
  Image image;
  KeypointInstance instance;  // coords normalized to [0,1] of the image
  float background = 0.f;
  float contrast = 0.f;
};

namespace synth_detail {

inline void place(std::vector<std::array<double, 2>>& pts, int idx, double x,
                  double y) {
  pts[static_cast<std::size_t>(idx)] = {std::clamp(x, 0.02, 0.98),
                                        std::clamp(y, 0.02, 0.98)};
}

}  // namespace synth_detail

// Randomized articulated figure on a plain background with exact joint
// coordinates; deterministic per rng state. K=17 draws the COCO skeleton,
// other K a jointed chain.
template <class Rng>
SynthSample synth_stick_figure(Rng& rng, int k, int width, int height,
                               double min_contrast = 0.5) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  SynthSample out;
  out.background = static_cast<float>(u01(rng) * 0.25);
  out.contrast = static_cast<float>(min_contrast + u01(rng) * 0.2);
  out.image = Image(width, height, out.background);
  const float fg = out.background + out.contrast;

  std::vector<std::array<double, 2>> pts(static_cast<std::size_t>(k));
  std::vector<std::pair<int, int>> edges;
  auto angle = [&](double lo, double hi) { return lo + u01(rng) * (hi - lo); };
  const double pi = 3.14159265358979323846;

  if (k == 17) {
    using synth_detail::place;
    const double scale = 0.8 + u01(rng) * 0.3;
    const double hx = 0.5 + (u01(rng) - 0.5) * 0.15;
    const double hy = 0.55 + (u01(rng) - 0.5) * 0.1;
    const double torso = 0.22 * scale;
    const double torso_ang = -pi / 2 + angle(-0.25, 0.25);
    const double nx = hx + torso * std::cos(torso_ang);
    const double ny = hy + torso * std::sin(torso_ang);
    const double px_ = -std::sin(torso_ang), py_ = std::cos(torso_ang);
    const double shoulder_w = 0.09 * scale, hip_w = 0.07 * scale;
    place(pts, 5, nx + px_ * shoulder_w, ny + py_ * shoulder_w);   // L shoulder
    place(pts, 6, nx - px_ * shoulder_w, ny - py_ * shoulder_w);   // R shoulder
    place(pts, 11, hx + px_ * hip_w, hy + py_ * hip_w);            // L hip
    place(pts, 12, hx - px_ * hip_w, hy - py_ * hip_w);            // R hip
    const double head = 0.08 * scale;
    place(pts, 0, nx + head * std::cos(torso_ang), ny + head * std::sin(torso_ang));
    place(pts, 1, pts[0][0] + px_ * 0.02 * scale, pts[0][1] + py_ * 0.02 * scale);
    place(pts, 2, pts[0][0] - px_ * 0.02 * scale, pts[0][1] - py_ * 0.02 * scale);
    place(pts, 3, pts[0][0] + px_ * 0.04 * scale, pts[0][1] + py_ * 0.04 * scale);
    place(pts, 4, pts[0][0] - px_ * 0.04 * scale, pts[0][1] - py_ * 0.04 * scale);
    const double arm = 0.10 * scale, leg = 0.13 * scale;
    for (int side = 0; side < 2; ++side) {
      const int sh = 5 + side, el = 7 + side, wr = 9 + side;
      const double a1 = torso_ang + pi + angle(-1.0, 1.0);
      place(pts, el, pts[sh][0] + arm * std::cos(a1),
            pts[sh][1] + arm * std::sin(a1));
      const double a2 = a1 + angle(-1.0, 1.0);
      place(pts, wr, pts[el][0] + arm * std::cos(a2),
            pts[el][1] + arm * std::sin(a2));
      const int hp = 11 + side, kn = 13 + side, an = 15 + side;
      const double b1 = pi / 2 + angle(-0.7, 0.7);
      place(pts, kn, pts[hp][0] + leg * std::cos(b1),
            pts[hp][1] + leg * std::sin(b1));
      const double b2 = b1 + angle(-0.5, 0.5);
      place(pts, an, pts[kn][0] + leg * std::cos(b2),
            pts[kn][1] + leg * std::sin(b2));
    }
    edges = coco_skeleton();
  } else {
    double x = 0.25 + u01(rng) * 0.5, y = 0.2 + u01(rng) * 0.3;
    double dir = pi / 2 + angle(-0.5, 0.5);
    const double seg = 0.5 / std::max(1, k - 1);
    for (int j = 0; j < k; ++j) {
      synth_detail::place(pts, j, x, y);
      dir += angle(-0.6, 0.6);
      x += seg * std::cos(dir);
      y += seg * std::sin(dir);
      if (j + 1 < k) edges.push_back({j, j + 1});
    }
  }

  const double lw = (1.0 + u01(rng) * 1.5) * width / 64.0;
  for (const auto& [a, b] : edges)
    draw_line(out.image, pts[a][0] * width, pts[a][1] * height,
              pts[b][0] * width, pts[b][1] * height, lw, fg, fg, fg);
  for (int j = 0; j < k; ++j)
    draw_disc(out.image, pts[j][0] * width, pts[j][1] * height, lw, fg, fg, fg);

  double minx = 1, miny = 1, maxx = 0, maxy = 0;
  for (int j = 0; j < k; ++j) {
    Joint joint;
    joint.cls = j;
    joint.x = pts[j][0];
    joint.y = pts[j][1];
    joint.visibility = 2;
    out.instance.joints.push_back(joint);
    minx = std::min(minx, pts[j][0]);
    maxx = std::max(maxx, pts[j][0]);
    miny = std::min(miny, pts[j][1]);
    maxy = std::max(maxy, pts[j][1]);
  }
  out.instance.bbox[0] = minx * width;
  out.instance.bbox[1] = miny * height;
  out.instance.bbox[2] = (maxx - minx) * width;
  out.instance.bbox[3] = (maxy - miny) * height;
  out.instance.area = out.instance.bbox[2] * out.instance.bbox[3];
  return out;
}

// Write synthetic samples as PPM images plus a COCO-format annotation
// file; byte-deterministic for a fixed sample list.
inline void write_coco_dataset(const std::string& dir,
                               const std::vector<SynthSample>& samples,
                               int k) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::ordered_json doc;
  doc["images"] = nlohmann::ordered_json::array();
  doc["annotations"] = nlohmann::ordered_json::array();
  nlohmann::ordered_json cat;
  cat["id"] = 1;
  cat["name"] = "person";
  cat["supercategory"] = "person";
  nlohmann::ordered_json names = nlohmann::ordered_json::array();
  if (k == 17)
    for (const auto& n : coco_joint_names()) names.push_back(n);
  else
    for (int j = 0; j < k; ++j) names.push_back("joint" + std::to_string(j));
  cat["keypoints"] = names;
  doc["categories"] = nlohmann::ordered_json::array({cat});

  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    char name[32];
    std::snprintf(name, sizeof(name), "%06zu.ppm", i);
    write_ppm((fs::path(dir) / name).string(), s.image);
    nlohmann::ordered_json im;
    im["id"] = static_cast<int>(i) + 1;
    im["file_name"] = name;
    im["width"] = s.image.width;
    im["height"] = s.image.height;
    doc["images"].push_back(im);
    nlohmann::ordered_json ann;
    ann["id"] = static_cast<int>(i) + 1;
    ann["image_id"] = static_cast<int>(i) + 1;
    ann["category_id"] = 1;
    std::vector<double> kps(static_cast<std::size_t>(3 * k), 0.0);
    for (const auto& j : s.instance.joints) {
      kps[static_cast<std::size_t>(3 * j.cls)] = j.x * s.image.width;
      kps[static_cast<std::size_t>(3 * j.cls) + 1] = j.y * s.image.height;
      kps[static_cast<std::size_t>(3 * j.cls) + 2] = j.visibility;
    }
    ann["keypoints"] = kps;
    ann["num_keypoints"] = static_cast<int>(s.instance.joints.size());
    ann["bbox"] = {s.instance.bbox[0], s.instance.bbox[1], s.instance.bbox[2],
                   s.instance.bbox[3]};
    ann["area"] = s.instance.area;
    ann["iscrowd"] = 0;
    doc["annotations"].push_back(ann);
  }
  std::ofstream out(fs::path(dir) / "annotations.json");
  if (!out) throw DataError("cannot write annotations in " + dir);
  out << doc.dump(2) << "\n";
}

}  // namespace pef
