#include "ppg/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <sstream>

#include "ppg/errors.hpp"
#include "ppg/io.hpp"

namespace ppg {

std::string class_name(ObjectClass c) {
  switch (c) {
    case ObjectClass::blob:
      return "blob";
    case ObjectClass::ring:
      return "ring";
    case ObjectClass::branch:
      return "branch";
  }
  return "?";
}

ObjectClass parse_class(const std::string& name) {
  if (name == "blob") return ObjectClass::blob;
  if (name == "ring") return ObjectClass::ring;
  if (name == "branch") return ObjectClass::branch;
  throw ParseError("unknown object class '" + name + "' (expected blob, ring or branch)");
}

void EpisodeSpec::validate() const {
  if (height == 0 || width == 0 || height % 16 != 0 || width % 16 != 0)
    throw ConfigError("episode size " + std::to_string(height) + "x" + std::to_string(width) +
                      " must be a positive multiple of 16");
  if (classes.empty() || classes.size() > 3) throw ConfigError("an episode needs 1 to 3 object classes");
  for (std::size_t i = 0; i < classes.size(); ++i)
    for (std::size_t j = i + 1; j < classes.size(); ++j)
      if (classes[i] == classes[j]) throw ConfigError("object classes within an episode must be distinct");
  if (shots == 0) throw ConfigError("shots must be at least 1");
  if (noise < 0.0 || deformation < 0.0 || deformation > 1.0)
    throw ConfigError("noise must be >= 0 and deformation in [0, 1]");
}

namespace {

struct Segment {
  double x0, y0, x1, y1;
};

// One object instance in image coordinates (pixel centres at i + 0.5).
struct Instance {
  ObjectClass cls = ObjectClass::blob;
  double cx = 0, cy = 0;
  double rx = 0, ry = 0;
  double angle = 0;
  double thickness = 0;           // ring wall
  double stroke = 1;              // branch line width
  std::vector<Segment> segments;  // branch, relative to (cx, cy)
  double brightness = 1.0;

  double extent() const {
    if (cls != ObjectClass::branch) return std::max(rx, ry);
    double r = 0.0;
    for (const auto& s : segments) r = std::max({r, std::hypot(s.x0, s.y0), std::hypot(s.x1, s.y1)});
    return r + stroke;
  }
};

constexpr std::array<std::array<double, 3>, 3> kColor{{
    {0.92, 0.55, 0.45},  // blob
    {0.45, 0.85, 0.50},  // ring
    {0.12, 0.12, 0.18},  // branch
}};

void grow_branch(std::vector<Segment>& out, double x, double y, double dir, double len, int depth, Rng& rng) {
  const double x1 = x + len * std::cos(dir), y1 = y + len * std::sin(dir);
  out.push_back({x, y, x1, y1});
  if (depth == 0) return;
  const int children = 1 + static_cast<int>(rng.below(2));
  const double side = rng.below(2) == 0 ? -1.0 : 1.0;
  for (int c = 0; c < children; ++c) {
    const double turn = (c == 0 ? side : -side) * rng.uniform(0.35, 0.8);
    grow_branch(out, x1, y1, dir + turn, len * rng.uniform(0.6, 0.8), depth - 1, rng);
  }
}

Instance sample_instance(ObjectClass cls, double scale, Rng& rng) {
  Instance in;
  in.cls = cls;
  in.angle = rng.uniform(0.0, std::numbers::pi);
  in.brightness = rng.uniform(0.93, 1.0);
  switch (cls) {
    case ObjectClass::blob:
      in.rx = scale * rng.uniform(6.0, 10.0);
      in.ry = scale * rng.uniform(6.0, 10.0);
      break;
    case ObjectClass::ring:
      in.rx = scale * rng.uniform(8.0, 11.0);
      in.ry = scale * rng.uniform(8.0, 11.0);
      in.thickness = scale * rng.uniform(2.5, 3.5);
      break;
    case ObjectClass::branch: {
      in.stroke = rng.below(2) == 0 ? 1.0 : 2.0;
      const double dir = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double len = scale * rng.uniform(7.0, 10.0);
      // Root sits one trunk length behind the centre so the tree is roughly centred.
      grow_branch(in.segments, -0.6 * len * std::cos(dir), -0.6 * len * std::sin(dir), dir, len, 3, rng);
      break;
    }
  }
  return in;
}

void shrink(Instance& in, double f) {
  in.rx *= f;
  in.ry *= f;
  in.thickness = std::max(1.5, in.thickness * f);
  for (auto& seg : in.segments) seg = {f * seg.x0, f * seg.y0, f * seg.x1, f * seg.y1};
}

// Variation of a base instance; magnitude 0 returns it unchanged.
Instance deform(const Instance& base, double d, Rng& rng) {
  Instance in = base;
  if (d == 0.0) return in;
  const double s = 1.0 + d * rng.uniform(-0.2, 0.2);
  const double rot = d * rng.uniform(-0.6, 0.6);
  in.cx += d * rng.uniform(-6.0, 6.0);
  in.cy += d * rng.uniform(-6.0, 6.0);
  in.rx *= s;
  in.ry *= s;
  in.thickness *= std::max(0.8, s);
  in.angle += rot;
  const double c = std::cos(rot), sn = std::sin(rot);
  for (auto& seg : in.segments) {
    const double x0 = s * (c * seg.x0 - sn * seg.y0), y0 = s * (sn * seg.x0 + c * seg.y0);
    const double x1 = s * (c * seg.x1 - sn * seg.y1), y1 = s * (sn * seg.x1 + c * seg.y1);
    seg = {x0, y0, x1, y1};
  }
  in.brightness = std::clamp(in.brightness + d * rng.uniform(-0.04, 0.04), 0.85, 1.0);
  return in;
}

double segment_distance(const Segment& s, double px, double py) {
  const double dx = s.x1 - s.x0, dy = s.y1 - s.y0;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((px - s.x0) * dx + (py - s.y0) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(px - (s.x0 + t * dx), py - (s.y0 + t * dy));
}

bool covers(const Instance& in, double px, double py) {
  const double u0 = px - in.cx, v0 = py - in.cy;
  if (in.cls == ObjectClass::branch) {
    if (std::hypot(u0, v0) > in.extent() + 1.0) return false;
    for (const auto& s : in.segments)
      if (segment_distance(s, u0, v0) <= 0.5 * in.stroke + 0.2) return true;
    return false;
  }
  const double c = std::cos(in.angle), s = std::sin(in.angle);
  const double u = c * u0 + s * v0, v = -s * u0 + c * v0;
  const double outer = (u / in.rx) * (u / in.rx) + (v / in.ry) * (v / in.ry);
  if (outer > 1.0) return false;
  if (in.cls == ObjectClass::blob) return true;
  const double ix = in.rx - in.thickness, iy = in.ry - in.thickness;
  return (u / ix) * (u / ix) + (v / iy) * (v / iy) > 1.0;
}

bool separated(const std::vector<Instance>& objs, double gap) {
  for (std::size_t i = 0; i < objs.size(); ++i)
    for (std::size_t j = i + 1; j < objs.size(); ++j)
      if (std::hypot(objs[i].cx - objs[j].cx, objs[i].cy - objs[j].cy) < objs[i].extent() + objs[j].extent() + gap)
        return false;
  return true;
}

bool inside(const Instance& in, double w, double h) {
  const double r = in.extent();
  return in.cx - r >= 0.0 && in.cy - r >= 0.0 && in.cx + r <= w && in.cy + r <= h;
}

struct Background {
  std::array<double, 3> level{};
  double gx = 0, gy = 0;
};

struct Scene {
  Background bg;
  std::vector<Instance> objects;
};

Scene perturb(const Scene& base, double d, double w, double h, Rng& rng) {
  Scene s = base;
  if (d == 0.0) return s;
  s.bg.gx += d * rng.uniform(-0.05, 0.05);
  s.bg.gy += d * rng.uniform(-0.05, 0.05);
  for (int attempt = 0; attempt < 50; ++attempt) {
    for (std::size_t i = 0; i < base.objects.size(); ++i) s.objects[i] = deform(base.objects[i], d, rng);
    bool ok = separated(s.objects, 1.0);
    for (const auto& o : s.objects) ok = ok && inside(o, w, h);
    if (ok) return s;
  }
  s.objects = base.objects;
  return s;
}

// Renders the scene; mask n is filled for object n unless skip[n].
void render(const Scene& scene, std::size_t h, std::size_t w, double noise, Rng& rng, const std::vector<bool>& skip,
            double* image, double* masks) {
  const std::size_t hw = h * w;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double fx = (x + 0.5) / static_cast<double>(w) - 0.5, fy = (y + 0.5) / static_cast<double>(h) - 0.5;
      std::array<double, 3> px{};
      for (int c = 0; c < 3; ++c) px[c] = scene.bg.level[c] + scene.bg.gx * fx + scene.bg.gy * fy;
      for (std::size_t n = 0; n < scene.objects.size(); ++n) {
        if (skip[n]) continue;
        const Instance& in = scene.objects[n];
        if (!covers(in, x + 0.5, y + 0.5)) continue;
        masks[n * hw + y * w + x] = 1.0;
        for (int c = 0; c < 3; ++c) px[c] = kColor[static_cast<int>(in.cls)][c] * in.brightness;
      }
      const double speckle = noise > 0.0 ? std::max(0.0, 1.0 + noise * rng.normal()) : 1.0;
      for (int c = 0; c < 3; ++c) image[c * hw + y * w + x] = std::clamp(px[c] * speckle, 0.0, 1.0);
    }
  }
}

}  // namespace

Episode generate_episode(const EpisodeSpec& spec) {
  spec.validate();
  const std::size_t h = spec.height, w = spec.width, n = spec.classes.size(), k = spec.shots, hw = h * w;
  const double scale = std::min(h, w) / 64.0;
  Rng root(spec.seed);
  Rng base = root.fork(1);

  Scene scene;
  const double b0 = base.uniform(0.3, 0.45);
  for (auto& l : scene.bg.level) l = b0 + base.uniform(-0.03, 0.03);
  scene.bg.gx = base.uniform(-0.15, 0.15);
  scene.bg.gy = base.uniform(-0.15, 0.15);
  for (ObjectClass cls : spec.classes) scene.objects.push_back(sample_instance(cls, scale, base));
  bool placed = false;
  // Crowded scenes (three classes, large trees) shrink every object after
  // each round of failed attempts.
  for (int round = 0; round < 6 && !placed; ++round) {
    if (round > 0)
      for (auto& o : scene.objects) shrink(o, 0.85);
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      for (auto& o : scene.objects) {
        const double r = o.extent();
        if (2.0 * r >= static_cast<double>(std::min(h, w))) break;
        o.cx = base.uniform(r, static_cast<double>(w) - r);
        o.cy = base.uniform(r, static_cast<double>(h) - r);
      }
      bool ok = separated(scene.objects, 3.0);
      for (const auto& o : scene.objects) ok = ok && inside(o, static_cast<double>(w), static_cast<double>(h));
      placed = ok;
    }
  }
  if (!placed)
    throw GenerationError("could not place " + std::to_string(n) + " non-overlapping objects in a " +
                          std::to_string(h) + "x" + std::to_string(w) + " image (seed " + std::to_string(spec.seed) +
                          ")");

  Episode ep;
  ep.classes = spec.classes;
  ep.target = Tensor::zeros({3, h, w});
  ep.gt = Tensor::zeros({n, h, w});
  ep.support.images = Tensor::zeros({k, 3, h, w});
  ep.support.masks = Tensor::zeros({n, k, h, w});

  std::vector<bool> skip(n, false);
  if (spec.empty_object) skip[0] = true;
  {
    Rng drng = root.fork(100), nrng = root.fork(200);
    const Scene s = perturb(scene, spec.deformation, static_cast<double>(w), static_cast<double>(h), drng);
    render(s, h, w, spec.noise, nrng, skip, ep.target.mutable_data().data(), ep.gt.mutable_data().data());
  }
  std::vector<double> shot_masks(n * hw);
  const std::vector<bool> none(n, false);
  for (std::size_t j = 0; j < k; ++j) {
    Rng drng = root.fork(101 + j), nrng = root.fork(201 + j);
    const Scene s = perturb(scene, spec.deformation, static_cast<double>(w), static_cast<double>(h), drng);
    std::fill(shot_masks.begin(), shot_masks.end(), 0.0);
    render(s, h, w, spec.noise, nrng, none, ep.support.images.mutable_data().data() + j * 3 * hw, shot_masks.data());
    for (std::size_t i = 0; i < n; ++i)
      std::copy(shot_masks.begin() + i * hw, shot_masks.begin() + (i + 1) * hw,
                ep.support.masks.mutable_data().begin() + (i * k + j) * hw);
  }
  return ep;
}

std::vector<Episode> generate_suite(const EpisodeSpec& spec, std::size_t count, bool shuffle_classes) {
  std::vector<Episode> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    EpisodeSpec s = spec;
    s.seed = mix_seed(spec.seed, i);
    if (shuffle_classes) {
      Rng r(s.seed ^ 0x5bd1e995ULL);
      r.shuffle(s.classes);
    }
    out.push_back(generate_episode(s));
  }
  return out;
}

SupportSet support_from_pool(const std::vector<Episode>& pool, const std::vector<ObjectClass>& classes,
                             std::size_t shots, Rng& rng, std::size_t exclude) {
  if (shots == 0) throw UsageError("support set needs at least one shot");
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < pool.size(); ++i)
    if (i != exclude) candidates.push_back(i);
  if (shots > candidates.size())
    throw UsageError("requested K=" + std::to_string(shots) + " support shots but the pool offers only " +
                     std::to_string(candidates.size()));
  rng.shuffle(candidates);
  candidates.resize(shots);

  const Episode& first = pool[candidates[0]];
  const std::size_t h = first.target.dim(1), w = first.target.dim(2), hw = h * w, n = classes.size();
  SupportSet s;
  s.images = Tensor::zeros({shots, 3, h, w});
  s.masks = Tensor::zeros({n, shots, h, w});
  for (std::size_t j = 0; j < shots; ++j) {
    const Episode& src = pool[candidates[j]];
    if (src.target.dim(1) != h || src.target.dim(2) != w) throw UsageError("support pool mixes image sizes");
    std::copy(src.target.data().begin(), src.target.data().end(), s.images.mutable_data().begin() + j * 3 * hw);
    for (std::size_t i = 0; i < n; ++i) {
      const auto it = std::find(src.classes.begin(), src.classes.end(), classes[i]);
      if (it == src.classes.end())
        throw UsageError("support pool episode lacks class '" + class_name(classes[i]) + "'");
      const std::size_t c = static_cast<std::size_t>(it - src.classes.begin());
      std::copy(src.gt.data().begin() + c * hw, src.gt.data().begin() + (c + 1) * hw,
                s.masks.mutable_data().begin() + (i * shots + j) * hw);
    }
  }
  return s;
}

SupportSet own_support(const Episode& ep, std::size_t shots) {
  const std::size_t k = ep.support.shots();
  if (shots == 0 || shots > k)
    throw UsageError("episode has " + std::to_string(k) + " support shots, requested " + std::to_string(shots));
  if (shots == k) return ep.support;
  const std::size_t n = ep.objects(), h = ep.support.height(), w = ep.support.width();
  SupportSet s;
  s.images = Tensor::zeros({shots, 3, h, w});
  std::copy_n(ep.support.images.data().begin(), shots * 3 * h * w, s.images.mutable_data().begin());
  s.masks = Tensor::zeros({n, shots, h, w});
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(ep.support.masks.data().begin() + i * k * h * w, shots * h * w,
                s.masks.mutable_data().begin() + i * shots * h * w);
  return s;
}

namespace {

Tensor slice_image(const Tensor& t, std::size_t index, const Shape& shape) {
  const std::size_t n = shape_numel(shape);
  return Tensor(shape, std::vector<double>(t.data().begin() + index * n, t.data().begin() + (index + 1) * n));
}

}  // namespace

void save_episode(const std::filesystem::path& dir, const Episode& ep) {
  const std::size_t n = ep.objects(), k = ep.support.shots(), h = ep.target.dim(1), w = ep.target.dim(2);
  std::vector<NamedTensor> tensors{{"target", ep.target}, {"gt", ep.gt}};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const std::string stem = "support_" + std::to_string(i) + "_" + std::to_string(j);
      tensors.push_back({stem + "_img", slice_image(ep.support.images, j, {3, h, w})});
      tensors.push_back({stem + "_mask", slice_image(ep.support.masks, i * k + j, {h, w})});
    }
  }
  std::string classes;
  for (std::size_t i = 0; i < n; ++i) classes += (i ? "," : "") + class_name(ep.classes[i]);
  save_tensor_dir(dir, tensors, {{"classes", classes}, {"shots", std::to_string(k)}}, "episode.manifest");
}

Episode load_episode(const std::filesystem::path& dir) {
  const std::string where = (dir / "episode.manifest").string();
  const TensorDir td = load_tensor_dir(dir, "episode.manifest");
  auto need = [&](const std::string& name) -> const Tensor& {
    const Tensor* t = td.find(name);
    if (!t) throw ParseError(where + ": missing entry '" + name + "'");
    return *t;
  };
  auto meta = [&](const std::string& key) {
    const auto it = td.meta.find(key);
    if (it == td.meta.end()) throw ParseError(where + ": missing metadata '@" + key + "'");
    return it->second;
  };
  Episode ep;
  std::stringstream ss(meta("classes"));
  for (std::string item; std::getline(ss, item, ',');) ep.classes.push_back(parse_class(item));
  std::size_t k = 0;
  try {
    k = std::stoul(meta("shots"));
  } catch (const std::exception&) {
    throw ParseError(where + ": bad shot count '" + meta("shots") + "'");
  }
  ep.target = need("target");
  ep.gt = need("gt");
  const std::size_t n = ep.classes.size();
  if (ep.target.rank() != 3 || ep.target.dim(0) != 3 || ep.gt.shape() != Shape{n, ep.target.dim(1), ep.target.dim(2)})
    throw ParseError(where + ": target/gt shapes disagree with " + std::to_string(n) + " classes");
  const std::size_t h = ep.target.dim(1), w = ep.target.dim(2), hw = h * w;
  ep.support.images = Tensor::zeros({k, 3, h, w});
  ep.support.masks = Tensor::zeros({n, k, h, w});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const std::string stem = "support_" + std::to_string(i) + "_" + std::to_string(j);
      const Tensor& img = need(stem + "_img");
      const Tensor& mask = need(stem + "_mask");
      if (img.shape() != Shape{3, h, w} || mask.shape() != Shape{h, w})
        throw ParseError(where + ": support shapes disagree with the target");
      if (i == 0) std::copy(img.data().begin(), img.data().end(), ep.support.images.mutable_data().begin() + j * 3 * hw);
      std::copy(mask.data().begin(), mask.data().end(), ep.support.masks.mutable_data().begin() + (i * k + j) * hw);
    }
  }
  return ep;
}

std::vector<Episode> load_suite(const std::filesystem::path& dir) {
  const std::filesystem::path index = dir / "index.txt";
  if (!std::filesystem::exists(index)) throw std::runtime_error("no episode index at " + index.string());
  std::stringstream ss(read_text_file(index));
  std::vector<Episode> out;
  for (std::string line; std::getline(ss, line);) {
    if (line.empty() || line[0] == '#') continue;
    out.push_back(load_episode(dir / line));
  }
  return out;
}

}  // namespace ppg
