#pragma once

// Synthetic video feature grids with known object and event structure.
//
// A fixed table of unit-norm embeddings plays the frozen image encoder: row 0
// is background, rows 1..V are object types. Each object is a rectangle that
// dwells at a sequence of keyframed locations (it jumps between dwells), so
// every pooled region sees a few clean temporal segments. A patch feature is
// the embedding of whatever occupies it plus isotropic Gaussian noise.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "sfslots/connector.hpp"
#include "sfslots/errors.hpp"
#include "sfslots/rng.hpp"

namespace sfsl {

inline constexpr std::uint64_t kDefaultEncoderSeed = 0x5F5C07EDULL;

struct Keyframe {
  std::size_t start = 0;  // first frame of this dwell
  std::size_t row = 0;    // top-left corner
  std::size_t col = 0;
};

struct ObjectTrack {
  std::size_t type = 1;  // embedding row, 1..vocab
  std::size_t height = 1;
  std::size_t width = 1;
  std::vector<Keyframe> keys;  // sorted by start, first start is 0
};

struct SceneSpec {
  std::uint64_t seed = 0;  // noise seed
  std::size_t frames = 32;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t feature_dim = 32;
  std::size_t vocab = 8;
  double noise = 0.05;
  std::uint64_t encoder_seed = kDefaultEncoderSeed;
  std::vector<ObjectTrack> objects;  // later objects occlude earlier ones

  std::size_t num_objects() const { return objects.size(); }

  void validate() const {
    if (frames == 0 || height == 0 || width == 0 || feature_dim == 0)
      throw ConfigError("scene dims must be positive");
    if (!(noise >= 0.0) || !std::isfinite(noise)) throw ConfigError("scene noise must be >= 0");
    for (std::size_t j = 0; j < objects.size(); ++j) {
      const auto& o = objects[j];
      if (o.type == 0 || o.type > vocab) throw ConfigError("object type out of vocabulary");
      for (std::size_t i = 0; i < j; ++i)
        if (objects[i].type == o.type) throw ConfigError("object types within a scene must be distinct");
      if (o.keys.empty() || o.keys.front().start != 0)
        throw ConfigError("object track must start with a keyframe at frame 0");
      for (std::size_t k = 0; k < o.keys.size(); ++k) {
        const auto& kf = o.keys[k];
        if (k > 0 && kf.start <= o.keys[k - 1].start) throw ConfigError("keyframes must be increasing");
        if (kf.start >= frames) throw ConfigError("keyframe beyond the last frame");
        if (o.height == 0 || o.width == 0 || kf.row + o.height > height || kf.col + o.width > width)
          throw ConfigError("object extent leaves the grid");
      }
    }
  }
};

// Ranges that scene specs are drawn from.
struct SceneRanges {
  std::size_t frames = 32;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t feature_dim = 32;
  std::size_t vocab = 8;
  double noise = 0.05;
  std::size_t min_objects = 2;
  std::size_t max_objects = 4;
  std::size_t min_extent = 3;
  std::size_t max_extent = 6;
  std::size_t max_dwells = 3;  // 1 gives static scenes
  std::uint64_t encoder_seed = kDefaultEncoderSeed;

  void validate() const {
    if (min_objects < 1 || min_objects > max_objects) throw ConfigError("bad object-count range");
    if (max_objects > vocab) throw ConfigError("more objects than vocabulary entries");
    if (min_extent < 1 || min_extent > max_extent || max_extent > std::min(height, width))
      throw ConfigError("bad extent range");
    if (max_dwells < 1 || max_dwells > frames) throw ConfigError("bad dwell count");
    if (!(noise >= 0.0)) throw ConfigError("noise must be >= 0");
  }
};

struct SceneTruth {
  std::size_t frames = 0, height = 0, width = 0, pool_stride = 1;
  std::vector<int> object_labels;   // [T x H x W], 0 = background, j+1 = object j
  std::vector<int> segment_labels;  // [M_d x T], per pooled position over time
  std::vector<int> segment_runs;    // [M_d], contiguous segments per position

  int object_label(std::size_t t, std::size_t h, std::size_t w) const {
    return object_labels[(t * height + h) * width + w];
  }
  std::size_t pooled_positions() const {
    return (height / pool_stride) * (width / pool_stride);
  }
  std::vector<int> frame_labels(std::size_t t) const {
    auto first = object_labels.begin() + static_cast<std::ptrdiff_t>(t * height * width);
    return {first, first + static_cast<std::ptrdiff_t>(height * width)};
  }
  std::vector<int> position_segments(std::size_t k) const {
    auto first = segment_labels.begin() + static_cast<std::ptrdiff_t>(k * frames);
    return {first, first + static_cast<std::ptrdiff_t>(frames)};
  }
};

struct Scene {
  SceneSpec spec;
  VideoFeatures<float> video;
  SceneTruth truth;
};

// Row 0 background, rows 1..vocab object types; each row unit norm.
inline std::vector<std::vector<float>> embedding_table(std::uint64_t encoder_seed, std::size_t vocab,
                                                       std::size_t dim) {
  Rng rng(derive_seed(encoder_seed, "embedding-table", dim));
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<std::vector<float>> table(vocab + 1, std::vector<float>(dim));
  for (auto& row : table) {
    std::vector<double> tmp(dim);
    double sq = 0;
    for (auto& v : tmp) {
      v = n(rng);
      sq += v * v;
    }
    const double inv = 1.0 / std::sqrt(sq);
    for (std::size_t i = 0; i < dim; ++i) row[i] = static_cast<float>(tmp[i] * inv);
  }
  return table;
}

inline std::vector<int> render_labels(const SceneSpec& spec) {
  std::vector<int> labels(spec.frames * spec.height * spec.width, 0);
  for (std::size_t t = 0; t < spec.frames; ++t) {
    int* frame = labels.data() + t * spec.height * spec.width;
    for (std::size_t j = 0; j < spec.objects.size(); ++j) {
      const auto& o = spec.objects[j];
      const Keyframe* kf = &o.keys.front();
      for (const auto& k : o.keys)
        if (k.start <= t) kf = &k;
      for (std::size_t r = kf->row; r < kf->row + o.height; ++r)
        for (std::size_t c = kf->col; c < kf->col + o.width; ++c)
          frame[r * spec.width + c] = static_cast<int>(j + 1);
    }
  }
  return labels;
}

// Segment label of (position, t) = index of the block's occupancy histogram
// in order of first appearance, so a recurring configuration keeps its label.
inline void label_segments(SceneTruth& truth, std::size_t num_labels) {
  const std::size_t s = truth.pool_stride;
  const std::size_t ph = truth.height / s, pw = truth.width / s;
  truth.segment_labels.assign(ph * pw * truth.frames, 0);
  truth.segment_runs.assign(ph * pw, 0);
  for (std::size_t py = 0; py < ph; ++py)
    for (std::size_t px = 0; px < pw; ++px) {
      const std::size_t k = py * pw + px;
      std::vector<std::vector<int>> seen;
      int prev = -1;
      for (std::size_t t = 0; t < truth.frames; ++t) {
        std::vector<int> hist(num_labels, 0);
        for (std::size_t dy = 0; dy < s; ++dy)
          for (std::size_t dx = 0; dx < s; ++dx)
            ++hist[static_cast<std::size_t>(truth.object_label(t, py * s + dy, px * s + dx))];
        auto it = std::find(seen.begin(), seen.end(), hist);
        int label = static_cast<int>(it - seen.begin());
        if (it == seen.end()) seen.push_back(hist);
        truth.segment_labels[k * truth.frames + t] = label;
        if (label != prev) ++truth.segment_runs[k];
        prev = label;
      }
    }
}

inline Scene gen_scene(const SceneSpec& spec, std::size_t pool_stride = 4) {
  spec.validate();
  if (pool_stride == 0 || spec.height % pool_stride || spec.width % pool_stride)
    throw ConfigError("pool stride must divide the scene grid");
  Scene scene;
  scene.spec = spec;
  auto& truth = scene.truth;
  truth.frames = spec.frames;
  truth.height = spec.height;
  truth.width = spec.width;
  truth.pool_stride = pool_stride;
  truth.object_labels = render_labels(spec);
  label_segments(truth, spec.objects.size() + 1);

  const auto table = embedding_table(spec.encoder_seed, spec.vocab, spec.feature_dim);
  const std::size_t d = spec.feature_dim, hw = spec.height * spec.width;
  TensorF grid(Shape{spec.frames, spec.height, spec.width, d});
  for (std::size_t t = 0; t < spec.frames; ++t) {
    Rng rng(derive_seed(spec.seed, "noise", t));
    std::normal_distribution<float> noise(0.0f, static_cast<float>(spec.noise));
    for (std::size_t p = 0; p < hw; ++p) {
      const int label = truth.object_labels[t * hw + p];
      const auto& emb = table[label == 0 ? 0 : spec.objects[static_cast<std::size_t>(label - 1)].type];
      float* dst = grid.data().data() + (t * hw + p) * d;
      for (std::size_t c = 0; c < d; ++c) dst[c] = emb[c] + (spec.noise > 0 ? noise(rng) : 0.0f);
    }
  }
  scene.video.grid = std::move(grid);
  return scene;
}

// Spec of scene `index` in the stream rooted at `seed`; depends on nothing else.
inline SceneSpec sample_scene_spec(std::uint64_t seed, std::uint64_t index, const SceneRanges& r) {
  r.validate();
  Rng rng(derive_seed(seed, "scene", index));
  auto uniform = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  SceneSpec spec;
  spec.seed = derive_seed(seed, "scene-noise", index);
  spec.frames = r.frames;
  spec.height = r.height;
  spec.width = r.width;
  spec.feature_dim = r.feature_dim;
  spec.vocab = r.vocab;
  spec.noise = r.noise;
  spec.encoder_seed = r.encoder_seed;

  const std::size_t k = uniform(r.min_objects, r.max_objects);
  std::vector<std::size_t> types(r.vocab);
  for (std::size_t i = 0; i < r.vocab; ++i) types[i] = i + 1;
  std::shuffle(types.begin(), types.end(), rng);
  types.resize(k);
  std::sort(types.begin(), types.end());

  for (std::size_t j = 0; j < k; ++j) {
    ObjectTrack o;
    o.type = types[j];
    o.height = uniform(r.min_extent, r.max_extent);
    o.width = uniform(r.min_extent, r.max_extent);
    const std::size_t dwells = uniform(1, std::min(r.max_dwells, r.frames));
    std::vector<std::size_t> cuts(r.frames - 1);
    for (std::size_t i = 0; i < cuts.size(); ++i) cuts[i] = i + 1;
    std::shuffle(cuts.begin(), cuts.end(), rng);
    cuts.resize(dwells - 1);
    cuts.push_back(0);
    std::sort(cuts.begin(), cuts.end());
    for (auto start : cuts) {
      o.keys.push_back({start, uniform(0, r.height - o.height), uniform(0, r.width - o.width)});
    }
    spec.objects.push_back(std::move(o));
  }
  return spec;
}

// Deterministic, restartable scene stream: scene i depends only on (seed, i).
class Dataset {
 public:
  Dataset(std::uint64_t seed, std::size_t n_scenes, SceneRanges ranges, std::size_t pool_stride = 4)
      : seed_(seed), n_(n_scenes), ranges_(ranges), pool_stride_(pool_stride) {
    if (n_scenes == 0) throw ConfigError("dataset needs at least one scene");
    ranges_.validate();
  }

  std::size_t size() const { return n_; }
  std::uint64_t seed() const { return seed_; }
  const SceneRanges& ranges() const { return ranges_; }

  SceneSpec spec(std::size_t i) const { return sample_scene_spec(seed_, i, ranges_); }
  Scene at(std::size_t i) const {
    if (i >= n_) throw ConfigError("scene index out of range");
    return gen_scene(spec(i), pool_stride_);
  }

 private:
  std::uint64_t seed_;
  std::size_t n_;
  SceneRanges ranges_;
  std::size_t pool_stride_;
};

// ---------------------------------------------------------------------------
// probe tasks

enum class ProbeTask { kObjectCount = 0, kEventCount = 1, kOccupancy = 2 };

inline constexpr std::size_t kNumProbeTasks = 3;
inline constexpr std::size_t kEventCountClasses = 8;

inline std::string probe_task_name(ProbeTask t) {
  switch (t) {
    case ProbeTask::kObjectCount: return "object_count";
    case ProbeTask::kEventCount: return "event_count";
    case ProbeTask::kOccupancy: return "occupancy";
  }
  return "?";
}

// Where the region- and cell-specific tasks look. Defaults to pooled position
// (1, 1) and the centre cell of the middle frame.
struct ProbeQuery {
  std::size_t region = 5;
  std::size_t t = 16;
  std::size_t h = 8;
  std::size_t w = 8;

  static ProbeQuery for_grid(std::size_t frames, std::size_t height, std::size_t width,
                             std::size_t pool_stride) {
    ProbeQuery q;
    const std::size_t pw = width / pool_stride, ph = height / pool_stride;
    q.region = std::min<std::size_t>(1, ph - 1) * pw + std::min<std::size_t>(1, pw - 1);
    q.t = frames / 2;
    q.h = height / 2;
    q.w = width / 2;
    return q;
  }
};

inline std::size_t probe_num_classes(ProbeTask task, std::size_t max_objects) {
  switch (task) {
    case ProbeTask::kObjectCount: return max_objects + 1;
    case ProbeTask::kEventCount: return kEventCountClasses;
    case ProbeTask::kOccupancy: return max_objects + 1;
  }
  return 0;
}

inline int gen_probe_task(const Scene& scene, ProbeTask task, const ProbeQuery& q) {
  const auto& truth = scene.truth;
  switch (task) {
    case ProbeTask::kObjectCount:
      return static_cast<int>(scene.spec.num_objects());
    case ProbeTask::kEventCount: {
      if (q.region >= truth.segment_runs.size()) throw ConfigError("probe region out of range");
      return std::min(truth.segment_runs[q.region], static_cast<int>(kEventCountClasses) - 1);
    }
    case ProbeTask::kOccupancy:
      if (q.t >= truth.frames || q.h >= truth.height || q.w >= truth.width)
        throw ConfigError("probe cell out of range");
      return truth.object_label(q.t, q.h, q.w);
  }
  return 0;
}

}  // namespace sfsl
