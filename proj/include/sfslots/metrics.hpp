#pragma once

// Decoupling metrics over attention masks, mask rendering, and the plain-text
// report format the CLI reads and writes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "sfslots/errors.hpp"
#include "sfslots/slot_attention.hpp"

namespace sfsl {

// Row-wise argmax over slots; ties go to the lowest slot index.
inline std::vector<int> hard_assign(const TensorF& mask) {
  if (mask.rank() != 2) throw ShapeError("hard_assign: mask must be [M x N]");
  const std::size_t m = mask.dim(0), n = mask.dim(1);
  std::vector<int> labels(m);
  for (std::size_t r = 0; r < m; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < n; ++c)
      if (mask.at(r, c) > mask.at(r, best)) best = c;
    labels[r] = static_cast<int>(best);
  }
  return labels;
}

inline std::vector<int> hard_assign(const AttentionMask& mask) { return hard_assign(mask.weights); }

// Adjusted Rand index from the contingency table. Everything up to the final
// division is exact integer arithmetic:
//   ARI = (2*I*P - 2*A*B) / ((A + B)*P - 2*A*B)
// with I = sum C(n_ij, 2), A/B the row/column sums of C(., 2), P = C(n, 2).
// Two trivial partitions (nothing to distinguish) score 1.
inline double ari(const std::vector<int>& pred, const std::vector<int>& truth) {
  if (pred.size() != truth.size()) throw ShapeError("ari: label vectors differ in length");
  if (pred.size() < 2) throw ShapeError("ari: need at least two labels");
  auto c2 = [](std::int64_t x) { return x * (x - 1) / 2; };
  std::int64_t index = 0, a = 0, b = 0;
  const auto [pmin, pmax] = std::minmax_element(pred.begin(), pred.end());
  const auto [tmin, tmax] = std::minmax_element(truth.begin(), truth.end());
  const std::int64_t pr = std::int64_t(*pmax) - *pmin + 1, tr = std::int64_t(*tmax) - *tmin + 1;
  if (pr * tr <= 4096) {
    std::vector<std::int64_t> table(static_cast<std::size_t>(pr * tr), 0), rows(pr, 0), cols(tr, 0);
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const std::int64_t p = pred[i] - *pmin, t = truth[i] - *tmin;
      ++table[static_cast<std::size_t>(p * tr + t)];
      ++rows[static_cast<std::size_t>(p)];
      ++cols[static_cast<std::size_t>(t)];
    }
    for (auto v : table) index += c2(v);
    for (auto v : rows) a += c2(v);
    for (auto v : cols) b += c2(v);
  } else {
    std::map<std::pair<int, int>, std::int64_t> table;
    std::map<int, std::int64_t> rows, cols;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      ++table[{pred[i], truth[i]}];
      ++rows[pred[i]];
      ++cols[truth[i]];
    }
    for (const auto& [_, v] : table) index += c2(v);
    for (const auto& [_, v] : rows) a += c2(v);
    for (const auto& [_, v] : cols) b += c2(v);
  }
  const std::int64_t pairs = c2(static_cast<std::int64_t>(pred.size()));
  const std::int64_t num = 2 * index * pairs - 2 * a * b;
  const std::int64_t den = (a + b) * pairs - 2 * a * b;
  if (den == 0) return 1.0;
  return static_cast<double>(num) / static_cast<double>(den);
}

// Mean pairwise cosine similarity between mask columns. Zero columns count as
// orthogonal to everything.
inline double slot_overlap(const TensorF& mask) {
  if (mask.rank() != 2) throw ShapeError("slot_overlap: mask must be [M x N]");
  const std::size_t m = mask.dim(0), n = mask.dim(1);
  if (n < 2) throw ShapeError("slot_overlap: need at least two slots");
  std::vector<double> norms(n, 0.0);
  for (std::size_t c = 0; c < n; ++c) {
    for (std::size_t r = 0; r < m; ++r) norms[c] += double(mask.at(r, c)) * double(mask.at(r, c));
    norms[c] = std::sqrt(norms[c]);
  }
  double total = 0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j, ++pairs) {
      if (norms[i] == 0 || norms[j] == 0) continue;
      double dot = 0;
      for (std::size_t r = 0; r < m; ++r) dot += double(mask.at(r, i)) * double(mask.at(r, j));
      total += dot / (norms[i] * norms[j]);
    }
  return total / double(pairs);
}

inline double slot_overlap(const AttentionMask& mask) { return slot_overlap(mask.weights); }

// Mean over rows of -sum p ln p.
inline double mask_entropy(const TensorF& mask) {
  if (mask.rank() != 2) throw ShapeError("mask_entropy: mask must be [M x N]");
  const std::size_t m = mask.dim(0), n = mask.dim(1);
  double total = 0;
  for (std::size_t r = 0; r < m; ++r) {
    double h = 0;
    for (std::size_t c = 0; c < n; ++c) {
      const double p = mask.at(r, c);
      if (p > 0) h -= p * std::log(p);
    }
    total += h;
  }
  return total / double(m);
}

inline double mask_entropy(const AttentionMask& mask) { return mask_entropy(mask.weights); }

// Rows rescaled to sum to 1 (for masks normalized over the other axis).
inline TensorF row_normalized(const TensorF& mask) {
  TensorF out = mask;
  const std::size_t m = mask.dim(0), n = mask.dim(1);
  for (std::size_t r = 0; r < m; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < n; ++c) s += out.at(r, c);
    if (s > 0)
      for (std::size_t c = 0; c < n; ++c) out.at(r, c) = static_cast<float>(out.at(r, c) / s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// PGM rendering

inline std::uint8_t quantize_weight(float w) {
  const float scaled = std::floor(w * 255.0f);
  return static_cast<std::uint8_t>(std::clamp(scaled, 0.0f, 255.0f));
}

struct PgmImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};

inline void write_pgm(const std::filesystem::path& path, const PgmImage& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw IoError("short write to " + path.string());
}

inline PgmImage read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::string magic;
  PgmImage img;
  int maxval = 0;
  in >> magic >> img.width >> img.height >> maxval;
  if (magic != "P5" || maxval != 255 || img.width == 0 || img.height == 0)
    throw IoError(path.string() + " is not an 8-bit P5 image");
  in.get();  // single whitespace after the header
  img.pixels.resize(img.width * img.height);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size()))
    throw IoError(path.string() + " is truncated");
  return img;
}

struct RenderedMask {
  std::string branch;
  std::size_t source = 0;
  std::size_t slot = 0;
  std::string filename;
};

inline std::string mask_filename(const std::string& branch, std::size_t source, std::size_t slot) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%s_%03zu_slot%02zu.pgm", branch.c_str(), source, slot);
  return buf;
}

// One image per (group, slot). `masks[g]` is the mask of frame / position g.
// Appends to <out_dir>/index.txt lines "branch source slot filename".
inline std::vector<RenderedMask> render_masks(const std::vector<AttentionMask>& masks,
                                              const std::string& branch,
                                              const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (!std::filesystem::is_directory(out_dir)) throw IoError("cannot create " + out_dir.string());
  std::vector<RenderedMask> written;
  for (std::size_t g = 0; g < masks.size(); ++g) {
    const auto& m = masks[g];
    if (m.layout.cells() != m.inputs())
      throw ShapeError("render_masks: layout does not match mask rows");
    for (std::size_t s = 0; s < m.slots(); ++s) {
      PgmImage img{m.layout.width, m.layout.height, {}};
      img.pixels.resize(m.inputs());
      for (std::size_t r = 0; r < m.inputs(); ++r) img.pixels[r] = quantize_weight(m.weights.at(r, s));
      RenderedMask rec{branch, g, s, mask_filename(branch, g, s)};
      write_pgm(out_dir / rec.filename, img);
      written.push_back(rec);
    }
  }
  std::ofstream index(out_dir / "index.txt", std::ios::app);
  if (!index) throw IoError("cannot write index in " + out_dir.string());
  for (const auto& r : written) index << r.branch << ' ' << r.source << ' ' << r.slot << ' ' << r.filename << '\n';
  return written;
}

inline std::vector<RenderedMask> read_mask_index(const std::filesystem::path& out_dir) {
  std::ifstream in(out_dir / "index.txt");
  if (!in) throw IoError("no index.txt in " + out_dir.string());
  std::vector<RenderedMask> out;
  RenderedMask r;
  while (in >> r.branch >> r.source >> r.slot >> r.filename) out.push_back(r);
  return out;
}

// ---------------------------------------------------------------------------
// reports

struct SceneMetrics {
  double spatial_ari = std::numeric_limits<double>::quiet_NaN();
  double temporal_ari = std::numeric_limits<double>::quiet_NaN();
  double overlap = std::numeric_limits<double>::quiet_NaN();
  double entropy = std::numeric_limits<double>::quiet_NaN();
};

struct DecouplingReport {
  std::string connector;
  std::string branch;
  std::size_t tokens = 0;
  std::size_t scenes = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
  double spatial_ari = std::numeric_limits<double>::quiet_NaN();
  double temporal_ari = std::numeric_limits<double>::quiet_NaN();
  double overlap = std::numeric_limits<double>::quiet_NaN();
  double entropy = std::numeric_limits<double>::quiet_NaN();
  double probe_accuracy = std::numeric_limits<double>::quiet_NaN();
  double majority_baseline = std::numeric_limits<double>::quiet_NaN();
  std::map<std::string, double> task_accuracy;
  std::vector<SceneMetrics> per_scene;
};

namespace detail {
inline std::string fmt_double(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os << std::setprecision(9) << v;
  return os.str();
}
inline double parse_double(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  std::size_t used = 0;
  double v = std::stod(s, &used);
  if (used != s.size()) throw IoError("bad number in report: " + s);
  return v;
}
}  // namespace detail

inline std::string format_report(const DecouplingReport& r) {
  using detail::fmt_double;
  std::ostringstream os;
  os << "# sfslots report v1\n";
  os << "connector = " << r.connector << '\n';
  os << "branch = " << r.branch << '\n';
  os << "tokens = " << r.tokens << '\n';
  os << "scenes = " << r.scenes << '\n';
  os << "seed = " << r.seed << '\n';
  os << "config_hash = " << r.config_hash << '\n';
  os << "spatial_ari = " << fmt_double(r.spatial_ari) << '\n';
  os << "temporal_ari = " << fmt_double(r.temporal_ari) << '\n';
  os << "overlap = " << fmt_double(r.overlap) << '\n';
  os << "entropy = " << fmt_double(r.entropy) << '\n';
  os << "probe_accuracy = " << fmt_double(r.probe_accuracy) << '\n';
  os << "majority_baseline = " << fmt_double(r.majority_baseline) << '\n';
  for (const auto& [task, acc] : r.task_accuracy) os << "task." << task << ".accuracy = " << fmt_double(acc) << '\n';
  for (std::size_t i = 0; i < r.per_scene.size(); ++i) {
    const auto& s = r.per_scene[i];
    os << "scene." << i << ".spatial_ari = " << fmt_double(s.spatial_ari) << '\n';
    os << "scene." << i << ".temporal_ari = " << fmt_double(s.temporal_ari) << '\n';
    os << "scene." << i << ".overlap = " << fmt_double(s.overlap) << '\n';
    os << "scene." << i << ".entropy = " << fmt_double(s.entropy) << '\n';
  }
  return os.str();
}

inline DecouplingReport parse_report(const std::string& text) {
  using detail::parse_double;
  DecouplingReport r;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) throw IoError("malformed report line: " + line);
    const std::string key = line.substr(0, eq), val = line.substr(eq + 3);
    if (key == "connector") r.connector = val;
    else if (key == "branch") r.branch = val;
    else if (key == "tokens") r.tokens = std::stoull(val);
    else if (key == "scenes") r.scenes = std::stoull(val);
    else if (key == "seed") r.seed = std::stoull(val);
    else if (key == "config_hash") r.config_hash = val;
    else if (key == "spatial_ari") r.spatial_ari = parse_double(val);
    else if (key == "temporal_ari") r.temporal_ari = parse_double(val);
    else if (key == "overlap") r.overlap = parse_double(val);
    else if (key == "entropy") r.entropy = parse_double(val);
    else if (key == "probe_accuracy") r.probe_accuracy = parse_double(val);
    else if (key == "majority_baseline") r.majority_baseline = parse_double(val);
    else if (key.rfind("task.", 0) == 0 && key.size() > 14 &&
             key.compare(key.size() - 9, 9, ".accuracy") == 0)
      r.task_accuracy[key.substr(5, key.size() - 14)] = parse_double(val);
    else if (key.rfind("scene.", 0) == 0) {
      const auto dot = key.find('.', 6);
      if (dot == std::string::npos) throw IoError("malformed scene key: " + key);
      const std::size_t idx = std::stoull(key.substr(6, dot - 6));
      if (r.per_scene.size() <= idx) r.per_scene.resize(idx + 1);
      const std::string field = key.substr(dot + 1);
      auto& s = r.per_scene[idx];
      if (field == "spatial_ari") s.spatial_ari = parse_double(val);
      else if (field == "temporal_ari") s.temporal_ari = parse_double(val);
      else if (field == "overlap") s.overlap = parse_double(val);
      else if (field == "entropy") s.entropy = parse_double(val);
      else throw IoError("unknown scene field: " + field);
    } else {
      throw IoError("unknown report key: " + key);
    }
  }
  return r;
}

// Side-by-side table, one row per report.
inline std::string compare_reports(const std::vector<DecouplingReport>& reports) {
  using detail::fmt_double;
  std::ostringstream os;
  auto cell = [](double v) {
    if (std::isnan(v)) return std::string("-");
    std::ostringstream s;
    s << std::fixed << std::setprecision(4) << v;
    return s.str();
  };
  os << std::left << std::setw(20) << "connector" << std::setw(8) << "branch" << std::right
     << std::setw(8) << "tokens" << std::setw(13) << "spatial_ARI" << std::setw(14) << "temporal_ARI"
     << std::setw(10) << "overlap" << std::setw(10) << "entropy" << std::setw(10) << "accuracy"
     << '\n';
  for (const auto& r : reports) {
    os << std::left << std::setw(20) << r.connector << std::setw(8) << r.branch << std::right
       << std::setw(8) << r.tokens << std::setw(13) << cell(r.spatial_ari) << std::setw(14)
       << cell(r.temporal_ari) << std::setw(10) << cell(r.overlap) << std::setw(10)
       << cell(r.entropy) << std::setw(10) << cell(r.probe_accuracy) << '\n';
  }
  return os.str();
}

}  // namespace sfsl
