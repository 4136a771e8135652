#pragma once

// Any-resolution encoding on single-channel grids: split into local patches,
// one random geometric transform per patch, encode each, then append the
// encoding of the bilinearly resized whole grid.

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "utamoe/errors.hpp"
#include "utamoe/rng.hpp"
#include "utamoe/tensor.hpp"

namespace utamoe {

struct Grid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;  // row-major

  Grid() = default;
  Grid(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), values(h * w, fill) {
    if (h == 0 || w == 0) throw DimensionError("grid extents must be >= 1");
  }
  Grid(std::size_t h, std::size_t w, std::vector<double> v) : height(h), width(w), values(std::move(v)) {
    if (h == 0 || w == 0) throw DimensionError("grid extents must be >= 1");
    if (values.size() != h * w)
      throw DimensionError("grid " + std::to_string(h) + "x" + std::to_string(w) + " given " +
                           std::to_string(values.size()) + " values");
  }

  double& at(std::size_t r, std::size_t c) { return values[r * width + c]; }
  double at(std::size_t r, std::size_t c) const { return values[r * width + c]; }
  bool operator==(const Grid&) const = default;
};

enum class TransformKind { identity, rotate90, rotate180, rotate270, hflip, vflip, shear };

struct GridTransform {
  TransformKind kind = TransformKind::identity;
  int shear = 1;  // row r shifts right by shear * r (shear kind only)

  std::string name() const {
    switch (kind) {
      case TransformKind::identity: return "identity";
      case TransformKind::rotate90: return "rotate90";
      case TransformKind::rotate180: return "rotate180";
      case TransformKind::rotate270: return "rotate270";
      case TransformKind::hflip: return "hflip";
      case TransformKind::vflip: return "vflip";
      case TransformKind::shear: return "shear" + std::to_string(shear);
    }
    return "?";
  }
};

struct TransformSet {
  std::vector<GridTransform> transforms;

  std::size_t size() const { return transforms.size(); }
  void validate() const {
    if (transforms.empty()) throw ContractError("transform set must contain at least one transform");
  }
  static TransformSet identity_only() { return {{{TransformKind::identity}}}; }
  static TransformSet rotations() {
    return {{{TransformKind::identity}, {TransformKind::rotate90}, {TransformKind::rotate180}, {TransformKind::rotate270}}};
  }
  static TransformSet all() {
    return {{{TransformKind::identity},
             {TransformKind::rotate90},
             {TransformKind::rotate180},
             {TransformKind::rotate270},
             {TransformKind::hflip},
             {TransformKind::vflip},
             {TransformKind::shear, 1}}};
  }
};

// Rotations are clockwise; a 90/270 rotation swaps height and width. Shear
// keeps the extent and fills vacated cells with 0 (cells pushed out are lost).
inline Grid apply_transform(const Grid& g, const GridTransform& t) {
  const std::size_t h = g.height, w = g.width;
  switch (t.kind) {
    case TransformKind::identity: return g;
    case TransformKind::rotate90: {
      Grid out(w, h);
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) out.at(c, h - 1 - r) = g.at(r, c);
      return out;
    }
    case TransformKind::rotate180: {
      Grid out(h, w);
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) out.at(h - 1 - r, w - 1 - c) = g.at(r, c);
      return out;
    }
    case TransformKind::rotate270: {
      Grid out(w, h);
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) out.at(w - 1 - c, r) = g.at(r, c);
      return out;
    }
    case TransformKind::hflip: {
      Grid out(h, w);
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) out.at(r, w - 1 - c) = g.at(r, c);
      return out;
    }
    case TransformKind::vflip: {
      Grid out(h, w);
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) out.at(h - 1 - r, c) = g.at(r, c);
      return out;
    }
    case TransformKind::shear: {
      Grid out(h, w);
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) {
          const long long dst = static_cast<long long>(c) + static_cast<long long>(t.shear) * static_cast<long long>(r);
          if (dst >= 0 && dst < static_cast<long long>(w)) out.at(r, static_cast<std::size_t>(dst)) = g.at(r, c);
        }
      return out;
    }
  }
  throw ContractError("unknown transform");
}

// Index of the transform used for patch `patch_index`; a pure function of
// (seed, patch index).
inline std::size_t choose_transform(const TransformSet& ts, std::uint64_t seed, std::uint64_t patch_index) {
  ts.validate();
  Rng rng = make_rng(seed, patch_index);
  return uniform_index(rng, ts.size());
}

inline Grid random_transform(const Grid& patch, const TransformSet& ts, std::uint64_t seed, std::uint64_t patch_index) {
  return apply_transform(patch, ts.transforms[choose_transform(ts, seed, patch_index)]);
}

// rows x cols non-overlapping patches in row-major order.
inline std::vector<Grid> split_grid(const Grid& g, std::size_t rows, std::size_t cols) {
  if (rows == 0 || cols == 0) throw ContractError("split_grid: rows and cols must be >= 1");
  if (g.height % rows != 0 || g.width % cols != 0)
    throw ContractError("split_grid: " + std::to_string(g.height) + "x" + std::to_string(g.width) +
                        " grid does not divide into " + std::to_string(rows) + "x" + std::to_string(cols) +
                        " patches; resize first");
  const std::size_t ph = g.height / rows, pw = g.width / cols;
  std::vector<Grid> out;
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      Grid p(ph, pw);
      for (std::size_t r = 0; r < ph; ++r)
        for (std::size_t c = 0; c < pw; ++c) p.at(r, c) = g.at(i * ph + r, j * pw + c);
      out.push_back(std::move(p));
    }
  return out;
}

inline Grid reassemble_grid(const std::vector<Grid>& patches, std::size_t rows, std::size_t cols) {
  if (patches.size() != rows * cols || patches.empty())
    throw ContractError("reassemble_grid: expected " + std::to_string(rows * cols) + " patches");
  const std::size_t ph = patches.front().height, pw = patches.front().width;
  Grid out(rows * ph, cols * pw);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      const Grid& p = patches[i * cols + j];
      if (p.height != ph || p.width != pw) throw DimensionError("reassemble_grid: patches differ in shape");
      for (std::size_t r = 0; r < ph; ++r)
        for (std::size_t c = 0; c < pw; ++c) out.at(i * ph + r, j * pw + c) = p.at(r, c);
    }
  return out;
}

// Bilinear resize with half-pixel centres and edge clamping. Same-size input
// is returned unchanged.
inline Grid resize_bilinear(const Grid& g, std::size_t h, std::size_t w) {
  if (h == g.height && w == g.width) return g;
  Grid out(h, w);
  const double sy = static_cast<double>(g.height) / static_cast<double>(h);
  const double sx = static_cast<double>(g.width) / static_cast<double>(w);
  const auto coord = [](double pos, std::size_t n, std::size_t& i0, std::size_t& i1, double& f) {
    pos = std::clamp(pos, 0.0, static_cast<double>(n - 1));
    i0 = static_cast<std::size_t>(std::floor(pos));
    i1 = std::min(i0 + 1, n - 1);
    f = pos - static_cast<double>(i0);
  };
  for (std::size_t r = 0; r < h; ++r) {
    std::size_t y0, y1;
    double fy;
    coord((static_cast<double>(r) + 0.5) * sy - 0.5, g.height, y0, y1, fy);
    for (std::size_t c = 0; c < w; ++c) {
      std::size_t x0, x1;
      double fx;
      coord((static_cast<double>(c) + 0.5) * sx - 0.5, g.width, x0, x1, fx);
      const double top = g.at(y0, x0) * (1.0 - fx) + g.at(y0, x1) * fx;
      const double bottom = g.at(y1, x0) * (1.0 - fx) + g.at(y1, x1) * fx;
      out.at(r, c) = top * (1.0 - fy) + bottom * fy;
    }
  }
  return out;
}

// Linear encoder: each p x p sub-patch, flattened row-major, times a [p²×D]
// projection gives one token.
struct PatchEncoder {
  std::size_t patch = 1;
  Tensor projection;

  static PatchEncoder init(std::size_t p, std::size_t dim, Rng& rng) {
    if (p == 0 || dim == 0) throw ConfigError("PatchEncoder: patch size and width must be >= 1");
    return {p, gaussian_tensor({p * p, dim}, 1.0 / static_cast<double>(p), rng, false)};
  }

  std::size_t dim() const { return projection.dim(1); }
  std::size_t tokens_for(const Grid& g) const { return (g.height / patch) * (g.width / patch); }

  Tensor encode(const Grid& g) const {
    if (g.height % patch != 0 || g.width % patch != 0)
      throw DimensionError("PatchEncoder: " + std::to_string(g.height) + "x" + std::to_string(g.width) +
                           " grid is not a multiple of patch size " + std::to_string(patch));
    const std::size_t th = g.height / patch, tw = g.width / patch, pp = patch * patch;
    std::vector<double> flat;
    flat.reserve(th * tw * pp);
    for (std::size_t i = 0; i < th; ++i)
      for (std::size_t j = 0; j < tw; ++j)
        for (std::size_t r = 0; r < patch; ++r)
          for (std::size_t c = 0; c < patch; ++c) flat.push_back(g.at(i * patch + r, j * patch + c));
    return matmul(Tensor::from_data({th * tw, pp}, std::move(flat)), projection);
  }
};

struct AnyResConfig {
  std::size_t rows = 2;
  std::size_t cols = 2;
  std::size_t resize_height = 0;  // 0: the patch height
  std::size_t resize_width = 0;   // 0: the patch width
  std::uint64_t seed = 0;
};

struct AnyResOutput {
  Tensor features;                        // [(N+1)·T_p × D]
  std::vector<std::size_t> transform_ids; // per patch
  std::size_t patches = 0;
  std::size_t tokens_per_patch = 0;
};

// Patch tokens in row-major patch order, then the tokens of the resized original.
inline AnyResOutput anyres_encode(const Grid& image, const AnyResConfig& cfg, const TransformSet& ts,
                                  const PatchEncoder& enc) {
  ts.validate();
  const auto patches = split_grid(image, cfg.rows, cfg.cols);
  const std::size_t rh = cfg.resize_height ? cfg.resize_height : patches.front().height;
  const std::size_t rw = cfg.resize_width ? cfg.resize_width : patches.front().width;
  AnyResOutput out;
  out.patches = patches.size();
  std::vector<Tensor> parts;
  for (std::size_t k = 0; k < patches.size(); ++k) {
    const std::size_t id = choose_transform(ts, cfg.seed, k);
    out.transform_ids.push_back(id);
    parts.push_back(enc.encode(apply_transform(patches[k], ts.transforms[id])));
  }
  out.tokens_per_patch = parts.front().dim(0);
  for (const auto& p : parts)
    if (p.dim(0) != out.tokens_per_patch) throw DimensionError("anyres_encode: transformed patches yield different token counts");
  parts.push_back(enc.encode(resize_bilinear(image, rh, rw)));
  if (parts.back().dim(0) != out.tokens_per_patch)
    throw DimensionError("anyres_encode: resized original gives " + std::to_string(parts.back().dim(0)) +
                         " tokens, patches give " + std::to_string(out.tokens_per_patch));
  out.features = concat_rows(parts);
  return out;
}

// One grid row per line, comma-separated.
inline Grid read_grid_csv(std::istream& is) {
  std::vector<double> values;
  std::size_t width = 0, height = 0;
  std::string line;
  while (std::getline(is, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::stringstream ss(line);
    std::string cell;
    std::size_t n = 0;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        values.push_back(std::stod(cell, &used));
        if (cell.find_first_not_of(" \t\r", used) != std::string::npos) throw std::invalid_argument(cell);
      } catch (const std::logic_error&) {
        throw ConfigError("grid CSV: bad number '" + cell + "' on row " + std::to_string(height + 1));
      }
      ++n;
    }
    if (width == 0) width = n;
    if (n != width) throw DimensionError("grid CSV: row " + std::to_string(height + 1) + " has " + std::to_string(n) + " values, expected " + std::to_string(width));
    ++height;
  }
  if (height == 0) throw DimensionError("grid CSV: no rows");
  return Grid(height, width, std::move(values));
}

inline void write_matrix_csv(const Tensor& t, std::ostream& os) {
  if (t.rank() != 2) throw DimensionError("write_matrix_csv: expected a matrix, got " + shape_str(t.shape()));
  os << std::setprecision(17);
  for (std::size_t r = 0; r < t.dim(0); ++r) {
    for (std::size_t c = 0; c < t.dim(1); ++c) os << (c ? "," : "") << t.at(r, c);
    os << '\n';
  }
}

}  // namespace utamoe
