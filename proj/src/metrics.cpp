#include "odseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>

#include "json.hpp"
#include "odseg/text.hpp"

namespace odseg {

namespace {

struct Offset {
  Index dz, dy, dx;
};

std::vector<Offset> neighbourhood(int connectivity) {
  if (connectivity != 6 && connectivity != 18 && connectivity != 26)
    throw ValueError("connectivity must be 6, 18 or 26, got " + std::to_string(connectivity));
  std::vector<Offset> out;
  for (Index dz = -1; dz <= 1; ++dz)
    for (Index dy = -1; dy <= 1; ++dy)
      for (Index dx = -1; dx <= 1; ++dx) {
        const int nonzero = (dz != 0) + (dy != 0) + (dx != 0);
        if (nonzero == 0) continue;
        if (connectivity == 6 && nonzero > 1) continue;
        if (connectivity == 18 && nonzero > 2) continue;
        out.push_back({dz, dy, dx});
      }
  return out;
}

bool inside(const Grid& e, Index z, Index y, Index x) {
  return z >= 0 && y >= 0 && x >= 0 && z < e[0] && y < e[1] && x < e[2];
}

BinaryMask select(const LabelMask& m, std::initializer_list<std::uint8_t> labels) {
  BinaryMask out = BinaryMask::zeros(m.extents);
  for (std::size_t i = 0; i < m.labels.size(); ++i)
    for (auto l : labels)
      if (m.labels[i] == l) out.bits[i] = 1;
  return out;
}

/// Exact 1-D squared distance transform of sampled function f (lower
/// envelope of parabolas), sample spacing s.
void edt_1d(const double* f, double* d, Index n, double s, std::vector<Index>& v, std::vector<double>& z) {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  v.assign(static_cast<std::size_t>(n), 0);
  z.assign(static_cast<std::size_t>(n + 1), 0.0);
  // Skip leading samples with no feature; an all-infinite line stays infinite.
  Index first = 0;
  while (first < n && std::isinf(f[first])) ++first;
  if (first == n) {
    std::fill(d, d + n, kInf);
    return;
  }
  Index k = 0;
  v[0] = first;
  z[0] = -kInf;
  z[1] = kInf;
  const double s2 = s * s;
  for (Index q = first + 1; q < n; ++q) {
    if (std::isinf(f[q])) continue;
    double sq;
    for (;;) {
      const Index p = v[k];
      sq = ((f[q] + s2 * static_cast<double>(q * q)) - (f[p] + s2 * static_cast<double>(p * p))) /
           (2.0 * s2 * static_cast<double>(q - p));
      if (sq <= z[k] && k > 0) {
        --k;
        continue;
      }
      break;
    }
    if (sq <= z[k]) {
      // Replaces the only parabola.
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
      continue;
    }
    ++k;
    v[k] = q;
    z[k] = sq;
    z[k + 1] = kInf;
  }
  k = 0;
  for (Index q = 0; q < n; ++q) {
    while (z[k + 1] < static_cast<double>(q)) ++k;
    const double dq = s * static_cast<double>(q - v[k]);
    d[q] = dq * dq + f[v[k]];
  }
}

RegionScore score_region(const BinaryMask& pred, const BinaryMask& gt, const Spacing& spacing,
                         const LesionOptions& opts) {
  RegionScore s;
  s.dice = dice(pred, gt);
  s.dice_both_empty = pred.empty() && gt.empty();
  s.lesion_dice = lesion_wise_dice(pred, gt, opts);
  const auto h = hd95(pred, gt, spacing);
  s.hd95 = h.value;
  s.hd95_penalty = h.penalty;
  s.hd95_both_empty = h.both_empty;
  return s;
}

}  // namespace

const char* region_name(Region r) {
  switch (r) {
    case Region::ET: return "ET";
    case Region::TC: return "TC";
    case Region::WT: return "WT";
  }
  return "?";
}

const BinaryMask& region_mask(const RegionMasks& m, Region r) {
  return r == Region::ET ? m.et : r == Region::TC ? m.tc : m.wt;
}

RegionMasks compose_regions(const LabelMask& m) {
  m.validate();
  return {select(m, {kEnhancing}), select(m, {kNecrosis, kEnhancing}), select(m, {kNecrosis, kEdema, kEnhancing})};
}

double dice(const BinaryMask& a, const BinaryMask& b) {
  require_same_extents(a.extents, b.extents, "dice");
  Index inter = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.bits.size(); ++i) {
    na += a.bits[i] != 0;
    nb += b.bits[i] != 0;
    inter += a.bits[i] && b.bits[i];
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

Components connected_components(const BinaryMask& m, int connectivity) {
  const auto offsets = neighbourhood(connectivity);
  const Grid& e = m.extents;
  Components c;
  c.extents = e;
  c.labels.assign(m.bits.size(), 0);
  std::vector<Index> stack;
  for (Index i = 0; i < m.voxels(); ++i) {
    if (!m.bits[static_cast<std::size_t>(i)] || c.labels[static_cast<std::size_t>(i)]) continue;
    const auto id = static_cast<std::int32_t>(c.sizes.size() + 1);
    Index size = 0;
    c.labels[static_cast<std::size_t>(i)] = id;
    stack.push_back(i);
    while (!stack.empty()) {
      const Index cur = stack.back();
      stack.pop_back();
      ++size;
      const Index z = cur / (e[1] * e[2]), y = (cur / e[2]) % e[1], x = cur % e[2];
      for (const auto& o : offsets) {
        const Index zz = z + o.dz, yy = y + o.dy, xx = x + o.dx;
        if (!inside(e, zz, yy, xx)) continue;
        const auto j = static_cast<std::size_t>((zz * e[1] + yy) * e[2] + xx);
        if (m.bits[j] && !c.labels[j]) {
          c.labels[j] = id;
          stack.push_back(static_cast<Index>(j));
        }
      }
    }
    c.sizes.push_back(size);
  }
  return c;
}

BinaryMask boundary(const BinaryMask& m) {
  const Grid& e = m.extents;
  BinaryMask out = BinaryMask::zeros(e);
  const auto offsets = neighbourhood(6);
  for (Index z = 0; z < e[0]; ++z)
    for (Index y = 0; y < e[1]; ++y)
      for (Index x = 0; x < e[2]; ++x) {
        if (!m.at(z, y, x)) continue;
        for (const auto& o : offsets) {
          const Index zz = z + o.dz, yy = y + o.dy, xx = x + o.dx;
          if (!inside(e, zz, yy, xx) || !m.at(zz, yy, xx)) {
            out.at(z, y, x) = 1;
            break;
          }
        }
      }
  return out;
}

std::vector<double> distance_transform(const BinaryMask& features, const Spacing& spacing) {
  const Grid& e = features.extents;
  const auto n = static_cast<std::size_t>(features.voxels());
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> g(n);
  for (std::size_t i = 0; i < n; ++i) g[i] = features.bits[i] ? 0.0 : kInf;
  if (features.empty()) return g;

  const Index stride[3] = {e[1] * e[2], e[2], 1};
  std::vector<double> line, out;
  std::vector<Index> v;
  std::vector<double> z;
  for (int axis = 0; axis < 3; ++axis) {
    const Index len = e[axis];
    line.resize(static_cast<std::size_t>(len));
    out.resize(static_cast<std::size_t>(len));
    const int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
    for (Index i = 0; i < e[a1]; ++i)
      for (Index j = 0; j < e[a2]; ++j) {
        const Index base = i * stride[a1] + j * stride[a2];
        for (Index t = 0; t < len; ++t) line[t] = g[static_cast<std::size_t>(base + t * stride[axis])];
        edt_1d(line.data(), out.data(), len, static_cast<double>(spacing[axis]), v, z);
        for (Index t = 0; t < len; ++t) g[static_cast<std::size_t>(base + t * stride[axis])] = out[t];
      }
  }
  for (auto& x : g) x = std::sqrt(x);
  return g;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw ValueError("percentile of an empty set");
  if (!(q >= 0.0 && q <= 100.0)) throw ValueError("percentile q must lie in [0, 100]");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double t = pos - static_cast<double>(lo);
  return values[lo] + (values[hi] - values[lo]) * t;
}

double lesion_wise_dice(const BinaryMask& pred, const BinaryMask& gt, const LesionOptions& opts) {
  require_same_extents(pred.extents, gt.extents, "lesion_wise_dice");
  if (opts.dilation < 0) throw ValueError("lesion dilation must be non-negative");
  const auto pc = connected_components(pred, opts.connectivity);
  const auto gc = connected_components(gt, opts.connectivity);
  if (pc.count() + gc.count() == 0) return 1.0;

  // Pred component j touches the zone of GT lesion k when one of its voxels
  // lies within Chebyshev distance `dilation` of a voxel of k.
  const Grid& e = gt.extents;
  const Index r = opts.dilation;
  std::set<std::pair<int, int>> touches;
  for (Index z = 0; z < e[0]; ++z)
    for (Index y = 0; y < e[1]; ++y)
      for (Index x = 0; x < e[2]; ++x) {
        const int j = pc.labels[static_cast<std::size_t>((z * e[1] + y) * e[2] + x)];
        if (!j) continue;
        for (Index zz = std::max<Index>(0, z - r); zz <= std::min(e[0] - 1, z + r); ++zz)
          for (Index yy = std::max<Index>(0, y - r); yy <= std::min(e[1] - 1, y + r); ++yy)
            for (Index xx = std::max<Index>(0, x - r); xx <= std::min(e[2] - 1, x + r); ++xx) {
              const int k = gc.labels[static_cast<std::size_t>((zz * e[1] + yy) * e[2] + xx)];
              if (k) touches.emplace(k, j);
            }
      }

  std::vector<std::set<int>> matched(static_cast<std::size_t>(gc.count() + 1));
  std::vector<bool> pred_matched(static_cast<std::size_t>(pc.count() + 1), false);
  for (const auto& [k, j] : touches) {
    matched[static_cast<std::size_t>(k)].insert(j);
    pred_matched[static_cast<std::size_t>(j)] = true;
  }
  std::vector<Index> overlap(static_cast<std::size_t>(gc.count() + 1), 0);
  for (std::size_t i = 0; i < gc.labels.size(); ++i) {
    const int k = gc.labels[i];
    if (k && pc.labels[i] && matched[static_cast<std::size_t>(k)].count(pc.labels[i])) ++overlap[static_cast<std::size_t>(k)];
  }
  double total = 0;
  for (int k = 1; k <= gc.count(); ++k) {
    Index pred_size = 0;
    for (int j : matched[static_cast<std::size_t>(k)]) pred_size += pc.sizes[static_cast<std::size_t>(j - 1)];
    const Index gt_size = gc.sizes[static_cast<std::size_t>(k - 1)];
    total += 2.0 * static_cast<double>(overlap[static_cast<std::size_t>(k)]) / static_cast<double>(gt_size + pred_size);
  }
  int false_positives = 0;
  for (int j = 1; j <= pc.count(); ++j) false_positives += !pred_matched[static_cast<std::size_t>(j)];
  return total / static_cast<double>(gc.count() + false_positives);
}

DistanceResult hd95(const BinaryMask& pred, const BinaryMask& gt, const Spacing& spacing) {
  require_same_extents(pred.extents, gt.extents, "hd95");
  DistanceResult r;
  const bool pe = pred.empty(), ge = gt.empty();
  if (pe && ge) {
    r.both_empty = true;
    return r;
  }
  if (pe || ge) {
    double diag = 0;
    for (int k = 0; k < 3; ++k) {
      const double len = static_cast<double>(gt.extents[k]) * spacing[k];
      diag += len * len;
    }
    r.value = std::sqrt(diag);
    r.penalty = true;
    return r;
  }
  const auto bp = boundary(pred), bg = boundary(gt);
  const auto dist_to_gt = distance_transform(bg, spacing);
  const auto dist_to_pred = distance_transform(bp, spacing);
  std::vector<double> forward, backward;
  for (std::size_t i = 0; i < bp.bits.size(); ++i) {
    if (bp.bits[i]) forward.push_back(dist_to_gt[i]);
    if (bg.bits[i]) backward.push_back(dist_to_pred[i]);
  }
  r.value = std::max(percentile(std::move(forward), 95.0), percentile(std::move(backward), 95.0));
  return r;
}

CaseRecord evaluate_case(const std::string& case_id, const LabelMask& pred, const LabelMask& gt,
                         const LesionOptions& opts) {
  require_same_extents(pred.extents, gt.extents, ("case " + case_id).c_str());
  const auto p = compose_regions(pred), g = compose_regions(gt);
  CaseRecord rec;
  rec.case_id = case_id;
  for (Region r : kRegions)
    rec.regions[static_cast<std::size_t>(r)] = score_region(region_mask(p, r), region_mask(g, r), gt.spacing, opts);
  return rec;
}

MetricsReport aggregate(std::vector<CaseRecord> cases) {
  std::sort(cases.begin(), cases.end(), [](const CaseRecord& a, const CaseRecord& b) { return a.case_id < b.case_id; });
  MetricsReport rep;
  for (const auto& c : cases)
    for (std::size_t r = 0; r < 3; ++r) {
      rep.mean[r].dice += c.regions[r].dice;
      rep.mean[r].lesion_dice += c.regions[r].lesion_dice;
      rep.mean[r].hd95 += c.regions[r].hd95;
      rep.conventions.dice_both_empty += c.regions[r].dice_both_empty;
      rep.conventions.hd95_both_empty += c.regions[r].hd95_both_empty;
      rep.conventions.hd95_penalty += c.regions[r].hd95_penalty;
    }
  if (!cases.empty())
    for (auto& m : rep.mean) {
      const double n = static_cast<double>(cases.size());
      m.dice /= n;
      m.lesion_dice /= n;
      m.hd95 /= n;
    }
  rep.cases = std::move(cases);
  return rep;
}

MetricsReport evaluate_set(const std::vector<CasePair>& pairs, const LesionOptions& opts) {
  std::vector<CaseRecord> cases;
  cases.reserve(pairs.size());
  for (const auto& p : pairs) cases.push_back(evaluate_case(p.case_id, p.pred, p.gt, opts));
  return aggregate(std::move(cases));
}

std::string report_csv(const MetricsReport& r) {
  std::string out = "case_id,region,dice,lesion_dice,hd95\n";
  for (const auto& c : r.cases)
    for (Region reg : kRegions) {
      const auto& s = c.regions[static_cast<std::size_t>(reg)];
      out += c.case_id + "," + region_name(reg) + "," + text::format_double(s.dice) + "," +
             text::format_double(s.lesion_dice) + "," + text::format_double(s.hd95) + "\n";
    }
  return out;
}

std::string report_json(const MetricsReport& r) {
  using nlohmann::ordered_json;
  const auto scores = [](const RegionScore& s) {
    return ordered_json{{"dice", s.dice}, {"lesion_dice", s.lesion_dice}, {"hd95", s.hd95}};
  };
  ordered_json doc;
  doc["cases"] = ordered_json::array();
  for (const auto& c : r.cases) {
    ordered_json regions;
    for (Region reg : kRegions) {
      const auto& s = c.regions[static_cast<std::size_t>(reg)];
      auto entry = scores(s);
      entry["dice_both_empty"] = s.dice_both_empty;
      entry["hd95_both_empty"] = s.hd95_both_empty;
      entry["hd95_penalty"] = s.hd95_penalty;
      regions[region_name(reg)] = entry;
    }
    doc["cases"].push_back({{"case_id", c.case_id}, {"regions", regions}});
  }
  ordered_json agg;
  agg["case_count"] = r.cases.size();
  for (Region reg : kRegions) agg[region_name(reg)] = scores(r.mean[static_cast<std::size_t>(reg)]);
  doc["aggregate"] = agg;
  doc["conventions"] = {{"dice_both_empty", r.conventions.dice_both_empty},
                        {"hd95_both_empty", r.conventions.hd95_both_empty},
                        {"hd95_penalty", r.conventions.hd95_penalty}};
  return doc.dump(2) + "\n";
}

}  // namespace odseg
