#include "samba/metrics.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace samba {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_extents(const LabelMask& pred, const LabelMask& gt) {
    if (pred.height != gt.height || pred.width != gt.width) {
        throw ShapeError("mask extent mismatch: pred " + std::to_string(pred.height) + "x" +
                         std::to_string(pred.width) + " vs gt " + std::to_string(gt.height) + "x" +
                         std::to_string(gt.width));
    }
}

// Marks class pixels with at least one non-class 4-neighbor; the image
// border counts as non-class, so edge pixels of a region are boundary.
std::vector<uint8_t> boundary_of(const LabelMask& m, int cls) {
    std::vector<uint8_t> b(static_cast<size_t>(m.numel()), 0);
    for (int64_t r = 0; r < m.height; ++r) {
        for (int64_t c = 0; c < m.width; ++c) {
            if (m.at(r, c) != cls) continue;
            const bool edge = r == 0 || r == m.height - 1 || c == 0 || c == m.width - 1 ||
                              m.at(r - 1, c) != cls || m.at(r + 1, c) != cls ||
                              m.at(r, c - 1) != cls || m.at(r, c + 1) != cls;
            b[static_cast<size_t>(r * m.width + c)] = edge ? 1 : 0;
        }
    }
    return b;
}

// 1-D lower-envelope pass of the squared distance transform:
//   d[q] = min_p ((q - p)^2 + f[p]).
// Exact for integer-valued finite f: parabola values at integer arguments
// are integers, so an envelope breakpoint close enough to an integer to be
// misplaced by rounding is a tie, where either parabola gives the same
// value.
void edt_1d(const std::vector<double>& f, std::vector<double>& d, std::vector<int64_t>& v,
            std::vector<double>& z) {
    const int64_t n = static_cast<int64_t>(f.size());
    d.assign(f.size(), kInf);
    int64_t k = -1;
    for (int64_t q = 0; q < n; ++q) {
        if (f[q] == kInf) continue;
        double s = 0.0;
        while (k >= 0) {
            const int64_t p = v[static_cast<size_t>(k)];
            s = ((f[static_cast<size_t>(q)] + static_cast<double>(q) * q) -
                 (f[static_cast<size_t>(p)] + static_cast<double>(p) * p)) /
                (2.0 * static_cast<double>(q - p));
            if (s <= z[static_cast<size_t>(k)]) {
                --k;
            } else {
                break;
            }
        }
        if (k < 0) {
            k = 0;
            v[0] = q;
            z[0] = -kInf;
            z[1] = kInf;
        } else {
            ++k;
            v[static_cast<size_t>(k)] = q;
            z[static_cast<size_t>(k)] = s;
            z[static_cast<size_t>(k) + 1] = kInf;
        }
    }
    if (k < 0) return;  // no sites in this line
    int64_t j = 0;
    for (int64_t q = 0; q < n; ++q) {
        while (z[static_cast<size_t>(j) + 1] < static_cast<double>(q)) ++j;
        const int64_t p = v[static_cast<size_t>(j)];
        d[static_cast<size_t>(q)] = static_cast<double>((q - p) * (q - p)) + f[static_cast<size_t>(p)];
    }
}

// Exact squared Euclidean distance to the nearest set pixel, or +inf where
// the set is empty.  Vertical nearest-seed pass first, then the parabola
// pass along each row.
std::vector<double> squared_edt(const std::vector<uint8_t>& set, int64_t h, int64_t w) {
    std::vector<double> colsq(static_cast<size_t>(h * w), kInf);
    for (int64_t c = 0; c < w; ++c) {
        double run = kInf;
        for (int64_t r = 0; r < h; ++r) {
            run = set[static_cast<size_t>(r * w + c)] ? 0.0 : run + 1.0;
            colsq[static_cast<size_t>(r * w + c)] = run;
        }
        run = kInf;
        for (int64_t r = h - 1; r >= 0; --r) {
            run = set[static_cast<size_t>(r * w + c)] ? 0.0 : run + 1.0;
            double& cell = colsq[static_cast<size_t>(r * w + c)];
            cell = std::min(cell, run);
            cell = cell == kInf ? kInf : cell * cell;
        }
    }
    std::vector<double> out(static_cast<size_t>(h * w));
    std::vector<double> f(static_cast<size_t>(w)), d(static_cast<size_t>(w));
    std::vector<int64_t> v(static_cast<size_t>(w));
    std::vector<double> z(static_cast<size_t>(w) + 1);
    for (int64_t r = 0; r < h; ++r) {
        for (int64_t c = 0; c < w; ++c) f[static_cast<size_t>(c)] = colsq[static_cast<size_t>(r * w + c)];
        edt_1d(f, d, v, z);
        for (int64_t c = 0; c < w; ++c) out[static_cast<size_t>(r * w + c)] = d[static_cast<size_t>(c)];
    }
    return out;
}

struct PooledDistances {
    bool both_empty = false;
    bool one_empty = false;
    std::vector<double> sorted;  // ascending; empty iff a flag is set
};

PooledDistances pooled_surface_distances(const LabelMask& pred, const LabelMask& gt, int cls) {
    check_extents(pred, gt);
    const std::vector<uint8_t> bp = boundary_of(pred, cls);
    const std::vector<uint8_t> bg = boundary_of(gt, cls);
    const bool ep = std::find(bp.begin(), bp.end(), 1) == bp.end();
    const bool eg = std::find(bg.begin(), bg.end(), 1) == bg.end();
    PooledDistances out;
    if (ep && eg) {
        out.both_empty = true;
        return out;
    }
    if (ep || eg) {
        out.one_empty = true;
        return out;
    }
    const std::vector<double> dq_to_g = squared_edt(bg, pred.height, pred.width);
    const std::vector<double> dq_to_p = squared_edt(bp, pred.height, pred.width);
    for (size_t i = 0; i < bp.size(); ++i)
        if (bp[i]) out.sorted.push_back(std::sqrt(dq_to_g[i]));
    for (size_t i = 0; i < bg.size(); ++i)
        if (bg[i]) out.sorted.push_back(std::sqrt(dq_to_p[i]));
    std::sort(out.sorted.begin(), out.sorted.end());
    return out;
}

// Linear-interpolation percentile at index p * (n - 1) of an ascending
// vector.
double percentile(const std::vector<double>& sorted, double p) {
    const double pos = p * static_cast<double>(sorted.size() - 1);
    const size_t lo = static_cast<size_t>(pos);
    const double frac = pos - static_cast<double>(lo);
    if (lo + 1 >= sorted.size()) return sorted[lo];
    return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

double ascending_mean(const std::vector<double>& sorted) {
    double sum = 0.0;
    for (const double dist : sorted) sum += dist;
    return sum / static_cast<double>(sorted.size());
}

struct Confusion {
    int64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

Confusion count_confusion(const LabelMask& pred, const LabelMask& gt, int cls) {
    Confusion c;
    for (int64_t i = 0; i < pred.numel(); ++i) {
        const bool p = pred.labels[static_cast<size_t>(i)] == cls;
        const bool g = gt.labels[static_cast<size_t>(i)] == cls;
        c.tp += p && g;
        c.fp += p && !g;
        c.fn += !p && g;
        c.tn += !p && !g;
    }
    return c;
}

double ratio_or_one(int64_t num, int64_t den) {
    return den > 0 ? static_cast<double>(num) / static_cast<double>(den) : 1.0;
}

std::string fmt_value(double v) {
    if (std::isinf(v)) return "inf";
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

}  // namespace

OverlapResult overlap_metrics(const LabelMask& pred, const LabelMask& gt, int cls) {
    check_extents(pred, gt);
    int64_t inter = 0, p_size = 0, g_size = 0;
    for (int64_t i = 0; i < pred.numel(); ++i) {
        const bool p = pred.labels[static_cast<size_t>(i)] == cls;
        const bool g = gt.labels[static_cast<size_t>(i)] == cls;
        inter += p && g;
        p_size += p;
        g_size += g;
    }
    OverlapResult r;
    r.dice = ratio_or_one(2 * inter, p_size + g_size);
    r.iou = ratio_or_one(inter, p_size + g_size - inter);
    return r;
}

ConfusionResult confusion_metrics(const LabelMask& pred, const LabelMask& gt, int cls) {
    check_extents(pred, gt);
    const Confusion c = count_confusion(pred, gt, cls);
    ConfusionResult r;
    r.acc = ratio_or_one(c.tp + c.tn, pred.numel());
    r.pre = ratio_or_one(c.tp, c.tp + c.fp);
    r.sen = ratio_or_one(c.tp, c.tp + c.fn);
    r.spe = ratio_or_one(c.tn, c.tn + c.fp);
    return r;
}

double hd95(const LabelMask& pred, const LabelMask& gt, int cls, double spacing) {
    const PooledDistances pd = pooled_surface_distances(pred, gt, cls);
    if (pd.both_empty) return 0.0;
    if (pd.one_empty) return kInf;
    return percentile(pd.sorted, 0.95) * spacing;
}

double asd(const LabelMask& pred, const LabelMask& gt, int cls, double spacing) {
    const PooledDistances pd = pooled_surface_distances(pred, gt, cls);
    if (pd.both_empty) return 0.0;
    if (pd.one_empty) return kInf;
    return ascending_mean(pd.sorted) * spacing;
}

double MetricReport::mean_dice() const {
    double s = 0.0;
    for (const ClassMetrics& c : per_class) s += c.dice;
    return s / static_cast<double>(per_class.size());
}

double MetricReport::mean_iou() const {
    double s = 0.0;
    for (const ClassMetrics& c : per_class) s += c.iou;
    return s / static_cast<double>(per_class.size());
}

double MetricReport::mean_hd95() const {
    double s = 0.0;
    for (const ClassMetrics& c : per_class) s += c.hd95;
    return s / static_cast<double>(per_class.size());
}

double MetricReport::mean_asd() const {
    double s = 0.0;
    for (const ClassMetrics& c : per_class) s += c.asd;
    return s / static_cast<double>(per_class.size());
}

MetricReport evaluate_sample(const LabelMask& pred, const LabelMask& gt, int64_t num_classes,
                             double spacing) {
    check_extents(pred, gt);
    if (num_classes < 2) {
        throw ContractError("evaluate_sample needs at least 2 classes, got " +
                            std::to_string(num_classes));
    }
    for (const LabelMask* m : {&pred, &gt}) {
        for (const uint8_t v : m->labels) {
            if (v >= num_classes) {
                throw ContractError("mask value " + std::to_string(int(v)) +
                                    " outside class range [0, " + std::to_string(num_classes) + ")");
            }
        }
    }
    MetricReport rep;
    Confusion pool;
    for (int cls = 1; cls < num_classes; ++cls) {
        ClassMetrics cm;
        const OverlapResult ov = overlap_metrics(pred, gt, cls);
        cm.dice = ov.dice;
        cm.iou = ov.iou;
        const PooledDistances pd = pooled_surface_distances(pred, gt, cls);
        if (pd.both_empty) {
            cm.hd95 = 0.0;
            cm.asd = 0.0;
        } else if (pd.one_empty) {
            cm.hd95 = kInf;
            cm.asd = kInf;
        } else {
            cm.hd95 = percentile(pd.sorted, 0.95) * spacing;
            cm.asd = ascending_mean(pd.sorted) * spacing;
        }
        rep.per_class.push_back(cm);
        const Confusion c = count_confusion(pred, gt, cls);
        pool.tp += c.tp;
        pool.fp += c.fp;
        pool.fn += c.fn;
        pool.tn += c.tn;
    }
    int64_t correct = 0;
    for (int64_t i = 0; i < pred.numel(); ++i)
        correct += pred.labels[static_cast<size_t>(i)] == gt.labels[static_cast<size_t>(i)];
    rep.acc = ratio_or_one(correct, pred.numel());
    rep.pre = ratio_or_one(pool.tp, pool.tp + pool.fp);
    rep.sen = ratio_or_one(pool.tp, pool.tp + pool.fn);
    rep.spe = ratio_or_one(pool.tn, pool.tn + pool.fp);
    return rep;
}

LabelMask argmax_mask(const Tensor& logits, int64_t batch_index) {
    if (logits.rank() != 4) {
        throw ShapeError("argmax_mask expects [B, C, H, W] logits, got " + shape_str(logits.shape()));
    }
    const int64_t b_dim = logits.shape()[0];
    const int64_t c_dim = logits.shape()[1];
    const int64_t h = logits.shape()[2];
    const int64_t w = logits.shape()[3];
    if (batch_index < 0 || batch_index >= b_dim) {
        throw ContractError("batch index " + std::to_string(batch_index) + " outside [0, " +
                            std::to_string(b_dim) + ")");
    }
    if (c_dim > 255) throw ContractError("argmax_mask supports at most 255 classes");
    const float* p = logits.data() + batch_index * c_dim * h * w;
    LabelMask mask(h, w);
    for (int64_t i = 0; i < h * w; ++i) {
        int best = 0;
        float best_v = p[i];
        for (int64_t c = 1; c < c_dim; ++c) {
            const float v = p[c * h * w + i];
            if (v > best_v) {
                best_v = v;
                best = static_cast<int>(c);
            }
        }
        mask.labels[static_cast<size_t>(i)] = static_cast<uint8_t>(best);
    }
    return mask;
}

std::string reports_to_csv(const std::vector<MetricReport>& reports) {
    std::ostringstream out;
    out << "sample,Dice,IoU,Acc,Pre,Sen,Spe,HD95,ASD\n";
    for (size_t i = 0; i < reports.size(); ++i) {
        const MetricReport& r = reports[i];
        out << i << ',' << fmt_value(r.mean_dice()) << ',' << fmt_value(r.mean_iou()) << ','
            << fmt_value(r.acc) << ',' << fmt_value(r.pre) << ',' << fmt_value(r.sen) << ','
            << fmt_value(r.spe) << ',' << fmt_value(r.mean_hd95()) << ',' << fmt_value(r.mean_asd())
            << '\n';
    }
    return out.str();
}

std::string reports_to_json_summary(const std::vector<MetricReport>& reports) {
    nlohmann::json means;
    const auto finite_mean = [&](auto getter) -> nlohmann::json {
        double sum = 0.0;
        int64_t n = 0;
        for (const MetricReport& r : reports) {
            const double v = getter(r);
            if (std::isfinite(v)) {
                sum += v;
                ++n;
            }
        }
        if (n == 0) return nullptr;
        return sum / static_cast<double>(n);
    };
    means["Dice"] = finite_mean([](const MetricReport& r) { return r.mean_dice(); });
    means["IoU"] = finite_mean([](const MetricReport& r) { return r.mean_iou(); });
    means["Acc"] = finite_mean([](const MetricReport& r) { return r.acc; });
    means["Pre"] = finite_mean([](const MetricReport& r) { return r.pre; });
    means["Sen"] = finite_mean([](const MetricReport& r) { return r.sen; });
    means["Spe"] = finite_mean([](const MetricReport& r) { return r.spe; });
    means["HD95"] = finite_mean([](const MetricReport& r) { return r.mean_hd95(); });
    means["ASD"] = finite_mean([](const MetricReport& r) { return r.mean_asd(); });
    int64_t undefined = 0;
    for (const MetricReport& r : reports) undefined += !std::isfinite(r.mean_hd95());
    nlohmann::json root;
    root["samples"] = reports.size();
    root["undefined_boundary"] = undefined;
    root["means"] = means;
    return root.dump(2);
}

}  // namespace samba
