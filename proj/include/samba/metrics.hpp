#pragma once

// Segmentation evaluation suite: region-overlap ratios (Dice, IoU),
// confusion-matrix ratios (accuracy, precision, sensitivity, specificity),
// and boundary surface distances (HD95, ASD).  All functions are pure and
// operate on integer label masks.
//
// Conventions, fixed so golden values are stable:
//   - Boundary pixels are class pixels with at least one non-class
//     4-neighbor; the image border counts as non-class.
//   - Distances are exact Euclidean, computed with a two-phase squared
//     distance transform.
//   - HD95 pools both directed distance sets (pred boundary to gt surface
//     and vice versa) and takes the 95th percentile with the linear
//     interpolation convention at index 0.95 * (n - 1).
//   - ASD is the mean of the same pooled set, summed in ascending order so
//     the result is reproducible bit for bit.
//   - Empty-set conventions: both boundaries empty -> 0; exactly one empty
//     -> +infinity (recorded as "undefined" in summaries).  Ratio metrics
//     with an empty denominator population return 1 (nothing to get wrong).

#include "samba/error.hpp"
#include "samba/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace samba {

// Dense H x W class-id mask, row major.
struct LabelMask {
    int64_t height = 0;
    int64_t width = 0;
    std::vector<uint8_t> labels;

    LabelMask() = default;
    LabelMask(int64_t h, int64_t w) : height(h), width(w), labels(static_cast<size_t>(h * w), 0) {}

    uint8_t at(int64_t r, int64_t c) const { return labels[static_cast<size_t>(r * width + c)]; }
    uint8_t& at(int64_t r, int64_t c) { return labels[static_cast<size_t>(r * width + c)]; }
    int64_t numel() const { return height * width; }
};

struct OverlapResult {
    double dice = 0.0;
    double iou = 0.0;
};

struct ConfusionResult {
    double acc = 0.0;
    double pre = 0.0;
    double sen = 0.0;
    double spe = 0.0;
};

// dice = 2|P & G| / (|P| + |G|), iou = |P & G| / |P | G|; both empty -> 1.
OverlapResult overlap_metrics(const LabelMask& pred, const LabelMask& gt, int cls);

// Binary confusion ratios for one class; empty denominator population -> 1.
ConfusionResult confusion_metrics(const LabelMask& pred, const LabelMask& gt, int cls);

// 95th percentile of the pooled directed boundary distances, in spacing
// units (default: pixels).  See the empty-set conventions above.
double hd95(const LabelMask& pred, const LabelMask& gt, int cls, double spacing = 1.0);

// Mean of the pooled directed boundary distances, in spacing units.
double asd(const LabelMask& pred, const LabelMask& gt, int cls, double spacing = 1.0);

// Per-foreground-class distances plus global confusion ratios for one
// prediction/ground-truth pair.
struct ClassMetrics {
    double dice = 0.0;
    double iou = 0.0;
    double hd95 = 0.0;  // +inf when exactly one boundary is empty
    double asd = 0.0;
};

struct MetricReport {
    std::vector<ClassMetrics> per_class;  // index i holds class id i + 1
    double acc = 0.0;  // plain pixel accuracy over all classes
    double pre = 0.0;  // micro-pooled over foreground classes
    double sen = 0.0;
    double spe = 0.0;

    double mean_dice() const;
    double mean_iou() const;
    double mean_hd95() const;  // +inf propagates from undefined entries
    double mean_asd() const;
};

// Computes every metric for one sample.  Throws ShapeError on extent
// mismatch and ContractError when a mask value falls outside the class
// range.
MetricReport evaluate_sample(const LabelMask& pred, const LabelMask& gt, int64_t num_classes,
                             double spacing = 1.0);

// Per-pixel argmax of one batch item of a [B, C, H, W] logit tensor; ties
// resolve to the lowest class id.
LabelMask argmax_mask(const Tensor& logits, int64_t batch_index);

// One CSV row per report: sample index plus the foreground means and the
// global confusion ratios.  Undefined boundary distances print as "inf".
std::string reports_to_csv(const std::vector<MetricReport>& reports);

// JSON object with the sample count and the mean of each column; boundary
// means skip undefined entries (their count is reported separately) and are
// null when no entry is defined.
std::string reports_to_json_summary(const std::vector<MetricReport>& reports);

}  // namespace samba
