// Copyright 2026 The Linex Authors
// SPDX-License-Identifier: Apache-2.0

#include "linex/linfit.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace linex {

void FitAccumulator::add(double t, double y) {
    if (!std::isfinite(t) || !std::isfinite(y))
        throw NumericError("non-finite observation at index " + std::to_string(n_) +
                           " (t=" + std::to_string(t) + ", y=" + std::to_string(y) + ")");
    if (n_ == 0) {
        first_y_ = y;
        y_min_ = y_max_ = y;
    } else {
        if (y != last_y_) ++changes_;
        y_min_ = std::min(y_min_, y);
        y_max_ = std::max(y_max_, y);
    }
    last_y_ = y;
    ++n_;
    sum_t_ += t;
    sum_tt_ += t * t;
    sum_y_ += y;
    sum_ty_ += t * y;
    sum_yy_ += y * y;
}

void FitAccumulator::merge(const FitAccumulator& other) {
    if (other.n_ == 0) return;
    if (n_ == 0) {
        *this = other;
        return;
    }
    sum_t_ += other.sum_t_;
    sum_tt_ += other.sum_tt_;
    sum_y_ += other.sum_y_;
    sum_ty_ += other.sum_ty_;
    sum_yy_ += other.sum_yy_;
    changes_ += other.changes_ + (other.first_y_ != last_y_ ? 1 : 0);
    y_min_ = std::min(y_min_, other.y_min_);
    y_max_ = std::max(y_max_, other.y_max_);
    last_y_ = other.last_y_;
    n_ += other.n_;
}

FitResult finalize(const FitAccumulator& acc, const FilterPolicy& filter) {
    if (acc.n_ < 2)
        throw NumericError("insufficient data: need at least 2 points, have " +
                           std::to_string(acc.n_));
    const double n = static_cast<double>(acc.n_);
    const double denom = n * acc.sum_tt_ - acc.sum_t_ * acc.sum_t_;
    if (denom <= 0.0)
        throw NumericError("degenerate regressor: zero step variance over " +
                           std::to_string(acc.n_) + " points");

    FitResult r;
    r.n = acc.n_;
    r.filtered = acc.changes_ < filter.min_changes ||
                 (acc.y_max_ - acc.y_min_) < filter.abs_change_floor;

    // A series with no successive change is constant bitwise; the ss_tot
    // test alone misses it at large |y| where the accumulated mean rounds.
    const double ss_tot = acc.sum_yy_ - acc.sum_y_ * acc.sum_y_ / n;
    if (acc.changes_ == 0 || ss_tot < filter.const_eps) {
        r.constant = true;
        r.filtered = true;
        return r;
    }

    r.slope = (n * acc.sum_ty_ - acc.sum_t_ * acc.sum_y_) / denom;
    r.intercept = (acc.sum_y_ - r.slope * acc.sum_t_) / n;
    const double s_ty = acc.sum_ty_ - acc.sum_t_ * acc.sum_y_ / n;
    const double ss_res = ss_tot - r.slope * s_ty;
    r.r2 = 1.0 - ss_res / ss_tot;
    if (r.r2 < 0.0) r.r2 = 0.0;  // fp underflow of an exact-zero residual improvement
    return r;
}

HistogramSummary histogram(std::span<const FitResult> results, std::span<const double> edges) {
    if (edges.size() < 2) throw ConfigError("histogram needs at least 2 bin edges");
    for (std::size_t i = 1; i < edges.size(); ++i)
        if (edges[i] <= edges[i - 1])
            throw ConfigError("histogram bin edges must be strictly increasing");

    HistogramSummary h;
    h.edges.assign(edges.begin(), edges.end());
    h.counts.assign(edges.size() - 1, 0);

    std::vector<double> kept;
    for (const auto& r : results) {
        if (r.filtered || r.constant) continue;
        kept.push_back(r.r2);
    }
    h.total = kept.size();
    if (kept.empty()) {
        h.empty = true;
        return h;
    }

    std::uint64_t above = 0;
    for (double v : kept) {
        if (v > kR2Threshold) ++above;
        // Half-open bins, last bin closed; out-of-range values clamp to the
        // end bins so counts always sum to total.
        const auto it = std::upper_bound(h.edges.begin(), h.edges.end(), v);
        std::size_t bin;
        if (it == h.edges.begin())
            bin = 0;
        else if (it == h.edges.end())
            bin = h.counts.size() - 1;
        else
            bin = static_cast<std::size_t>(it - h.edges.begin()) - 1;
        ++h.counts[bin];
    }
    h.fraction_above_threshold = static_cast<double>(above) / static_cast<double>(kept.size());

    std::sort(kept.begin(), kept.end());
    const std::size_t mid = kept.size() / 2;
    h.median_r2 = kept.size() % 2 ? kept[mid] : 0.5 * (kept[mid - 1] + kept[mid]);
    return h;
}

}  // namespace linex
