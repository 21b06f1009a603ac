// Copyright 2026 The Linex Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "linex/common.hpp"

namespace linex {

// Exclusion policy for series whose stored values rarely change (the
// low-precision-storage artifact): fewer than min_changes observed value
// changes, or total range below abs_change_floor (0 disables the floor).
struct FilterPolicy {
    std::uint64_t min_changes = 3;
    double abs_change_floor = 0.0;
    double const_eps = 1e-30;  // SS_tot below this marks the series CONSTANT
};

struct FitResult {
    double slope = 0.0;
    double intercept = 0.0;
    double r2 = 0.0;
    std::uint64_t n = 0;
    bool constant = false;  // SS_tot ~ 0; r2 is not meaningful
    bool filtered = false;  // excluded by the change filter (constants always are)
};

// One-pass sufficient statistics for per-series OLS of y against t.
// Value-type; independent accumulators may run on separate threads and
// merge() is associative up to float reassociation.
class FitAccumulator {
  public:
    void add(double t, double y);
    void merge(const FitAccumulator& other);

    std::uint64_t count() const { return n_; }
    std::uint64_t changes() const { return changes_; }
    double sum_t() const { return sum_t_; }
    double sum_tt() const { return sum_tt_; }
    double sum_y() const { return sum_y_; }
    double sum_ty() const { return sum_ty_; }
    double sum_yy() const { return sum_yy_; }
    double y_min() const { return y_min_; }
    double y_max() const { return y_max_; }

  private:
    std::uint64_t n_ = 0;
    double sum_t_ = 0.0, sum_tt_ = 0.0;
    double sum_y_ = 0.0, sum_ty_ = 0.0, sum_yy_ = 0.0;
    std::uint64_t changes_ = 0;  // observed y-value changes between consecutive points
    double y_min_ = 0.0, y_max_ = 0.0;
    double first_y_ = 0.0, last_y_ = 0.0;  // change tracking across merge()

    friend FitResult finalize(const FitAccumulator&, const FilterPolicy&);
};

FitResult finalize(const FitAccumulator& acc, const FilterPolicy& filter = {});

inline constexpr double kR2Threshold = 0.7;

struct HistogramSummary {
    std::vector<double> edges;
    std::vector<std::uint64_t> counts;  // edges.size() - 1 bins; out-of-range values clamp
    std::uint64_t total = 0;            // unfiltered, non-constant results
    double fraction_above_threshold = 0.0;  // r2 > kR2Threshold
    double median_r2 = 0.0;
    bool empty = false;  // nothing survived the filter
};

// Constants and filtered results are excluded before binning; counts always
// sum to `total`.
HistogramSummary histogram(std::span<const FitResult> results, std::span<const double> edges);

}  // namespace linex
