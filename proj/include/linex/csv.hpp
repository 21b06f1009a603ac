// Copyright 2026 The Linex Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "linex/common.hpp"

namespace linex {

// Shortest round-trip-exact decimal form of a double.
inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    double back = 0.0;
    std::sscanf(buf, "%lf", &back);
    if (back == v) {
        for (int prec = 1; prec < 17; ++prec) {
            char shorter[40];
            std::snprintf(shorter, sizeof(shorter), "%.*g", prec, v);
            std::sscanf(shorter, "%lf", &back);
            if (back == v) return shorter;
        }
    }
    return buf;
}

class CsvWriter {
  public:
    explicit CsvWriter(const std::filesystem::path& path) : out_(path), path_(path.string()) {
        if (!out_) throw IoError("cannot open for writing: " + path_);
    }

    void row(const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) out_ << ',';
            out_ << cells[i];
        }
        out_ << '\n';
        if (!out_) throw IoError("write failure: " + path_);
    }

  private:
    std::ofstream out_;
    std::string path_;
};

// Whole-file CSV read; cells are raw strings, no quoting support (the
// formats written here never need it).
std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path);

double parse_double(const std::string& cell, const std::string& context);
long long parse_int(const std::string& cell, const std::string& context);

}  // namespace linex
