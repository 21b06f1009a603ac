// Copyright 2026 The Linex Authors
// SPDX-License-Identifier: Apache-2.0

#include "linex/csv.hpp"

#include <cerrno>
#include <cstdlib>
#include <sstream>

namespace linex {

std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open for reading: " + path.string());
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::size_t start = 0;
        for (;;) {
            const std::size_t comma = line.find(',', start);
            if (comma == std::string::npos) {
                cells.push_back(line.substr(start));
                break;
            }
            cells.push_back(line.substr(start, comma - start));
            start = comma + 1;
        }
        rows.push_back(std::move(cells));
    }
    return rows;
}

double parse_double(const std::string& cell, const std::string& context) {
    errno = 0;
    char* end = nullptr;
    const double v = std::strtod(cell.c_str(), &end);
    if (end == cell.c_str() || *end != '\0' || errno == ERANGE)
        throw FormatError("not a number: '" + cell + "' (" + context + ")");
    return v;
}

long long parse_int(const std::string& cell, const std::string& context) {
    errno = 0;
    char* end = nullptr;
    const long long v = std::strtoll(cell.c_str(), &end, 10);
    if (end == cell.c_str() || *end != '\0' || errno == ERANGE)
        throw FormatError("not an integer: '" + cell + "' (" + context + ")");
    return v;
}

}  // namespace linex
