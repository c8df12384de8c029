#pragma once

#include <map>
#include <string>
#include <vector>

namespace pitpo::csv {

struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<double>> rows;

    [[nodiscard]] bool has(const std::string& column) const;
    [[nodiscard]] std::size_t index(const std::string& column) const;  // throws if missing
};

// Numeric CSV with a header row. Blank lines are skipped; any non-numeric
// cell is an error reporting line and column.
Table read(const std::string& path);

}  // namespace pitpo::csv
