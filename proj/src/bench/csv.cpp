#include "pitpo/csv.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <fmt/core.h>

namespace pitpo::csv {

namespace {

std::string trim(std::string s)
{
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos) {
        return {};
    }
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

std::vector<std::string> split(const std::string& line)
{
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
        out.push_back(trim(cell));
    }
    if (!line.empty() && line.back() == ',') {
        out.emplace_back();
    }
    return out;
}

}  // namespace

bool Table::has(const std::string& column) const
{
    return std::find(header.begin(), header.end(), column) != header.end();
}

std::size_t Table::index(const std::string& column) const
{
    const auto it = std::find(header.begin(), header.end(), column);
    if (it == header.end()) {
        throw std::invalid_argument(fmt::format("missing column '{}'", column));
    }
    return static_cast<std::size_t>(it - header.begin());
}

Table read(const std::string& path)
{
    std::ifstream in(path);
    if (!in) {
        throw std::invalid_argument(fmt::format("cannot open '{}'", path));
    }
    Table t;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) {
            continue;
        }
        if (t.header.empty()) {
            t.header = split(trim(line));
            continue;
        }
        const auto cells = split(trim(line));
        if (cells.size() != t.header.size()) {
            throw std::invalid_argument(
                fmt::format("{}:{}: expected {} cells, found {}", path, lineno, t.header.size(), cells.size()));
        }
        std::vector<double> row(cells.size());
        for (std::size_t c = 0; c < cells.size(); ++c) {
            const auto& s = cells[c];
            const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), row[c]);
            if (ec != std::errc{} || ptr != s.data() + s.size()) {
                throw std::invalid_argument(
                    fmt::format("{}:{}: non-numeric cell '{}' in column '{}'", path, lineno, s, t.header[c]));
            }
        }
        t.rows.push_back(std::move(row));
    }
    if (t.header.empty()) {
        throw std::invalid_argument(fmt::format("'{}' is empty", path));
    }
    return t;
}

}  // namespace pitpo::csv
