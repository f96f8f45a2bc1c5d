#include "flmm/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace flmm {

namespace {

std::vector<std::string> splitCsvLine(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t");
    return s.substr(a, b - a + 1);
}

double parseCell(const std::string& cell, long row, const std::string& col) {
    const std::string v = trim(cell);
    if (v.empty())
        throw ParseError("empty cell in column '" + col + "' at row " + std::to_string(row));
    const char* begin = v.data();
    const char* end = begin + v.size();
    double value = 0.0;
    auto [ptr, ec] = std::from_chars(begin, end, value);
    if (ec != std::errc() || ptr != end)
        throw ParseError("cannot parse '" + v + "' as a number in column '" + col + "' at row " +
                         std::to_string(row));
    return value;
}

} // namespace

LongitudinalDataset readDatasetCsv(std::istream& in, const std::string& sourceName) {
    std::string line;
    long row = 0;
    // skip leading comment lines
    while (std::getline(in, line)) {
        ++row;
        if (!line.empty() && line[0] == '#') continue;
        break;
    }
    if (line.empty() && in.eof()) throw SchemaError(sourceName + ": empty file");

    const auto header = splitCsvLine(line);
    std::map<std::string, int> colIndex;
    for (size_t i = 0; i < header.size(); ++i) colIndex[trim(header[i])] = static_cast<int>(i);

    for (const char* required : {"subject", "t", "y"})
        if (!colIndex.count(required))
            throw SchemaError(sourceName + ": missing required column '" + std::string(required) +
                              "'");

    auto contiguous = [&](const std::string& prefix) {
        std::vector<int> cols;
        for (int k = 1;; ++k) {
            auto it = colIndex.find(prefix + std::to_string(k));
            if (it == colIndex.end()) break;
            cols.push_back(it->second);
        }
        return cols;
    };
    const auto xCols = contiguous("x");
    const auto zCols = contiguous("z");
    if (xCols.empty()) throw SchemaError(sourceName + ": needs at least one covariate column x1");
    if (zCols.empty()) throw SchemaError(sourceName + ": needs at least one covariate column z1");

    const int p = static_cast<int>(xCols.size());
    const int q = static_cast<int>(zCols.size());
    const int subjectCol = colIndex["subject"];
    const int tCol = colIndex["t"];
    const int yCol = colIndex["y"];

    struct Row {
        double t, y;
        std::vector<double> x, z;
    };
    std::vector<std::string> subjectOrder;
    std::map<std::string, std::vector<Row>> bySubject;

    while (std::getline(in, line)) {
        ++row;
        if (line.empty() || line[0] == '#') continue;
        const auto cells = splitCsvLine(line);
        if (cells.size() != header.size())
            throw ParseError(sourceName + ": row " + std::to_string(row) + " has " +
                             std::to_string(cells.size()) + " cells, header has " +
                             std::to_string(header.size()));
        Row r;
        r.t = parseCell(cells[tCol], row, "t");
        if (!(r.t >= 0.0 && r.t <= 1.0))
            throw DomainError(sourceName + ": t=" + std::to_string(r.t) +
                              " outside [0,1] at row " + std::to_string(row));
        r.y = parseCell(cells[yCol], row, "y");
        for (int k = 0; k < p; ++k)
            r.x.push_back(parseCell(cells[xCols[k]], row, "x" + std::to_string(k + 1)));
        for (int k = 0; k < q; ++k)
            r.z.push_back(parseCell(cells[zCols[k]], row, "z" + std::to_string(k + 1)));

        const std::string id = trim(cells[subjectCol]);
        if (!bySubject.count(id)) subjectOrder.push_back(id);
        bySubject[id].push_back(std::move(r));
    }
    if (subjectOrder.empty()) throw SchemaError(sourceName + ": no data rows");

    LongitudinalDataset data;
    data.p = p;
    data.q = q;
    for (const auto& id : subjectOrder) {
        auto& rows = bySubject[id];
        std::vector<int> idx(rows.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(),
                         [&](int a, int b) { return rows[a].t < rows[b].t; });
        SubjectData subj;
        subj.id = id;
        const int m = static_cast<int>(rows.size());
        subj.times.resize(m);
        subj.y.resize(m);
        subj.x.resize(m, p);
        subj.z.resize(m, q);
        for (int j = 0; j < m; ++j) {
            const Row& r = rows[idx[j]];
            subj.times[j] = r.t;
            subj.y[j] = r.y;
            for (int k = 0; k < p; ++k) subj.x(j, k) = r.x[k];
            for (int k = 0; k < q; ++k) subj.z(j, k) = r.z[k];
        }
        data.subjects.push_back(std::move(subj));
    }
    return data;
}

LongitudinalDataset loadDataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw SchemaError("cannot open dataset file: " + path);
    return readDatasetCsv(in, path);
}

void writeDatasetCsv(const LongitudinalDataset& data, std::ostream& out) {
    out << "subject,t,y";
    for (int k = 1; k <= data.p; ++k) out << ",x" << k;
    for (int k = 1; k <= data.q; ++k) out << ",z" << k;
    out << "\n";
    char buf[64];
    auto num = [&](double v) {
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        return std::string(buf);
    };
    for (const auto& subj : data.subjects) {
        for (int j = 0; j < subj.times.size(); ++j) {
            out << subj.id << ',' << num(subj.times[j]) << ',' << num(subj.y[j]);
            for (int k = 0; k < data.p; ++k) out << ',' << num(subj.x(j, k));
            for (int k = 0; k < data.q; ++k) out << ',' << num(subj.z(j, k));
            out << "\n";
        }
    }
}

void saveDataset(const LongitudinalDataset& data, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw SchemaError("cannot open output file: " + path);
    writeDatasetCsv(data, out);
}

} // namespace flmm
