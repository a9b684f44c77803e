#pragma once

#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "errors.hpp"
#include "linalg.hpp"
#include "rng.hpp"

namespace fedsim {

/// Labeled examples with dense features.
///
/// Labels are -1/+1 for binary tasks and 0..classes-1 for multiclass tasks.
struct Dataset {
    std::vector<Vec> features;
    std::vector<int> labels;
    std::size_t dim = 0;
    std::size_t classes = 2;

    std::size_t size() const { return features.size(); }
};

inline double parse_double_token(std::string_view tok, std::size_t line, std::size_t col) {
    std::string buf(tok);
    char* end = nullptr;
    double v = std::strtod(buf.c_str(), &end);
    if (end != buf.c_str() + buf.size() || buf.empty())
        throw MalformedLine("line " + std::to_string(line) + ", col " + std::to_string(col) +
                            ": expected a number, got '" + buf + "'");
    return v;
}

/// Parse LibSVM text: `label idx:val idx:val ...` with 1-based indices.
///
/// `#` starts a comment to end of line; blank lines are ignored. Labels must
/// be literal +1/-1 (no 0 -> -1 coercion). Indices may appear out of order;
/// duplicates are an error. Omitted indices densify to zero. The feature
/// dimension is the maximum index seen unless `dim_override` is given.
inline Dataset parse_libsvm(std::string_view text, std::size_t dim_override = 0) {
    Dataset ds;
    std::size_t max_index = 0;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    std::vector<std::vector<std::pair<std::size_t, double>>> sparse_rows;

    while (pos <= text.size()) {
        std::size_t eol = text.find('\n', pos);
        if (eol == std::string_view::npos) eol = text.size();
        std::string_view line = text.substr(pos, eol - pos);
        ++line_no;
        std::size_t line_start = pos;
        pos = eol + 1;
        if (eol == text.size() && line.empty() && line_no > 1) break;

        std::size_t hash = line.find('#');
        if (hash != std::string_view::npos) line = line.substr(0, hash);
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);

        // Tokenize, remembering the 1-based column of each token.
        std::vector<std::pair<std::string_view, std::size_t>> tokens;
        std::size_t i = 0;
        while (i < line.size()) {
            while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
            std::size_t start = i;
            while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
            if (i > start) tokens.emplace_back(line.substr(start, i - start), start + 1);
        }
        if (tokens.empty()) continue;

        std::string_view lab = tokens[0].first;
        int label;
        if (lab == "+1" || lab == "1")
            label = 1;
        else if (lab == "-1")
            label = -1;
        else
            throw NonBinaryLabel("line " + std::to_string(line_no) + ": label '" +
                                 std::string(lab) + "' is not +1/-1");

        std::vector<std::pair<std::size_t, double>> row;
        std::set<std::size_t> seen;
        for (std::size_t t = 1; t < tokens.size(); ++t) {
            std::string_view tok = tokens[t].first;
            std::size_t col = tokens[t].second;
            std::size_t colon = tok.find(':');
            if (colon == std::string_view::npos)
                throw MalformedLine("line " + std::to_string(line_no) + ", col " +
                                    std::to_string(col) + ": expected idx:val, got '" +
                                    std::string(tok) + "'");
            std::string_view idx_s = tok.substr(0, colon);
            std::size_t idx = 0;
            for (char c : idx_s) {
                if (!std::isdigit(static_cast<unsigned char>(c)))
                    throw MalformedLine("line " + std::to_string(line_no) + ", col " +
                                        std::to_string(col) + ": bad feature index '" +
                                        std::string(idx_s) + "'");
                idx = idx * 10 + static_cast<std::size_t>(c - '0');
            }
            if (idx_s.empty() || idx == 0)
                throw MalformedLine("line " + std::to_string(line_no) + ", col " +
                                    std::to_string(col) + ": feature indices are 1-based");
            if (!seen.insert(idx).second)
                throw MalformedLine("line " + std::to_string(line_no) + ", col " +
                                    std::to_string(col) + ": duplicate feature index " +
                                    std::to_string(idx));
            if (dim_override > 0 && idx > dim_override)
                throw MalformedLine("line " + std::to_string(line_no) + ", col " +
                                    std::to_string(col) + ": index " + std::to_string(idx) +
                                    " exceeds declared dimension " + std::to_string(dim_override));
            double val = parse_double_token(tok.substr(colon + 1), line_no,
                                            col + colon + 1);
            row.emplace_back(idx, val);
            if (idx > max_index) max_index = idx;
        }
        ds.labels.push_back(label);
        sparse_rows.push_back(std::move(row));
        (void)line_start;
    }

    ds.dim = dim_override > 0 ? dim_override : max_index;
    ds.classes = 2;
    ds.features.reserve(sparse_rows.size());
    for (const auto& row : sparse_rows) {
        Vec x(ds.dim, 0.0);
        for (const auto& [idx, val] : row) x[idx - 1] = val;
        ds.features.push_back(std::move(x));
    }
    return ds;
}

inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

/// Re-emit a binary dataset in LibSVM text form (zero features omitted).
inline std::string serialize_libsvm(const Dataset& ds) {
    std::string out;
    for (std::size_t s = 0; s < ds.size(); ++s) {
        out += ds.labels[s] > 0 ? "+1" : "-1";
        const Vec& x = ds.features[s];
        for (std::size_t j = 0; j < x.size(); ++j) {
            if (x[j] != 0.0) {
                out += ' ';
                out += std::to_string(j + 1);
                out += ':';
                out += format_double(x[j]);
            }
        }
        out += '\n';
    }
    return out;
}

/// Two Gaussian clusters at +-separation * u for a random unit direction u,
/// labels +1/-1 by cluster, assigned alternately so counts differ by at most
/// one. Deterministic in the seed.
inline Dataset synth_logistic(std::size_t d, std::size_t n, double separation,
                              std::uint64_t seed) {
    Dataset ds;
    ds.dim = d;
    ds.classes = 2;
    Rng rng(seed, {0xda7a});
    Vec u(d);
    for (double& x : u) x = rng.normal();
    double nu = norm2(u);
    if (nu == 0.0) u[0] = 1.0, nu = 1.0;
    for (double& x : u) x /= nu;
    for (std::size_t i = 0; i < n; ++i) {
        int sign = (i % 2 == 0) ? 1 : -1;
        Vec x(d);
        for (std::size_t j = 0; j < d; ++j) x[j] = sign * separation * u[j] + rng.normal();
        ds.features.push_back(std::move(x));
        ds.labels.push_back(sign);
    }
    return ds;
}

/// One Gaussian cluster per class at separation * u_c, class labels
/// 0..classes-1 assigned round-robin. Deterministic in the seed.
inline Dataset synth_blobs(std::size_t d, std::size_t n, std::size_t classes, double separation,
                           std::uint64_t seed) {
    Dataset ds;
    ds.dim = d;
    ds.classes = classes;
    Rng rng(seed, {0xda7a, 0xb10b});
    std::vector<Vec> centers(classes, Vec(d));
    for (Vec& u : centers) {
        for (double& x : u) x = rng.normal();
        double nu = norm2(u);
        if (nu == 0.0) u[0] = 1.0, nu = 1.0;
        for (double& x : u) x = separation * x / nu;
    }
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t c = i % classes;
        Vec x(d);
        for (std::size_t j = 0; j < d; ++j) x[j] = centers[c][j] + rng.normal();
        ds.features.push_back(std::move(x));
        ds.labels.push_back(static_cast<int>(c));
    }
    return ds;
}

}  // namespace fedsim
