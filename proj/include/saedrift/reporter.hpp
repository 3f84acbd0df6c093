// Copyright 2026 The saedrift Authors
// SPDX-License-Identifier: Apache-2.0

// Table builders and renderers. Every cell is formatted once, as a string,
// so the CSV, JSON and markdown renderings carry identical values.
//
// Rounding is half-even. Percentages and ratios of counts are computed in
// exact integer arithmetic; real-valued cells round the exact binary value.

#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"
#include "saedrift/annotator.hpp"
#include "saedrift/bundle_io.hpp"
#include "saedrift/drift_metrics.hpp"
#include "saedrift/error.hpp"

namespace saedrift {

struct Table {
    std::string name;  // file stem
    std::string title;
    std::vector<std::string> columns;
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> notes;

    friend bool operator==(const Table&, const Table&) = default;
};

/// Fixed-point rendering with `decimals` digits, rounding the exact binary
/// value half-even.
inline std::string format_fixed(double x, int decimals) {
    if (std::isnan(x)) return "nan";
    if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, x, std::chars_format::fixed, decimals);
    if (res.ec != std::errc{}) throw Error(ErrorKind::internal, "format_fixed: value does not fit");
    std::string s(buf, res.ptr);
    if (s.front() == '-' && s.find_first_not_of("-0.") == std::string::npos) s.erase(0, 1);  // "-0.00"
    return s;
}

/// round_half_even(num / den) for non-negative integers.
inline std::uint64_t div_round_half_even(std::uint64_t num, std::uint64_t den) {
    const std::uint64_t q = num / den;
    const std::uint64_t r = num % den;
    if (2 * r > den || (2 * r == den && (q & 1))) return q + 1;
    return q;
}

/// Renders n hundredths as "x.yy".
inline std::string format_hundredths(std::uint64_t n) {
    const std::string frac = std::to_string(n % 100);
    return std::to_string(n / 100) + "." + (frac.size() == 1 ? "0" + frac : frac);
}

/// 100 * part / whole to 2 decimals, or "nan" when whole is 0.
inline std::string format_percent(std::uint64_t part, std::uint64_t whole) {
    if (whole == 0) return "nan";
    return format_hundredths(div_round_half_even(10000 * part, whole));
}

/// a / b to 2 decimals; "inf" for a/0 and "nan" for 0/0.
inline std::string format_ratio(std::uint64_t a, std::uint64_t b) {
    if (b == 0) return a == 0 ? "nan" : "inf";
    return format_hundredths(div_round_half_even(100 * a, b));
}

/// Percent shares of `counts` in hundredths. Each share is rounded half-even;
/// if the rounded shares miss 100.00 by more than 0.01, the largest-remainder
/// method is used instead so the column still partitions 100.
inline std::vector<std::uint64_t> percent_shares(std::span<const std::uint64_t> counts) {
    std::uint64_t total = 0;
    for (auto c : counts) total += c;
    std::vector<std::uint64_t> out(counts.size(), 0);
    if (total == 0) return out;
    std::uint64_t sum = 0;
    for (std::size_t i = 0; i < counts.size(); ++i) {
        out[i] = div_round_half_even(10000 * counts[i], total);
        sum += out[i];
    }
    if (sum + 1 >= 10000 && sum <= 10001) return out;
    std::vector<std::size_t> order(counts.size());
    std::uint64_t floors = 0;
    for (std::size_t i = 0; i < counts.size(); ++i) {
        out[i] = 10000 * counts[i] / total;
        floors += out[i];
        order[i] = i;
    }
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return 10000 * counts[a] % total > 10000 * counts[b] % total;
    });
    for (std::size_t k = 0; k < 10000 - floors; ++k) ++out[order[k]];
    return out;
}

// ---------------------------------------------------------------- rendering

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) {
        if (c == '"') q += '"';
        q += c;
    }
    return q + "\"";
}

inline std::string render_csv(const Table& t) {
    std::string out;
    auto line = [&](const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) out += ',';
            out += csv_field(cells[i]);
        }
        out += '\n';
    };
    line(t.columns);
    for (const auto& r : t.rows) line(r);
    return out;
}

inline json table_to_json(const Table& t) {
    json rows = json::array();
    for (const auto& r : t.rows) {
        json obj = json::object();
        for (std::size_t i = 0; i < t.columns.size(); ++i) obj[t.columns[i]] = r.at(i);
        rows.push_back(std::move(obj));
    }
    return {{"name", t.name}, {"title", t.title}, {"columns", t.columns}, {"rows", std::move(rows)}, {"notes", t.notes}};
}

inline std::string render_json(const Table& t) { return table_to_json(t).dump(2) + "\n"; }

inline std::string render_markdown(const Table& t) {
    auto cell = [](std::string s) {
        std::string out;
        for (char c : s) {
            if (c == '|') out += '\\';
            out += c;
        }
        return out;
    };
    std::string out = "### " + t.title + "\n\n|";
    for (const auto& c : t.columns) out += " " + cell(c) + " |";
    out += "\n|";
    for (std::size_t i = 0; i < t.columns.size(); ++i) out += "---|";
    out += '\n';
    for (const auto& r : t.rows) {
        out += '|';
        for (const auto& c : r) out += " " + cell(c) + " |";
        out += '\n';
    }
    for (const auto& n : t.notes) out += "\n> " + n + "\n";
    return out;
}

// ---------------------------------------------------------------- builders

struct TrajectoryPoint {
    std::string task;
    SimilarityPoint point;
};

/// One row per (task, step) with a column per layer, values at 3 decimals.
/// All points must share the same width (or all have none).
inline Table trajectory_table(std::span<const TrajectoryPoint> points, std::string name, std::string title) {
    std::set<int> layers;
    std::map<std::pair<std::string, std::int64_t>, std::map<int, double>> cells;
    for (const auto& tp : points) {
        if (tp.point.width != points.front().point.width) {
            throw Error(ErrorKind::invariant, "trajectory_table: points mix SAE widths");
        }
        layers.insert(tp.point.layer);
        auto& row = cells[{tp.task, tp.point.step}];
        if (!row.emplace(tp.point.layer, tp.point.value).second) {
            throw Error(ErrorKind::invariant, "trajectory_table: duplicate row (task " + tp.task + ", step " +
                                                  std::to_string(tp.point.step) + ", layer " +
                                                  std::to_string(tp.point.layer) + ")");
        }
    }
    Table t{std::move(name), std::move(title), {"task", "step"}, {}, {}};
    for (int l : layers) t.columns.push_back("layer" + std::to_string(l));
    for (const auto& [key, row] : cells) {
        std::vector<std::string> r = {key.first, std::to_string(key.second)};
        for (int l : layers) {
            const auto it = row.find(l);
            r.push_back(it == row.end() ? "" : format_fixed(it->second, 3));
        }
        t.rows.push_back(std::move(r));
    }
    return t;
}

/// Latent trajectories split into one table per SAE width, ascending width.
inline std::vector<Table> latent_trajectory_tables(std::span<const TrajectoryPoint> points) {
    std::map<std::size_t, std::vector<TrajectoryPoint>> by_width;
    for (const auto& p : points) {
        if (!p.point.width) throw Error(ErrorKind::invariant, "latent trajectory point without width");
        by_width[*p.point.width].push_back(p);
    }
    std::vector<Table> out;
    for (const auto& [w, pts] : by_width) {
        out.push_back(trajectory_table(pts, "latent_cossim_w" + std::to_string(w),
                                       "SAE latent cosine similarity, width " + std::to_string(w)));
    }
    return out;
}

struct OutlierSummary {
    std::string dataset;
    int layer = 0;
    std::string sae_config;
    std::size_t n_directions = 0;
    double max_variance_fraction = 0.0;
    bool fallback = false;
};

inline Table outlier_table(std::vector<OutlierSummary> rows) {
    std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
        return std::tie(a.dataset, a.layer) < std::tie(b.dataset, b.layer);
    });
    Table t{"outlier_directions",
            "Outlier drift directions per SAE config",
            {"dataset", "layer", "sae_config", "n_outlier_directions", "max_variance_pct", "fallback"},
            {},
            {}};
    bool any_fallback = false;
    for (const auto& r : rows) {
        t.rows.push_back({r.dataset, std::to_string(r.layer), r.sae_config, std::to_string(r.n_directions),
                          format_fixed(100.0 * r.max_variance_fraction, 2), r.fallback ? "yes" : "no"});
        any_fallback |= r.fallback;
    }
    if (any_fallback) t.notes.push_back("fallback = yes: no direction exceeded the z threshold; top directions by flip rate listed");
    return t;
}

/// One probed feature of one outlier direction, joined with its annotation.
/// `cluster` is empty for features without an explanation.
struct AnnotatedFeature {
    std::string experiment;
    int layer = 0;
    std::string sae_config;
    std::size_t direction = 0;
    std::uint32_t feature = 0;
    double cosine = 0.0;
    bool by_cosine = false;
    bool by_flip_freq = false;
    std::optional<Cluster> cluster;
};

inline constexpr const char* kUnexplained = "Unexplained";

namespace detail {

inline std::size_t label_rank(const std::optional<Cluster>& c) {
    return c ? static_cast<std::size_t>(*c) : kTaxonomy.size();
}

inline std::string label_name(const std::optional<Cluster>& c) {
    return c ? std::string(to_string(*c)) : std::string(kUnexplained);
}

using GroupKey = std::pair<std::string, int>;  // (experiment, layer)

}  // namespace detail

/// Share of flipped features per cluster within each (experiment, layer),
/// descending share, taxonomy order on ties.
inline Table cluster_distribution(std::span<const AnnotatedFeature> features) {
    std::map<detail::GroupKey, std::vector<std::uint64_t>> counts;
    for (const auto& f : features) {
        if (!f.by_flip_freq) continue;
        auto& c = counts[{f.experiment, f.layer}];
        c.resize(kTaxonomy.size() + 1, 0);
        ++c[detail::label_rank(f.cluster)];
    }
    Table t{"cluster_distribution",
            "Flipped features by semantic cluster",
            {"experiment", "layer", "cluster", "count", "flipped_pct"},
            {},
            {}};
    for (const auto& [key, c] : counts) {
        const auto shares = percent_shares(c);
        std::vector<std::size_t> order;
        for (std::size_t i = 0; i < c.size(); ++i) {
            if (c[i] > 0) order.push_back(i);
        }
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return c[a] > c[b]; });
        for (std::size_t i : order) {
            const std::optional<Cluster> label =
                i < kTaxonomy.size() ? std::optional<Cluster>(kTaxonomy[i]) : std::nullopt;
            t.rows.push_back({key.first, std::to_string(key.second), detail::label_name(label), std::to_string(c[i]),
                              format_hundredths(shares[i])});
        }
    }
    return t;
}

/// Features with |cosine| > cut per (experiment, layer) and cluster, with the
/// outlier directions they align with. Groups without any qualifying feature
/// get a single "(none)" row.
inline Table alignment_cluster_table(std::span<const AnnotatedFeature> features, double cut = 0.5) {
    struct Cell {
        std::uint64_t count = 0;
        std::set<std::size_t> directions;
    };
    std::map<detail::GroupKey, std::vector<Cell>> groups;
    for (const auto& f : features) {
        auto& g = groups[{f.experiment, f.layer}];
        g.resize(kTaxonomy.size() + 1);
        if (!(std::abs(f.cosine) > cut)) continue;
        auto& cell = g[detail::label_rank(f.cluster)];
        ++cell.count;
        cell.directions.insert(f.direction);
    }
    Table t{"alignment_clusters",
            "Decoder features aligned with outlier directions (|cos| > " + format_fixed(cut, 1) + ")",
            {"experiment", "layer", "cluster", "outlier_directions"},
            {},
            {}};
    for (const auto& [key, g] : groups) {
        std::vector<std::size_t> order;
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (g[i].count > 0) order.push_back(i);
        }
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return g[a].count > g[b].count; });
        if (order.empty()) {
            t.rows.push_back({key.first, std::to_string(key.second), "(none)", "[]"});
            continue;
        }
        for (std::size_t i : order) {
            const std::optional<Cluster> label =
                i < kTaxonomy.size() ? std::optional<Cluster>(kTaxonomy[i]) : std::nullopt;
            std::string dirs = "[";
            for (auto d : g[i].directions) dirs += (dirs.size() > 1 ? ", " : "") + std::to_string(d);
            t.rows.push_back({key.first, std::to_string(key.second),
                              detail::label_name(label) + " (" + std::to_string(g[i].count) + ")", dirs + "]"});
        }
    }
    return t;
}

struct LayerFlipCounts {
    std::string task;
    std::uint64_t shallow = 0;
    std::uint64_t deep = 0;
};

/// Number of flipped-feature entries at `layer` for `experiment`.
inline std::uint64_t count_flipped(std::span<const AnnotatedFeature> features, const std::string& experiment,
                                   int layer) {
    std::uint64_t n = 0;
    for (const auto& f : features) n += f.by_flip_freq && f.experiment == experiment && f.layer == layer;
    return n;
}

inline Table layer_ratio_table(std::vector<LayerFlipCounts> rows, int shallow_layer, int deep_layer) {
    std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.task < b.task; });
    const std::string ls = "layer" + std::to_string(shallow_layer);
    const std::string ld = "layer" + std::to_string(deep_layer);
    Table t{"layer_ratio",
            "Flipped features at layer " + std::to_string(shallow_layer) + " vs layer " + std::to_string(deep_layer),
            {"task", ls, ld, ls + "_over_" + ld},
            {},
            {}};
    for (const auto& r : rows) {
        t.rows.push_back(
            {r.task, std::to_string(r.shallow), std::to_string(r.deep), format_ratio(r.shallow, r.deep)});
        if (r.deep == 0) {
            const std::string msg = "task " + r.task + ": no flipped features at layer " + std::to_string(deep_layer) +
                                    "; ratio rendered " + t.rows.back().back();
            t.notes.push_back(msg);
            std::clog << "[report] warning: " << msg << '\n';
        }
    }
    return t;
}

struct WidthSweepCounts {
    std::string experiment;
    std::string sae_config;
    std::uint64_t total_flipped = 0;
    std::uint64_t collateral = 0;
};

/// Collateral share per SAE config. Rows are grouped by experiment and keep
/// their input order within it; configs with no flipped features are
/// suppressed and noted.
inline Table width_sweep_table(std::vector<WidthSweepCounts> rows) {
    std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.experiment < b.experiment; });
    Table t{"width_sweep",
            "Collateral share of flipped features by SAE config",
            {"experiment", "sae_config", "total_flipped", "collateral_count", "collateral_pct"},
            {},
            {}};
    for (const auto& r : rows) {
        if (r.total_flipped == 0) {
            t.notes.push_back(r.experiment + " " + r.sae_config + ": no flipped features, row suppressed");
            continue;
        }
        t.rows.push_back({r.experiment, r.sae_config, std::to_string(r.total_flipped), std::to_string(r.collateral),
                          format_percent(r.collateral, r.total_flipped)});
    }
    return t;
}

// ---------------------------------------------------------------- output

struct Series {
    std::string name;  // file stem
    json body;
};

/// Step-vs-value arrays per (task, layer[, width]) for plotting.
inline std::vector<Series> trajectory_series(std::span<const TrajectoryPoint> points, const std::string& kind) {
    std::map<std::tuple<std::string, int, std::size_t>, std::map<std::int64_t, double>> grouped;
    for (const auto& p : points) grouped[{p.task, p.point.layer, p.point.width.value_or(0)}][p.point.step] = p.point.value;
    std::vector<Series> out;
    for (const auto& [key, values] : grouped) {
        const auto& [task, layer, width] = key;
        json steps = json::array();
        json vals = json::array();
        for (const auto& [s, v] : values) {
            steps.push_back(s);
            vals.push_back(v);
        }
        std::string name = kind + "_" + task + "_layer" + std::to_string(layer);
        json body = {{"kind", kind}, {"task", task}, {"layer", layer}, {"steps", steps}, {"values", vals}};
        if (width) {
            name += "_w" + std::to_string(width);
            body["width"] = width;
        }
        out.push_back({std::move(name), std::move(body)});
    }
    return out;
}

/// Writes report/{tables/*.csv, tables/*.json, report.md, series/*.json}.
/// The directory is replaced so stale files from earlier runs never survive.
inline void write_report(const fs::path& dir, std::span<const Table> tables, std::span<const Series> series,
                         const std::string& heading = "saedrift report") {
    std::error_code ec;
    fs::remove_all(dir, ec);
    fs::create_directories(dir / "tables", ec);
    fs::create_directories(dir / "series", ec);
    if (ec) throw Error(ErrorKind::io, "cannot create " + dir.string() + ": " + ec.message());
    auto write = [](const fs::path& p, const std::string& text) {
        std::ofstream out(p, std::ios::binary);
        out << text;
        if (!out) throw Error(ErrorKind::io, "cannot write " + p.string());
    };
    std::set<std::string> names;
    std::string md = "# " + heading + "\n";
    for (const auto& t : tables) {
        if (!names.insert(t.name).second) throw Error(ErrorKind::invariant, "duplicate table name " + t.name);
        write(dir / "tables" / (t.name + ".csv"), render_csv(t));
        write(dir / "tables" / (t.name + ".json"), render_json(t));
        md += "\n" + render_markdown(t);
    }
    write(dir / "report.md", md);
    for (const auto& s : series) write(dir / "series" / (s.name + ".json"), s.body.dump(2) + "\n");
}

}  // namespace saedrift
