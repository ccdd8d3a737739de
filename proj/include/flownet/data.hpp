#pragma once

#include <array>
#include <charconv>
#include <fstream>
#include <iomanip>
#include <optional>
#include <string>

#include "flownet/tensor.hpp"

namespace flownet {

enum class DistanceMetric { euclidean, manhattan };

inline DistanceMetric distance_metric_from_string(const std::string& s) {
    if (s == "euclidean") return DistanceMetric::euclidean;
    if (s == "manhattan") return DistanceMetric::manhattan;
    throw std::invalid_argument("unknown distance metric '" + s + "'");
}

// One loaded spatio-temporal series: observations [T,N] plus node geometry.
// Exactly one of coordinates / distances is populated at load time; the
// other is derivable.
template <typename T>
struct SeriesDataset {
    Tensor<T> observations;  // [T,N]
    std::vector<std::string> node_ids;
    std::optional<Tensor<T>> coordinates;  // [N,2]
    std::optional<Tensor<T>> distances;    // [N,N]
    std::string resolution;
    std::string name;

    std::size_t steps() const { return observations.shape()[0]; }
    std::size_t nodes() const { return observations.shape()[1]; }
};

template <typename T>
struct NormStats {
    std::vector<T> mu;
    std::vector<T> sigma;  // floored at 1e-8
};

template <typename T>
struct WindowSet {
    Tensor<T> inputs;   // [B,N,T_in]
    Tensor<T> targets;  // [B,N,T_out]
    std::vector<std::size_t> origins;

    std::size_t count() const { return origins.size(); }
};

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> distance_matrix(const Tensor<T>& coords, DistanceMetric metric) {
    if (coords.rank() != 2 || coords.shape()[1] != 2)
        throw std::invalid_argument("distance_matrix: want [N,2] coordinates, got " +
                                    shape_str(coords.shape()));
    if (!coords.all_finite()) throw std::invalid_argument("distance_matrix: non-finite coordinate");
    const std::size_t N = coords.shape()[0];
    Tensor<T> out(Shape{N, N});
    const T* c = coords.data();
    T* o = out.data();
    for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            const T dx = c[i * 2] - c[j * 2];
            const T dy = c[i * 2 + 1] - c[j * 2 + 1];
            const T d = metric == DistanceMetric::euclidean
                            ? static_cast<T>(std::sqrt(static_cast<double>(dx * dx + dy * dy)))
                            : std::abs(dx) + std::abs(dy);
            o[i * N + j] = d;
            o[j * N + i] = d;
        }
    }
    return out;
}

// Thresholded Gaussian kernel: exp(-d^2/sigma^2) when d <= kappa, else 0.
template <typename T>
Tensor<T> gaussian_adjacency(const Tensor<T>& dist, T sigma, T kappa) {
    if (dist.rank() != 2 || dist.shape()[0] != dist.shape()[1])
        throw std::invalid_argument("gaussian_adjacency: want square matrix, got " + shape_str(dist.shape()));
    if (!(sigma > T(0))) throw std::invalid_argument("gaussian_adjacency: sigma must be positive");
    if (kappa < T(0)) throw std::invalid_argument("gaussian_adjacency: kappa must be nonnegative");
    Tensor<T> out(dist.shape());
    const T* d = dist.data();
    T* o = out.data();
    for (std::size_t i = 0; i < dist.size(); ++i)
        o[i] = d[i] <= kappa ? static_cast<T>(std::exp(-static_cast<double>(d[i] * d[i]) /
                                                       static_cast<double>(sigma * sigma)))
                             : T(0);
    return out;
}

// ---------------------------------------------------------------------------
// Normalization (per-node, population standard deviation)
// ---------------------------------------------------------------------------

template <typename T>
NormStats<T> zscore_fit(const Tensor<T>& data) {
    if (data.rank() != 2) throw std::invalid_argument("zscore_fit: want [T,N], got " + shape_str(data.shape()));
    const std::size_t Tn = data.shape()[0], N = data.shape()[1];
    if (Tn == 0) throw std::invalid_argument("zscore_fit: empty series");
    NormStats<T> s;
    s.mu.assign(N, T(0));
    s.sigma.assign(N, T(0));
    const T* p = data.data();
    for (std::size_t t = 0; t < Tn; ++t)
        for (std::size_t i = 0; i < N; ++i) s.mu[i] += p[t * N + i];
    for (auto& m : s.mu) m /= static_cast<T>(Tn);
    for (std::size_t t = 0; t < Tn; ++t)
        for (std::size_t i = 0; i < N; ++i) {
            const T d = p[t * N + i] - s.mu[i];
            s.sigma[i] += d * d;
        }
    for (auto& v : s.sigma) v = std::max(static_cast<T>(std::sqrt(static_cast<double>(v / static_cast<T>(Tn)))),
                                         T(1e-8));
    return s;
}

template <typename T>
Tensor<T> zscore_apply(const Tensor<T>& data, const NormStats<T>& stats) {
    if (data.rank() != 2 || data.shape()[1] != stats.mu.size())
        throw std::invalid_argument("zscore_apply: data " + shape_str(data.shape()) + " vs stats for " +
                                    std::to_string(stats.mu.size()) + " nodes");
    Tensor<T> out(data.shape());
    const std::size_t N = stats.mu.size();
    const T* p = data.data();
    T* o = out.data();
    for (std::size_t t = 0; t < data.shape()[0]; ++t)
        for (std::size_t i = 0; i < N; ++i) o[t * N + i] = (p[t * N + i] - stats.mu[i]) / stats.sigma[i];
    return out;
}

template <typename T>
Tensor<T> zscore_invert(const Tensor<T>& data, const NormStats<T>& stats) {
    if (data.rank() != 2 || data.shape()[1] != stats.mu.size())
        throw std::invalid_argument("zscore_invert: data " + shape_str(data.shape()) + " vs stats for " +
                                    std::to_string(stats.mu.size()) + " nodes");
    Tensor<T> out(data.shape());
    const std::size_t N = stats.mu.size();
    const T* p = data.data();
    T* o = out.data();
    for (std::size_t t = 0; t < data.shape()[0]; ++t)
        for (std::size_t i = 0; i < N; ++i) o[t * N + i] = p[t * N + i] * stats.sigma[i] + stats.mu[i];
    return out;
}

template <typename T>
std::pair<Tensor<T>, NormStats<T>> zscore_fit_apply(const Tensor<T>& train_slice) {
    auto stats = zscore_fit(train_slice);
    return {zscore_apply(train_slice, stats), stats};
}

// ---------------------------------------------------------------------------
// Windows and splits
// ---------------------------------------------------------------------------

template <typename T>
WindowSet<T> make_windows(const Tensor<T>& data, std::size_t t_in, std::size_t t_out, std::size_t stride) {
    if (data.rank() != 2) throw std::invalid_argument("make_windows: want [T,N], got " + shape_str(data.shape()));
    if (stride == 0) throw std::invalid_argument("make_windows: stride must be >= 1");
    if (t_in == 0 || t_out == 0) throw std::invalid_argument("make_windows: horizons must be >= 1");
    const std::size_t Tn = data.shape()[0], N = data.shape()[1];
    if (t_in + t_out > Tn)
        throw std::invalid_argument("make_windows: T_in + T_out = " + std::to_string(t_in + t_out) +
                                    " exceeds series length " + std::to_string(Tn));
    const std::size_t count = (Tn - t_in - t_out) / stride + 1;
    WindowSet<T> w;
    w.inputs = Tensor<T>(Shape{count, N, t_in});
    w.targets = Tensor<T>(Shape{count, N, t_out});
    w.origins.resize(count);
    const T* p = data.data();
    T* pi = w.inputs.data();
    T* pt = w.targets.data();
    for (std::size_t b = 0; b < count; ++b) {
        const std::size_t o = b * stride;
        w.origins[b] = o;
        for (std::size_t i = 0; i < N; ++i) {
            for (std::size_t t = 0; t < t_in; ++t) pi[(b * N + i) * t_in + t] = p[(o + t) * N + i];
            for (std::size_t t = 0; t < t_out; ++t) pt[(b * N + i) * t_out + t] = p[(o + t_in + t) * N + i];
        }
    }
    return w;
}

struct SplitSpec {
    std::optional<std::array<double, 3>> ratios;             // train/val/test
    std::optional<std::array<std::size_t, 2>> boundaries;    // [0,b0) [b0,b1) [b1,T)

    static SplitSpec from_ratios(double tr, double va, double te) {
        SplitSpec s;
        s.ratios = {tr, va, te};
        return s;
    }
    static SplitSpec from_boundaries(std::size_t b0, std::size_t b1) {
        SplitSpec s;
        s.boundaries = {b0, b1};
        return s;
    }
};

// Chronological, contiguous, non-overlapping split covering the full series.
template <typename T>
std::array<Tensor<T>, 3> split_series(const Tensor<T>& data, const SplitSpec& spec) {
    if (data.rank() != 2) throw std::invalid_argument("split_series: want [T,N], got " + shape_str(data.shape()));
    const std::size_t Tn = data.shape()[0], N = data.shape()[1];
    std::size_t b0 = 0, b1 = 0;
    if (spec.ratios) {
        const auto& r = *spec.ratios;
        const double sum = r[0] + r[1] + r[2];
        if (std::abs(sum - 1.0) > 1e-9)
            throw std::invalid_argument("split_series: ratios sum to " + std::to_string(sum) + ", expected 1");
        if (r[0] < 0 || r[1] < 0 || r[2] < 0) throw std::invalid_argument("split_series: negative ratio");
        b0 = static_cast<std::size_t>(std::floor(r[0] * static_cast<double>(Tn)));
        b1 = static_cast<std::size_t>(std::floor((r[0] + r[1]) * static_cast<double>(Tn)));
    } else if (spec.boundaries) {
        b0 = (*spec.boundaries)[0];
        b1 = (*spec.boundaries)[1];
    } else {
        throw std::invalid_argument("split_series: spec has neither ratios nor boundaries");
    }
    if (!(b0 <= b1 && b1 <= Tn))
        throw std::invalid_argument("split_series: boundaries (" + std::to_string(b0) + "," +
                                    std::to_string(b1) + ") out of order for T=" + std::to_string(Tn));
    const auto slice = [&](std::size_t lo, std::size_t hi) {
        Tensor<T> out(Shape{hi - lo, N});
        std::copy(data.data() + lo * N, data.data() + hi * N, out.data());
        return out;
    };
    return {slice(0, b0), slice(b0, b1), slice(b1, Tn)};
}

// ---------------------------------------------------------------------------
// CSV I/O
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (;;) {
        const std::size_t pos = line.find(',', start);
        if (pos == std::string::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    if (!out.empty() && !out.back().empty() && out.back().back() == '\r') out.back().pop_back();
    return out;
}

inline double parse_number(const std::string& cell, const std::string& file, std::size_t row,
                           std::size_t col) {
    const char* b = cell.data();
    const char* e = b + cell.size();
    while (b < e && (*b == ' ' || *b == '\t')) ++b;
    double v = 0;
    const auto res = std::from_chars(b, e, v);
    if (res.ec != std::errc() || res.ptr != e)
        throw std::runtime_error(file + ": row " + std::to_string(row) + ", column " + std::to_string(col) +
                                 ": not a number '" + cell + "'");
    return v;
}

}  // namespace detail

// Observations CSV: header of node ids, then one row per time step.
template <typename T>
std::pair<std::vector<std::string>, Tensor<T>> load_observations_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open observations file '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error(path + ": empty file");
    const auto ids = detail::split_csv_line(line);
    if (ids.empty() || ids[0].empty()) throw std::runtime_error(path + ": header row has no node ids");
    const std::size_t N = ids.size();
    std::vector<T> values;
    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty()) continue;
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != N)
            throw std::runtime_error(path + ": row " + std::to_string(row) + ": expected " +
                                     std::to_string(N) + " columns, got " + std::to_string(cells.size()));
        for (std::size_t c = 0; c < N; ++c) {
            const double v = detail::parse_number(cells[c], path, row, c + 1);
            if (std::isnan(v))
                throw std::runtime_error(path + ": row " + std::to_string(row) + ", column " +
                                         std::to_string(c + 1) + ": NaN observation");
            values.push_back(static_cast<T>(v));
        }
    }
    if (values.empty()) throw std::runtime_error(path + ": no data rows");
    const std::size_t Tn = values.size() / N;
    return {ids, Tensor<T>(Shape{Tn, N}, std::move(values))};
}

// Coordinates CSV: header `node_id,x,y`, one row per node.
template <typename T>
std::pair<std::vector<std::string>, Tensor<T>> load_coordinates_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open coordinates file '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error(path + ": empty file");
    std::vector<std::string> ids;
    std::vector<T> coords;
    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty()) continue;
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != 3)
            throw std::runtime_error(path + ": row " + std::to_string(row) + ": expected 3 columns, got " +
                                     std::to_string(cells.size()));
        ids.push_back(cells[0]);
        coords.push_back(static_cast<T>(detail::parse_number(cells[1], path, row, 2)));
        coords.push_back(static_cast<T>(detail::parse_number(cells[2], path, row, 3)));
    }
    if (ids.empty()) throw std::runtime_error(path + ": no coordinate rows");
    return {ids, Tensor<T>(Shape{ids.size(), 2}, std::move(coords))};
}

// Distance CSV: headerless N x N numeric matrix.
template <typename T>
Tensor<T> load_distance_csv(const std::string& path, std::size_t expected_nodes) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open distance file '" + path + "'");
    std::string line;
    std::vector<T> values;
    std::size_t row = 0;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty()) continue;
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != expected_nodes)
            throw std::runtime_error(path + ": row " + std::to_string(row) + ": expected " +
                                     std::to_string(expected_nodes) + " columns, got " +
                                     std::to_string(cells.size()));
        for (std::size_t c = 0; c < cells.size(); ++c)
            values.push_back(static_cast<T>(detail::parse_number(cells[c], path, row, c + 1)));
    }
    if (values.size() != expected_nodes * expected_nodes)
        throw std::runtime_error(path + ": expected " + std::to_string(expected_nodes) + " rows, got " +
                                 std::to_string(values.size() / std::max<std::size_t>(expected_nodes, 1)));
    Tensor<T> d(Shape{expected_nodes, expected_nodes}, std::move(values));
    for (std::size_t i = 0; i < expected_nodes; ++i) {
        if (d.data()[i * expected_nodes + i] != T(0))
            throw std::runtime_error(path + ": row " + std::to_string(i + 1) + ": nonzero diagonal entry");
        for (std::size_t j = 0; j < expected_nodes; ++j)
            if (d.data()[i * expected_nodes + j] < T(0))
                throw std::runtime_error(path + ": row " + std::to_string(i + 1) + ", column " +
                                         std::to_string(j + 1) + ": negative distance");
    }
    return d;
}

enum class GeometryKind { coords, distances };

inline GeometryKind geometry_kind_from_string(const std::string& s) {
    if (s == "coords") return GeometryKind::coords;
    if (s == "distances") return GeometryKind::distances;
    throw std::invalid_argument("unknown geometry kind '" + s + "'");
}

template <typename T>
SeriesDataset<T> load_dataset(const std::string& observations_path, const std::string& geometry_path,
                              GeometryKind kind) {
    SeriesDataset<T> ds;
    auto [ids, obs] = load_observations_csv<T>(observations_path);
    ds.node_ids = std::move(ids);
    ds.observations = std::move(obs);
    ds.name = observations_path;
    const std::size_t N = ds.nodes();
    if (kind == GeometryKind::coords) {
        auto [cids, coords] = load_coordinates_csv<T>(geometry_path);
        if (cids.size() != N)
            throw std::runtime_error(geometry_path + ": " + std::to_string(cids.size()) +
                                     " coordinate rows for " + std::to_string(N) + " observation columns");
        for (std::size_t i = 0; i < N; ++i)
            if (cids[i] != ds.node_ids[i])
                throw std::runtime_error(geometry_path + ": row " + std::to_string(i + 2) + ": node id '" +
                                         cids[i] + "' does not match observations column '" +
                                         ds.node_ids[i] + "'");
        ds.coordinates = std::move(coords);
    } else {
        ds.distances = load_distance_csv<T>(geometry_path, N);
    }
    return ds;
}

// The dataset's pairwise distances, deriving them from coordinates if needed.
template <typename T>
Tensor<T> dataset_distances(const SeriesDataset<T>& ds, DistanceMetric metric) {
    if (ds.distances) return *ds.distances;
    if (ds.coordinates) return distance_matrix(*ds.coordinates, metric);
    throw std::runtime_error("dataset has neither distances nor coordinates");
}

template <typename T>
void write_observations_csv(const std::string& path, const std::vector<std::string>& node_ids,
                            const Tensor<T>& obs) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    out << std::setprecision(std::numeric_limits<T>::max_digits10);
    for (std::size_t i = 0; i < node_ids.size(); ++i) out << (i ? "," : "") << node_ids[i];
    out << '\n';
    const std::size_t Tn = obs.shape()[0], N = obs.shape()[1];
    for (std::size_t t = 0; t < Tn; ++t) {
        for (std::size_t i = 0; i < N; ++i) out << (i ? "," : "") << obs.data()[t * N + i];
        out << '\n';
    }
}

template <typename T>
void write_coordinates_csv(const std::string& path, const std::vector<std::string>& node_ids,
                           const Tensor<T>& coords) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    out << std::setprecision(std::numeric_limits<T>::max_digits10);
    out << "node_id,x,y\n";
    for (std::size_t i = 0; i < node_ids.size(); ++i)
        out << node_ids[i] << ',' << coords.data()[i * 2] << ',' << coords.data()[i * 2 + 1] << '\n';
}

template <typename T>
void write_matrix_csv(const std::string& path, const Tensor<T>& m) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    out << std::setprecision(std::numeric_limits<T>::max_digits10);
    const std::size_t rows = m.shape()[0], cols = m.shape()[1];
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) out << (c ? "," : "") << m.data()[r * cols + c];
        out << '\n';
    }
}

}  // namespace flownet
