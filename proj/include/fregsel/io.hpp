#pragma once

#include <Eigen/Dense>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fregsel/grid.hpp"
#include "fregsel/simulate.hpp"

namespace fregsel {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr int kSchemaVersion = 1;

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

/// Rows = samples, columns = grid points, no header.
inline void write_matrix_csv(const fs::path& path, const Eigen::MatrixXd& M) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    for (Eigen::Index i = 0; i < M.rows(); ++i) {
        for (Eigen::Index j = 0; j < M.cols(); ++j) {
            if (j) out << ',';
            out << format_double(M(i, j));
        }
        out << '\n';
    }
    if (!out) throw IoError("write failed: " + path.string());
}

inline Eigen::MatrixXd read_matrix_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open: " + path.string());
    std::vector<std::vector<double>> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<double> row;
        const char* ptr = line.c_str();
        char* end = nullptr;
        while (*ptr) {
            const double v = std::strtod(ptr, &end);
            if (end == ptr) throw IoError("malformed number in " + path.string());
            row.push_back(v);
            ptr = end;
            while (*ptr == ',' || *ptr == ' ' || *ptr == '\t' || *ptr == '\r') ++ptr;
        }
        if (!rows.empty() && row.size() != rows.front().size())
            throw IoError("ragged csv rows in " + path.string());
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw IoError("empty csv: " + path.string());
    Eigen::MatrixXd M(static_cast<Eigen::Index>(rows.size()),
                      static_cast<Eigen::Index>(rows.front().size()));
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < rows[i].size(); ++j)
            M(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    return M;
}

inline void write_json_file(const fs::path& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out << j.dump(2) << '\n';
}

inline json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open: " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw IoError("invalid json in " + path.string() + ": " + e.what());
    }
    return j;
}

/// Curve dataset as stored on disk: a response matrix plus p feature matrices
/// on a shared uniform grid.
struct Dataset {
    Eigen::MatrixXd response;               // n x m, or n x 1 for scalar responses
    std::vector<Eigen::MatrixXd> features;  // each n x m
    std::vector<std::string> feature_names;
    Grid grid;
    bool scalar_response = false;

    int n() const { return static_cast<int>(response.rows()); }
    int p() const { return static_cast<int>(features.size()); }

    CurveSet response_curves() const {
        if (scalar_response) throw ValidationError("scalar response is not a curve set");
        return CurveSet(response, grid);
    }
    std::vector<CurveSet> feature_curves() const {
        std::vector<CurveSet> out;
        out.reserve(features.size());
        for (const auto& f : features) out.emplace_back(f, grid);
        return out;
    }
};

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "packed binary format assumes a little-endian host");

inline void write_doubles(std::ofstream& out, const Eigen::MatrixXd& M) {
    // row-major on disk
    for (Eigen::Index i = 0; i < M.rows(); ++i)
        for (Eigen::Index j = 0; j < M.cols(); ++j) {
            const double v = M(i, j);
            out.write(reinterpret_cast<const char*>(&v), sizeof(double));
        }
}

inline Eigen::MatrixXd read_doubles(std::ifstream& in, Eigen::Index rows, Eigen::Index cols,
                                    const std::string& context) {
    Eigen::MatrixXd M(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) {
            double v;
            in.read(reinterpret_cast<char*>(&v), sizeof(double));
            if (!in) throw IoError("truncated binary data: " + context);
            M(i, j) = v;
        }
    return M;
}

inline void require_keys(const json& j, const std::vector<std::string>& required,
                         const std::vector<std::string>& optional, const std::string& what) {
    for (const auto& key : required)
        if (!j.contains(key)) throw IoError(what + " misses key '" + key + "'");
    for (const auto& item : j.items()) {
        const auto& key = item.key();
        if (std::find(required.begin(), required.end(), key) == required.end() &&
            std::find(optional.begin(), optional.end(), key) == optional.end())
            throw IoError(what + " has unknown key '" + key + "'");
    }
}

}  // namespace detail

/// Writes manifest.json plus either per-matrix CSV files or one packed
/// little-endian float64 blob (response first, then features, row-major).
inline void write_dataset(const fs::path& dir, const Dataset& data,
                          const std::string& format = "csv") {
    fs::create_directories(dir);
    json manifest;
    manifest["schema_version"] = kSchemaVersion;
    manifest["n"] = data.n();
    manifest["m"] = data.grid.size();
    manifest["p"] = data.p();
    manifest["grid_start"] = data.grid.start();
    manifest["grid_end"] = data.grid.end();
    manifest["feature_names"] = data.feature_names;
    manifest["response_kind"] = data.scalar_response ? "scalar" : "curve";
    manifest["format"] = format;
    if (format == "csv") {
        manifest["response_file"] = "response.csv";
        write_matrix_csv(dir / "response.csv", data.response);
        fs::create_directories(dir / "features");
        std::vector<std::string> files;
        for (int j = 0; j < data.p(); ++j) {
            const std::string rel = "features/" + data.feature_names[j] + ".csv";
            write_matrix_csv(dir / rel, data.features[j]);
            files.push_back(rel);
        }
        manifest["feature_files"] = files;
    } else if (format == "binary") {
        manifest["data_file"] = "data.bin";
        std::ofstream out(dir / "data.bin", std::ios::binary);
        if (!out) throw IoError("cannot open for writing: " + (dir / "data.bin").string());
        detail::write_doubles(out, data.response);
        for (const auto& f : data.features) detail::write_doubles(out, f);
        if (!out) throw IoError("write failed: " + (dir / "data.bin").string());
    } else {
        throw ValidationError("unknown dataset format: " + format);
    }
    write_json_file(dir / "manifest.json", manifest);
}

inline Dataset read_dataset(const fs::path& manifest_path) {
    const fs::path dir = manifest_path.parent_path();
    const json manifest = read_json_file(manifest_path);
    detail::require_keys(manifest,
                         {"schema_version", "n", "m", "p", "grid_start", "grid_end",
                          "feature_names", "format", "response_kind"},
                         {"response_file", "feature_files", "data_file"}, "manifest");
    Dataset data;
    const int n = manifest.at("n").get<int>();
    const int m = manifest.at("m").get<int>();
    const int p = manifest.at("p").get<int>();
    data.grid = Grid::uniform(manifest.at("grid_start").get<double>(),
                              manifest.at("grid_end").get<double>(), m);
    data.feature_names = manifest.at("feature_names").get<std::vector<std::string>>();
    if (static_cast<int>(data.feature_names.size()) != p)
        throw IoError("manifest feature_names length differs from p");
    data.scalar_response = manifest.at("response_kind").get<std::string>() == "scalar";
    const int resp_cols = data.scalar_response ? 1 : m;
    const std::string format = manifest.at("format").get<std::string>();
    if (format == "csv") {
        data.response = read_matrix_csv(dir / manifest.at("response_file").get<std::string>());
        for (const auto& rel : manifest.at("feature_files").get<std::vector<std::string>>())
            data.features.push_back(read_matrix_csv(dir / rel));
    } else if (format == "binary") {
        std::ifstream in(dir / manifest.at("data_file").get<std::string>(), std::ios::binary);
        if (!in) throw IoError("cannot open: " + (dir / "data.bin").string());
        data.response = detail::read_doubles(in, n, resp_cols, "response");
        for (int j = 0; j < p; ++j)
            data.features.push_back(detail::read_doubles(in, n, m, data.feature_names[j]));
    } else {
        throw IoError("unknown dataset format: " + format);
    }
    if (data.response.rows() != n || data.response.cols() != resp_cols)
        throw IoError("response shape differs from manifest");
    for (const auto& f : data.features)
        if (f.rows() != n || f.cols() != m) throw IoError("feature shape differs from manifest");
    return data;
}

/// Ground truth of a simulated scenario: active set, surfaces and noise level.
inline void write_truth(const fs::path& dir, const GroundTruth& truth,
                        const std::vector<std::string>& feature_names, Regime regime,
                        std::uint64_t seed) {
    fs::create_directories(dir / "surfaces");
    json j;
    j["schema_version"] = kSchemaVersion;
    j["active"] = truth.active;
    j["eta2_eps"] = truth.eta2_eps;
    j["snr"] = truth.snr;
    j["regime"] = regime == Regime::easy ? "easy" : "difficult";
    j["seed"] = seed;
    std::vector<std::string> files;
    for (std::size_t i = 0; i < truth.active.size(); ++i) {
        const std::string rel = "surfaces/B_" + feature_names[truth.active[i]] + ".csv";
        write_matrix_csv(dir / rel, truth.surfaces[i].values);
        files.push_back(rel);
    }
    j["surface_files"] = files;
    write_json_file(dir / "truth.json", j);
}

struct TruthFiles {
    std::vector<int> active;
    std::vector<Eigen::MatrixXd> surfaces;
    double eta2_eps = 0.0;
    double snr = 0.0;
};

inline TruthFiles read_truth(const fs::path& dir) {
    const json j = read_json_file(dir / "truth.json");
    detail::require_keys(
        j, {"schema_version", "active", "eta2_eps", "snr", "regime", "seed", "surface_files"}, {},
        "truth.json");
    TruthFiles t;
    t.active = j.at("active").get<std::vector<int>>();
    t.eta2_eps = j.at("eta2_eps").get<double>();
    t.snr = j.at("snr").get<double>();
    for (const auto& rel : j.at("surface_files").get<std::vector<std::string>>())
        t.surfaces.push_back(read_matrix_csv(dir / rel));
    return t;
}

/// Fitted model on the raw data scale, as written next to path.json.
struct ModelFiles {
    std::string mode;  // "function-on-function" or "scalar"
    std::vector<int> selected;
    std::vector<std::string> selected_names;
    std::vector<Eigen::MatrixXd> coefficients;  // m x m surfaces, or m x 1 curves
    Eigen::VectorXd intercept;
    int k = 0;
    int k_est = 0;
};

inline void write_model(const fs::path& dir, const ModelFiles& model) {
    fs::create_directories(dir / "blocks");
    json j;
    j["schema_version"] = kSchemaVersion;
    j["mode"] = model.mode;
    j["selected"] = model.selected;
    j["selected_names"] = model.selected_names;
    j["k"] = model.k;
    j["k_est"] = model.k_est;
    std::vector<std::string> files;
    for (std::size_t i = 0; i < model.selected.size(); ++i) {
        const std::string rel = "blocks/" + model.selected_names[i] + ".csv";
        write_matrix_csv(dir / rel, model.coefficients[i]);
        files.push_back(rel);
    }
    j["coefficient_files"] = files;
    j["intercept_file"] = "intercept.csv";
    write_matrix_csv(dir / "intercept.csv", model.intercept);
    write_json_file(dir / "model.json", j);
}

inline ModelFiles read_model(const fs::path& dir) {
    const json j = read_json_file(dir / "model.json");
    detail::require_keys(j,
                         {"schema_version", "mode", "selected", "selected_names", "k", "k_est",
                          "coefficient_files", "intercept_file"},
                         {}, "model.json");
    ModelFiles model;
    model.mode = j.at("mode").get<std::string>();
    model.selected = j.at("selected").get<std::vector<int>>();
    model.selected_names = j.at("selected_names").get<std::vector<std::string>>();
    model.k = j.at("k").get<int>();
    model.k_est = j.at("k_est").get<int>();
    for (const auto& rel : j.at("coefficient_files").get<std::vector<std::string>>())
        model.coefficients.push_back(read_matrix_csv(dir / rel));
    const Eigen::MatrixXd icol =
        read_matrix_csv(dir / j.at("intercept_file").get<std::string>());
    model.intercept = icol.col(0);
    return model;
}

inline void write_metrics(const fs::path& path, const Metrics& metrics, double elapsed_ms) {
    json j;
    j["schema_version"] = kSchemaVersion;
    j["false_pos"] = metrics.false_pos;
    j["false_neg"] = metrics.false_neg;
    if (metrics.mse_B)
        j["mse_B"] = *metrics.mse_B;
    else
        j["mse_B"] = nullptr;
    j["mse_out"] = metrics.mse_out;
    j["elapsed_ms"] = elapsed_ms;
    write_json_file(path, j);
}

}  // namespace fregsel
