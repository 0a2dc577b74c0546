#include <catch2/catch_amalgamated.hpp>

#include <map>
#include <random>

#include "fregsel/io.hpp"
#include "fregsel/pipeline.hpp"
#include "support/oracles.hpp"

using namespace fregsel;
namespace ofs = oracles;

namespace {

const std::string kCli = FREGSEL_CLI_PATH;
const fs::path kSchemaDir = FREGSEL_SCHEMA_DIR;

json load_schema(const std::string& name) {
    return read_json_file(kSchemaDir / name);
}

void require_valid(const json& value, const std::string& schema_name) {
    std::string error;
    const bool ok = ofs::schema_validate(value, load_schema(schema_name), error);
    INFO(schema_name << ": " << error);
    REQUIRE(ok);
}

Dataset small_dataset(int n, int p, int m, std::uint64_t seed, bool scalar = false) {
    std::mt19937_64 rng(seed);
    Dataset data;
    data.grid = Grid::uniform(0.0, 1.0, m);
    data.response = ofs::randn(n, scalar ? 1 : m, rng);
    for (int j = 0; j < p; ++j) data.features.push_back(ofs::randn(n, m, rng));
    for (int j = 0; j < p; ++j) data.feature_names.push_back("X" + std::to_string(j + 1));
    data.scalar_response = scalar;
    return data;
}

std::map<std::string, std::string> snapshot_tree(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& entry : fs::recursive_directory_iterator(root))
        if (entry.is_regular_file())
            out[fs::relative(entry.path(), root).string()] = ofs::file_bytes(entry.path());
    return out;
}

}  // namespace

TEST_CASE("csv matrices round-trip exactly", "[io]") {
    std::mt19937_64 rng(3);
    ofs::TmpDir tmp("csv");
    for (int trial = 0; trial < 5; ++trial) {
        Eigen::MatrixXd M = ofs::randn(7, 5, rng);
        M(0, 0) = 1e-17;
        M(1, 1) = -3.25e12;
        M(2, 2) = 0.1 + 0.2;  // not representable exactly
        const fs::path file = tmp.path / "m.csv";
        write_matrix_csv(file, M);
        const Eigen::MatrixXd back = read_matrix_csv(file);
        REQUIRE(back.rows() == 7);
        REQUIRE(back.cols() == 5);
        REQUIRE(back == M);  // %.17g round-trips doubles bit-exactly
    }
}

TEST_CASE("datasets round-trip in both formats", "[io]") {
    for (const std::string format : {"csv", "binary"}) {
        ofs::TmpDir tmp("ds_" + format);
        const Dataset data = small_dataset(6, 3, 12, 11);
        write_dataset(tmp.path, data, format);
        const Dataset back = read_dataset(tmp.path / "manifest.json");
        REQUIRE(back.response == data.response);
        REQUIRE(back.features.size() == data.features.size());
        for (std::size_t j = 0; j < data.features.size(); ++j)
            REQUIRE(back.features[j] == data.features[j]);
        REQUIRE(back.feature_names == data.feature_names);
        REQUIRE(back.grid.same_as(data.grid));
        require_valid(read_json_file(tmp.path / "manifest.json"),
                      "dataset_manifest.schema.json");
    }
}

TEST_CASE("manifests with unknown keys are rejected", "[io]") {
    ofs::TmpDir tmp("badmanifest");
    const Dataset data = small_dataset(5, 2, 10, 13);
    write_dataset(tmp.path, data, "csv");
    json manifest = read_json_file(tmp.path / "manifest.json");
    manifest["surprise"] = 1;
    write_json_file(tmp.path / "manifest.json", manifest);
    REQUIRE_THROWS_AS(read_dataset(tmp.path / "manifest.json"), IoError);
}

TEST_CASE("model and truth files round-trip", "[io]") {
    std::mt19937_64 rng(17);
    ofs::TmpDir tmp("model");

    ModelFiles model;
    model.mode = "function-on-function";
    model.selected = {1, 4};
    model.selected_names = {"X2", "X5"};
    model.coefficients = {ofs::randn(12, 12, rng), ofs::randn(12, 12, rng)};
    model.intercept = ofs::randn(12, 1, rng).col(0);
    model.k = 3;
    model.k_est = 4;
    write_model(tmp.path, model);
    const ModelFiles back = read_model(tmp.path);
    REQUIRE(back.selected == model.selected);
    REQUIRE(back.selected_names == model.selected_names);
    REQUIRE(back.coefficients[0] == model.coefficients[0]);
    REQUIRE(back.intercept == model.intercept);
    REQUIRE(back.k_est == 4);
    require_valid(read_json_file(tmp.path / "model.json"), "model.schema.json");

    const Grid grid = Grid::uniform(0.0, 1.0, 12);
    ScenarioConfig config{20, 4, 2, 10.0, Regime::easy, 19};
    const Scenario sc = gen_scenario(config, grid);
    std::vector<std::string> names{"X1", "X2", "X3", "X4"};
    write_truth(tmp.path / "truth", sc.truth, names, Regime::easy, 19);
    const TruthFiles t = read_truth(tmp.path / "truth");
    REQUIRE(t.active == sc.truth.active);
    REQUIRE(t.surfaces.size() == sc.truth.surfaces.size());
    REQUIRE(t.surfaces[0] == sc.truth.surfaces[0].values);
    require_valid(read_json_file(tmp.path / "truth" / "truth.json"), "truth.schema.json");

    Metrics metrics;
    metrics.false_pos = 1;
    metrics.false_neg = 0;
    metrics.mse_out = 0.25;
    write_metrics(tmp.path / "metrics.json", metrics, 12.5);
    const json mj = read_json_file(tmp.path / "metrics.json");
    require_valid(mj, "metrics.schema.json");
    REQUIRE(mj.at("mse_B").is_null());
}

TEST_CASE("simulate then fit then evaluate round-trips with exit code 0", "[cli]") {
    for (const std::string regime : {"easy", "difficult"}) {
        ofs::TmpDir tmp("e2e_" + regime);
        const fs::path sim = tmp.path / "sim";
        auto r = ofs::run_cli(kCli,
                              "simulate --out " + sim.string() +
                                  " --n 45 --p 8 --p0 2 --snr 10 --regime " + regime +
                                  " --m 40 --seed 5",
                              tmp.path);
        INFO(r.output);
        REQUIRE(r.exit_code == 0);
        require_valid(read_json_file(sim / "manifest.json"), "dataset_manifest.schema.json");
        require_valid(read_json_file(sim / "truth" / "truth.json"), "truth.schema.json");

        const auto before = snapshot_tree(sim);
        const fs::path run = tmp.path / "run";
        r = ofs::run_cli(kCli,
                         "path --data " + (sim / "manifest.json").string() + " --out " +
                             run.string() + " --criterion gcv --n-lambda 25 --seed 1",
                         tmp.path);
        INFO(r.output);
        REQUIRE(r.exit_code == 0);
        REQUIRE(snapshot_tree(sim) == before);  // inputs untouched

        require_valid(read_json_file(run / "path.json"), "path.schema.json");
        require_valid(read_json_file(run / "manifest.json"), "run_manifest.schema.json");
        require_valid(read_json_file(run / "model.json"), "model.schema.json");
        std::ifstream diag(run / "diagnostics.jsonl");
        std::string line;
        int lines = 0;
        while (std::getline(diag, line)) {
            if (line.empty()) continue;
            require_valid(json::parse(line), "diagnostics_line.schema.json");
            ++lines;
        }
        REQUIRE(lines > 0);

        r = ofs::run_cli(kCli,
                         "evaluate --estimate " + run.string() + " --truth " + sim.string(),
                         tmp.path);
        INFO(r.output);
        REQUIRE(r.exit_code == 0);
        require_valid(read_json_file(run / "metrics.json"), "metrics.schema.json");
    }
}

TEST_CASE("the same simulate command is byte-identical", "[cli]") {
    ofs::TmpDir tmp("determinism");
    const std::string args = " --n 30 --p 4 --p0 2 --snr 10 --regime easy --m 30 --seed 9";
    const fs::path a = tmp.path / "a";
    const fs::path b = tmp.path / "b";
    REQUIRE(ofs::run_cli(kCli, "simulate --out " + a.string() + args, tmp.path).exit_code == 0);
    REQUIRE(ofs::run_cli(kCli, "simulate --out " + b.string() + args, tmp.path).exit_code == 0);
    REQUIRE(snapshot_tree(a) == snapshot_tree(b));
}

TEST_CASE("invalid arguments exit with code 2", "[cli]") {
    ofs::TmpDir tmp("usage");
    auto r = ofs::run_cli(kCli,
                          "simulate --out " + (tmp.path / "x").string() +
                              " --p0 30 --p 20 --n 30",
                          tmp.path);
    REQUIRE(r.exit_code == 2);
    r = ofs::run_cli(kCli, "path --data missing.json", tmp.path);  // missing required --out
    REQUIRE(r.exit_code == 2);
    r = ofs::run_cli(kCli, "nonsense", tmp.path);
    REQUIRE(r.exit_code == 2);
}

TEST_CASE("config files merge under explicit flags and reject unknown keys", "[cli]") {
    ofs::TmpDir tmp("config");
    const fs::path cfg = tmp.path / "config.json";
    write_json_file(cfg, json{{"n", 33}, {"p", 5}, {"p0", 1}, {"m", 30}, {"seed", 4}});
    const fs::path out = tmp.path / "sim";
    auto r = ofs::run_cli(
        kCli, "simulate --config " + cfg.string() + " --out " + out.string() + " --p 6",
        tmp.path);
    INFO(r.output);
    REQUIRE(r.exit_code == 0);
    const json manifest = read_json_file(out / "manifest.json");
    REQUIRE(manifest.at("n").get<int>() == 33);  // from config
    REQUIRE(manifest.at("p").get<int>() == 6);   // flag wins

    write_json_file(cfg, json{{"n", 33}, {"mystery", true}});
    r = ofs::run_cli(kCli,
                     "simulate --config " + cfg.string() + " --out " +
                         (tmp.path / "sim2").string(),
                     tmp.path);
    REQUIRE(r.exit_code == 2);
}

TEST_CASE("gcv and cv runs both emit valid results", "[cli]") {
    ofs::TmpDir tmp("criteria");
    const fs::path sim = tmp.path / "sim";
    REQUIRE(ofs::run_cli(kCli,
                         "simulate --out " + sim.string() +
                             " --n 45 --p 6 --p0 2 --snr 10 --regime easy --m 30 --seed 3",
                         tmp.path)
                .exit_code == 0);
    for (const std::string crit : {"gcv", "cv"}) {
        const fs::path run = tmp.path / ("run_" + crit);
        auto r = ofs::run_cli(kCli,
                              "path --data " + (sim / "manifest.json").string() + " --out " +
                                  run.string() + " --criterion " + crit +
                                  " --n-lambda 15 --seed 1 --threads 1",
                              tmp.path);
        INFO(r.output);
        REQUIRE(r.exit_code == 0);
        require_valid(read_json_file(run / "path.json"), "path.schema.json");
    }
}

TEST_CASE("soft adaptive runs flag their reweighting", "[cli]") {
    ofs::TmpDir tmp("soft");
    const fs::path sim = tmp.path / "sim";
    REQUIRE(ofs::run_cli(kCli,
                         "simulate --out " + sim.string() +
                             " --n 60 --p 6 --p0 2 --snr 100 --regime easy --m 30 --seed 21",
                         tmp.path)
                .exit_code == 0);
    const fs::path run = tmp.path / "run";
    auto r = ofs::run_cli(kCli,
                          "path --data " + (sim / "manifest.json").string() + " --out " +
                              run.string() + " --adaptive soft --n-lambda 25 --seed 2",
                          tmp.path);
    INFO(r.output);
    REQUIRE(r.exit_code == 0);
    const json pj = read_json_file(run / "path.json");
    REQUIRE(pj.at("adaptive").get<std::string>() == "soft");
    REQUIRE(pj.contains("adaptive_path"));
    bool reweighted = pj.at("soft_fallback_full").get<bool>();
    for (const auto& w : pj.at("adaptive_path").at("weights_used"))
        if (std::abs(w.get<double>() - 1.0) > 1e-12) reweighted = true;
    REQUIRE(reweighted);
}

TEST_CASE("a noiseless single truth is printed and recovered end to end", "[cli]") {
    ofs::TmpDir tmp("exact");
    const fs::path sim = tmp.path / "sim";
    REQUIRE(ofs::run_cli(kCli,
                         "simulate --out " + sim.string() +
                             " --n 60 --p 6 --p0 1 --snr 1000000 --regime easy --m 30 --seed 8",
                         tmp.path)
                .exit_code == 0);
    const TruthFiles truth = read_truth(sim / "truth");
    const fs::path run = tmp.path / "run";
    auto r = ofs::run_cli(kCli,
                          "path --data " + (sim / "manifest.json").string() + " --out " +
                              run.string() +
                              " --adaptive full --criterion cv --k 4 --n-lambda 30 --seed 2",
                          tmp.path);
    INFO(r.output);
    REQUIRE(r.exit_code == 0);
    char expected[16];
    std::snprintf(expected, sizeof(expected), "X%04d", truth.active[0] + 1);
    REQUIRE(r.output.find(expected) != std::string::npos);

    r = ofs::run_cli(kCli,
                     "evaluate --estimate " + run.string() + " --truth " + sim.string(),
                     tmp.path);
    REQUIRE(r.exit_code == 0);
    const json metrics = read_json_file(run / "metrics.json");
    REQUIRE(metrics.at("false_neg").get<int>() == 0);
    REQUIRE(metrics.at("false_pos").get<int>() == 0);
}

TEST_CASE("the simulation truth evaluates as a perfect estimate", "[cli]") {
    ofs::TmpDir tmp("selfeval");
    const fs::path sim = tmp.path / "sim";
    REQUIRE(ofs::run_cli(kCli,
                         "simulate --out " + sim.string() +
                             " --n 30 --p 5 --p0 2 --snr 10 --regime easy --m 25 --seed 6",
                         tmp.path)
                .exit_code == 0);
    auto r = ofs::run_cli(kCli,
                          "evaluate --estimate " + sim.string() + " --truth " + sim.string() +
                              " --out " + (tmp.path / "metrics.json").string(),
                          tmp.path);
    INFO(r.output);
    REQUIRE(r.exit_code == 0);
    const json metrics = read_json_file(tmp.path / "metrics.json");
    REQUIRE(metrics.at("false_pos").get<int>() == 0);
    REQUIRE(metrics.at("false_neg").get<int>() == 0);
    REQUIRE(metrics.at("mse_B").get<double>() == 0.0);
}

TEST_CASE("single-lambda fits write the same artifacts", "[cli]") {
    ofs::TmpDir tmp("fit");
    const fs::path sim = tmp.path / "sim";
    REQUIRE(ofs::run_cli(kCli,
                         "simulate --out " + sim.string() +
                             " --n 40 --p 5 --p0 2 --snr 50 --regime easy --m 30 --seed 12",
                         tmp.path)
                .exit_code == 0);
    const fs::path run = tmp.path / "run";
    auto r = ofs::run_cli(kCli,
                          "fit --data " + (sim / "manifest.json").string() + " --out " +
                              run.string() + " --lambda1 0.5 --lambda2 2.0",
                          tmp.path);
    INFO(r.output);
    REQUIRE(r.exit_code == 0);
    require_valid(read_json_file(run / "path.json"), "path.schema.json");
    require_valid(read_json_file(run / "model.json"), "model.schema.json");
    const json pj = read_json_file(run / "path.json");
    REQUIRE(pj.at("initial_path").at("records").size() == 1);
    REQUIRE(pj.at("initial_path").at("records")[0].at("lambda1").get<double>() ==
            Catch::Approx(0.5));
}

TEST_CASE("scalar mode runs against single-column responses", "[cli]") {
    ofs::TmpDir tmp("scalar");
    // build a scalar dataset by hand: curve features, n x 1 response
    std::mt19937_64 rng(31);
    Dataset data;
    data.grid = Grid::uniform(0.0, 1.0, 25);
    const int n = 40;
    for (int j = 0; j < 5; ++j) {
        CurveSet gp = sample_gp(n, data.grid, MaternParams{1.0, 0.25, 3.5}, 100 + j);
        data.features.push_back(gp.values);
        data.feature_names.push_back("X" + std::to_string(j + 1));
    }
    Eigen::VectorXd w = data.grid.quadrature_weights();
    Eigen::VectorXd beta = Eigen::VectorXd::Ones(25);
    Eigen::VectorXd y = data.features[1] * (w.asDiagonal() * beta);
    y += 0.05 * ofs::randn(n, 1, rng).col(0);
    data.response = y;
    data.scalar_response = true;
    const fs::path ds = tmp.path / "data";
    write_dataset(ds, data, "csv");

    const fs::path run = tmp.path / "run";
    auto r = ofs::run_cli(kCli,
                          "path --data " + (ds / "manifest.json").string() + " --out " +
                              run.string() + " --mode scalar --n-lambda 20 --seed 1",
                          tmp.path);
    INFO(r.output);
    REQUIRE(r.exit_code == 0);
    const json pj = read_json_file(run / "path.json");
    REQUIRE(pj.at("mode").get<std::string>() == "scalar");
    const json model = read_json_file(run / "model.json");
    REQUIRE(model.at("mode").get<std::string>() == "scalar");
    // the predictive feature X2 must be among the selected blocks
    bool found = false;
    for (const auto& name : model.at("selected_names"))
        if (name.get<std::string>() == "X2") found = true;
    REQUIRE(found);
}
