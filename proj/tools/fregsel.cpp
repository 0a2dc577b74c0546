#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "fregsel/pipeline.hpp"

namespace fs = std::filesystem;
using fregsel::json;

namespace {

// JSON config file with long-option keys; explicit command-line flags win.
// Unknown keys are rejected.
class ConfigBinder {
  public:
    void bind(CLI::Option* opt, std::function<void(const json&)> setter) {
        const std::string key = opt->get_name(false, true);  // "--n-lambda"
        entries_[key.substr(2)] = {opt, std::move(setter)};
    }

    void apply(const fs::path& file) const {
        const json cfg = fregsel::read_json_file(file);
        if (!cfg.is_object()) throw fregsel::ValidationError("config file must hold an object");
        for (const auto& item : cfg.items()) {
            const auto it = entries_.find(item.key());
            if (it == entries_.end())
                throw fregsel::ValidationError("unknown config key: " + item.key());
            if (it->second.first->count() == 0) it->second.second(item.value());
        }
    }

  private:
    std::map<std::string, std::pair<CLI::Option*, std::function<void(const json&)>>> entries_;
};

struct SimulateArgs {
    std::string out;
    int n = 60, p = 20, p0 = 3, m = 100;
    double snr = 10.0;
    std::string regime = "easy";
    std::uint64_t seed = 0;
    std::string format = "csv";
};

struct FitArgs {
    std::string data, out;
    std::string mode = "function-on-function";
    double lambda1 = 0.0, lambda2 = 0.0;
    double variance_threshold = 0.90;
    int k = 0, k_max = 10;
    double tol = 1e-6, sigma0 = -1.0, sigma_growth = 5.0;
    int max_outer = 100, max_inner = 100;
    std::uint64_t seed = 0;
    int threads = 0;
};

struct PathArgs {
    std::string data, out;
    std::string mode = "function-on-function";
    std::string criterion = "gcv";
    std::string adaptive = "none";
    int n_lambda = 50;
    double c_min = 0.01, alpha = 0.2;
    int max_selected = -1;
    int cv_folds = 5;
    double variance_threshold = 0.90;
    int k = 0, k_max = 10;
    double tol = 1e-6, sigma0 = -1.0, sigma_growth = 5.0;
    std::uint64_t seed = 0;
    int threads = 0;
    bool dump_path_blocks = false;
};

struct EvaluateArgs {
    std::string estimate, truth, out;
};

int resolve_threads(int requested) {
    if (requested > 0) return requested;
    const unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? static_cast<int>(hw) : 1;
}

fregsel::FitOptions make_options(const PathArgs& args) {
    fregsel::FitOptions options;
    options.scalar_mode = args.mode == "scalar";
    options.variance_threshold = args.variance_threshold;
    options.k_max = args.k_max;
    if (args.k > 0) options.fixed_k = args.k;
    options.path.n_lambda = args.n_lambda;
    options.path.c_min = args.c_min;
    options.path.alpha = args.alpha;
    if (args.max_selected >= 0) options.path.max_selected = args.max_selected;
    options.path.criterion =
        args.criterion == "cv" ? fregsel::Criterion::cv : fregsel::Criterion::gcv;
    options.path.cv_folds = args.cv_folds;
    if (args.adaptive == "full")
        options.path.adaptive = fregsel::AdaptiveMode::full;
    else if (args.adaptive == "soft")
        options.path.adaptive = fregsel::AdaptiveMode::soft;
    options.path.seed = args.seed;
    options.path.threads = resolve_threads(args.threads);
    options.path.solver.tol_kkt3 = args.tol;
    options.path.solver.tol_kkt1 = args.tol;
    options.path.solver.sigma0 = args.sigma0;
    options.path.solver.sigma_growth = args.sigma_growth;
    return options;
}

void write_run_manifest(const fs::path& dir, const std::string& command, const json& settings) {
    json j;
    j["schema_version"] = fregsel::kSchemaVersion;
    j["command"] = command;
    j["settings"] = settings;
    fregsel::write_json_file(dir / "manifest.json", j);
}

int cmd_simulate(const SimulateArgs& args) {
    if (args.p0 > args.p)
        throw fregsel::ValidationError("p0 cannot exceed p");
    if (args.regime != "easy" && args.regime != "difficult")
        throw fregsel::ValidationError("regime must be easy or difficult");
    if (args.format != "csv" && args.format != "binary")
        throw fregsel::ValidationError("format must be csv or binary");

    fregsel::ScenarioConfig config;
    config.n = args.n;
    config.p = args.p;
    config.p0 = args.p0;
    config.snr = args.snr;
    config.regime = args.regime == "easy" ? fregsel::Regime::easy : fregsel::Regime::difficult;
    config.seed = args.seed;
    const fregsel::Grid grid = fregsel::Grid::uniform(0.0, 1.0, args.m);
    const fregsel::Scenario scenario = fregsel::gen_scenario(config, grid);

    std::vector<std::string> names;
    names.reserve(args.p);
    for (int j = 0; j < args.p; ++j) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "X%04d", j + 1);
        names.emplace_back(buf);
    }

    const fs::path out(args.out);
    fregsel::Dataset train;
    train.response = scenario.response_train.values;
    for (const auto& f : scenario.features_train) train.features.push_back(f.values);
    train.feature_names = names;
    train.grid = grid;
    fregsel::write_dataset(out, train, args.format);

    fregsel::Dataset test;
    test.response = scenario.response_test.values;
    for (const auto& f : scenario.features_test) test.features.push_back(f.values);
    test.feature_names = names;
    test.grid = grid;
    fregsel::write_dataset(out / "test", test, args.format);

    fregsel::write_truth(out / "truth", scenario.truth, names, config.regime, config.seed);
    std::cout << "wrote scenario: n=" << args.n << " p=" << args.p << " p0=" << args.p0
              << " snr=" << args.snr << " regime=" << args.regime << " -> " << out.string()
              << "\n";
    return 0;
}

fregsel::ModelFiles model_from_functional(const fregsel::FunctionalFit& fit) {
    fregsel::ModelFiles model;
    model.mode = "function-on-function";
    model.selected = fit.selected;
    model.selected_names = fit.selected_names;
    for (const auto& s : fit.surfaces) model.coefficients.push_back(s);
    model.intercept = fit.intercept;
    model.k = fit.k;
    model.k_est = fit.k_est;
    return model;
}

fregsel::ModelFiles model_from_scalar(const fregsel::ScalarFit& fit) {
    fregsel::ModelFiles model;
    model.mode = "scalar";
    model.selected = fit.selected;
    model.selected_names = fit.selected_names;
    for (const auto& c : fit.curves) model.coefficients.push_back(c);
    model.intercept = Eigen::VectorXd::Constant(1, fit.intercept);
    model.k = fit.k;
    model.k_est = fit.k;
    return model;
}

void print_summary(const std::string& criterion, const fregsel::PathResult& path,
                   const std::vector<std::string>& selected_names) {
    if (path.best_index < 0) {
        std::cout << "no usable path point\n";
        return;
    }
    const auto& best = path.best();
    std::cout << "best model (criterion=" << criterion << "): c_lambda=" << best.c_lambda
              << " lambda1=" << best.lambda1 << " lambda2=" << best.lambda2;
    if (std::isfinite(best.criterion_score)) std::cout << " score=" << best.criterion_score;
    std::cout << "\nselected blocks (" << selected_names.size() << "):";
    for (const auto& name : selected_names) std::cout << ' ' << name;
    std::cout << "\n";
}

int run_fof(const PathArgs& args, const std::optional<std::pair<double, double>>& lambdas) {
    fregsel::FitOptions options = make_options(args);
    options.fixed_lambda = lambdas;
    const fregsel::Dataset data = fregsel::read_dataset(fs::path(args.data));
    if (data.scalar_response)
        throw fregsel::ValidationError("dataset has a scalar response; use --mode scalar");
    const fregsel::FunctionalFit fit =
        fregsel::fit_functional(data.response_curves(), data.feature_curves(), options,
                                data.feature_names);

    const fs::path out(args.out);
    fs::create_directories(out);
    fregsel::RunMeta meta{args.mode, args.criterion, args.adaptive, args.alpha,
                          args.variance_threshold, args.seed};
    const fregsel::PathResult* adaptive =
        fit.adaptive_path ? &*fit.adaptive_path : nullptr;
    fregsel::write_path_json(out / "path.json", meta, fit.initial_path, adaptive,
                             data.feature_names, fit.k, fit.k_est, fit.selected_names,
                             fit.soft_fallback, fit.null_model);
    fregsel::write_diagnostics_jsonl(out / "diagnostics.jsonl", fit.initial_path, adaptive);
    fregsel::write_model(out, model_from_functional(fit));
    if (args.dump_path_blocks) {
        for (std::size_t i = 0; i < fit.initial_path.records.size(); ++i) {
            const auto& rec = fit.initial_path.records[i];
            if (rec.B_raw.size() == 0) continue;
            const fs::path dir = out / "path_blocks" / ("lambda_" + std::to_string(i));
            fs::create_directories(dir);
            for (int j : rec.selected)
                fregsel::write_matrix_csv(
                    dir / (data.feature_names[j] + ".csv"),
                    rec.B_raw.middleRows(static_cast<Eigen::Index>(j) * fit.k, fit.k));
        }
    }
    print_summary(args.criterion,
                  fit.adaptive_path ? *fit.adaptive_path : fit.initial_path,
                  fit.selected_names);
    return 0;
}

int run_scalar(const PathArgs& args, const std::optional<std::pair<double, double>>& lambdas) {
    fregsel::FitOptions options = make_options(args);
    options.fixed_lambda = lambdas;
    const fregsel::Dataset data = fregsel::read_dataset(fs::path(args.data));
    if (data.response.cols() != 1)
        throw fregsel::ValidationError("scalar mode expects a single-column response");
    const fregsel::ScalarFit fit = fregsel::fit_scalar(data.response.col(0),
                                                       data.feature_curves(), options,
                                                       data.feature_names);
    const fs::path out(args.out);
    fs::create_directories(out);
    fregsel::RunMeta meta{args.mode, args.criterion, args.adaptive, args.alpha,
                          args.variance_threshold, args.seed};
    const fregsel::PathResult* adaptive =
        fit.adaptive_path ? &*fit.adaptive_path : nullptr;
    fregsel::write_path_json(out / "path.json", meta, fit.initial_path, adaptive,
                             data.feature_names, fit.k, fit.k, fit.selected_names,
                             fit.soft_fallback, fit.null_model);
    fregsel::write_diagnostics_jsonl(out / "diagnostics.jsonl", fit.initial_path, adaptive);
    fregsel::write_model(out, model_from_scalar(fit));
    print_summary(args.criterion,
                  fit.adaptive_path ? *fit.adaptive_path : fit.initial_path,
                  fit.selected_names);
    return 0;
}

int cmd_path(const PathArgs& args, const std::optional<std::pair<double, double>>& lambdas) {
    const json settings{{"data", args.data},
                        {"mode", args.mode},
                        {"criterion", args.criterion},
                        {"adaptive", args.adaptive},
                        {"n-lambda", args.n_lambda},
                        {"c-min", args.c_min},
                        {"alpha", args.alpha},
                        {"variance-threshold", args.variance_threshold},
                        {"seed", args.seed}};
    fs::create_directories(args.out);
    write_run_manifest(args.out, lambdas ? "fit" : "path", settings);
    if (args.mode == "scalar") return run_scalar(args, lambdas);
    if (args.mode != "function-on-function")
        throw fregsel::ValidationError("mode must be function-on-function or scalar");
    return run_fof(args, lambdas);
}

int cmd_evaluate(const EvaluateArgs& args) {
    const auto t0 = std::chrono::steady_clock::now();
    const fs::path est(args.estimate), truth_dir(args.truth);

    fregsel::ModelFiles model;
    if (fs::exists(est / "model.json")) {
        model = fregsel::read_model(est);
    } else if (fs::exists(est / "truth" / "truth.json") || fs::exists(est / "truth.json")) {
        // a simulation's own truth acts as a perfect estimate
        const fs::path tdir = fs::exists(est / "truth.json") ? est : est / "truth";
        const fregsel::TruthFiles t = fregsel::read_truth(tdir);
        model.mode = "function-on-function";
        model.selected = t.active;
        for (const auto& s : t.surfaces) model.coefficients.push_back(s);
        for (int j : t.active) model.selected_names.push_back("B" + std::to_string(j));
    } else {
        throw fregsel::IoError("no model.json or truth.json under " + est.string());
    }
    if (model.mode != "function-on-function")
        throw fregsel::ValidationError("evaluate supports function-on-function estimates");

    const fregsel::TruthFiles t = fregsel::read_truth(truth_dir / "truth");
    const fregsel::Dataset test = fregsel::read_dataset(truth_dir / "test" / "manifest.json");

    fregsel::GroundTruth truth;
    truth.active = t.active;
    for (const auto& s : t.surfaces) truth.surfaces.push_back({s, {}});
    truth.eta2_eps = t.eta2_eps;
    truth.snr = t.snr;

    Eigen::VectorXd intercept = Eigen::VectorXd::Zero(test.grid.size());
    if (model.intercept.size() == test.grid.size()) intercept = model.intercept;
    const fregsel::Metrics metrics =
        fregsel::evaluate(model.selected, model.coefficients, truth, test.feature_curves(),
                          test.response_curves(), &intercept);
    const double elapsed =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    const fs::path out = args.out.empty() ? est / "metrics.json" : fs::path(args.out);
    fregsel::write_metrics(out, metrics, elapsed);
    std::cout << fregsel::read_json_file(out).dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"sparse functional regression: simultaneous feature selection and estimation"};
    app.require_subcommand(1);

    SimulateArgs sim;
    FitArgs fit;
    PathArgs path;
    EvaluateArgs eval;
    std::string sim_config, fit_config, path_config, eval_config;

    auto* sim_cmd = app.add_subcommand("simulate", "generate a synthetic scenario");
    ConfigBinder sim_binder;
    sim_cmd->add_option("--config", sim_config, "JSON config file (flags override)");
    sim_binder.bind(sim_cmd->add_option("--out", sim.out, "output directory")->required(),
                    [&](const json& v) { sim.out = v.get<std::string>(); });
    sim_binder.bind(sim_cmd->add_option("--n", sim.n, "training sample size"),
                    [&](const json& v) { sim.n = v.get<int>(); });
    sim_binder.bind(sim_cmd->add_option("--p", sim.p, "number of features"),
                    [&](const json& v) { sim.p = v.get<int>(); });
    sim_binder.bind(sim_cmd->add_option("--p0", sim.p0, "number of active features"),
                    [&](const json& v) { sim.p0 = v.get<int>(); });
    sim_binder.bind(sim_cmd->add_option("--snr", sim.snr, "signal-to-noise ratio"),
                    [&](const json& v) { sim.snr = v.get<double>(); });
    sim_binder.bind(sim_cmd->add_option("--regime", sim.regime, "easy or difficult"),
                    [&](const json& v) { sim.regime = v.get<std::string>(); });
    sim_binder.bind(sim_cmd->add_option("--m", sim.m, "grid size"),
                    [&](const json& v) { sim.m = v.get<int>(); });
    sim_binder.bind(sim_cmd->add_option("--seed", sim.seed, "rng seed"),
                    [&](const json& v) { sim.seed = v.get<std::uint64_t>(); });
    sim_binder.bind(sim_cmd->add_option("--format", sim.format, "csv or binary"),
                    [&](const json& v) { sim.format = v.get<std::string>(); });

    const auto bind_common = [](CLI::App* cmd, ConfigBinder& binder, PathArgs& args) {
        binder.bind(cmd->add_option("--data", args.data, "dataset manifest.json")->required(),
                    [&args](const json& v) { args.data = v.get<std::string>(); });
        binder.bind(cmd->add_option("--out", args.out, "run output directory")->required(),
                    [&args](const json& v) { args.out = v.get<std::string>(); });
        binder.bind(cmd->add_option("--mode", args.mode, "function-on-function or scalar"),
                    [&args](const json& v) { args.mode = v.get<std::string>(); });
        binder.bind(cmd->add_option("--variance-threshold", args.variance_threshold,
                                    "explained-variance cutoff for k"),
                    [&args](const json& v) { args.variance_threshold = v.get<double>(); });
        binder.bind(cmd->add_option("--k", args.k, "fix the basis size"),
                    [&args](const json& v) { args.k = v.get<int>(); });
        binder.bind(cmd->add_option("--k-max", args.k_max, "cap on the basis size"),
                    [&args](const json& v) { args.k_max = v.get<int>(); });
        binder.bind(cmd->add_option("--tol", args.tol, "kkt tolerance"),
                    [&args](const json& v) { args.tol = v.get<double>(); });
        binder.bind(cmd->add_option("--sigma0", args.sigma0, "initial sigma (<=0: auto)"),
                    [&args](const json& v) { args.sigma0 = v.get<double>(); });
        binder.bind(cmd->add_option("--sigma-growth", args.sigma_growth, "sigma growth factor"),
                    [&args](const json& v) { args.sigma_growth = v.get<double>(); });
        binder.bind(cmd->add_option("--seed", args.seed, "rng seed"),
                    [&args](const json& v) { args.seed = v.get<std::uint64_t>(); });
        binder.bind(cmd->add_option("--threads", args.threads, "worker cap (0: auto)"),
                    [&args](const json& v) { args.threads = v.get<int>(); });
    };

    auto* fit_cmd = app.add_subcommand("fit", "solve at a single penalty pair");
    ConfigBinder fit_binder;
    PathArgs fit_path_args;  // fit shares the path plumbing with a fixed lambda
    fit_cmd->add_option("--config", fit_config, "JSON config file (flags override)");
    bind_common(fit_cmd, fit_binder, fit_path_args);
    fit_binder.bind(fit_cmd->add_option("--lambda1", fit.lambda1, "group penalty")->required(),
                    [&](const json& v) { fit.lambda1 = v.get<double>(); });
    fit_binder.bind(fit_cmd->add_option("--lambda2", fit.lambda2, "ridge penalty")->required(),
                    [&](const json& v) { fit.lambda2 = v.get<double>(); });

    auto* path_cmd = app.add_subcommand("path", "penalty path search with model selection");
    ConfigBinder path_binder;
    path_cmd->add_option("--config", path_config, "JSON config file (flags override)");
    bind_common(path_cmd, path_binder, path);
    path_binder.bind(path_cmd->add_option("--criterion", path.criterion, "gcv or cv"),
                     [&](const json& v) { path.criterion = v.get<std::string>(); });
    path_binder.bind(path_cmd->add_option("--adaptive", path.adaptive, "none, full or soft"),
                     [&](const json& v) { path.adaptive = v.get<std::string>(); });
    path_binder.bind(path_cmd->add_option("--n-lambda", path.n_lambda, "path grid size"),
                     [&](const json& v) { path.n_lambda = v.get<int>(); });
    path_binder.bind(path_cmd->add_option("--c-min", path.c_min, "smallest c on the path"),
                     [&](const json& v) { path.c_min = v.get<double>(); });
    path_binder.bind(path_cmd->add_option("--alpha", path.alpha, "penalty mix in (0,1)"),
                     [&](const json& v) { path.alpha = v.get<double>(); });
    path_binder.bind(
        path_cmd->add_option("--max-selected", path.max_selected, "early-stop cap (-1: none)"),
        [&](const json& v) { path.max_selected = v.get<int>(); });
    path_binder.bind(path_cmd->add_option("--cv-folds", path.cv_folds, "folds for cv"),
                     [&](const json& v) { path.cv_folds = v.get<int>(); });
    path_binder.bind(path_cmd->add_flag("--dump-path-blocks", path.dump_path_blocks,
                                        "write per-lambda coefficient blocks"),
                     [&](const json& v) { path.dump_path_blocks = v.get<bool>(); });

    auto* eval_cmd = app.add_subcommand("evaluate", "selection/estimation/prediction metrics");
    ConfigBinder eval_binder;
    eval_cmd->add_option("--config", eval_config, "JSON config file (flags override)");
    eval_binder.bind(
        eval_cmd->add_option("--estimate", eval.estimate,
                             "run directory (or a simulation directory)")
            ->required(),
        [&](const json& v) { eval.estimate = v.get<std::string>(); });
    eval_binder.bind(eval_cmd->add_option("--truth", eval.truth, "simulation directory")
                         ->required(),
                     [&](const json& v) { eval.truth = v.get<std::string>(); });
    eval_binder.bind(eval_cmd->add_option("--out", eval.out, "metrics output file"),
                     [&](const json& v) { eval.out = v.get<std::string>(); });

    try {
        app.parse(argc, argv);
        if (*sim_cmd) {
            if (!sim_config.empty()) sim_binder.apply(sim_config);
            return cmd_simulate(sim);
        }
        if (*fit_cmd) {
            if (!fit_config.empty()) fit_binder.apply(fit_config);
            return cmd_path(fit_path_args, std::make_pair(fit.lambda1, fit.lambda2));
        }
        if (*path_cmd) {
            if (!path_config.empty()) path_binder.apply(path_config);
            return cmd_path(path, std::nullopt);
        }
        if (*eval_cmd) {
            if (!eval_config.empty()) eval_binder.apply(eval_config);
            return cmd_evaluate(eval);
        }
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const fregsel::ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
