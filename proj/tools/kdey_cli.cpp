// kdey: command-line front end for quantification experiments.

#include "kdey/kdey.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

extern char** environ;

namespace {

struct CommonFlags {
    std::optional<std::uint64_t> seed;
    std::optional<int> jobs;
    std::optional<std::string> loss;
    std::optional<std::string> out;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--seed", f.seed, "random seed (overrides config)");
    cmd->add_option("--jobs", f.jobs, "threads for bag evaluation")->check(CLI::PositiveNumber);
    cmd->add_option("--loss", f.loss, "model-selection loss")->check(CLI::IsMember({"mae", "mrae"}));
    cmd->add_option("--out", f.out, "output directory");
}

kdey::ExperimentConfig load(const std::string& path, const CommonFlags& f) {
    auto cfg = kdey::load_config(path, kdey::environment_with_prefix(environ));
    if (f.seed) cfg.seed = *f.seed;
    if (f.jobs) cfg.jobs = *f.jobs;
    if (f.loss) cfg.loss = kdey::parse_loss(*f.loss);
    if (f.out) cfg.out = *f.out;
    cfg.validate();
    return cfg;
}

int cmd_run(const std::string& config_path, const CommonFlags& flags) {
    const auto cfg = load(config_path, flags);
    const auto run = kdey::run_experiment(cfg, &std::cerr);
    std::cout << kdey::results_table(run, cfg.loss);
    std::cout << "results written to " << cfg.out << "\n";
    return run.exit_code();
}

int cmd_sweep(const std::string& config_path, const CommonFlags& flags, const std::string& axis, const std::vector<double>& values,
              std::string method) {
    const auto cfg = load(config_path, flags);
    if (method.empty()) method = axis == "h" ? "KDEy-ML" : "DM-HD";
    const auto rows = kdey::sensitivity_sweep(cfg, axis, values, method);

    std::filesystem::create_directories(cfg.out);
    const auto path = std::filesystem::path(cfg.out) / ("sweep_" + method + "_" + axis + ".csv");
    std::ofstream csv(path);
    csv << axis << ",mae,mrae\n";
    std::printf("%-8s %12s %12s\n", axis.c_str(), "MAE", "MRAE");
    int failures = 0;
    for (const auto& r : rows) {
        if (!r.failure.empty()) {
            ++failures;
            std::printf("%-8s failed: %s\n", kdey::format6(r.value).c_str(), r.failure.c_str());
            continue;
        }
        char buf[128];
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", r.value, r.mae, r.mrae);
        csv << buf;
        std::printf("%-8s %12s %12s\n", kdey::format6(r.value).c_str(), kdey::format6(r.mae).c_str(), kdey::format6(r.mrae).c_str());
    }
    std::printf("max adjacent MAE jump: %s\n", kdey::format6(kdey::max_adjacent_jump(rows)).c_str());
    return failures == static_cast<int>(rows.size()) ? 1 : 0;
}

int cmd_synth(const std::string& spec_path, const std::string& out, std::uint64_t seed) {
    std::ifstream in(spec_path);
    if (!in) throw kdey::Error(kdey::ErrorCode::InvalidConfig, "cannot open " + spec_path);
    const auto j = nlohmann::json::parse(in, nullptr, false, true);
    if (j.is_discarded()) throw kdey::Error(kdey::ErrorCode::ParseError, spec_path + ": invalid JSON");
    const auto spec = j.get<kdey::SyntheticSpec>();
    const auto [train, test] = kdey::generate_synthetic(spec, seed);
    std::filesystem::create_directories(out);
    kdey::write_csv((std::filesystem::path(out) / "train.csv").string(), train);
    kdey::write_csv((std::filesystem::path(out) / "test.csv").string(), test);
    std::cout << "wrote " << train.size() << " training and " << test.size() << " test-pool rows to " << out << "\n";
    return 0;
}

struct EvalArgs {
    std::string train, test, label = "label", method = "KDEy-ML";
    std::vector<std::string> params;
    std::size_t bags = 100, bag_size = 100;
    std::uint64_t seed = 0;
    int jobs = 1, folds = 5;
};

int cmd_eval(const EvalArgs& a) {
    auto train = kdey::load_csv(a.train, a.label);
    auto test = kdey::load_csv(a.test, a.label);
    std::map<std::string, int> code;
    for (std::size_t i = 0; i < train.label_names.size(); ++i) code[train.label_names[i]] = static_cast<int>(i);
    for (auto& y : test.data.labels) {
        auto it = code.find(test.label_names[static_cast<std::size_t>(y)]);
        if (it == code.end()) throw kdey::Error(kdey::ErrorCode::InvalidConfig, "test label not present in training data");
        y = it->second;
    }
    test.data.n_classes = train.data.n_classes;

    kdey::Hyperparameters hp;
    for (const auto& p : a.params) {
        const auto eq = p.find('=');
        if (eq == std::string::npos) throw kdey::Error(kdey::ErrorCode::InvalidConfig, "--param expects key=value, got " + p);
        hp[p.substr(0, eq)] = std::stod(p.substr(eq + 1));
    }
    kdey::MethodContext ctx;
    ctx.seed = a.seed;
    ctx.folds = a.folds;
    auto q = kdey::make_quantifier(a.method, hp, ctx);
    q->fit(train.data);
    kdey::ProtocolConfig pc{a.bags, a.bag_size, a.seed, a.jobs};
    const auto report = kdey::evaluate_protocol(*q, test.data, pc);
    std::printf("%s  MAE %s  MRAE %s  (%zu bags of %zu)\n", a.method.c_str(), kdey::format6(report.mean_ae).c_str(),
                kdey::format6(report.mean_rae).c_str(), a.bags, a.bag_size);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Quantification under prior probability shift"};
    app.set_version_flag("--version", kdey::kVersion);
    app.require_subcommand(1);

    CommonFlags run_flags, sweep_flags;
    std::string run_config, sweep_config, axis, method;
    std::vector<double> values;

    auto* run = app.add_subcommand("run", "grid-search, refit and evaluate every configured method");
    run->add_option("config", run_config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    add_common(run, run_flags);

    auto* sweep = app.add_subcommand("sweep", "MAE of one method across values of h or b");
    sweep->add_option("config", sweep_config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sweep->add_option("--axis", axis, "hyperparameter to vary")->required()->check(CLI::IsMember({"h", "b"}));
    sweep->add_option("--values", values, "values to evaluate")->required()->expected(1, -1);
    sweep->add_option("--method", method, "method (default KDEy-ML for h, DM-HD for b)");
    add_common(sweep, sweep_flags);

    std::string spec_path, synth_out = "data";
    std::uint64_t synth_seed = 0;
    auto* synth = app.add_subcommand("synth", "write a synthetic train.csv / test.csv pair");
    synth->add_option("spec", spec_path, "synthetic spec (JSON)")->required()->check(CLI::ExistingFile);
    synth->add_option("--out", synth_out, "output directory");
    synth->add_option("--seed", synth_seed, "random seed");

    EvalArgs ea;
    auto* eval = app.add_subcommand("eval", "fit one method on a CSV and score it on bags from another");
    eval->add_option("--train", ea.train, "training CSV")->required()->check(CLI::ExistingFile);
    eval->add_option("--test", ea.test, "test-pool CSV")->required()->check(CLI::ExistingFile);
    eval->add_option("--label", ea.label, "label column name");
    eval->add_option("--method", ea.method, "method name")->check(CLI::IsMember(kdey::method_names()));
    eval->add_option("--param", ea.params, "hyperparameter key=value (repeatable)");
    eval->add_option("--bags", ea.bags, "number of bags")->check(CLI::PositiveNumber);
    eval->add_option("--bag-size", ea.bag_size, "bag size")->check(CLI::PositiveNumber);
    eval->add_option("--seed", ea.seed, "random seed");
    eval->add_option("--jobs", ea.jobs, "threads")->check(CLI::PositiveNumber);
    eval->add_option("--folds", ea.folds, "cross-validation folds");

    CLI11_PARSE(app, argc, argv);
    try {
        if (*run) return cmd_run(run_config, run_flags);
        if (*sweep) return cmd_sweep(sweep_config, sweep_flags, axis, values, method);
        if (*synth) return cmd_synth(spec_path, synth_out, synth_seed);
        if (*eval) return cmd_eval(ea);
    } catch (const kdey::Error& e) {
        std::cerr << "error [" << kdey::to_string(e.code()) << "]: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
