#include <CLI11.hpp>
#include <cstdint>
#include <exception>
#include <iostream>
#include <string>

#include "sigma/common.hpp"
#include "sigma/runner.hpp"

int main(int argc, char** argv) {
    sigma::apply_thread_cap();

    CLI::App app{"semantic-complete graph matching engine for two-domain feature alignment"};
    app.require_subcommand(1);

    sigma::cli::CliOptions opts;
    std::uint64_t seed = 0;
    std::string out, qc_mode;
    int steps = 0;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", opts.config_path, "run configuration file")->required();
        sub->add_option("--seed", seed, "override run.seed");
        sub->add_option("--out", out, "override run.output_dir");
        sub->add_option("--steps", steps, "override train.steps");
        sub->add_option("--qc-mode", qc_mode, "override loss.qc_mode (squared|literal)")
            ->check(CLI::IsMember({"squared", "literal"}));
    };

    CLI::App* run = app.add_subcommand("run", "train and emit metrics artifacts");
    CLI::App* gradcheck =
        app.add_subcommand("gradcheck", "finite-difference check of all gradients");
    CLI::App* oracle =
        app.add_subcommand("oracle", "compare Sinkhorn argmax with the Hungarian oracle");
    CLI::App* eval = app.add_subcommand("eval", "evaluate the checkpoint in the output dir");
    for (CLI::App* sub : {run, gradcheck, oracle, eval}) add_common(sub);

    CLI11_PARSE(app, argc, argv);

    for (CLI::App* sub : {run, gradcheck, oracle, eval}) {
        if (!sub->parsed()) continue;
        opts.command = sub->get_name();
        if (sub->count("--seed")) opts.seed = seed;
        if (sub->count("--out")) opts.out = out;
        if (sub->count("--steps")) opts.steps = steps;
        if (sub->count("--qc-mode")) opts.qc_mode = qc_mode;
    }

    try {
        return sigma::cli::dispatch(opts);
    } catch (const sigma::config_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
