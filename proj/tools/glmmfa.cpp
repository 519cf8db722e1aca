// glmmfa command-line tool: fit, select, estimate-r, simulate, replicate.
#include <glmmfa/cli.hpp>
#include <CLI11.hpp>
#include <fstream>
#include <iostream>

int main(int argc, char** argv)
{
    using namespace glmmfa;
    CLI::App app{"Penalized GLMM selection with a factor-model random-effect structure"};
    app.set_version_flag("--version", version());
    app.require_subcommand(1);

    std::string config_path, data_path, out_dir;
    std::uint64_t seed = 0;
    int threads = -1;
    bool verbose = false;
    app.add_option("--config", config_path, "JSON run configuration");
    app.add_option("--data", data_path, "input CSV (overrides the config)");
    app.add_option("--out", out_dir, "output directory (overrides the config)");
    auto* seed_opt = app.add_option("--seed", seed, "random seed (overrides the config)");
    app.add_option("--threads", threads, "worker threads, 0 = all cores");
    app.add_flag("--verbose,-v", verbose, "progress messages");
    for (const auto& name : cli::commands()) app.add_subcommand(name)->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : cli::kConfigError;
    }

    cli::RunConfig cfg;
    try {
        if (!config_path.empty()) {
            std::ifstream in(config_path);
            if (!in) throw ConfigError("cannot open config '" + config_path + "'");
            json j;
            try {
                j = json::parse(in);
            } catch (const json::parse_error& e) {
                throw ConfigError(std::string("config is not valid JSON: ") + e.what());
            }
            cfg = cli::config_from_json(j);
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return cli::kConfigError;
    }
    const std::string sub = app.get_subcommands().front()->get_name();
    if (!cfg.command.empty() && cfg.command != sub) {
        std::cerr << "config error: config is for '" << cfg.command << "' but '" << sub << "' was requested\n";
        return cli::kConfigError;
    }
    cfg.command = sub;
    if (!data_path.empty()) cfg.data = data_path;
    if (!out_dir.empty()) cfg.out = out_dir;
    if (seed_opt->count() > 0) cfg.seed = seed;
    if (threads >= 0) cfg.threads = threads;
    if (verbose) cfg.verbose = true;
    return cli::run(cfg);
}
