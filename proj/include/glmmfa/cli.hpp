#pragma once
// Command runner behind tools/glmmfa. Everything is validated and computed before the
// first artifact is written, so a failing run leaves the output directory untouched.
#include <glmmfa/io.hpp>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>
#ifdef _OPENMP
#include <omp.h>
#endif

namespace glmmfa::cli {

enum ExitCode : int { kOk = 0, kConfigError = 2, kDataError = 3, kNumericalError = 4 };

inline const std::vector<std::string>& commands()
{
    static const std::vector<std::string> c{"fit", "select", "estimate-r", "simulate", "replicate"};
    return c;
}

/**
 * Flat run configuration. JSON keys match the member names; see README for the schema.
 * r_mode is "growth-ratio" or "fixed" (with r set).
 */
struct RunConfig
{
    std::string command;
    std::string data;
    std::string out = ".";
    std::uint64_t seed = 1;
    int threads = 0;
    bool verbose = false;

    std::string response = "y";
    std::string group = "group";
    std::vector<std::string> predictors;
    std::vector<std::string> random_effects;
    std::string family = "binomial";

    std::string penalty = "MCP";
    double gamma0 = 0.0; // 0 = penalty default
    double gamma1 = 0.0;
    double pi = 1.0;
    std::optional<double> lambda0;
    std::optional<double> lambda1;
    int grid_size = 10;
    double grid_ratio = 0.05;
    bool prescreen = true;
    double prescreen_lambda1_fraction = SelectionOptions{}.prescreen_lambda1_fraction;

    std::string r_mode = "growth-ratio";
    int r = 0;
    int gr_U = 0;

    int burn_in = SamplerConfig{}.burn_in;
    int m_base = MSchedule{}.base;
    int m_increment = MSchedule{}.increment;
    int m_cap = MSchedule{}.cap;
    int final_draws = MSchedule{}.final_draws;
    double step_size = 1.0;
    double adapt_target = 0.57;

    double em_tol = FitControl{}.em_tol;
    int em_consecutive = FitControl{}.em_consecutive;
    int max_em_iter = FitControl{}.max_em_iter;
    double mstep_tol = FitControl{}.mstep_tol;
    int max_mstep_iter = FitControl{}.max_mstep_iter;

    int sim_N = 2500;
    int sim_K = 25;
    int sim_p = 25;
    int sim_r = 3;
    std::string b_kind = "moderate";
    double beta_effect = 1.0;
    int n_true = 0; // 0 = 10 for binomial, 5 for poisson
    int replicates = 10;

    Family family_value() const { return family_from_string(family); }

    PenaltyKind penalty_value() const { return penalty_from_string(penalty); }

    SamplerConfig sampler() const
    {
        SamplerConfig s;
        s.burn_in = burn_in;
        s.m_schedule = {m_base, m_increment, m_cap, final_draws};
        s.step_size = step_size;
        s.adapt_target = adapt_target;
        return s;
    }

    FitControl control() const
    {
        FitControl c;
        c.em_tol = em_tol;
        c.em_consecutive = em_consecutive;
        c.max_em_iter = max_em_iter;
        c.mstep_tol = mstep_tol;
        c.max_mstep_iter = max_mstep_iter;
        return c;
    }

    SelectionOptions selection() const
    {
        SelectionOptions o;
        o.penalty = penalty_value();
        o.gamma0 = gamma0 > 0 ? gamma0 : default_gamma(o.penalty);
        o.gamma1 = gamma1 > 0 ? gamma1 : default_gamma(o.penalty);
        o.pi = pi;
        o.r = std::max(r, 1);
        o.grid_size = grid_size;
        o.grid_ratio = grid_ratio;
        o.prescreen_lambda1_fraction = prescreen_lambda1_fraction;
        return o;
    }

    RankOptions rank() const
    {
        RankOptions ro;
        ro.growth_ratio = r_mode == "growth-ratio";
        ro.fixed_r = r;
        ro.U = gr_U;
        return ro;
    }

    ColumnRoles roles() const { return {response, group, predictors, random_effects}; }

    Scenario scenario() const
    {
        Scenario sc;
        sc.family = family_value().kind;
        sc.N = sim_N;
        sc.K = sim_K;
        sc.p = sim_p;
        sc.r = sim_r;
        sc.b_kind = bkind_from_string(b_kind);
        sc.beta_effect = beta_effect;
        sc.n_true = n_true > 0 ? n_true : (sc.family == FamilyKind::PoissonLog ? 5 : 10);
        sc.rank = rank();
        sc.selection = selection();
        sc.control = control();
        sc.sampler = sampler();
        sc.prescreen = prescreen;
        return sc;
    }

    /// Checks everything that can be checked without reading the data.
    void validate() const
    {
        if (std::find(commands().begin(), commands().end(), command) == commands().end())
            throw ConfigError("unknown command '" + command + "'");
        family_value();
        const auto pk = penalty_value();
        selection();
        PenaltySpec{pk, 0.0, gamma0 > 0 ? gamma0 : default_gamma(pk), pi}.validate();
        PenaltySpec{pk, 0.0, gamma1 > 0 ? gamma1 : default_gamma(pk), pi}.validate();
        sampler().validate();
        control().validate();
        if (r_mode != "growth-ratio" && r_mode != "fixed") throw ConfigError("r_mode must be 'growth-ratio' or 'fixed'");
        if (r_mode == "fixed" && r < 1) throw ConfigError("r must be >= 1 when r_mode is 'fixed'");
        if (gr_U < 0) throw ConfigError("gr_U must be >= 0");
        if (grid_size < 1) throw ConfigError("grid_size must be >= 1");
        if (!(grid_ratio > 0.0 && grid_ratio <= 1.0)) throw ConfigError("grid_ratio must lie in (0, 1]");
        if (!(prescreen_lambda1_fraction > 0.0)) throw ConfigError("prescreen_lambda1_fraction must be positive");
        if (threads < 0) throw ConfigError("threads must be >= 0");

        const bool needs_data = command == "fit" || command == "select" || command == "estimate-r";
        if (needs_data) {
            if (data.empty()) throw ConfigError("command '" + command + "' needs a data file");
            if (!std::filesystem::is_regular_file(data)) throw ConfigError("data file '" + data + "' does not exist");
        }
        if (command == "fit") {
            if (!lambda0 || !lambda1) throw ConfigError("fit needs lambda0 and lambda1");
            if (*lambda0 < 0 || *lambda1 < 0) throw ConfigError("lambda0 and lambda1 must be >= 0");
            if (r_mode == "fixed" && r < 1) throw ConfigError("fit needs r >= 1");
        }
        if (command == "simulate" || command == "replicate") {
            const auto sc = scenario();
            if (sc.family == FamilyKind::GaussianIdentity) throw ConfigError("simulation supports binomial and poisson");
            if (sim_N < 1 || sim_K < 1 || sim_p < 1 || sim_r < 1) throw ConfigError("simulation sizes must be positive");
            const auto B = b_matrix(sc.b_kind, sc.r, sc.family, sc.p + 1); // throws for unsupported designs
            glmmfa::detail::check_design(sim_N, sim_K, sim_p, B);
            if (command == "replicate" && replicates < 1) throw ConfigError("replicates must be >= 1");
        }
    }
};

namespace detail {

template <class T>
void take(const json& j, const char* key, T& dst, std::set<std::string>& seen)
{
    if (!j.contains(key)) return;
    seen.insert(key);
    try {
        dst = j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(std::string("config key '") + key + "' has the wrong type");
    }
}

template <class T>
void take(const json& j, const char* key, std::optional<T>& dst, std::set<std::string>& seen)
{
    if (!j.contains(key)) return;
    T v{};
    take(j, key, v, seen);
    dst = v;
}

} // namespace detail

/// Parses a config object. Unknown keys are rejected so that typos do not pass silently.
inline RunConfig config_from_json(const json& j)
{
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    RunConfig c;
    std::set<std::string> seen;
    using detail::take;
    take(j, "command", c.command, seen);
    take(j, "data", c.data, seen);
    take(j, "out", c.out, seen);
    take(j, "seed", c.seed, seen);
    take(j, "threads", c.threads, seen);
    take(j, "verbose", c.verbose, seen);
    take(j, "response", c.response, seen);
    take(j, "group", c.group, seen);
    take(j, "predictors", c.predictors, seen);
    take(j, "random_effects", c.random_effects, seen);
    take(j, "family", c.family, seen);
    take(j, "penalty", c.penalty, seen);
    take(j, "gamma0", c.gamma0, seen);
    take(j, "gamma1", c.gamma1, seen);
    take(j, "pi", c.pi, seen);
    take(j, "lambda0", c.lambda0, seen);
    take(j, "lambda1", c.lambda1, seen);
    take(j, "grid_size", c.grid_size, seen);
    take(j, "grid_ratio", c.grid_ratio, seen);
    take(j, "prescreen", c.prescreen, seen);
    take(j, "prescreen_lambda1_fraction", c.prescreen_lambda1_fraction, seen);
    take(j, "r_mode", c.r_mode, seen);
    take(j, "r", c.r, seen);
    take(j, "gr_U", c.gr_U, seen);
    take(j, "burn_in", c.burn_in, seen);
    take(j, "m_base", c.m_base, seen);
    take(j, "m_increment", c.m_increment, seen);
    take(j, "m_cap", c.m_cap, seen);
    take(j, "final_draws", c.final_draws, seen);
    take(j, "step_size", c.step_size, seen);
    take(j, "adapt_target", c.adapt_target, seen);
    take(j, "em_tol", c.em_tol, seen);
    take(j, "em_consecutive", c.em_consecutive, seen);
    take(j, "max_em_iter", c.max_em_iter, seen);
    take(j, "mstep_tol", c.mstep_tol, seen);
    take(j, "max_mstep_iter", c.max_mstep_iter, seen);
    take(j, "sim_N", c.sim_N, seen);
    take(j, "sim_K", c.sim_K, seen);
    take(j, "sim_p", c.sim_p, seen);
    take(j, "sim_r", c.sim_r, seen);
    take(j, "b_kind", c.b_kind, seen);
    take(j, "beta_effect", c.beta_effect, seen);
    take(j, "n_true", c.n_true, seen);
    take(j, "replicates", c.replicates, seen);
    for (const auto& [key, value] : j.items()) {
        if (!seen.count(key)) throw ConfigError("unknown config key '" + key + "'");
    }
    return c;
}

/// Every setting, so that an artifact can be regenerated from its own header.
inline json config_to_json(const RunConfig& c)
{
    json j;
    j["command"] = c.command;
    j["data"] = c.data;
    j["seed"] = c.seed;
    j["response"] = c.response;
    j["group"] = c.group;
    j["predictors"] = c.predictors;
    j["random_effects"] = c.random_effects;
    j["family"] = c.family;
    j["penalty"] = c.penalty;
    j["gamma0"] = c.gamma0;
    j["gamma1"] = c.gamma1;
    j["pi"] = c.pi;
    if (c.lambda0) j["lambda0"] = *c.lambda0;
    if (c.lambda1) j["lambda1"] = *c.lambda1;
    j["grid_size"] = c.grid_size;
    j["grid_ratio"] = c.grid_ratio;
    j["prescreen"] = c.prescreen;
    j["prescreen_lambda1_fraction"] = c.prescreen_lambda1_fraction;
    j["r_mode"] = c.r_mode;
    j["r"] = c.r;
    j["gr_U"] = c.gr_U;
    j["burn_in"] = c.burn_in;
    j["m_base"] = c.m_base;
    j["m_increment"] = c.m_increment;
    j["m_cap"] = c.m_cap;
    j["final_draws"] = c.final_draws;
    j["step_size"] = c.step_size;
    j["adapt_target"] = c.adapt_target;
    j["em_tol"] = c.em_tol;
    j["em_consecutive"] = c.em_consecutive;
    j["max_em_iter"] = c.max_em_iter;
    j["mstep_tol"] = c.mstep_tol;
    j["max_mstep_iter"] = c.max_mstep_iter;
    j["sim_N"] = c.sim_N;
    j["sim_K"] = c.sim_K;
    j["sim_p"] = c.sim_p;
    j["sim_r"] = c.sim_r;
    j["b_kind"] = c.b_kind;
    j["beta_effect"] = c.beta_effect;
    j["n_true"] = c.n_true;
    j["replicates"] = c.replicates;
    return j;
}

struct Report
{
    std::string text;
    std::string csv;
};

/**
 * Human-readable summary of a selection run: the best model, its sets and the BIC-ICQ
 * table. With a truth, the selection metrics are appended (TP/FP fixed, TP/FP random, MAD).
 */
inline Report emit_report(const SelectionReport& rep, const GroupedDataset& data, const SimTruth* truth = nullptr)
{
    const auto& path = rep.path;
    if (path.entries.empty()) throw ConfigError("emit_report: empty path");
    Report out;
    std::ostringstream t;
    t << std::setprecision(6);
    const auto& best = path.best();
    t << "best model: lambda0 = " << best.lambda0 << ", lambda1 = " << best.lambda1 << ", BIC-ICQ = " << best.bic_icq
      << ", r = " << rep.r_used << "\n";
    t << "S1 (fixed):";
    for (int c : rep.sets.S1) t << " " << data.column_name(c);
    t << "\nS2 (random):";
    for (int c : rep.sets.S2) t << " " << data.column_name(c);
    t << "\n\n";
    t << std::left << std::setw(6) << "stage" << std::setw(14) << "lambda0" << std::setw(14) << "lambda1"
      << std::setw(14) << "bic_icq" << std::setw(9) << "df_fix" << std::setw(9) << "df_rand" << "\n";
    std::ostringstream c;
    c << std::setprecision(10) << "stage,lambda0,lambda1,bic_icq,df_fixed,df_random";
    if (truth) c << "," << metrics_header();
    c << "\n";
    MetricsRow m;
    if (truth) m = selection_metrics(rep.sets, rep.theta, *truth);
    for (std::size_t i = 0; i < path.entries.size(); ++i) {
        const auto& e = path.entries[i];
        t << std::setw(6) << e.stage << std::setw(14) << e.lambda0 << std::setw(14) << e.lambda1;
        if (e.failed) t << "failed: " << e.message;
        else t << std::setw(14) << e.bic_icq << std::setw(9) << e.df_fixed << std::setw(9) << e.df_random;
        if (static_cast<int>(i) == path.best_index) t << " *";
        t << "\n";
        c << e.stage << "," << e.lambda0 << "," << e.lambda1 << ",";
        if (e.failed) c << "NA,NA,NA";
        else c << e.bic_icq << "," << e.df_fixed << "," << e.df_random;
        if (truth) c << "," << (static_cast<int>(i) == path.best_index ? metrics_cells(m) : std::string("NA,NA,NA,NA,NA"));
        c << "\n";
    }
    if (truth) {
        t << "\nTP fixed % | FP fixed % | TP random % | FP random % | MAD\n"
          << std::right << std::setw(10) << m.tp_fixed_pct << " | " << std::setw(10) << m.fp_fixed_pct << " | "
          << std::setw(11) << m.tp_random_pct << " | " << std::setw(11) << m.fp_random_pct << " | " << m.mean_abs_dev
          << "\n";
    }
    out.text = t.str();
    out.csv = c.str();
    return out;
}

namespace detail {

/// Artifacts collected in memory and flushed together once the run succeeded.
struct Artifacts
{
    std::vector<std::pair<std::string, std::string>> files;

    void add(std::string name, std::string content) { files.emplace_back(std::move(name), std::move(content)); }

    void flush(const std::filesystem::path& dir) const
    {
        for (const auto& [name, content] : files) write_file_atomic(dir / name, content);
    }
};

inline json envelope(const RunConfig& c)
{
    return json{{"version", version()}, {"seed", c.seed}, {"config", config_to_json(c)}};
}

/// '#'-prefixed header lines carrying version, seed and the config echo.
inline std::string csv_preamble(const RunConfig& c)
{
    return "# glmmfa " + version() + "\n# seed " + std::to_string(c.seed) + "\n# config " +
           config_to_json(c).dump() + "\n";
}

inline std::string timing_json(double seconds, const json& extra = json::object())
{
    json j{{"version", version()}, {"wall_seconds", seconds}};
    for (const auto& [k, v] : extra.items()) j[k] = v;
    return dump(j);
}

} // namespace detail

/// Runs one command. Returns the process exit code; messages go to `err`.
inline int run(const RunConfig& cfg, std::ostream& log = std::cout, std::ostream& err = std::cerr)
{
    try {
        cfg.validate();
#ifdef _OPENMP
        if (cfg.threads > 0) omp_set_num_threads(cfg.threads);
#endif
        const auto t0 = std::chrono::steady_clock::now();
        auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
        const Family family = cfg.family_value();
        detail::Artifacts art;
        const std::string& cmd = cfg.command;

        if (cmd == "simulate") {
            auto [data, truth] = simulate_scenario(cfg.scenario(), cfg.seed);
            art.add("data.csv", dataset_to_csv(data, detail::csv_preamble(cfg)));
            json j = detail::envelope(cfg);
            j["truth"] = to_json(truth);
            art.add("truth.json", dump(j));
            art.add("simulate_timing.json", detail::timing_json(elapsed()));
            if (cfg.verbose) log << "simulated N=" << data.N() << " K=" << data.K() << " p=" << data.p() << "\n";
        } else if (cmd == "replicate") {
            const Scenario sc = cfg.scenario();
            std::ostringstream rows;
            rows << detail::csv_preamble(cfg) << "replicate,seed,failed,r_used," << metrics_header() << "\n";
            json hours = json::array();
            const auto table = run_replications(sc, cfg.replicates, cfg.seed, [&](const ReplicateResult& r) {
                rows << r.index << "," << r.seed << "," << (r.failed ? 1 : 0) << "," << r.r_hat << ","
                     << metrics_cells(r.metrics) << "\n";
                hours.push_back(r.metrics.wall_hours);
                if (cfg.verbose) {
                    log << "replicate " << r.index << (r.failed ? " failed: " + r.message : "") << " "
                        << metrics_cells(r.metrics) << "\n";
                }
            });
            const auto& s = table.summary;
            if (s.completed == 0) throw NumericalError("every replicate failed");
            std::ostringstream sum;
            sum << detail::csv_preamble(cfg) << "completed,failed,mean_r_used,pct_r_under,pct_r_exact,pct_r_over,"
                << metrics_header() << "\n"
                << s.completed << "," << s.failed << "," << s.mean_r_used << "," << s.pct_r_under << ","
                << s.pct_r_exact << "," << s.pct_r_over << "," << metrics_cells(s.mean) << "\n";
            art.add("replicates.csv", rows.str());
            art.add("summary.csv", sum.str());
            json j = detail::envelope(cfg);
            j["summary"] = {{"completed", s.completed},   {"failed", s.failed},
                            {"mean", to_json(s.mean)},    {"mean_r_used", s.mean_r_used},
                            {"pct_r_under", s.pct_r_under}, {"pct_r_exact", s.pct_r_exact},
                            {"pct_r_over", s.pct_r_over}};
            art.add("summary.json", dump(j));
            art.add("replicate_timing.json",
                    detail::timing_json(elapsed(), {{"median_wall_hours", s.median_wall_hours}, {"wall_hours", hours}}));
            log << "TP fixed %, FP fixed %, TP random %, FP random %, MAD: " << metrics_cells(s.mean) << "\n";
        } else {
            const auto loaded = load_dataset(cfg.data, cfg.roles(), family);
            const GroupedDataset& data = loaded.data;
            if (cmd == "estimate-r") {
                const auto pe = pseudo_random_effects(data, family);
                const int q = static_cast<int>(pe.G.rows());
                const int K = static_cast<int>(pe.G.cols());
                if (std::min(q, K) < 2) throw DataError("growth ratio needs at least 2 groups and 2 candidates");
                const int U = cfg.gr_U > 0 ? cfg.gr_U : default_growth_ratio_U(q, K);
                auto gr = growth_ratio(pe.G, U);
                gr.warnings.insert(gr.warnings.begin(), pe.warnings.begin(), pe.warnings.end());
                json j = detail::envelope(cfg);
                j["growth_ratio"] = to_json(gr);
                art.add("growth_ratio.json", dump(j));
                std::ostringstream g;
                g << detail::csv_preamble(cfg) << std::setprecision(17) << "effect";
                for (int k : pe.groups_used) g << "," << glmmfa::detail::csv_escape(loaded.group_labels[k - 1]);
                g << "\n";
                for (int t = 0; t < q; ++t) {
                    g << glmmfa::detail::csv_escape(data.column_name(data.z_columns[t]));
                    for (int k = 0; k < K; ++k) g << "," << pe.G(t, k);
                    g << "\n";
                }
                art.add("pseudo_effects.csv", g.str());
                art.add("estimate-r_timing.json", detail::timing_json(elapsed()));
                log << "r_hat = " << gr.r_hat << "\n";
            } else if (cmd == "fit") {
                const int r = choose_rank(data, family, cfg.rank());
                const auto opt = cfg.selection();
                const auto spec0 = opt.spec0(*cfg.lambda0);
                const auto spec1 = opt.spec1(*cfg.lambda1);
                const ModelFrame frame = make_frame(data);
                const auto init = initialize(frame, family, spec0, r, opt.init_c);
                auto ctrl = cfg.control();
                const auto fit = fit_mcecm(frame, family, spec0, spec1, init, ctrl, cfg.sampler(), cfg.seed);
                json j = detail::envelope(cfg);
                j["r"] = r;
                j["fit"] = to_json(fit);
                j["selected"] = to_json(select_effects(fit.theta, 0.0, data.z_columns), &data);
                art.add("fit.json", dump(j));
                art.add("fit_timing.json", detail::timing_json(elapsed(), {{"fit_seconds", fit.timing}}));
                if (!fit.converged) log << "warning: EM did not converge within max_em_iter\n";
                log << "fit finished after " << fit.em_iterations << " EM iterations\n";
            } else { // select
                const auto rep = run_selection(data, family, cfg.rank(), cfg.selection(), cfg.control(), cfg.sampler(),
                                               cfg.seed, cfg.prescreen);
                json j = detail::envelope(cfg);
                j["r"] = rep.r_used;
                if (rep.growth_ratio) j["growth_ratio"] = to_json(*rep.growth_ratio);
                j["retained"] = rep.retained;
                j["lambda0_grid"] = rep.lambda0_grid;
                j["lambda1_grid"] = rep.lambda1_grid;
                j["path"] = to_json(rep.path);
                art.add("path.json", dump(j));
                art.add("path.csv", detail::csv_preamble(cfg) + path_to_csv(rep.path));
                json s = detail::envelope(cfg);
                s["theta"] = to_json(rep.theta);
                s["selected"] = to_json(rep.sets, &data);
                art.add("selected.json", dump(s));
                const auto report = emit_report(rep, data);
                art.add("report.txt", report.text);
                art.add("report.csv", detail::csv_preamble(cfg) + report.csv);
                art.add("select_timing.json", detail::timing_json(elapsed(), {{"selection_seconds", rep.timing}}));
                log << report.text;
            }
        }
        art.flush(cfg.out);
        if (cfg.verbose) log << "wrote " << art.files.size() << " artifacts to " << cfg.out << "\n";
        return kOk;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kConfigError;
    } catch (const DataError& e) {
        err << "data error: " << e.what() << "\n";
        return kDataError;
    } catch (const NumericalError& e) {
        err << "numerical failure: " << e.what() << "\n";
        return kNumericalError;
    } catch (const DimensionError& e) {
        err << "numerical failure: " << e.what() << "\n";
        return kNumericalError;
    } catch (const std::filesystem::filesystem_error& e) {
        err << "config error: " << e.what() << "\n";
        return kConfigError;
    }
}

} // namespace glmmfa::cli
