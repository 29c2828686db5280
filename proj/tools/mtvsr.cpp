// mtvsr: command-line front end.
//
// Exit codes: 0 success, 1 unreadable input or I/O failure, 2 hyper-parameter
// estimation failure, 3 solver did not converge (outputs are still written),
// 4 bad arguments or configuration.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mtvsr/mtvsr.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace mtvsr;

namespace {

enum ExitCode { kOk = 0, kIoFailure = 1, kEstimationFailure = 2, kNotConverged = 3, kBadArguments = 4 };

int g_verbosity = 0;

void log(int level, const std::string& msg)
{
    if (g_verbosity >= level)
        std::cerr << "mtvsr: " << msg << "\n";
}

int default_threads()
{
    const char* env = std::getenv("MTVSR_THREADS");
    if (!env)
        return 1;
    try {
        const int n = std::stoi(env);
        return n >= 1 ? n : 1;
    } catch (const std::exception&) {
        return 1;
    }
}

std::string json_string(const json& j) { return j.dump(2) + "\n"; }

void write_text(const std::string& path, const std::string& text)
{
    std::ofstream os(path, std::ios::binary);
    if (!os)
        throw IoError("cannot open '" + path + "' for writing");
    os << text;
    if (!os)
        throw IoError("failed writing '" + path + "'");
}

std::string read_text(const std::string& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw IoError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

json read_json(const std::string& path)
{
    try {
        return json::parse(read_text(path));
    } catch (const json::parse_error& e) {
        throw std::invalid_argument("'" + path + "' is not valid JSON: " + e.what());
    }
}

void make_parent_dirs(const std::string& path)
{
    const fs::path parent = fs::path(path).parent_path();
    if (!parent.empty())
        fs::create_directories(parent);
}

// "dir/lr.nii.gz" -> "dir/lr.json"
std::string sidecar_path(const std::string& path)
{
    std::string p = path;
    for (const char* ext : {".nii.gz", ".nii", ".csv", ".json"})
        if (p.size() > std::string(ext).size() && p.ends_with(ext)) {
            p.resize(p.size() - std::string(ext).size());
            break;
        }
    return p + ".json";
}

int axis_from_name(const std::string& s)
{
    if (s == "x" || s == "0")
        return 0;
    if (s == "y" || s == "1")
        return 1;
    if (s == "z" || s == "2")
        return 2;
    throw std::invalid_argument("axis must be x, y or z");
}

void check_label(const std::string& label)
{
    if (label.empty())
        throw std::invalid_argument("empty contrast label");
    for (char c : label)
        if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.'))
            throw std::invalid_argument("contrast label '" + label + "' may only use letters, digits, '-', '_', '.'");
}

SolverSettings solver_from(const json& c)
{
    SolverSettings s;
    s.rho = c.at("rho").get<double>();
    s.max_admm_iter = c.at("max_iter").get<int>();
    s.cg_tol = c.at("cg_tol").get<double>();
    s.cg_max_iter = c.at("cg_max_iter").get<int>();
    s.eps_rel = c.at("eps_rel").get<double>();
    s.adapt_rho = c.at("adapt_rho").get<bool>();
    s.seed = c.at("seed").get<std::uint64_t>();
    s.threads = std::max(1, c.at("threads").get<int>());
    // Wall-clock columns are only filled in multi-threaded runs, so that
    // single-threaded outputs are byte-for-byte repeatable.
    s.record_timing = s.threads > 1;
    if (!(s.rho > 0.0) || s.max_admm_iter < 1 || !(s.cg_tol > 0.0) || s.cg_max_iter < 1 || !(s.eps_rel > 0.0))
        throw std::invalid_argument("solver settings must be positive");
    return s;
}

json grid_json(const GridSpec& g)
{
    json a = json::array();
    for (int r = 0; r < 4; ++r)
        a.push_back({g.voxel_to_world(r, 0), g.voxel_to_world(r, 1), g.voxel_to_world(r, 2), g.voxel_to_world(r, 3)});
    return {{"dims", {g.dims[0], g.dims[1], g.dims[2]}},
            {"voxel_size", {g.voxel_size[0], g.voxel_size[1], g.voxel_size[2]}},
            {"affine", a}};
}

json manifest(const std::string& command, const json& config, const std::vector<std::string>& argv)
{
    return {{"tool", "mtvsr"}, {"command", command}, {"seed", config.value("seed", std::uint64_t{0})},
            {"argv", argv}, {"config", config}};
}

double scaling_slope_from_file(const std::string& path)
{
    const json j = read_json(path);
    if (!j.contains("slope") || !j["slope"].is_number())
        throw std::invalid_argument("scaling fit '" + path + "' has no numeric 'slope'");
    const double slope = j["slope"].get<double>();
    if (!(slope > 0.0))
        throw std::invalid_argument("scaling fit '" + path + "' has a non-positive slope");
    return slope;
}

// Ground truth for simulate / grid-search: an HR file or a seeded phantom.
Volume load_truth(const json& c)
{
    if (c.contains("input") && !c["input"].get<std::string>().empty())
        return load_volume(c["input"].get<std::string>());
    const json& p = c.at("phantom");
    PhantomSettings ps;
    ps.size = p.at("size").get<std::size_t>();
    ps.peak = p.at("peak").get<double>();
    return make_phantom(p.at("seed").get<std::uint64_t>(), parse_contrast(p.at("contrast").get<std::string>()), ps);
}

// ---------------------------------------------------------------- reconstruct

int run_reconstruct(const json& c, const std::vector<std::string>& argv)
{
    const std::string out = c.at("out").get<std::string>();
    const Prior prior = parse_prior(c.at("prior").get<std::string>());
    const SliceProfileKind profile = parse_profile_kind(c.at("profile").get<std::string>());
    const std::size_t bins = c.at("bins").get<std::size_t>();
    const double spacing = c.at("spacing").get<double>();
    ReconProblem problem;
    problem.prior = prior;
    problem.settings = solver_from(c);

    const json& contrasts = c.at("contrasts");
    if (contrasts.empty())
        throw std::invalid_argument("at least one --contrast LABEL FILE... is required");
    const auto taus = c.at("tau").get<std::vector<double>>();
    const auto lambdas = c.at("lambda").get<std::vector<double>>();
    std::size_t n_files = 0;
    for (const auto& g : contrasts)
        n_files += g.at("files").size();
    if (taus.size() > 1 && taus.size() != n_files)
        throw std::invalid_argument("--tau takes one value or one per input file");
    if (lambdas.size() > 1 && lambdas.size() != contrasts.size())
        throw std::invalid_argument("--lambda takes one value or one per contrast");
    for (double v : taus)
        if (!(v > 0.0))
            throw std::invalid_argument("--tau values must be positive");
    for (double v : lambdas)
        if (!(v > 0.0))
            throw std::invalid_argument("--lambda values must be positive");

    struct Input {
        std::string file;
        Volume x;
        AcquisitionMeta meta;
    };
    std::vector<std::vector<Input>> inputs;
    std::vector<GridSpec> lr_grids;
    std::vector<std::string> labels;
    for (const auto& g : contrasts) {
        const std::string label = g.at("label").get<std::string>();
        check_label(label);
        if (std::find(labels.begin(), labels.end(), label) != labels.end())
            throw std::invalid_argument("contrast label '" + label + "' given twice");
        labels.push_back(label);
        if (g.at("files").empty())
            throw std::invalid_argument("contrast '" + label + "' has no input files");
        inputs.emplace_back();
        for (const auto& f : g.at("files")) {
            Input in;
            in.file = f.get<std::string>();
            in.x = load_volume(in.file);
            in.meta = meta_from_grid(in.x.grid());
            lr_grids.push_back(in.x.grid());
            log(1, "loaded " + in.file + " (slice axis " + std::to_string(in.meta.slice_axis) + ", " +
                       std::to_string(in.meta.slice_thickness_mm) + " mm)");
            inputs.back().push_back(std::move(in));
        }
    }
    problem.hr_grid = bounding_grid(lr_grids, spacing);
    log(1, "reconstruction grid " + std::to_string(problem.hr_grid.dims[0]) + "x" +
               std::to_string(problem.hr_grid.dims[1]) + "x" + std::to_string(problem.hr_grid.dims[2]));

    const double slope = c.at("scaling_slope").get<double>();
    json est = json::array();
    std::size_t file_index = 0;
    for (std::size_t m = 0; m < inputs.size(); ++m) {
        ContrastGroup grp;
        grp.id = labels[m];
        json jc = {{"label", labels[m]}, {"observations", json::array()}};
        double mu_sum = 0.0;
        for (auto& in : inputs[m]) {
            Observation o;
            o.op = std::make_shared<const ProjectionOperator>(make_projection(problem.hr_grid, in.meta, profile));
            json jo = {{"file", in.file},
                       {"slice_axis", in.meta.slice_axis},
                       {"slice_thickness_mm", in.meta.slice_thickness_mm}};
            const NoiseEstimate ne = estimate_tau(in.x, bins);
            mu_sum += mean_tissue_intensity(ne.fit);
            if (taus.empty()) {
                o.tau = ne.tau;
                jo["tau_source"] = "estimated";
            } else {
                o.tau = taus.size() == 1 ? taus[0] : taus[file_index];
                jo["tau_source"] = "override";
            }
            jo["tau"] = o.tau;
            jo["sigma_estimate"] = ne.sigma;
            jo["percent_of_max"] = ne.percent_of_max;
            jo["mean_tissue_intensity"] = mean_tissue_intensity(ne.fit);
            log(1, in.file + ": sigma " + std::to_string(ne.sigma) + " (" + std::to_string(ne.percent_of_max) +
                       "% of max), tau " + std::to_string(o.tau));
            o.x = std::move(in.x);
            grp.observations.push_back(std::move(o));
            jc["observations"].push_back(jo);
            ++file_index;
        }
        const double mu = mu_sum / static_cast<double>(inputs[m].size());
        jc["mean_tissue_intensity"] = mu;
        if (lambdas.empty()) {
            ScalingFit fit;
            fit.slope = slope;
            grp.lambda = estimate_lambda(mu, fit);
            jc["lambda_source"] = "estimated";
        } else {
            grp.lambda = lambdas.size() == 1 ? lambdas[0] : lambdas[m];
            jc["lambda_source"] = "override";
        }
        jc["lambda"] = grp.lambda;
        log(1, labels[m] + ": lambda " + std::to_string(grp.lambda));
        problem.groups.push_back(std::move(grp));
        est.push_back(jc);
    }

    log(1, "running " + to_string(prior) + " reconstruction");
    const ReconResult res = admm_reconstruct(problem);
    const auto& d = res.diagnostics;
    log(1, std::string(d.converged ? "converged" : "did not converge") + " after " + std::to_string(d.iterations) +
               " iterations");

    fs::create_directories(out);
    json outputs = json::array();
    for (std::size_t m = 0; m < labels.size(); ++m) {
        const std::string path = (fs::path(out) / (labels[m] + ".nii")).string();
        save_volume(res.images[m], path, "mtvsr " + to_string(prior) + " seed " + std::to_string(problem.settings.seed));
        outputs.push_back(path);
    }
    {
        std::ostringstream csv;
        write_diagnostics_csv(csv, d);
        write_text((fs::path(out) / "diagnostics.csv").string(), csv.str());
    }
    json m = manifest("reconstruct", c, argv);
    m["estimates"] = {{"grid", grid_json(problem.hr_grid)}, {"contrasts", est}};
    m["result"] = {{"status", d.converged ? "converged" : "not-converged"},
                   {"iterations", d.iterations},
                   {"outputs", outputs}};
    write_text((fs::path(out) / "manifest.json").string(), json_string(m));
    if (!d.converged) {
        std::cerr << "mtvsr: warning: solver stopped at the iteration limit before reaching eps_rel\n";
        return kNotConverged;
    }
    return kOk;
}

// ------------------------------------------------------------------- simulate

int run_simulate(const json& c, const std::vector<std::string>& argv)
{
    const Volume y = load_truth(c);
    const int axis = axis_from_name(c.at("axis").get<std::string>());
    const double factor = c.at("factor").get<double>();
    const double noise = c.at("noise").get<double>();
    const std::uint64_t seed = c.at("seed").get<std::uint64_t>();
    const auto profile = parse_profile_kind(c.at("profile").get<std::string>());
    const AcquisitionMeta meta = thick_slice_meta(y.grid(), axis, factor, c.at("shift").get<double>());
    const Volume x = simulate_lr(y, meta, profile, noise, seed);

    const std::string out = c.at("out").get<std::string>();
    make_parent_dirs(out);
    const std::string descrip = "mtvsr simulate seed " + std::to_string(seed);
    save_volume(x, out, descrip);
    json m = manifest("simulate", c, argv);
    m["result"] = {{"lr_dims", {x.dims()[0], x.dims()[1], x.dims()[2]}}, {"noise_sigma", noise / 100.0 * y.max()}};
    if (const std::string hr = c.value("hr_out", std::string()); !hr.empty()) {
        make_parent_dirs(hr);
        save_volume(y, hr, descrip);
    }
    write_text(sidecar_path(out), json_string(m));
    log(1, "wrote " + out + " (" + std::to_string(x.dims()[0]) + "x" + std::to_string(x.dims()[1]) + "x" +
               std::to_string(x.dims()[2]) + ")");
    return kOk;
}

// ------------------------------------------------------------- estimate-noise

int run_estimate_noise(const json& c, const std::vector<std::string>&)
{
    const Volume v = load_volume(c.at("input").get<std::string>());
    MixtureSettings ms;
    ms.classes = c.at("classes").get<int>();
    ms.max_iter = c.at("max_iter").get<int>();
    ms.tol = c.at("tol").get<double>();
    const NoiseEstimate e = estimate_tau(v, c.at("bins").get<std::size_t>(), ms);
    json classes = json::array();
    for (const auto& k : e.fit.classes)
        classes.push_back({{"nu", k.nu}, {"sigma", k.sigma}, {"weight", k.weight}});
    json j = {{"sigma", e.sigma},
              {"tau", e.tau},
              {"percent_of_max", e.percent_of_max},
              {"classes", classes},
              {"loglik", e.fit.log_likelihood},
              {"iterations", e.fit.iterations},
              {"converged", e.fit.converged},
              {"negatives_clamped", e.negatives_clamped},
              {"mean_tissue_intensity", mean_tissue_intensity(e.fit)},
              {"seed", c.value("seed", std::uint64_t{0})},
              {"config", c}};
    const std::string out = c.value("out", std::string());
    if (out.empty()) {
        std::cout << json_string(j);
    } else {
        make_parent_dirs(out);
        write_text(out, json_string(j));
    }
    return kOk;
}

// ---------------------------------------------------------------- fit-scaling

int run_fit_scaling(const json& c, const std::vector<std::string>& argv)
{
    const std::size_t bins = c.at("bins").get<std::size_t>();
    std::vector<IntensityGradientSample> samples;
    json rows = json::array();
    for (const auto& f : c.at("inputs")) {
        const Volume v = load_volume(f.get<std::string>());
        if (!v.grid().is_isotropic_1mm())
            log(0, "warning: " + f.get<std::string>() + " is not on a 1 mm isotropic grid");
        samples.push_back(intensity_gradient_sample(v, bins));
        rows.push_back({{"source", f}, {"mean_intensity", samples.back().mean_intensity},
                        {"gradient_sd", samples.back().gradient_sd}});
    }
    if (c.contains("phantoms")) {
        const json& p = c["phantoms"];
        PhantomSettings ps;
        ps.size = p.at("size").get<std::size_t>();
        ps.peak = p.at("peak").get<double>();
        for (const auto& s : p.at("seeds"))
            for (const auto& name : p.at("contrasts")) {
                const Contrast con = parse_contrast(name.get<std::string>());
                samples.push_back(intensity_gradient_sample(make_phantom(s.get<std::uint64_t>(), con, ps), bins));
                rows.push_back({{"source", "phantom:" + to_string(con) + ":" + std::to_string(s.get<std::uint64_t>())},
                                {"mean_intensity", samples.back().mean_intensity},
                                {"gradient_sd", samples.back().gradient_sd}});
                log(1, rows.back()["source"].get<std::string>() + ": mu " +
                           std::to_string(samples.back().mean_intensity) + ", s " +
                           std::to_string(samples.back().gradient_sd));
            }
    }
    if (samples.empty())
        throw std::invalid_argument("fit-scaling needs input volumes or --phantoms");
    const ScalingFit fit = fit_scaling(samples);
    json j = {{"slope", fit.slope},
              {"n_samples", fit.n_samples},
              {"residual_rms", fit.residual_rms},
              {"samples", rows}};
    json m = manifest("fit-scaling", c, argv);
    for (auto it = m.begin(); it != m.end(); ++it)
        j[it.key()] = it.value();
    const std::string out = c.value("out", std::string());
    if (out.empty()) {
        std::cout << json_string(j);
    } else {
        make_parent_dirs(out);
        write_text(out, json_string(j));
    }
    return kOk;
}

// ---------------------------------------------------------------- grid-search

int run_grid_search(const json& c, const std::vector<std::string>& argv)
{
    const Volume ref = load_truth(c);
    const auto profile = parse_profile_kind(c.at("profile").get<std::string>());
    const std::size_t bins = c.at("bins").get<std::size_t>();
    ReconProblem problem;
    problem.hr_grid = ref.grid();
    problem.prior = Prior::TV;
    problem.settings = solver_from(c);
    ContrastGroup grp;
    grp.id = "grid";
    double mu_sum = 0.0;
    const auto lr_files = c.at("lr").get<std::vector<std::string>>();
    if (lr_files.empty()) {
        const AcquisitionMeta meta = thick_slice_meta(ref.grid(), axis_from_name(c.at("axis").get<std::string>()),
                                                      c.at("factor").get<double>());
        Observation o;
        o.op = std::make_shared<const ProjectionOperator>(make_projection(ref.grid(), meta, profile));
        o.x = simulate_lr(*o.op, ref, c.at("noise").get<double>(), c.at("seed").get<std::uint64_t>());
        grp.observations.push_back(std::move(o));
    } else {
        for (const auto& f : lr_files) {
            Observation o;
            o.x = load_volume(f);
            o.op = std::make_shared<const ProjectionOperator>(
                make_projection(ref.grid(), meta_from_grid(o.x.grid()), profile));
            grp.observations.push_back(std::move(o));
        }
    }
    for (auto& o : grp.observations) {
        const NoiseEstimate ne = estimate_tau(o.x, bins);
        o.tau = ne.tau;
        mu_sum += mean_tissue_intensity(ne.fit);
    }
    ScalingFit fit;
    fit.slope = c.at("scaling_slope").get<double>();
    const double lambda_est = estimate_lambda(mu_sum / static_cast<double>(grp.observations.size()), fit);
    problem.groups.push_back(grp);

    auto lambdas = c.at("lambdas").get<std::vector<double>>();
    if (lambdas.empty())
        lambdas = default_lambda_grid();
    const auto table = grid_search_lambda(problem, lambdas, ref);

    std::ostringstream csv;
    csv << "lambda,psnr_db,converged\n";
    char buf[128];
    std::size_t best = 0;
    for (std::size_t i = 0; i < table.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.10g,%.10g,%d\n", table[i].lambda, table[i].psnr_db,
                      table[i].converged ? 1 : 0);
        csv << buf;
        if (table[i].psnr_db > table[best].psnr_db)
            best = i;
        log(1, "lambda " + std::to_string(table[i].lambda) + ": " + std::to_string(table[i].psnr_db) + " dB");
    }
    const std::string out = c.at("out").get<std::string>();
    make_parent_dirs(out);
    write_text(out, csv.str());

    problem.groups[0].lambda = lambda_est;
    const ReconResult at_est = admm_reconstruct(problem);
    json m = manifest("grid-search", c, argv);
    m["result"] = {{"estimated_lambda", lambda_est},
                   {"estimated_lambda_psnr_db", psnr(ref, at_est.images[0])},
                   {"best_lambda", table[best].lambda},
                   {"best_psnr_db", table[best].psnr_db}};
    write_text(sidecar_path(out), json_string(m));
    return kOk;
}

// ----------------------------------------------------------------- experiment

int run_experiment_cmd(const json& c, const std::vector<std::string>& argv)
{
    ExperimentSpec spec = parse_experiment_spec(c.at("spec").get<std::string>());
    spec.solver.threads = std::max(1, c.at("threads").get<int>());
    const auto rows = run_experiment(spec, [](const std::string& s) { log(1, s); });
    const std::string out = c.at("out").get<std::string>();
    make_parent_dirs(out);
    std::ostringstream csv;
    write_report_csv(csv, rows);
    write_text(out, csv.str());
    std::size_t failed = 0;
    for (const auto& r : rows)
        failed += r.status.starts_with("error") ? 1 : 0;
    json m = manifest("experiment", c, argv);
    m["seed"] = spec.seeds.front();
    m["result"] = {{"rows", rows.size()}, {"failed_rows", failed}, {"psnr_peak", "max of the reference volume"}};
    write_text(sidecar_path(out), json_string(m));
    if (failed)
        log(0, std::to_string(failed) + " experiment rows failed; see the status column");
    return kOk;
}

int dispatch(const std::string& command, const json& config, const std::vector<std::string>& argv)
{
    if (command == "reconstruct")
        return run_reconstruct(config, argv);
    if (command == "simulate")
        return run_simulate(config, argv);
    if (command == "estimate-noise")
        return run_estimate_noise(config, argv);
    if (command == "fit-scaling")
        return run_fit_scaling(config, argv);
    if (command == "grid-search")
        return run_grid_search(config, argv);
    if (command == "experiment")
        return run_experiment_cmd(config, argv);
    throw std::invalid_argument("unknown command '" + command + "' in manifest");
}

struct SolverArgs {
    double rho = 1.0;
    int max_iter = 200;
    double cg_tol = 1e-4;
    int cg_max_iter = 50;
    double eps_rel = 1e-3;
    bool no_adapt_rho = false;

    void bind(CLI::App* app)
    {
        app->add_option("--rho", rho, "ADMM penalty parameter (initial)")->capture_default_str();
        app->add_option("--max-iter", max_iter, "ADMM iteration limit")->capture_default_str();
        app->add_option("--cg-tol", cg_tol, "initial CG relative tolerance")->capture_default_str();
        app->add_option("--cg-max-iter", cg_max_iter, "CG iterations per ADMM step")->capture_default_str();
        app->add_option("--eps-rel", eps_rel, "relative residual stopping tolerance")->capture_default_str();
        app->add_flag("--no-adapt-rho", no_adapt_rho, "keep rho fixed");
    }

    void store(json& c) const
    {
        c["rho"] = rho;
        c["max_iter"] = max_iter;
        c["cg_tol"] = cg_tol;
        c["cg_max_iter"] = cg_max_iter;
        c["eps_rel"] = eps_rel;
        c["adapt_rho"] = !no_adapt_rho;
    }
};

struct PhantomArgs {
    std::size_t size = 0;
    std::uint64_t seed = 1;
    std::string contrast = "t1";
    double peak = 100.0;

    void bind(CLI::App* app)
    {
        app->add_option("--phantom", size, "use a generated N^3 head phantom as ground truth");
        app->add_option("--phantom-seed", seed, "phantom geometry seed")->capture_default_str();
        app->add_option("--phantom-contrast", contrast, "phantom contrast: t1, t2, pd, dwi")->capture_default_str();
        app->add_option("--phantom-peak", peak, "phantom intensity scale")->capture_default_str();
    }

    json to_json() const { return {{"size", size}, {"seed", seed}, {"contrast", contrast}, {"peak", peak}}; }
};

} // namespace

int main(int argc, char** argv)
{
    const std::vector<std::string> args(argv, argv + argc);
    CLI::App app{"Multi-contrast MRI super-resolution from thick-sliced scans"};
    app.require_subcommand(1);
    app.fallthrough();
    int threads = default_threads();
    std::uint64_t seed = 0;
    app.add_flag("-v,--verbose", g_verbosity, "more logging on stderr (repeatable)");
    app.add_option("--threads", threads, "worker threads (default from MTVSR_THREADS, else 1)");
    app.add_option("--seed", seed, "random seed, recorded in every output")->capture_default_str();

    // reconstruct
    auto* rec = app.add_subcommand("reconstruct", "reconstruct HR volumes from LR NIfTI stacks");
    std::vector<std::vector<std::string>> rec_contrasts;
    std::string rec_out, rec_prior = "mtv", rec_profile = "gaussian", rec_scaling;
    std::vector<double> rec_tau, rec_lambda;
    double rec_spacing = 1.0;
    std::size_t rec_bins = 1024;
    SolverArgs rec_solver;
    rec->add_option("--contrast", rec_contrasts, "LABEL FILE... (repeat once per contrast)")
        ->expected(2, CLI::detail::expected_max_vector_size)
        ->required();
    rec->add_option("-o,--out", rec_out, "output directory")->required();
    rec->add_option("--prior", rec_prior, "mtv, tv or fot")->capture_default_str();
    rec->add_option("--profile", rec_profile, "slice profile: gaussian, rect, delta")->capture_default_str();
    rec->add_option("--scaling", rec_scaling, "ScalingFit JSON from fit-scaling (default: built-in slope)");
    rec->add_option("--tau", rec_tau, "noise precision override: one value, or one per file")->delimiter(',');
    rec->add_option("--lambda", rec_lambda, "regularisation override: one value, or one per contrast");
    rec->add_option("--spacing", rec_spacing, "reconstruction voxel size in mm")->capture_default_str();
    rec->add_option("--bins", rec_bins, "histogram bins for noise estimation")->capture_default_str();
    rec_solver.bind(rec);

    // simulate
    auto* sim = app.add_subcommand("simulate", "simulate a thick-slice LR scan");
    std::string sim_input, sim_out, sim_hr_out, sim_axis = "z", sim_profile = "gaussian";
    double sim_factor = 7.0, sim_noise = 2.5, sim_shift = 0.0;
    PhantomArgs sim_phantom;
    sim->add_option("-i,--input", sim_input, "HR NIfTI ground truth");
    sim_phantom.bind(sim);
    sim->add_option("-o,--out", sim_out, "LR NIfTI output")->required();
    sim->add_option("--hr-out", sim_hr_out, "also write the ground truth here");
    sim->add_option("--axis", sim_axis, "slice axis x, y or z")->capture_default_str();
    sim->add_option("--factor", sim_factor, "slice thickness / in-plane spacing")->capture_default_str();
    sim->add_option("--noise", sim_noise, "Rician noise, percent of max intensity")->capture_default_str();
    sim->add_option("--shift", sim_shift, "slice shift in mm")->capture_default_str();
    sim->add_option("--profile", sim_profile, "slice profile: gaussian, rect, delta")->capture_default_str();

    // estimate-noise
    auto* noi = app.add_subcommand("estimate-noise", "fit a Rician mixture and report the noise level");
    std::string noi_input, noi_out;
    std::size_t noi_bins = 1024;
    MixtureSettings noi_ms;
    noi->add_option("input", noi_input, "NIfTI volume")->required();
    noi->add_option("-o,--out", noi_out, "write JSON here instead of stdout");
    noi->add_option("--bins", noi_bins, "histogram bins")->capture_default_str();
    noi->add_option("--classes", noi_ms.classes, "mixture classes")->capture_default_str();
    noi->add_option("--max-iter", noi_ms.max_iter, "EM iteration limit")->capture_default_str();
    noi->add_option("--tol", noi_ms.tol, "relative log-likelihood tolerance")->capture_default_str();

    // fit-scaling
    auto* fit = app.add_subcommand("fit-scaling", "fit gradient-SD vs tissue-intensity scaling on HR volumes");
    std::vector<std::string> fit_inputs, fit_contrasts{"t1", "t2", "pd"};
    std::string fit_out, fit_seeds;
    std::size_t fit_bins = 1024, fit_size = 64;
    double fit_peak = 100.0;
    fit->add_option("inputs", fit_inputs, "HR NIfTI volumes on 1 mm grids");
    fit->add_option("--phantoms", fit_seeds, "phantom seeds, e.g. 1000-1007");
    fit->add_option("--phantom-size", fit_size, "phantom size")->capture_default_str();
    fit->add_option("--phantom-peak", fit_peak, "phantom intensity scale")->capture_default_str();
    fit->add_option("--phantom-contrasts", fit_contrasts, "phantom contrasts")->delimiter(',')->capture_default_str();
    fit->add_option("-o,--out", fit_out, "write JSON here instead of stdout");
    fit->add_option("--bins", fit_bins, "histogram bins")->capture_default_str();

    // grid-search
    auto* grd = app.add_subcommand("grid-search", "PSNR of TV reconstructions over a lambda grid");
    std::string grd_input, grd_out, grd_axis = "z", grd_profile = "gaussian", grd_scaling;
    std::vector<std::string> grd_lr;
    std::vector<double> grd_lambdas;
    double grd_factor = 7.0, grd_noise = 2.5;
    std::size_t grd_bins = 1024;
    PhantomArgs grd_phantom;
    SolverArgs grd_solver;
    grd_solver.max_iter = 60;
    grd->add_option("-r,--reference", grd_input, "HR ground truth NIfTI (the reconstruction grid)");
    grd_phantom.bind(grd);
    grd->add_option("--lr", grd_lr, "LR NIfTI inputs (default: simulate one stack from the reference)");
    grd->add_option("-o,--out", grd_out, "CSV output")->required();
    grd->add_option("--lambdas", grd_lambdas, "lambda values (default: 10^-4 ... 10^1, 26 values)")->delimiter(',');
    grd->add_option("--axis", grd_axis, "simulated slice axis")->capture_default_str();
    grd->add_option("--factor", grd_factor, "simulated slice factor")->capture_default_str();
    grd->add_option("--noise", grd_noise, "simulated noise percent")->capture_default_str();
    grd->add_option("--profile", grd_profile, "slice profile")->capture_default_str();
    grd->add_option("--scaling", grd_scaling, "ScalingFit JSON for the reported lambda estimate");
    grd->add_option("--bins", grd_bins, "histogram bins")->capture_default_str();
    grd_solver.bind(grd);

    // experiment
    auto* exp = app.add_subcommand("experiment", "run an experiment described by a key = value file");
    std::string exp_config, exp_out;
    exp->add_option("config", exp_config, "experiment config file")->required();
    exp->add_option("-o,--out", exp_out, "CSV report")->required();

    // replay
    auto* rep = app.add_subcommand("replay", "re-run the command recorded in a manifest");
    std::string rep_manifest, rep_out;
    rep->add_option("manifest", rep_manifest, "manifest JSON written by an earlier run")->required();
    rep->add_option("-o,--out", rep_out, "replace the recorded output path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kBadArguments;
    }

    try {
        if (threads < 1)
            throw std::invalid_argument("--threads must be >= 1");
        auto solver_base = [&](const SolverArgs& s) {
            json c;
            s.store(c);
            c["seed"] = seed;
            c["threads"] = threads;
            return c;
        };
        auto truth_source = [&](const std::string& input, const PhantomArgs& p, json& c) {
            if (input.empty() == (p.size == 0))
                throw std::invalid_argument("give exactly one of --input/--reference or --phantom N");
            c["input"] = input;
            if (p.size > 0)
                c["phantom"] = p.to_json();
        };

        if (rec->parsed()) {
            json c = solver_base(rec_solver);
            c["out"] = rec_out;
            c["prior"] = to_string(parse_prior(rec_prior));
            c["profile"] = to_string(parse_profile_kind(rec_profile));
            c["spacing"] = rec_spacing;
            c["bins"] = rec_bins;
            c["scaling"] = rec_scaling;
            c["scaling_slope"] = rec_scaling.empty() ? kDefaultScalingSlope : scaling_slope_from_file(rec_scaling);
            c["tau"] = rec_tau;
            c["lambda"] = rec_lambda;
            json groups = json::array();
            for (const auto& g : rec_contrasts) {
                if (g.size() < 2)
                    throw std::invalid_argument("--contrast needs a label and at least one file");
                groups.push_back({{"label", g[0]}, {"files", std::vector<std::string>(g.begin() + 1, g.end())}});
            }
            c["contrasts"] = groups;
            return run_reconstruct(c, args);
        }
        if (sim->parsed()) {
            json c;
            truth_source(sim_input, sim_phantom, c);
            c["out"] = sim_out;
            c["hr_out"] = sim_hr_out;
            c["axis"] = sim_axis;
            c["factor"] = sim_factor;
            c["noise"] = sim_noise;
            c["shift"] = sim_shift;
            c["profile"] = to_string(parse_profile_kind(sim_profile));
            c["seed"] = seed;
            axis_from_name(sim_axis);
            return run_simulate(c, args);
        }
        if (noi->parsed()) {
            json c = {{"input", noi_input}, {"out", noi_out},           {"bins", noi_bins}, {"classes", noi_ms.classes},
                      {"max_iter", noi_ms.max_iter}, {"tol", noi_ms.tol}, {"seed", seed}};
            return run_estimate_noise(c, args);
        }
        if (fit->parsed()) {
            json c = {{"inputs", fit_inputs}, {"out", fit_out}, {"bins", fit_bins}, {"seed", seed}};
            if (!fit_seeds.empty()) {
                c["phantoms"] = {{"seeds", mtvsr::detail::parse_seeds(fit_seeds)}, {"size", fit_size}, {"peak", fit_peak},
                                 {"contrasts", fit_contrasts}};
            }
            return run_fit_scaling(c, args);
        }
        if (grd->parsed()) {
            json c = solver_base(grd_solver);
            truth_source(grd_input, grd_phantom, c);
            c["lr"] = grd_lr;
            c["out"] = grd_out;
            c["lambdas"] = grd_lambdas;
            c["axis"] = grd_axis;
            c["factor"] = grd_factor;
            c["noise"] = grd_noise;
            c["profile"] = to_string(parse_profile_kind(grd_profile));
            c["bins"] = grd_bins;
            c["scaling"] = grd_scaling;
            c["scaling_slope"] = grd_scaling.empty() ? kDefaultScalingSlope : scaling_slope_from_file(grd_scaling);
            axis_from_name(grd_axis);
            return run_grid_search(c, args);
        }
        if (exp->parsed()) {
            const ExperimentSpec spec = parse_experiment_spec(read_text(exp_config));
            json c = {{"config_file", exp_config}, {"spec", to_config(spec)}, {"out", exp_out},
                      {"threads", threads},        {"seed", spec.seeds.front()}};
            return run_experiment_cmd(c, args);
        }
        if (rep->parsed()) {
            const json m = read_json(rep_manifest);
            if (!m.contains("command") || !m.contains("config"))
                throw std::invalid_argument("'" + rep_manifest + "' is not an mtvsr manifest");
            json c = m["config"];
            if (!rep_out.empty())
                c["out"] = rep_out;
            if (c.contains("threads") && app.count("--threads"))
                c["threads"] = threads;
            return dispatch(m["command"].get<std::string>(), c, args);
        }
    } catch (const IoError& e) {
        std::cerr << "mtvsr: error: " << e.what() << "\n";
        return kIoFailure;
    } catch (const EstimationError& e) {
        std::cerr << "mtvsr: estimation failed: " << e.what() << "\n";
        return kEstimationFailure;
    } catch (const SolverError& e) {
        std::cerr << "mtvsr: solver failed: " << e.what() << "\n";
        return kNotConverged;
    } catch (const std::invalid_argument& e) {
        std::cerr << "mtvsr: error: " << e.what() << "\n";
        return kBadArguments;
    } catch (const json::exception& e) {
        std::cerr << "mtvsr: bad manifest: " << e.what() << "\n";
        return kBadArguments;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "mtvsr: error: " << e.what() << "\n";
        return kIoFailure;
    } catch (const std::exception& e) {
        std::cerr << "mtvsr: error: " << e.what() << "\n";
        return kIoFailure;
    }
    return kOk;
}
