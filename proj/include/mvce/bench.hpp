#pragma once

#include "mvce/estimators.hpp"
#include "mvce/memhe.hpp"
#include "mvce/model_io.hpp"

#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace mvce {

inline constexpr const char* library_version = "0.1.0";

struct UnknownEstimator : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct InitDistribution {
    enum class Type { Gaussian, Uniform };
    Type type = Type::Gaussian;
    Vector mean;   // gaussian
    Matrix cov;    // gaussian
    Vector lower;  // uniform
    Vector upper;  // uniform
};

struct ScenarioConfig {
    SystemModel model;
    std::optional<PolyhedralSet> constraint;
    InitDistribution init;
    // Simulation noise covariances; default to the model's Q and R. The
    // estimators always use the model values, so a mismatch is deliberate.
    std::optional<Matrix> process_noise_cov;
    std::optional<Matrix> measurement_noise_cov;
    int horizon = 4;
    int steps = 30;  // simulate t = 0..steps
    int paths = 200;
    std::vector<std::string> estimators{"kf", "mhe", "cmhe", "memhe"};
    std::uint64_t seed = 1;
    std::string out_dir = "bench_out";
    bool dump_trajectories = false;
    ToleranceConfig tol;
    std::string model_file;  // provenance echo for the summary
};

inline const std::vector<std::string>& known_estimators()
{
    static const std::vector<std::string> names{"kf", "fie", "mhe", "cfie", "cmhe", "memhe"};
    return names;
}

inline void validate_scenario(const ScenarioConfig& cfg)
{
    if (cfg.paths < 1) throw std::invalid_argument("scenario: paths must be >= 1");
    if (cfg.steps < 1) throw std::invalid_argument("scenario: steps must be >= 1");
    if (cfg.horizon < 0) throw std::invalid_argument("scenario: horizon must be >= 0");
    if (cfg.estimators.empty()) throw std::invalid_argument("scenario: estimator list is empty");
    const auto& known = known_estimators();
    for (const auto& name : cfg.estimators) {
        if (std::find(known.begin(), known.end(), name) == known.end())
            throw UnknownEstimator("scenario: unknown estimator " + name);
        if ((name == "cfie" || name == "cmhe") && !cfg.constraint)
            throw std::invalid_argument("scenario: " + name + " requires a constraint set");
    }
    const auto d = cfg.model.A.rows();
    if (cfg.process_noise_cov &&
        (cfg.process_noise_cov->rows() != d || cfg.process_noise_cov->cols() != d))
        throw DimensionMismatch("scenario: process noise covariance dimensions");
    if (cfg.measurement_noise_cov &&
        (cfg.measurement_noise_cov->rows() != cfg.model.C.rows() ||
         cfg.measurement_noise_cov->cols() != cfg.model.C.rows()))
        throw DimensionMismatch("scenario: measurement noise covariance dimensions");
    if (cfg.init.type == InitDistribution::Type::Gaussian) {
        if (cfg.init.mean.size() != d || cfg.init.cov.rows() != d || cfg.init.cov.cols() != d)
            throw DimensionMismatch("scenario: gaussian init dimensions");
    } else {
        if (cfg.init.lower.size() != d || cfg.init.upper.size() != d)
            throw DimensionMismatch("scenario: uniform init dimensions");
        if ((cfg.init.upper - cfg.init.lower).minCoeff() < 0)
            throw std::invalid_argument("scenario: uniform init needs lower <= upper");
    }
}

/// Sample factor for N(0, cov): Cholesky when PD, eigenvalue square root for
/// the degenerate case.
class GaussianSampler {
public:
    explicit GaussianSampler(const Matrix& cov)
    {
        Eigen::LLT<Matrix> llt(symmetrize(cov));
        if (llt.info() == Eigen::Success) {
            factor_ = llt.matrixL();
        } else {
            Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(cov));
            factor_ = es.eigenvectors() *
                      es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
        }
    }

    template <class Rng>
    Vector sample(Rng& rng, std::normal_distribution<double>& n01) const
    {
        Vector z(factor_.cols());
        for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = n01(rng);
        return factor_ * z;
    }

private:
    Matrix factor_;
};

struct PathData {
    std::vector<Vector> true_states;  // x_0..x_T
    std::map<std::string, std::vector<EstimateRecord>> records;
    std::map<std::string, std::string> failures;  // estimator -> diagnostic
};

struct BenchmarkDataset {
    ScenarioConfig config;
    std::vector<PathData> paths;

    /// FNV-1a over the canonical byte stream of the dataset; a pure function
    /// of (config, seed).
    std::uint64_t digest() const
    {
        std::uint64_t h = 1469598103934665603ull;
        auto mix_bytes = [&](const void* data, size_t len) {
            const auto* b = static_cast<const unsigned char*>(data);
            for (size_t i = 0; i < len; ++i) {
                h ^= b[i];
                h *= 1099511628211ull;
            }
        };
        auto mix_double = [&](double v) { mix_bytes(&v, sizeof(v)); };
        auto mix_vec = [&](const Vector& v) {
            for (Eigen::Index i = 0; i < v.size(); ++i) mix_double(v(i));
        };
        mix_bytes(&config.seed, sizeof(config.seed));
        for (const auto& path : paths) {
            for (const auto& x : path.true_states) mix_vec(x);
            for (const auto& [name, recs] : path.records) {
                mix_bytes(name.data(), name.size());
                for (const auto& rec : recs) {
                    mix_vec(rec.x_hat);
                    mix_double(rec.cost_trace);
                    const auto status = static_cast<std::uint8_t>(
                        rec.fallback ? 3 : static_cast<int>(rec.solver_status));
                    mix_bytes(&status, sizeof(status));
                }
            }
        }
        return h;
    }
};

namespace bench_detail {

inline std::mt19937_64 path_rng(std::uint64_t master_seed, int path_index)
{
    std::seed_seq seq{static_cast<std::uint32_t>(master_seed & 0xffffffffu),
                      static_cast<std::uint32_t>(master_seed >> 32),
                      static_cast<std::uint32_t>(path_index)};
    return std::mt19937_64(seq);
}

inline int bench_threads(int paths)
{
    int threads = static_cast<int>(std::thread::hardware_concurrency());
    if (threads <= 0) threads = 1;
    if (const char* env = std::getenv("BENCH_THREADS")) {
        const int cap = std::atoi(env);
        if (cap >= 1) threads = std::min(threads, cap);
    }
    return std::min(threads, paths);
}

inline std::vector<EstimateRecord> run_named_estimator(const std::string& name,
                                                       const ValidatedModel& model,
                                                       const std::optional<PolyhedralSet>& X,
                                                       int horizon,
                                                       const std::vector<Vector>& ys)
{
    std::vector<EstimateRecord> out;
    out.reserve(ys.size());
    if (name == "kf") {
        auto beliefs = kf_run(model, ys);
        for (size_t t = 0; t < beliefs.size(); ++t) {
            EstimateRecord rec;
            rec.t = static_cast<int>(t);
            rec.x_hat = beliefs[t].mean;
            rec.sigma = beliefs[t].cov;
            rec.cost_trace = beliefs[t].cov.trace();
            out.push_back(std::move(rec));
        }
        return out;
    }
    if (name == "memhe") {
        MemheEstimator est(model, horizon, X);
        for (const auto& y : ys) out.push_back(est.step(y));
        return out;
    }
    EstimatorMode mode;
    bool constrained = false;
    if (name == "fie") mode = EstimatorMode::Fie;
    else if (name == "mhe") mode = EstimatorMode::Mhe;
    else if (name == "cfie") { mode = EstimatorMode::Cfie; constrained = true; }
    else if (name == "cmhe") { mode = EstimatorMode::Cmhe; constrained = true; }
    else throw UnknownEstimator("unknown estimator " + name);
    Estimator est(model, mode, horizon, constrained ? X : std::nullopt);
    for (const auto& y : ys) out.push_back(est.step(y));
    return out;
}

} // namespace bench_detail

/// Seeded Monte-Carlo simulation: per path, draw x_0 from the configured
/// initial distribution, iterate the plant with fresh Gaussian noises and
/// feed every configured estimator. Per-path RNG substreams are derived from
/// (master seed, path index), so results are independent of execution order
/// and thread count. Estimator failures are recorded per path, never fatal.
inline BenchmarkDataset simulate_paths(const ScenarioConfig& cfg)
{
    validate_scenario(cfg);
    const ValidatedModel model = validate_model(cfg.model, cfg.tol);
    const int T = cfg.steps;
    const GaussianSampler qsampler(cfg.process_noise_cov ? *cfg.process_noise_cov : model.Q());
    const GaussianSampler rsampler(cfg.measurement_noise_cov ? *cfg.measurement_noise_cov
                                                             : model.R());
    const GaussianSampler init_sampler(
        cfg.init.type == InitDistribution::Type::Gaussian ? cfg.init.cov : Matrix::Zero(1, 1));

    BenchmarkDataset dataset;
    dataset.config = cfg;
    dataset.paths.resize(static_cast<size_t>(cfg.paths));

    std::atomic<int> next{0};
    auto worker = [&]() {
        for (;;) {
            const int i = next.fetch_add(1);
            if (i >= cfg.paths) return;
            auto rng = bench_detail::path_rng(cfg.seed, i);
            std::normal_distribution<double> n01(0.0, 1.0);

            PathData path;
            path.true_states.resize(static_cast<size_t>(T) + 1);
            std::vector<Vector> ys(static_cast<size_t>(T) + 1);

            Vector x0;
            if (cfg.init.type == InitDistribution::Type::Gaussian) {
                x0 = cfg.init.mean + init_sampler.sample(rng, n01);
            } else {
                x0 = Vector(cfg.model.A.rows());
                for (Eigen::Index k = 0; k < x0.size(); ++k) {
                    std::uniform_real_distribution<double> u(cfg.init.lower(k), cfg.init.upper(k));
                    x0(k) = u(rng);
                }
            }
            path.true_states[0] = x0;
            ys[0] = model.C() * x0 + rsampler.sample(rng, n01);
            for (int t = 1; t <= T; ++t) {
                path.true_states[static_cast<size_t>(t)] =
                    model.A() * path.true_states[static_cast<size_t>(t - 1)] +
                    qsampler.sample(rng, n01);
                ys[static_cast<size_t>(t)] =
                    model.C() * path.true_states[static_cast<size_t>(t)] +
                    rsampler.sample(rng, n01);
            }

            for (const auto& name : cfg.estimators) {
                try {
                    path.records[name] = bench_detail::run_named_estimator(
                        name, model, cfg.constraint, cfg.horizon, ys);
                } catch (const std::exception& e) {
                    path.failures[name] = e.what();
                }
            }
            dataset.paths[static_cast<size_t>(i)] = std::move(path);
        }
    };

    const int threads = bench_detail::bench_threads(cfg.paths);
    if (threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(static_cast<size_t>(threads));
        for (int k = 0; k < threads; ++k) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    return dataset;
}

/// Empirical mean squared error e_t = (1/N_s) sum_i ||x_t^i - xhat_t^i||^2.
inline std::vector<double> empirical_mse(const BenchmarkDataset& dataset,
                                         const std::string& estimator)
{
    const auto& names = dataset.config.estimators;
    if (std::find(names.begin(), names.end(), estimator) == names.end())
        throw UnknownEstimator("empirical_mse: estimator " + estimator + " not in dataset");
    const int T = dataset.config.steps;
    std::vector<double> sums(static_cast<size_t>(T) + 1, 0.0);
    int complete = 0;
    for (const auto& path : dataset.paths) {
        auto it = path.records.find(estimator);
        if (it == path.records.end() || static_cast<int>(it->second.size()) != T + 1) continue;
        ++complete;
        for (int t = 0; t <= T; ++t)
            sums[static_cast<size_t>(t)] +=
                (path.true_states[static_cast<size_t>(t)] - it->second[static_cast<size_t>(t)].x_hat)
                    .squaredNorm();
    }
    if (complete == 0) throw UnknownEstimator("empirical_mse: no complete paths for " + estimator);
    for (auto& s : sums) s /= complete;
    return sums;
}

// ---------------------------------------------------------------------------
// Artifact emission
// ---------------------------------------------------------------------------

namespace bench_detail {

inline void write_per_method_csv(const std::string& file, const BenchmarkDataset& dataset,
                                 bool costs)
{
    std::ofstream os(file, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + file);
    os.precision(17);
    os << "t";
    for (const auto& name : dataset.config.estimators) os << "," << name;
    os << "\r\n";
    const int T = dataset.config.steps;
    std::map<std::string, std::vector<double>> columns;
    for (const auto& name : dataset.config.estimators) {
        if (costs) {
            std::vector<double> sums(static_cast<size_t>(T) + 1, 0.0);
            int complete = 0;
            for (const auto& path : dataset.paths) {
                auto it = path.records.find(name);
                if (it == path.records.end() || static_cast<int>(it->second.size()) != T + 1)
                    continue;
                ++complete;
                for (int t = 0; t <= T; ++t)
                    sums[static_cast<size_t>(t)] += it->second[static_cast<size_t>(t)].cost_trace;
            }
            for (auto& s : sums) s /= std::max(complete, 1);
            columns[name] = std::move(sums);
        } else {
            columns[name] = empirical_mse(dataset, name);
        }
    }
    for (int t = 0; t <= T; ++t) {
        os << t;
        for (const auto& name : dataset.config.estimators)
            os << "," << columns[name][static_cast<size_t>(t)];
        os << "\r\n";
    }
}

inline void write_trajectories_csv(const std::string& file, const BenchmarkDataset& dataset)
{
    std::ofstream os(file, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + file);
    os.precision(17);
    const auto d = dataset.config.model.A.rows();
    os << "path,t";
    for (Eigen::Index i = 0; i < d; ++i) os << ",x_" << i;
    for (const auto& name : dataset.config.estimators)
        for (Eigen::Index i = 0; i < d; ++i) os << "," << name << "_x_" << i;
    os << "\r\n";
    for (size_t p = 0; p < dataset.paths.size(); ++p) {
        const auto& path = dataset.paths[p];
        for (int t = 0; t <= dataset.config.steps; ++t) {
            os << p << "," << t;
            for (Eigen::Index i = 0; i < d; ++i)
                os << "," << path.true_states[static_cast<size_t>(t)](i);
            for (const auto& name : dataset.config.estimators) {
                auto it = path.records.find(name);
                const bool ok =
                    it != path.records.end() && t < static_cast<int>(it->second.size());
                for (Eigen::Index i = 0; i < d; ++i) {
                    os << ",";
                    if (ok) os << it->second[static_cast<size_t>(t)].x_hat(i);
                }
            }
            os << "\r\n";
        }
    }
}

} // namespace bench_detail

/// Run a scenario and write mse.csv, costs.csv, summary.json (and optionally
/// trajectories.csv) into config.out_dir. Returns a process exit code.
inline int run_benchmark(const ScenarioConfig& cfg, std::ostream& err = std::cerr)
{
    try {
        validate_scenario(cfg);
        auto dataset = simulate_paths(cfg);
        namespace fs = std::filesystem;
        fs::create_directories(cfg.out_dir);

        bench_detail::write_per_method_csv(cfg.out_dir + "/mse.csv", dataset, /*costs=*/false);
        bench_detail::write_per_method_csv(cfg.out_dir + "/costs.csv", dataset, /*costs=*/true);
        if (cfg.dump_trajectories)
            bench_detail::write_trajectories_csv(cfg.out_dir + "/trajectories.csv", dataset);

        nlohmann::json summary;
        summary["version"] = library_version;
        summary["seed"] = cfg.seed;
        summary["paths"] = cfg.paths;
        summary["steps"] = cfg.steps;
        summary["horizon"] = cfg.horizon;
        summary["estimators"] = cfg.estimators;
        summary["model_file"] = cfg.model_file;
        summary["model"] = model_to_json(cfg.model, cfg.constraint);
        summary["prior_mismatch"] = cfg.init.type == InitDistribution::Type::Uniform;
        {
            std::ostringstream hex;
            hex << std::hex << dataset.digest();
            summary["dataset_digest"] = hex.str();
        }

        int failures = 0;
        for (const auto& path : dataset.paths) failures += static_cast<int>(path.failures.size());
        summary["estimator_failures"] = failures;

        for (const auto& name : cfg.estimators) {
            auto mse = empirical_mse(dataset, name);
            double mean = 0.0;
            for (double v : mse) mean += v;
            mean /= static_cast<double>(mse.size());
            summary["methods"][name] = {{"mean_mse", mean}, {"final_mse", mse.back()}};
        }

        // CFIE vs CMHE comparison (estimate norms and cost traces, path 0).
        const bool has_cfie = std::find(cfg.estimators.begin(), cfg.estimators.end(), "cfie") !=
                              cfg.estimators.end();
        const bool has_cmhe = std::find(cfg.estimators.begin(), cfg.estimators.end(), "cmhe") !=
                              cfg.estimators.end();
        if (has_cfie && has_cmhe && !dataset.paths.empty()) {
            const auto& path = dataset.paths.front();
            auto fi = path.records.find("cfie");
            auto mi = path.records.find("cmhe");
            if (fi != path.records.end() && mi != path.records.end() &&
                fi->second.size() == mi->second.size()) {
                double max_norm_diff = 0.0, max_cost_diff = 0.0;
                for (size_t t = 0; t < fi->second.size(); ++t) {
                    max_norm_diff = std::max(max_norm_diff,
                                             std::abs(fi->second[t].x_hat.norm() -
                                                      mi->second[t].x_hat.norm()));
                    max_cost_diff = std::max(max_cost_diff,
                                             std::abs(fi->second[t].cost_trace -
                                                      mi->second[t].cost_trace));
                }
                summary["cfie_cmhe"] = {{"max_norm_diff", max_norm_diff},
                                        {"max_cost_diff", max_cost_diff}};
            }
        }

        std::ofstream js(cfg.out_dir + "/summary.json");
        if (!js) throw std::runtime_error("cannot write summary.json");
        js << summary.dump(2) << "\n";
        return 0;
    } catch (const std::exception& e) {
        err << "bench: " << e.what() << "\n";
        return 1;
    }
}

// ---------------------------------------------------------------------------
// Scenario file parsing
// ---------------------------------------------------------------------------

inline ScenarioConfig load_scenario(const std::string& config_path)
{
    namespace fs = std::filesystem;
    std::ifstream in(config_path);
    if (!in) throw std::runtime_error("cannot open config: " + config_path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(std::string("config parse error: ") + e.what());
    }

    ScenarioConfig cfg;
    if (!j.contains("model_file")) throw std::runtime_error("config: missing model_file");
    fs::path model_path = j.at("model_file").get<std::string>();
    if (model_path.is_relative()) model_path = fs::path(config_path).parent_path() / model_path;
    cfg.model_file = model_path.string();
    auto mf = load_model_file(cfg.model_file);
    cfg.model = std::move(mf.model);
    cfg.constraint = std::move(mf.constraint);
    if (j.contains("constraint")) {  // scenario-level override
        const auto& c = j.at("constraint");
        PolyhedralSet set;
        set.H = detail::parse_matrix(c.at("H"), "constraint.H");
        set.h = detail::parse_vector(c.at("h"), "constraint.h");
        cfg.constraint = std::move(set);
    }

    cfg.init.mean = cfg.model.prior_mean;
    cfg.init.cov = cfg.model.prior_cov;
    if (j.contains("init")) {
        const auto& init = j.at("init");
        const std::string type = init.value("type", "gaussian");
        if (type == "gaussian") {
            cfg.init.type = InitDistribution::Type::Gaussian;
            if (init.contains("mean")) cfg.init.mean = detail::parse_vector(init.at("mean"), "init.mean");
            if (init.contains("cov")) cfg.init.cov = detail::parse_matrix(init.at("cov"), "init.cov");
        } else if (type == "uniform") {
            cfg.init.type = InitDistribution::Type::Uniform;
            cfg.init.lower = detail::parse_vector(init.at("lower"), "init.lower");
            cfg.init.upper = detail::parse_vector(init.at("upper"), "init.upper");
        } else {
            throw std::runtime_error("config: init.type must be gaussian or uniform");
        }
    }

    if (j.contains("noise")) {
        const auto& noise = j.at("noise");
        if (noise.contains("Q"))
            cfg.process_noise_cov = detail::parse_matrix(noise.at("Q"), "noise.Q");
        if (noise.contains("R"))
            cfg.measurement_noise_cov = detail::parse_matrix(noise.at("R"), "noise.R");
    }

    cfg.horizon = j.value("horizon", cfg.horizon);
    cfg.steps = j.value("steps", cfg.steps);
    cfg.paths = j.value("paths", cfg.paths);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.out_dir = j.value("out_dir", cfg.out_dir);
    cfg.dump_trajectories = j.value("dump_trajectories", cfg.dump_trajectories);
    if (j.contains("estimators"))
        cfg.estimators = j.at("estimators").get<std::vector<std::string>>();
    return cfg;
}

} // namespace mvce
