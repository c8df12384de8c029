#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pitpo/fitter.hpp"
#include "pitpo/grammar.hpp"
#include "pitpo/turbulence.hpp"

namespace pitpo::bench {

enum class Source : std::uint8_t { OdeSimulated, ClosedForm, Csv, TurbulenceCsv, SyntheticDictionary };

struct GroundTruth {
    std::string program;
    std::vector<double> coeffs;
};

struct TaskSpec {
    std::string name;
    Source source{Source::ClosedForm};
    Dataset data;
    std::optional<GroundTruth> ground_truth;
    // a known-good skeleton that is not claimed as the governing law
    std::optional<std::string> reference_program;
    double acc_tolerance{0.1};
    GrammarSpec grammar;
    // programs inserted into every island buffer before the first iteration
    std::vector<std::string> seed_programs;

    // dictionary tasks
    std::vector<std::string> dictionary;
    std::vector<std::size_t> true_support;

    // turbulence tasks: samples aligned with data.X rows
    std::optional<turb::Samples> turbulence;

    [[nodiscard]] Objective train_objective() const;
    [[nodiscard]] Objective objective(Split which) const;
};

Dataset gen_oscillator1(std::size_t n_points, unsigned seed, double rtol = 1e-9, double atol = 1e-11);
Dataset gen_oscillator2(std::size_t n_points, unsigned seed, double rtol = 1e-9, double atol = 1e-11);

struct EcoliParams {
    double mu_max{1.0};
    double K_S{1.0};
    double k{1.0};
    double x0{30.0};
    double c{1e-4};
    double x_decay{40.0};
    double pH_opt{7.0};
    double pH_min{4.0};
    double pH_max{10.0};
};

double ecoli_rate(const EcoliParams& p, double B, double S, double T, double pH);
Dataset gen_ecoli(std::size_t n_points, unsigned seed, const EcoliParams& p = {});

TaskSpec oscillator1_task(std::size_t n_points = 1000, unsigned seed = 0);
TaskSpec oscillator2_task(std::size_t n_points = 1000, unsigned seed = 0);
TaskSpec ecoli_task(std::size_t n_points = 1000, unsigned seed = 0);

struct CsvSchema {
    std::optional<std::string> target;  // default: last column
    std::string split_column{"split"};  // optional column with 0/1/2 = train/id/ood
};

Dataset load_csv_task(const std::string& path, const CsvSchema& schema = {});

// The twelve unary bases over one variable used for dictionaries and for the
// default external library of the exclusion analysis.
std::vector<std::string> unary_library(const std::string& var);

struct DictionaryOptions {
    std::size_t dict_size{10};
    std::size_t support{3};
    unsigned seed{0};
    double A{0.5};
    double B{2.0};
    std::size_t n_points{200};
    double lo{0.5};
    double hi{3.0};
    // seed every buffer with the truth plus one spurious dictionary term
    bool seed_spurious{false};
};

TaskSpec gen_dictionary_task(const DictionaryOptions& opt);

// Smallest dictionary subset whose least-squares fit reaches nmse <= tol;
// returns indices into `dictionary`, sorted.
std::vector<std::size_t> best_subset(const std::vector<std::string>& dictionary, const Dataset& d, double tol = 1e-16);

TaskSpec turbulence_synthetic_task(std::size_t n_points = 400, unsigned seed = 0);
TaskSpec turbulence_csv_task(const std::string& path);

struct Metrics {
    double nmse{0.0};
    double acc_all{0.0};
    double acc_avg{0.0};
};

// Relative-error accuracy skips rows with y == 0; throws when Var(y) == 0.
Metrics metrics(const Eigen::ArrayXd& pred, const Eigen::ArrayXd& y, double tau);

// Resolves oscillator1, oscillator2, ecoli, dictionary[:size:support[:seed]],
// turbulence-synthetic, turbulence:<csv>, or a CSV path.
TaskSpec load_task(const std::string& name, std::size_t n_points, unsigned seed);

}  // namespace pitpo::bench
