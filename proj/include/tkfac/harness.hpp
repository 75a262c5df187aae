#pragma once

#include "tkfac/analysis.hpp"
#include "tkfac/dataset.hpp"
#include "tkfac/metrics.hpp"
#include "tkfac/network.hpp"
#include "tkfac/optimizer.hpp"

#include <map>
#include <string>
#include <vector>

namespace tkfac {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ExperimentConfig {
    std::string task = "classify";      // classify | autoencoder | synthetic
    std::string dataset = "synthetic";  // mnist | synthetic
    std::string arch = "196-20-20-20-20-10";
    std::string activation = "relu";  // hidden activation: relu | sigmoid | identity
    std::string optimizer = "tkfac_nor";
    std::string label_mode = "model-sample";  // model-sample | data
    double alpha = 1e-3;
    double lambda = 1e-3;
    double nu = 1.0;
    double epsilon = 0.95;
    double tau = 0.9;
    int t_fim = 100;
    int t_inv = 100;
    int batch_size = 500;
    int epochs = 0;
    long iterations = 0;  // overrides epochs when > 0
    unsigned long long seed = 1;
    double lr_decay = 0.1;
    int lr_decay_every_epochs = 0;
    int metrics_every = 1;
    int analysis_every = 0;  // 0 disables the error-curve stream
    std::size_t analysis_cap = kDefaultBlockDimCap;
    int subset = 0;  // 0: full dataset
    bool downsample = false;
    int synthetic_count = 2000;
    int synthetic_classes = 10;
    int synthetic_dim = 196;
    std::string data_dir = "data";
    std::string output_dir = "out";

    void validate() const;
};

ExperimentConfig parse_config(const std::map<std::string, std::string>& kv);
ExperimentConfig parse_config_file(const std::string& path);
std::map<std::string, std::string> config_to_map(const ExperimentConfig& c);
void write_config_file(const ExperimentConfig& c, const std::string& path);

OptimizerKind parse_optimizer(const std::string& name);
Activation parse_activation(const std::string& name);

/// Builds the network named by the config: dash-separated dense widths, or
/// comma-separated conv tokens ("C<out>k<K>[s<S>][p<P>]", "F<out>").
/// Autoencoder archs list hidden widths; the data dimension is appended on
/// both ends and the output is sigmoid + binary cross-entropy.
Network build_network(const ExperimentConfig& c, const Dataset& data);

Dataset load_dataset(const ExperimentConfig& c);

TrainOptions train_options(const ExperimentConfig& c, const Dataset& data);

struct ExperimentResult {
    TrainResult train;
    std::vector<ErrorReport> error_reports;
    double final_loss = 0.0;
};

/// Runs the full experiment and persists the config snapshot, metrics CSV,
/// error-report CSV (when analysis is enabled), and a JSON summary under
/// config.output_dir. The metrics CSV is byte-reproducible for a fixed
/// config + seed; wall-clock timings go to a separate file.
ExperimentResult run_experiment(const ExperimentConfig& c);

void write_metrics_csv(const std::vector<MetricsRecord>& metrics, const std::string& path);
void write_timing_csv(const std::vector<MetricsRecord>& metrics, const std::string& path);
void write_error_csv(const std::vector<ErrorReport>& reports, const std::string& path);

} // namespace tkfac
