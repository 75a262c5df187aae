#include "tkfac/harness.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace tkfac {

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

bool parse_bool(const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("bad boolean value: " + v);
}

} // namespace

void ExperimentConfig::validate() const {
    if (task != "classify" && task != "autoencoder" && task != "synthetic")
        throw ConfigError("task must be classify, autoencoder, or synthetic");
    if (dataset != "mnist" && dataset != "synthetic")
        throw ConfigError("dataset must be mnist or synthetic");
    if (label_mode != "model-sample" && label_mode != "data")
        throw ConfigError("label_mode must be model-sample or data");
    if (alpha <= 0.0) throw ConfigError("alpha must be positive");
    if (lambda < 0.0) throw ConfigError("lambda must be nonnegative");
    if (nu <= 0.0) throw ConfigError("nu must be positive");
    if (epsilon < 0.0 || epsilon >= 1.0) throw ConfigError("epsilon must be in [0, 1)");
    if (tau < 0.0 || tau >= 1.0) throw ConfigError("tau must be in [0, 1)");
    if (t_fim < 1 || t_inv < 1) throw ConfigError("update intervals must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (epochs < 0 || iterations < 0) throw ConfigError("epochs/iterations must be >= 0");
    if (epochs == 0 && iterations == 0) throw ConfigError("set epochs or iterations");
    parse_optimizer(optimizer);
    parse_activation(activation);
}

OptimizerKind parse_optimizer(const std::string& name) {
    if (name == "tkfac_nor") return OptimizerKind::tkfac_nor;
    if (name == "tkfac_new") return OptimizerKind::tkfac_new;
    if (name == "kfac") return OptimizerKind::kfac;
    if (name == "sgdm") return OptimizerKind::sgdm;
    if (name == "adam") return OptimizerKind::adam;
    throw ConfigError("unknown optimizer: " + name);
}

Activation parse_activation(const std::string& name) {
    if (name == "relu") return Activation::relu;
    if (name == "sigmoid") return Activation::sigmoid;
    if (name == "identity") return Activation::identity;
    throw ConfigError("unknown activation: " + name);
}

ExperimentConfig parse_config(const std::map<std::string, std::string>& kv) {
    ExperimentConfig c;
    for (const auto& [key, value] : kv) {
        if (key == "task") c.task = value;
        else if (key == "dataset") c.dataset = value;
        else if (key == "arch") c.arch = value;
        else if (key == "activation") c.activation = value;
        else if (key == "optimizer") c.optimizer = value;
        else if (key == "label_mode") c.label_mode = value;
        else if (key == "alpha") c.alpha = std::stod(value);
        else if (key == "lambda") c.lambda = std::stod(value);
        else if (key == "nu") c.nu = std::stod(value);
        else if (key == "epsilon") c.epsilon = std::stod(value);
        else if (key == "tau") c.tau = std::stod(value);
        else if (key == "t_fim") c.t_fim = std::stoi(value);
        else if (key == "t_inv") c.t_inv = std::stoi(value);
        else if (key == "batch_size") c.batch_size = std::stoi(value);
        else if (key == "epochs") c.epochs = std::stoi(value);
        else if (key == "iterations") c.iterations = std::stol(value);
        else if (key == "seed") c.seed = std::stoull(value);
        else if (key == "lr_decay") c.lr_decay = std::stod(value);
        else if (key == "lr_decay_every_epochs") c.lr_decay_every_epochs = std::stoi(value);
        else if (key == "metrics_every") c.metrics_every = std::stoi(value);
        else if (key == "analysis_every") c.analysis_every = std::stoi(value);
        else if (key == "analysis_cap") c.analysis_cap = (std::size_t)std::stoull(value);
        else if (key == "subset") c.subset = std::stoi(value);
        else if (key == "downsample") c.downsample = parse_bool(value);
        else if (key == "synthetic_count") c.synthetic_count = std::stoi(value);
        else if (key == "synthetic_classes") c.synthetic_classes = std::stoi(value);
        else if (key == "synthetic_dim") c.synthetic_dim = std::stoi(value);
        else if (key == "data_dir") c.data_dir = value;
        else if (key == "output_dir") c.output_dir = value;
        else throw ConfigError("unknown config key: " + key);
    }
    c.validate();
    return c;
}

ExperimentConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::map<std::string, std::string> kv;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const std::size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
        kv[trim(t.substr(0, eq))] = trim(t.substr(eq + 1));
    }
    return parse_config(kv);
}

std::map<std::string, std::string> config_to_map(const ExperimentConfig& c) {
    std::map<std::string, std::string> kv;
    kv["task"] = c.task;
    kv["dataset"] = c.dataset;
    kv["arch"] = c.arch;
    kv["activation"] = c.activation;
    kv["optimizer"] = c.optimizer;
    kv["label_mode"] = c.label_mode;
    kv["alpha"] = fmt_double(c.alpha);
    kv["lambda"] = fmt_double(c.lambda);
    kv["nu"] = fmt_double(c.nu);
    kv["epsilon"] = fmt_double(c.epsilon);
    kv["tau"] = fmt_double(c.tau);
    kv["t_fim"] = std::to_string(c.t_fim);
    kv["t_inv"] = std::to_string(c.t_inv);
    kv["batch_size"] = std::to_string(c.batch_size);
    kv["epochs"] = std::to_string(c.epochs);
    kv["iterations"] = std::to_string(c.iterations);
    kv["seed"] = std::to_string(c.seed);
    kv["lr_decay"] = fmt_double(c.lr_decay);
    kv["lr_decay_every_epochs"] = std::to_string(c.lr_decay_every_epochs);
    kv["metrics_every"] = std::to_string(c.metrics_every);
    kv["analysis_every"] = std::to_string(c.analysis_every);
    kv["analysis_cap"] = std::to_string(c.analysis_cap);
    kv["subset"] = std::to_string(c.subset);
    kv["downsample"] = c.downsample ? "true" : "false";
    kv["synthetic_count"] = std::to_string(c.synthetic_count);
    kv["synthetic_classes"] = std::to_string(c.synthetic_classes);
    kv["synthetic_dim"] = std::to_string(c.synthetic_dim);
    kv["data_dir"] = c.data_dir;
    kv["output_dir"] = c.output_dir;
    return kv;
}

void write_config_file(const ExperimentConfig& c, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write config file: " + path);
    for (const auto& [key, value] : config_to_map(c)) out << key << " = " << value << "\n";
}

Dataset load_dataset(const ExperimentConfig& c) {
    Dataset d;
    if (c.dataset == "mnist" && c.task != "synthetic") {
        std::string dir = c.data_dir;
        if (const char* env = std::getenv("TKFAC_DATA_DIR")) dir = env;
        d = load_mnist_idx(dir + "/train-images-idx3-ubyte", dir + "/train-labels-idx1-ubyte");
    } else {
        SyntheticSpec spec;
        spec.dim = c.synthetic_dim;
        spec.count = c.synthetic_count;
        spec.classes = c.synthetic_classes;
        // Square image geometry when possible, else a 1 x dim strip.
        int side = (int)std::lround(std::sqrt((double)spec.dim));
        if (side * side == spec.dim) {
            spec.image_h = side;
            spec.image_w = side;
        } else {
            spec.image_h = 1;
            spec.image_w = spec.dim;
        }
        d = synthetic_dataset(spec, c.seed + 7919);
    }
    if (c.downsample) d = downsample_2x2(d);
    if (c.subset > 0) d = subset(d, c.subset, c.seed + 104729);
    return d;
}

namespace {

std::vector<int> parse_widths(const std::string& arch) {
    std::vector<int> widths;
    std::stringstream ss(arch);
    std::string tok;
    while (std::getline(ss, tok, '-')) {
        if (tok.empty()) throw ConfigError("bad architecture string: " + arch);
        widths.push_back(std::stoi(tok));
    }
    if (widths.empty()) throw ConfigError("empty architecture string");
    return widths;
}

// Conv tokens: "C<out>k<K>[s<S>][p<P>]" (conv + hidden activation) and
// "F<out>" (dense). The final layer must be an F token.
Network build_conv_network(const ExperimentConfig& c, const Dataset& data) {
    const Activation hidden = parse_activation(c.activation);
    std::vector<LayerSpec> layers;
    int channels = data.channels;
    int h = data.image_h;
    int w = data.image_w;
    bool flattened = false;
    int flat_dim = channels * h * w;

    std::stringstream ss(c.arch);
    std::string tok;
    std::vector<std::string> toks;
    while (std::getline(ss, tok, ',')) toks.push_back(trim(tok));

    for (std::size_t i = 0; i < toks.size(); ++i) {
        const std::string& t = toks[i];
        const bool last = i + 1 == toks.size();
        if (t.empty()) throw ConfigError("bad conv architecture: " + c.arch);
        if (t[0] == 'C') {
            if (flattened) throw ConfigError("conv layer after dense layer: " + c.arch);
            int out_ch = 0, k = 0, s = 1, p = 0;
            std::size_t pos = 1;
            auto read_int = [&](std::size_t& at) {
                std::size_t end = at;
                while (end < t.size() && std::isdigit((unsigned char)t[end])) ++end;
                if (end == at) throw ConfigError("bad conv token: " + t);
                int v = std::stoi(t.substr(at, end - at));
                at = end;
                return v;
            };
            out_ch = read_int(pos);
            while (pos < t.size()) {
                const char tag = t[pos++];
                const int v = read_int(pos);
                if (tag == 'k') k = v;
                else if (tag == 's') s = v;
                else if (tag == 'p') p = v;
                else throw ConfigError("bad conv token: " + t);
            }
            if (k < 1) throw ConfigError("conv token needs a kernel size: " + t);
            ConvGeom geom{h, w, k, s, p};
            layers.push_back(LayerSpec::conv_layer(channels, out_ch, geom, hidden));
            channels = out_ch;
            h = geom.out_h();
            w = geom.out_w();
            flat_dim = channels * h * w;
        } else if (t[0] == 'F') {
            const int out = std::stoi(t.substr(1));
            layers.push_back(
                LayerSpec::dense_layer(flat_dim, out, last ? Activation::identity : hidden));
            flattened = true;
            flat_dim = out;
        } else {
            throw ConfigError("bad architecture token: " + t);
        }
    }
    return Network::make(std::move(layers), LossKind::softmax_cross_entropy);
}

} // namespace

Network build_network(const ExperimentConfig& c, const Dataset& data) {
    if (c.arch.find(',') != std::string::npos || c.arch.find('C') != std::string::npos ||
        c.arch.find('F') != std::string::npos)
        return build_conv_network(c, data);

    const Activation hidden = parse_activation(c.activation);
    std::vector<int> widths = parse_widths(c.arch);
    std::vector<LayerSpec> layers;

    if (c.task == "autoencoder") {
        // arch lists the hidden widths; data dimension bounds both ends.
        std::vector<int> full;
        full.push_back(data.dim());
        for (int wd : widths) full.push_back(wd);
        full.push_back(data.dim());
        for (std::size_t l = 1; l < full.size(); ++l) {
            const bool last = l + 1 == full.size();
            layers.push_back(LayerSpec::dense_layer(full[l - 1], full[l],
                                                    last ? Activation::sigmoid : hidden));
        }
        return Network::make(std::move(layers), LossKind::binary_cross_entropy);
    }

    if (widths.front() != data.dim())
        throw ConfigError("architecture input width " + std::to_string(widths.front()) +
                          " does not match data dimension " + std::to_string(data.dim()));
    for (std::size_t l = 1; l < widths.size(); ++l) {
        const bool last = l + 1 == widths.size();
        layers.push_back(LayerSpec::dense_layer(widths[l - 1], widths[l],
                                                last ? Activation::identity : hidden));
    }
    return Network::make(std::move(layers), LossKind::softmax_cross_entropy);
}

TrainOptions train_options(const ExperimentConfig& c, const Dataset& data) {
    TrainOptions o;
    o.optimizer = parse_optimizer(c.optimizer);
    o.alpha = c.alpha;
    o.damping.mode =
        o.optimizer == OptimizerKind::tkfac_new ? DampingMode::new_conv : DampingMode::normal;
    o.damping.lambda = c.lambda;
    o.damping.nu = c.nu;
    o.epsilon = c.epsilon;
    o.tau = c.tau;
    o.t_fim = c.t_fim;
    o.t_inv = c.t_inv;
    o.batch_size = c.batch_size;
    o.seed = c.seed;
    o.fisher_labels = c.label_mode == "data" ? LabelMode::data : LabelMode::model_sample;
    o.lr_decay = c.lr_decay;
    o.lr_decay_every_epochs = c.lr_decay_every_epochs;
    o.metrics_every = c.metrics_every;
    o.analysis_every = c.analysis_every;
    const int iters_per_epoch = std::max(1, data.sample_count() / c.batch_size);
    o.iterations = c.iterations > 0 ? c.iterations : (long)c.epochs * iters_per_epoch;
    return o;
}

void write_metrics_csv(const std::vector<MetricsRecord>& metrics, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write metrics file: " + path);
    const std::size_t n_layers = metrics.empty() ? 0 : metrics.front().layer_delta.size();
    out << "# tkfac-metrics v1\n";
    out << "iteration,epoch,loss,error,beta";
    for (std::size_t l = 0; l < n_layers; ++l) out << ",delta_" << l;
    for (std::size_t l = 0; l < n_layers; ++l) out << ",damping_ratio_" << l;
    out << "\n";
    for (const MetricsRecord& m : metrics) {
        out << m.iteration << "," << m.epoch << "," << fmt_double(m.loss) << ","
            << fmt_double(m.error) << "," << fmt_double(m.beta);
        for (double d : m.layer_delta) out << "," << fmt_double(d);
        for (double r : m.layer_damping_ratio) out << "," << fmt_double(r);
        out << "\n";
    }
}

void write_timing_csv(const std::vector<MetricsRecord>& metrics, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write timing file: " + path);
    out << "# tkfac-timing v1\niteration,seconds\n";
    for (const MetricsRecord& m : metrics) out << m.iteration << "," << fmt_double(m.seconds) << "\n";
}

void write_error_csv(const std::vector<ErrorReport>& reports, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write error report file: " + path);
    out << "# tkfac-errors v1\n";
    out << "iteration,layer,block_dim,tkfac_error,kfac_error,tkfac_bound,kfac_bound,"
           "trace_exact,trace_tkfac\n";
    for (const ErrorReport& r : reports)
        for (const LayerErrorEntry& e : r.layers)
            out << r.iteration << "," << e.layer << "," << e.block_dim << ","
                << fmt_double(e.tkfac_error) << "," << fmt_double(e.kfac_error) << ","
                << fmt_double(e.tkfac_bound) << "," << fmt_double(e.kfac_bound) << ","
                << fmt_double(e.trace_exact) << "," << fmt_double(e.trace_tkfac) << "\n";
}

ExperimentResult run_experiment(const ExperimentConfig& c) {
    c.validate();
    Dataset data = load_dataset(c);

    Network net = build_network(c, data);
    std::mt19937_64 init_rng(c.seed);
    net.init_weights(init_rng);

    TrainData train;
    train.inputs = data.inputs;
    train.labels = data.labels;
    train.autoencoder = c.task == "autoencoder";

    TrainOptions opts = train_options(c, data);

    ExperimentResult result;
    if (c.analysis_every > 0) {
        opts.on_analysis = [&](long iter, const Network& n, const BatchTrace& trace) {
            result.error_reports.push_back(error_report(n, trace, iter, c.analysis_cap));
        };
    }

    std::filesystem::create_directories(c.output_dir);
    write_config_file(c, c.output_dir + "/config.txt");

    result.train = run_training(net, train, opts);
    result.final_loss = result.train.final_loss;

    write_metrics_csv(result.train.metrics, c.output_dir + "/metrics.csv");
    write_timing_csv(result.train.metrics, c.output_dir + "/timing.csv");
    if (!result.error_reports.empty())
        write_error_csv(result.error_reports, c.output_dir + "/errors.csv");

    nlohmann::json summary;
    summary["optimizer"] = c.optimizer;
    summary["task"] = c.task;
    summary["seed"] = c.seed;
    summary["iterations"] = result.train.iterations;
    summary["final_loss"] = result.final_loss;
    if (!result.train.metrics.empty()) {
        double best_loss = result.train.metrics.front().loss;
        double final_error = result.train.metrics.back().error;
        for (const MetricsRecord& m : result.train.metrics) best_loss = std::min(best_loss, m.loss);
        summary["best_loss"] = best_loss;
        summary["final_error"] = final_error;
        summary["total_step_seconds"] = result.train.metrics.back().seconds;
    }
    std::ofstream js(c.output_dir + "/summary.json");
    js << summary.dump(2) << "\n";

    return result;
}

} // namespace tkfac
