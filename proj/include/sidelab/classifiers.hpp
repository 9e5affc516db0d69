// SPDX-License-Identifier: Apache-2.0
//
// This file is part of sidelab, a desk-scale side-channel laboratory.
//
// Profiling attackers: MLP and 1-D CNN specs, RMSprop training on labeled
// trace datasets, a shared prediction interface and a finite-difference
// gradient check.

#ifndef SIDELAB_CLASSIFIERS_HPP
#define SIDELAB_CLASSIFIERS_HPP

#include <json.hpp>

#include <variant>

#include "sidelab/dataset.hpp"
#include "sidelab/nn.hpp"

namespace sidelab::clf {

enum class Activation : uint8_t { Relu, Sigmoid, Tanh };

inline const char *activation_name(Activation a) {
    switch (a) {
    case Activation::Relu: return "relu";
    case Activation::Sigmoid: return "sigmoid";
    case Activation::Tanh: return "tanh";
    }
    return "?";
}

inline Activation activation_from(const std::string &s) {
    if (s == "relu")
        return Activation::Relu;
    if (s == "sigmoid")
        return Activation::Sigmoid;
    if (s == "tanh")
        return Activation::Tanh;
    throw Error("unknown activation: " + s);
}

struct MlpSpec {
    std::vector<std::size_t> hidden{200, 200, 200, 200, 200};
    std::vector<Activation> activations; // one per hidden layer; ReLU if empty
};

struct CnnSpec {
    struct Block {
        std::size_t filters = 8;
        std::size_t kernel = 11;
        std::size_t pool = 2;
    };
    std::vector<Block> blocks{{8, 11, 2}, {16, 11, 2}, {32, 11, 2}, {64, 11, 2}};
    std::vector<std::size_t> dense{512};
};

using ArchSpec = std::variant<MlpSpec, CnnSpec>;

struct TrainConfig {
    double learning_rate = 1e-4;
    std::size_t batch_size = 256;
    std::size_t epochs = 10;
    uint64_t seed = 0;
    int class_count = 9;
};

template <class T>
nn::Network<T> build_network(const ArchSpec &spec, std::size_t input_len, int class_count, Rng &rng) {
    nn::Network<T> net;
    if (std::holds_alternative<MlpSpec>(spec)) {
        const auto &mlp = std::get<MlpSpec>(spec);
        std::size_t width = input_len;
        for (std::size_t i = 0; i < mlp.hidden.size(); ++i) {
            net.layers.push_back(std::make_unique<nn::Dense<T>>(width, mlp.hidden[i], rng));
            Activation act = i < mlp.activations.size() ? mlp.activations[i] : Activation::Relu;
            switch (act) {
            case Activation::Relu: net.layers.push_back(std::make_unique<nn::ReLU<T>>()); break;
            case Activation::Sigmoid: net.layers.push_back(std::make_unique<nn::Sigmoid<T>>()); break;
            case Activation::Tanh: net.layers.push_back(std::make_unique<nn::Tanh<T>>()); break;
            }
            width = mlp.hidden[i];
        }
        net.layers.push_back(std::make_unique<nn::Dense<T>>(width, class_count, rng));
    } else {
        const auto &cnn = std::get<CnnSpec>(spec);
        std::size_t channels = 1, length = input_len;
        for (const auto &b : cnn.blocks) {
            auto conv = std::make_unique<nn::Conv1d<T>>(channels, b.filters, b.kernel, length, rng);
            length = conv->output_length();
            net.layers.push_back(std::move(conv));
            net.layers.push_back(std::make_unique<nn::ReLU<T>>());
            auto pool = std::make_unique<nn::AvgPool1d<T>>(b.filters, b.pool, length);
            length = pool->output_length();
            net.layers.push_back(std::move(pool));
            channels = b.filters;
            if (length == 0)
                throw Error("cnn blocks reduce the feature length to zero");
        }
        std::size_t width = channels * length;
        for (std::size_t d : cnn.dense) {
            net.layers.push_back(std::make_unique<nn::Dense<T>>(width, d, rng));
            net.layers.push_back(std::make_unique<nn::ReLU<T>>());
            width = d;
        }
        net.layers.push_back(std::make_unique<nn::Dense<T>>(width, class_count, rng));
    }
    return net;
}

struct ClassifierModel {
    ArchSpec spec;
    TrainConfig config;
    std::size_t input_len = 0;
    nn::Network<float> net;
    data::StandardizationStats stats; // profiling-set statistics the model expects
    std::vector<double> training_log; // mean loss per epoch
};

/// Trains with RMSprop on softmax cross-entropy (categorical for m>2,
/// binary for m=2 — identical under a 2-way softmax). Single-threaded and
/// seed-deterministic.
inline ClassifierModel train(const data::Dataset &profiling, const ArchSpec &spec, const TrainConfig &config,
                             const data::StandardizationStats &stats) {
    if (profiling.size() == 0)
        throw Error("empty profiling set");
    for (const auto &r : profiling.records)
        if (r.label >= config.class_count)
            throw Error("label " + std::to_string(r.label) + " out of range for " +
                        std::to_string(config.class_count) + " classes");

    ClassifierModel model;
    model.spec = spec;
    model.config = config;
    model.input_len = profiling.n;
    model.stats = stats;
    Rng init_rng(derive_seed(config.seed, "init"));
    model.net = build_network<float>(spec, profiling.n, config.class_count, init_rng);

    nn::RmsProp<float> opt(config.learning_rate);
    Rng shuffle_rng(derive_seed(config.seed, "shuffle"));
    std::vector<std::size_t> order(profiling.size());
    for (std::size_t i = 0; i < order.size(); ++i)
        order[i] = i;

    nn::Batch<float> batch, logits, grad;
    std::vector<uint8_t> labels;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        for (std::size_t i = order.size() - 1; i > 0; --i)
            std::swap(order[i], order[shuffle_rng.uniform_int(i + 1)]);
        double epoch_loss = 0;
        std::size_t batches = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
            std::size_t rows = std::min(config.batch_size, order.size() - begin);
            batch.resize(rows, profiling.n);
            labels.resize(rows);
            for (std::size_t r = 0; r < rows; ++r) {
                auto t = profiling.trace(order[begin + r]);
                std::copy(t.begin(), t.end(), batch.row(r));
                labels[r] = profiling.records[order[begin + r]].label;
            }
            model.net.forward(batch, logits);
            double loss = nn::cross_entropy(logits, labels, grad);
            if (!std::isfinite(loss))
                throw Error("non-finite training loss in epoch " + std::to_string(epoch) +
                            "; lower the learning rate");
            model.net.zero_grads();
            model.net.backward(grad);
            opt.step(model.net);
            epoch_loss += loss;
            ++batches;
        }
        model.training_log.push_back(epoch_loss / static_cast<double>(batches));
    }
    return model;
}

/// Softmax prediction for a batch of standardized traces (row-major).
inline std::vector<PredictionVector> predict_batch(const ClassifierModel &model, const float *rows,
                                                   std::size_t count, std::size_t n) {
    if (n != model.input_len)
        throw Error("trace length mismatch: got " + std::to_string(n) + ", model expects " +
                    std::to_string(model.input_len));
    nn::Batch<float> in;
    in.rows = count;
    in.cols = n;
    in.v.assign(rows, rows + count * n);
    nn::Batch<float> logits;
    model.net.infer(in, logits);
    nn::softmax_rows(logits);
    std::vector<PredictionVector> out(count);
    for (std::size_t r = 0; r < count; ++r) {
        PredictionVector d(logits.cols);
        double sum = 0;
        for (std::size_t c = 0; c < logits.cols; ++c) {
            d[c] = logits.row(r)[c];
            sum += d[c];
        }
        for (auto &v : d)
            v /= sum;
        out[r] = std::move(d);
    }
    return out;
}

inline PredictionVector predict(const ClassifierModel &model, std::span<const float> trace) {
    return predict_batch(model, trace.data(), 1, trace.size())[0];
}

inline std::vector<PredictionVector> predict_dataset(const ClassifierModel &model, const data::Dataset &ds) {
    return predict_batch(model, ds.samples.data(), ds.size(), ds.n);
}

/// Maximum relative error between analytic gradients and central finite
/// differences (h = 1e-5) over all parameters, in double precision.
inline double gradient_check(const ArchSpec &spec, std::size_t input_len, int class_count,
                             const std::vector<double> &inputs, const std::vector<uint8_t> &labels,
                             uint64_t seed = 1) {
    std::size_t rows = labels.size();
    if (inputs.size() != rows * input_len)
        throw Error("gradient check input size mismatch");
    Rng rng(seed);
    nn::Network<double> net = build_network<double>(spec, input_len, class_count, rng);

    nn::Batch<double> in;
    in.rows = rows;
    in.cols = input_len;
    in.v = inputs;

    nn::Batch<double> logits, grad;
    net.forward(in, logits);
    nn::cross_entropy(logits, labels, grad);
    net.zero_grads();
    net.backward(grad);

    std::vector<double> analytic;
    for (auto &l : net.layers) {
        auto g = l->grads();
        analytic.insert(analytic.end(), g.begin(), g.end());
    }
    std::vector<double> params = net.flat_params();

    const double h = 1e-5;
    double max_rel = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        std::vector<double> p = params;
        p[i] = params[i] + h;
        net.set_flat_params(p);
        net.forward(in, logits);
        double up = nn::cross_entropy(logits, labels, grad);
        p[i] = params[i] - h;
        net.set_flat_params(p);
        net.forward(in, logits);
        double down = nn::cross_entropy(logits, labels, grad);
        double numeric = (up - down) / (2 * h);
        double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
        max_rel = std::max(max_rel, std::abs(analytic[i] - numeric) / denom);
    }
    net.set_flat_params(params);
    return max_rel;
}

// Serialization: magic "SLM1", u32 header length, JSON header (spec, config,
// stats, training log), then the raw float32 parameter blob.

inline nlohmann::json spec_to_json(const ArchSpec &spec) {
    nlohmann::json j;
    if (std::holds_alternative<MlpSpec>(spec)) {
        const auto &m = std::get<MlpSpec>(spec);
        j["kind"] = "mlp";
        j["hidden"] = m.hidden;
        std::vector<std::string> acts;
        for (auto a : m.activations)
            acts.push_back(activation_name(a));
        j["activations"] = acts;
    } else {
        const auto &c = std::get<CnnSpec>(spec);
        j["kind"] = "cnn";
        auto blocks = nlohmann::json::array();
        for (const auto &b : c.blocks)
            blocks.push_back({{"filters", b.filters}, {"kernel", b.kernel}, {"pool", b.pool}});
        j["blocks"] = blocks;
        j["dense"] = c.dense;
    }
    return j;
}

inline ArchSpec spec_from_json(const nlohmann::json &j) {
    if (j.at("kind") == "mlp") {
        MlpSpec m;
        m.hidden = j.at("hidden").get<std::vector<std::size_t>>();
        m.activations.clear();
        for (const auto &a : j.at("activations"))
            m.activations.push_back(activation_from(a.get<std::string>()));
        return m;
    }
    CnnSpec c;
    c.blocks.clear();
    for (const auto &b : j.at("blocks"))
        c.blocks.push_back({b.at("filters").get<std::size_t>(), b.at("kernel").get<std::size_t>(),
                            b.at("pool").get<std::size_t>()});
    c.dense = j.at("dense").get<std::vector<std::size_t>>();
    return c;
}

inline void write_model(const std::filesystem::path &path, const ClassifierModel &model) {
    nlohmann::json header;
    header["version"] = 1;
    header["spec"] = spec_to_json(model.spec);
    header["config"] = {{"learning_rate", model.config.learning_rate},
                        {"batch_size", model.config.batch_size},
                        {"epochs", model.config.epochs},
                        {"seed", model.config.seed},
                        {"class_count", model.config.class_count}};
    header["input_len"] = model.input_len;
    header["stats_mean"] = model.stats.mean;
    header["stats_sd"] = model.stats.sd;
    header["training_log"] = model.training_log;
    std::string hs = header.dump();

    std::string out = "SLM1";
    data::detail::put<uint32_t>(out, static_cast<uint32_t>(hs.size()));
    out += hs;
    std::vector<float> params = model.net.flat_params();
    data::detail::put<uint32_t>(out, static_cast<uint32_t>(params.size()));
    out.append(reinterpret_cast<const char *>(params.data()), params.size() * sizeof(float));
    write_file(path, out);
}

inline ClassifierModel read_model(const std::filesystem::path &path) {
    std::string in = read_file(path);
    if (in.size() < 8 || in.compare(0, 4, "SLM1") != 0)
        throw Error("not a classifier model file: " + path.string());
    std::size_t pos = 4;
    uint32_t hlen = data::detail::get<uint32_t>(in, pos);
    if (pos + hlen > in.size())
        throw Error("truncated classifier model file");
    nlohmann::json header = nlohmann::json::parse(in.substr(pos, hlen));
    pos += hlen;

    ClassifierModel model;
    model.spec = spec_from_json(header.at("spec"));
    model.config.learning_rate = header.at("config").at("learning_rate");
    model.config.batch_size = header.at("config").at("batch_size");
    model.config.epochs = header.at("config").at("epochs");
    model.config.seed = header.at("config").at("seed");
    model.config.class_count = header.at("config").at("class_count");
    model.input_len = header.at("input_len");
    model.stats.mean = header.at("stats_mean").get<std::vector<double>>();
    model.stats.sd = header.at("stats_sd").get<std::vector<double>>();
    model.training_log = header.at("training_log").get<std::vector<double>>();

    Rng rng(0);
    model.net = build_network<float>(model.spec, model.input_len, model.config.class_count, rng);
    uint32_t count = data::detail::get<uint32_t>(in, pos);
    if (pos + count * sizeof(float) > in.size())
        throw Error("truncated classifier model file");
    std::vector<float> params(count);
    std::memcpy(params.data(), in.data() + pos, count * sizeof(float));
    model.net.set_flat_params(params);
    return model;
}

} // namespace sidelab::clf

#endif
