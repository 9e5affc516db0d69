// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "sidelab/classifiers.hpp"

using namespace sidelab;
using namespace sidelab::clf;

namespace {

// Linearly separable 2-class set: class = sign of a planted direction.
data::Dataset separable_dataset(std::size_t count, std::size_t n, uint64_t seed) {
    data::Dataset ds;
    ds.n = static_cast<uint32_t>(n);
    ds.model = {aes::LeakageKind::Lsb, 2};
    Rng rng(seed);
    for (std::size_t i = 0; i < count; ++i) {
        data::AcquisitionRecord rec;
        int cls = static_cast<int>(i % 2);
        rec.label = static_cast<uint8_t>(cls);
        ds.records.push_back(rec);
        double shift = cls == 0 ? -2.0 : 2.0;
        for (std::size_t j = 0; j < n; ++j)
            ds.samples.push_back(static_cast<float>((j < 4 ? shift : 0.0) + 0.5 * rng.normal()));
    }
    return ds;
}

data::StandardizationStats unit_stats(std::size_t n) {
    data::StandardizationStats st;
    st.mean.assign(n, 0.0);
    st.sd.assign(n, 1.0);
    return st;
}

} // namespace

TEST_CASE("gradient check: mlp") {
    MlpSpec spec;
    spec.hidden = {6, 5};
    Rng rng(3);
    std::vector<double> inputs(4 * 4);
    for (auto &v : inputs)
        v = rng.normal();
    std::vector<uint8_t> labels{0, 1, 2, 1};
    CHECK(gradient_check(spec, 4, 3, inputs, labels, 7) < 1e-4);
}

TEST_CASE("gradient check: cnn with conv, pool and dense") {
    CnnSpec spec;
    spec.blocks = {{3, 5, 2}};
    spec.dense = {6};
    Rng rng(5);
    std::vector<double> inputs(3 * 16);
    for (auto &v : inputs)
        v = rng.normal();
    std::vector<uint8_t> labels{1, 0, 1};
    CHECK(gradient_check(spec, 16, 2, inputs, labels, 11) < 1e-4);
}

TEST_CASE("gradient check: zero inputs stay finite") {
    // At exactly zero the ReLU kink makes central differences one-sided, so
    // only finiteness is asserted here (no NaN in either gradient route).
    MlpSpec spec;
    spec.hidden = {4};
    std::vector<double> inputs(2 * 6, 0.0);
    std::vector<uint8_t> labels{0, 1};
    double err = gradient_check(spec, 6, 2, inputs, labels, 13);
    CHECK(std::isfinite(err));

    MlpSpec smooth;
    smooth.hidden = {4};
    smooth.activations = {Activation::Tanh};
    CHECK(gradient_check(smooth, 6, 2, inputs, labels, 13) < 1e-4);
}

TEST_CASE("gradient check covers sigmoid and tanh activations") {
    MlpSpec spec;
    spec.hidden = {5, 4};
    spec.activations = {Activation::Sigmoid, Activation::Tanh};
    Rng rng(17);
    std::vector<double> inputs(4 * 5);
    for (auto &v : inputs)
        v = rng.normal();
    std::vector<uint8_t> labels{0, 1, 1, 0};
    CHECK(gradient_check(spec, 5, 2, inputs, labels, 19) < 1e-4);
}

TEST_CASE("predictions are softmax-normalized") {
    data::Dataset ds = separable_dataset(64, 12, 21);
    MlpSpec spec;
    spec.hidden = {8};
    TrainConfig cfg{1e-3, 16, 2, 5, 2};
    auto model = train(ds, spec, cfg, unit_stats(12));
    for (std::size_t i = 0; i < ds.size(); ++i) {
        auto d = predict(model, ds.trace(i));
        double sum = 0;
        for (double v : d) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
            sum += v;
        }
        CHECK(std::abs(sum - 1.0) < 1e-6);
    }
}

TEST_CASE("prediction vector semantics: the larger confidence wins") {
    PredictionVector d{0.4294791, 0.57052094};
    CHECK(argmax(d) == 1);
}

TEST_CASE("separable data trains to high accuracy") {
    data::Dataset ds = separable_dataset(512, 16, 23);
    MlpSpec spec;
    spec.hidden = {16};
    TrainConfig cfg{1e-3, 32, 12, 29, 2};
    auto model = train(ds, spec, cfg, unit_stats(16));
    std::size_t correct = 0;
    auto preds = predict_dataset(model, ds);
    for (std::size_t i = 0; i < ds.size(); ++i)
        correct += argmax(preds[i]) == ds.records[i].label;
    CHECK(static_cast<double>(correct) / static_cast<double>(ds.size()) > 0.99);
    // Training log is recorded per epoch.
    CHECK(model.training_log.size() == 12);
}

TEST_CASE("zero epochs returns the initialization") {
    data::Dataset ds = separable_dataset(32, 8, 31);
    MlpSpec spec;
    spec.hidden = {4};
    TrainConfig cfg{1e-3, 16, 0, 37, 2};
    auto model = train(ds, spec, cfg, unit_stats(8));

    Rng rng(derive_seed(37, "init"));
    auto fresh = build_network<float>(ArchSpec{spec}, 8, 2, rng);
    CHECK(model.net.flat_params() == fresh.flat_params());
    CHECK(model.training_log.empty());
}

TEST_CASE("training is deterministic for a fixed seed") {
    data::Dataset ds = separable_dataset(128, 10, 41);
    MlpSpec spec;
    spec.hidden = {8, 8};
    TrainConfig cfg{1e-3, 32, 3, 43, 2};
    auto a = train(ds, spec, cfg, unit_stats(10));
    auto b = train(ds, spec, cfg, unit_stats(10));
    CHECK(a.net.flat_params() == b.net.flat_params());
    CHECK(a.training_log == b.training_log);
    cfg.seed = 44;
    auto c = train(ds, spec, cfg, unit_stats(10));
    CHECK(a.net.flat_params() != c.net.flat_params());
}

TEST_CASE("exploding learning rate aborts with guidance") {
    data::Dataset ds = separable_dataset(64, 8, 47);
    for (auto &v : ds.samples)
        v *= 1e18f; // force an overflow in the first batches
    MlpSpec spec;
    spec.hidden = {8};
    TrainConfig cfg{1e30, 16, 2, 51, 2};
    CHECK_THROWS_WITH_AS(train(ds, spec, cfg, unit_stats(8)), doctest::Contains("learning rate"), Error);
}

TEST_CASE("all-zero final layer yields the uniform vector") {
    MlpSpec spec;
    spec.hidden = {4};
    Rng rng(3);
    auto net = build_network<float>(ArchSpec{spec}, 6, 5, rng);
    auto params = net.flat_params();
    // Zero the final dense layer (last 4*5 + 5 parameters).
    for (std::size_t i = params.size() - 25; i < params.size(); ++i)
        params[i] = 0.0f;
    net.set_flat_params(params);

    ClassifierModel model;
    model.spec = spec;
    model.config.class_count = 5;
    model.input_len = 6;
    model.net = std::move(net);
    std::vector<float> x{1, -2, 3, 0.5f, 0, -1};
    auto d = predict(model, x);
    for (double v : d)
        CHECK(v == doctest::Approx(0.2).epsilon(1e-6));
}

TEST_CASE("length mismatch is rejected") {
    data::Dataset ds = separable_dataset(32, 8, 53);
    MlpSpec spec;
    spec.hidden = {4};
    TrainConfig cfg{1e-3, 16, 1, 59, 2};
    auto model = train(ds, spec, cfg, unit_stats(8));
    std::vector<float> wrong(9, 0.0f);
    CHECK_THROWS_AS(predict(model, wrong), Error);
}

TEST_CASE("mlp is shift sensitive, cnn tolerates small shifts") {
    // Traces with an informative bump whose position varies +-2 samples.
    const std::size_t n = 64;
    data::Dataset ds;
    ds.n = n;
    ds.model = {aes::LeakageKind::Lsb, 2};
    Rng rng(61);
    for (std::size_t i = 0; i < 1500; ++i) {
        int cls = static_cast<int>(i % 2);
        data::AcquisitionRecord rec;
        rec.label = static_cast<uint8_t>(cls);
        ds.records.push_back(rec);
        std::size_t center = 30 + rng.uniform_int(5); // jitter during training
        for (std::size_t j = 0; j < n; ++j) {
            double v = 0.25 * rng.normal();
            if (j >= center && j < center + 4)
                v += cls == 0 ? 2.0 : -2.0;
            ds.samples.push_back(static_cast<float>(v));
        }
    }

    MlpSpec mlp;
    mlp.hidden = {24};
    auto mlp_model = train(ds, mlp, {1e-3, 64, 6, 67, 2}, unit_stats(n));

    CnnSpec cnn;
    cnn.blocks = {{4, 9, 4}};
    cnn.dense = {16};
    auto cnn_model = train(ds, cnn, {1e-3, 64, 10, 71, 2}, unit_stats(n));

    auto shifted = [&](std::span<const float> t, int by) {
        std::vector<float> out(t.size());
        for (std::size_t j = 0; j < t.size(); ++j)
            out[j] = t[(j + t.size() - static_cast<std::size_t>(by)) % t.size()];
        return out;
    };

    std::size_t mlp_changed = 0, cnn_stable = 0, total = 200;
    for (std::size_t i = 0; i < total; ++i) {
        auto base_mlp = predict(mlp_model, ds.trace(i));
        auto moved = shifted(ds.trace(i), 3);
        auto mlp_after = predict(mlp_model, moved);
        double diff = 0;
        for (std::size_t c = 0; c < base_mlp.size(); ++c)
            diff = std::max(diff, std::abs(base_mlp[c] - mlp_after[c]));
        mlp_changed += diff > 1e-4;

        auto base_cnn = argmax(predict(cnn_model, ds.trace(i)));
        auto cnn_after = argmax(predict(cnn_model, shifted(ds.trace(i), 4))); // = pool length
        cnn_stable += base_cnn == cnn_after;
    }
    CHECK(mlp_changed > total / 2);  // no shift invariance
    CHECK(cnn_stable > total / 2);   // pooling gives shift tolerance
}

TEST_CASE("model serialization round trip") {
    data::Dataset ds = separable_dataset(64, 10, 73);
    CnnSpec spec;
    spec.blocks = {{3, 3, 2}};
    spec.dense = {8};
    TrainConfig cfg{1e-3, 16, 2, 79, 2};
    auto [std_ds, stats] = data::standardize(ds);
    auto model = train(std_ds, spec, cfg, stats);

    auto path = std::filesystem::temp_directory_path() / "sidelab_model.bin";
    write_model(path, model);
    auto back = read_model(path);
    CHECK(back.net.flat_params() == model.net.flat_params());
    CHECK(back.input_len == model.input_len);
    CHECK(back.config.class_count == model.config.class_count);
    CHECK(back.stats.mean == model.stats.mean);
    CHECK(back.stats.sd == model.stats.sd);
    CHECK(back.training_log == model.training_log);

    auto d1 = predict(model, std_ds.trace(0));
    auto d2 = predict(back, std_ds.trace(0));
    for (std::size_t c = 0; c < d1.size(); ++c)
        CHECK(d1[c] == doctest::Approx(d2[c]).epsilon(1e-12));
    std::filesystem::remove(path);
}
