#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "lusc/alexnet.hpp"
#include "lusc/train.hpp"
#include "lusc/vit.hpp"
#include "support.hpp"

using namespace lusc;
using lusc::testing::LinearProbe;
using lusc::testing::random_tensor;
using lusc::testing::TempDir;

TEST(CrossEntropy, ClosedFormExamples) {
    // certain correct prediction -> zero loss
    auto sure = Tensor<double>::from_data({1, 3}, {100.0, 0.0, 0.0});
    EXPECT_NEAR(cross_entropy(sure, {0}).item(), 0.0, 1e-12);

    // zero logits, K = 10 -> ln 10
    auto zeros = Tensor<double>::zeros({2, 10});
    EXPECT_NEAR(cross_entropy(zeros, {3, 7}).item(), std::log(10.0), 1e-12);

    EXPECT_THROW(cross_entropy(zeros, {3, 10}), ValueError);  // label out of range
    EXPECT_THROW(cross_entropy(zeros, {1}), ShapeError);      // count mismatch
}

TEST(CrossEntropy, MatchesNaiveSoftmaxLog) {
    Rng rng(41);
    auto logits = random_tensor<double>({4, 5}, rng, -3.0, 3.0);
    std::vector<std::uint16_t> labels{1, 0, 4, 2};
    double expected = 0;
    for (std::size_t i = 0; i < 4; ++i) {
        double denom = 0;
        for (std::size_t j = 0; j < 5; ++j) denom += std::exp(logits.at(i * 5 + j));
        expected += -std::log(std::exp(logits.at(i * 5 + labels[i])) / denom);
    }
    expected /= 4;
    EXPECT_NEAR(cross_entropy(logits, labels).item(), expected, 1e-10);
}

TEST(CrossEntropy, NonNegativity) {
    Rng rng(42);
    for (int trial = 0; trial < 50; ++trial) {
        auto logits = random_tensor<double>({3, 4}, rng, -20.0, 20.0);
        std::vector<std::uint16_t> labels{
            static_cast<std::uint16_t>(rng.uniform_int(4)),
            static_cast<std::uint16_t>(rng.uniform_int(4)),
            static_cast<std::uint16_t>(rng.uniform_int(4))};
        EXPECT_GE(cross_entropy(logits, labels).item(), 0.0);
    }
}

namespace {
std::vector<NamedParam<float>> single_param(std::vector<float> values) {
    std::vector<NamedParam<float>> p;
    p.push_back({"theta", Tensor<float>::from_data({values.size()}, std::move(values))});
    return p;
}

GradientMap<float> grads_for(std::vector<NamedParam<float>>& params, std::vector<float> g) {
    Tape<float> tape;
    tape.watch(params[0].tensor);
    GradientMap<float> map;
    map.put(params[0].tensor.node().get(),
            Tensor<float>::from_data({g.size()}, std::move(g)));
    return map;
}
}  // namespace

TEST(Sgd, DirectSubstitution) {
    auto params = single_param({1.0f});
    auto grads = grads_for(params, {0.5f});
    sgd_step<float>(params, grads, 0.1f, 0.0f);
    EXPECT_FLOAT_EQ(params[0].tensor.at(0), 0.95f);

    // zero gradient, zero decay -> fixed point
    auto params2 = single_param({2.5f, -1.0f});
    auto zero = grads_for(params2, {0.0f, 0.0f});
    sgd_step<float>(params2, zero, 0.5f, 0.0f);
    EXPECT_FLOAT_EQ(params2[0].tensor.at(0), 2.5f);
    EXPECT_FLOAT_EQ(params2[0].tensor.at(1), -1.0f);
}

TEST(Sgd, QuadraticGeometricDecay) {
    // L = theta^2 / 2, grad = theta; 50 steps at eta = 0.1 from 1 -> 0.9^50.
    auto params = single_param({1.0f});
    Tape<float> tape;
    tape.watch(params[0].tensor);
    for (int i = 0; i < 50; ++i) {
        auto loss = scale(sum(mul(params[0].tensor, params[0].tensor)), 0.5f);
        auto grads = tape.backward(loss);
        sgd_step<float>(params, grads, 0.1f, 0.0f);
    }
    EXPECT_NEAR(params[0].tensor.at(0), 0.00515377520732012, 1e-7);
}

TEST(Sgd, OneStepOnSquaredNormScalesExactly) {
    // One step on L = 0.5 * ||theta||^2 multiplies every parameter by (1 - eta)
    // exactly in machine arithmetic.
    Rng rng(43);
    auto theta = random_tensor<float>({17}, rng);
    std::vector<NamedParam<float>> params;
    params.push_back({"theta", theta});
    std::vector<float> before = theta.data();
    Tape<float> tape;
    tape.watch(params[0].tensor);
    auto loss = scale(sum(mul(params[0].tensor, params[0].tensor)), 0.5f);
    auto grads = tape.backward(loss);
    const float eta = 0.25f;
    sgd_step<float>(params, grads, eta, 0.0f);
    for (std::size_t i = 0; i < before.size(); ++i)
        EXPECT_EQ(params[0].tensor.at(i), before[i] - eta * before[i]);
}

TEST(Adam, FreshStateZeroGradFixedPoint) {
    auto params = single_param({3.0f});
    auto state = AdamState<float>::init(params);
    auto zero = grads_for(params, {0.0f});
    adam_step<float>(params, zero, state, 0.1f, 0.9f, 0.999f, 1e-8f, 0.0f);
    EXPECT_FLOAT_EQ(params[0].tensor.at(0), 3.0f);
}

TEST(Adam, FirstStepMagnitudeIsLearningRate) {
    // bias-corrected ratio is 1 at t = 1 for any constant nonzero gradient
    for (float g : {0.001f, 0.5f, 7.0f, -3.0f}) {
        auto params = single_param({1.0f});
        auto state = AdamState<float>::init(params);
        auto grads = grads_for(params, {g});
        adam_step<float>(params, grads, state, 0.01f, 0.9f, 0.999f, 1e-8f, 0.0f);
        EXPECT_NEAR(std::abs(params[0].tensor.at(0) - 1.0f), 0.01f, 1e-4f);
        EXPECT_EQ(params[0].tensor.at(0) < 1.0f, g > 0.0f);
    }
}

TEST(EarlyStopper, CannedSchedule) {
    // best at epoch 3, worsening after; patience 2 stops at epoch 5
    EarlyStopper stopper(2);
    EXPECT_FALSE(stopper.observe(1, 5.0));
    EXPECT_FALSE(stopper.observe(2, 4.0));
    EXPECT_FALSE(stopper.observe(3, 3.0));
    EXPECT_FALSE(stopper.observe(4, 3.5));
    EXPECT_TRUE(stopper.observe(5, 3.6));
    EXPECT_EQ(stopper.best_epoch(), 3);
    EXPECT_DOUBLE_EQ(stopper.best_loss(), 3.0);
}

namespace {
TrainConfig probe_config(int epochs, std::uint64_t seed = 5) {
    TrainConfig cfg;
    cfg.optimizer = OptimizerKind::kAdam;
    cfg.learning_rate = 1e-2;
    cfg.weight_decay = 0.0;
    cfg.batch_size = 16;
    cfg.max_epochs = epochs;
    cfg.early_stop_patience = 50;
    cfg.schedule.kind = LrScheduleKind::kConstant;
    cfg.seed = seed;
    return cfg;
}
}  // namespace

TEST(Fit, ZeroEpochsIsNoOp) {
    auto archive = make_blob_archive(1, 5, 16);
    standardize(archive);
    auto spec = split(archive, {0.8, 0.1, 0.1}, 3);
    LinearProbe model(16, 16, 3, 9);
    std::vector<float> before = model.parameters()[0].tensor.data();
    auto log = fit(model, archive, spec, probe_config(0), AugmentationPolicy{});
    EXPECT_TRUE(log.epochs.empty());
    EXPECT_EQ(model.parameters()[0].tensor.data(), before);
}

TEST(Fit, LinearProbeLearnsBlobs) {
    auto archive = make_blob_archive(7, 30, 16);
    standardize(archive);
    auto spec = split(archive, {0.8, 0.1, 0.1}, 3);
    LinearProbe model(16, 16, 3, 9);
    auto log = fit(model, archive, spec, probe_config(10), AugmentationPolicy{});
    ASSERT_FALSE(log.epochs.empty());
    EXPECT_GE(log.epochs.back().val_accuracy, 0.95);
    for (std::size_t i = 1; i < log.epochs.size(); ++i)
        EXPECT_EQ(log.epochs[i].epoch, log.epochs[i - 1].epoch + 1);  // strictly increasing
}

TEST(Fit, DeterministicAcrossRuns) {
    auto archive = make_blob_archive(8, 10, 16);
    standardize(archive);
    auto spec = split(archive, {0.8, 0.1, 0.1}, 4);
    AugmentationPolicy policy;
    policy.horizontal_flip_prob = 0.5;
    policy.rotation_degrees_max = 10.0;

    LinearProbe m1(16, 16, 3, 9), m2(16, 16, 3, 9);
    auto l1 = fit(m1, archive, spec, probe_config(4), policy);
    auto l2 = fit(m2, archive, spec, probe_config(4), policy);
    ASSERT_EQ(l1.epochs.size(), l2.epochs.size());
    for (std::size_t i = 0; i < l1.epochs.size(); ++i) {
        EXPECT_EQ(l1.epochs[i].train_loss, l2.epochs[i].train_loss);
        EXPECT_EQ(l1.epochs[i].val_loss, l2.epochs[i].val_loss);
        EXPECT_EQ(l1.epochs[i].train_accuracy, l2.epochs[i].train_accuracy);
        EXPECT_EQ(l1.epochs[i].label_stream_hash, l2.epochs[i].label_stream_hash);
    }
    EXPECT_EQ(m1.parameters()[0].tensor.data(), m2.parameters()[0].tensor.data());
}

TEST(Fit, LabelStreamIdenticalAcrossModels) {
    // the data stream depends only on (archive, split, seed, batch size)
    auto archive = make_blob_archive(9, 12, 16);
    standardize(archive);
    auto spec = split(archive, {0.8, 0.1, 0.1}, 4);
    LinearProbe probe(16, 16, 3, 1);
    auto cfg = probe_config(3);
    auto l1 = fit(probe, archive, spec, cfg, AugmentationPolicy{});

    auto vit_cfg = ViTConfig::tiny(3, 16);
    ViT<float> vit(vit_cfg, 2);
    auto l2 = fit(vit, archive, spec, cfg, AugmentationPolicy{});
    ASSERT_EQ(l1.epochs.size(), l2.epochs.size());
    for (std::size_t i = 0; i < l1.epochs.size(); ++i)
        EXPECT_EQ(l1.epochs[i].label_stream_hash, l2.epochs[i].label_stream_hash);
}

TEST(Fit, ScriptedEarlyStopRestoresBestEpoch) {
    auto archive = make_blob_archive(10, 10, 16);
    standardize(archive);
    auto spec = split(archive, {0.8, 0.1, 0.1}, 4);
    LinearProbe model(16, 16, 3, 9);

    // canned validation schedule: best at epoch 3, then worsening
    std::map<int, std::vector<float>> weights_at_epoch;
    FitHooks hooks;
    hooks.monitored_val_loss = [&](int epoch, double) {
        weights_at_epoch[epoch] = model.parameters()[0].tensor.data();
        static const double canned[] = {0.0, 5.0, 4.0, 3.0, 3.5, 3.6, 3.7, 3.8};
        return canned[epoch];
    };
    auto cfg = probe_config(10);
    cfg.early_stop_patience = 2;
    auto log = fit(model, archive, spec, cfg, AugmentationPolicy{}, &hooks);
    EXPECT_EQ(log.epochs.size(), 5u);  // stops at epoch 5
    EXPECT_EQ(model.parameters()[0].tensor.data(), weights_at_epoch[3]);  // epoch-3 weights back
}

TEST(Fit, DivergenceRaises) {
    auto archive = make_blob_archive(11, 10, 16);
    standardize(archive);
    auto spec = split(archive, {0.8, 0.1, 0.1}, 4);
    LinearProbe model(16, 16, 3, 9);
    auto cfg = probe_config(3);
    cfg.optimizer = OptimizerKind::kSgd;
    cfg.learning_rate = 1e18;
    EXPECT_THROW(fit(model, archive, spec, cfg, AugmentationPolicy{}), DivergenceError);
}

TEST(Checkpoint, RoundTripBitExact) {
    TempDir tmp;
    auto vit_cfg = ViTConfig::tiny(3, 16);
    ViT<float> model(vit_cfg, 31);
    auto path = tmp.file("m.luck");
    save_checkpoint(model, nullptr, path);

    ViT<float> restored(vit_cfg, 99);  // different init, same architecture
    load_checkpoint(path, restored);
    Rng rng(32);
    auto batch = random_tensor<float>({1, 16, 16, 3}, rng);
    auto a = model.forward(batch, RunMode::kEval, nullptr);
    auto b = restored.forward(batch, RunMode::kEval, nullptr);
    EXPECT_EQ(a.data(), b.data());

    // file size arithmetic: header + 4 bytes per parameter + state length field
    std::size_t expected = 4 + 4 + 32 + 8 + 4 * model.parameter_count() + 8;
    EXPECT_EQ(std::filesystem::file_size(path), expected);
}

TEST(Checkpoint, AdamStateRoundTrip) {
    TempDir tmp;
    auto vit_cfg = ViTConfig::tiny(3, 16);
    ViT<float> model(vit_cfg, 31);
    auto state = AdamState<float>::init(model.parameters());
    state.step = 17;
    Rng rng(55);
    for (auto& m : state.m)
        for (auto& v : m) v = static_cast<float>(rng.uniform());
    auto path = tmp.file("s.luck");
    save_checkpoint(model, &state, path);

    ViT<float> restored(vit_cfg, 1);
    AdamState<float> loaded;
    load_checkpoint(path, restored, &loaded);
    EXPECT_EQ(loaded.step, 17u);
    EXPECT_EQ(loaded.m, state.m);
    EXPECT_EQ(loaded.v, state.v);

    std::size_t n = model.parameter_count();
    std::size_t expected = 4 + 4 + 32 + 8 + 4 * n + 8 + (4 + 8 + 8 * n);
    EXPECT_EQ(std::filesystem::file_size(path), expected);
}

TEST(Checkpoint, ArchitectureMismatchNamesBothFingerprints) {
    TempDir tmp;
    ViT<float> vit(ViTConfig::tiny(3, 16), 1);
    auto path = tmp.file("vit.luck");
    save_checkpoint(vit, nullptr, path);

    AlexNetConfig acfg;
    acfg.num_classes = 3;
    acfg.width_scale = 0.125;
    AlexNet<float> alex(acfg, 1);
    try {
        load_checkpoint(path, alex);
        FAIL() << "expected ArtifactMismatchError";
    } catch (const ArtifactMismatchError& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find(hex_digest(vit.fingerprint())), std::string::npos);
        EXPECT_NE(msg.find(hex_digest(alex.fingerprint())), std::string::npos);
    }
}

TEST(LrSchedule, Shapes) {
    LrSchedule constant{LrScheduleKind::kConstant, 0.1, 20};
    EXPECT_DOUBLE_EQ(lr_at(0.01, constant, 35, 100), 0.01);

    LrSchedule step{LrScheduleKind::kStep, 0.1, 20};
    EXPECT_DOUBLE_EQ(lr_at(0.01, step, 0, 100), 0.01);
    EXPECT_DOUBLE_EQ(lr_at(0.01, step, 19, 100), 0.01);
    EXPECT_NEAR(lr_at(0.01, step, 20, 100), 0.001, 1e-12);
    EXPECT_NEAR(lr_at(0.01, step, 40, 100), 0.0001, 1e-12);

    LrSchedule cosine{LrScheduleKind::kCosine, 0.1, 20};
    EXPECT_DOUBLE_EQ(lr_at(0.01, cosine, 0, 100), 0.01);
    EXPECT_LT(lr_at(0.01, cosine, 99, 100), 0.01 * 0.01);
}

TEST(TrainLogCsv, SchemaAndHashComment) {
    TempDir tmp;
    TrainLog log;
    log.epochs.push_back({1, 1.5, 0.5, 1.2, 0.6, 0.001, 2.5, "aa"});
    log.epochs.push_back({2, 1.0, 0.7, 0.9, 0.8, 0.001, 2.4, "bb"});
    auto path = tmp.file("log.csv");
    write_train_log_csv(log, path, "deadbeef");
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "# config_hash=deadbeef");
    std::getline(in, line);
    EXPECT_EQ(line, "epoch,train_loss,train_acc,val_loss,val_acc,lr,wall_seconds");
    int rows = 0;
    while (std::getline(in, line))
        if (!line.empty()) ++rows;
    EXPECT_EQ(rows, 2);
}
