#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "lusc/alexnet.hpp"
#include "lusc/train.hpp"
#include "lusc/vit.hpp"
#include "support.hpp"

using namespace lusc;
using lusc::testing::random_tensor;

// ---------------------------------------------------------------------------
// AlexNet
// ---------------------------------------------------------------------------

TEST(AlexNet, ReferenceLayerTrace) {
    AlexNetConfig cfg;
    cfg.num_classes = 5;
    auto trace = AlexNet<float>::layer_trace(cfg);
    std::vector<std::pair<std::string, Shape>> expected = {
        {"input", {227, 227, 3}}, {"conv1", {55, 55, 96}},  {"pool1", {27, 27, 96}},
        {"conv2", {27, 27, 256}}, {"pool2", {13, 13, 256}}, {"conv3", {13, 13, 384}},
        {"conv4", {13, 13, 384}}, {"conv5", {13, 13, 256}}, {"pool5", {6, 6, 256}},
        {"fc6", {4096}},          {"fc7", {4096}},          {"fc8", {5}}};
    ASSERT_EQ(trace.size(), expected.size());
    for (std::size_t i = 0; i < trace.size(); ++i) {
        EXPECT_EQ(trace[i].first, expected[i].first);
        EXPECT_EQ(trace[i].second, expected[i].second) << trace[i].first;
    }
}

TEST(AlexNet, ScaledTraceMatchesShapeAlgebra) {
    AlexNetConfig cfg;
    cfg.num_classes = 3;
    cfg.width_scale = 0.125;
    auto trace = AlexNet<float>::layer_trace(cfg);
    // independent re-run of floor((H - k + 2p)/s) + 1
    auto ext = [](std::size_t h, std::size_t k, std::size_t s, std::size_t p) {
        return (h + 2 * p - k) / s + 1;
    };
    std::size_t h = 227;
    h = ext(h, 11, 4, 0);
    EXPECT_EQ(trace[1].second[0], h);
    h = ext(h, 3, 2, 0);
    EXPECT_EQ(trace[2].second[0], h);
    h = ext(h, 5, 1, 2);
    EXPECT_EQ(trace[3].second[0], h);
    h = ext(h, 3, 2, 0);
    EXPECT_EQ(trace[4].second[0], h);
    h = ext(h, 3, 1, 1);
    EXPECT_EQ(trace[5].second[0], h);
    EXPECT_EQ(trace[1].second[2], 12u);   // 96 / 8
    EXPECT_EQ(trace[8].second, (Shape{6, 6, 32}));
    EXPECT_EQ(trace.back().second, (Shape{3}));
}

TEST(AlexNet, DeskScaleForwardShape) {
    AlexNetConfig cfg;
    cfg.num_classes = 3;
    cfg.width_scale = 0.125;
    AlexNet<float> model(cfg, 42);
    Rng rng(2);
    auto batch = random_tensor<float>({2, 227, 227, 3}, rng);
    auto logits = model.forward(batch, RunMode::kEval, nullptr);
    EXPECT_EQ(logits.shape(), (Shape{2, 3}));
    for (auto v : logits.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(AlexNet, ZeroNetworkGivesUniformSoftmax) {
    AlexNetConfig cfg;
    cfg.num_classes = 5;
    cfg.width_scale = 0.125;
    AlexNet<float> model(cfg, 1);
    for (auto& p : model.parameters())
        std::fill(p.tensor.mutable_data().begin(), p.tensor.mutable_data().end(), 0.0f);
    Rng rng(3);
    auto batch = random_tensor<float>({1, 227, 227, 3}, rng);
    auto logits = model.forward(batch, RunMode::kEval, nullptr);
    for (auto v : logits.data()) EXPECT_FLOAT_EQ(v, 0.0f);
    auto p = softmax(logits);
    for (auto v : p.data()) EXPECT_NEAR(v, 0.2f, 1e-7f);
}

TEST(AlexNet, IdenticalImagesGiveIdenticalRows) {
    AlexNetConfig cfg;
    cfg.num_classes = 4;
    cfg.width_scale = 0.125;
    AlexNet<float> model(cfg, 7);
    Rng rng(4);
    auto img = random_tensor<float>({227, 227, 3}, rng);
    std::vector<float> batch_data;
    for (int i = 0; i < 3; ++i)
        batch_data.insert(batch_data.end(), img.data().begin(), img.data().end());
    auto batch = Tensor<float>::from_data({3, 227, 227, 3}, batch_data);
    auto logits = model.forward(batch, RunMode::kEval, nullptr);
    for (std::size_t j = 0; j < 4; ++j) {
        EXPECT_EQ(logits.at(j), logits.at(4 + j));
        EXPECT_EQ(logits.at(j), logits.at(8 + j));
    }
}

TEST(AlexNet, EvalDeterminismAndEnumerationStability) {
    AlexNetConfig cfg;
    cfg.num_classes = 3;
    cfg.width_scale = 0.125;
    AlexNet<float> a(cfg, 99), b(cfg, 99);
    auto& pa = a.parameters();
    auto& pb = b.parameters();
    ASSERT_EQ(pa.size(), pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        EXPECT_EQ(pa[i].name, pb[i].name);
        EXPECT_EQ(pa[i].tensor.shape(), pb[i].tensor.shape());
        EXPECT_EQ(pa[i].tensor.data(), pb[i].tensor.data());  // element-for-element
    }
    Rng rng(5);
    auto batch = random_tensor<float>({1, 227, 227, 3}, rng);
    auto l1 = a.forward(batch, RunMode::kEval, nullptr);
    auto l2 = a.forward(batch, RunMode::kEval, nullptr);
    EXPECT_EQ(l1.data(), l2.data());
}

TEST(AlexNet, WrongInputShapeNamesExpected) {
    AlexNetConfig cfg;
    cfg.num_classes = 3;
    cfg.width_scale = 0.125;
    AlexNet<float> model(cfg, 1);
    auto bad = Tensor<float>::zeros({1, 64, 64, 3});
    try {
        model.forward(bad, RunMode::kEval, nullptr);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("227x227x3"), std::string::npos);
    }
}

TEST(AlexNet, InvalidConfigRejected) {
    AlexNetConfig cfg;
    cfg.num_classes = 5;
    cfg.width_scale = 0.0001;  // rounds channel counts to zero
    EXPECT_THROW(cfg.validate(), ConfigError);
    AlexNetConfig one_class;
    one_class.num_classes = 1;
    EXPECT_THROW(one_class.validate(), ConfigError);
}

TEST(AlexNet, SinglePrecisionGradients) {
    AlexNetConfig cfg;
    cfg.num_classes = 3;
    cfg.width_scale = 0.125;
    cfg.dropout_rate = 0.0;
    AlexNet<float> model(cfg, 11);
    Rng rng(6);
    auto img = random_tensor<float>({227, 227, 3}, rng, 0.0, 1.0);
    std::vector<std::uint16_t> labels{1};
    auto lossfn = [&] {
        return cross_entropy(model.forward_sample(img, RunMode::kEval, nullptr), labels);
    };
    std::vector<Tensor<float>> leaves;
    for (auto& p : model.parameters()) leaves.push_back(p.tensor);
    double err = lusc::testing::gradcheck_sampled(lossfn, leaves, 50, 1234, 1e-2, 1e-5);
    EXPECT_LT(err, 1e-3);
}

// ---------------------------------------------------------------------------
// ViT pieces
// ---------------------------------------------------------------------------

TEST(Patchify, ReferencePatchCount) {
    auto img = Tensor<float>::zeros({224, 224, 3});
    auto p = patchify(img, 16);
    EXPECT_EQ(p.shape(), (Shape{196, 16 * 16 * 3}));
}

TEST(Embed, ZeroAndAdditiveStructure) {
    std::size_t np = 4, pd = 6, d = 3;
    auto zero = embed(Tensor<float>::zeros({np, pd}), Tensor<float>::zeros({pd, d}),
                      Tensor<float>::zeros({d}), Tensor<float>::zeros({np + 1, d}));
    EXPECT_EQ(zero.shape(), (Shape{np + 1, d}));
    for (auto v : zero.data()) EXPECT_FLOAT_EQ(v, 0.0f);

    Rng rng(8);
    auto pos = random_tensor<float>({np + 1, d}, rng);
    auto cls = random_tensor<float>({d}, rng);
    auto e = random_tensor<float>({pd, d}, rng);
    auto tok = embed(Tensor<float>::zeros({np, pd}), e, cls, pos);
    for (std::size_t j = 0; j < d; ++j)
        EXPECT_FLOAT_EQ(tok.at(j), cls.at(j) + pos.at(j));  // token 0 = cls + pos0
    for (std::size_t i = 1; i <= np; ++i)
        for (std::size_t j = 0; j < d; ++j)
            EXPECT_FLOAT_EQ(tok.at(i * d + j), pos.at(i * d + j));  // patches = 0
}

TEST(Embed, MatchesNaiveTripleLoop) {
    Rng rng(9);
    std::size_t np = 5, pd = 7, d = 4;
    auto patches = random_tensor<float>({np, pd}, rng);
    auto e = random_tensor<float>({pd, d}, rng);
    auto cls = random_tensor<float>({d}, rng);
    auto pos = random_tensor<float>({np + 1, d}, rng);
    auto tok = embed(patches, e, cls, pos);
    for (std::size_t i = 0; i < np; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            double acc = 0;
            for (std::size_t p = 0; p < pd; ++p)
                acc += double(patches.at(i * pd + p)) * e.at(p * d + j);
            EXPECT_NEAR(tok.at((i + 1) * d + j), acc + pos.at((i + 1) * d + j), 1e-5);
        }
    }
}

TEST(Attention, SingleTokenReturnsValues) {
    Rng rng(10);
    auto q = random_tensor<float>({1, 4}, rng);
    auto k = random_tensor<float>({1, 4}, rng);
    auto v = random_tensor<float>({1, 4}, rng);
    auto out = attention(q, k, v);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_FLOAT_EQ(out.at(j), v.at(j));
}

TEST(Attention, ZeroQueriesGiveColumnMeans) {
    Rng rng(11);
    std::size_t t = 5, dk = 3;
    auto q = Tensor<float>::zeros({t, dk});
    auto k = random_tensor<float>({t, dk}, rng);
    auto v = random_tensor<float>({t, dk}, rng);
    auto out = attention(q, k, v);
    for (std::size_t j = 0; j < dk; ++j) {
        double mean = 0;
        for (std::size_t i = 0; i < t; ++i) mean += v.at(i * dk + j);
        mean /= t;
        for (std::size_t i = 0; i < t; ++i) EXPECT_NEAR(out.at(i * dk + j), mean, 1e-6);
    }
}

namespace {

// Independent naive attention: explicit double loops, no library ops.
std::vector<double> naive_attention(const std::vector<double>& q, const std::vector<double>& k,
                                    const std::vector<double>& v, std::size_t t, std::size_t dk) {
    std::vector<double> out(t * dk, 0.0);
    for (std::size_t i = 0; i < t; ++i) {
        std::vector<double> scores(t, 0.0);
        for (std::size_t j = 0; j < t; ++j) {
            for (std::size_t c = 0; c < dk; ++c) scores[j] += q[i * dk + c] * k[j * dk + c];
            scores[j] /= std::sqrt(static_cast<double>(dk));
        }
        double mx = scores[0];
        for (auto s : scores) mx = std::max(mx, s);
        double denom = 0;
        for (auto& s : scores) {
            s = std::exp(s - mx);
            denom += s;
        }
        for (auto& s : scores) s /= denom;
        for (std::size_t j = 0; j < t; ++j)
            for (std::size_t c = 0; c < dk; ++c) out[i * dk + c] += scores[j] * v[j * dk + c];
    }
    return out;
}

std::vector<double> to_double(const std::vector<float>& v) {
    return std::vector<double>(v.begin(), v.end());
}

}  // namespace

TEST(Attention, MatchesNaiveDoubleLoop) {
    Rng rng(12);
    std::size_t t = 3, dk = 2;
    auto q = random_tensor<float>({t, dk}, rng);
    auto k = random_tensor<float>({t, dk}, rng);
    auto v = random_tensor<float>({t, dk}, rng);
    auto out = attention(q, k, v);
    auto expected = naive_attention(to_double(q.data()), to_double(k.data()),
                                    to_double(v.data()), t, dk);
    for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out.at(i), expected[i], 1e-6);
}

TEST(Msa, SingleHeadDegeneratesToAttention) {
    Rng rng(13);
    std::size_t t = 4, d = 6;
    auto z = random_tensor<float>({t, d}, rng);
    MsaWeights<float> w{random_tensor<float>({d, d}, rng), random_tensor<float>({d, d}, rng),
                        random_tensor<float>({d, d}, rng), random_tensor<float>({d, d}, rng)};
    auto full = msa(z, w, 1);
    auto direct = matmul(attention(matmul(z, w.wq), matmul(z, w.wk), matmul(z, w.wv)), w.wo);
    for (std::size_t i = 0; i < full.size(); ++i) EXPECT_NEAR(full.at(i), direct.at(i), 1e-6);
}

TEST(Msa, ZeroOutputProjection) {
    Rng rng(14);
    std::size_t t = 3, d = 4;
    auto z = random_tensor<float>({t, d}, rng);
    MsaWeights<float> w{random_tensor<float>({d, d}, rng), random_tensor<float>({d, d}, rng),
                        random_tensor<float>({d, d}, rng), Tensor<float>::zeros({d, d})};
    for (auto v : msa(z, w, 2).data()) EXPECT_FLOAT_EQ(v, 0.0f);
}

TEST(Msa, MatchesBruteForcePerHeadEnumeration) {
    Rng rng(15);
    std::size_t t = 3, d = 4, heads = 2, dk = d / heads;
    auto z = random_tensor<float>({t, d}, rng);
    MsaWeights<float> w{random_tensor<float>({d, d}, rng), random_tensor<float>({d, d}, rng),
                        random_tensor<float>({d, d}, rng), random_tensor<float>({d, d}, rng)};
    auto out = msa(z, w, heads);

    // Brute force: naive projections, per-head naive attention, concat, project.
    auto zt = to_double(z.data());
    auto project = [&](const Tensor<float>& wm) {
        std::vector<double> p(t * d, 0.0);
        for (std::size_t i = 0; i < t; ++i)
            for (std::size_t j = 0; j < d; ++j)
                for (std::size_t c = 0; c < d; ++c)
                    p[i * d + j] += zt[i * d + c] * double(wm.at(c * d + j));
        return p;
    };
    auto q = project(w.wq), k = project(w.wk), v = project(w.wv);
    std::vector<double> concat(t * d, 0.0);
    for (std::size_t h = 0; h < heads; ++h) {
        std::vector<double> qh(t * dk), kh(t * dk), vh(t * dk);
        for (std::size_t i = 0; i < t; ++i)
            for (std::size_t c = 0; c < dk; ++c) {
                qh[i * dk + c] = q[i * d + h * dk + c];
                kh[i * dk + c] = k[i * d + h * dk + c];
                vh[i * dk + c] = v[i * d + h * dk + c];
            }
        auto oh = naive_attention(qh, kh, vh, t, dk);
        for (std::size_t i = 0; i < t; ++i)
            for (std::size_t c = 0; c < dk; ++c) concat[i * d + h * dk + c] = oh[i * dk + c];
    }
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            double acc = 0;
            for (std::size_t c = 0; c < d; ++c) acc += concat[i * d + c] * double(w.wo.at(c * d + j));
            EXPECT_NEAR(out.at(i * d + j), acc, 1e-5);
        }
}

TEST(EncoderBlock, ZeroWeightsPassResidualsThrough) {
    Rng rng(16);
    std::size_t t = 5, d = 8, hidden = 12;
    auto z = random_tensor<float>({t, d}, rng);
    EncoderBlockWeights<float> w{
        Tensor<float>::zeros({d}), Tensor<float>::zeros({d}),
        MsaWeights<float>{Tensor<float>::zeros({d, d}), Tensor<float>::zeros({d, d}),
                          Tensor<float>::zeros({d, d}), Tensor<float>::zeros({d, d})},
        Tensor<float>::zeros({d}), Tensor<float>::zeros({d}),
        Tensor<float>::zeros({d, hidden}), Tensor<float>::zeros({hidden}),
        Tensor<float>::zeros({hidden, d}), Tensor<float>::zeros({d})};
    auto out = z;
    for (int l = 0; l < 3; ++l) out = encoder_block(out, w, 2);  // stacked blocks stay identity
    EXPECT_EQ(out.data(), z.data());
}

// ---------------------------------------------------------------------------
// Full ViT model
// ---------------------------------------------------------------------------

TEST(ViT, TinyParameterCountClosedForm) {
    auto cfg = ViTConfig::tiny(3);
    ViT<float> model(cfg, 5);
    // independent sum over the declared weight shapes
    std::size_t pd = 8 * 8 * 3, d = 64, np = (32 / 8) * (32 / 8), mlp = 128, depth = 2, k = 3;
    std::size_t block = 2 * d + 4 * d * d + 2 * d + (d * mlp + mlp) + (mlp * d + d);
    std::size_t expected = (pd * d) + d + (np + 1) * d + depth * block + 2 * d + (d * k + k);
    EXPECT_EQ(model.parameter_count(), expected);
    EXPECT_EQ(expected, 80195u);
}

TEST(ViT, ZeroHeadGivesUniformSoftmax) {
    auto cfg = ViTConfig::tiny(4);
    ViT<float> model(cfg, 6);
    std::fill(model.param("head.weight").mutable_data().begin(),
              model.param("head.weight").mutable_data().end(), 0.0f);
    Rng rng(17);
    auto batch = random_tensor<float>({1, 32, 32, 3}, rng);
    auto logits = model.forward(batch, RunMode::kEval, nullptr);
    for (auto v : logits.data()) EXPECT_FLOAT_EQ(v, 0.0f);
    for (auto v : softmax(logits).data()) EXPECT_NEAR(v, 0.25f, 1e-7f);
}

TEST(ViT, TokenCountInvariantAndEvalDeterminism) {
    auto cfg = ViTConfig::tiny(3, 64);  // 64 patches of 8x8
    ViT<float> model(cfg, 7);
    Rng rng(18);
    auto img = random_tensor<float>({64, 64, 3}, rng);
    auto tokens = model.encode(img, RunMode::kEval, nullptr);
    EXPECT_EQ(tokens.shape(), (Shape{64 + 1, 64}));

    auto batch = random_tensor<float>({2, 64, 64, 3}, rng);
    auto l1 = model.forward(batch, RunMode::kEval, nullptr);
    auto l2 = model.forward(batch, RunMode::kEval, nullptr);
    EXPECT_EQ(l1.data(), l2.data());
}

TEST(ViT, AttentionRowsSumToOne) {
    auto cfg = ViTConfig::tiny(3);
    ViT<float> model(cfg, 8);
    model.set_capture_attention(true);
    Rng rng(19);
    for (int trial = 0; trial < 5; ++trial) {
        auto img = random_tensor<float>({32, 32, 3}, rng);
        model.forward_sample(img, RunMode::kEval, nullptr);
        ASSERT_EQ(model.attention_maps().size(), cfg.depth * cfg.num_heads);
        for (const auto& m : model.attention_maps()) {
            std::size_t t = m.dim(0);
            for (std::size_t r = 0; r < t; ++r) {
                float s = 0;
                for (std::size_t c = 0; c < t; ++c) s += m.at(r * t + c);
                EXPECT_NEAR(s, 1.0f, 1e-5f);
            }
        }
    }
}

TEST(ViT, PermutationEquivarianceWithoutPositions) {
    auto cfg = ViTConfig::tiny(3, 16);  // 4 patches
    cfg.dropout_rate = 0.0;
    ViT<float> model(cfg, 20);
    auto& pos = model.param("embed.pos");
    std::vector<float> saved_pos = pos.data();
    std::fill(pos.mutable_data().begin(), pos.mutable_data().end(), 0.0f);

    Rng rng(21);
    auto img = random_tensor<float>({16, 16, 3}, rng, 0.0, 1.0);
    // permute the four 8x8 patch blocks: 0<-1, 1<-3, 2<-0, 3<-2
    std::vector<std::size_t> perm{1, 3, 0, 2};
    std::vector<float> permuted(img.size());
    std::size_t p = 8, gx = 2;
    for (std::size_t dst = 0; dst < 4; ++dst) {
        std::size_t src = perm[dst];
        std::size_t dy = (dst / gx) * p, dx = (dst % gx) * p;
        std::size_t sy = (src / gx) * p, sx = (src % gx) * p;
        for (std::size_t y = 0; y < p; ++y)
            for (std::size_t x = 0; x < p; ++x)
                for (std::size_t c = 0; c < 3; ++c)
                    permuted[((dy + y) * 16 + dx + x) * 3 + c] =
                        img.at(((sy + y) * 16 + sx + x) * 3 + c);
    }
    auto img2 = Tensor<float>::from_data({16, 16, 3}, permuted);

    auto t1 = model.encode(img, RunMode::kEval, nullptr);
    auto t2 = model.encode(img2, RunMode::kEval, nullptr);
    std::size_t d = cfg.embed_dim;
    double max_dev = 0;
    for (std::size_t j = 0; j < d; ++j)
        max_dev = std::max(max_dev, std::abs(double(t1.at(j)) - t2.at(j)));  // class token fixed
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < d; ++j)
            max_dev = std::max(max_dev, std::abs(double(t2.at((1 + i) * d + j)) -
                                                 t1.at((1 + perm[i]) * d + j)));
    EXPECT_LT(max_dev, 1e-5);

    // with positional embeddings restored the equivariance must break
    pos.mutable_data() = saved_pos;
    auto t3 = model.encode(img2, RunMode::kEval, nullptr);
    double dev_with_pos = 0;
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < d; ++j)
            dev_with_pos = std::max(dev_with_pos, std::abs(double(t3.at((1 + i) * d + j)) -
                                                           t1.at((1 + perm[i]) * d + j)));
    EXPECT_GT(dev_with_pos, 1e-3);
}

TEST(ViT, EndToEndTinyGradients) {
    auto cfg = ViTConfig::tiny(3);
    cfg.dropout_rate = 0.0;
    ViT<double> model(cfg, 22);
    Rng rng(23);
    auto img = random_tensor<double>({32, 32, 3}, rng, 0.0, 1.0);
    std::vector<std::uint16_t> labels{2};
    auto lossfn = [&] {
        return cross_entropy(model.forward_sample(img, RunMode::kEval, nullptr), labels);
    };
    std::vector<Tensor<double>> leaves;
    for (auto& p : model.parameters()) leaves.push_back(p.tensor);
    double err = lusc::testing::gradcheck_sampled(lossfn, leaves, 50, 777);
    EXPECT_LT(err, 1e-6);
}

TEST(ViT, ConfigValidation) {
    auto bad = ViTConfig::tiny(3);
    bad.patch_size = 7;  // 32 % 7 != 0
    EXPECT_THROW(bad.validate(), ConfigError);
    auto bad2 = ViTConfig::tiny(3);
    bad2.num_heads = 5;  // 64 % 5 != 0
    EXPECT_THROW(bad2.validate(), ConfigError);
    auto b16 = ViTConfig::b16(10);
    EXPECT_NO_THROW(b16.validate());
    EXPECT_EQ(b16.num_patches(), 196u);
}

TEST(Models, DistinctFingerprints) {
    AlexNetConfig a5;
    a5.num_classes = 5;
    a5.width_scale = 0.125;
    AlexNetConfig a10 = a5;
    a10.num_classes = 10;
    AlexNet<float> m5(a5, 1), m10(a10, 1);
    EXPECT_NE(m5.fingerprint(), m10.fingerprint());

    ViT<float> vt(ViTConfig::tiny(5), 1);
    EXPECT_NE(m5.fingerprint(), vt.fingerprint());
}
