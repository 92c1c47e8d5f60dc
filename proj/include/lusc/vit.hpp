#pragma once

#include <cmath>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "lusc/model.hpp"
#include "lusc/ops.hpp"

namespace lusc {

inline constexpr double kLayerNormEps = 1e-5;

struct ViTConfig {
    std::size_t image_h = 224;
    std::size_t image_w = 224;
    std::size_t patch_size = 16;
    std::size_t embed_dim = 768;
    std::size_t depth = 12;
    std::size_t num_heads = 12;
    std::size_t mlp_hidden = 3072;
    std::size_t num_classes = 0;
    double dropout_rate = 0.1;
    bool final_layernorm = true;

    void validate() const {
        if (num_classes < 2) throw ConfigError("model.vit.num_classes: must be >= 2");
        if (patch_size == 0 || image_h % patch_size != 0 || image_w % patch_size != 0)
            throw ConfigError("model.vit.patch_size: image dimensions must be divisible by it");
        if (num_heads == 0 || embed_dim % num_heads != 0)
            throw ConfigError("model.vit.num_heads: embed_dim must be divisible by it");
        if (depth == 0) throw ConfigError("model.vit.depth: must be >= 1");
        if (mlp_hidden == 0) throw ConfigError("model.vit.mlp_hidden: must be >= 1");
        if (dropout_rate < 0.0 || dropout_rate >= 1.0)
            throw ConfigError("model.vit.dropout_rate: must be in [0,1)");
    }

    std::size_t num_patches() const { return (image_h / patch_size) * (image_w / patch_size); }
    std::size_t patch_dim() const { return patch_size * patch_size * 3; }
    std::size_t head_dim() const { return embed_dim / num_heads; }

    static ViTConfig b16(std::size_t num_classes) {
        ViTConfig c;
        c.num_classes = num_classes;
        return c;
    }

    // Desk-scale preset for fast training and gradient tests.
    static ViTConfig tiny(std::size_t num_classes, std::size_t image = 32) {
        ViTConfig c;
        c.image_h = c.image_w = image;
        c.patch_size = 8;
        c.embed_dim = 64;
        c.depth = 2;
        c.num_heads = 4;
        c.mlp_hidden = 128;
        c.num_classes = num_classes;
        return c;
    }
};

// Token matrix [(Np+1) x D]; row 0 is the class token.
template <class S>
using TokenSequence = Tensor<S>;

// Z0 = [cls; patches * E] + pos.
template <class S>
Tensor<S> embed(const Tensor<S>& patches, const Tensor<S>& projection, const Tensor<S>& cls,
                const Tensor<S>& pos) {
    if (patches.rank() != 2 || projection.rank() != 2 || patches.dim(1) != projection.dim(0)) {
        throw ShapeError("embed: patches " + shape_str(patches.shape()) +
                         " incompatible with projection " + shape_str(projection.shape()));
    }
    std::size_t d = projection.dim(1);
    if (cls.shape() != Shape{d})
        throw ShapeError("embed: class token must be [" + std::to_string(d) + "], got " +
                         shape_str(cls.shape()));
    if (pos.shape() != Shape{patches.dim(0) + 1, d})
        throw ShapeError("embed: positional table must be [" + std::to_string(patches.dim(0) + 1) +
                         "x" + std::to_string(d) + "], got " + shape_str(pos.shape()));
    auto cls_row = reshape(cls, {std::size_t(1), d});
    auto tokens = concat_rows<S>({cls_row, matmul(patches, projection)});
    return add(tokens, pos);
}

// softmax(Q K^T / sqrt(d_k)) V with row-wise softmax. If `weights_out` is
// given, the attention matrix is copied there after the forward.
template <class S>
Tensor<S> attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                    Tensor<S>* weights_out = nullptr) {
    if (q.rank() != 2 || q.shape() != k.shape() || q.shape() != v.shape()) {
        throw ShapeError("attention: Q/K/V must share [T x d_k] shape, got " +
                         shape_str(q.shape()) + ", " + shape_str(k.shape()) + ", " +
                         shape_str(v.shape()));
    }
    S inv_sqrt_dk = static_cast<S>(1.0 / std::sqrt(static_cast<double>(q.dim(1))));
    auto scores = scale(matmul(q, transpose(k)), inv_sqrt_dk);
    auto probs = softmax(scores);
    if (weights_out) *weights_out = Tensor<S>::from_data(probs.shape(), probs.data());
    return matmul(probs, v);
}

template <class S>
struct MsaWeights {
    Tensor<S> wq, wk, wv, wo;  // each [D x D]
};

// Heads are column blocks of the fused projections; computed independently,
// concatenated, then projected by wo.
template <class S>
Tensor<S> msa(const Tensor<S>& z, const MsaWeights<S>& w, std::size_t heads,
              std::vector<Tensor<S>>* attention_maps = nullptr) {
    std::size_t d = z.dim(1);
    if (heads == 0 || d % heads != 0)
        throw ShapeError("msa: embed dim " + std::to_string(d) + " not divisible by " +
                         std::to_string(heads) + " heads");
    std::size_t dk = d / heads;
    auto q = matmul(z, w.wq);
    auto k = matmul(z, w.wk);
    auto v = matmul(z, w.wv);
    std::vector<Tensor<S>> head_outputs;
    head_outputs.reserve(heads);
    for (std::size_t hidx = 0; hidx < heads; ++hidx) {
        std::size_t c0 = hidx * dk, c1 = c0 + dk;
        Tensor<S> weights;
        auto out = attention(slice_cols(q, c0, c1), slice_cols(k, c0, c1),
                             slice_cols(v, c0, c1), attention_maps ? &weights : nullptr);
        if (attention_maps) attention_maps->push_back(weights);
        head_outputs.push_back(out);
    }
    return matmul(heads == 1 ? head_outputs[0] : concat_cols(head_outputs), w.wo);
}

template <class S>
struct EncoderBlockWeights {
    Tensor<S> ln1_gain, ln1_shift;
    MsaWeights<S> attn;
    Tensor<S> ln2_gain, ln2_shift;
    Tensor<S> mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

// Pre-norm residual block: Z' = Z + MSA(LN(Z)); out = Z' + MLP(LN(Z')).
template <class S>
Tensor<S> encoder_block(const Tensor<S>& z, const EncoderBlockWeights<S>& w, std::size_t heads,
                        double dropout_rate = 0.0, RunMode mode = RunMode::kEval,
                        Rng* rng = nullptr, std::vector<Tensor<S>>* attention_maps = nullptr) {
    S eps = static_cast<S>(kLayerNormEps);
    auto attended = msa(layernorm(z, w.ln1_gain, w.ln1_shift, eps), w.attn, heads, attention_maps);
    auto z1 = add(z, attended);
    auto hidden = gelu(add_rowvec(matmul(layernorm(z1, w.ln2_gain, w.ln2_shift, eps), w.mlp_w1),
                                  w.mlp_b1));
    if (mode == RunMode::kTrain && dropout_rate > 0.0)
        hidden = dropout(hidden, dropout_rate, mode, *rng);
    auto mlp_out = add_rowvec(matmul(hidden, w.mlp_w2), w.mlp_b2);
    return add(z1, mlp_out);
}

// Vision transformer: patchify -> embed -> depth encoder blocks -> final LN ->
// class token -> affine head. Softmax is deferred to the loss / inference.
template <class S>
class ViT : public Model<S> {
public:
    ViT(const ViTConfig& config, std::uint64_t init_seed) : config_(config) {
        config.validate();
        Rng rng(init_seed);
        std::size_t d = config.embed_dim, pd = config.patch_dim(), np = config.num_patches();
        params_.push_back({"embed.projection", detail::he_uniform<S>({pd, d}, pd, rng)});
        params_.push_back({"embed.cls", detail::gaussian<S>({d}, 0.02, rng)});
        params_.push_back({"embed.pos", detail::gaussian<S>({np + 1, d}, 0.02, rng)});
        for (std::size_t l = 0; l < config.depth; ++l) {
            std::string prefix = "block" + std::to_string(l) + ".";
            params_.push_back({prefix + "ln1.gain", Tensor<S>::full({d}, S(1))});
            params_.push_back({prefix + "ln1.shift", Tensor<S>::zeros({d})});
            params_.push_back({prefix + "attn.wq", detail::he_uniform<S>({d, d}, d, rng)});
            params_.push_back({prefix + "attn.wk", detail::he_uniform<S>({d, d}, d, rng)});
            params_.push_back({prefix + "attn.wv", detail::he_uniform<S>({d, d}, d, rng)});
            params_.push_back({prefix + "attn.wo", detail::he_uniform<S>({d, d}, d, rng)});
            params_.push_back({prefix + "ln2.gain", Tensor<S>::full({d}, S(1))});
            params_.push_back({prefix + "ln2.shift", Tensor<S>::zeros({d})});
            params_.push_back({prefix + "mlp.w1", detail::he_uniform<S>({d, config.mlp_hidden}, d, rng)});
            params_.push_back({prefix + "mlp.b1", Tensor<S>::zeros({config.mlp_hidden})});
            params_.push_back({prefix + "mlp.w2",
                               detail::he_uniform<S>({config.mlp_hidden, d}, config.mlp_hidden, rng)});
            params_.push_back({prefix + "mlp.b2", Tensor<S>::zeros({d})});
        }
        params_.push_back({"final_ln.gain", Tensor<S>::full({d}, S(1))});
        params_.push_back({"final_ln.shift", Tensor<S>::zeros({d})});
        params_.push_back({"head.weight", detail::he_uniform<S>({d, config.num_classes}, d, rng)});
        params_.push_back({"head.bias", Tensor<S>::zeros({config.num_classes})});
    }

    const ViTConfig& config() const { return config_; }

    Tensor<S> forward(const Tensor<S>& batch, RunMode mode, Rng* dropout_rng) override {
        if (batch.rank() != 4 || batch.dim(1) != config_.image_h ||
            batch.dim(2) != config_.image_w || batch.dim(3) != 3) {
            throw ShapeError("vit: expected batch [Bx" + std::to_string(config_.image_h) + "x" +
                             std::to_string(config_.image_w) + "x3], got " +
                             shape_str(batch.shape()));
        }
        std::size_t b = batch.dim(0);
        std::size_t ssize = batch.size() / b;
        std::vector<Tensor<S>> rows;
        rows.reserve(b);
        for (std::size_t i = 0; i < b; ++i) {
            auto sample = Tensor<S>::from_data(
                {config_.image_h, config_.image_w, std::size_t(3)},
                std::vector<S>(batch.data().begin() + i * ssize,
                               batch.data().begin() + (i + 1) * ssize));
            rows.push_back(forward_sample(sample, mode, dropout_rng));
        }
        return b == 1 ? rows[0] : concat_rows(rows);
    }

    // Single image [H x W x 3] -> logits [1 x K].
    Tensor<S> forward_sample(const Tensor<S>& image, RunMode mode, Rng* dropout_rng) {
        auto tokens = encode(image, mode, dropout_rng);
        auto cls_final = slice_rows(tokens, 0, 1);
        return add_rowvec(matmul(cls_final, param("head.weight")), param("head.bias"));
    }

    // Token matrix after the final layernorm (the classifier input view).
    TokenSequence<S> encode(const Tensor<S>& image, RunMode mode, Rng* dropout_rng) {
        if (mode == RunMode::kTrain && config_.dropout_rate > 0.0 && dropout_rng == nullptr)
            throw ValueError("vit: train-mode forward needs a dropout rng");
        if (capture_attention_) attention_maps_.clear();
        auto patches = patchify(image, config_.patch_size);
        auto tokens = embed(patches, param("embed.projection"), param("embed.cls"),
                            param("embed.pos"));
        if (mode == RunMode::kTrain && config_.dropout_rate > 0.0)
            tokens = dropout(tokens, config_.dropout_rate, mode, *dropout_rng);
        for (std::size_t l = 0; l < config_.depth; ++l) {
            std::string prefix = "block" + std::to_string(l) + ".";
            EncoderBlockWeights<S> w{
                param(prefix + "ln1.gain"), param(prefix + "ln1.shift"),
                MsaWeights<S>{param(prefix + "attn.wq"), param(prefix + "attn.wk"),
                              param(prefix + "attn.wv"), param(prefix + "attn.wo")},
                param(prefix + "ln2.gain"), param(prefix + "ln2.shift"),
                param(prefix + "mlp.w1"), param(prefix + "mlp.b1"),
                param(prefix + "mlp.w2"), param(prefix + "mlp.b2")};
            tokens = encoder_block(tokens, w, config_.num_heads, config_.dropout_rate, mode,
                                   dropout_rng, capture_attention_ ? &attention_maps_ : nullptr);
        }
        if (config_.final_layernorm) {
            tokens = layernorm(tokens, param("final_ln.gain"), param("final_ln.shift"),
                               static_cast<S>(kLayerNormEps));
        }
        return tokens;
    }

    // Debug capture of per-head attention matrices (depth * heads entries per
    // forward, in block-major order).
    void set_capture_attention(bool on) { capture_attention_ = on; }
    const std::vector<Tensor<S>>& attention_maps() const { return attention_maps_; }

    std::vector<NamedParam<S>>& parameters() override { return params_; }
    const std::vector<NamedParam<S>>& parameters() const override { return params_; }

    std::pair<std::size_t, std::size_t> input_size() const override {
        return {config_.image_h, config_.image_w};
    }

    std::size_t num_classes() const override { return config_.num_classes; }

    std::string architecture() const override {
        std::ostringstream os;
        os << "vit;image=" << config_.image_h << "x" << config_.image_w
           << ";patch=" << config_.patch_size << ";dim=" << config_.embed_dim
           << ";depth=" << config_.depth << ";heads=" << config_.num_heads
           << ";mlp=" << config_.mlp_hidden << ";classes=" << config_.num_classes
           << ";final_ln=" << (config_.final_layernorm ? 1 : 0);
        return os.str();
    }

    Tensor<S>& param(const std::string& name) {
        for (auto& p : params_)
            if (p.name == name) return p.tensor;
        throw Error("vit: unknown parameter " + name);
    }

private:
    ViTConfig config_;
    std::vector<NamedParam<S>> params_;
    bool capture_attention_ = false;
    std::vector<Tensor<S>> attention_maps_;
};

}  // namespace lusc
