#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "lusc/error.hpp"
#include "lusc/image.hpp"
#include "lusc/rng.hpp"
#include "lusc/sha256.hpp"
#include "lusc/tensor.hpp"

namespace lusc {

// Packed, labeled, pre-resized images plus class table and channel stats.
// Pixels live in one contiguous float block, sample-major, HxWxC row-major.
struct DatasetArchive {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 3;
    std::vector<float> pixels;
    std::vector<std::uint16_t> labels;
    std::vector<std::string> class_names;
    std::array<float, 3> channel_mean{};
    std::array<float, 3> channel_std{};
    Digest fingerprint{};
    bool standardized = false;

    std::size_t count() const { return labels.size(); }
    std::size_t sample_size() const { return height * width * channels; }

    const float* sample(std::size_t i) const { return pixels.data() + i * sample_size(); }
    float* sample(std::size_t i) { return pixels.data() + i * sample_size(); }

    Tensor<float> sample_tensor(std::size_t i) const {
        return Tensor<float>::from_data({height, width, channels},
                                        std::vector<float>(sample(i), sample(i) + sample_size()));
    }
};

// Deterministic partition of sample indices into train/val/test.
struct SplitSpec {
    std::uint64_t seed = 0;
    std::array<double, 3> ratios{};
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
    std::vector<std::size_t> test;
};

// Random-transform policy: flip, rotation, crop-and-resize, color jitter,
// applied in that fixed order, each gated by its own draw.
struct AugmentationPolicy {
    double horizontal_flip_prob = 0.0;
    double rotation_degrees_max = 0.0;
    double crop_scale_lo = 1.0;
    double crop_scale_hi = 1.0;
    double color_jitter_strength = 0.0;

    bool identity() const {
        return horizontal_flip_prob == 0.0 && rotation_degrees_max == 0.0 &&
               crop_scale_lo >= 1.0 && crop_scale_hi >= 1.0 && color_jitter_strength == 0.0;
    }

    void validate() const {
        if (horizontal_flip_prob < 0.0 || horizontal_flip_prob > 1.0)
            throw ConfigError("augment.flip_prob: must be in [0,1]");
        if (rotation_degrees_max < 0.0)
            throw ConfigError("augment.rotation_degrees: must be non-negative");
        if (!(crop_scale_lo > 0.0 && crop_scale_lo <= crop_scale_hi && crop_scale_hi <= 1.0))
            throw ConfigError("augment.crop_scale: range must satisfy 0 < lo <= hi <= 1");
        if (color_jitter_strength < 0.0)
            throw ConfigError("augment.color_jitter: must be non-negative");
    }

    // Defaults used by the shipped experiment configs.
    static AugmentationPolicy standard() {
        return AugmentationPolicy{0.5, 15.0, 0.8, 1.0, 0.1};
    }
};

namespace detail {

inline void update_fingerprint(Sha256& h, const DatasetArchive& a) {
    for (const auto& name : a.class_names) {
        h.update(name);
        h.update("\0", 1);
    }
    h.update(a.labels.data(), a.labels.size() * sizeof(std::uint16_t));
    std::uint64_t dims[3] = {a.height, a.width, a.channels};
    h.update(dims, sizeof(dims));
    h.update(a.pixels.data(), a.pixels.size() * sizeof(float));
}

inline void compute_channel_stats(DatasetArchive& a) {
    std::array<double, 3> sum{}, sq{};
    std::size_t per_channel = a.count() * a.height * a.width;
    for (std::size_t i = 0; i < a.pixels.size(); i += a.channels) {
        for (std::size_t c = 0; c < a.channels; ++c) {
            double v = a.pixels[i + c];
            sum[c] += v;
            sq[c] += v * v;
        }
    }
    for (std::size_t c = 0; c < 3; ++c) {
        double m = per_channel ? sum[c] / per_channel : 0.0;
        double var = per_channel ? std::max(0.0, sq[c] / per_channel - m * m) : 0.0;
        a.channel_mean[c] = static_cast<float>(m);
        a.channel_std[c] = static_cast<float>(std::sqrt(var));
    }
}

}  // namespace detail

// Decodes <root>/<class_name>/<image files>, resizes to target, scales pixels
// to [0,1], computes channel stats and the content fingerprint. Class names
// are the subdirectory names, sorted lexicographically.
inline DatasetArchive import_dataset(const std::string& root, std::size_t target_h,
                                     std::size_t target_w,
                                     const std::vector<std::string>& class_filter = {}) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root)) throw IoError("dataset root is not a directory: " + root);
    std::vector<std::string> classes;
    for (const auto& e : fs::directory_iterator(root)) {
        if (e.is_directory()) classes.push_back(e.path().filename().string());
    }
    std::sort(classes.begin(), classes.end());
    if (!class_filter.empty()) {
        for (const auto& want : class_filter) {
            if (std::find(classes.begin(), classes.end(), want) == classes.end())
                throw IoError("class_filter names absent class: " + want);
        }
        std::vector<std::string> kept;
        for (const auto& c : classes)
            if (std::find(class_filter.begin(), class_filter.end(), c) != class_filter.end())
                kept.push_back(c);
        classes = std::move(kept);
    }
    if (classes.empty()) throw IoError("no class directories under " + root);

    DatasetArchive archive;
    archive.height = target_h;
    archive.width = target_w;
    archive.channels = 3;
    archive.class_names = classes;
    std::size_t ssize = archive.sample_size();
    std::vector<float> scratch;
    for (std::size_t ci = 0; ci < classes.size(); ++ci) {
        fs::path dir = fs::path(root) / classes[ci];
        std::vector<std::string> files;
        for (const auto& e : fs::directory_iterator(dir))
            if (e.is_regular_file()) files.push_back(e.path().string());
        std::sort(files.begin(), files.end());
        if (files.empty()) throw IoError("empty class directory: " + dir.string());
        for (const auto& file : files) {
            RawImage raw = decode_image(file);
            scratch.resize(raw.height * raw.width * 3);
            for (std::size_t i = 0; i < scratch.size(); ++i)
                scratch[i] = static_cast<float>(raw.rgb[i]) / 255.0f;
            std::size_t base = archive.pixels.size();
            archive.pixels.resize(base + ssize);
            resize_bilinear(scratch.data(), raw.height, raw.width, 3,
                            archive.pixels.data() + base, target_h, target_w);
            archive.labels.push_back(static_cast<std::uint16_t>(ci));
        }
    }
    detail::compute_channel_stats(archive);
    Sha256 h;
    detail::update_fingerprint(h, archive);
    archive.fingerprint = h.finish();
    return archive;
}

// Channel-wise (x - mu) / sigma in place, using the archive's own stats. The
// stats fields keep the pre-transform values so inference can reuse them.
inline void standardize(DatasetArchive& a) {
    for (std::size_t c = 0; c < a.channels; ++c) {
        if (!(a.channel_std[c] > 0.0f))
            throw ValueError("standardize: channel " + std::to_string(c) +
                             " has zero standard deviation");
    }
    std::array<float, 3> inv{};
    for (std::size_t c = 0; c < a.channels; ++c) inv[c] = 1.0f / a.channel_std[c];
    for (std::size_t i = 0; i < a.pixels.size(); i += a.channels)
        for (std::size_t c = 0; c < a.channels; ++c)
            a.pixels[i + c] = (a.pixels[i + c] - a.channel_mean[c]) * inv[c];
    a.standardized = true;
}

namespace detail {

template <class S>
void hflip(std::vector<S>& px, std::size_t h, std::size_t w, std::size_t c) {
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w / 2; ++x)
            for (std::size_t ch = 0; ch < c; ++ch)
                std::swap(px[(y * w + x) * c + ch], px[(y * w + (w - 1 - x)) * c + ch]);
}

// Rotation about the image center; samples bilinearly with edge clamping.
template <class S>
void rotate(std::vector<S>& px, std::size_t h, std::size_t w, std::size_t c, double degrees) {
    double rad = degrees * 3.14159265358979323846 / 180.0;
    double cs = std::cos(rad), sn = std::sin(rad);
    double cy = (static_cast<double>(h) - 1.0) / 2.0;
    double cx = (static_cast<double>(w) - 1.0) / 2.0;
    std::vector<S> out(px.size());
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            double dy = static_cast<double>(y) - cy;
            double dx = static_cast<double>(x) - cx;
            double sy = std::clamp(cs * dy - sn * dx + cy, 0.0, static_cast<double>(h - 1));
            double sx = std::clamp(sn * dy + cs * dx + cx, 0.0, static_cast<double>(w - 1));
            std::size_t y0 = static_cast<std::size_t>(sy), x0 = static_cast<std::size_t>(sx);
            std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
            double wy = sy - y0, wx = sx - x0;
            for (std::size_t ch = 0; ch < c; ++ch) {
                double v00 = px[(y0 * w + x0) * c + ch], v01 = px[(y0 * w + x1) * c + ch];
                double v10 = px[(y1 * w + x0) * c + ch], v11 = px[(y1 * w + x1) * c + ch];
                double top = v00 + (v01 - v00) * wx;
                double bot = v10 + (v11 - v10) * wx;
                out[(y * w + x) * c + ch] = static_cast<S>(top + (bot - top) * wy);
            }
        }
    }
    px = std::move(out);
}

}  // namespace detail

// Applies flip -> rotation -> crop-and-resize -> color jitter, each gated by
// its own draw from `rng`. Output shape equals input shape; the identity
// policy is a bitwise no-op.
inline Tensor<float> augment(const Tensor<float>& image, const AugmentationPolicy& policy,
                             Rng& rng) {
    policy.validate();
    if (policy.identity()) return image;
    std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
    std::vector<float> px = image.data();
    if (policy.horizontal_flip_prob > 0.0) {
        if (rng.uniform() < policy.horizontal_flip_prob) detail::hflip(px, h, w, c);
    }
    if (policy.rotation_degrees_max > 0.0) {
        double angle = rng.uniform(-policy.rotation_degrees_max, policy.rotation_degrees_max);
        if (angle != 0.0) detail::rotate(px, h, w, c, angle);
    }
    if (policy.crop_scale_lo < 1.0 || policy.crop_scale_hi < 1.0) {
        double s = rng.uniform(policy.crop_scale_lo, policy.crop_scale_hi);
        std::size_t ch_ = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(h * s)));
        std::size_t cw_ = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(w * s)));
        std::size_t oy = static_cast<std::size_t>(rng.uniform_int(h - ch_ + 1));
        std::size_t ox = static_cast<std::size_t>(rng.uniform_int(w - cw_ + 1));
        if (ch_ != h || cw_ != w) {
            std::vector<float> crop(ch_ * cw_ * c);
            for (std::size_t y = 0; y < ch_; ++y)
                std::copy_n(px.data() + ((oy + y) * w + ox) * c, cw_ * c, crop.data() + y * cw_ * c);
            resize_bilinear(crop.data(), ch_, cw_, c, px.data(), h, w);
        }
    }
    if (policy.color_jitter_strength > 0.0) {
        float delta[3];
        for (int ch_ = 0; ch_ < 3; ++ch_)
            delta[ch_] = static_cast<float>(
                rng.uniform(-policy.color_jitter_strength, policy.color_jitter_strength));
        for (std::size_t i = 0; i < px.size(); i += c)
            for (std::size_t ch_ = 0; ch_ < c; ++ch_) px[i + ch_] += delta[ch_];
    }
    return Tensor<float>::from_data({h, w, c}, std::move(px));
}

// Stratified split: per-class seeded shuffle, then contiguous assignment
// train/val/test with floor counts and remainder given train-first.
inline SplitSpec split(const DatasetArchive& archive, std::array<double, 3> ratios,
                       std::uint64_t seed) {
    double total = ratios[0] + ratios[1] + ratios[2];
    if (!(ratios[0] > 0.0 && ratios[1] > 0.0 && ratios[2] > 0.0) ||
        std::abs(total - 1.0) > 1e-9) {
        throw ValueError("split: ratios must be positive and sum to 1");
    }
    std::size_t k = archive.class_names.size();
    std::vector<std::vector<std::size_t>> by_class(k);
    for (std::size_t i = 0; i < archive.count(); ++i) by_class[archive.labels[i]].push_back(i);
    for (std::size_t c = 0; c < k; ++c) {
        if (by_class[c].size() < 3) {
            throw ValueError("split: class '" + archive.class_names[c] + "' has " +
                             std::to_string(by_class[c].size()) +
                             " samples; at least 3 are needed to populate all subsets");
        }
    }
    SplitSpec spec;
    spec.seed = seed;
    spec.ratios = ratios;
    Rng rng(seed);
    for (std::size_t c = 0; c < k; ++c) {
        auto idx = by_class[c];
        rng.shuffle(idx);
        std::size_t n = idx.size();
        std::size_t n_tr = static_cast<std::size_t>(n * ratios[0]);
        std::size_t n_va = static_cast<std::size_t>(n * ratios[1]);
        std::size_t n_te = static_cast<std::size_t>(n * ratios[2]);
        std::size_t rem = n - (n_tr + n_va + n_te);
        // train-first remainder assignment
        while (rem > 0) { ++n_tr; --rem; if (rem > 0) { ++n_va; --rem; } if (rem > 0) { ++n_te; --rem; } }
        spec.train.insert(spec.train.end(), idx.begin(), idx.begin() + n_tr);
        spec.val.insert(spec.val.end(), idx.begin() + n_tr, idx.begin() + n_tr + n_va);
        spec.test.insert(spec.test.end(), idx.begin() + n_tr + n_va, idx.end());
    }
    return spec;
}

// ---------------------------------------------------------------------------
// Archive file format, little-endian:
//   magic "LUSC" | version u32=1 | K u32 | N u32 | H u16 | W u16 | C u16 |
//   reserved u16 | K x (len u32, UTF-8 name) | 3 x f32 mu | 3 x f32 sigma |
//   N x { label u16, pad u16, H*W*C f32 } | 32-byte content hash
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
void write_le(std::ofstream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_le(std::ifstream& in, std::size_t& offset, const std::string& path) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw IoError("archive truncated at byte offset " + std::to_string(offset) +
                           ": " + path);
    offset += sizeof(T);
    return v;
}

}  // namespace detail

inline void pack_archive(const DatasetArchive& a, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path);
    out.write("LUSC", 4);
    detail::write_le<std::uint32_t>(out, 1);
    detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(a.class_names.size()));
    detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(a.count()));
    detail::write_le<std::uint16_t>(out, static_cast<std::uint16_t>(a.height));
    detail::write_le<std::uint16_t>(out, static_cast<std::uint16_t>(a.width));
    detail::write_le<std::uint16_t>(out, static_cast<std::uint16_t>(a.channels));
    detail::write_le<std::uint16_t>(out, 0);
    for (const auto& name : a.class_names) {
        detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
    }
    for (float v : a.channel_mean) detail::write_le<float>(out, v);
    for (float v : a.channel_std) detail::write_le<float>(out, v);
    std::size_t ssize = a.sample_size();
    for (std::size_t i = 0; i < a.count(); ++i) {
        detail::write_le<std::uint16_t>(out, a.labels[i]);
        detail::write_le<std::uint16_t>(out, 0);
        out.write(reinterpret_cast<const char*>(a.sample(i)),
                  static_cast<std::streamsize>(ssize * sizeof(float)));
    }
    out.write(reinterpret_cast<const char*>(a.fingerprint.data()), 32);
    if (!out) throw IoError("write failure: " + path);
}

inline DatasetArchive load_archive(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open archive: " + path);
    std::size_t offset = 0;
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "LUSC", 4) != 0)
        throw IoError("bad archive magic at byte offset 0: " + path);
    offset = 4;
    auto version = detail::read_le<std::uint32_t>(in, offset, path);
    if (version != 1)
        throw IoError("unsupported archive version " + std::to_string(version) +
                      " at byte offset 4: " + path);
    auto k = detail::read_le<std::uint32_t>(in, offset, path);
    auto n = detail::read_le<std::uint32_t>(in, offset, path);
    DatasetArchive a;
    a.height = detail::read_le<std::uint16_t>(in, offset, path);
    a.width = detail::read_le<std::uint16_t>(in, offset, path);
    a.channels = detail::read_le<std::uint16_t>(in, offset, path);
    detail::read_le<std::uint16_t>(in, offset, path);
    for (std::uint32_t i = 0; i < k; ++i) {
        auto len = detail::read_le<std::uint32_t>(in, offset, path);
        std::string name(len, '\0');
        in.read(name.data(), len);
        if (!in) throw IoError("archive truncated at byte offset " + std::to_string(offset) +
                               ": " + path);
        offset += len;
        a.class_names.push_back(std::move(name));
    }
    for (auto& v : a.channel_mean) v = detail::read_le<float>(in, offset, path);
    for (auto& v : a.channel_std) v = detail::read_le<float>(in, offset, path);
    std::size_t ssize = a.sample_size();
    a.pixels.resize(std::size_t(n) * ssize);
    a.labels.resize(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        a.labels[i] = detail::read_le<std::uint16_t>(in, offset, path);
        if (a.labels[i] >= k)
            throw IoError("archive label out of range at byte offset " +
                          std::to_string(offset - 2) + ": " + path);
        detail::read_le<std::uint16_t>(in, offset, path);
        in.read(reinterpret_cast<char*>(a.pixels.data() + std::size_t(i) * ssize),
                static_cast<std::streamsize>(ssize * sizeof(float)));
        if (!in) throw IoError("archive truncated at byte offset " + std::to_string(offset) +
                               ": " + path);
        offset += ssize * sizeof(float);
    }
    in.read(reinterpret_cast<char*>(a.fingerprint.data()), 32);
    if (!in) throw IoError("archive truncated at byte offset " + std::to_string(offset) +
                           ": " + path);
    offset += 32;
    in.peek();
    if (!in.eof())
        throw IoError("trailing bytes after archive payload at byte offset " +
                      std::to_string(offset) + ": " + path);
    return a;
}

// ---------------------------------------------------------------------------
// Batch emission
// ---------------------------------------------------------------------------

struct Batch {
    Tensor<float> images;           // B x H x W x C
    std::vector<std::uint16_t> labels;
};

// One epoch worth of batches: a seeded permutation of `indices`, optional
// per-sample augmentation, optional bilinear resize to the model input size.
// The final partial batch is emitted.
class BatchStream {
public:
    BatchStream(const DatasetArchive& archive, const std::vector<std::size_t>& indices,
                std::size_t batch_size, std::uint64_t shuffle_seed,
                const AugmentationPolicy* policy = nullptr,
                std::optional<std::pair<std::size_t, std::size_t>> target_size = {},
                bool shuffle = true)
        : archive_(archive), order_(indices), batch_size_(batch_size), policy_(policy),
          rng_(shuffle_seed) {
        if (indices.empty()) throw ValueError("batches: empty index list");
        if (batch_size == 0) throw ValueError("batches: batch_size must be >= 1");
        if (target_size) {
            out_h_ = target_size->first;
            out_w_ = target_size->second;
        } else {
            out_h_ = archive.height;
            out_w_ = archive.width;
        }
        if (shuffle) rng_.shuffle(order_);
    }

    std::size_t batch_count() const { return (order_.size() + batch_size_ - 1) / batch_size_; }

    bool next(Batch& batch) {
        if (cursor_ >= order_.size()) return false;
        std::size_t b = std::min(batch_size_, order_.size() - cursor_);
        std::size_t c = archive_.channels;
        std::vector<float> images(b * out_h_ * out_w_ * c);
        batch.labels.assign(b, 0);
        for (std::size_t i = 0; i < b; ++i) {
            std::size_t idx = order_[cursor_ + i];
            batch.labels[i] = archive_.labels[idx];
            Tensor<float> img = archive_.sample_tensor(idx);
            if (policy_ && !policy_->identity()) img = augment(img, *policy_, rng_);
            resize_bilinear(img.data().data(), archive_.height, archive_.width, c,
                            images.data() + i * out_h_ * out_w_ * c, out_h_, out_w_);
        }
        batch.images = Tensor<float>::from_data({b, out_h_, out_w_, c}, std::move(images));
        cursor_ += b;
        return true;
    }

private:
    const DatasetArchive& archive_;
    std::vector<std::size_t> order_;
    std::size_t batch_size_;
    const AugmentationPolicy* policy_;
    Rng rng_;
    std::size_t out_h_ = 0, out_w_ = 0;
    std::size_t cursor_ = 0;
};

// ---------------------------------------------------------------------------
// Synthetic blob dataset: three classes separated by channel means, with soft
// gaussian bumps for spatial texture. Used by the CI configs and smoke tests.
// ---------------------------------------------------------------------------

inline DatasetArchive make_blob_archive(std::uint64_t seed, std::size_t per_class = 100,
                                        std::size_t hw = 64) {
    static const float base_colors[3][3] = {
        {0.75f, 0.25f, 0.25f}, {0.25f, 0.75f, 0.25f}, {0.25f, 0.25f, 0.75f}};
    DatasetArchive a;
    a.height = hw;
    a.width = hw;
    a.channels = 3;
    a.class_names = {"blob_red", "blob_green", "blob_blue"};
    Rng rng(mix_seed(seed, "blobs"));
    std::size_t ssize = a.sample_size();
    a.pixels.resize(3 * per_class * ssize);
    for (std::size_t cls = 0; cls < 3; ++cls) {
        for (std::size_t s = 0; s < per_class; ++s) {
            float* px = a.pixels.data() + (cls * per_class + s) * ssize;
            float base[3];
            for (int c = 0; c < 3; ++c)
                base[c] = base_colors[cls][c] + static_cast<float>(rng.uniform(-0.05, 0.05));
            for (std::size_t i = 0; i < hw * hw; ++i) {
                float noise = static_cast<float>(rng.uniform(-0.08, 0.08));
                for (int c = 0; c < 3; ++c) px[i * 3 + c] = base[c] + noise;
            }
            int bumps = 3 + static_cast<int>(rng.uniform_int(4));
            for (int bmp = 0; bmp < bumps; ++bmp) {
                double by = rng.uniform(0.0, hw - 1.0), bx = rng.uniform(0.0, hw - 1.0);
                double radius = rng.uniform(hw / 16.0, hw / 5.0);
                double amp = rng.uniform(-0.25, 0.25);
                int channel = static_cast<int>(rng.uniform_int(3));
                double inv2r2 = 1.0 / (2.0 * radius * radius);
                for (std::size_t y = 0; y < hw; ++y)
                    for (std::size_t x = 0; x < hw; ++x) {
                        double d2 = (y - by) * (y - by) + (x - bx) * (x - bx);
                        px[(y * hw + x) * 3 + channel] +=
                            static_cast<float>(amp * std::exp(-d2 * inv2r2));
                    }
            }
            for (std::size_t i = 0; i < ssize; ++i) px[i] = std::clamp(px[i], 0.0f, 1.0f);
            a.labels.push_back(static_cast<std::uint16_t>(cls));
        }
    }
    detail::compute_channel_stats(a);
    Sha256 h;
    detail::update_fingerprint(h, a);
    a.fingerprint = h.finish();
    return a;
}

}  // namespace lusc
