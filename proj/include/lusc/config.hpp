#pragma once

#include <array>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "lusc/alexnet.hpp"
#include "lusc/dataset.hpp"
#include "lusc/error.hpp"
#include "lusc/sha256.hpp"
#include "lusc/train.hpp"
#include "lusc/vit.hpp"

namespace lusc {

// ---------------------------------------------------------------------------
// TOML-subset reader. Supported grammar:
//   # comment lines and trailing comments
//   [section] or [section.subsection]
//   key = "string" | number | true | false | [v1, v2, ...]
// Arrays are homogeneous (strings or numbers). Numbers keep their raw text so
// 64-bit seeds round-trip exactly.
// ---------------------------------------------------------------------------

struct TomlValue {
    enum class Kind { kString, kNumber, kBool, kArray };
    Kind kind = Kind::kString;
    std::string str;
    double num = 0.0;
    std::string raw;  // original number text
    bool boolean = false;
    std::vector<TomlValue> array;
};

class Toml {
public:
    static Toml parse_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file: " + path);
        std::stringstream ss;
        ss << in.rdbuf();
        return parse(ss.str(), path);
    }

    static Toml parse(const std::string& text, const std::string& origin = "<string>") {
        Toml toml;
        std::istringstream in(text);
        std::string line, section;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            std::string s = strip_comment(line);
            s = trim(s);
            if (s.empty()) continue;
            if (s.front() == '[') {
                if (s.back() != ']')
                    throw ConfigError(origin + ":" + std::to_string(lineno) +
                                      ": malformed section header");
                section = trim(s.substr(1, s.size() - 2));
                if (section.empty())
                    throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty section name");
                toml.tables_[section];
                continue;
            }
            auto eq = s.find('=');
            if (eq == std::string::npos)
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
            std::string key = trim(s.substr(0, eq));
            std::string value = trim(s.substr(eq + 1));
            if (key.empty() || value.empty())
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
            toml.tables_[section][key] = parse_value(value, origin, lineno);
        }
        return toml;
    }

    bool has(const std::string& section) const { return tables_.count(section) != 0; }

    bool has(const std::string& section, const std::string& key) const {
        auto it = tables_.find(section);
        return it != tables_.end() && it->second.count(key) != 0;
    }

    const TomlValue& get(const std::string& section, const std::string& key) const {
        auto it = tables_.find(section);
        if (it == tables_.end() || !it->second.count(key))
            throw ConfigError(section + "." + key + ": missing required field");
        return it->second.at(key);
    }

    std::string get_string(const std::string& section, const std::string& key) const {
        const auto& v = get(section, key);
        if (v.kind != TomlValue::Kind::kString)
            throw ConfigError(section + "." + key + ": expected a string");
        return v.str;
    }

    std::string get_string(const std::string& section, const std::string& key,
                           const std::string& fallback) const {
        return has(section, key) ? get_string(section, key) : fallback;
    }

    double get_number(const std::string& section, const std::string& key) const {
        const auto& v = get(section, key);
        if (v.kind != TomlValue::Kind::kNumber)
            throw ConfigError(section + "." + key + ": expected a number");
        return v.num;
    }

    double get_number(const std::string& section, const std::string& key, double fallback) const {
        return has(section, key) ? get_number(section, key) : fallback;
    }

    std::int64_t get_int(const std::string& section, const std::string& key) const {
        const auto& v = get(section, key);
        if (v.kind != TomlValue::Kind::kNumber)
            throw ConfigError(section + "." + key + ": expected an integer");
        try {
            return std::stoll(v.raw);
        } catch (const std::exception&) {
            throw ConfigError(section + "." + key + ": expected an integer, got '" + v.raw + "'");
        }
    }

    std::int64_t get_int(const std::string& section, const std::string& key,
                         std::int64_t fallback) const {
        return has(section, key) ? get_int(section, key) : fallback;
    }

    std::uint64_t get_u64(const std::string& section, const std::string& key) const {
        const auto& v = get(section, key);
        if (v.kind != TomlValue::Kind::kNumber)
            throw ConfigError(section + "." + key + ": expected an unsigned integer");
        try {
            return std::stoull(v.raw);
        } catch (const std::exception&) {
            throw ConfigError(section + "." + key + ": expected an unsigned integer, got '" +
                              v.raw + "'");
        }
    }

    std::uint64_t get_u64(const std::string& section, const std::string& key,
                          std::uint64_t fallback) const {
        return has(section, key) ? get_u64(section, key) : fallback;
    }

    bool get_bool(const std::string& section, const std::string& key, bool fallback) const {
        if (!has(section, key)) return fallback;
        const auto& v = get(section, key);
        if (v.kind != TomlValue::Kind::kBool)
            throw ConfigError(section + "." + key + ": expected true or false");
        return v.boolean;
    }

    std::vector<std::string> get_string_array(const std::string& section,
                                              const std::string& key) const {
        const auto& v = get(section, key);
        if (v.kind != TomlValue::Kind::kArray)
            throw ConfigError(section + "." + key + ": expected an array of strings");
        std::vector<std::string> out;
        for (const auto& e : v.array) {
            if (e.kind != TomlValue::Kind::kString)
                throw ConfigError(section + "." + key + ": expected an array of strings");
            out.push_back(e.str);
        }
        return out;
    }

    std::vector<double> get_number_array(const std::string& section, const std::string& key) const {
        const auto& v = get(section, key);
        if (v.kind != TomlValue::Kind::kArray)
            throw ConfigError(section + "." + key + ": expected an array of numbers");
        std::vector<double> out;
        for (const auto& e : v.array) {
            if (e.kind != TomlValue::Kind::kNumber)
                throw ConfigError(section + "." + key + ": expected an array of numbers");
            out.push_back(e.num);
        }
        return out;
    }

    void set_number(const std::string& section, const std::string& key, std::uint64_t value) {
        TomlValue v;
        v.kind = TomlValue::Kind::kNumber;
        v.num = static_cast<double>(value);
        v.raw = std::to_string(value);
        tables_[section][key] = v;
    }

    void set_string(const std::string& section, const std::string& key, const std::string& value) {
        TomlValue v;
        v.kind = TomlValue::Kind::kString;
        v.str = value;
        tables_[section][key] = v;
    }

    // Canonical serialization: sorted sections and keys, one line per entry.
    std::string canonical() const {
        std::ostringstream os;
        for (const auto& [section, entries] : tables_) {
            for (const auto& [key, value] : entries) {
                os << section << "." << key << "=" << canonical_value(value) << "\n";
            }
        }
        return os.str();
    }

    std::string hash() const { return hex_digest(sha256(canonical())); }

private:
    static std::string trim(const std::string& s) {
        std::size_t b = 0, e = s.size();
        while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
        while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
        return s.substr(b, e - b);
    }

    static std::string strip_comment(const std::string& line) {
        bool in_string = false;
        for (std::size_t i = 0; i < line.size(); ++i) {
            if (line[i] == '"') in_string = !in_string;
            else if (line[i] == '#' && !in_string) return line.substr(0, i);
        }
        return line;
    }

    static TomlValue parse_value(const std::string& text, const std::string& origin, int lineno) {
        TomlValue v;
        if (text.front() == '"') {
            if (text.size() < 2 || text.back() != '"')
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": unterminated string");
            v.kind = TomlValue::Kind::kString;
            v.str = text.substr(1, text.size() - 2);
            return v;
        }
        if (text == "true" || text == "false") {
            v.kind = TomlValue::Kind::kBool;
            v.boolean = text == "true";
            return v;
        }
        if (text.front() == '[') {
            if (text.back() != ']')
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": unterminated array");
            v.kind = TomlValue::Kind::kArray;
            std::string inner = text.substr(1, text.size() - 2);
            std::vector<std::string> parts;
            std::string cur;
            bool in_string = false;
            for (char c : inner) {
                if (c == '"') in_string = !in_string;
                if (c == ',' && !in_string) {
                    parts.push_back(cur);
                    cur.clear();
                } else {
                    cur.push_back(c);
                }
            }
            if (!trim(cur).empty()) parts.push_back(cur);
            for (auto& part : parts) {
                std::string p = trim(part);
                if (p.empty())
                    throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty array element");
                v.array.push_back(parse_value(p, origin, lineno));
            }
            return v;
        }
        v.kind = TomlValue::Kind::kNumber;
        v.raw = text;
        try {
            std::size_t used = 0;
            v.num = std::stod(text, &used);
            if (used != text.size()) throw std::invalid_argument(text);
        } catch (const std::exception&) {
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": cannot parse value '" +
                              text + "'");
        }
        return v;
    }

    static std::string canonical_value(const TomlValue& v) {
        char buf[64];
        switch (v.kind) {
            case TomlValue::Kind::kString:
                return "s:" + v.str;
            case TomlValue::Kind::kBool:
                return v.boolean ? "b:true" : "b:false";
            case TomlValue::Kind::kNumber:
                std::snprintf(buf, sizeof(buf), "n:%.17g", v.num);
                return buf;
            case TomlValue::Kind::kArray: {
                std::string out = "a:[";
                for (std::size_t i = 0; i < v.array.size(); ++i) {
                    if (i) out += ",";
                    out += canonical_value(v.array[i]);
                }
                return out + "]";
            }
        }
        return "";
    }

    std::map<std::string, std::map<std::string, TomlValue>> tables_;
};

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

struct DatasetSection {
    std::string root;                     // image tree to import
    std::string archive;                  // or: pre-packed archive
    std::string synthetic;                // or: "blobs"
    std::size_t target_h = 0, target_w = 0;
    std::vector<std::string> class_filter;
    std::uint64_t synthetic_seed = 7;
    std::size_t synthetic_per_class = 100;
    std::size_t synthetic_size = 64;
};

struct SplitSection {
    std::array<double, 3> ratios{0.8, 0.1, 0.1};
    std::uint64_t seed = 42;
};

struct ModelSection {
    std::string type;  // "alexnet" | "vit"
    AlexNetConfig alexnet;
    ViTConfig vit;
    std::uint64_t init_seed = 1;
};

struct ExperimentConfig {
    DatasetSection dataset;
    SplitSection split;
    ModelSection model;                 // for `train` / `evaluate`
    std::vector<std::string> compare_models;  // for `compare`
    TrainConfig train;
    AugmentationPolicy augment;
    std::string output_dir = "out";
    std::string config_hash;

    static ExperimentConfig from_toml(Toml toml,
                                      std::optional<std::uint64_t> seed_override = {},
                                      std::optional<std::string> out_override = {}) {
        if (seed_override) {
            toml.set_number("split", "seed", *seed_override);
            toml.set_number("train", "seed", *seed_override);
        }
        if (out_override) toml.set_string("output", "dir", *out_override);

        ExperimentConfig cfg;
        cfg.config_hash = toml.hash();

        // dataset
        cfg.dataset.root = toml.get_string("dataset", "root", "");
        cfg.dataset.archive = toml.get_string("dataset", "archive", "");
        cfg.dataset.synthetic = toml.get_string("dataset", "synthetic", "");
        int sources = (!cfg.dataset.root.empty()) + (!cfg.dataset.archive.empty()) +
                      (!cfg.dataset.synthetic.empty());
        if (sources != 1)
            throw ConfigError("dataset: exactly one of root, archive, synthetic is required");
        if (!cfg.dataset.synthetic.empty() && cfg.dataset.synthetic != "blobs")
            throw ConfigError("dataset.synthetic: unknown generator '" + cfg.dataset.synthetic + "'");
        if (toml.has("dataset", "target_size")) {
            auto hw = toml.get_number_array("dataset", "target_size");
            if (hw.size() != 2 || hw[0] < 1 || hw[1] < 1)
                throw ConfigError("dataset.target_size: expected [height, width]");
            cfg.dataset.target_h = static_cast<std::size_t>(hw[0]);
            cfg.dataset.target_w = static_cast<std::size_t>(hw[1]);
        } else if (!cfg.dataset.root.empty()) {
            throw ConfigError("dataset.target_size: required when importing from a directory");
        }
        if (toml.has("dataset", "class_filter"))
            cfg.dataset.class_filter = toml.get_string_array("dataset", "class_filter");
        cfg.dataset.synthetic_seed = toml.get_u64("dataset", "synthetic_seed", 7);
        cfg.dataset.synthetic_per_class = static_cast<std::size_t>(
            toml.get_int("dataset", "synthetic_per_class", 100));
        cfg.dataset.synthetic_size = static_cast<std::size_t>(
            toml.get_int("dataset", "synthetic_size", 64));

        // split
        if (toml.has("split", "ratios")) {
            auto r = toml.get_number_array("split", "ratios");
            if (r.size() != 3) throw ConfigError("split.ratios: expected [train, val, test]");
            cfg.split.ratios = {r[0], r[1], r[2]};
        }
        cfg.split.seed = toml.get_u64("split", "seed", 42);

        // model(s)
        cfg.model.type = toml.get_string("model", "type", "");
        cfg.model.init_seed = toml.get_u64("model", "init_seed", 1);
        if (toml.has("compare", "models")) {
            cfg.compare_models = toml.get_string_array("compare", "models");
            for (const auto& m : cfg.compare_models)
                if (m != "alexnet" && m != "vit")
                    throw ConfigError("compare.models: unknown model '" + m + "'");
        }
        cfg.model.alexnet = parse_alexnet(toml);
        cfg.model.vit = parse_vit(toml);
        if (!cfg.model.type.empty() && cfg.model.type != "alexnet" && cfg.model.type != "vit")
            throw ConfigError("model.type: must be \"alexnet\" or \"vit\"");

        // train
        std::string opt = toml.get_string("train", "optimizer", "adam");
        if (opt == "adam") cfg.train.optimizer = OptimizerKind::kAdam;
        else if (opt == "sgd") cfg.train.optimizer = OptimizerKind::kSgd;
        else throw ConfigError("train.optimizer: must be \"adam\" or \"sgd\"");
        cfg.train.learning_rate = toml.get_number("train", "learning_rate", 1e-3);
        cfg.train.weight_decay = toml.get_number("train", "weight_decay", 1e-4);
        cfg.train.batch_size = static_cast<std::size_t>(toml.get_int("train", "batch_size", 32));
        cfg.train.max_epochs = static_cast<int>(toml.get_int("train", "max_epochs", 30));
        cfg.train.early_stop_patience =
            static_cast<int>(toml.get_int("train", "early_stop_patience", 10));
        cfg.train.seed = toml.get_u64("train", "seed", 42);
        std::string sched = toml.get_string("train", "lr_schedule", "step");
        if (sched == "constant") cfg.train.schedule.kind = LrScheduleKind::kConstant;
        else if (sched == "step") cfg.train.schedule.kind = LrScheduleKind::kStep;
        else if (sched == "cosine") cfg.train.schedule.kind = LrScheduleKind::kCosine;
        else throw ConfigError("train.lr_schedule: must be constant, step or cosine");
        cfg.train.schedule.step_factor = toml.get_number("train", "lr_step_factor", 0.1);
        cfg.train.schedule.step_every =
            static_cast<int>(toml.get_int("train", "lr_step_every", 20));
        if (cfg.train.schedule.step_every < 1)
            throw ConfigError("train.lr_step_every: must be >= 1");
        cfg.train.validate();

        // augmentation; defaults are the frozen standard policy
        AugmentationPolicy std_policy = AugmentationPolicy::standard();
        cfg.augment.horizontal_flip_prob =
            toml.get_number("augment", "flip_prob", std_policy.horizontal_flip_prob);
        cfg.augment.rotation_degrees_max =
            toml.get_number("augment", "rotation_degrees", std_policy.rotation_degrees_max);
        if (toml.has("augment", "crop_scale")) {
            auto cs = toml.get_number_array("augment", "crop_scale");
            if (cs.size() != 2) throw ConfigError("augment.crop_scale: expected [lo, hi]");
            cfg.augment.crop_scale_lo = cs[0];
            cfg.augment.crop_scale_hi = cs[1];
        } else {
            cfg.augment.crop_scale_lo = std_policy.crop_scale_lo;
            cfg.augment.crop_scale_hi = std_policy.crop_scale_hi;
        }
        cfg.augment.color_jitter_strength =
            toml.get_number("augment", "color_jitter", std_policy.color_jitter_strength);
        cfg.augment.validate();

        cfg.output_dir = toml.get_string("output", "dir", "out");
        return cfg;
    }

    static ExperimentConfig load(const std::string& path,
                                 std::optional<std::uint64_t> seed_override = {},
                                 std::optional<std::string> out_override = {}) {
        return from_toml(Toml::parse_file(path), seed_override, out_override);
    }

private:
    static AlexNetConfig parse_alexnet(const Toml& toml) {
        AlexNetConfig c;
        c.num_classes = static_cast<std::size_t>(toml.get_int("model.alexnet", "num_classes", 0));
        c.dropout_rate = toml.get_number("model.alexnet", "dropout_rate", 0.5);
        c.width_scale = toml.get_number("model.alexnet", "width_scale", 1.0);
        return c;
    }

    static ViTConfig parse_vit(const Toml& toml) {
        std::string preset = toml.get_string("model.vit", "preset", "b16");
        ViTConfig c;
        std::size_t k = static_cast<std::size_t>(toml.get_int("model.vit", "num_classes", 0));
        if (preset == "b16") c = ViTConfig::b16(k);
        else if (preset == "tiny") c = ViTConfig::tiny(k);
        else throw ConfigError("model.vit.preset: must be \"b16\" or \"tiny\"");
        if (toml.has("model.vit", "image_size")) {
            auto sz = static_cast<std::size_t>(toml.get_int("model.vit", "image_size"));
            c.image_h = c.image_w = sz;
        }
        c.patch_size = static_cast<std::size_t>(
            toml.get_int("model.vit", "patch_size", static_cast<std::int64_t>(c.patch_size)));
        c.embed_dim = static_cast<std::size_t>(
            toml.get_int("model.vit", "embed_dim", static_cast<std::int64_t>(c.embed_dim)));
        c.depth = static_cast<std::size_t>(
            toml.get_int("model.vit", "depth", static_cast<std::int64_t>(c.depth)));
        c.num_heads = static_cast<std::size_t>(
            toml.get_int("model.vit", "num_heads", static_cast<std::int64_t>(c.num_heads)));
        c.mlp_hidden = static_cast<std::size_t>(
            toml.get_int("model.vit", "mlp_hidden", static_cast<std::int64_t>(c.mlp_hidden)));
        c.dropout_rate = toml.get_number("model.vit", "dropout_rate", 0.1);
        c.final_layernorm = toml.get_bool("model.vit", "final_layernorm", true);
        return c;
    }
};

}  // namespace lusc
