#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "didipose/codec.hpp"
#include "didipose/denoiser.hpp"
#include "didipose/observation.hpp"
#include "didipose/schedule.hpp"

namespace didipose {

// Single versioned JSON config; unknown keys are rejected so typos surface as
// config errors instead of silently falling back to defaults.
struct RunConfig {
    int version = 1;
    std::uint64_t seed = 1;

    std::string skeleton_variant = "h36m17";
    double angle_range_scale = 1.0;

    int train_count = 512;
    int val_count = 64;
    int test_count = 64;
    OccluderSpec occluder{200.0, 500.0, 100.0};

    CodecConfig codec;
    CodecTrainConfig codec_train;

    int diffusion_steps = 100;
    double alpha_bar_end = 0.0;
    double gamma_bar_end = 0.9;
    std::string matrix = "both";  // occlude | replace | both
    DenoiserConfig denoiser;
    DiffusionTrainConfig diffusion_train;

    int infer_steps_used = 100;
    std::string infer_init_mode = "all-occ";

    std::vector<std::uint64_t> ablate_seeds = {1, 2, 3};
    std::vector<std::string> ablate_variants = {"occlude", "replace", "both"};

    SkeletonDef skeleton() const {
        if (skeleton_variant != "h36m17")
            throw ConfigError("config: unknown skeleton.variant '" + skeleton_variant + "'");
        return SkeletonDef::default_h36m17(angle_range_scale);
    }

    // Schedule endpoints for a matrix variant: "replace" never occludes,
    // "occlude" keeps the replace mass at exactly zero.
    std::pair<double, double> schedule_endpoints() const {
        if (matrix == "both") return {alpha_bar_end, gamma_bar_end};
        if (matrix == "replace") return {alpha_bar_end, 0.0};
        if (matrix == "occlude") return {1.0 - gamma_bar_end, gamma_bar_end};
        throw ConfigError("config: diffusion.matrix must be occlude|replace|both, got '" + matrix + "'");
    }

    TransitionParams transition() const {
        const auto [a_end, g_end] = schedule_endpoints();
        return TransitionParams{Schedule::linear(diffusion_steps, a_end, g_end, codec.fsq().codebook_size())};
    }

    void validate() const {
        if (version != 1) throw ConfigError("config: unsupported version " + std::to_string(version));
        if (train_count < 0 || val_count < 0 || test_count < 0)
            throw ConfigError("config: data counts must be nonnegative");
        if (!(angle_range_scale >= 0)) throw ConfigError("config: angle_range_scale must be >= 0");
        occluder.validate();
        codec.validate();
        denoiser.validate();
        if (denoiser.tokens != codec.tokens)
            throw ConfigError("config: denoiser.tokens must equal codec.tokens");
        if (denoiser.classes != codec.fsq().codebook_size())
            throw ConfigError("config: denoiser class count must equal the FSQ codebook size");
        if (denoiser.steps != diffusion_steps)
            throw ConfigError("config: denoiser step embedding must match diffusion.steps");
        if (infer_steps_used < 1 || infer_steps_used > diffusion_steps)
            throw ConfigError("config: infer.steps_used must lie in [1, diffusion.steps]");
        parse_init_mode(infer_init_mode);
        (void)skeleton();
        (void)transition();  // validates endpoints and per-step recovery
        if (ablate_seeds.empty()) throw ConfigError("config: ablate.seeds must be nonempty");
        for (const auto& v : ablate_variants)
            if (v != "occlude" && v != "replace" && v != "both")
                throw ConfigError("config: ablate.variants entry '" + v + "' is not occlude|replace|both");
    }
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& obj, const std::set<std::string>& allowed,
                                const std::string& path) {
    for (auto it = obj.begin(); it != obj.end(); ++it)
        if (!allowed.count(it.key()))
            throw ConfigError("config: unknown key '" + (path.empty() ? it.key() : path + "." + it.key()) + "'");
}

template <typename T>
void maybe(const nlohmann::json& obj, const char* key, T& out) {
    if (obj.contains(key)) out = obj.at(key).get<T>();
}

}  // namespace detail

inline RunConfig parse_config(const nlohmann::json& j) {
    RunConfig cfg;
    // reconcile defaults: denoiser mirrors codec tokens/classes unless overridden
    try {
        detail::reject_unknown_keys(
            j, {"version", "seed", "skeleton", "data", "codec", "diffusion", "infer", "ablate"}, "");
        detail::maybe(j, "version", cfg.version);
        detail::maybe(j, "seed", cfg.seed);
        if (j.contains("skeleton")) {
            const auto& s = j.at("skeleton");
            detail::reject_unknown_keys(s, {"variant", "angle_range_scale"}, "skeleton");
            detail::maybe(s, "variant", cfg.skeleton_variant);
            detail::maybe(s, "angle_range_scale", cfg.angle_range_scale);
        }
        if (j.contains("data")) {
            const auto& d = j.at("data");
            detail::reject_unknown_keys(d, {"train_count", "val_count", "test_count", "occluder"}, "data");
            detail::maybe(d, "train_count", cfg.train_count);
            detail::maybe(d, "val_count", cfg.val_count);
            detail::maybe(d, "test_count", cfg.test_count);
            if (d.contains("occluder")) {
                const auto& o = d.at("occluder");
                detail::reject_unknown_keys(o, {"min_size", "max_size", "margin"}, "data.occluder");
                detail::maybe(o, "min_size", cfg.occluder.min_size);
                detail::maybe(o, "max_size", cfg.occluder.max_size);
                detail::maybe(o, "margin", cfg.occluder.margin);
            }
        }
        if (j.contains("codec")) {
            const auto& c = j.at("codec");
            detail::reject_unknown_keys(c,
                                        {"joints", "tokens", "levels", "local_joints", "enc_width", "enc_blocks",
                                         "dec_width", "dec_blocks", "mlp_ratio", "input_scale", "train"},
                                        "codec");
            detail::maybe(c, "joints", cfg.codec.joints);
            detail::maybe(c, "tokens", cfg.codec.tokens);
            detail::maybe(c, "levels", cfg.codec.levels);
            detail::maybe(c, "local_joints", cfg.codec.local_joints);
            detail::maybe(c, "enc_width", cfg.codec.enc_width);
            detail::maybe(c, "enc_blocks", cfg.codec.enc_blocks);
            detail::maybe(c, "dec_width", cfg.codec.dec_width);
            detail::maybe(c, "dec_blocks", cfg.codec.dec_blocks);
            detail::maybe(c, "mlp_ratio", cfg.codec.mlp_ratio);
            detail::maybe(c, "input_scale", cfg.codec.input_scale);
            if (c.contains("train")) {
                const auto& t = c.at("train");
                detail::reject_unknown_keys(
                    t, {"epochs", "batch", "lr", "beta1", "beta2", "weight_decay"}, "codec.train");
                detail::maybe(t, "epochs", cfg.codec_train.epochs);
                detail::maybe(t, "batch", cfg.codec_train.batch);
                detail::maybe(t, "lr", cfg.codec_train.adamw.lr);
                detail::maybe(t, "beta1", cfg.codec_train.adamw.beta1);
                detail::maybe(t, "beta2", cfg.codec_train.adamw.beta2);
                detail::maybe(t, "weight_decay", cfg.codec_train.adamw.weight_decay);
            }
        }
        if (j.contains("diffusion")) {
            const auto& d = j.at("diffusion");
            detail::reject_unknown_keys(
                d, {"steps", "alpha_bar_end", "gamma_bar_end", "matrix", "denoiser", "train"}, "diffusion");
            detail::maybe(d, "steps", cfg.diffusion_steps);
            detail::maybe(d, "alpha_bar_end", cfg.alpha_bar_end);
            detail::maybe(d, "gamma_bar_end", cfg.gamma_bar_end);
            detail::maybe(d, "matrix", cfg.matrix);
            if (d.contains("denoiser")) {
                const auto& n = d.at("denoiser");
                detail::reject_unknown_keys(
                    n, {"width", "blocks", "heads", "ffn_hidden", "cond_tokens", "obs_hidden", "obs_scale"},
                    "diffusion.denoiser");
                detail::maybe(n, "width", cfg.denoiser.width);
                detail::maybe(n, "blocks", cfg.denoiser.blocks);
                detail::maybe(n, "heads", cfg.denoiser.heads);
                detail::maybe(n, "ffn_hidden", cfg.denoiser.ffn_hidden);
                detail::maybe(n, "cond_tokens", cfg.denoiser.cond_tokens);
                detail::maybe(n, "obs_hidden", cfg.denoiser.obs_hidden);
                detail::maybe(n, "obs_scale", cfg.denoiser.obs_scale);
            }
            if (d.contains("train")) {
                const auto& t = d.at("train");
                detail::reject_unknown_keys(
                    t, {"steps", "batch", "lr", "beta1", "beta2", "weight_decay", "aux_weight"},
                    "diffusion.train");
                detail::maybe(t, "steps", cfg.diffusion_train.steps);
                detail::maybe(t, "batch", cfg.diffusion_train.batch);
                detail::maybe(t, "lr", cfg.diffusion_train.adamw.lr);
                detail::maybe(t, "beta1", cfg.diffusion_train.adamw.beta1);
                detail::maybe(t, "beta2", cfg.diffusion_train.adamw.beta2);
                detail::maybe(t, "weight_decay", cfg.diffusion_train.adamw.weight_decay);
                detail::maybe(t, "aux_weight", cfg.diffusion_train.aux_weight);
            }
        }
        if (j.contains("infer")) {
            const auto& i = j.at("infer");
            detail::reject_unknown_keys(i, {"steps_used", "init_mode"}, "infer");
            detail::maybe(i, "steps_used", cfg.infer_steps_used);
            detail::maybe(i, "init_mode", cfg.infer_init_mode);
        }
        if (j.contains("ablate")) {
            const auto& a = j.at("ablate");
            detail::reject_unknown_keys(a, {"seeds", "variants"}, "ablate");
            detail::maybe(a, "seeds", cfg.ablate_seeds);
            detail::maybe(a, "variants", cfg.ablate_variants);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    // keep dependent dims in sync with the codec section
    cfg.denoiser.tokens = cfg.codec.tokens;
    cfg.denoiser.classes = cfg.codec.fsq().codebook_size();
    cfg.denoiser.steps = cfg.diffusion_steps;
    cfg.denoiser.joints = cfg.codec.joints;
    cfg.validate();
    return cfg;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config: parse error in '" + path + "': " + e.what());
    }
    return parse_config(j);
}

// Canonical JSON used for provenance hashes.
namespace detail {

inline nlohmann::json data_sections(const RunConfig& c) {
    nlohmann::json j;
    j["version"] = c.version;
    j["seed"] = c.seed;
    j["skeleton"] = {{"variant", c.skeleton_variant}, {"angle_range_scale", c.angle_range_scale}};
    j["data"] = {{"train_count", c.train_count},
                 {"val_count", c.val_count},
                 {"test_count", c.test_count},
                 {"occluder", {{"min_size", c.occluder.min_size},
                               {"max_size", c.occluder.max_size},
                               {"margin", c.occluder.margin}}}};
    return j;
}

inline nlohmann::json codec_sections(const RunConfig& c) {
    nlohmann::json j;
    j["version"] = c.version;
    j["skeleton"] = {{"variant", c.skeleton_variant}, {"angle_range_scale", c.angle_range_scale}};
    j["codec"] = {{"joints", c.codec.joints},         {"tokens", c.codec.tokens},
                  {"levels", c.codec.levels},         {"local_joints", c.codec.local_joints},
                  {"enc_width", c.codec.enc_width},   {"enc_blocks", c.codec.enc_blocks},
                  {"dec_width", c.codec.dec_width},   {"dec_blocks", c.codec.dec_blocks},
                  {"mlp_ratio", c.codec.mlp_ratio},   {"input_scale", c.codec.input_scale}};
    return j;
}

inline nlohmann::json diffusion_sections(const RunConfig& c) {
    nlohmann::json j = codec_sections(c);
    const auto [a_end, g_end] = c.schedule_endpoints();
    j["diffusion"] = {{"steps", c.diffusion_steps},
                      {"alpha_bar_end", a_end},
                      {"gamma_bar_end", g_end},
                      {"matrix", c.matrix},
                      {"denoiser", {{"width", c.denoiser.width},
                                    {"blocks", c.denoiser.blocks},
                                    {"heads", c.denoiser.heads},
                                    {"ffn_hidden", c.denoiser.ffn_hidden},
                                    {"cond_tokens", c.denoiser.cond_tokens},
                                    {"obs_hidden", c.denoiser.obs_hidden},
                                    {"obs_scale", c.denoiser.obs_scale}}}};
    return j;
}

}  // namespace detail

// Provenance hashes. data_hash identifies the generated corpus; eval compares
// it between prediction and ground-truth files. The model hashes identify the
// architecture a checkpoint was trained for.
inline std::string data_hash(const RunConfig& c) { return hex64(fnv1a64(detail::data_sections(c).dump())); }
inline std::string codec_hash(const RunConfig& c) { return hex64(fnv1a64(detail::codec_sections(c).dump())); }
inline std::string diffusion_hash(const RunConfig& c) {
    return hex64(fnv1a64(detail::diffusion_sections(c).dump()));
}

}  // namespace didipose
