#pragma once

#include <algorithm>
#include <cstdint>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "didipose/autodiff.hpp"
#include "didipose/fsq.hpp"
#include "didipose/optim.hpp"
#include "didipose/dataset.hpp"
#include "didipose/metrics.hpp"

namespace didipose {

// N discrete codebook indices in 1..|C|; during diffusion the extra symbol
// |C|+1 (Occ) may appear.
struct TokenSequence {
    std::vector<std::int64_t> indices;

    bool clean(std::int64_t codebook_size) const {
        for (auto k : indices)
            if (k < 1 || k > codebook_size) return false;
        return true;
    }
};

struct CodecConfig {
    int joints = 17;
    int tokens = 16;  // N
    std::vector<int> levels = {7, 5, 5, 5, 5};
    int local_joints = 3;  // X
    int enc_width = 128;
    int enc_blocks = 4;
    int dec_width = 64;
    int dec_blocks = 1;
    int mlp_ratio = 2;
    double input_scale = 1e-3;  // mm -> internal units

    FSQConfig fsq() const { return FSQConfig(levels); }

    // The JS-Block projects to the widest multiple of X that fits the block
    // width, so the shifted operand always satisfies the divisibility
    // precondition of joint_shift.
    int enc_shift_width() const { return enc_width - enc_width % local_joints; }
    int dec_shift_width() const { return dec_width - dec_width % local_joints; }

    void validate() const {
        if (joints < 1) throw ConfigError("codec: joints must be positive");
        if (tokens < 1) throw ConfigError("codec: tokens must be positive");
        if (local_joints < 1 || local_joints % 2 == 0)
            throw ConfigError("codec: local_joints must be odd and >= 1, got " + std::to_string(local_joints));
        if (local_joints > joints)
            throw ConfigError("codec: local_joints " + std::to_string(local_joints) + " exceeds joint count " +
                              std::to_string(joints));
        if (enc_width < 1 || dec_width < 1 || enc_blocks < 0 || dec_blocks < 0 || mlp_ratio < 1)
            throw ConfigError("codec: invalid width/block configuration");
        if (enc_shift_width() < 1 || dec_shift_width() < 1)
            throw ConfigError("codec: block width smaller than local_joints");
        if (!(input_scale > 0)) throw ConfigError("codec: input_scale must be positive");
        FSQConfig(levels);  // validates levels
    }
};

struct LocalMlpParams {
    Tensor ln_g, ln_b;
    Tensor js_w1, js_b1, js_w2, js_b2;
    Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

struct CodecParams {
    Tensor embed_w, embed_b;
    std::vector<LocalMlpParams> enc;
    Tensor mix_w, mix_b;  // [J x N], [N]
    Tensor proj_w, proj_b;
    Tensor unproj_w, unproj_b;
    std::vector<LocalMlpParams> dec;
    Tensor readout_w, readout_b;

    template <typename Fn>
    void visit(Fn&& fn) {
        fn("embed_w", embed_w);
        fn("embed_b", embed_b);
        for (std::size_t i = 0; i < enc.size(); ++i) visit_block("enc" + std::to_string(i), enc[i], fn);
        fn("mix_w", mix_w);
        fn("mix_b", mix_b);
        fn("proj_w", proj_w);
        fn("proj_b", proj_b);
        fn("unproj_w", unproj_w);
        fn("unproj_b", unproj_b);
        for (std::size_t i = 0; i < dec.size(); ++i) visit_block("dec" + std::to_string(i), dec[i], fn);
        fn("readout_w", readout_w);
        fn("readout_b", readout_b);
    }

    std::vector<Tensor*> tensors() {
        std::vector<Tensor*> out;
        visit([&](const std::string&, Tensor& t) { out.push_back(&t); });
        return out;
    }

    std::vector<std::pair<std::string, const Tensor*>> named_tensors() {
        std::vector<std::pair<std::string, const Tensor*>> out;
        visit([&](const std::string& n, Tensor& t) { out.emplace_back(n, &t); });
        return out;
    }

private:
    template <typename Fn>
    static void visit_block(const std::string& prefix, LocalMlpParams& b, Fn& fn) {
        fn(prefix + ".ln_g", b.ln_g);
        fn(prefix + ".ln_b", b.ln_b);
        fn(prefix + ".js_w1", b.js_w1);
        fn(prefix + ".js_b1", b.js_b1);
        fn(prefix + ".js_w2", b.js_w2);
        fn(prefix + ".js_b2", b.js_b2);
        fn(prefix + ".mlp_w1", b.mlp_w1);
        fn(prefix + ".mlp_b1", b.mlp_b1);
        fn(prefix + ".mlp_w2", b.mlp_w2);
        fn(prefix + ".mlp_b2", b.mlp_b2);
    }
};

namespace detail {

inline Tensor init_linear(std::int64_t rows, std::int64_t cols, Rng& rng) {
    return Tensor::randn({rows, cols}, rng, 1.0 / std::sqrt(static_cast<double>(rows)));
}

inline LocalMlpParams init_block(int width, int shift_width, int mlp_ratio, Rng& rng) {
    LocalMlpParams b;
    b.ln_g = Tensor::full({width}, 1.0);
    b.ln_b = Tensor({width});
    b.js_w1 = init_linear(width, shift_width, rng);
    b.js_b1 = Tensor({shift_width});
    b.js_w2 = init_linear(shift_width, width, rng);
    b.js_b2 = Tensor({width});
    b.mlp_w1 = init_linear(width, width * mlp_ratio, rng);
    b.mlp_b1 = Tensor({static_cast<std::int64_t>(width) * mlp_ratio});
    b.mlp_w2 = init_linear(width * mlp_ratio, width, rng);
    b.mlp_b2 = Tensor({width});
    return b;
}

}  // namespace detail

inline CodecParams init_codec(const CodecConfig& cfg, Rng rng) {
    cfg.validate();
    const int d = cfg.fsq().dims();
    CodecParams p;
    p.embed_w = detail::init_linear(3, cfg.enc_width, rng);
    p.embed_b = Tensor({cfg.enc_width});
    for (int i = 0; i < cfg.enc_blocks; ++i)
        p.enc.push_back(detail::init_block(cfg.enc_width, cfg.enc_shift_width(), cfg.mlp_ratio, rng));
    p.mix_w = detail::init_linear(cfg.joints, cfg.tokens, rng);
    p.mix_b = Tensor({cfg.tokens});
    // small projection keeps the tanh bound in its linear region at init, so
    // straight-through gradients are not squashed from the start
    p.proj_w = Tensor::randn({cfg.enc_width, d}, rng, 0.2 / std::sqrt(static_cast<double>(cfg.enc_width)));
    p.proj_b = Tensor({d});
    p.unproj_w = detail::init_linear(d, cfg.dec_width, rng);
    p.unproj_b = Tensor({cfg.dec_width});
    for (int i = 0; i < cfg.dec_blocks; ++i)
        p.dec.push_back(detail::init_block(cfg.dec_width, cfg.dec_shift_width(), cfg.mlp_ratio, rng));
    p.readout_w = Tensor::randn({static_cast<std::int64_t>(cfg.tokens) * cfg.dec_width,
                                 static_cast<std::int64_t>(cfg.joints) * 3},
                                rng, 0.1 / std::sqrt(static_cast<double>(cfg.tokens * cfg.dec_width)));
    p.readout_b = Tensor({static_cast<std::int64_t>(cfg.joints) * 3});
    return p;
}

// Tape-lifted view of CodecParams; trainable=false lifts constants so the same
// graph code serves pure inference.
struct CodecVars {
    Var embed_w, embed_b;
    struct Block {
        Var ln_g, ln_b, js_w1, js_b1, js_w2, js_b2, mlp_w1, mlp_b1, mlp_w2, mlp_b2;
    };
    std::vector<Block> enc, dec;
    Var mix_w, mix_b, proj_w, proj_b, unproj_w, unproj_b, readout_w, readout_b;
};

inline CodecVars lift_codec(Tape& tape, CodecParams& p, bool trainable) {
    auto lift = [&](Tensor& t) { return trainable ? tape.leaf(t) : tape.constant(t); };
    CodecVars v;
    v.embed_w = lift(p.embed_w);
    v.embed_b = lift(p.embed_b);
    auto lift_block = [&](LocalMlpParams& b) {
        return CodecVars::Block{lift(b.ln_g),   lift(b.ln_b),   lift(b.js_w1),  lift(b.js_b1),
                                lift(b.js_w2),  lift(b.js_b2),  lift(b.mlp_w1), lift(b.mlp_b1),
                                lift(b.mlp_w2), lift(b.mlp_b2)};
    };
    for (auto& b : p.enc) v.enc.push_back(lift_block(b));
    v.mix_w = lift(p.mix_w);
    v.mix_b = lift(p.mix_b);
    v.proj_w = lift(p.proj_w);
    v.proj_b = lift(p.proj_b);
    v.unproj_w = lift(p.unproj_w);
    v.unproj_b = lift(p.unproj_b);
    for (auto& b : p.dec) v.dec.push_back(lift_block(b));
    v.readout_w = lift(p.readout_w);
    v.readout_b = lift(p.readout_b);
    return v;
}

// out = in + ChannelMLP(JSBlock(LayerNorm(in))); JSBlock = linear projection,
// Joint Shift along the position axis, linear projection back.
inline Var local_mlp_block(Tape& tape, const Var& x, const CodecVars::Block& b, int local_joints) {
    auto h = tape.layer_norm(x, b.ln_g, b.ln_b);
    auto a = tape.linear(h, b.js_w1, b.js_b1);
    a = tape.joint_shift(a, local_joints);
    a = tape.linear(a, b.js_w2, b.js_b2);
    auto m = tape.linear(a, b.mlp_w1, b.mlp_b1);
    m = tape.tanh_op(m);
    m = tape.linear(m, b.mlp_w2, b.mlp_b2);
    return tape.add(x, m);
}

namespace detail {

inline Tensor pose_scaled(const Pose& pose, double scale) {
    Tensor t({pose.joints, 3});
    for (std::int64_t i = 0; i < t.size(); ++i) t.mut()[i] = pose.coords_mm[static_cast<std::size_t>(i)] * scale;
    return t;
}

inline Tensor half_level_tile(const CodecConfig& cfg) {
    const auto fsq = cfg.fsq();
    Tensor t({cfg.tokens, fsq.dims()});
    for (int n = 0; n < cfg.tokens; ++n)
        for (int i = 0; i < fsq.dims(); ++i) t.at(n, i) = static_cast<double>(fsq.half_level(i));
    return t;
}

}  // namespace detail

// Pose -> token features F [N x D_enc] and pre-quantization vectors Q [N x d].
inline std::pair<Var, Var> encode_graph(Tape& tape, const CodecVars& v, const CodecConfig& cfg,
                                        const Pose& pose) {
    if (pose.joints != cfg.joints)
        throw DimensionError("encode: pose has " + std::to_string(pose.joints) + " joints, config expects " +
                             std::to_string(cfg.joints));
    auto x = tape.constant(detail::pose_scaled(pose, cfg.input_scale));
    auto e = tape.linear(x, v.embed_w, v.embed_b);
    for (const auto& b : v.enc) e = local_mlp_block(tape, e, b, cfg.local_joints);
    // learned mixing of J joint features into N token features
    auto f = tape.transpose(tape.linear(tape.transpose(e), v.mix_w, v.mix_b));
    auto q = tape.linear(f, v.proj_w, v.proj_b);
    return {f, q};
}

// Bounded quantization with straight-through rounding: forward uses
// round(halfL*tanh(q)), backward sees only the halfL*tanh(q) path.
inline Var quantize_graph(Tape& tape, const Var& q, const CodecConfig& cfg) {
    auto half = tape.constant(detail::half_level_tile(cfg));
    auto bounded = tape.mul(tape.tanh_op(q), half);
    return tape.ste_round(bounded);
}

// Codes [N x d] -> root-relative pose coordinates [J x 3] in internal units.
inline Var decode_graph(Tape& tape, const CodecVars& v, const CodecConfig& cfg, const Var& codes) {
    auto u = tape.linear(codes, v.unproj_w, v.unproj_b);
    for (const auto& b : v.dec) u = local_mlp_block(tape, u, b, cfg.local_joints);
    auto flat = tape.reshape(u, {1, static_cast<std::int64_t>(cfg.tokens) * cfg.dec_width});
    auto out = tape.linear(flat, v.readout_w, v.readout_b);
    out = tape.reshape(out, {cfg.joints, 3});
    return tape.center_rows(out, 0);
}

struct EncodeResult {
    TokenSequence tokens;
    Tensor features;  // F, [N x D_enc]
    Tensor prequant;  // Q, [N x d]
};

inline EncodeResult encode_tokens(const Pose& pose, CodecParams& params, const CodecConfig& cfg) {
    Tape tape;
    auto v = lift_codec(tape, params, /*trainable=*/false);
    auto [f, q] = encode_graph(tape, v, cfg, pose);
    const auto fsq = cfg.fsq();
    EncodeResult r;
    r.features = f.v;
    r.prequant = q.v;
    r.tokens.indices.resize(static_cast<std::size_t>(cfg.tokens));
    std::vector<double> qrow(static_cast<std::size_t>(fsq.dims()));
    for (int n = 0; n < cfg.tokens; ++n) {
        for (int i = 0; i < fsq.dims(); ++i) qrow[static_cast<std::size_t>(i)] = q.v.at(n, i);
        r.tokens.indices[static_cast<std::size_t>(n)] = fsq_quantize(qrow, fsq).index;
    }
    return r;
}

inline Tensor codes_tensor(const TokenSequence& tokens, const CodecConfig& cfg) {
    const auto fsq = cfg.fsq();
    if (static_cast<int>(tokens.indices.size()) != cfg.tokens)
        throw DimensionError("decode: expected " + std::to_string(cfg.tokens) + " tokens, got " +
                             std::to_string(tokens.indices.size()));
    Tensor codes({cfg.tokens, fsq.dims()});
    for (int n = 0; n < cfg.tokens; ++n) {
        const auto k = tokens.indices[static_cast<std::size_t>(n)];
        if (k == fsq.codebook_size() + 1)
            throw DataError("decode: Occ token at position " + std::to_string(n) +
                            "; the decoder accepts clean tokens only");
        const auto code = fsq_index_to_code(k, fsq);
        for (int i = 0; i < fsq.dims(); ++i) codes.at(n, i) = static_cast<double>(code[static_cast<std::size_t>(i)]);
    }
    return codes;
}

// Codeword of a token: unproj(code), the D-dimensional quantized feature.
inline Tensor code_to_token_feature(std::int64_t index, CodecParams& params, const CodecConfig& cfg) {
    const auto fsq = cfg.fsq();
    const auto code = fsq_index_to_code(index, fsq);
    Tensor c({1, fsq.dims()});
    for (int i = 0; i < fsq.dims(); ++i) c.at(0, i) = static_cast<double>(code[static_cast<std::size_t>(i)]);
    Tape tape;
    auto w = tape.constant(params.unproj_w);
    auto b = tape.constant(params.unproj_b);
    return tape.linear(tape.constant(c), w, b).v.reshaped({cfg.dec_width});
}

inline Pose decode_pose(const TokenSequence& tokens, CodecParams& params, const CodecConfig& cfg) {
    Tape tape;
    auto v = lift_codec(tape, params, /*trainable=*/false);
    auto out = decode_graph(tape, v, cfg, tape.constant(codes_tensor(tokens, cfg)));
    Pose pose(cfg.joints);
    for (std::size_t i = 0; i < pose.coords_mm.size(); ++i)
        pose.coords_mm[i] = out.v[static_cast<std::int64_t>(i)] / cfg.input_scale;
    return pose;
}

// Full reconstruction loss graph for one pose (MSE on scaled root-relative
// coordinates, straight-through through the quantizer).
inline Var codec_loss_graph(Tape& tape, const CodecVars& v, const CodecConfig& cfg, const Pose& pose) {
    auto [f, q] = encode_graph(tape, v, cfg, pose);
    (void)f;
    auto codes = quantize_graph(tape, q, cfg);
    auto recon = decode_graph(tape, v, cfg, codes);
    auto target = tape.constant(detail::pose_scaled(pose, cfg.input_scale));
    auto diff = tape.sub(recon, target);
    return tape.mean_all(tape.mul(diff, diff));
}

struct CodecTrainConfig {
    int epochs = 20;
    int batch = 256;
    AdamWConfig adamw{1e-3, 0.9, 0.999, 1e-8, 0.15};
    std::uint64_t seed = 0;
};

struct CodecTrainLog {
    struct Epoch {
        int epoch;
        double loss;       // mean MSE in internal units
        double usage;      // distinct codebook indices emitted / |C|
    };
    std::vector<Epoch> epochs;
};

// Ordered gradient extraction matching CodecParams::visit.
inline std::vector<const Var*> codec_ordered_vars(const CodecVars& v) {
    std::vector<const Var*> vars;
    vars.push_back(&v.embed_w);
    vars.push_back(&v.embed_b);
    auto push_block = [&](const CodecVars::Block& blk) {
        for (const Var* pv : {&blk.ln_g, &blk.ln_b, &blk.js_w1, &blk.js_b1, &blk.js_w2, &blk.js_b2,
                              &blk.mlp_w1, &blk.mlp_b1, &blk.mlp_w2, &blk.mlp_b2})
            vars.push_back(pv);
    };
    for (const auto& blk : v.enc) push_block(blk);
    vars.push_back(&v.mix_w);
    vars.push_back(&v.mix_b);
    vars.push_back(&v.proj_w);
    vars.push_back(&v.proj_b);
    vars.push_back(&v.unproj_w);
    vars.push_back(&v.unproj_b);
    for (const auto& blk : v.dec) push_block(blk);
    vars.push_back(&v.readout_w);
    vars.push_back(&v.readout_b);
    return vars;
}

// Per-sample gradients are accumulated chunk-by-chunk in a fixed order, so a
// given thread count always reproduces the same bytes. The optimizer is
// external so training can resume from checkpointed state.
inline CodecTrainLog train_codec_with(const PoseDataset& ds, CodecParams& params, const CodecConfig& cfg,
                                      const CodecTrainConfig& tcfg, AdamW& opt) {
    cfg.validate();
    if (ds.samples.empty()) throw DataError("train_codec: dataset is empty");
    if (tcfg.epochs < 1 || tcfg.batch < 1) throw ConfigError("train_codec: epochs and batch must be positive");

    auto tensors = params.tensors();
    Rng shuffle_rng = Rng(tcfg.seed).fork(0xC0DEC);
    const std::int64_t n = static_cast<std::int64_t>(ds.samples.size());
    const std::int64_t codebook = cfg.fsq().codebook_size();

    CodecTrainLog log;
    for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
        std::vector<std::int64_t> order(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
        for (std::int64_t i = n - 1; i > 0; --i)
            std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(shuffle_rng.uniform_int(i + 1))]);

        double epoch_loss = 0.0;
        std::int64_t seen = 0;
        std::set<std::int64_t> used;

        for (std::int64_t start = 0; start < n; start += tcfg.batch) {
            const std::int64_t bsz = std::min<std::int64_t>(tcfg.batch, n - start);
            std::vector<Tensor> total(tensors.size());
            for (std::size_t k = 0; k < tensors.size(); ++k) total[k] = Tensor(tensors[k]->shape());
            double batch_loss = 0.0;

            const int threads = std::min<int>(thread_count(), static_cast<int>(bsz));
            std::vector<std::vector<Tensor>> partial(static_cast<std::size_t>(threads));
            std::vector<double> partial_loss(static_cast<std::size_t>(threads), 0.0);
            std::vector<std::vector<std::int64_t>> partial_used(static_cast<std::size_t>(threads));

            auto work = [&](int tid, std::int64_t lo, std::int64_t hi) {
                auto& acc = partial[static_cast<std::size_t>(tid)];
                acc.resize(tensors.size());
                for (std::size_t k = 0; k < tensors.size(); ++k) acc[k] = Tensor(tensors[k]->shape());
                for (std::int64_t b = lo; b < hi; ++b) {
                    const auto& pose = ds.samples[static_cast<std::size_t>(order[static_cast<std::size_t>(start + b)])].pose;
                    Tape tape;
                    auto v = lift_codec(tape, params, /*trainable=*/true);
                    auto [f, q] = encode_graph(tape, v, cfg, pose);
                    (void)f;
                    auto codes = quantize_graph(tape, q, cfg);
                    const auto fsq = cfg.fsq();
                    for (int t = 0; t < cfg.tokens; ++t) {
                        std::vector<int> code(static_cast<std::size_t>(fsq.dims()));
                        for (int i = 0; i < fsq.dims(); ++i)
                            code[static_cast<std::size_t>(i)] = static_cast<int>(codes.v.at(t, i));
                        partial_used[static_cast<std::size_t>(tid)].push_back(fsq_code_to_index(code, fsq));
                    }
                    auto recon = decode_graph(tape, v, cfg, codes);
                    auto target = tape.constant(detail::pose_scaled(pose, cfg.input_scale));
                    auto diff = tape.sub(recon, target);
                    auto loss = tape.mean_all(tape.mul(diff, diff));
                    partial_loss[static_cast<std::size_t>(tid)] += loss.v[0];
                    tape.backward(loss);
                    const auto vars = codec_ordered_vars(v);
                    for (std::size_t k = 0; k < vars.size(); ++k) {
                        const Tensor g = tape.grad(*vars[k]);
                        for (std::int64_t i = 0; i < g.size(); ++i) acc[k].mut()[i] += g[i];
                    }
                }
            };

            if (threads <= 1) {
                work(0, 0, bsz);
            } else {
                std::vector<std::thread> pool;
                const std::int64_t chunk = (bsz + threads - 1) / threads;
                for (int t = 0; t < threads; ++t) {
                    const std::int64_t lo = t * chunk;
                    const std::int64_t hi = std::min<std::int64_t>(bsz, lo + chunk);
                    if (lo >= hi) break;
                    pool.emplace_back(work, t, lo, hi);
                }
                for (auto& th : pool) th.join();
            }

            for (int t = 0; t < threads; ++t) {
                batch_loss += partial_loss[static_cast<std::size_t>(t)];
                if (partial[static_cast<std::size_t>(t)].empty()) continue;
                for (std::size_t k = 0; k < tensors.size(); ++k) {
                    const Tensor& src = partial[static_cast<std::size_t>(t)][k];
                    for (std::int64_t i = 0; i < src.size(); ++i) total[k].mut()[i] += src[i];
                }
                for (auto idx : partial_used[static_cast<std::size_t>(t)]) used.insert(idx);
            }

            const double inv = 1.0 / static_cast<double>(bsz);
            for (auto& g : total)
                for (std::int64_t i = 0; i < g.size(); ++i) g.mut()[i] *= inv;

            if (!std::isfinite(batch_loss))
                throw DivergenceError("train_codec: non-finite loss at epoch " + std::to_string(epoch));
            opt.step(tensors, total);
            epoch_loss += batch_loss;
            seen += bsz;
        }

        log.epochs.push_back({epoch, epoch_loss / static_cast<double>(seen),
                              static_cast<double>(used.size()) / static_cast<double>(codebook)});
    }
    return log;
}

inline CodecTrainLog train_codec(const PoseDataset& ds, CodecParams& params, const CodecConfig& cfg,
                                 const CodecTrainConfig& tcfg) {
    AdamW opt(tcfg.adamw);
    return train_codec_with(ds, params, cfg, tcfg, opt);
}

// Reconstruction error of the trained codec on a dataset, in mm.
inline double codec_reconstruction_mpjpe(const PoseDataset& ds, CodecParams& params, const CodecConfig& cfg) {
    if (ds.samples.empty()) throw DataError("codec_reconstruction_mpjpe: empty dataset");
    double acc = 0.0;
    for (const auto& s : ds.samples) {
        const auto enc = encode_tokens(s.pose, params, cfg);
        acc += mpjpe(decode_pose(enc.tokens, params, cfg), s.pose);
    }
    return acc / static_cast<double>(ds.samples.size());
}

}  // namespace didipose
