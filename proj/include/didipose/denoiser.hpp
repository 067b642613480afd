#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <thread>
#include <vector>

#include "didipose/autodiff.hpp"
#include "didipose/codec.hpp"
#include "didipose/observation.hpp"
#include "didipose/optim.hpp"
#include "didipose/schedule.hpp"

namespace didipose {

struct DenoiserConfig {
    int tokens = 16;              // N
    std::int64_t classes = 4375;  // |C|
    int width = 64;
    int blocks = 2;
    int heads = 4;
    int ffn_hidden = 256;
    int cond_tokens = 4;  // M
    int obs_hidden = 128;
    int steps = 100;  // S, sizes the step embedding
    int joints = 17;
    double obs_scale = 1e-3;

    std::int64_t vocab() const { return classes + 1; }  // + Occ

    void validate() const {
        if (tokens < 1 || classes < 2 || width < 1 || blocks < 0 || heads < 1 || ffn_hidden < 1 ||
            cond_tokens < 1 || obs_hidden < 1 || steps < 1 || joints < 1)
            throw ConfigError("denoiser: all dimensions must be positive");
        if (width % heads != 0)
            throw ConfigError("denoiser: width " + std::to_string(width) + " not divisible by " +
                              std::to_string(heads) + " heads");
        if (!(obs_scale > 0)) throw ConfigError("denoiser: obs_scale must be positive");
    }
};

struct AdaLnParams {
    Tensor wg, bg, wb, bb;  // gain/bias affine in the step embedding
};

struct AttnParams {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct DenoiserBlockParams {
    AdaLnParams ln1, ln2, ln3;
    AttnParams self_attn, cross_attn;
    Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

struct DenoiserParams {
    Tensor tok_emb;   // [|C|+1 x D], row |C| is Occ
    Tensor pos_emb;   // [N x D]
    Tensor step_emb;  // [S x D], row s-1
    std::vector<DenoiserBlockParams> blocks;
    Tensor head_ln_g, head_ln_b, head_w, head_b;  // -> [N x |C|]
    Tensor obs_w1, obs_b1, obs_w2, obs_b2;        // observation encoder

    template <typename Fn>
    void visit(Fn&& fn) {
        fn("tok_emb", tok_emb);
        fn("pos_emb", pos_emb);
        fn("step_emb", step_emb);
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const std::string p = "block" + std::to_string(i);
            auto& b = blocks[i];
            visit_adaln(p + ".ln1", b.ln1, fn);
            visit_attn(p + ".self", b.self_attn, fn);
            visit_adaln(p + ".ln2", b.ln2, fn);
            visit_attn(p + ".cross", b.cross_attn, fn);
            visit_adaln(p + ".ln3", b.ln3, fn);
            fn(p + ".ffn_w1", b.ffn_w1);
            fn(p + ".ffn_b1", b.ffn_b1);
            fn(p + ".ffn_w2", b.ffn_w2);
            fn(p + ".ffn_b2", b.ffn_b2);
        }
        fn("head_ln_g", head_ln_g);
        fn("head_ln_b", head_ln_b);
        fn("head_w", head_w);
        fn("head_b", head_b);
        fn("obs_w1", obs_w1);
        fn("obs_b1", obs_b1);
        fn("obs_w2", obs_w2);
        fn("obs_b2", obs_b2);
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
    static void visit_adaln(const std::string& p, AdaLnParams& a, Fn& fn) {
        fn(p + ".wg", a.wg);
        fn(p + ".bg", a.bg);
        fn(p + ".wb", a.wb);
        fn(p + ".bb", a.bb);
    }
    template <typename Fn>
    static void visit_attn(const std::string& p, AttnParams& a, Fn& fn) {
        fn(p + ".wq", a.wq);
        fn(p + ".bq", a.bq);
        fn(p + ".wk", a.wk);
        fn(p + ".bk", a.bk);
        fn(p + ".wv", a.wv);
        fn(p + ".bv", a.bv);
        fn(p + ".wo", a.wo);
        fn(p + ".bo", a.bo);
    }
};

namespace detail {

inline AdaLnParams init_adaln(int width, Rng& rng) {
    AdaLnParams a;
    a.wg = Tensor::randn({width, width}, rng, 1e-3);  // near-identity modulation at init
    a.bg = Tensor::full({width}, 1.0);
    a.wb = Tensor::randn({width, width}, rng, 1e-3);
    a.bb = Tensor({width});
    return a;
}

inline AttnParams init_attn(int width, Rng& rng) {
    AttnParams a;
    a.wq = init_linear(width, width, rng);
    a.bq = Tensor({width});
    a.wk = init_linear(width, width, rng);
    a.bk = Tensor({width});
    a.wv = init_linear(width, width, rng);
    a.bv = Tensor({width});
    a.wo = init_linear(width, width, rng);
    a.bo = Tensor({width});
    return a;
}

}  // namespace detail

inline DenoiserParams init_denoiser(const DenoiserConfig& cfg, Rng rng) {
    cfg.validate();
    DenoiserParams p;
    p.tok_emb = Tensor::randn({cfg.vocab(), cfg.width}, rng, 0.02);
    p.pos_emb = Tensor::randn({cfg.tokens, cfg.width}, rng, 0.02);
    p.step_emb = Tensor::randn({cfg.steps, cfg.width}, rng, 0.02);
    for (int i = 0; i < cfg.blocks; ++i) {
        DenoiserBlockParams b;
        b.ln1 = detail::init_adaln(cfg.width, rng);
        b.self_attn = detail::init_attn(cfg.width, rng);
        b.ln2 = detail::init_adaln(cfg.width, rng);
        b.cross_attn = detail::init_attn(cfg.width, rng);
        b.ln3 = detail::init_adaln(cfg.width, rng);
        b.ffn_w1 = detail::init_linear(cfg.width, cfg.ffn_hidden, rng);
        b.ffn_b1 = Tensor({cfg.ffn_hidden});
        b.ffn_w2 = detail::init_linear(cfg.ffn_hidden, cfg.width, rng);
        b.ffn_b2 = Tensor({cfg.width});
        p.blocks.push_back(std::move(b));
    }
    p.head_ln_g = Tensor::full({cfg.width}, 1.0);
    p.head_ln_b = Tensor({cfg.width});
    p.head_w = detail::init_linear(cfg.width, cfg.classes, rng);
    p.head_b = Tensor({cfg.classes});
    const std::int64_t obs_in = static_cast<std::int64_t>(cfg.joints) * 3;
    p.obs_w1 = detail::init_linear(obs_in, cfg.obs_hidden, rng);
    p.obs_b1 = Tensor({cfg.obs_hidden});
    p.obs_w2 = detail::init_linear(cfg.obs_hidden, static_cast<std::int64_t>(cfg.cond_tokens) * cfg.width, rng);
    p.obs_b2 = Tensor({static_cast<std::int64_t>(cfg.cond_tokens) * cfg.width});
    return p;
}

struct DenoiserVars {
    Var tok_emb, pos_emb, step_emb;
    struct AdaLn {
        Var wg, bg, wb, bb;
    };
    struct Attn {
        Var wq, bq, wk, bk, wv, bv, wo, bo;
    };
    struct Block {
        AdaLn ln1, ln2, ln3;
        Attn self_attn, cross_attn;
        Var ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    };
    std::vector<Block> blocks;
    Var head_ln_g, head_ln_b, head_w, head_b;
    Var obs_w1, obs_b1, obs_w2, obs_b2;

    // Vars in DenoiserParams::visit order, for gradient extraction.
    std::vector<const Var*> ordered() const {
        std::vector<const Var*> out{&tok_emb, &pos_emb, &step_emb};
        for (const auto& b : blocks) {
            for (const Var* v : {&b.ln1.wg, &b.ln1.bg, &b.ln1.wb, &b.ln1.bb}) out.push_back(v);
            for (const Var* v : {&b.self_attn.wq, &b.self_attn.bq, &b.self_attn.wk, &b.self_attn.bk,
                                 &b.self_attn.wv, &b.self_attn.bv, &b.self_attn.wo, &b.self_attn.bo})
                out.push_back(v);
            for (const Var* v : {&b.ln2.wg, &b.ln2.bg, &b.ln2.wb, &b.ln2.bb}) out.push_back(v);
            for (const Var* v : {&b.cross_attn.wq, &b.cross_attn.bq, &b.cross_attn.wk, &b.cross_attn.bk,
                                 &b.cross_attn.wv, &b.cross_attn.bv, &b.cross_attn.wo, &b.cross_attn.bo})
                out.push_back(v);
            for (const Var* v : {&b.ln3.wg, &b.ln3.bg, &b.ln3.wb, &b.ln3.bb}) out.push_back(v);
            for (const Var* v : {&b.ffn_w1, &b.ffn_b1, &b.ffn_w2, &b.ffn_b2}) out.push_back(v);
        }
        for (const Var* v : {&head_ln_g, &head_ln_b, &head_w, &head_b, &obs_w1, &obs_b1, &obs_w2, &obs_b2})
            out.push_back(v);
        return out;
    }
};

inline DenoiserVars lift_denoiser(Tape& tape, DenoiserParams& p, bool trainable) {
    auto lift = [&](Tensor& t) { return trainable ? tape.leaf(t) : tape.constant(t); };
    DenoiserVars v;
    v.tok_emb = lift(p.tok_emb);
    v.pos_emb = lift(p.pos_emb);
    v.step_emb = lift(p.step_emb);
    auto lift_adaln = [&](AdaLnParams& a) {
        return DenoiserVars::AdaLn{lift(a.wg), lift(a.bg), lift(a.wb), lift(a.bb)};
    };
    auto lift_attn = [&](AttnParams& a) {
        return DenoiserVars::Attn{lift(a.wq), lift(a.bq), lift(a.wk), lift(a.bk),
                                  lift(a.wv), lift(a.bv), lift(a.wo), lift(a.bo)};
    };
    for (auto& b : p.blocks) {
        DenoiserVars::Block bv{lift_adaln(b.ln1),  lift_adaln(b.ln2),  lift_adaln(b.ln3),
                               lift_attn(b.self_attn), lift_attn(b.cross_attn),
                               lift(b.ffn_w1), lift(b.ffn_b1), lift(b.ffn_w2), lift(b.ffn_b2)};
        v.blocks.push_back(std::move(bv));
    }
    v.head_ln_g = lift(p.head_ln_g);
    v.head_ln_b = lift(p.head_ln_b);
    v.head_w = lift(p.head_w);
    v.head_b = lift(p.head_b);
    v.obs_w1 = lift(p.obs_w1);
    v.obs_b1 = lift(p.obs_b1);
    v.obs_w2 = lift(p.obs_w2);
    v.obs_b2 = lift(p.obs_b2);
    return v;
}

// Flattened observation (2J occlusion-zeroed coords + J visibility flags).
inline Tensor observation_input(const Observation& obs, const DenoiserConfig& cfg) {
    if (obs.joints != cfg.joints)
        throw DimensionError("denoiser: observation has " + std::to_string(obs.joints) +
                             " joints, config expects " + std::to_string(cfg.joints));
    Tensor in({1, static_cast<std::int64_t>(cfg.joints) * 3});
    for (int j = 0; j < cfg.joints; ++j) {
        const bool vis = obs.visible[static_cast<std::size_t>(j)] != 0;
        in.at(0, 2 * j) = vis ? obs.px(j) * cfg.obs_scale : 0.0;
        in.at(0, 2 * j + 1) = vis ? obs.py(j) * cfg.obs_scale : 0.0;
        in.at(0, 2 * static_cast<std::int64_t>(cfg.joints) + j) = vis ? 1.0 : 0.0;
    }
    return in;
}

// Observation -> M condition tokens [M x D].
inline Var condition_tokens_graph(Tape& tape, const DenoiserVars& v, const DenoiserConfig& cfg,
                                  const Observation& obs) {
    auto in = tape.constant(observation_input(obs, cfg));
    auto h = tape.tanh_op(tape.linear(in, v.obs_w1, v.obs_b1));
    auto c = tape.linear(h, v.obs_w2, v.obs_b2);
    return tape.reshape(c, {cfg.cond_tokens, cfg.width});
}

namespace detail {

// AdaLNorm: layer norm whose gain/bias are affine functions of the step
// embedding.
inline Var adaln(Tape& tape, const Var& x, const DenoiserVars::AdaLn& p, const Var& step_row,
                 std::int64_t width) {
    auto gain = tape.reshape(tape.linear(step_row, p.wg, p.bg), {width});
    auto bias = tape.reshape(tape.linear(step_row, p.wb, p.bb), {width});
    return tape.layer_norm(x, gain, bias);
}

}  // namespace detail

// f_theta logits over the |C| clean classes given externally built condition
// tokens; the condition enters only through cross-attention, so it is read as
// a set.
inline Var denoiser_logits_from_cond_graph(Tape& tape, const DenoiserVars& v, const DenoiserConfig& cfg,
                                           const std::vector<std::int64_t>& k_seq, int s, const Var& cond) {
    if (static_cast<int>(k_seq.size()) != cfg.tokens)
        throw DimensionError("denoiser: sequence length " + std::to_string(k_seq.size()) +
                             " does not match configured N=" + std::to_string(cfg.tokens));
    if (s < 1 || s > cfg.steps)
        throw ConfigError("denoiser: step " + std::to_string(s) + " outside [1," + std::to_string(cfg.steps) + "]");
    std::vector<std::int64_t> rows(k_seq.size());
    for (std::size_t i = 0; i < k_seq.size(); ++i) {
        if (k_seq[i] < 1 || k_seq[i] > cfg.vocab())
            throw DataError("denoiser: token " + std::to_string(k_seq[i]) + " outside [1," +
                            std::to_string(cfg.vocab()) + "]");
        rows[i] = k_seq[i] - 1;
    }
    auto x = tape.add(tape.embedding(v.tok_emb, rows), v.pos_emb);
    auto step_row = tape.reshape(tape.row(v.step_emb, s - 1), {1, cfg.width});
    for (const auto& b : v.blocks) {
        auto h1 = detail::adaln(tape, x, b.ln1, step_row, cfg.width);
        x = tape.add(x, multi_head_attention(tape, h1, h1, b.self_attn.wq, b.self_attn.bq, b.self_attn.wk,
                                             b.self_attn.bk, b.self_attn.wv, b.self_attn.bv, b.self_attn.wo,
                                             b.self_attn.bo, cfg.heads));
        auto h2 = detail::adaln(tape, x, b.ln2, step_row, cfg.width);
        x = tape.add(x, multi_head_attention(tape, h2, cond, b.cross_attn.wq, b.cross_attn.bq,
                                             b.cross_attn.wk, b.cross_attn.bk, b.cross_attn.wv,
                                             b.cross_attn.bv, b.cross_attn.wo, b.cross_attn.bo, cfg.heads));
        auto h3 = detail::adaln(tape, x, b.ln3, step_row, cfg.width);
        auto f = tape.linear(h3, b.ffn_w1, b.ffn_b1);
        f = tape.tanh_op(f);
        f = tape.linear(f, b.ffn_w2, b.ffn_b2);
        x = tape.add(x, f);
    }
    auto h = tape.layer_norm(x, v.head_ln_g, v.head_ln_b);
    return tape.linear(h, v.head_w, v.head_b);
}

// Shape [N x |C|]; k_seq may contain the Occ symbol, s in 1..S.
inline Var denoiser_logits_graph(Tape& tape, const DenoiserVars& v, const DenoiserConfig& cfg,
                                 const std::vector<std::int64_t>& k_seq, int s, const Observation& obs) {
    auto cond = condition_tokens_graph(tape, v, cfg, obs);
    return denoiser_logits_from_cond_graph(tape, v, cfg, k_seq, s, cond);
}

inline Tensor denoise_logits(const std::vector<std::int64_t>& k_seq, int s, const Observation& obs,
                             DenoiserParams& p, const DenoiserConfig& cfg) {
    Tape tape;
    auto v = lift_denoiser(tape, p, /*trainable=*/false);
    return denoiser_logits_graph(tape, v, cfg, k_seq, s, obs).v;
}

// ---- reparameterized reverse step ----

// p_theta(k_lo | k_hi=u, y) = sum_{k0_hat} q(k_lo | k_hi, k0_hat) f(k0_hat),
// with zero weight for impossible pairings and renormalization over the
// feasible mass. f is the denoiser's softmax row (|C| values). O(|C|).
inline std::vector<double> p_theta_position(std::int64_t u, const std::vector<double>& f, int lo, int hi,
                                            const TransitionParams& tp) {
    const std::int64_t cbk = tp.codebook_size();
    if (static_cast<std::int64_t>(f.size()) != cbk)
        throw DimensionError("p_theta: f must have |C| entries");
    tp.check_symbol(u, true);
    const auto h = tp.schedule.hop(lo, hi);
    const auto clo = tp.schedule.cum(lo);
    const auto chi = tp.schedule.cum(hi);
    std::vector<double> p(static_cast<std::size_t>(cbk) + 1, 0.0);

    if (u == tp.occ_index()) {
        if (chi.gamma_bar <= 0.0)
            throw ImpossibleEventError("p_theta: Occ observed but schedule never occludes by step " +
                                       std::to_string(hi));
        for (std::int64_t v = 0; v < cbk; ++v)
            p[static_cast<std::size_t>(v)] =
                h.occ * (clo.beta_bar + clo.alpha_bar * f[static_cast<std::size_t>(v)]) / chi.gamma_bar;
        p[static_cast<std::size_t>(cbk)] = clo.gamma_bar / chi.gamma_bar;
    } else {
        const double den_other = chi.beta_bar;                 // q(k_hi=u | k0=w), w != u
        const double den_match = chi.alpha_bar + chi.beta_bar; // w == u
        if (den_other <= 0.0 && den_match <= 0.0)
            throw ImpossibleEventError("p_theta: token " + std::to_string(u) + " unreachable at step " +
                                       std::to_string(hi));
        double big_g = 0.0;
        std::vector<double> g(static_cast<std::size_t>(cbk), 0.0);
        for (std::int64_t w = 0; w < cbk; ++w) {
            const double den = (w + 1 == u) ? den_match : den_other;
            if (den > 0.0) {
                g[static_cast<std::size_t>(w)] = f[static_cast<std::size_t>(w)] / den;
                big_g += g[static_cast<std::size_t>(w)];
            }
        }
        for (std::int64_t v = 0; v < cbk; ++v) {
            const double trans = h.repl + (v + 1 == u ? h.keep : 0.0);
            p[static_cast<std::size_t>(v)] =
                trans * (clo.beta_bar * big_g + clo.alpha_bar * g[static_cast<std::size_t>(v)]);
        }
    }
    double z = 0.0;
    for (double x : p) z += x;
    if (!(z > 0.0)) throw ImpossibleEventError("p_theta: zero feasible mass");
    for (double& x : p) x /= z;
    return p;
}

// Full per-position reverse distributions for a sequence at step s -> s-1.
inline std::vector<std::vector<double>> p_theta_step(const std::vector<std::int64_t>& k_seq, int s,
                                                     const Observation& obs, DenoiserParams& dp,
                                                     const DenoiserConfig& cfg, const TransitionParams& tp) {
    const Tensor logits = denoise_logits(k_seq, s, obs, dp, cfg);
    std::vector<std::vector<double>> out;
    out.reserve(k_seq.size());
    std::vector<double> f(static_cast<std::size_t>(cfg.classes));
    for (int n = 0; n < cfg.tokens; ++n) {
        double mx = logits.at(n, 0);
        for (std::int64_t c = 1; c < cfg.classes; ++c) mx = std::max(mx, logits.at(n, c));
        double se = 0.0;
        for (std::int64_t c = 0; c < cfg.classes; ++c) {
            f[static_cast<std::size_t>(c)] = std::exp(logits.at(n, c) - mx);
            se += f[static_cast<std::size_t>(c)];
        }
        for (auto& x : f) x /= se;
        out.push_back(p_theta_position(k_seq[static_cast<std::size_t>(n)], f, s - 1, s, tp));
    }
    return out;
}

// ---- losses ----

// KL(q(k_lo | k_hi, k0) || p_theta(k_lo | k_hi)) for one position, built on
// the tape from the position's logits row. Mirrors p_theta_position.
inline Var position_kl_graph(Tape& tape, const Var& f /* softmax row, [C] */, std::int64_t u,
                             std::int64_t k0, int lo, int hi, const TransitionParams& tp) {
    const std::int64_t cbk = tp.codebook_size();
    const auto q_full = posterior_hop(u, k0, lo, hi, tp);  // |C|+1 values, constant
    Tensor q_cb({cbk});
    double entropy_term = 0.0;  // sum q log q over codebook coords
    for (std::int64_t v = 0; v < cbk; ++v) {
        const double qv = q_full[static_cast<std::size_t>(v)];
        q_cb.mut()[v] = qv;
        if (qv > 0.0) entropy_term += qv * std::log(qv);
    }
    const auto h = tp.schedule.hop(lo, hi);
    const auto clo = tp.schedule.cum(lo);
    const auto chi = tp.schedule.cum(hi);

    Var p_cb;
    if (u == tp.occ_index()) {
        // p(v) = occ_hop*(beta_lo + alpha_lo f(v)) / gamma_hi; p(Occ) equals the
        // posterior's Occ mass exactly, so that coordinate contributes zero KL.
        p_cb = tape.add_scalar(tape.scale(f, h.occ * clo.alpha_bar / chi.gamma_bar),
                               h.occ * clo.beta_bar / chi.gamma_bar);
    } else {
        const double den_other = chi.beta_bar;
        const double den_match = chi.alpha_bar + chi.beta_bar;
        Tensor invq({cbk});
        for (std::int64_t w = 0; w < cbk; ++w) {
            const double den = (w + 1 == u) ? den_match : den_other;
            invq.mut()[w] = den > 0.0 ? 1.0 / den : 0.0;
        }
        auto g = tape.mul(f, tape.constant(invq));
        auto big_g = tape.sum_all(g);
        Tensor onehot({cbk});
        onehot.mut()[u - 1] = 1.0;
        auto gu = tape.dot_const(g, onehot);
        auto base = tape.add(tape.scale_by(tape.constant(Tensor::full({cbk}, 1.0)),
                                           tape.scale(big_g, h.repl * clo.beta_bar)),
                             tape.scale(g, h.repl * clo.alpha_bar));
        auto spike_mag = tape.add(tape.scale(big_g, h.keep * clo.beta_bar),
                                  tape.scale(gu, h.keep * clo.alpha_bar));
        auto p_un = tape.add(base, tape.scale_by(tape.constant(onehot), spike_mag));
        p_cb = tape.div_by(p_un, tape.sum_all(p_un));
    }
    return tape.add_scalar(tape.masked_nll(p_cb, q_cb), entropy_term);
}

// VLB term at the sampled step: per-position KL summed over positions.
inline Var vlb_from_logits_graph(Tape& tape, const Var& logits, const std::vector<std::int64_t>& k0_seq,
                                 const std::vector<std::int64_t>& ks_seq, int lo, int hi,
                                 const TransitionParams& tp) {
    detail::op_check(k0_seq.size() == ks_seq.size(), "vlb: sequence length mismatch");
    auto probs = tape.softmax(logits, 1);
    Var total = tape.constant(Tensor::scalar(0.0));
    for (std::size_t n = 0; n < k0_seq.size(); ++n) {
        auto f = tape.row(probs, static_cast<std::int64_t>(n));
        auto kl = position_kl_graph(tape, f, ks_seq[n], k0_seq[n], lo, hi, tp);
        total = (n == 0) ? kl : tape.add(total, kl);
    }
    return total;
}

// Auxiliary denoising objective: mean over positions of -log f(k0 | k_s, y).
inline Var aux_from_logits_graph(Tape& tape, const Var& logits, const std::vector<std::int64_t>& k0_seq) {
    std::vector<std::int64_t> targets(k0_seq.size());
    for (std::size_t i = 0; i < k0_seq.size(); ++i) targets[i] = k0_seq[i] - 1;
    auto lsm = tape.log_softmax(logits, 1);
    return tape.neg(tape.mean_all(tape.gather_rows(lsm, targets)));
}

struct DiffusionLoss {
    Var total;
    double vlb = 0.0;
    double aux = 0.0;
};

// Total training loss for one sequence at sampled step s: lambda*aux + vlb.
inline DiffusionLoss diffusion_loss_graph(Tape& tape, const DenoiserVars& dv, const DenoiserConfig& cfg,
                                          const std::vector<std::int64_t>& k0_seq,
                                          const std::vector<std::int64_t>& ks_seq, int s,
                                          const Observation& obs, const TransitionParams& tp, double lambda) {
    auto logits = denoiser_logits_graph(tape, dv, cfg, ks_seq, s, obs);
    auto vlb = vlb_from_logits_graph(tape, logits, k0_seq, ks_seq, s - 1, s, tp);
    auto aux = aux_from_logits_graph(tape, logits, k0_seq);
    DiffusionLoss out;
    out.vlb = vlb.v[0];
    out.aux = aux.v[0];
    out.total = tape.add(vlb, tape.scale(aux, lambda));
    return out;
}

// ---- training ----

struct DiffusionTrainConfig {
    int steps = 500;
    int batch = 8;
    AdamWConfig adamw{5.5e-4, 0.9, 0.96, 1e-8, 4.5e-2};
    double aux_weight = 5e-4;  // lambda
    std::uint64_t seed = 0;
};

struct DiffusionTrainLog {
    struct Row {
        int step;
        double s_mean;
        double vlb;
        double aux;
        double total;
    };
    std::vector<Row> rows;
    std::vector<std::int64_t> s_histogram;  // index s, 1..S
    std::int64_t occ_tokens_seen = 0;
    std::int64_t tokens_seen = 0;
    double mean_prior_kl = 0.0;  // parameter-free term, reported only
};

// Alg-style loop: tokenize with the frozen codec, sample s uniformly, corrupt
// via the closed-form forward, minimize lambda*aux + vlb. Only denoiser
// parameters are updated. The optimizer is external so training can resume
// from checkpointed state.
inline DiffusionTrainLog train_diffusion_with(const PoseDataset& ds, CodecParams& codec_params,
                                              const CodecConfig& codec_cfg, DenoiserParams& dp,
                                              const DenoiserConfig& dcfg, const TransitionParams& tp,
                                              const DiffusionTrainConfig& tcfg, AdamW& opt) {
    dcfg.validate();
    if (ds.samples.empty()) throw DataError("train_diffusion: dataset is empty");
    if (dcfg.classes != tp.codebook_size())
        throw ConfigError("train_diffusion: denoiser classes != schedule codebook size");
    if (dcfg.steps != tp.steps())
        throw ConfigError("train_diffusion: denoiser step embedding does not match schedule S");
    if (dcfg.tokens != codec_cfg.tokens)
        throw ConfigError("train_diffusion: token count differs between codec and denoiser");
    if (tcfg.steps < 1 || tcfg.batch < 1) throw ConfigError("train_diffusion: steps and batch must be positive");

    // pre-tokenize once; the codec stays frozen
    std::vector<std::vector<std::int64_t>> k0all;
    k0all.reserve(ds.samples.size());
    for (const auto& s : ds.samples) k0all.push_back(encode_tokens(s.pose, codec_params, codec_cfg).tokens.indices);

    auto tensors = dp.tensors();
    Rng base(tcfg.seed);
    const std::int64_t n = static_cast<std::int64_t>(ds.samples.size());
    const int S = tp.steps();

    DiffusionTrainLog log;
    log.s_histogram.assign(static_cast<std::size_t>(S) + 1, 0);
    double prior_kl_sum = 0.0;
    std::int64_t prior_kl_count = 0;

    for (int step = 0; step < tcfg.steps; ++step) {
        Rng rng = base.fork(static_cast<std::uint64_t>(step) + 0xD1FF);
        struct Item {
            std::int64_t sample;
            int s;
            std::vector<std::int64_t> ks;
        };
        std::vector<Item> items;
        items.reserve(static_cast<std::size_t>(tcfg.batch));
        for (int b = 0; b < tcfg.batch; ++b) {
            Item it;
            it.sample = rng.uniform_int(n);
            it.s = 1 + static_cast<int>(rng.uniform_int(S));
            it.ks = sample_forward(k0all[static_cast<std::size_t>(it.sample)], it.s, tp, rng);
            items.push_back(std::move(it));
        }

        for (const auto& it : items) {
            ++log.s_histogram[static_cast<std::size_t>(it.s)];
            for (auto k : it.ks) {
                ++log.tokens_seen;
                if (k == tp.occ_index()) ++log.occ_tokens_seen;
            }
            if (it.s == S) {
                for (auto k0 : k0all[static_cast<std::size_t>(it.sample)]) {
                    prior_kl_sum += prior_kl(k0, tp);
                    ++prior_kl_count;
                }
            }
        }

        std::vector<Tensor> total(tensors.size());
        for (std::size_t k = 0; k < tensors.size(); ++k) total[k] = Tensor(tensors[k]->shape());
        const int threads = std::min<int>(thread_count(), tcfg.batch);
        std::vector<std::vector<Tensor>> partial(static_cast<std::size_t>(threads));
        std::vector<double> pvlb(static_cast<std::size_t>(threads), 0.0), paux(pvlb), ptot(pvlb);

        auto work = [&](int tid, int lo, int hi) {
            auto& acc = partial[static_cast<std::size_t>(tid)];
            acc.resize(tensors.size());
            for (std::size_t k = 0; k < tensors.size(); ++k) acc[k] = Tensor(tensors[k]->shape());
            for (int b = lo; b < hi; ++b) {
                const auto& it = items[static_cast<std::size_t>(b)];
                const auto& obs = ds.samples[static_cast<std::size_t>(it.sample)].obs;
                Tape tape;
                auto dv = lift_denoiser(tape, dp, /*trainable=*/true);
                auto loss = diffusion_loss_graph(tape, dv, dcfg, k0all[static_cast<std::size_t>(it.sample)],
                                                 it.ks, it.s, obs, tp, tcfg.aux_weight);
                pvlb[static_cast<std::size_t>(tid)] += loss.vlb;
                paux[static_cast<std::size_t>(tid)] += loss.aux;
                ptot[static_cast<std::size_t>(tid)] += loss.total.v[0];
                tape.backward(loss.total);
                const auto vars = dv.ordered();
                for (std::size_t k = 0; k < vars.size(); ++k) {
                    const Tensor g = tape.grad(*vars[k]);
                    for (std::int64_t i = 0; i < g.size(); ++i) acc[k].mut()[i] += g[i];
                }
            }
        };

        if (threads <= 1) {
            work(0, 0, tcfg.batch);
        } else {
            std::vector<std::thread> pool;
            const int chunk = (tcfg.batch + threads - 1) / threads;
            for (int t = 0; t < threads; ++t) {
                const int lo = t * chunk;
                const int hi = std::min(tcfg.batch, lo + chunk);
                if (lo >= hi) break;
                pool.emplace_back(work, t, lo, hi);
            }
            for (auto& th : pool) th.join();
        }

        double vlb_sum = 0, aux_sum = 0, tot_sum = 0, s_sum = 0;
        for (int t = 0; t < threads; ++t) {
            vlb_sum += pvlb[static_cast<std::size_t>(t)];
            aux_sum += paux[static_cast<std::size_t>(t)];
            tot_sum += ptot[static_cast<std::size_t>(t)];
            if (partial[static_cast<std::size_t>(t)].empty()) continue;
            for (std::size_t k = 0; k < tensors.size(); ++k) {
                const Tensor& src = partial[static_cast<std::size_t>(t)][k];
                for (std::int64_t i = 0; i < src.size(); ++i) total[k].mut()[i] += src[i];
            }
        }
        for (const auto& it : items) s_sum += it.s;

        const double inv = 1.0 / static_cast<double>(tcfg.batch);
        for (auto& g : total)
            for (std::int64_t i = 0; i < g.size(); ++i) g.mut()[i] *= inv;
        if (!std::isfinite(tot_sum))
            throw DivergenceError("train_diffusion: non-finite loss at step " + std::to_string(step));
        opt.step(tensors, total);

        log.rows.push_back({step, s_sum * inv, vlb_sum * inv, aux_sum * inv, tot_sum * inv});
    }
    if (prior_kl_count > 0) log.mean_prior_kl = prior_kl_sum / static_cast<double>(prior_kl_count);
    return log;
}

inline DiffusionTrainLog train_diffusion(const PoseDataset& ds, CodecParams& codec_params,
                                         const CodecConfig& codec_cfg, DenoiserParams& dp,
                                         const DenoiserConfig& dcfg, const TransitionParams& tp,
                                         const DiffusionTrainConfig& tcfg) {
    AdamW opt(tcfg.adamw);
    return train_diffusion_with(ds, codec_params, codec_cfg, dp, dcfg, tp, tcfg, opt);
}

// ---- inference ----

enum class InitMode { AllOcc, PriorSample };

inline InitMode parse_init_mode(const std::string& s) {
    if (s == "all-occ") return InitMode::AllOcc;
    if (s == "prior-sample") return InitMode::PriorSample;
    throw ConfigError("init_mode must be 'all-occ' or 'prior-sample', got '" + s + "'");
}

struct InferResult {
    TokenSequence tokens;
    Pose pose;
};

namespace detail {

inline std::int64_t sample_categorical(const std::vector<double>& p, Rng& rng) {
    const double u = rng.uniform();
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        acc += p[i];
        if (u < acc) return static_cast<std::int64_t>(i);
    }
    return static_cast<std::int64_t>(p.size()) - 1;
}

// Evenly strided step grid S = g_0 > g_1 > ... > 0.
inline std::vector<int> step_grid(int S, int steps_used) {
    if (steps_used < 1 || steps_used > S)
        throw ConfigError("steps_used must lie in [1,S], got " + std::to_string(steps_used));
    std::vector<int> grid;
    for (int i = 0; i <= steps_used; ++i) {
        const int s = static_cast<int>(std::llround(static_cast<double>(S) *
                                                    static_cast<double>(steps_used - i) /
                                                    static_cast<double>(steps_used)));
        if (grid.empty() || s < grid.back()) grid.push_back(s);
    }
    if (grid.front() != S) grid.insert(grid.begin(), S);
    if (grid.back() != 0) grid.push_back(0);
    return grid;
}

}  // namespace detail

// Reverse process from the stationary distribution. steps_used < S runs the
// strided variant with exact multi-step posteriors. Residual Occ tokens (a
// numeric edge case; the final hop to s=0 assigns Occ zero mass) are resolved
// by an argmax over denoise_logits at s=1, so the decoder always receives
// clean tokens.
inline InferResult infer(const Observation& obs, DenoiserParams& dp, const DenoiserConfig& dcfg,
                         const TransitionParams& tp, CodecParams& codec_params, const CodecConfig& codec_cfg,
                         int steps_used, InitMode init, Rng& rng) {
    dcfg.validate();
    const int S = tp.steps();
    if (dcfg.steps != S) throw ConfigError("infer: denoiser step embedding does not match schedule S");
    if (init == InitMode::AllOcc && tp.schedule.cum(S).gamma_bar <= 0.0)
        throw ConfigError(
            "infer: all-occ initialization is impossible under a schedule that never occludes; "
            "use init_mode=prior-sample");
    std::vector<std::int64_t> k(static_cast<std::size_t>(dcfg.tokens), tp.occ_index());
    if (init == InitMode::PriorSample) {
        const auto prior = prior_distribution(tp);
        for (auto& tok : k) tok = 1 + detail::sample_categorical(prior, rng);
    }
    const auto grid = detail::step_grid(S, steps_used);
    std::vector<double> f(static_cast<std::size_t>(dcfg.classes));
    for (std::size_t gi = 0; gi + 1 < grid.size(); ++gi) {
        const int hi = grid[gi];
        const int lo = grid[gi + 1];
        const Tensor logits = denoise_logits(k, hi, obs, dp, dcfg);
        for (int n = 0; n < dcfg.tokens; ++n) {
            double mx = logits.at(n, 0);
            for (std::int64_t c = 1; c < dcfg.classes; ++c) mx = std::max(mx, logits.at(n, c));
            double se = 0.0;
            for (std::int64_t c = 0; c < dcfg.classes; ++c) {
                f[static_cast<std::size_t>(c)] = std::exp(logits.at(n, c) - mx);
                se += f[static_cast<std::size_t>(c)];
            }
            for (auto& x : f) x /= se;
            const auto p = p_theta_position(k[static_cast<std::size_t>(n)], f, lo, hi, tp);
            k[static_cast<std::size_t>(n)] = 1 + detail::sample_categorical(p, rng);
        }
    }
    bool residual_occ = false;
    for (auto tok : k) residual_occ = residual_occ || (tok == tp.occ_index());
    if (residual_occ) {
        const Tensor logits = denoise_logits(k, 1, obs, dp, dcfg);
        for (int n = 0; n < dcfg.tokens; ++n) {
            if (k[static_cast<std::size_t>(n)] != tp.occ_index()) continue;
            std::int64_t best = 0;
            for (std::int64_t c = 1; c < dcfg.classes; ++c)
                if (logits.at(n, c) > logits.at(n, best)) best = c;
            k[static_cast<std::size_t>(n)] = best + 1;
        }
    }
    InferResult r;
    r.tokens.indices = k;
    r.pose = decode_pose(r.tokens, codec_params, codec_cfg);
    return r;
}

}  // namespace didipose
