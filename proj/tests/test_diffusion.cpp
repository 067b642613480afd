#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "didipose/denoiser.hpp"
#include "didipose/metrics.hpp"
#include "oracles.hpp"

using namespace didipose;

namespace {

struct Fixture {
    CodecConfig cc;
    DenoiserConfig dc;
    TransitionParams tp;
    CodecParams codec;
    DenoiserParams den;
    PoseDataset ds;

    Fixture()
        : cc(make_cc()),
          dc(make_dc(cc)),
          tp{Schedule::linear(dc.steps, 0.0, 0.9, cc.fsq().codebook_size())},
          codec(init_codec(cc, Rng(100))),
          den(init_denoiser(dc, Rng(101))),
          ds(generate_dataset(SkeletonDef::default_h36m17(), OccluderSpec{0, 0, 0}, 4, 102, "train")) {}

    static CodecConfig make_cc() {
        CodecConfig cc;
        cc.joints = 17;
        cc.tokens = 4;
        cc.levels = {3, 3};
        cc.local_joints = 3;
        cc.enc_width = 12;
        cc.enc_blocks = 1;
        cc.dec_width = 6;
        cc.dec_blocks = 1;
        return cc;
    }
    static DenoiserConfig make_dc(const CodecConfig& cc) {
        DenoiserConfig dc;
        dc.tokens = cc.tokens;
        dc.classes = cc.fsq().codebook_size();
        dc.width = 16;
        dc.blocks = 1;
        dc.heads = 2;
        dc.ffn_hidden = 32;
        dc.cond_tokens = 2;
        dc.obs_hidden = 12;
        dc.steps = 6;
        dc.joints = cc.joints;
        return dc;
    }
};

std::vector<double> softmax_vec(const std::vector<double>& logits) {
    double mx = logits[0];
    for (double x : logits) mx = std::max(mx, x);
    std::vector<double> f(logits.size());
    double z = 0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        f[i] = std::exp(logits[i] - mx);
        z += f[i];
    }
    for (auto& x : f) x /= z;
    return f;
}

double plain_kl(const std::vector<double>& q, const std::vector<double>& p) {
    double kl = 0;
    for (std::size_t i = 0; i < q.size(); ++i)
        if (q[i] > 0) kl += q[i] * std::log(q[i] / p[i]);
    return kl;
}

}  // namespace

TEST_CASE("denoiser logits have shape N x |C| with normalized softmax rows") {
    Fixture fx;
    const std::vector<std::int64_t> ks{1, 5, fx.tp.occ_index(), 9};
    const Tensor logits = denoise_logits(ks, 3, fx.ds.samples[0].obs, fx.den, fx.dc);
    REQUIRE(logits.shape() == Shape{fx.dc.tokens, fx.dc.classes});
    Tape tp;
    auto sm = tp.softmax(tp.constant(logits), 1);
    for (int n = 0; n < fx.dc.tokens; ++n) {
        double s = 0;
        for (std::int64_t c = 0; c < fx.dc.classes; ++c) s += sm.v.at(n, c);
        REQUIRE(s == Catch::Approx(1.0).margin(1e-12));
    }
    // deterministic
    const Tensor again = denoise_logits(ks, 3, fx.ds.samples[0].obs, fx.den, fx.dc);
    REQUIRE(logits.raw() == again.raw());
}

TEST_CASE("denoiser input validation") {
    Fixture fx;
    const std::vector<std::int64_t> ks{1, 2, 3, 4};
    REQUIRE_THROWS_AS(denoise_logits({1, 2}, 3, fx.ds.samples[0].obs, fx.den, fx.dc), DimensionError);
    REQUIRE_THROWS_AS(denoise_logits(ks, 0, fx.ds.samples[0].obs, fx.den, fx.dc), ConfigError);
    REQUIRE_THROWS_AS(denoise_logits(ks, 7, fx.ds.samples[0].obs, fx.den, fx.dc), ConfigError);
    REQUIRE_THROWS_AS(denoise_logits({1, 2, 3, 99}, 3, fx.ds.samples[0].obs, fx.den, fx.dc), DataError);
}

TEST_CASE("condition tokens are read as a set: permuting them leaves logits unchanged") {
    Fixture fx;
    const std::vector<std::int64_t> ks{2, 7, fx.tp.occ_index(), 4};
    const auto& obs = fx.ds.samples[1].obs;

    auto run = [&](bool permute) {
        Tape tape;
        auto v = lift_denoiser(tape, fx.den, false);
        auto cond = condition_tokens_graph(tape, v, fx.dc, obs);
        if (permute) {
            Tensor perm({fx.dc.cond_tokens, fx.dc.cond_tokens});  // reverse the M rows
            for (int i = 0; i < fx.dc.cond_tokens; ++i) perm.at(i, fx.dc.cond_tokens - 1 - i) = 1.0;
            cond = tape.matmul(tape.constant(perm), cond);
        }
        return denoiser_logits_from_cond_graph(tape, v, fx.dc, ks, 2, cond).v;
    };
    const Tensor base = run(false);
    const Tensor permuted = run(true);
    for (std::int64_t i = 0; i < base.size(); ++i)
        REQUIRE(permuted[i] == Catch::Approx(base[i]).margin(1e-9));

    // the condition itself must matter: a different observation changes logits
    const Tensor other = denoise_logits(ks, 2, fx.ds.samples[2].obs, fx.den, fx.dc);
    double diff = 0;
    for (std::int64_t i = 0; i < base.size(); ++i) diff = std::max(diff, std::abs(other[i] - base[i]));
    REQUIRE(diff > 1e-9);
}

TEST_CASE("p_theta_position closed form") {
    Fixture fx;
    const std::int64_t cbk = fx.tp.codebook_size();

    SECTION("delta weights reproduce the analytic posterior") {
        for (int s : {1, 3, 6}) {
            for (std::int64_t w = 1; w <= cbk; w += 3) {
                Rng rng(200 + static_cast<std::uint64_t>(s));
                const std::int64_t u = sample_corrupted_token(w, s, fx.tp, rng);
                std::vector<double> f(static_cast<std::size_t>(cbk), 0.0);
                f[static_cast<std::size_t>(w - 1)] = 1.0;
                const auto p = p_theta_position(u, f, s - 1, s, fx.tp);
                const auto q = posterior_hop(u, w, s - 1, s, fx.tp);
                for (std::size_t v = 0; v < p.size(); ++v)
                    REQUIRE(p[v] == Catch::Approx(q[v]).margin(1e-12));
            }
        }
    }
    SECTION("uniform weights stay normalized") {
        std::vector<double> f(static_cast<std::size_t>(cbk), 1.0 / static_cast<double>(cbk));
        for (std::int64_t u : {std::int64_t(1), std::int64_t(5), fx.tp.occ_index()}) {
            const auto p = p_theta_position(u, f, 3, 4, fx.tp);
            double sum = 0;
            for (double x : p) {
                REQUIRE(x >= 0.0);
                sum += x;
            }
            REQUIRE(sum == Catch::Approx(1.0).margin(1e-10));
        }
    }
    SECTION("random weights match the direct-sum oracle") {
        Rng rng(201);
        for (int trial = 0; trial < 30; ++trial) {
            const auto tp = testoracle::random_schedule(rng, 2 + rng.uniform_int(6),
                                                        2 + static_cast<int>(rng.uniform_int(10)));
            const int hi = 1 + static_cast<int>(rng.uniform_int(tp.steps()));
            const int lo = static_cast<int>(rng.uniform_int(hi));
            std::vector<double> logits(static_cast<std::size_t>(tp.codebook_size()));
            for (auto& x : logits) x = rng.normal();
            const auto f = softmax_vec(logits);
            const std::int64_t k0 = 1 + rng.uniform_int(tp.codebook_size());
            Rng draw(300 + static_cast<std::uint64_t>(trial));
            const std::int64_t u = sample_corrupted_token(k0, hi, tp, draw);
            const auto fast = p_theta_position(u, f, lo, hi, tp);
            const auto oracle = testoracle::direct_sum_p_theta(u, f, lo, hi, tp);
            for (std::size_t v = 0; v < fast.size(); ++v)
                REQUIRE(std::abs(fast[v] - oracle[v]) < 1e-10);
        }
    }
    SECTION("pure-occlude schedules force a delta at the surviving token") {
        const TransitionParams occ_only{Schedule::linear(6, 0.0, 1.0, cbk)};
        std::vector<double> f(static_cast<std::size_t>(cbk), 1.0 / static_cast<double>(cbk));
        const auto p = p_theta_position(4, f, 2, 3, occ_only);
        for (std::size_t v = 0; v < p.size(); ++v)
            REQUIRE(p[v] == Catch::Approx(v == 3 ? 1.0 : 0.0).margin(1e-12));
    }
    SECTION("Occ under a never-occluding schedule is an impossible event") {
        const TransitionParams repl_only{Schedule::linear(6, 0.0, 0.0, cbk)};
        std::vector<double> f(static_cast<std::size_t>(cbk), 1.0 / static_cast<double>(cbk));
        REQUIRE_THROWS_AS(p_theta_position(repl_only.occ_index(), f, 2, 3, repl_only),
                          ImpossibleEventError);
    }
}

TEST_CASE("p_theta_step wires the denoiser into the reverse distributions") {
    Fixture fx;
    const std::vector<std::int64_t> ks{1, fx.tp.occ_index(), 5, 9};
    const auto dists = p_theta_step(ks, 4, fx.ds.samples[0].obs, fx.den, fx.dc, fx.tp);
    REQUIRE(dists.size() == ks.size());
    for (const auto& p : dists) {
        REQUIRE(static_cast<std::int64_t>(p.size()) == fx.tp.occ_index());
        double sum = 0;
        for (double x : p) sum += x;
        REQUIRE(sum == Catch::Approx(1.0).margin(1e-10));
    }
}

TEST_CASE("position KL graph agrees with a plain evaluation and differentiates cleanly") {
    Fixture fx;
    const std::int64_t cbk = fx.tp.codebook_size();
    Rng rng(400);
    Tensor logits_row = Tensor::randn({cbk}, rng);
    const std::int64_t k0 = 3;

    for (const std::int64_t u : {std::int64_t(3), std::int64_t(7), fx.tp.occ_index()}) {
        const int s = 4;
        Tape tape;
        auto f = tape.softmax(tape.constant(logits_row), 0);
        auto kl = position_kl_graph(tape, f, u, k0, s - 1, s, fx.tp);
        std::vector<double> fv(static_cast<std::size_t>(cbk));
        for (std::int64_t i = 0; i < cbk; ++i) fv[static_cast<std::size_t>(i)] = f.v[i];
        const auto q = posterior_hop(u, k0, s - 1, s, fx.tp);
        const auto p = testoracle::direct_sum_p_theta(u, fv, s - 1, s, fx.tp);
        REQUIRE(kl.v[0] == Catch::Approx(plain_kl(q, p)).margin(1e-10));
        REQUIRE(kl.v[0] >= -1e-12);

        const double err = grad_check(
            [&](Tape& tp2, const Var& probe) {
                auto ff = tp2.softmax(probe, 0);
                return position_kl_graph(tp2, ff, u, k0, s - 1, s, fx.tp);
            },
            logits_row);
        REQUIRE(err < 1e-4);
    }
}

TEST_CASE("vlb and aux vanish for a perfect denoiser") {
    Fixture fx;
    const std::vector<std::int64_t> k0{2, 5, 8, 3};
    Rng rng(500);
    const int s = 5;
    const auto ks = sample_forward(k0, s, fx.tp, rng);
    Tensor logits({fx.dc.tokens, fx.dc.classes});
    for (int n = 0; n < fx.dc.tokens; ++n)
        logits.at(n, k0[static_cast<std::size_t>(n)] - 1) = 60.0;  // softmax -> one-hot at k0

    Tape tape;
    auto lv = tape.constant(logits);
    auto vlb = vlb_from_logits_graph(tape, lv, k0, ks, s - 1, s, fx.tp);
    auto aux = aux_from_logits_graph(tape, lv, k0);
    REQUIRE(vlb.v[0] == Catch::Approx(0.0).margin(1e-9));
    REQUIRE(aux.v[0] == Catch::Approx(0.0).margin(1e-9));
}

TEST_CASE("total loss is the vlb when lambda is zero") {
    Fixture fx;
    const std::vector<std::int64_t> k0{1, 4, 6, 2};
    Rng rng(501);
    const int s = 3;
    const auto ks = sample_forward(k0, s, fx.tp, rng);
    Tape tape;
    auto dv = lift_denoiser(tape, fx.den, false);
    auto loss0 = diffusion_loss_graph(tape, dv, fx.dc, k0, ks, s, fx.ds.samples[0].obs, fx.tp, 0.0);
    REQUIRE(loss0.total.v[0] == Catch::Approx(loss0.vlb).margin(1e-12));
    Tape tape2;
    auto dv2 = lift_denoiser(tape2, fx.den, false);
    auto loss1 = diffusion_loss_graph(tape2, dv2, fx.dc, k0, ks, s, fx.ds.samples[0].obs, fx.tp, 5e-4);
    REQUIRE(loss1.total.v[0] == Catch::Approx(loss1.vlb + 5e-4 * loss1.aux).margin(1e-12));
    REQUIRE(loss1.vlb >= -1e-12);
    REQUIRE(loss1.aux >= 0.0);
}

TEST_CASE("full denoiser loss passes finite-difference checks on probed parameters") {
    Fixture fx;
    const std::vector<std::int64_t> k0{2, 5, 8, 3};
    Rng rng(502);
    const int s = 4;
    const auto ks = sample_forward(k0, s, fx.tp, rng);
    const auto& obs = fx.ds.samples[0].obs;

    auto run_with = [&](Tape& tape, const Var& probe, int which) {
        auto dv = lift_denoiser(tape, fx.den, false);
        if (which == 0) dv.step_emb = probe;
        if (which == 1) dv.head_w = probe;
        if (which == 2) dv.obs_b2 = probe;
        if (which == 3) dv.blocks[0].cross_attn.wv = probe;
        auto loss = diffusion_loss_graph(tape, dv, fx.dc, k0, ks, s, obs, fx.tp, 5e-4);
        return loss.total;
    };
    REQUIRE(grad_check([&](Tape& t, const Var& p) { return run_with(t, p, 0); }, fx.den.step_emb) < 1e-4);
    REQUIRE(grad_check([&](Tape& t, const Var& p) { return run_with(t, p, 1); }, fx.den.head_w) < 1e-4);
    REQUIRE(grad_check([&](Tape& t, const Var& p) { return run_with(t, p, 2); }, fx.den.obs_b2) < 1e-4);
    REQUIRE(grad_check([&](Tape& t, const Var& p) { return run_with(t, p, 3); },
                       fx.den.blocks[0].cross_attn.wv) < 1e-4);
}

TEST_CASE("training reduces the loss and is bitwise reproducible") {
    Fixture fx;
    DiffusionTrainConfig tc;
    tc.steps = 120;
    tc.batch = 4;
    tc.adamw.lr = 2e-3;
    tc.adamw.weight_decay = 1e-4;
    tc.seed = 7;

    DenoiserParams d1 = init_denoiser(fx.dc, Rng(103));
    const auto log1 = train_diffusion(fx.ds, fx.codec, fx.cc, d1, fx.dc, fx.tp, tc);
    DenoiserParams d2 = init_denoiser(fx.dc, Rng(103));
    const auto log2 = train_diffusion(fx.ds, fx.codec, fx.cc, d2, fx.dc, fx.tp, tc);

    REQUIRE(log1.rows.size() == log2.rows.size());
    for (std::size_t i = 0; i < log1.rows.size(); ++i) {
        REQUIRE(log1.rows[i].total == log2.rows[i].total);  // bitwise-identical loss curve
        REQUIRE(log1.rows[i].s_mean == log2.rows[i].s_mean);
    }
    double first = 0, last = 0;
    for (int i = 0; i < 10; ++i) {
        first += log1.rows[static_cast<std::size_t>(i)].total;
        last += log1.rows[log1.rows.size() - 10 + static_cast<std::size_t>(i)].total;
    }
    INFO("first-10 mean " << first / 10 << ", last-10 mean " << last / 10);
    REQUIRE(last < first);
    // uniform step sampling covered every s
    std::int64_t hist_total = 0;
    for (std::size_t s = 1; s < log1.s_histogram.size(); ++s) hist_total += log1.s_histogram[s];
    REQUIRE(hist_total == static_cast<std::int64_t>(tc.steps) * tc.batch);
    REQUIRE(log1.tokens_seen > 0);
    REQUIRE(log1.occ_tokens_seen > 0);
    REQUIRE(log1.mean_prior_kl >= 0.0);
}

TEST_CASE("training validates configuration compatibility") {
    Fixture fx;
    DiffusionTrainConfig tc;
    tc.steps = 1;
    DenoiserConfig wrong = fx.dc;
    wrong.steps = fx.dc.steps + 1;
    DenoiserParams dp = init_denoiser(wrong, Rng(1));
    REQUIRE_THROWS_AS(train_diffusion(fx.ds, fx.codec, fx.cc, dp, wrong, fx.tp, tc), ConfigError);
}

TEST_CASE("inference produces clean deterministic tokens") {
    Fixture fx;
    Rng r1(600), r2(600);
    auto a = infer(fx.ds.samples[0].obs, fx.den, fx.dc, fx.tp, fx.codec, fx.cc, fx.dc.steps,
                   InitMode::AllOcc, r1);
    auto b = infer(fx.ds.samples[0].obs, fx.den, fx.dc, fx.tp, fx.codec, fx.cc, fx.dc.steps,
                   InitMode::AllOcc, r2);
    REQUIRE(a.tokens.indices == b.tokens.indices);
    REQUIRE(a.pose.coords_mm == b.pose.coords_mm);
    REQUIRE(a.tokens.clean(fx.tp.codebook_size()));
    REQUIRE(a.pose.joints == fx.cc.joints);
    REQUIRE(a.pose.all_finite());

    SECTION("reduced-step inference completes") {
        Rng r3(601);
        auto c = infer(fx.ds.samples[0].obs, fx.den, fx.dc, fx.tp, fx.codec, fx.cc, fx.dc.steps / 2,
                       InitMode::AllOcc, r3);
        REQUIRE(c.tokens.clean(fx.tp.codebook_size()));
        REQUIRE(std::isfinite(mpjpe(c.pose, fx.ds.samples[0].pose)));
    }
    SECTION("prior-sample initialization works on replace-only schedules") {
        const TransitionParams repl{Schedule::linear(fx.dc.steps, 0.0, 0.0, fx.tp.codebook_size())};
        Rng r4(602);
        auto c = infer(fx.ds.samples[0].obs, fx.den, fx.dc, repl, fx.codec, fx.cc, fx.dc.steps,
                       InitMode::PriorSample, r4);
        REQUIRE(c.tokens.clean(repl.codebook_size()));
    }
    SECTION("all-occ initialization on replace-only schedules is a config error") {
        const TransitionParams repl{Schedule::linear(fx.dc.steps, 0.0, 0.0, fx.tp.codebook_size())};
        Rng r5(603);
        REQUIRE_THROWS_AS(infer(fx.ds.samples[0].obs, fx.den, fx.dc, repl, fx.codec, fx.cc, fx.dc.steps,
                                InitMode::AllOcc, r5),
                          ConfigError);
    }
    SECTION("steps_used outside [1,S] is rejected") {
        Rng r6(604);
        REQUIRE_THROWS_AS(
            infer(fx.ds.samples[0].obs, fx.den, fx.dc, fx.tp, fx.codec, fx.cc, 0, InitMode::AllOcc, r6),
            ConfigError);
        REQUIRE_THROWS_AS(infer(fx.ds.samples[0].obs, fx.den, fx.dc, fx.tp, fx.codec, fx.cc,
                                fx.dc.steps + 1, InitMode::AllOcc, r6),
                          ConfigError);
    }
}
