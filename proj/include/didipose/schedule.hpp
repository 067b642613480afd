#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "didipose/common.hpp"

namespace didipose {

// Conditioning on an event of probability zero (e.g. observing Occ under a
// schedule that never occludes).
class ImpossibleEventError : public DataError {
public:
    explicit ImpossibleEventError(const std::string& msg) : DataError(msg) {}
};

// One-hop transition coefficients: keep the token with probability `keep`,
// move to any *single* codebook entry with probability `repl` (so the total
// replace mass is |C|*repl), transition to Occ with probability `occ`.
// keep + |C|*repl + occ = 1. The same structure describes multi-step bridges,
// which is what makes strided inference exact.
struct HopCoeffs {
    double keep = 1.0;
    double repl = 0.0;
    double occ = 0.0;
};

struct CumulativeCoeffs {
    double alpha_bar = 1.0;
    double beta_bar = 0.0;
    double gamma_bar = 0.0;
};

// Corruption schedule over steps 0..S. Stores the cumulative arrays
// (alpha_bar, beta_bar, gamma_bar) and the per-step values recovered from
// them; both are validated to lie in [0,1].
class Schedule {
public:
    // gamma_bar rises linearly 0 -> gamma_bar_end, alpha_bar falls linearly
    // 1 -> alpha_bar_end, beta_bar follows from the simplex identity
    // alpha_bar + |C|*beta_bar + gamma_bar = 1. An exact alpha_bar_S = 0 is
    // clamped to 1e-8 (unless gamma_bar_S = 1, where the clamp would push
    // beta_bar_S below zero).
    static Schedule linear(int steps, double alpha_bar_end, double gamma_bar_end,
                           std::int64_t codebook_size) {
        if (steps < 1) throw ConfigError("schedule: S must be >= 1");
        if (codebook_size < 1) throw ConfigError("schedule: |C| must be >= 1");
        if (!(alpha_bar_end >= 0 && alpha_bar_end <= 1) || !(gamma_bar_end >= 0 && gamma_bar_end <= 1))
            throw ConfigError("schedule: endpoints must lie in [0,1]");
        if (alpha_bar_end + gamma_bar_end > 1.0 + 1e-12)
            throw ConfigError("schedule: alpha_bar_end + gamma_bar_end exceeds 1");
        Schedule sc;
        sc.steps_ = steps;
        sc.codebook_ = codebook_size;
        sc.alpha_bar_.resize(static_cast<std::size_t>(steps) + 1);
        sc.beta_bar_.resize(static_cast<std::size_t>(steps) + 1);
        sc.gamma_bar_.resize(static_cast<std::size_t>(steps) + 1);
        for (int s = 0; s <= steps; ++s) {
            const double t = static_cast<double>(s) / static_cast<double>(steps);
            sc.alpha_bar_[static_cast<std::size_t>(s)] = 1.0 - (1.0 - alpha_bar_end) * t;
            sc.gamma_bar_[static_cast<std::size_t>(s)] = gamma_bar_end * t;
        }
        if (sc.alpha_bar_[static_cast<std::size_t>(steps)] <= 0.0 &&
            sc.gamma_bar_[static_cast<std::size_t>(steps)] < 1.0)
            sc.alpha_bar_[static_cast<std::size_t>(steps)] = 1e-8;
        for (int s = 0; s <= steps; ++s) {
            double bb = (1.0 - sc.alpha_bar_[static_cast<std::size_t>(s)] -
                         sc.gamma_bar_[static_cast<std::size_t>(s)]) /
                        static_cast<double>(codebook_size);
            if (bb < 0 && bb > -1e-14) bb = 0.0;
            sc.beta_bar_[static_cast<std::size_t>(s)] = bb;
        }
        sc.finalize();
        return sc;
    }

    // Builds the schedule from explicit per-step (alpha_s, gamma_s); used by
    // randomized property suites.
    static Schedule from_per_step(const std::vector<double>& alphas, const std::vector<double>& gammas,
                                  std::int64_t codebook_size) {
        if (alphas.empty() || alphas.size() != gammas.size())
            throw ConfigError("schedule: per-step arrays must be nonempty and equal length");
        Schedule sc;
        sc.steps_ = static_cast<int>(alphas.size());
        sc.codebook_ = codebook_size;
        sc.alpha_bar_.assign(1, 1.0);
        sc.gamma_bar_.assign(1, 0.0);
        sc.beta_bar_.assign(1, 0.0);
        double ab = 1.0, keep_visible = 1.0;
        for (int s = 0; s < sc.steps_; ++s) {
            ab *= alphas[static_cast<std::size_t>(s)];
            keep_visible *= 1.0 - gammas[static_cast<std::size_t>(s)];
            sc.alpha_bar_.push_back(ab);
            sc.gamma_bar_.push_back(1.0 - keep_visible);
            sc.beta_bar_.push_back((1.0 - ab - (1.0 - keep_visible)) / static_cast<double>(codebook_size));
        }
        sc.finalize();
        return sc;
    }

    int steps() const { return steps_; }
    std::int64_t codebook_size() const { return codebook_; }

    CumulativeCoeffs cum(int s) const {
        check_step(s, 0);
        return {alpha_bar_[static_cast<std::size_t>(s)], beta_bar_[static_cast<std::size_t>(s)],
                gamma_bar_[static_cast<std::size_t>(s)]};
    }

    HopCoeffs per_step(int s) const {
        check_step(s, 1);
        return {alpha_[static_cast<std::size_t>(s - 1)], beta_[static_cast<std::size_t>(s - 1)],
                gamma_[static_cast<std::size_t>(s - 1)]};
    }

    // Bridge coefficients for the multi-step transition lo -> hi. hop(s-1, s)
    // coincides with per_step(s).
    HopCoeffs hop(int lo, int hi) const {
        check_step(lo, 0);
        check_step(hi, 0);
        if (lo >= hi) throw ConfigError("schedule: hop requires lo < hi");
        const double a_lo = alpha_bar_[static_cast<std::size_t>(lo)];
        const double g_lo = gamma_bar_[static_cast<std::size_t>(lo)];
        if (a_lo <= 0.0 || g_lo >= 1.0)
            throw ConfigError("schedule: hop from a fully corrupted step " + std::to_string(lo));
        HopCoeffs h;
        h.keep = alpha_bar_[static_cast<std::size_t>(hi)] / a_lo;
        h.occ = 1.0 - (1.0 - gamma_bar_[static_cast<std::size_t>(hi)]) / (1.0 - g_lo);
        if (h.occ < 0 && h.occ > -1e-14) h.occ = 0.0;
        double repl = (1.0 - h.keep - h.occ) / static_cast<double>(codebook_);
        if (repl < 0 && repl > -1e-14) repl = 0.0;
        h.repl = repl;
        return h;
    }

private:
    void finalize() {
        const auto n = static_cast<std::size_t>(steps_);
        if (std::abs(alpha_bar_[0] - 1.0) > 1e-15 || std::abs(gamma_bar_[0]) > 1e-15 ||
            std::abs(beta_bar_[0]) > 1e-15)
            throw ConfigError("schedule: cumulative arrays must start at (1, 0, 0)");
        alpha_.resize(n);
        beta_.resize(n);
        gamma_.resize(n);
        for (int s = 1; s <= steps_; ++s) {
            const auto i = static_cast<std::size_t>(s);
            if (alpha_bar_[i] > alpha_bar_[i - 1] + 1e-12)
                throw ConfigError("schedule: alpha_bar must be nonincreasing (step " + std::to_string(s) + ")");
            if (gamma_bar_[i] < gamma_bar_[i - 1] - 1e-12)
                throw ConfigError("schedule: gamma_bar must be nondecreasing (step " + std::to_string(s) + ")");
            if (beta_bar_[i] < 0)
                throw ConfigError("schedule: beta_bar negative at step " + std::to_string(s));
            const double a_prev = alpha_bar_[i - 1];
            const double vis_prev = 1.0 - gamma_bar_[i - 1];
            if (a_prev <= 0.0 || vis_prev <= 0.0)
                throw ConfigError("schedule: fully corrupted before the final step (step " +
                                  std::to_string(s - 1) + ")");
            double a = alpha_bar_[i] / a_prev;
            double g = 1.0 - (1.0 - gamma_bar_[i]) / vis_prev;
            if (g < 0 && g > -1e-12) g = 0.0;
            double b = (1.0 - a - g) / static_cast<double>(codebook_);
            if (b < 0 && b > -1e-12) b = 0.0;
            auto in_unit = [](double x) { return x >= 0.0 && x <= 1.0 + 1e-12; };
            if (!in_unit(a) || !in_unit(g) || !in_unit(b))
                throw ConfigError("schedule infeasible: recovered per-step probabilities out of [0,1] at step " +
                                  std::to_string(s));
            alpha_[i - 1] = std::min(a, 1.0);
            gamma_[i - 1] = std::min(g, 1.0);
            beta_[i - 1] = std::min(b, 1.0);
        }
    }

    void check_step(int s, int lo) const {
        if (s < lo || s > steps_)
            throw ConfigError("schedule: step " + std::to_string(s) + " outside [" + std::to_string(lo) + "," +
                              std::to_string(steps_) + "]");
    }

    int steps_ = 0;
    std::int64_t codebook_ = 0;
    std::vector<double> alpha_bar_, beta_bar_, gamma_bar_;  // [0..S]
    std::vector<double> alpha_, beta_, gamma_;              // [1..S], stored 0-based
};

// Transition process over |C| codebook symbols plus the absorbing Occ symbol
// (index |C|+1). Symbols are 1-based to match token indices.
struct TransitionParams {
    Schedule schedule;

    std::int64_t codebook_size() const { return schedule.codebook_size(); }
    std::int64_t occ_index() const { return schedule.codebook_size() + 1; }
    int steps() const { return schedule.steps(); }

    void check_symbol(std::int64_t k, bool allow_occ) const {
        const std::int64_t hi = allow_occ ? occ_index() : codebook_size();
        if (k < 1 || k > hi)
            throw DataError("token index " + std::to_string(k) + " outside [1," + std::to_string(hi) + "]");
    }
};

// P(to | from) for one hop.
inline double hop_prob(const HopCoeffs& h, std::int64_t to, std::int64_t from, std::int64_t codebook) {
    const std::int64_t occ = codebook + 1;
    if (from == occ) return to == occ ? 1.0 : 0.0;  // Occ is absorbing
    if (to == occ) return h.occ;
    return h.repl + (to == from ? h.keep : 0.0);
}

// q(k_s = i | k_0), the Eq.-style closed form: mass alpha_bar+beta_bar at k0,
// beta_bar at every other codebook entry, gamma_bar at Occ. O(1) per entry.
inline std::vector<double> cumulative_forward(std::int64_t k0, int s, const TransitionParams& tp) {
    tp.check_symbol(k0, /*allow_occ=*/false);
    const auto c = tp.schedule.cum(s);
    std::vector<double> out(static_cast<std::size_t>(tp.occ_index()), c.beta_bar);
    out[static_cast<std::size_t>(k0 - 1)] += c.alpha_bar;
    out.back() = c.gamma_bar;
    return out;
}

inline double cumulative_forward_prob(std::int64_t ks, std::int64_t k0, int s, const TransitionParams& tp) {
    tp.check_symbol(k0, false);
    tp.check_symbol(ks, true);
    const auto c = tp.schedule.cum(s);
    if (ks == tp.occ_index()) return c.gamma_bar;
    return c.beta_bar + (ks == k0 ? c.alpha_bar : 0.0);
}

// Stationary distribution the reverse process starts from; the paper's vector
// [beta_bar_S, ..., gamma_bar_S] normalized by (1 - alpha_bar_S).
inline std::vector<double> prior_distribution(const TransitionParams& tp) {
    const auto c = tp.schedule.cum(tp.steps());
    const double z = 1.0 - c.alpha_bar;
    if (z <= 0.0) throw ConfigError("prior: schedule keeps alpha_bar_S = 1, prior undefined");
    std::vector<double> out(static_cast<std::size_t>(tp.occ_index()), c.beta_bar / z);
    out.back() = c.gamma_bar / z;
    return out;
}

// Dense (|C|+1) x (|C|+1) one-step matrix, entry (i, j) = q(k_s=i | k_{s-1}=j).
// Column-stochastic by construction; used by validators and oracles.
inline std::vector<std::vector<double>> dense_transition_matrix(const TransitionParams& tp, int s) {
    const auto h = tp.schedule.per_step(s);
    const std::int64_t n = tp.occ_index();
    std::vector<std::vector<double>> m(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(n), 0.0));
    for (std::int64_t j = 1; j <= n; ++j)
        for (std::int64_t i = 1; i <= n; ++i)
            m[static_cast<std::size_t>(i - 1)][static_cast<std::size_t>(j - 1)] =
                hop_prob(h, i, j, tp.codebook_size());
    return m;
}

// One draw from q(k_s | k_0) without materializing the categorical.
inline std::int64_t sample_corrupted_token(std::int64_t k0, int s, const TransitionParams& tp, Rng& rng) {
    tp.check_symbol(k0, false);
    const auto c = tp.schedule.cum(s);
    const double u = rng.uniform();
    if (u < c.alpha_bar) return k0;
    if (u < c.alpha_bar + c.beta_bar * static_cast<double>(tp.codebook_size()))
        return 1 + rng.uniform_int(tp.codebook_size());
    return tp.occ_index();
}

inline std::vector<std::int64_t> sample_forward(const std::vector<std::int64_t>& k0_seq, int s,
                                                const TransitionParams& tp, Rng& rng) {
    std::vector<std::int64_t> out(k0_seq.size());
    for (std::size_t i = 0; i < k0_seq.size(); ++i) out[i] = sample_corrupted_token(k0_seq[i], s, tp, rng);
    return out;
}

// Reverse-process posterior q(k_lo | k_hi, k_0) over the bridge lo -> hi
// (hi-1 -> hi is the paper's single-step posterior). Log-domain with
// max-subtraction; zero-probability entries stay exactly zero.
inline std::vector<double> posterior_hop(std::int64_t k_hi, std::int64_t k0, int lo, int hi,
                                         const TransitionParams& tp) {
    tp.check_symbol(k0, false);
    tp.check_symbol(k_hi, true);
    const double evidence = cumulative_forward_prob(k_hi, k0, hi, tp);
    if (evidence <= 0.0)
        throw ImpossibleEventError("posterior: q(k_" + std::to_string(hi) + "=" + std::to_string(k_hi) +
                                   " | k_0=" + std::to_string(k0) + ") = 0; conditioning event impossible");
    const auto h = tp.schedule.hop(lo, hi);
    const auto clo = tp.schedule.cum(lo);
    const std::int64_t n = tp.occ_index();
    const double neg_inf = -std::numeric_limits<double>::infinity();

    std::vector<double> logp(static_cast<std::size_t>(n), neg_inf);
    double mx = neg_inf;
    for (std::int64_t v = 1; v <= n; ++v) {
        const double trans = hop_prob(h, k_hi, v, tp.codebook_size());
        const double prior =
            (v == n) ? clo.gamma_bar : clo.beta_bar + (v == k0 ? clo.alpha_bar : 0.0);
        if (trans > 0.0 && prior > 0.0) {
            const double lp = std::log(trans) + std::log(prior);
            logp[static_cast<std::size_t>(v - 1)] = lp;
            mx = std::max(mx, lp);
        }
    }
    if (mx == neg_inf)
        throw ImpossibleEventError("posterior: no admissible predecessor state");
    double z = 0.0;
    for (double lp : logp)
        if (lp != neg_inf) z += std::exp(lp - mx);
    const double log_z = mx + std::log(z);
    std::vector<double> out(static_cast<std::size_t>(n), 0.0);
    for (std::int64_t v = 0; v < n; ++v)
        if (logp[static_cast<std::size_t>(v)] != neg_inf)
            out[static_cast<std::size_t>(v)] = std::exp(logp[static_cast<std::size_t>(v)] - log_z);
    return out;
}

inline std::vector<double> posterior(std::int64_t k_s, std::int64_t k0, int s, const TransitionParams& tp) {
    return posterior_hop(k_s, k0, s - 1, s, tp);
}

// KL(q(k_S|k0) || prior), the parameter-free term of the bound; reported, not
// trained on.
inline double prior_kl(std::int64_t k0, const TransitionParams& tp) {
    const auto q = cumulative_forward(k0, tp.steps(), tp);
    const auto p = prior_distribution(tp);
    double kl = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) {
        if (q[i] <= 0.0) continue;
        if (p[i] <= 0.0) return std::numeric_limits<double>::infinity();
        kl += q[i] * std::log(q[i] / p[i]);
    }
    return kl;
}

}  // namespace didipose
