#pragma once

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "didipose/codec.hpp"
#include "didipose/dataset.hpp"
#include "didipose/metrics.hpp"

namespace didipose {

struct EvalBucket {
    double lo = 0, hi = 0;  // occluded-fraction range, [lo, hi)
    int count = 0;
    double mpjpe_mm = 0;
    double pa_mpjpe_mm = 0;
};

struct MetricsReport {
    std::string split;
    int count = 0;
    double mpjpe_mm = 0;
    double pa_mpjpe_mm = 0;
    std::vector<EvalBucket> buckets;
    double token_accuracy = std::numeric_limits<double>::quiet_NaN();
    std::string config_hash;
    std::uint64_t seed = 0;
};

// Occlusion buckets come from the ground-truth observations, so a prediction
// file (whose obs mirror the inputs) buckets identically.
inline MetricsReport evaluate_datasets(const PoseDataset& pred, const PoseDataset& gt) {
    if (pred.samples.size() != gt.samples.size())
        throw DataError("eval: prediction holds " + std::to_string(pred.samples.size()) +
                        " samples but ground truth holds " + std::to_string(gt.samples.size()));
    if (gt.samples.empty()) throw DataError("eval: empty dataset");
    MetricsReport rep;
    rep.split = gt.split;
    rep.count = static_cast<int>(gt.samples.size());
    rep.seed = gt.seed;
    rep.buckets = {{0.0, 0.25}, {0.25, 0.5}, {0.5, 0.75}, {0.75, 1.0 + 1e-9}};
    for (auto& b : rep.buckets) b.count = 0;
    for (std::size_t i = 0; i < gt.samples.size(); ++i) {
        const double e1 = mpjpe(pred.samples[i].pose, gt.samples[i].pose);
        const double e2 = pa_mpjpe(pred.samples[i].pose, gt.samples[i].pose);
        rep.mpjpe_mm += e1;
        rep.pa_mpjpe_mm += e2;
        const double frac = occluded_fraction(gt.samples[i].obs);
        for (auto& b : rep.buckets) {
            if (frac >= b.lo && frac < b.hi) {
                ++b.count;
                b.mpjpe_mm += e1;
                b.pa_mpjpe_mm += e2;
                break;
            }
        }
    }
    rep.mpjpe_mm /= rep.count;
    rep.pa_mpjpe_mm /= rep.count;
    for (auto& b : rep.buckets) {
        if (b.count > 0) {
            b.mpjpe_mm /= b.count;
            b.pa_mpjpe_mm /= b.count;
        }
    }
    return rep;
}

// Token sidecar files: one JSON line {"tokens":[...]} per sample.
inline void write_tokens_file(const std::vector<TokenSequence>& all, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("tokens: cannot open '" + path + "' for writing");
    for (const auto& t : all) {
        nlohmann::json o;
        o["tokens"] = t.indices;
        out << o.dump() << "\n";
    }
}

inline std::vector<TokenSequence> read_tokens_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("tokens: cannot open '" + path + "'");
    std::vector<TokenSequence> all;
    std::string line;
    long line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const auto o = nlohmann::json::parse(line);
            TokenSequence t;
            t.indices = o.at("tokens").get<std::vector<std::int64_t>>();
            all.push_back(std::move(t));
        } catch (const nlohmann::json::exception& e) {
            throw DataError("tokens: parse error at line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return all;
}

inline double token_accuracy(const std::vector<TokenSequence>& pred, const std::vector<TokenSequence>& gt) {
    if (pred.size() != gt.size()) throw DataError("token_accuracy: sequence count mismatch");
    std::int64_t hit = 0, total = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i].indices.size() != gt[i].indices.size())
            throw DataError("token_accuracy: sequence length mismatch at sample " + std::to_string(i));
        for (std::size_t n = 0; n < pred[i].indices.size(); ++n) {
            ++total;
            hit += pred[i].indices[n] == gt[i].indices[n];
        }
    }
    if (total == 0) throw DataError("token_accuracy: no tokens");
    return static_cast<double>(hit) / static_cast<double>(total);
}

inline void write_metrics_csv(const MetricsReport& rep, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("eval: cannot open '" + path + "' for writing");
    out << "scope,count,mpjpe_mm,pa_mpjpe_mm,token_accuracy,config_hash,seed\n";
    out << std::setprecision(17);
    auto cell = [&](double v) -> std::string {
        if (std::isnan(v)) return "";
        std::ostringstream os;
        os << std::setprecision(17) << v;
        return os.str();
    };
    out << "overall," << rep.count << "," << cell(rep.mpjpe_mm) << "," << cell(rep.pa_mpjpe_mm) << ","
        << cell(rep.token_accuracy) << "," << rep.config_hash << "," << rep.seed << "\n";
    for (std::size_t i = 0; i < rep.buckets.size(); ++i) {
        const auto& b = rep.buckets[i];
        out << "occ_" << b.lo << "_" << std::min(b.hi, 1.0) << "," << b.count << ","
            << (b.count ? cell(b.mpjpe_mm) : "") << "," << (b.count ? cell(b.pa_mpjpe_mm) : "") << ",,"
            << rep.config_hash << "," << rep.seed << "\n";
    }
}

inline std::string format_metrics(const MetricsReport& rep) {
    std::ostringstream os;
    os << "split=" << rep.split << " samples=" << rep.count << "\n";
    os << std::fixed << std::setprecision(3);
    os << "  MPJPE    " << rep.mpjpe_mm << " mm\n";
    os << "  PA-MPJPE " << rep.pa_mpjpe_mm << " mm\n";
    if (!std::isnan(rep.token_accuracy))
        os << "  token accuracy " << std::setprecision(4) << rep.token_accuracy << "\n";
    for (const auto& b : rep.buckets) {
        os << "  occluded " << std::setprecision(2) << b.lo << "-" << std::min(b.hi, 1.0) << ": n=" << b.count;
        if (b.count > 0)
            os << "  MPJPE " << std::setprecision(3) << b.mpjpe_mm << " mm, PA-MPJPE " << b.pa_mpjpe_mm
               << " mm";
        os << "\n";
    }
    os << "  config_hash=" << rep.config_hash << " seed=" << rep.seed << "\n";
    return os.str();
}

}  // namespace didipose
