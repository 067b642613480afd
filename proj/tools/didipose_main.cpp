// didipose command-line driver: data generation, two-stage training,
// inference, evaluation, and the ablation harness.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "didipose/didipose.hpp"

namespace fs = std::filesystem;
using namespace didipose;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitDivergence = 4;

struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<int> steps_used;
    std::optional<std::string> matrix;
    std::optional<double> occ_rate;
};

RunConfig load_effective_config(const std::string& path, const Overrides& ov) {
    RunConfig cfg = load_config(path);
    if (ov.seed) cfg.seed = *ov.seed;
    if (ov.matrix) cfg.matrix = *ov.matrix;
    if (ov.occ_rate) cfg.gamma_bar_end = *ov.occ_rate;
    if (ov.steps_used) cfg.infer_steps_used = *ov.steps_used;
    cfg.validate();
    return cfg;
}

// ---- checkpoint plumbing ----

nlohmann::json codec_meta(const RunConfig& cfg, std::int64_t opt_steps) {
    nlohmann::json m;
    m["kind"] = "codec";
    m["config_hash"] = codec_hash(cfg);
    m["seed"] = cfg.seed;
    m["optimizer_steps"] = opt_steps;
    m["codec"] = {{"joints", cfg.codec.joints},       {"tokens", cfg.codec.tokens},
                  {"levels", cfg.codec.levels},       {"local_joints", cfg.codec.local_joints},
                  {"enc_width", cfg.codec.enc_width}, {"enc_blocks", cfg.codec.enc_blocks},
                  {"dec_width", cfg.codec.dec_width}, {"dec_blocks", cfg.codec.dec_blocks},
                  {"mlp_ratio", cfg.codec.mlp_ratio}, {"input_scale", cfg.codec.input_scale}};
    return m;
}

nlohmann::json denoiser_meta(const RunConfig& cfg, std::int64_t opt_steps) {
    nlohmann::json m;
    m["kind"] = "denoiser";
    m["config_hash"] = diffusion_hash(cfg);
    m["seed"] = cfg.seed;
    m["optimizer_steps"] = opt_steps;
    const auto [a_end, g_end] = cfg.schedule_endpoints();
    m["schedule"] = {{"steps", cfg.diffusion_steps}, {"alpha_bar_end", a_end}, {"gamma_bar_end", g_end}};
    return m;
}

void save_model_checkpoint(const std::string& path, const nlohmann::json& meta,
                           std::vector<std::pair<std::string, const Tensor*>> named, AdamW* opt) {
    if (opt) {
        auto& m = opt->first_moments();
        auto& v = opt->second_moments();
        const std::size_t n_params = named.size();
        for (std::size_t i = 0; i < n_params && i < m.size(); ++i) {
            named.emplace_back("adamw.m." + named[i].first, &m[i]);
            named.emplace_back("adamw.v." + named[i].first, &v[i]);
        }
    }
    save_checkpoint(path, meta, named);
}

void check_hash(const Checkpoint& ck, const std::string& expected, const std::string& what,
                bool allow_mismatch) {
    const std::string got = ck.meta.value("config_hash", "");
    if (got != expected) {
        const std::string msg = what + " checkpoint was built for config hash " + got +
                                " but the current config hashes to " + expected;
        if (!allow_mismatch) throw DataError(msg + " (pass --allow-hash-mismatch to override)");
        std::cerr << "warning: " << msg << "\n";
    }
}

// Restores params (and optionally optimizer state) from a checkpoint, shape-checked.
template <typename Params>
std::int64_t restore_params(Params& params, const Checkpoint& ck, AdamW* opt) {
    std::vector<Tensor> m, v;
    params.visit([&](const std::string& name, Tensor& t) {
        const Tensor& src = ck.get(name);
        if (!src.same_shape(t))
            throw DataError("checkpoint: tensor '" + name + "' has shape " + shape_str(src.shape()) +
                            ", expected " + shape_str(t.shape()));
        t = src.clone();
        if (opt && ck.has("adamw.m." + name)) {
            m.push_back(ck.get("adamw.m." + name).clone());
            v.push_back(ck.get("adamw.v." + name).clone());
        }
    });
    const std::int64_t steps = ck.meta.value("optimizer_steps", 0);
    if (opt && !m.empty()) opt->restore(std::move(m), std::move(v), steps);
    return steps;
}

void write_loss_plot(const std::string& path, const std::string& title,
                     const std::vector<std::pair<double, double>>& pts) {
    write_line_plot_svg(path, title, "step", "loss", {PlotSeries{"loss", pts}});
}

// ---- subcommands ----

int cmd_gen_data(const std::string& config_path, const std::string& out_dir, const Overrides& ov) {
    const RunConfig cfg = load_effective_config(config_path, ov);
    fs::create_directories(out_dir);
    const auto skel = cfg.skeleton();
    const struct {
        const char* name;
        int count;
        std::uint64_t stream;
    } splits[] = {{"train", cfg.train_count, 1}, {"val", cfg.val_count, 2}, {"test", cfg.test_count, 3}};
    for (const auto& sp : splits) {
        PoseDataset ds = generate_dataset(skel, cfg.occluder, sp.count, mix64(cfg.seed, sp.stream), sp.name);
        ds.config_hash = data_hash(cfg);
        write_dataset(ds, (fs::path(out_dir) / (std::string(sp.name) + ".jsonl")).string());
    }
    std::cout << "wrote " << cfg.train_count << "/" << cfg.val_count << "/" << cfg.test_count
              << " train/val/test samples to " << out_dir << "\n";
    return kExitOk;
}

int cmd_train_codec(const std::string& config_path, const std::string& data_path, const std::string& out_path,
                    const std::string& resume_path, const Overrides& ov) {
    const RunConfig cfg = load_effective_config(config_path, ov);
    const PoseDataset ds = read_dataset(data_path);
    CodecParams params = init_codec(cfg.codec, Rng(mix64(cfg.seed, 0xC0)));

    CodecTrainConfig tcfg = cfg.codec_train;
    tcfg.seed = cfg.seed;
    AdamW opt(tcfg.adamw);
    if (!resume_path.empty()) {
        const Checkpoint ck = load_checkpoint(resume_path);
        check_hash(ck, codec_hash(cfg), "codec", false);
        restore_params(params, ck, &opt);
    }

    const CodecTrainLog log = train_codec_with(ds, params, cfg.codec, tcfg, opt);

    save_model_checkpoint(out_path, codec_meta(cfg, opt.step_count()), params.named_tensors(), &opt);
    std::ofstream csv(out_path + ".log.csv", std::ios::binary);
    csv << "epoch,loss,codebook_usage\n";
    std::vector<std::pair<double, double>> pts;
    for (const auto& e : log.epochs) {
        csv << e.epoch << "," << std::setprecision(17) << e.loss << "," << e.usage << "\n";
        pts.emplace_back(e.epoch, e.loss);
    }
    write_loss_plot(out_path + ".loss.svg", "codec training loss", pts);
    std::cout << "codec checkpoint written to " << out_path << " (optimizer steps " << opt.step_count()
              << ")\n";
    return kExitOk;
}

int cmd_train_diffusion(const std::string& config_path, const std::string& data_path,
                        const std::string& codec_path, const std::string& out_path,
                        const std::string& resume_path, bool allow_mismatch, const Overrides& ov) {
    const RunConfig cfg = load_effective_config(config_path, ov);
    const PoseDataset ds = read_dataset(data_path);
    if (!fs::exists(codec_path))
        throw DataError("train-diffusion: codec checkpoint '" + codec_path +
                        "' not found; train the codec first");
    const Checkpoint codec_ck = load_checkpoint(codec_path);
    check_hash(codec_ck, codec_hash(cfg), "codec", allow_mismatch);
    CodecParams codec_params = init_codec(cfg.codec, Rng(0));
    restore_params(codec_params, codec_ck, nullptr);  // frozen

    DenoiserParams dp = init_denoiser(cfg.denoiser, Rng(mix64(cfg.seed, 0xD0)));
    DiffusionTrainConfig tcfg = cfg.diffusion_train;
    tcfg.seed = cfg.seed;
    const TransitionParams tp = cfg.transition();

    AdamW opt(tcfg.adamw);
    std::int64_t resume_steps = 0;
    if (!resume_path.empty()) {
        const Checkpoint ck = load_checkpoint(resume_path);
        check_hash(ck, diffusion_hash(cfg), "denoiser", allow_mismatch);
        resume_steps = restore_params(dp, ck, &opt);
    }

    DiffusionTrainConfig inner = tcfg;
    if (resume_steps > 0) inner.seed = mix64(tcfg.seed, static_cast<std::uint64_t>(resume_steps));
    const DiffusionTrainLog log =
        train_diffusion_with(ds, codec_params, cfg.codec, dp, cfg.denoiser, tp, inner, opt);

    save_model_checkpoint(out_path, denoiser_meta(cfg, opt.step_count()), dp.named_tensors(), &opt);
    std::ofstream csv(out_path + ".log.csv", std::ios::binary);
    csv << "step,s_sampled,vlb,aux,total\n";
    std::vector<std::pair<double, double>> pts;
    for (const auto& r : log.rows) {
        csv << r.step << "," << std::setprecision(17) << r.s_mean << "," << r.vlb << "," << r.aux << ","
            << r.total << "\n";
        pts.emplace_back(r.step, r.total);
    }
    write_loss_plot(out_path + ".loss.svg", "diffusion training loss", pts);
    std::ofstream hist(out_path + ".s_hist.csv", std::ios::binary);
    hist << "s,count\n";
    for (std::size_t s = 1; s < log.s_histogram.size(); ++s) hist << s << "," << log.s_histogram[s] << "\n";
    std::cout << "denoiser checkpoint written to " << out_path << " (optimizer steps " << opt.step_count()
              << ", mean prior KL " << log.mean_prior_kl << ")\n";
    return kExitOk;
}

int cmd_infer(const std::string& config_path, const std::string& codec_path, const std::string& denoiser_path,
              const std::string& data_path, const std::string& out_path, const std::string& tokens_out,
              bool allow_mismatch, const Overrides& ov) {
    const RunConfig cfg = load_effective_config(config_path, ov);
    const PoseDataset input = read_dataset(data_path);

    if (!fs::exists(codec_path)) throw DataError("infer: codec checkpoint '" + codec_path + "' not found");
    if (!fs::exists(denoiser_path))
        throw DataError("infer: denoiser checkpoint '" + denoiser_path + "' not found");
    const Checkpoint codec_ck = load_checkpoint(codec_path);
    const Checkpoint den_ck = load_checkpoint(denoiser_path);
    check_hash(codec_ck, codec_hash(cfg), "codec", allow_mismatch);
    check_hash(den_ck, diffusion_hash(cfg), "denoiser", allow_mismatch);
    CodecParams codec_params = init_codec(cfg.codec, Rng(0));
    restore_params(codec_params, codec_ck, nullptr);
    DenoiserParams dp = init_denoiser(cfg.denoiser, Rng(0));
    restore_params(dp, den_ck, nullptr);

    const TransitionParams tp = cfg.transition();
    const InitMode init = parse_init_mode(cfg.infer_init_mode);
    const Rng base(mix64(cfg.seed, 0x1F));

    PoseDataset out = input;
    out.split = input.split;
    std::vector<TokenSequence> tokens;
    tokens.reserve(input.samples.size());
    for (std::size_t i = 0; i < input.samples.size(); ++i) {
        Rng rng = base.fork(i);
        auto r = infer(input.samples[i].obs, dp, cfg.denoiser, tp, codec_params, cfg.codec,
                       cfg.infer_steps_used, init, rng);
        out.samples[i].pose = r.pose;
        tokens.push_back(std::move(r.tokens));
    }
    write_dataset(out, out_path);
    if (!tokens_out.empty()) write_tokens_file(tokens, tokens_out);
    std::cout << "wrote " << out.samples.size() << " predicted poses to " << out_path << "\n";
    return kExitOk;
}

int cmd_eval(const std::string& pred_path, const std::string& gt_path, const std::string& out_path,
             const std::string& pred_tokens, const std::string& gt_tokens, bool allow_mismatch) {
    const PoseDataset pred = read_dataset(pred_path);
    const PoseDataset gt = read_dataset(gt_path);
    if (!same_skeleton(pred.skeleton, gt.skeleton))
        throw DataError("eval: prediction and ground truth use different skeletons");
    if (!pred.config_hash.empty() && !gt.config_hash.empty() && pred.config_hash != gt.config_hash) {
        const std::string msg = "eval: config hash mismatch (" + pred.config_hash + " vs " + gt.config_hash + ")";
        if (!allow_mismatch) throw DataError(msg + " (pass --allow-hash-mismatch to override)");
        std::cerr << "warning: " << msg << "\n";
    }
    MetricsReport rep = evaluate_datasets(pred, gt);
    rep.config_hash = gt.config_hash;
    if (!pred_tokens.empty() && !gt_tokens.empty())
        rep.token_accuracy = token_accuracy(read_tokens_file(pred_tokens), read_tokens_file(gt_tokens));
    write_metrics_csv(rep, out_path);
    std::vector<std::pair<double, double>> pts;
    for (const auto& b : rep.buckets)
        if (b.count > 0) pts.emplace_back((b.lo + std::min(b.hi, 1.0)) / 2, b.mpjpe_mm);
    if (pts.size() >= 2)
        write_line_plot_svg(out_path + ".svg", "error vs occlusion", "occluded fraction", "MPJPE (mm)",
                            {PlotSeries{"MPJPE", pts}});
    std::cout << format_metrics(rep);
    return kExitOk;
}

int cmd_ablate(const std::string& config_path, const std::string& out_dir, const Overrides& ov) {
    const RunConfig base_cfg = load_effective_config(config_path, ov);
    fs::create_directories(out_dir);
    const auto skel = base_cfg.skeleton();

    PoseDataset train_ds =
        generate_dataset(skel, base_cfg.occluder, base_cfg.train_count, mix64(base_cfg.seed, 1), "train");
    PoseDataset val_ds =
        generate_dataset(skel, base_cfg.occluder, base_cfg.val_count, mix64(base_cfg.seed, 2), "val");
    train_ds.config_hash = data_hash(base_cfg);
    val_ds.config_hash = data_hash(base_cfg);

    // one shared codec for every variant
    CodecParams codec_params = init_codec(base_cfg.codec, Rng(mix64(base_cfg.seed, 0xC0)));
    CodecTrainConfig ctc = base_cfg.codec_train;
    ctc.seed = base_cfg.seed;
    train_codec(train_ds, codec_params, base_cfg.codec, ctc);

    std::ofstream csv((fs::path(out_dir) / "ablate.csv").string(), std::ios::binary);
    csv << "variant,MPJPE,PA-MPJPE,seed,config-hash\n";

    for (const auto& variant : base_cfg.ablate_variants) {
        for (const auto seed : base_cfg.ablate_seeds) {
            RunConfig cfg = base_cfg;
            cfg.matrix = variant;
            cfg.seed = seed;
            cfg.validate();
            const TransitionParams tp = cfg.transition();

            DenoiserParams dp = init_denoiser(cfg.denoiser, Rng(mix64(seed, 0xD0)));
            DiffusionTrainConfig tcfg = cfg.diffusion_train;
            tcfg.seed = seed;
            const auto log =
                train_diffusion(train_ds, codec_params, cfg.codec, dp, cfg.denoiser, tp, tcfg);

            std::ofstream occ((fs::path(out_dir) /
                               ("occ_stats_" + variant + "_seed" + std::to_string(seed) + ".csv"))
                                  .string(),
                              std::ios::binary);
            occ << "tokens_seen,occ_tokens_seen\n"
                << log.tokens_seen << "," << log.occ_tokens_seen << "\n";

            const Rng rng_base(mix64(seed, 0x1F));
            double sum_mpjpe = 0, sum_pa = 0;
            // a never-occluding schedule cannot start from all-Occ
            const InitMode init = tp.schedule.cum(tp.steps()).gamma_bar > 0.0
                                      ? parse_init_mode(cfg.infer_init_mode)
                                      : InitMode::PriorSample;
            const int steps_used = std::min(cfg.infer_steps_used, cfg.diffusion_steps);
            for (std::size_t i = 0; i < val_ds.samples.size(); ++i) {
                Rng rng = rng_base.fork(i);
                auto r = infer(val_ds.samples[i].obs, dp, cfg.denoiser, tp, codec_params, cfg.codec,
                               steps_used, init, rng);
                sum_mpjpe += mpjpe(r.pose, val_ds.samples[i].pose);
                sum_pa += pa_mpjpe(r.pose, val_ds.samples[i].pose);
            }
            const double n = static_cast<double>(val_ds.samples.size());
            csv << variant << "," << std::setprecision(17) << sum_mpjpe / n << "," << sum_pa / n << ","
                << seed << "," << diffusion_hash(cfg) << "\n";
            std::cout << "ablate " << variant << " seed " << seed << ": MPJPE " << std::setprecision(6)
                      << sum_mpjpe / n << " mm\n";
        }
    }
    std::cout << "ablation table written to " << (fs::path(out_dir) / "ablate.csv").string() << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"didipose: FSQ pose codec + occlude-and-replace discrete diffusion on a synthetic skeleton corpus"};
    app.require_subcommand(1);

    Overrides ov;
    std::string config_path, data_path, out_path, codec_path, denoiser_path, resume_path;
    std::string pred_path, gt_path, pred_tokens, gt_tokens, tokens_out;
    bool allow_mismatch = false;

    auto add_common = [&](CLI::App* cmd, bool with_config = true) {
        if (with_config) cmd->add_option("--config", config_path, "JSON config file")->required();
        cmd->add_option("--seed", ov.seed, "override config seed");
    };

    auto* gen = app.add_subcommand("gen-data", "generate train/val/test splits");
    add_common(gen);
    gen->add_option("--out", out_path, "output directory")->required();

    auto* tc = app.add_subcommand("train-codec", "train the pose codec (stage 1)");
    add_common(tc);
    tc->add_option("--data", data_path, "training dataset file")->required();
    tc->add_option("--out", out_path, "output checkpoint path")->required();
    tc->add_option("--resume", resume_path, "resume from checkpoint");

    auto* td = app.add_subcommand("train-diffusion", "train the pose denoiser (stage 2)");
    add_common(td);
    td->add_option("--data", data_path, "training dataset file")->required();
    td->add_option("--codec", codec_path, "frozen codec checkpoint")->required();
    td->add_option("--out", out_path, "output checkpoint path")->required();
    td->add_option("--resume", resume_path, "resume from checkpoint");
    td->add_option("--matrix", ov.matrix, "transition matrix variant: occlude|replace|both");
    td->add_option("--occ-rate", ov.occ_rate, "final occlude rate gamma_bar_S");
    td->add_flag("--allow-hash-mismatch", allow_mismatch, "tolerate checkpoint/config hash mismatch");

    auto* inf = app.add_subcommand("infer", "recover 3D poses from observations");
    add_common(inf);
    inf->add_option("--codec", codec_path, "codec checkpoint")->required();
    inf->add_option("--denoiser", denoiser_path, "denoiser checkpoint")->required();
    inf->add_option("--data", data_path, "observations (dataset file)")->required();
    inf->add_option("--out", out_path, "output predictions file")->required();
    inf->add_option("--steps-used", ov.steps_used, "reverse steps to run (<= S)");
    inf->add_option("--tokens-out", tokens_out, "also write recovered token sequences");
    inf->add_option("--matrix", ov.matrix, "transition matrix variant: occlude|replace|both");
    inf->add_option("--occ-rate", ov.occ_rate, "final occlude rate gamma_bar_S");
    inf->add_flag("--allow-hash-mismatch", allow_mismatch, "tolerate checkpoint/config hash mismatch");

    auto* ev = app.add_subcommand("eval", "score predictions against ground truth");
    ev->add_option("--pred", pred_path, "predictions file")->required();
    ev->add_option("--gt", gt_path, "ground truth file")->required();
    ev->add_option("--out", out_path, "metrics CSV path")->required();
    ev->add_option("--pred-tokens", pred_tokens, "predicted token sequences");
    ev->add_option("--gt-tokens", gt_tokens, "reference token sequences");
    ev->add_flag("--allow-hash-mismatch", allow_mismatch, "tolerate provenance hash mismatch");

    auto* ab = app.add_subcommand("ablate", "transition-matrix ablation harness");
    add_common(ab);
    ab->add_option("--out", out_path, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitConfig;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(config_path, out_path, ov);
        if (tc->parsed()) return cmd_train_codec(config_path, data_path, out_path, resume_path, ov);
        if (td->parsed())
            return cmd_train_diffusion(config_path, data_path, codec_path, out_path, resume_path,
                                       allow_mismatch, ov);
        if (inf->parsed())
            return cmd_infer(config_path, codec_path, denoiser_path, data_path, out_path, tokens_out,
                             allow_mismatch, ov);
        if (ev->parsed()) return cmd_eval(pred_path, gt_path, out_path, pred_tokens, gt_tokens, allow_mismatch);
        if (ab->parsed()) return cmd_ablate(config_path, out_path, ov);
    } catch (const DivergenceError& e) {
        std::cerr << "divergence error: " << e.what() << "\n";
        return kExitDivergence;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    }
    return kExitOk;
}
