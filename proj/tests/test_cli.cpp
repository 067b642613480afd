#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "didipose/checkpoint.hpp"
#include "didipose/codec.hpp"
#include "didipose/config.hpp"
#include "didipose/dataset.hpp"
#include "didipose/evalreport.hpp"
#include "didipose/metrics.hpp"

using namespace didipose;
namespace fs = std::filesystem;

namespace {

const std::string kCli = DIDIPOSE_CLI_PATH;

struct Run {
    int code;
    std::string err;
};

struct Workdir {
    fs::path dir;
    Workdir() {
        dir = fs::temp_directory_path() / ("didipose_cli_" + std::to_string(::getpid()));
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    ~Workdir() { fs::remove_all(dir); }
    std::string p(const std::string& name) const { return (dir / name).string(); }
};

Run run_cli(const Workdir& wd, const std::string& args) {
    const std::string err_file = wd.p("stderr.txt");
    const std::string cmd = kCli + " " + args + " >" + wd.p("stdout.txt") + " 2>" + err_file;
    const int status = std::system(cmd.c_str());
    Run r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream in(err_file);
    std::stringstream ss;
    ss << in.rdbuf();
    r.err = ss.str();
    return r;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

bool same_bytes(const std::string& a, const std::string& b) { return slurp(a) == slurp(b); }

const char* kTinyConfig = R"({
  "version": 1,
  "seed": 7,
  "data": {"train_count": 10, "val_count": 5, "test_count": 4,
           "occluder": {"min_size": 100.0, "max_size": 300.0, "margin": 50.0}},
  "codec": {"tokens": 6, "levels": [3, 3], "local_joints": 3,
            "enc_width": 24, "enc_blocks": 1, "dec_width": 12, "dec_blocks": 1,
            "train": {"epochs": 2, "batch": 8}},
  "diffusion": {"steps": 6, "gamma_bar_end": 0.9,
                "denoiser": {"width": 16, "blocks": 1, "heads": 2, "ffn_hidden": 32,
                             "cond_tokens": 2, "obs_hidden": 16},
                "train": {"steps": 10, "batch": 4}},
  "infer": {"steps_used": 6},
  "ablate": {"seeds": [1], "variants": ["occlude", "replace", "both"]}
})";

void write_config(const Workdir& wd, const std::string& name, const std::string& body) {
    std::ofstream out(wd.p(name));
    out << body;
}

}  // namespace

TEST_CASE("gen-data is deterministic and honors counts") {
    Workdir wd;
    write_config(wd, "cfg.json", kTinyConfig);
    REQUIRE(run_cli(wd, "gen-data --config " + wd.p("cfg.json") + " --out " + wd.p("d1")).code == 0);
    REQUIRE(run_cli(wd, "gen-data --config " + wd.p("cfg.json") + " --out " + wd.p("d2")).code == 0);
    for (const char* split : {"train.jsonl", "val.jsonl", "test.jsonl"})
        REQUIRE(same_bytes(wd.p("d1") + "/" + split, wd.p("d2") + "/" + split));
    const auto train = read_dataset(wd.p("d1") + "/train.jsonl");
    REQUIRE(train.samples.size() == 10);
    REQUIRE(train.split == "train");
    REQUIRE(!train.config_hash.empty());
    const auto val = read_dataset(wd.p("d1") + "/val.jsonl");
    REQUIRE(val.samples.size() == 5);
    // splits use disjoint seed streams
    REQUIRE(train.seed != val.seed);

    SECTION("--seed flag changes the corpus") {
        REQUIRE(run_cli(wd, "gen-data --config " + wd.p("cfg.json") + " --seed 8 --out " + wd.p("d3")).code ==
                0);
        REQUIRE(!same_bytes(wd.p("d1") + "/train.jsonl", wd.p("d3") + "/train.jsonl"));
    }
}

TEST_CASE("gen-data with zero counts writes valid empty splits") {
    Workdir wd;
    std::string cfg = kTinyConfig;
    cfg.replace(cfg.find("\"train_count\": 10"), 17, "\"train_count\": 0");
    write_config(wd, "cfg.json", cfg);
    REQUIRE(run_cli(wd, "gen-data --config " + wd.p("cfg.json") + " --out " + wd.p("d")).code == 0);
    const auto ds = read_dataset(wd.p("d") + "/train.jsonl");
    REQUIRE(ds.samples.empty());
}

TEST_CASE("unknown config keys are rejected with exit code 2 naming the key") {
    Workdir wd;
    std::string cfg = kTinyConfig;
    cfg.replace(cfg.find("\"seed\": 7"), 9, "\"sede\": 7");
    write_config(wd, "cfg.json", cfg);
    const Run r = run_cli(wd, "gen-data --config " + wd.p("cfg.json") + " --out " + wd.p("d"));
    REQUIRE(r.code == 2);
    REQUIRE(r.err.find("sede") != std::string::npos);
}

TEST_CASE("config file errors map to exit code 2") {
    Workdir wd;
    write_config(wd, "broken.json", "{ not json");
    REQUIRE(run_cli(wd, "gen-data --config " + wd.p("broken.json") + " --out " + wd.p("d")).code == 2);
    REQUIRE(run_cli(wd, "gen-data --config " + wd.p("missing.json") + " --out " + wd.p("d")).code == 2);
    SECTION("CLI parse errors also exit 2") {
        REQUIRE(run_cli(wd, "gen-data --no-such-flag").code == 2);
        REQUIRE(run_cli(wd, "frobnicate").code == 2);
    }
}

TEST_CASE("two-stage training, inference, and eval run end to end") {
    Workdir wd;
    write_config(wd, "cfg.json", kTinyConfig);
    REQUIRE(run_cli(wd, "gen-data --config " + wd.p("cfg.json") + " --out " + wd.p("d")).code == 0);

    SECTION("diffusion training without a codec checkpoint is a dependency error") {
        const Run r = run_cli(wd, "train-diffusion --config " + wd.p("cfg.json") + " --data " +
                                      wd.p("d/train.jsonl") + " --codec " + wd.p("nope.ckpt") + " --out " +
                                      wd.p("den.ckpt"));
        REQUIRE(r.code == 3);
    }

    REQUIRE(run_cli(wd, "train-codec --config " + wd.p("cfg.json") + " --data " + wd.p("d/train.jsonl") +
                            " --out " + wd.p("codec.ckpt"))
                .code == 0);
    REQUIRE(fs::exists(wd.p("codec.ckpt")));
    REQUIRE(fs::exists(wd.p("codec.ckpt.log.csv")));
    REQUIRE(fs::exists(wd.p("codec.ckpt.loss.svg")));
    {
        std::ifstream csv(wd.p("codec.ckpt.log.csv"));
        std::string header;
        std::getline(csv, header);
        REQUIRE(header == "epoch,loss,codebook_usage");
    }

    SECTION("resume continues the optimizer step counter") {
        const auto steps_before = load_checkpoint(wd.p("codec.ckpt")).meta.at("optimizer_steps").get<long>();
        REQUIRE(run_cli(wd, "train-codec --config " + wd.p("cfg.json") + " --data " + wd.p("d/train.jsonl") +
                                " --resume " + wd.p("codec.ckpt") + " --out " + wd.p("codec2.ckpt"))
                    .code == 0);
        const auto steps_after = load_checkpoint(wd.p("codec2.ckpt")).meta.at("optimizer_steps").get<long>();
        REQUIRE(steps_after == 2 * steps_before);
    }

    REQUIRE(run_cli(wd, "train-diffusion --config " + wd.p("cfg.json") + " --data " + wd.p("d/train.jsonl") +
                            " --codec " + wd.p("codec.ckpt") + " --out " + wd.p("den.ckpt"))
                .code == 0);
    {
        std::ifstream csv(wd.p("den.ckpt.log.csv"));
        std::string header;
        std::getline(csv, header);
        REQUIRE(header == "step,s_sampled,vlb,aux,total");  // pinned schema
        int rows = 0;
        std::string line;
        while (std::getline(csv, line))
            if (!line.empty()) ++rows;
        REQUIRE(rows == 10);
    }

    const std::string infer_cmd = "infer --config " + wd.p("cfg.json") + " --codec " + wd.p("codec.ckpt") +
                                  " --denoiser " + wd.p("den.ckpt") + " --data " + wd.p("d/val.jsonl");
    REQUIRE(run_cli(wd, infer_cmd + " --out " + wd.p("pred.jsonl") + " --tokens-out " + wd.p("pred.tok"))
                .code == 0);
    const auto pred = read_dataset(wd.p("pred.jsonl"));
    const auto gt = read_dataset(wd.p("d/val.jsonl"));
    REQUIRE(pred.samples.size() == gt.samples.size());  // one pose per observation
    REQUIRE(pred.config_hash == gt.config_hash);        // provenance copied through
    REQUIRE(read_tokens_file(wd.p("pred.tok")).size() == gt.samples.size());

    SECTION("inference is byte-deterministic for a fixed seed") {
        REQUIRE(run_cli(wd, infer_cmd + " --out " + wd.p("pred2.jsonl")).code == 0);
        REQUIRE(same_bytes(wd.p("pred.jsonl"), wd.p("pred2.jsonl")));
    }
    SECTION("reduced-step inference runs") {
        REQUIRE(run_cli(wd, infer_cmd + " --steps-used 3 --out " + wd.p("pred3.jsonl")).code == 0);
        REQUIRE(read_dataset(wd.p("pred3.jsonl")).samples.size() == gt.samples.size());
    }

    REQUIRE(run_cli(wd, "eval --pred " + wd.p("pred.jsonl") + " --gt " + wd.p("d/val.jsonl") + " --out " +
                            wd.p("report.csv"))
                .code == 0);

    SECTION("eval of a file against itself reports zeros") {
        REQUIRE(run_cli(wd, "eval --pred " + wd.p("d/val.jsonl") + " --gt " + wd.p("d/val.jsonl") +
                                " --out " + wd.p("self.csv"))
                    .code == 0);
        std::ifstream csv(wd.p("self.csv"));
        std::string header, overall;
        std::getline(csv, header);
        REQUIRE(header == "scope,count,mpjpe_mm,pa_mpjpe_mm,token_accuracy,config_hash,seed");
        std::getline(csv, overall);
        REQUIRE(overall.rfind("overall,5,0,", 0) == 0);
    }
    SECTION("eval report equals direct metric composition") {
        const auto rep = evaluate_datasets(pred, gt);
        double direct = 0;
        for (std::size_t i = 0; i < gt.samples.size(); ++i)
            direct += mpjpe(pred.samples[i].pose, gt.samples[i].pose);
        direct /= static_cast<double>(gt.samples.size());
        REQUIRE(rep.mpjpe_mm == Catch::Approx(direct).margin(1e-12));
        int bucket_total = 0;
        for (const auto& b : rep.buckets) bucket_total += b.count;
        REQUIRE(bucket_total == rep.count);  // buckets partition the samples
        std::ifstream csv(wd.p("report.csv"));
        std::string header, overall;
        std::getline(csv, header);
        std::getline(csv, overall);
        std::stringstream ss(overall);
        std::string scope, count, mpjpe_cell;
        std::getline(ss, scope, ',');
        std::getline(ss, count, ',');
        std::getline(ss, mpjpe_cell, ',');
        REQUIRE(std::stod(mpjpe_cell) == Catch::Approx(rep.mpjpe_mm).epsilon(1e-12));
    }
    SECTION("eval refuses mismatched sample counts") {
        REQUIRE(run_cli(wd, "eval --pred " + wd.p("pred.jsonl") + " --gt " + wd.p("d/test.jsonl") +
                                " --out " + wd.p("bad.csv"))
                    .code == 3);
    }
    SECTION("eval refuses mismatched provenance hashes unless overridden") {
        std::string cfg = kTinyConfig;
        cfg.replace(cfg.find("\"seed\": 7"), 9, "\"seed\": 9");
        write_config(wd, "cfg9.json", cfg);
        REQUIRE(run_cli(wd, "gen-data --config " + wd.p("cfg9.json") + " --out " + wd.p("d9")).code == 0);
        const Run r = run_cli(wd, "eval --pred " + wd.p("d9/val.jsonl") + " --gt " + wd.p("d/val.jsonl") +
                                      " --out " + wd.p("bad.csv"));
        REQUIRE(r.code == 3);
        REQUIRE(r.err.find("hash") != std::string::npos);
        REQUIRE(run_cli(wd, "eval --pred " + wd.p("d9/val.jsonl") + " --gt " + wd.p("d/val.jsonl") +
                                " --allow-hash-mismatch --out " + wd.p("ok.csv"))
                    .code == 0);
    }
    SECTION("checkpoint/config hash mismatch is refused") {
        std::string cfg = kTinyConfig;
        cfg.replace(cfg.find("\"enc_width\": 24"), 15, "\"enc_width\": 36");
        write_config(wd, "cfg_wide.json", cfg);
        const Run r = run_cli(wd, "infer --config " + wd.p("cfg_wide.json") + " --codec " +
                                      wd.p("codec.ckpt") + " --denoiser " + wd.p("den.ckpt") + " --data " +
                                      wd.p("d/val.jsonl") + " --out " + wd.p("predw.jsonl"));
        REQUIRE(r.code == 3);
    }
}

TEST_CASE("training commands are byte-deterministic") {
    Workdir wd;
    write_config(wd, "cfg.json", kTinyConfig);
    REQUIRE(run_cli(wd, "gen-data --config " + wd.p("cfg.json") + " --out " + wd.p("d")).code == 0);
    for (int i = 1; i <= 2; ++i) {
        const std::string tag = std::to_string(i);
        REQUIRE(run_cli(wd, "train-codec --config " + wd.p("cfg.json") + " --data " + wd.p("d/train.jsonl") +
                                " --out " + wd.p("c" + tag + ".ckpt"))
                    .code == 0);
        REQUIRE(run_cli(wd, "train-diffusion --config " + wd.p("cfg.json") + " --data " +
                                wd.p("d/train.jsonl") + " --codec " + wd.p("c" + tag + ".ckpt") + " --out " +
                                wd.p("n" + tag + ".ckpt"))
                    .code == 0);
    }
    REQUIRE(same_bytes(wd.p("c1.ckpt"), wd.p("c2.ckpt")));
    REQUIRE(same_bytes(wd.p("c1.ckpt.log.csv"), wd.p("c2.ckpt.log.csv")));
    REQUIRE(same_bytes(wd.p("n1.ckpt"), wd.p("n2.ckpt")));
    REQUIRE(same_bytes(wd.p("n1.ckpt.log.csv"), wd.p("n2.ckpt.log.csv")));
}

TEST_CASE("ablate emits one row per variant/seed with the pinned schema") {
    Workdir wd;
    write_config(wd, "cfg.json", kTinyConfig);
    REQUIRE(run_cli(wd, "ablate --config " + wd.p("cfg.json") + " --out " + wd.p("ab")).code == 0);
    std::ifstream csv(wd.p("ab/ablate.csv"));
    std::string header;
    std::getline(csv, header);
    REQUIRE(header == "variant,MPJPE,PA-MPJPE,seed,config-hash");
    std::vector<std::string> rows;
    std::string line;
    while (std::getline(csv, line))
        if (!line.empty()) rows.push_back(line);
    REQUIRE(rows.size() == 3);  // three variants, one seed
    REQUIRE(rows[0].rfind("occlude,", 0) == 0);
    REQUIRE(rows[1].rfind("replace,", 0) == 0);
    REQUIRE(rows[2].rfind("both,", 0) == 0);

    // the replace variant never produced an Occ token
    std::ifstream occ(wd.p("ab/occ_stats_replace_seed1.csv"));
    std::string occ_header, occ_row;
    std::getline(occ, occ_header);
    std::getline(occ, occ_row);
    REQUIRE(occ_header == "tokens_seen,occ_tokens_seen");
    REQUIRE(occ_row.substr(occ_row.find(',') + 1) == "0");
    // while the occlude variant did
    std::ifstream occ2(wd.p("ab/occ_stats_occlude_seed1.csv"));
    std::getline(occ2, occ_header);
    std::getline(occ2, occ_row);
    REQUIRE(std::stol(occ_row.substr(occ_row.find(',') + 1)) > 0);
}
