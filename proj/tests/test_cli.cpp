#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "dskd/checkpoint.hpp"
#include "dskd/data_io.hpp"

using namespace dskd;
namespace fs = std::filesystem;

namespace {

const std::string kCli = DSKD_CLI_PATH;

int run_cli(const std::string& args, const fs::path& log) {
    const std::string cmd = kCli + " " + args + " >" + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

size_t count_lines(const fs::path& p) {
    std::ifstream f(p);
    size_t n = 0;
    std::string line;
    while (std::getline(f, line))
        if (!line.empty()) ++n;
    return n;
}

struct CliFixture {
    fs::path root;
    fs::path log;
    CliFixture() {
        root = fs::temp_directory_path() / "dskd_cli_test";
        fs::remove_all(root);
        fs::create_directories(root);
        log = root / "cli.log";
    }
};

}  // namespace

TEST_CASE("cli exit codes for usage and data errors") {
    CliFixture fx;
    // no subcommand
    CHECK(run_cli("", fx.log) == 2);
    // invalid epochs value
    CHECK(run_cli("train --data /nonexistent --category x --out " + (fx.root / "o").string() +
                      " --epochs 0",
                  fx.log) == 2);
    // unknown variant
    CHECK(run_cli("train --data /nonexistent --category x --out " + (fx.root / "o").string() +
                      " --variant Q-Q",
                  fx.log) == 2);
    // bad size value rejected by flag validation
    CHECK(run_cli("train --data /nonexistent --category x --out " + (fx.root / "o").string() +
                      " --size 100",
                  fx.log) == 2);
    // missing dataset directory -> data error
    CHECK(run_cli("train --data /nonexistent --category x --epochs 1 --out " +
                      (fx.root / "o").string(),
                  fx.log) == 3);
    // missing checkpoint -> data error
    CHECK(run_cli("eval --checkpoint /nonexistent.safetensors --data /tmp --category x --out " +
                      (fx.root / "o").string(),
                  fx.log) == 3);
}

TEST_CASE("cli end-to-end: synth, train, eval, infer, maps override") {
    CliFixture fx;
    const std::string data = (fx.root / "data").string();
    const std::string run = (fx.root / "run").string();

    // synth writes a loadable layout
    REQUIRE(run_cli("synth --out " + data + " --seed 5 --n-train 8 --n-test 6 --defect-rate 0.5"
                    " --size 64",
                    fx.log) == 0);
    DatasetSpec spec{data, "synthetic", "train", 64};
    CHECK(load_dataset(spec).size() == 8);

    // tiny training run
    REQUIRE(run_cli("--quiet train --data " + data +
                        " --category synthetic --size 64 --epochs 2 --batch-size 4 --seed 3"
                        " --out " + run,
                    fx.log) == 0);
    CHECK(fs::exists(run + "/checkpoint.safetensors"));
    CHECK(fs::exists(run + "/config_resolved.txt"));
    CHECK(count_lines(run + "/loss.csv") == 3);  // header + 2 epochs

    // resolved config materializes defaults
    const std::string cfg_text = slurp(run + "/config_resolved.txt");
    CHECK(cfg_text.find("train.learning_rate = 0.001") != std::string::npos);
    CHECK(cfg_text.find("variant = DS") != std::string::npos);
    CHECK(cfg_text.find("sigma = 4") != std::string::npos);

    // eval produces metric and score tables plus heatmaps
    const std::string evald = (fx.root / "eval").string();
    REQUIRE(run_cli("eval --checkpoint " + run + "/checkpoint.safetensors --data " + data +
                        " --category synthetic --out " + evald,
                    fx.log) == 0);
    CHECK(fs::exists(evald + "/metrics.csv"));
    CHECK(count_lines(evald + "/scores.csv") == 7);  // header + 6 samples
    size_t heatmaps = 0;
    for (const auto& e : fs::directory_iterator(evald + "/heatmaps")) (void)e, ++heatmaps;
    CHECK(heatmaps == 6);
    const std::string metrics = slurp(evald + "/metrics.csv");
    CHECK(metrics.find("synthetic,") != std::string::npos);

    // eval with a single-map override
    const std::string evalm = (fx.root / "eval_m2").string();
    CHECK(run_cli("eval --checkpoint " + run + "/checkpoint.safetensors --data " + data +
                      " --category synthetic --maps M2 --no-heatmaps --out " + evalm,
                  fx.log) == 0);
    CHECK(fs::exists(evalm + "/metrics.csv"));

    // size mismatch rejected
    CHECK(run_cli("eval --checkpoint " + run + "/checkpoint.safetensors --data " + data +
                      " --category synthetic --size 128 --out " + evald,
                  fx.log) == 2);

    // infer scores a raw image file
    const std::string img = data + "/synthetic/test/good/005.png";
    REQUIRE(run_cli("infer --checkpoint " + run + "/checkpoint.safetensors " + img + " --out " +
                        (fx.root / "inf").string(),
                    fx.log) == 0);
    const std::string out = slurp(fx.log);
    CHECK(out.find("sample_id,raw_score,normalized_score,is_anomalous") != std::string::npos);
    CHECK(out.find("005,") != std::string::npos);
    CHECK(fs::exists((fx.root / "inf" / "005_amap.png")));
}

TEST_CASE("cli run is reproducible from its resolved config snapshot") {
    CliFixture fx;
    const std::string data = (fx.root / "data").string();
    REQUIRE(run_cli("synth --out " + data + " --seed 9 --n-train 6 --n-test 4 --size 64",
                    fx.log) == 0);
    const std::string run1 = (fx.root / "r1").string();
    REQUIRE(run_cli("--quiet train --data " + data +
                        " --category synthetic --size 64 --epochs 2 --batch-size 2 --seed 11"
                        " --out " + run1,
                    fx.log) == 0);
    // replay purely from the snapshot (only the output directory overridden)
    const std::string run2 = (fx.root / "r2").string();
    REQUIRE(run_cli("--quiet train --config " + run1 + "/config_resolved.txt --out " + run2,
                    fx.log) == 0);

    auto eval_img_auroc = [&](const std::string& run, const std::string& out) {
        REQUIRE(run_cli("eval --checkpoint " + run + "/checkpoint.safetensors --data " + data +
                            " --category synthetic --no-heatmaps --out " + out,
                        fx.log) == 0);
        const std::string text = slurp(out + "/metrics.csv");
        const size_t comma = text.find(',', text.find('\n'));
        return std::stod(text.substr(comma + 1));
    };
    const double a = eval_img_auroc(run1, (fx.root / "e1").string());
    const double b = eval_img_auroc(run2, (fx.root / "e2").string());
    CHECK(std::fabs(a - b) < 1e-3);
}

TEST_CASE("cli variant training drops unused parameter groups") {
    CliFixture fx;
    const std::string data = (fx.root / "data").string();
    REQUIRE(run_cli("synth --out " + data + " --seed 6 --n-train 4 --n-test 2 --size 64",
                    fx.log) == 0);
    const std::string run = (fx.root / "te_run").string();
    REQUIRE(run_cli("--quiet train --data " + data +
                        " --category synthetic --size 64 --epochs 1 --batch-size 2"
                        " --variant T-E --out " + run,
                    fx.log) == 0);
    TensorFile f = TensorFile::load(run + "/checkpoint.safetensors");
    bool any_decoder = false, any_dfe = false, any_encoder = false;
    for (const auto& [k, t] : f.tensors) {
        any_decoder |= k.rfind("decoder.", 0) == 0;
        any_dfe |= k.rfind("dfe.", 0) == 0;
        any_encoder |= k.rfind("encoder.", 0) == 0;
    }
    CHECK(any_encoder);
    CHECK_FALSE(any_decoder);
    CHECK_FALSE(any_dfe);
}
