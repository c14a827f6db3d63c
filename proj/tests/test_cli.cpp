#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "mdba/mdba.hpp"

using namespace mdba;
namespace fs = std::filesystem;

namespace {

std::string cli_bin() {
    const char* p = std::getenv("MDBA_CLI_BIN");
    REQUIRE(p != nullptr);
    return p;
}

int run_cli(const std::string& args) {
    std::string cmd = cli_bin() + " " + args + " >/dev/null 2>&1";
    int rc = std::system(cmd.c_str());
    return WEXITSTATUS(rc);
}

fs::path temp_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() / ("mdba_cli_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return std::string((std::istreambuf_iterator<char>(in)), {});
}

}  // namespace

TEST_CASE("cli: phantom generates a loadable dataset, deterministically") {
    auto d1 = temp_dir("ph1");
    auto d2 = temp_dir("ph2");
    std::string args = "--count 2 --seed 5 --shape 28 --scars 3 --noise 4";
    REQUIRE(run_cli("phantom --out " + d1.string() + " " + args) == 0);
    REQUIRE(run_cli("phantom --out " + d2.string() + " " + args) == 0);

    DatasetManifest m = load_manifest((d1 / "manifest.json").string());
    REQUIRE(m.entries.size() == 2);
    for (const auto& e : m.entries) {
        REQUIRE(e.split == Split::train);
        auto [vol, lab] = load_case(e.image, e.label, e.case_id);
        REQUIRE(lab.has_value());
    }
    REQUIRE(fs::exists(d1 / "resolved_config.json"));
    // same seed, different directory: byte-identical volumes
    REQUIRE(slurp(d1 / "phantom_000_img.nii.gz") == slurp(d2 / "phantom_000_img.nii.gz"));
    REQUIRE(slurp(d1 / "phantom_001_lab.nii.gz") == slurp(d2 / "phantom_001_lab.nii.gz"));
}

TEST_CASE("cli: stats reproduces the flood-fill oracle and is idempotent") {
    auto data = temp_dir("stats_data");
    REQUIRE(run_cli("phantom --out " + data.string() + " --count 3 --seed 11 --shape 30 --scars 4") == 0);

    auto out1 = temp_dir("stats_out1");
    auto out2 = temp_dir("stats_out2");
    REQUIRE(run_cli("stats --manifest " + (data / "manifest.json").string() + " --out " + out1.string()) == 0);
    REQUIRE(run_cli("stats --manifest " + (data / "manifest.json").string() + " --out " + out2.string()) == 0);

    // oracle totals over the same cases
    DatasetManifest m = load_manifest((data / "manifest.json").string());
    int64_t oracle_count = 0;
    double oracle_volume = 0;
    for (const auto& e : m.entries) {
        auto [vol, lab] = load_case(e.image, e.label, e.case_id);
        for (int64_t c : oracle_connected_components(*lab, kScarLabel, 26)) {
            ++oracle_count;
            oracle_volume += double(c) * lab->spacing.voxel_volume_mm3();
        }
    }
    std::ifstream json_in(out1 / "scar_stats.json");
    nlohmann::json j;
    json_in >> j;
    REQUIRE(j["total_count"].get<int64_t>() == oracle_count);
    REQUIRE(j["total_volume_mm3"].get<double>() == Catch::Approx(oracle_volume).epsilon(1e-9));

    // byte-identical reports on re-run
    REQUIRE(slurp(out1 / "scar_stats.csv") == slurp(out2 / "scar_stats.csv"));
    REQUIRE(slurp(out1 / "scar_stats.json") == slurp(out2 / "scar_stats.json"));
    REQUIRE(slurp(out1 / "scar_sizes.png") == slurp(out2 / "scar_sizes.png"));
}

TEST_CASE("cli: stats handles a scar-free dataset") {
    auto data = temp_dir("stats_empty");
    REQUIRE(run_cli("phantom --out " + data.string() + " --count 1 --seed 2 --shape 26 --scars 0") == 0);
    auto out = temp_dir("stats_empty_out");
    REQUIRE(run_cli("stats --manifest " + (data / "manifest.json").string() + " --out " + out.string()) == 0);
    std::ifstream json_in(out / "scar_stats.json");
    nlohmann::json j;
    json_in >> j;
    REQUIRE(j["total_count"].get<int64_t>() == 0);
}

TEST_CASE("cli: train, predict, evaluate, report pipeline") {
    auto data = temp_dir("pipe_data");
    REQUIRE(run_cli("phantom --out " + data.string() + " --count 2 --seed 21 --shape 24 --scars 3") == 0);

    auto run = temp_dir("pipe_run");
    nlohmann::json cfg;
    cfg["network"] = {{"encoder_depth", 3}, {"sub_decoders", 2}, {"base_channels", 4}};
    cfg["train"] = {{"max_epochs", 1},
                    {"steps_per_epoch", 3},
                    {"patch_size", {16, 16, 16}},
                    {"seed", 5},
                    {"augment",
                     {{"rotation", false}, {"scaling", false}, {"elastic", false}, {"gamma", false}, {"mirror", false}}}};
    cfg["manifest"] = (data / "manifest.json").string();
    cfg["out_dir"] = run.string();
    std::ofstream((data / "train.json").string()) << cfg.dump(2);

    REQUIRE(run_cli("train --config " + (data / "train.json").string()) == 0);
    REQUIRE(fs::exists(run / "last.ckpt"));
    REQUIRE(fs::exists(run / "metrics.csv"));
    REQUIRE(fs::exists(run / "resolved_config.json"));

    auto pred = temp_dir("pipe_pred");
    REQUIRE(run_cli("predict --checkpoint " + (run / "last.ckpt").string() + " --manifest " +
                    (data / "manifest.json").string() + " --out " + pred.string() + " --split train") == 0);
    REQUIRE(fs::exists(pred / "pred_phantom_000.nii.gz"));
    REQUIRE(fs::exists(pred / "pred_phantom_001.nii.gz"));

    auto eval1 = temp_dir("pipe_eval1");
    auto eval2 = temp_dir("pipe_eval2");
    std::string eval_args = "evaluate --checkpoint " + (run / "last.ckpt").string() + " --manifest " +
                            (data / "manifest.json").string() + " --split train --out ";
    REQUIRE(run_cli(eval_args + eval1.string()) == 0);
    REQUIRE(run_cli(eval_args + eval2.string()) == 0);
    REQUIRE(fs::exists(eval1 / "eval.csv"));
    REQUIRE(slurp(eval1 / "eval.csv") == slurp(eval2 / "eval.csv"));   // byte-identical reports
    REQUIRE(slurp(eval1 / "eval.json") == slurp(eval2 / "eval.json"));
    {
        std::ifstream in(eval1 / "eval.json");
        nlohmann::json j;
        in >> j;
        REQUIRE(j["method"] == "MDBAnet");
        REQUIRE(j["n_cases"] == 2);
    }

    auto rep = temp_dir("pipe_rep");
    REQUIRE(run_cli("report --pred " + pred.string() + " --manifest " + (data / "manifest.json").string() +
                    " --out " + rep.string() + " --zoom 3") == 0);
    int n_png = 0;
    for (const auto& f : fs::directory_iterator(rep)) {
        if (f.path().extension() == ".png") {
            ++n_png;
            auto [w, h] = read_png_size(f.path().string());
            REQUIRE(w == 24 * 3);  // slice dims x integer zoom
            REQUIRE(h == 24 * 3);
        }
    }
    REQUIRE(n_png == 2);
}

TEST_CASE("cli: exit codes and clean failure") {
    SECTION("malformed config exits 1 without partial outputs") {
        auto data = temp_dir("badcfg");
        std::ofstream((data / "broken.json").string()) << "{ this is not json";
        fs::path out = data / "run_out";
        int rc = run_cli("train --config " + (data / "broken.json").string() + " --out " + out.string() +
                         " --manifest nowhere.json");
        REQUIRE(rc == 1);
        REQUIRE_FALSE(fs::exists(out));
    }
    SECTION("invalid field values exit 1") {
        auto data = temp_dir("badval");
        REQUIRE(run_cli("phantom --out " + (data / "o").string() + " --count 0") == 1);
        REQUIRE(run_cli("phantom --out " + (data / "o2").string() + " --shape 1,2") == 1);
    }
    SECTION("unknown subcommand or flag exits nonzero") {
        REQUIRE(run_cli("frobnicate") != 0);
        REQUIRE(run_cli("stats --no-such-flag x") != 0);
    }
    SECTION("missing input file is a runtime failure (exit 2)") {
        auto out = temp_dir("miss");
        REQUIRE(run_cli("stats --manifest /nonexistent/manifest.json --out " + out.string()) == 2);
    }
}
