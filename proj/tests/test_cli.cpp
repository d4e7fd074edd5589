#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "dc/cli.hpp"
#include "dc/dataio.hpp"
#include "dc/rng.hpp"
#include "dc/runconfig.hpp"

using namespace dc;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        static int counter = 0;
        path = fs::temp_directory_path() /
               ("dcgm_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

std::string write_config(const TempDir& td, const std::string& name, const std::string& text) {
    const auto p = td.file(name);
    std::ofstream f(p);
    f << text;
    return p;
}

std::vector<char> slurp_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

const char* kTinyConfig =
    "dataset = toy\n"
    "toy.classes = 3\n"
    "toy.per_class = 12\n"
    "toy.size = 12\n"
    "arch = convnet:W=8,D=2\n"
    "ipc = 1\n"
    "condense.outer_steps = 3\n"
    "condense.real_batch = 8\n"
    "seed = 7\n";

} // namespace

TEST_CASE("run config parsing") {
    auto cfg = RunConfig::from_text("a = 1\n# comment\n b.c = hello # trailing\n\nflag = true\n");
    CHECK(cfg.get_int("a", 0) == 1);
    CHECK(cfg.get_str("b.c", "") == "hello");
    CHECK(cfg.get_bool("flag", false));
    CHECK(cfg.get_int("missing", 9) == 9);
    CHECK_NOTHROW(cfg.ensure_all_consumed());

    auto resolved = cfg.resolved();
    CHECK(resolved.find("a = 1") != std::string::npos);
    CHECK(resolved.find("missing = 9") != std::string::npos);  // defaults recorded

    SUBCASE("unknown keys are hard errors") {
        auto c2 = RunConfig::from_text("known = 1\nmystery = 2\n");
        (void)c2.get_int("known", 0);
        CHECK_THROWS_WITH_AS(c2.ensure_all_consumed(), doctest::Contains("mystery"), ConfigError);
    }
    SUBCASE("malformed lines and duplicates") {
        CHECK_THROWS_AS((void)RunConfig::from_text("novalue\n"), ConfigError);
        CHECK_THROWS_AS((void)RunConfig::from_text("a=1\na=2\n"), ConfigError);
        auto c3 = RunConfig::from_text("a = x\n");
        CHECK_THROWS_AS((void)c3.get_int("a", 0), ConfigError);
    }
}

TEST_CASE("cmd_condense is idempotent and deterministic") {
    TempDir td;
    const auto cfgp = write_config(td, "run.config", kTinyConfig);
    const auto out1 = td.file("r1");
    const auto out2 = td.file("r2");
    REQUIRE(cli_main({"condense", "--config", cfgp, "--out", out1}) == 0);
    REQUIRE(cli_main({"condense", "--config", cfgp, "--out", out2}) == 0);
    CHECK(slurp_bytes(out1 + "/condensed.dcgm") == slurp_bytes(out2 + "/condensed.dcgm"));
    CHECK(slurp_bytes(out1 + "/loss.csv") == slurp_bytes(out2 + "/loss.csv"));
    CHECK(slurp_bytes(out1 + "/grid.png") == slurp_bytes(out2 + "/grid.png"));

    // rerun into the same directory: every artifact byte-identical
    auto before_manifest = slurp_bytes(out1 + "/manifest.txt");
    auto before_config = slurp_bytes(out1 + "/run.config");
    REQUIRE(cli_main({"condense", "--config", cfgp, "--out", out1}) == 0);
    CHECK(slurp_bytes(out1 + "/manifest.txt") == before_manifest);
    CHECK(slurp_bytes(out1 + "/run.config") == before_config);

    // different seed changes the artifact
    const auto out3 = td.file("r3");
    REQUIRE(cli_main({"condense", "--config", cfgp, "--out", out3, "--seed", "8"}) == 0);
    CHECK(slurp_bytes(out1 + "/condensed.dcgm") != slurp_bytes(out3 + "/condensed.dcgm"));

    // input files untouched: config byte-identical
    const std::string original(kTinyConfig);
    CHECK(slurp_bytes(cfgp) == std::vector<char>(original.begin(), original.end()));
}

TEST_CASE("cmd_condense error paths") {
    TempDir td;
    SUBCASE("missing dataset path exits 2 and names the path") {
        const auto cfgp = write_config(td, "bad.config",
                                       "dataset = mnist\ndata_dir = /nonexistent_dcgm_dir\n");
        CHECK(cli_main({"condense", "--config", cfgp, "--out", td.file("o")}) == 2);
    }
    SUBCASE("unknown config key exits 2") {
        const auto cfgp = write_config(td, "bad2.config",
                                       std::string(kTinyConfig) + "condense.warp_drive = 9\n");
        CHECK(cli_main({"condense", "--config", cfgp, "--out", td.file("o")}) == 2);
    }
    SUBCASE("usage errors exit 2") {
        CHECK(cli_main({"frobnicate"}) == 2);
        CHECK(cli_main({}) == 2);
        CHECK(cli_main({"coreset", "--config", "/nope"}) == 2);  // missing method
    }
}

TEST_CASE("cmd_eval over saved sets") {
    TempDir td;
    // a noise set evaluated with zero training stays at chance level
    SyntheticSet noise;
    noise.classes = 3;
    noise.ipc = 2;
    noise.images = Tensor<float>({6, 1, 12, 12});
    Rng rng(3);
    for (auto& v : noise.images.v) v = static_cast<float>(rng.normal());
    for (int c = 0; c < 3; ++c)
        for (int k = 0; k < 2; ++k) noise.labels.push_back(c);
    noise.norm_mean = {0.0f};
    noise.norm_std = {1.0f};
    save_condensed(noise, td.file("noise.dcgm"));

    const auto cfgp = write_config(td, "eval.config",
                                   "dataset = toy\n"
                                   "toy.classes = 3\n"
                                   "toy.per_class = 10\n"
                                   "toy.size = 12\n"
                                   "eval.arch = convnet:W=8,D=2\n"
                                   "eval.n_models = 4\n"
                                   "eval.epochs = 0\n"
                                   "seed = 5\n");
    const auto out = td.file("evalout");
    REQUIRE(cli_main({"eval", "--config", cfgp, "--out", out, td.file("noise.dcgm"),
                      td.file("noise.dcgm")}) == 0);

    std::ifstream csv(out + "/eval.csv");
    std::string header;
    std::getline(csv, header);
    CHECK(header == "set_id,model_id,accuracy");
    int rows = 0;
    double sum = 0;
    std::string line;
    while (std::getline(csv, line)) {
        rows++;
        sum += std::stod(line.substr(line.rfind(',') + 1));
    }
    CHECK(rows == 2 * 4);  // n_sets * n_models
    const double mean = sum / rows;
    INFO("chance-level mean " << mean);
    CHECK(mean > 0.1);
    CHECK(mean < 0.6);
}

TEST_CASE("cmd_coreset emits index files and reports") {
    TempDir td;
    const std::string base =
        "dataset = toy\n"
        "toy.classes = 3\n"
        "toy.per_class = 16\n"
        "toy.size = 12\n"
        "eval.arch = convnet:W=8,D=2\n"
        "ipc = 2\n"
        "eval.n_sets = 2\n"
        "eval.n_models = 1\n"
        "eval.epochs = 5\n"
        "coreset.extractor_arch = convnet:W=8,D=2,N=batch\n"
        "coreset.extractor_epochs = 3\n"
        "coreset.forgetting_epochs = 3\n"
        "seed = 11\n";
    const auto cfgp = write_config(td, "core.config", base);

    for (const std::string method : {"random", "herding", "kcenter", "forgetting"}) {
        const auto out = td.file("out_" + method);
        REQUIRE(cli_main({"coreset", "--config", cfgp, "--out", out, method}) == 0);
        for (int s = 0; s < 2; ++s) {
            std::ifstream f(out + "/indices_" + method + "_set" + std::to_string(s) + ".txt");
            REQUIRE(f.good());
            std::string header;
            std::getline(f, header);
            CHECK(header.find("method=" + method) != std::string::npos);
            CHECK(header.find("ipc=2") != std::string::npos);
            int count = 0;
            std::string line;
            while (std::getline(f, line))
                if (!line.empty()) count++;
            CHECK(count == 3 * 2);  // classes * ipc
        }
    }

    // random is deterministic per seed
    const auto o1 = td.file("det1");
    const auto o2 = td.file("det2");
    REQUIRE(cli_main({"coreset", "--config", cfgp, "--out", o1, "random"}) == 0);
    REQUIRE(cli_main({"coreset", "--config", cfgp, "--out", o2, "random"}) == 0);
    CHECK(slurp_bytes(o1 + "/indices_random_set0.txt") == slurp_bytes(o2 + "/indices_random_set0.txt"));
    CHECK(slurp_bytes(o1 + "/eval.csv") == slurp_bytes(o2 + "/eval.csv"));

    CHECK(cli_main({"coreset", "--config", cfgp, "--out", td.file("bad"), "entropy"}) == 2);
}

TEST_CASE("herding beats random selection at 1 ipc over 5 seeds") {
    TempDir td;
    const auto cfgp = write_config(td, "hvr.config",
                                   "dataset = toy\n"
                                   "toy.classes = 4\n"
                                   "toy.per_class = 40\n"
                                   "toy.size = 12\n"
                                   "eval.arch = convnet:W=16,D=2\n"
                                   "ipc = 1\n"
                                   "eval.n_sets = 5\n"
                                   "eval.n_models = 2\n"
                                   "eval.epochs = 60\n"
                                   "eval.lr = 0.02\n"
                                   "eval.batch = 8\n"
                                   "coreset.extractor_arch = convnet:W=16,D=2,N=batch\n"
                                   "coreset.extractor_epochs = 10\n"
                                   "seed = 3\n");
    auto mean_of = [&](const std::string& out) {
        std::ifstream csv(out + "/eval.csv");
        std::string line;
        std::getline(csv, line);  // header
        double sum = 0;
        int n = 0;
        while (std::getline(csv, line)) {
            sum += std::stod(line.substr(line.rfind(',') + 1));
            n++;
        }
        REQUIRE(n == 10);
        return sum / n;
    };
    const auto out_h = td.file("herd");
    const auto out_r = td.file("rand");
    REQUIRE(cli_main({"coreset", "--config", cfgp, "--out", out_h, "herding"}) == 0);
    REQUIRE(cli_main({"coreset", "--config", cfgp, "--out", out_r, "random"}) == 0);
    const double herding = mean_of(out_h);
    const double random_acc = mean_of(out_r);
    INFO("herding " << herding << " vs random " << random_acc);
    CHECK(herding > random_acc);
}

TEST_CASE("cmd_nas runs a sub-grid and reports spearman") {
    TempDir td;
    const auto cfgp = write_config(td, "nas.config",
                                   "dataset = toy\n"
                                   "toy.classes = 3\n"
                                   "toy.per_class = 16\n"
                                   "toy.size = 12\n"
                                   "nas.proxy = random\n"
                                   "nas.ipc = 4\n"
                                   "nas.epochs = 6\n"
                                   "nas.batch = 12\n"
                                   "nas.top_k = 8\n"
                                   "nas.val_fraction = 0.25\n"
                                   "nas.reference = full\n"
                                   "nas.reference_epochs = 4\n"
                                   "seed = 13\n");
    const auto out = td.file("nasout");
    REQUIRE(cli_main({"nas", "--config", cfgp, "--out", out, "--grid",
                      "W=8,16;D=1,2;N=instance;A=relu,sigmoid;P=avg"}) == 0);

    std::ifstream csv(out + "/nas.csv");
    std::string header;
    std::getline(csv, header);
    CHECK(header == "arch,val_acc,ref_acc,rank");
    int rows = 0;
    std::string line;
    while (std::getline(csv, line))
        if (!line.empty()) rows++;
    CHECK(rows == 2 * 2 * 1 * 2 * 1);  // the sub-grid
}

TEST_CASE("inspect prints header fields") {
    TempDir td;
    SyntheticSet s;
    s.classes = 2;
    s.ipc = 1;
    s.images = Tensor<float>({2, 1, 8, 8});
    s.labels = {0, 1};
    s.norm_mean = {0.1f};
    s.norm_std = {0.9f};
    s.provenance = "unit-test";
    save_condensed(s, td.file("x.dcgm"));
    CHECK(cli_main({"inspect", td.file("x.dcgm")}) == 0);
    CHECK(cli_main({"inspect", td.file("missing.dcgm")}) == 2);
}
