#include <gtest/gtest.h>

#include <fstream>
#include <regex>
#include <sstream>

#include "cli.hpp"
#include "support/synthetic_cifar.hpp"
#include "support/temp_dir.hpp"

using namespace lcnn;
using namespace lcnn::testing;
namespace fs = std::filesystem;
using lcnn::cli::Json;

namespace {

struct Result {
    int code;
    std::string out, err;
};

Result lcnn_run(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Json read_json(const fs::path& p) {
    std::ifstream in(p);
    return Json::parse(in);
}

std::size_t count_rows(const std::string& csv, std::string_view split) {
    std::size_t n = 0;
    std::istringstream is(csv);
    for (std::string line; std::getline(is, line);)
        if (line.find(std::string(",") + std::string(split) + ",") != std::string::npos) ++n;
    return n;
}

/// Prepared containers shared by the train/eval/compare tests.
class CliData : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        root_ = new TempDir("cli");
        write_synthetic_cifar_dir(*root_ / "cifar", 32, 64, 5);
        const auto r = lcnn_run({"prepare", "--cifar-dir", (*root_ / "cifar").string(), "--out",
                                 (*root_ / "data").string()});
        ASSERT_EQ(r.code, 0) << r.err;
    }
    static void TearDownTestSuite() {
        delete root_;
        root_ = nullptr;
    }
    static std::string data() { return (*root_ / "data").string(); }
    static std::string out(const std::string& name) { return (*root_ / name).string(); }

    static TempDir* root_;
};

TempDir* CliData::root_ = nullptr;

}  // namespace

// ---------------------------------------------------------------------------
// Usage

TEST(CliUsage, BogusArchListsValidValues) {
    const auto r = lcnn_run({"train", "--data", "d", "--out", "o", "--arch", "bogus"});
    EXPECT_NE(r.code, 0);
    for (auto v : {"lcnn", "mcnn", "xcnn", "single-gray", "single-edge"})
        EXPECT_NE(r.err.find(v), std::string::npos) << v << " missing from: " << r.err;
}

TEST(CliUsage, MissingSubcommandOrFlagFails) {
    EXPECT_NE(lcnn_run({}).code, 0);
    EXPECT_NE(lcnn_run({"frobnicate"}).code, 0);
    EXPECT_NE(lcnn_run({"train", "--out", "o"}).code, 0);
    EXPECT_NE(lcnn_run({"eval", "--data", "d", "--checkpoint", "c", "--split", "val"}).code, 0);
}

TEST(CliUsage, VersionAndHelpSucceed) {
    auto v = lcnn_run({"--version"});
    EXPECT_EQ(v.code, 0);
    EXPECT_NE(v.out.find(cli::kToolVersion), std::string::npos);
    auto h = lcnn_run({"compare", "--help"});
    EXPECT_EQ(h.code, 0);
    EXPECT_NE(h.out.find("--threads"), std::string::npos);
}

TEST(CliDigest, Sha256KnownVector) {
    TempDir dir("sha");
    std::ofstream(dir / "abc") << "abc";
    EXPECT_EQ(cli::sha256_file(dir / "abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

// ---------------------------------------------------------------------------
// prepare

TEST(CliPrepare, CountsManifestAndDigests) {
    TempDir dir("prep");
    write_synthetic_cifar_dir(dir / "cifar", 20, 30, 1);
    const auto r = lcnn_run({"prepare", "--cifar-dir", (dir / "cifar").string(), "--out", (dir / "o").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(load_container(dir / "o" / "train.lcds").size(), 100u);
    EXPECT_EQ(load_container(dir / "o" / "test.lcds").size(), 30u);

    const auto m = read_json(dir / "o" / "manifest.json");
    EXPECT_EQ(m["command"], "prepare");
    EXPECT_EQ(m["version"], cli::kToolVersion);
    ASSERT_EQ(m["inputs"].size(), 6u);
    const std::regex hex64("[0-9a-f]{64}");
    for (const auto& in : m["inputs"]) EXPECT_TRUE(std::regex_match(in["sha256"].get<std::string>(), hex64));
    EXPECT_EQ(m["inputs"][5]["sha256"], cli::sha256_file(dir / "cifar" / "test_batch.bin"));
    EXPECT_EQ(m["outputs"][0]["path"], "train.lcds");
    EXPECT_EQ(m["outputs"][0]["sha256"], cli::sha256_file(dir / "o" / "train.lcds"));
    EXPECT_EQ(m["flags"]["size"], 32);
}

TEST(CliPrepare, DeterministicOutputs) {
    TempDir dir("prepdet");
    write_synthetic_cifar_dir(dir / "cifar", 16, 16, 2);
    for (auto o : {"a", "b"})
        ASSERT_EQ(lcnn_run({"prepare", "--cifar-dir", (dir / "cifar").string(), "--out", (dir / o).string()}).code, 0);
    for (auto f : {"train.lcds", "test.lcds"}) {
        EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
        EXPECT_EQ(cli::sha256_file(dir / "a" / f), cli::sha256_file(dir / "b" / f));
    }
    EXPECT_EQ(read_json(dir / "a" / "manifest.json")["outputs"], read_json(dir / "b" / "manifest.json")["outputs"]);
}

TEST(CliPrepare, AcceptsArchiveParentAndResizes) {
    TempDir dir("prepparent");
    write_synthetic_cifar_dir(dir / "cifar-10-batches-bin", 4, 6, 3);
    const auto r = lcnn_run({"prepare", "--cifar-dir", dir.path().string(), "--out", (dir / "o").string(), "--size",
                             "48", "--test-limit", "5"});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto test = load_container(dir / "o" / "test.lcds");
    EXPECT_EQ(test.side, 48u);
    EXPECT_EQ(test.size(), 5u);
    for (float v : test.edge) EXPECT_TRUE(v == 0.0f || v == 1.0f);
}

TEST(CliPrepare, MissingDirectoryNamesPath) {
    TempDir dir("prepmissing");
    const auto missing = (dir / "no-such-dir").string();
    const auto r = lcnn_run({"prepare", "--cifar-dir", missing, "--out", (dir / "o").string()});
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.err.find(missing), std::string::npos) << r.err;
}

TEST(CliPrepare, MissingOrMalformedBatch) {
    TempDir dir("prepbad");
    write_synthetic_cifar_dir(dir / "cifar", 4, 4, 4);
    fs::remove(dir / "cifar" / "data_batch_3.bin");
    auto r = lcnn_run({"prepare", "--cifar-dir", (dir / "cifar").string(), "--out", (dir / "o").string()});
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.err.find("data_batch_3.bin"), std::string::npos) << r.err;

    write_synthetic_cifar_dir(dir / "cifar", 4, 4, 4);
    fs::resize_file(dir / "cifar" / "test_batch.bin", 3 * kCifarRecord - 7);
    r = lcnn_run({"prepare", "--cifar-dir", (dir / "cifar").string(), "--out", (dir / "o").string()});
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.err.find("test_batch.bin"), std::string::npos) << r.err;
}

// ---------------------------------------------------------------------------
// train

TEST_F(CliData, TrainWritesOneTestRowPerEpoch) {
    const auto o = out("train3");
    const auto r = lcnn_run({"train", "--data", data(), "--out", o, "--arch", "lcnn", "--epochs", "3", "--seed", "1"});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto csv = slurp(fs::path(o) / "metrics.csv");
    EXPECT_EQ(count_rows(csv, "test"), 3u);
    EXPECT_EQ(count_rows(csv, "train"), 3u);
    EXPECT_EQ(csv.rfind("# arch=" + std::string(kDeskArch) + " mode=lcnn seed=1", 0), 0u) << csv;

    std::ifstream ck(fs::path(o) / "model.lckp", std::ios::binary);
    const auto net = load_checkpoint<float>(ck);
    EXPECT_EQ(net.spec().mode, Mode::LCnn);

    const auto m = read_json(fs::path(o) / "manifest.json");
    EXPECT_EQ(m["command"], "train");
    EXPECT_EQ(m["stream"], "both");
    EXPECT_EQ(m["seed"], 1);
    EXPECT_EQ(m["flags"]["epochs"], 3);
    EXPECT_EQ(m["flags"]["arch_string"], std::string(kDeskArch));
    EXPECT_EQ(m["inputs"][0]["sha256"], cli::sha256_file(fs::path(data()) / "train.lcds"));
    EXPECT_EQ(m["outputs"][1]["sha256"], cli::sha256_file(fs::path(o) / "model.lckp"));
}

TEST_F(CliData, SingleEdgeRecordsStream) {
    const auto o = out("edge");
    ASSERT_EQ(lcnn_run({"train", "--data", data(), "--out", o, "--arch", "single-edge", "--epochs", "1"}).code, 0);
    const auto m = read_json(fs::path(o) / "manifest.json");
    EXPECT_EQ(m["stream"], "edge");
    EXPECT_EQ(m["mode"], "single");
    EXPECT_EQ(m["flags"]["arch"], "single-edge");
}

TEST_F(CliData, IdenticalFlagsGiveIdenticalBytes) {
    for (auto name : {"rep_a", "rep_b"})
        ASSERT_EQ(lcnn_run({"train", "--data", data(), "--out", out(name), "--arch", "xcnn", "--epochs", "2", "--seed",
                            "4", "--train-limit", "96"})
                      .code,
                  0);
    EXPECT_EQ(slurp(fs::path(out("rep_a")) / "metrics.csv"), slurp(fs::path(out("rep_b")) / "metrics.csv"));
    EXPECT_EQ(slurp(fs::path(out("rep_a")) / "model.lckp"), slurp(fs::path(out("rep_b")) / "model.lckp"));
}

TEST_F(CliData, FullFidelityRejectsDeskContainers) {
    const auto r = lcnn_run({"train", "--data", data(), "--out", out("ff"), "--full-fidelity", "--epochs", "1"});
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.err.find("side mismatch"), std::string::npos) << r.err;
}

TEST_F(CliData, ArchStringFromFlagAndConfigFile) {
    const std::string small = "C(4,3,1) → LF(average) → P(2) → FL → FC(10)";
    const auto cfg = fs::path(out("run.toml"));
    std::ofstream(cfg) << "[train]\narch-string = \"" << small << "\"\nepochs = 1\nlr = 0.05\n";
    const auto r = lcnn_run({"train", "--data", data(), "--out", out("cfg"), "--config", cfg.string()});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto m = read_json(fs::path(out("cfg")) / "manifest.json");
    EXPECT_EQ(m["flags"]["arch_string"], small);
    EXPECT_EQ(m["flags"]["lr"], 0.05);
    EXPECT_EQ(m["parameters"], 2 * 40 + 16 * 16 * 4 * 10 + 10);

    const auto unsectioned = fs::path(out("flat.toml"));
    std::ofstream(unsectioned) << "lr = 0.05\n";
    EXPECT_NE(lcnn_run({"train", "--data", data(), "--out", out("flat"), "--config", unsectioned.string()}).code, 0);

    const auto bad = lcnn_run({"train", "--data", data(), "--out", out("bad"), "--arch-string", "C(96,11)"});
    EXPECT_NE(bad.code, 0);
    EXPECT_NE(bad.err.find("C(96,11)"), std::string::npos) << bad.err;
}

// ---------------------------------------------------------------------------
// eval

TEST_F(CliData, EvalReproducesFinalTestRecord) {
    const auto o = out("evalsrc");
    ASSERT_EQ(lcnn_run({"train", "--data", data(), "--out", o, "--arch", "single-edge", "--epochs", "1"}).code, 0);
    const auto m = read_json(fs::path(o) / "manifest.json");
    const auto ckpt = (fs::path(o) / "model.lckp").string();

    const auto r = lcnn_run({"eval", "--data", data(), "--checkpoint", ckpt});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto e = read_json(fs::path(o) / "eval_test.manifest.json");
    EXPECT_EQ(e["stream"], "edge");  // picked up from the train manifest
    EXPECT_DOUBLE_EQ(e["result"]["loss"].get<double>(), m["final_test"]["loss"].get<double>());
    EXPECT_DOUBLE_EQ(e["result"]["accuracy"].get<double>(), m["final_test"]["accuracy"].get<double>());

    const auto g = lcnn_run({"eval", "--data", data(), "--checkpoint", ckpt, "--stream", "gray", "--out", out("evg")});
    ASSERT_EQ(g.code, 0);
    EXPECT_NE(read_json(fs::path(out("evg")) / "eval_test.manifest.json")["result"]["loss"].get<double>(),
              m["final_test"]["loss"].get<double>());
}

// ---------------------------------------------------------------------------
// compare

TEST(CliCompare, UntrainedRowsAreAtChance) {
    TempDir dir("cmp0");
    write_synthetic_cifar_dir(dir / "cifar", 4, 1000, 6);
    {
        // labels independent of the test images
        auto recs = load_cifar_batch(dir / "cifar" / "test_batch.bin");
        std::vector<std::uint8_t> labels;
        for (const auto& r : recs) labels.push_back(r.label);
        CounterRng(3).shuffle(std::span<std::uint8_t>(labels));
        for (std::size_t i = 0; i < recs.size(); ++i) recs[i].label = labels[i];
        std::ofstream os(dir / "cifar" / "test_batch.bin", std::ios::binary);
        write_cifar_batch(os, recs);
    }
    ASSERT_EQ(lcnn_run({"prepare", "--cifar-dir", (dir / "cifar").string(), "--out", (dir / "d").string()}).code, 0);
    const auto r = lcnn_run({"compare", "--data", (dir / "d").string(), "--out", (dir / "c").string(), "--epochs", "0"});
    ASSERT_EQ(r.code, 0) << r.err;

    std::istringstream table(r.out);
    std::string line;
    std::getline(table, line);
    EXPECT_EQ(line.rfind("Model", 0), 0u);
    const std::vector<std::string> order{"single-gray", "single-edge", "mcnn", "xcnn-lite", "lcnn"};
    std::vector<std::string> seen;
    while (std::getline(table, line)) {
        std::istringstream row(line);
        std::string model;
        double loss = 0, acc = 0;
        row >> model >> loss >> acc;
        seen.push_back(model);
        EXPECT_NEAR(acc, 0.1, 0.05) << model;
    }
    EXPECT_EQ(seen, order);
    EXPECT_EQ(slurp(dir / "c" / "comparison.txt"), r.out);
    const auto csv = slurp(dir / "c" / "comparison.csv");
    EXPECT_EQ(csv.rfind("model,loss,accuracy\nsingle-gray,", 0), 0u) << csv;
    for (const auto& m : order) EXPECT_TRUE(fs::exists(dir / "c" / m / "metrics.csv")) << m;
    EXPECT_EQ(read_json(dir / "c" / "manifest.json")["outputs"].size(), 12u);
}

TEST_F(CliData, ThreadedCompareMatchesSequential) {
    const std::vector<std::string> base{"compare", "--data", data(), "--epochs", "1", "--train-limit", "64",
                                        "--test-limit", "32"};
    auto with = [&](std::string out_dir, std::string threads) {
        auto args = base;
        args.insert(args.end(), {"--out", out_dir, "--threads", threads});
        return lcnn_run(args);
    };
    const auto seq = with(out("cmp1"), "1");
    const auto par = with(out("cmp3"), "3");
    ASSERT_EQ(seq.code, 0) << seq.err;
    ASSERT_EQ(par.code, 0) << par.err;
    EXPECT_EQ(seq.out, par.out);
    for (const auto& m : cli::kModels) {
        const auto f = fs::path(std::string(m.name)) / "model.lckp";
        EXPECT_EQ(slurp(fs::path(out("cmp1")) / f), slurp(fs::path(out("cmp3")) / f)) << m.name;
    }
}
