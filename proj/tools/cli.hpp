#pragma once

#include <CLI11.hpp>
#include <json.hpp>
#include <openssl/evp.h>

#include <array>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "lcnn/lcnn.hpp"

namespace lcnn::cli {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

inline constexpr std::string_view kToolVersion = "0.1.0";
inline constexpr std::size_t kFullFidelitySide = 224;

// ---------------------------------------------------------------------------
// Digests and manifests

inline std::string sha256_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw std::runtime_error("sha256 init failed");
    std::array<char, 1 << 16> buf{};
    while (in) {
        in.read(buf.data(), buf.size());
        if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
    }
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned len = 0;
    EVP_DigestFinal_ex(ctx.get(), md.data(), &len);
    std::ostringstream hex;
    for (unsigned i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
    return hex.str();
}

inline Json file_entry(const fs::path& path, const fs::path& relative_to = {}) {
    const auto shown = relative_to.empty() ? path : path.lexically_relative(relative_to);
    return Json{{"path", shown.generic_string()}, {"bytes", fs::file_size(path)}, {"sha256", sha256_file(path)}};
}

/// Writes `dir/name` with a trailing newline. No timestamps, so identical runs
/// give identical manifests.
inline void write_manifest(const fs::path& dir, const Json& manifest, std::string_view name = "manifest.json") {
    std::ofstream out(dir / name);
    if (!out) throw DataError("cannot write " + (dir / name).string());
    out << manifest.dump(2) << "\n";
}

inline Json manifest_base(std::string_view command) {
    return Json{{"tool", "lcnn"}, {"version", kToolVersion}, {"command", command}};
}

// ---------------------------------------------------------------------------
// Model rows

struct ModelChoice {
    std::string_view name;
    Mode mode;
    std::size_t streams;
    StreamSelect stream;
};

/// Comparison row order.
inline constexpr std::array<ModelChoice, 5> kModels{{
    {"single-gray", Mode::Single, 1, StreamSelect::Gray},
    {"single-edge", Mode::Single, 1, StreamSelect::Edge},
    {"mcnn", Mode::MCnn, 2, StreamSelect::Both},
    {"xcnn-lite", Mode::XCnn, 2, StreamSelect::Both},
    {"lcnn", Mode::LCnn, 2, StreamSelect::Both},
}};

inline const std::vector<std::string> kArchValues{"lcnn", "mcnn", "xcnn", "xcnn-lite", "single-gray", "single-edge"};

inline const ModelChoice& model_choice(std::string_view arch) {
    if (arch == "xcnn") arch = "xcnn-lite";
    for (const auto& m : kModels)
        if (m.name == arch) return m;
    throw ConfigError("unknown arch '" + std::string(arch) + "'");
}

inline std::string_view stream_name(StreamSelect s) noexcept {
    switch (s) {
        case StreamSelect::Both: return "both";
        case StreamSelect::Gray: return "gray";
        case StreamSelect::Edge: return "edge";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// Options

struct PrepareOptions {
    fs::path cifar_dir;
    fs::path out;
    std::size_t size = kCifarSide;
    CannyParams canny;
    std::size_t train_limit = 0;  // 0 keeps everything
    std::size_t test_limit = 0;
};

struct RunOptions {
    fs::path data;
    fs::path out;
    std::string arch = "lcnn";
    std::string arch_string;
    std::string padding;
    bool full_fidelity = false;
    TrainConfig train;
    std::size_t train_limit = 0;
    std::size_t test_limit = 0;
    std::size_t threads = 1;

    std::string resolved_arch_string() const {
        if (!arch_string.empty()) return arch_string;
        return std::string(full_fidelity ? kFullScaleArch : kDeskArch);
    }

    Padding resolved_padding() const {
        if (!padding.empty()) return *parse_padding(padding);
        return full_fidelity ? Padding::Same : Padding::SameFor3x3;
    }

    Json to_json() const {
        return Json{{"data", data.generic_string()},
                    {"out", out.generic_string()},
                    {"arch_string", resolved_arch_string()},
                    {"padding", padding_name(resolved_padding())},
                    {"full_fidelity", full_fidelity},
                    {"epochs", train.epochs},
                    {"batch", train.batch_size},
                    {"lr", train.learning_rate},
                    {"momentum", train.momentum},
                    {"seed", train.seed},
                    {"train_limit", train_limit},
                    {"test_limit", test_limit}};
    }
};

// ---------------------------------------------------------------------------
// prepare

inline constexpr std::array<std::string_view, 5> kTrainBatches{"data_batch_1.bin", "data_batch_2.bin",
                                                               "data_batch_3.bin", "data_batch_4.bin",
                                                               "data_batch_5.bin"};
inline constexpr std::string_view kTestBatch = "test_batch.bin";

/// Accepts either the batch directory itself or its parent holding
/// cifar-10-batches-bin/.
inline fs::path locate_cifar_dir(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw DataError("CIFAR-10 directory not found: " + dir.string());
    if (fs::exists(dir / kTestBatch)) return dir;
    if (fs::exists(dir / "cifar-10-batches-bin" / kTestBatch)) return dir / "cifar-10-batches-bin";
    return dir;
}

inline void cmd_prepare(const PrepareOptions& o, std::ostream& log) {
    if (o.size == 0) throw ConfigError("--size must be >= 1");
    const fs::path dir = locate_cifar_dir(o.cifar_dir);
    std::vector<fs::path> train_files;
    for (auto name : kTrainBatches) train_files.push_back(dir / name);
    const fs::path test_file = dir / kTestBatch;
    for (const auto& f : train_files)
        if (!fs::exists(f)) throw DataError("missing CIFAR-10 batch: " + f.string());
    if (!fs::exists(test_file)) throw DataError("missing CIFAR-10 batch: " + test_file.string());

    auto build = [&](const std::vector<fs::path>& files, std::size_t limit) {
        StreamPairSet set;
        set.side = o.size;
        for (const auto& f : files) {
            for (const auto& rec : load_cifar_batch(f)) {
                if (limit != 0 && set.size() == limit) return set;
                add_stream_pair(set, rec, o.canny);
            }
        }
        return set;
    };

    fs::create_directories(o.out);
    const auto train = build(train_files, o.train_limit);
    save_container(o.out / "train.lcds", train);
    const auto test = build({test_file}, o.test_limit);
    save_container(o.out / "test.lcds", test);
    log << "prepare: " << train.size() << " train, " << test.size() << " test records at " << o.size << "x" << o.size
        << "\n";

    Json m = manifest_base("prepare");
    m["flags"] = Json{{"cifar_dir", o.cifar_dir.generic_string()},
                      {"out", o.out.generic_string()},
                      {"size", o.size},
                      {"canny_sigma", o.canny.sigma},
                      {"canny_low", o.canny.low},
                      {"canny_high", o.canny.high},
                      {"train_limit", o.train_limit},
                      {"test_limit", o.test_limit}};
    m["seed"] = nullptr;
    Json inputs = Json::array();
    for (const auto& f : train_files) inputs.push_back(file_entry(f));
    inputs.push_back(file_entry(test_file));
    m["inputs"] = inputs;
    m["outputs"] = Json::array({file_entry(o.out / "train.lcds", o.out), file_entry(o.out / "test.lcds", o.out)});
    m["counts"] = Json{{"train", train.size()}, {"test", test.size()}};
    write_manifest(o.out, m);
}

// ---------------------------------------------------------------------------
// train / compare

struct Datasets {
    StreamPairSet train;
    StreamPairSet test;
    Json inputs = Json::array();
};

inline Datasets load_datasets(const RunOptions& o) {
    Datasets d;
    const auto train_path = o.data / "train.lcds";
    const auto test_path = o.data / "test.lcds";
    d.train = load_container(train_path);
    d.test = load_container(test_path);
    if (o.train_limit != 0) d.train = d.train.head(o.train_limit);
    if (o.test_limit != 0) d.test = d.test.head(o.test_limit);
    if (d.train.side != d.test.side)
        throw ConfigError("side mismatch: train.lcds is " + std::to_string(d.train.side) + ", test.lcds is " +
                          std::to_string(d.test.side));
    if (o.full_fidelity && d.train.side != kFullFidelitySide)
        throw ConfigError("side mismatch: --full-fidelity needs containers prepared with --size " +
                          std::to_string(kFullFidelitySide) + ", got " + std::to_string(d.train.side));
    d.inputs.push_back(file_entry(train_path));
    d.inputs.push_back(file_entry(test_path));
    return d;
}

inline ArchSpec model_spec(const ModelChoice& m, const RunOptions& o, std::size_t side) {
    return ArchSpec::parse(o.resolved_arch_string(), m.mode, m.streams, side, o.resolved_padding());
}

/// Trains one model row into `dir` (metrics.csv, model.lckp, manifest.json)
/// and returns its final test record.
inline MetricsRecord run_model(const ModelChoice& m, const RunOptions& o, const Datasets& data, const fs::path& dir,
                               std::string_view command, std::ostream& log, std::mutex& log_mutex) {
    auto net = build_network<float>(model_spec(m, o, data.train.side), o.train.seed);
    auto on_record = [&](const MetricsRecord& r) {
        std::lock_guard lock(log_mutex);
        log << "[" << m.name << "] epoch " << r.epoch << " " << split_name(r.split) << " loss "
            << format_fixed(r.loss, 4) << " acc " << format_fixed(r.accuracy, 4) << "\n";
    };
    auto records = train(net, data.train, data.test, m.stream, o.train, on_record);

    fs::create_directories(dir);
    {
        std::ofstream csv(dir / "metrics.csv");
        write_metrics_csv(csv, MetricsHeader{net.spec().text(), std::string(m.name), o.train.seed,
                                             o.train.learning_rate, o.train.batch_size, o.train.momentum},
                          records);
        if (!csv) throw DataError("cannot write " + (dir / "metrics.csv").string());
    }
    {
        std::ofstream ck(dir / "model.lckp", std::ios::binary);
        save_checkpoint(ck, net);
        if (!ck) throw DataError("cannot write " + (dir / "model.lckp").string());
    }

    MetricsRecord final_test{o.train.epochs, Split::Test, 0.0, 0.0};
    if (!records.empty() && records.back().split == Split::Test)
        final_test = records.back();
    else
        final_test = evaluate(net, data.test, m.stream, Split::Test, 256, o.train.epochs);

    Json man = manifest_base(command);
    Json flags = o.to_json();
    flags["arch"] = m.name;
    man["flags"] = flags;
    man["seed"] = o.train.seed;
    man["model"] = m.name;
    man["mode"] = mode_name(m.mode);
    man["stream"] = stream_name(m.stream);
    man["parameters"] = net.parameter_count();
    man["inputs"] = data.inputs;
    man["outputs"] = Json::array({file_entry(dir / "metrics.csv", dir), file_entry(dir / "model.lckp", dir)});
    man["final_test"] = Json{{"loss", final_test.loss}, {"accuracy", final_test.accuracy}};
    write_manifest(dir, man);
    return final_test;
}

inline void cmd_train(const RunOptions& o, std::ostream& log) {
    o.train.validate();
    const auto& m = model_choice(o.arch);
    parse_arch(o.resolved_arch_string());  // report notation errors before loading data
    const auto data = load_datasets(o);
    std::mutex mu;
    const auto rec = run_model(m, o, data, o.out, "train", log, mu);
    log << m.name << ": test loss " << format_fixed(rec.loss, 4) << " accuracy " << format_fixed(rec.accuracy, 4)
        << "\n";
}

struct ComparisonRow {
    std::string model;
    MetricsRecord result;
};

inline std::string comparison_table(std::span<const ComparisonRow> rows) {
    std::ostringstream os;
    os << std::left << std::setw(14) << "Model" << std::setw(10) << "Loss" << "Accuracy\n";
    for (const auto& r : rows)
        os << std::setw(14) << r.model << std::setw(10) << format_fixed(r.result.loss, 4)
           << format_fixed(r.result.accuracy, 4) << "\n";
    return os.str();
}

inline std::vector<ComparisonRow> cmd_compare(const RunOptions& o, std::ostream& out, std::ostream& log) {
    o.train.validate();
    if (o.threads == 0) throw ConfigError("--threads must be >= 1");
    parse_arch(o.resolved_arch_string());
    const auto data = load_datasets(o);
    for (const auto& m : kModels) build_network<float>(model_spec(m, o, data.train.side), o.train.seed);  // fail fast

    std::vector<ComparisonRow> rows(kModels.size());
    std::vector<std::exception_ptr> errors(kModels.size());
    std::atomic<std::size_t> next{0};
    std::mutex log_mutex;
    auto worker = [&] {
        for (std::size_t i = next++; i < kModels.size(); i = next++) {
            try {
                const auto& m = kModels[i];
                rows[i] = {std::string(m.name), run_model(m, o, data, o.out / m.name, "compare", log, log_mutex)};
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    {
        std::vector<std::jthread> pool;
        for (std::size_t t = 1; t < std::min(o.threads, kModels.size()); ++t) pool.emplace_back(worker);
        worker();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);

    const auto table = comparison_table(rows);
    out << table;
    {
        std::ofstream txt(o.out / "comparison.txt");
        txt << table;
        std::ofstream csv(o.out / "comparison.csv");
        csv << "model,loss,accuracy\n";
        for (const auto& r : rows)
            csv << r.model << ',' << format_fixed(r.result.loss) << ',' << format_fixed(r.result.accuracy) << "\n";
    }

    Json man = manifest_base("compare");
    Json flags = o.to_json();
    flags["threads"] = o.threads;
    man["flags"] = flags;
    man["seed"] = o.train.seed;
    man["inputs"] = data.inputs;
    Json outputs = Json::array({file_entry(o.out / "comparison.csv", o.out), file_entry(o.out / "comparison.txt", o.out)});
    for (const auto& m : kModels) {
        outputs.push_back(file_entry(o.out / m.name / "metrics.csv", o.out));
        outputs.push_back(file_entry(o.out / m.name / "model.lckp", o.out));
    }
    man["outputs"] = outputs;
    write_manifest(o.out, man);
    return rows;
}

// ---------------------------------------------------------------------------
// eval

struct EvalOptions {
    fs::path data;
    fs::path checkpoint;
    fs::path out;  // defaults to the checkpoint's directory
    std::string split = "test";
    std::string stream = "auto";
    std::size_t limit = 0;
};

/// Single-stream checkpoints do not record which stream they saw; the train
/// manifest next to them does.
inline StreamSelect eval_stream(const EvalOptions& o, const Network<float>& net) {
    if (net.streams() != 1) return StreamSelect::Both;
    std::string s = o.stream;
    if (s == "auto") {
        s = "gray";
        const auto sibling = o.checkpoint.parent_path() / "manifest.json";
        if (fs::exists(sibling)) {
            std::ifstream in(sibling);
            const auto j = Json::parse(in, nullptr, false);
            if (!j.is_discarded() && j.contains("stream") && j["stream"].is_string()) s = j["stream"];
        }
    }
    if (s == "edge") return StreamSelect::Edge;
    if (s == "gray") return StreamSelect::Gray;
    throw ConfigError("single-stream checkpoint needs --stream gray or edge, got '" + s + "'");
}

inline MetricsRecord cmd_eval(const EvalOptions& o, std::ostream& out) {
    std::ifstream ck(o.checkpoint, std::ios::binary);
    if (!ck) throw DataError("cannot open " + o.checkpoint.string());
    const auto net = load_checkpoint<float>(ck);
    const auto data_path = o.data / (o.split + ".lcds");
    auto data = load_container(data_path);
    if (o.limit != 0) data = data.head(o.limit);
    const auto which = eval_stream(o, net);
    const auto rec = evaluate(net, data, which, o.split == "train" ? Split::Train : Split::Test);
    out << "loss " << format_fixed(rec.loss) << " accuracy " << format_fixed(rec.accuracy) << " (" << data.size()
        << " records)\n";

    const fs::path dir = o.out.empty() ? o.checkpoint.parent_path() : o.out;
    if (!dir.empty()) fs::create_directories(dir);
    const auto csv_name = "eval_" + o.split + ".csv";
    {
        std::ofstream csv(dir / csv_name);
        csv << "split,records,loss,accuracy\n"
            << o.split << ',' << data.size() << ',' << format_fixed(rec.loss) << ',' << format_fixed(rec.accuracy)
            << "\n";
    }
    Json man = manifest_base("eval");
    man["flags"] = Json{{"data", o.data.generic_string()},
                        {"checkpoint", o.checkpoint.generic_string()},
                        {"out", dir.generic_string()},
                        {"split", o.split},
                        {"stream", stream_name(which)},
                        {"limit", o.limit}};
    man["seed"] = net.seed();
    man["mode"] = mode_name(net.spec().mode);
    man["stream"] = stream_name(which);
    man["inputs"] = Json::array({file_entry(o.checkpoint), file_entry(data_path)});
    man["outputs"] = Json::array({file_entry(dir / csv_name, dir)});
    man["result"] = Json{{"loss", rec.loss}, {"accuracy", rec.accuracy}};
    write_manifest(dir, man, "eval_" + o.split + ".manifest.json");
    return rec;
}

// ---------------------------------------------------------------------------
// Entry point

inline void add_run_flags(CLI::App* cmd, RunOptions& o) {
    cmd->add_option("--data", o.data, "Directory holding train.lcds and test.lcds")->required();
    cmd->add_option("--out", o.out, "Output directory")->required();
    cmd->add_option("--arch-string", o.arch_string, "Architecture override (arrow notation)");
    cmd->add_option("--padding", o.padding, "Convolution padding policy")
        ->check(CLI::IsMember({"valid", "same-3x3", "same"}));
    cmd->add_flag("--full-fidelity", o.full_fidelity, "224x224 inputs with the full-scale architecture");
    cmd->add_option("--epochs", o.train.epochs)->capture_default_str();
    cmd->add_option("--batch", o.train.batch_size)->capture_default_str();
    cmd->add_option("--lr", o.train.learning_rate)->capture_default_str();
    cmd->add_option("--momentum", o.train.momentum)->capture_default_str();
    cmd->add_option("--seed", o.train.seed)->capture_default_str();
    cmd->add_option("--train-limit", o.train_limit, "Use only the first N training records (0 = all)");
    cmd->add_option("--test-limit", o.test_limit, "Use only the first N test records (0 = all)");
    cmd->fallthrough();  // --config belongs to the root app
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Multistream CNN engine with lattice cross-fusion", "lcnn"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(kToolVersion));
    app.set_config("--config", "", "TOML/INI file; keys go under [train] or [compare], flags override them");
    app.allow_config_extras(CLI::config_extras_mode::error);

    PrepareOptions prep;
    auto* prepare = app.add_subcommand("prepare", "Build grayscale/edge containers from CIFAR-10 binary batches");
    prepare->add_option("--cifar-dir", prep.cifar_dir, "Directory with data_batch_*.bin and test_batch.bin")->required();
    prepare->add_option("--out", prep.out, "Output directory")->required();
    prepare->add_option("--size", prep.size, "Output side in pixels")->capture_default_str();
    prepare->add_option("--canny-sigma", prep.canny.sigma)->capture_default_str();
    prepare->add_option("--canny-low", prep.canny.low)->capture_default_str();
    prepare->add_option("--canny-high", prep.canny.high)->capture_default_str();
    prepare->add_option("--train-limit", prep.train_limit, "Keep only the first N training records (0 = all)");
    prepare->add_option("--test-limit", prep.test_limit, "Keep only the first N test records (0 = all)");

    RunOptions tr;
    auto* train_cmd = app.add_subcommand("train", "Train one model");
    add_run_flags(train_cmd, tr);
    train_cmd->add_option("--arch", tr.arch, "Model")->check(CLI::IsMember(kArchValues))->capture_default_str();

    RunOptions cmp;
    auto* compare = app.add_subcommand("compare", "Train all five model rows and tabulate test results");
    add_run_flags(compare, cmp);
    compare->add_option("--threads", cmp.threads, "Model rows trained concurrently")->capture_default_str();

    EvalOptions ev;
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
    eval->add_option("--data", ev.data, "Directory holding the containers")->required();
    eval->add_option("--checkpoint", ev.checkpoint)->required();
    eval->add_option("--out", ev.out, "Output directory (default: next to the checkpoint)");
    eval->add_option("--split", ev.split)->check(CLI::IsMember({"train", "test"}))->capture_default_str();
    eval->add_option("--stream", ev.stream, "Input stream for single-stream checkpoints")
        ->check(CLI::IsMember({"auto", "gray", "edge"}))
        ->capture_default_str();
    eval->add_option("--limit", ev.limit, "Use only the first N records (0 = all)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err);
    }

    try {
        if (*prepare) cmd_prepare(prep, err);
        if (*train_cmd) cmd_train(tr, err);
        if (*compare) cmd_compare(cmp, out, err);
        if (*eval) cmd_eval(ev, out);
    } catch (const std::exception& e) {
        err << "lcnn: error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

/// Convenience overload for tests.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    std::vector<const char*> argv{"lcnn"};
    for (const auto& a : args) argv.push_back(a.c_str());
    return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace lcnn::cli
