#include "dc/cli.hpp"

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "dc/coresets.hpp"
#include "dc/evalharness.hpp"
#include "dc/runconfig.hpp"
#include "dc/util.hpp"

namespace dc {

namespace {

namespace fs = std::filesystem;

struct ArtifactDir {
    fs::path dir;
    std::vector<std::string> names;

    explicit ArtifactDir(const std::string& out) : dir(out) { fs::create_directories(dir); }

    std::string path(const std::string& name) {
        names.push_back(name);
        return (dir / name).string();
    }

    void write_text(const std::string& name, const std::string& text) {
        std::ofstream f(path(name), std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot write '" + name + "' under " + dir.string());
        f << text;
    }

    // one "hash  name" line per artifact, hashed over file bytes
    void finish_manifest() {
        std::ostringstream os;
        for (const auto& n : names) {
            std::ifstream f(dir / n, std::ios::binary);
            std::stringstream ss;
            ss << f.rdbuf();
            const std::string bytes = ss.str();
            os << hex64(fnv1a64(bytes)) << "  " << n << "\n";
        }
        std::ofstream f(dir / "manifest.txt", std::ios::binary | std::ios::trunc);
        f << os.str();
    }
};

struct LoadedData {
    Dataset train, test;
};

LoadedData load_dataset(RunConfig& cfg, uint64_t seed) {
    const std::string name = cfg.get_str("dataset", "toy");
    if (name == "toy") {
        ToyOptions opt;
        opt.jitter = static_cast<int>(cfg.get_int("toy.jitter", opt.jitter));
        opt.noise_std = cfg.get_double("toy.noise", opt.noise_std);
        opt.test_per_class = static_cast<int>(cfg.get_int("toy.test_per_class", 0));
        const int classes = static_cast<int>(cfg.get_int("toy.classes", 10));
        const int per_class = static_cast<int>(cfg.get_int("toy.per_class", 500));
        const int size = static_cast<int>(cfg.get_int("toy.size", 16));
        const uint64_t toy_seed = static_cast<uint64_t>(cfg.get_int("toy.seed", static_cast<int64_t>(seed)));
        auto [train, test] = make_toy(classes, per_class, size, toy_seed, opt);
        return {std::move(train), std::move(test)};
    }
    const std::string dir = cfg.require_str("data_dir");
    if (name == "mnist" || name == "fashionmnist") {
        auto [train, test] = load_mnist_dir(dir, name);
        return {std::move(train), std::move(test)};
    }
    if (name == "cifar10") {
        auto [train, test] = load_cifar10_dir(dir);
        return {std::move(train), std::move(test)};
    }
    throw ConfigError("unknown dataset '" + name + "' (toy, mnist, fashionmnist, cifar10)");
}

CondenseConfig condense_config(RunConfig& cfg, uint64_t seed, int workers) {
    const int ipc = static_cast<int>(cfg.get_int("ipc", 1));
    CondenseConfig c = default_condense_config(ipc);
    c.outer_steps = static_cast<int>(cfg.get_int("condense.outer_steps", c.outer_steps));
    c.inner_steps = static_cast<int>(cfg.get_int("condense.inner_steps", c.inner_steps));
    c.synth_steps = static_cast<int>(cfg.get_int("condense.synth_steps", c.synth_steps));
    c.theta_steps = static_cast<int>(cfg.get_int("condense.theta_steps", c.theta_steps));
    c.synth_lr = static_cast<float>(cfg.get_double("condense.synth_lr", c.synth_lr));
    c.theta_lr = static_cast<float>(cfg.get_double("condense.theta_lr", c.theta_lr));
    c.theta_momentum = static_cast<float>(cfg.get_double("condense.theta_momentum", c.theta_momentum));
    c.real_batch_per_class = static_cast<int>(cfg.get_int("condense.real_batch", c.real_batch_per_class));
    const std::string init = cfg.get_str("condense.init", "noise");
    if (init == "noise") c.init = SynthInit::GaussianNoise;
    else if (init == "real") c.init = SynthInit::RealSample;
    else throw ConfigError("condense.init must be noise or real");
    const std::string dist = cfg.get_str("condense.distance", "layerwise");
    if (dist == "layerwise") c.distance = MatchDistance::Layerwise;
    else if (dist == "euclidean") c.distance = MatchDistance::FlatEuclidean;
    else if (dist == "cosine") c.distance = MatchDistance::FlatCosine;
    else throw ConfigError("condense.distance must be layerwise, euclidean or cosine");
    c.early_stop_window = static_cast<int>(cfg.get_int("condense.early_stop_window", c.early_stop_window));
    c.early_stop_tol = static_cast<float>(cfg.get_double("condense.early_stop_tol", c.early_stop_tol));
    c.parallel_classes = cfg.get_bool("condense.parallel_classes", false);
    c.seed = seed;
    c.workers = workers;
    return c;
}

FitOptions fit_options(RunConfig& cfg, const std::string& prefix, int workers,
                       int default_epochs = 100) {
    FitOptions opt;
    opt.epochs = static_cast<int>(cfg.get_int(prefix + ".epochs", default_epochs));
    opt.lr = static_cast<float>(cfg.get_double(prefix + ".lr", 0.01));
    opt.momentum = static_cast<float>(cfg.get_double(prefix + ".momentum", 0.9));
    opt.cosine = cfg.get_bool(prefix + ".cosine", true);
    opt.batch = static_cast<int>(cfg.get_int(prefix + ".batch", 64));
    opt.workers = workers;
    return opt;
}

std::string loss_csv(const std::vector<float>& history) {
    std::ostringstream os;
    os << "step,mean_loss\n";
    for (size_t i = 0; i < history.size(); ++i) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%zu,%.8g\n", i, static_cast<double>(history[i]));
        os << buf;
    }
    return os.str();
}

std::string eval_csv(const EvalReport& rep) {
    std::ostringstream os;
    os << "set_id,model_id,accuracy\n";
    for (int s = 0; s < rep.n_sets; ++s)
        for (int m = 0; m < rep.n_models; ++m) {
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%d,%d,%.6f\n", s, m,
                          rep.accuracies[static_cast<size_t>(s) * rep.n_models + m]);
            os << buf;
        }
    return os.str();
}

void print_report(const std::string& tag, const EvalReport& rep) {
    std::printf("[%s] %d sets x %d models: accuracy %.4f +/- %.4f\n", tag.c_str(), rep.n_sets,
                rep.n_models, rep.mean(), rep.stddev());
}

// "W=32,64;D=1,2;N=instance;A=relu;P=avg,max" — unspecified axes keep the
// full grid.
GridAxes parse_grid(const std::string& text) {
    GridAxes axes;
    if (text.empty()) return axes;
    std::stringstream ss(text);
    std::string part;
    while (std::getline(ss, part, ';')) {
        if (part.empty()) continue;
        const auto eq = part.find('=');
        if (eq == std::string::npos) throw ConfigError("grid: expected AXIS=v1,v2 in '" + part + "'");
        const std::string axis = part.substr(0, eq);
        std::stringstream vals(part.substr(eq + 1));
        std::string v;
        std::vector<std::string> items;
        while (std::getline(vals, v, ',')) items.push_back(v);
        if (items.empty()) throw ConfigError("grid: axis '" + axis + "' has no values");
        if (axis == "W" || axis == "w") {
            axes.width.clear();
            for (const auto& s : items) axes.width.push_back(std::stoi(s));
        } else if (axis == "D" || axis == "d") {
            axes.depth.clear();
            for (const auto& s : items) axes.depth.push_back(std::stoi(s));
        } else if (axis == "N" || axis == "n") {
            axes.norm.clear();
            for (const auto& s : items) axes.norm.push_back(parse_arch("convnet:N=" + s).norm);
        } else if (axis == "A" || axis == "a") {
            axes.act.clear();
            for (const auto& s : items) axes.act.push_back(parse_arch("convnet:A=" + s).act);
        } else if (axis == "P" || axis == "p") {
            axes.pool.clear();
            for (const auto& s : items) axes.pool.push_back(parse_arch("convnet:P=" + s).pool);
        } else {
            throw ConfigError("grid: unknown axis '" + axis + "' (W, D, N, A, P)");
        }
    }
    return axes;
}

struct CommonArgs {
    std::string config_path;
    std::string out_dir;
    int64_t seed = -1;
    int workers = 1;
    std::string grid;  // nas only
};

struct Resolved {
    RunConfig cfg;
    uint64_t seed;
    int workers;
    std::string out;
};

Resolved resolve(CommonArgs& a) {
    RunConfig cfg = a.config_path.empty() ? RunConfig{} : RunConfig::from_file(a.config_path);
    if (a.seed >= 0) cfg.set("seed", std::to_string(a.seed));
    if (!a.out_dir.empty()) cfg.set("out_dir", a.out_dir);
    if (a.workers > 0) cfg.set("workers", std::to_string(a.workers));
    Resolved r{std::move(cfg), 0, 1, ""};
    r.seed = static_cast<uint64_t>(r.cfg.get_int("seed", 42));
    r.workers = static_cast<int>(r.cfg.get_int("workers", 1));
    r.out = r.cfg.get_str("out_dir", "out");
    return r;
}

int cmd_condense(CommonArgs& a) {
    Resolved r = resolve(a);
    auto data = load_dataset(r.cfg, r.seed);
    const ArchSpec arch = parse_arch(r.cfg.get_str("arch", "convnet"));
    CondenseConfig cc = condense_config(r.cfg, r.seed, r.workers);
    r.cfg.ensure_all_consumed();

    ArtifactDir out(r.out);
    CondenseHooks hooks;
    const int every = std::max(1, cc.outer_steps / 20);
    hooks.on_outer_step = [&](int k, float loss) {
        if (k % every == 0 || k + 1 == cc.outer_steps)
            std::printf("[condense] step %d/%d mean matching loss %.5f\n", k + 1, cc.outer_steps,
                        static_cast<double>(loss));
    };
    auto res = condense(data.train, arch, cc, hooks);
    if (res.early_stopped)
        std::printf("[condense] early stop after %d outer steps\n", res.outer_steps_run);

    save_condensed(res.set, out.path("condensed.dcgm"));
    out.write_text("loss.csv", loss_csv(res.loss_history));
    export_image_grid(res.set, out.path("grid.png"));
    out.write_text("run.config", r.cfg.resolved());
    out.finish_manifest();
    std::printf("[condense] wrote %s\n", (out.dir / "condensed.dcgm").string().c_str());
    return 0;
}

int cmd_eval(CommonArgs& a, const std::vector<std::string>& set_paths) {
    Resolved r = resolve(a);
    if (set_paths.empty()) throw ConfigError("eval: provide at least one .dcgm path");
    auto data = load_dataset(r.cfg, r.seed);
    std::vector<SyntheticSet> sets;
    for (const auto& p : set_paths) sets.push_back(load_condensed(p));
    const ArchSpec arch = parse_arch(r.cfg.get_str("eval.arch", r.cfg.get_str("arch", "convnet")));
    const int n_models = static_cast<int>(r.cfg.get_int("eval.n_models", 20));
    FitOptions opt = fit_options(r.cfg, "eval", r.workers);
    r.cfg.ensure_all_consumed();

    ArtifactDir out(r.out);
    auto rep = evaluate_protocol(
        [&](int s) { return sets[static_cast<size_t>(s)].as_train_set(); }, data.test, arch,
        static_cast<int>(sets.size()), n_models, opt, r.seed, r.workers);
    rep.train_provenance = set_paths[0];
    print_report("eval", rep);
    out.write_text("eval.csv", eval_csv(rep));
    out.write_text("run.config", r.cfg.resolved());
    out.finish_manifest();
    return 0;
}

int cmd_coreset(CommonArgs& a, const std::string& method) {
    Resolved r = resolve(a);
    auto data = load_dataset(r.cfg, r.seed);
    const int ipc = static_cast<int>(r.cfg.get_int("ipc", 1));
    const int n_sets = static_cast<int>(r.cfg.get_int("eval.n_sets", 5));
    const int n_models = static_cast<int>(r.cfg.get_int("eval.n_models", 20));
    const ArchSpec arch = parse_arch(r.cfg.get_str("eval.arch", r.cfg.get_str("arch", "convnet")));
    const ArchSpec extractor = parse_arch(r.cfg.get_str("coreset.extractor_arch", "convnet:N=batch"));
    const int extractor_epochs = static_cast<int>(r.cfg.get_int("coreset.extractor_epochs", 20));
    const int forgetting_epochs = static_cast<int>(r.cfg.get_int("coreset.forgetting_epochs", 20));
    FitOptions opt = fit_options(r.cfg, "eval", r.workers);
    r.cfg.ensure_all_consumed();

    ArtifactDir out(r.out);
    std::vector<std::vector<int>> selections;
    for (int s = 0; s < n_sets; ++s) {
        const uint64_t set_seed = derive_stream(r.seed, 0xc0, static_cast<uint64_t>(s));
        std::vector<int> idx;
        if (method == "random") {
            idx = random_select(data.train, ipc, set_seed);
        } else if (method == "herding" || method == "kcenter") {
            auto feats = extract_features(data.train, extractor, extractor_epochs, set_seed, r.workers);
            idx = method == "herding" ? herding_select(feats, ipc) : kcenter_select(feats, ipc);
        } else if (method == "forgetting") {
            idx = forgetting_select(data.train, extractor, forgetting_epochs, set_seed, ipc, r.workers);
        } else {
            throw ConfigError("coreset method must be random, herding, kcenter or forgetting");
        }
        std::ostringstream os;
        os << "# method=" << method << " ipc=" << ipc << " seed=" << set_seed << "\n";
        for (int i : idx) os << i << "\n";
        out.write_text("indices_" + method + "_set" + std::to_string(s) + ".txt", os.str());
        selections.push_back(std::move(idx));
        std::printf("[coreset] %s set %d: %zu indices\n", method.c_str(), s, selections.back().size());
    }
    auto rep = evaluate_protocol(
        [&](int s) { return subset(data.train, selections[static_cast<size_t>(s)]); }, data.test,
        arch, n_sets, n_models, opt, r.seed, r.workers);
    print_report("coreset " + method, rep);
    out.write_text("eval.csv", eval_csv(rep));
    out.write_text("run.config", r.cfg.resolved());
    out.finish_manifest();
    return 0;
}

int cmd_nas(CommonArgs& a) {
    Resolved r = resolve(a);
    auto data = load_dataset(r.cfg, r.seed);
    const std::string grid_text = !a.grid.empty() ? a.grid : r.cfg.get_str("nas.grid", "");
    if (!a.grid.empty()) (void)r.cfg.get_str("nas.grid", "");
    auto space = conv_grid(parse_grid(grid_text));
    const int ipc = static_cast<int>(r.cfg.get_int("nas.ipc", 10));
    const std::string proxy_kind = r.cfg.get_str("nas.proxy", "condensed");
    const int top_k = static_cast<int>(r.cfg.get_int("nas.top_k", 10));
    const double val_fraction = r.cfg.get_double("nas.val_fraction", 0.1);
    FitOptions opt = fit_options(r.cfg, "nas", r.workers);
    const std::string reference = r.cfg.get_str("nas.reference", "none");
    const int ref_epochs = static_cast<int>(r.cfg.get_int("nas.reference_epochs", 20));
    const ArchSpec condense_arch = parse_arch(r.cfg.get_str("arch", "convnet"));

    ArtifactDir out(r.out);
    TrainSet proxy;
    if (proxy_kind == "condensed") {
        CondenseConfig cc = condense_config(r.cfg, r.seed, r.workers);
        cc.ipc = ipc;
        r.cfg.ensure_all_consumed();
        auto res = condense(data.train, condense_arch, cc);
        save_condensed(res.set, out.path("proxy.dcgm"));
        proxy = res.set.as_train_set();
    } else if (proxy_kind == "random") {
        r.cfg.ensure_all_consumed();
        proxy = subset(data.train, random_select(data.train, ipc, r.seed));
    } else {
        throw ConfigError("nas.proxy must be condensed or random");
    }

    auto val = validation_split(data.train, val_fraction, r.seed);
    std::vector<double> ref_acc;
    if (reference == "full") {
        ref_acc.resize(space.size());
        FitOptions ref_opt = opt;
        ref_opt.epochs = ref_epochs;
        for (size_t i = 0; i < space.size(); ++i)
            ref_acc[i] = train_from_scratch({data.train.images, data.train.labels}, data.test,
                                            space[i], ref_opt,
                                            derive_stream(r.seed, 0xc1, static_cast<uint64_t>(i)));
    } else if (reference != "none") {
        throw ConfigError("nas.reference must be none or full");
    }

    std::printf("[nas] search space: %zu architectures, proxy %s (%d ipc)\n", space.size(),
                proxy_kind.c_str(), ipc);
    auto res = nas_search(space, proxy, val, opt, top_k, r.seed, ref_acc, r.workers);

    std::ostringstream os;
    os << "arch,val_acc,ref_acc,rank\n";
    std::vector<int> rank_of(space.size(), -1);
    for (size_t pos = 0; pos < res.ranking.size(); ++pos)
        rank_of[static_cast<size_t>(res.ranking[pos])] = static_cast<int>(pos);
    for (size_t i = 0; i < space.size(); ++i) {
        os << res.archs[i] << ',';
        char buf[64];
        if (std::isnan(res.val_acc[i])) os << "failed,";
        else {
            std::snprintf(buf, sizeof(buf), "%.6f,", res.val_acc[i]);
            os << buf;
        }
        if (res.has_reference) {
            std::snprintf(buf, sizeof(buf), "%.6f,", res.ref_acc[i]);
            os << buf;
        } else {
            os << ',';
        }
        if (rank_of[i] >= 0) os << rank_of[i];
        os << "\n";
    }
    out.write_text("nas.csv", os.str());
    for (size_t i = 0; i < space.size(); ++i)
        if (!res.failures[i].empty())
            std::fprintf(stderr, "[nas] %s failed: %s\n", res.archs[i].c_str(),
                         res.failures[i].c_str());
    if (res.has_reference)
        std::printf("[nas] spearman over top %d: %.4f\n",
                    static_cast<int>(res.top.size()), res.spearman_top);
    out.write_text("run.config", r.cfg.resolved());
    out.finish_manifest();
    return 0;
}

int cmd_inspect(const std::string& path) {
    std::printf("%s", describe_condensed(path).c_str());
    return 0;
}

} // namespace

int cli_main(const std::vector<std::string>& args) {
    CLI::App app{"dcgm: dataset condensation with gradient matching"};
    app.require_subcommand(1);

    CommonArgs common;
    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", common.config_path, "key=value config file");
        cmd->add_option("--seed", common.seed, "override the config seed");
        cmd->add_option("--out", common.out_dir, "output directory");
        cmd->add_option("--workers", common.workers, "worker threads");
    };

    auto* condense_cmd = app.add_subcommand("condense", "learn a condensed synthetic set");
    add_common(condense_cmd);

    auto* eval_cmd = app.add_subcommand("eval", "train-from-scratch evaluation of saved sets");
    std::vector<std::string> eval_paths;
    add_common(eval_cmd);
    eval_cmd->add_option("sets", eval_paths, ".dcgm files, one per set");

    auto* coreset_cmd = app.add_subcommand("coreset", "select and evaluate a coreset baseline");
    std::string method;
    add_common(coreset_cmd);
    coreset_cmd->add_option("method", method, "random | herding | kcenter | forgetting")
        ->required();

    auto* nas_cmd = app.add_subcommand("nas", "architecture ranking on a proxy set");
    add_common(nas_cmd);
    nas_cmd->add_option("--grid", common.grid, "axis subsets, e.g. W=32,64;D=1,2");

    auto* inspect_cmd = app.add_subcommand("inspect", "print a .dcgm header");
    std::string inspect_path;
    inspect_cmd->add_option("path", inspect_path, "condensed set file")->required();

    std::vector<const char*> argv;
    argv.push_back("dcond");
    for (const auto& s : args) argv.push_back(s.c_str());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (app.got_subcommand(condense_cmd)) return cmd_condense(common);
        if (app.got_subcommand(eval_cmd)) return cmd_eval(common, eval_paths);
        if (app.got_subcommand(coreset_cmd)) return cmd_coreset(common, method);
        if (app.got_subcommand(nas_cmd)) return cmd_nas(common);
        if (app.got_subcommand(inspect_cmd)) return cmd_inspect(inspect_path);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const IoError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 2;
}

} // namespace dc
