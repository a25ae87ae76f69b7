#include <chrono>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "jsynth/experiment.hpp"
#include "jsynth/gradcheck.hpp"

namespace {

using namespace jsynth;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

struct CliOptions {
    std::string config_path;
    std::string out_dir;
    std::string regime = "joint";
    std::uint64_t seed = 0;
    bool seed_given = false;
    int folds = 0;
};

ExperimentConfig load_config(const CliOptions& opt) {
    if (opt.config_path.empty()) throw ConfigError("--config is required");
    ExperimentConfig cfg = load_experiment_config(opt.config_path);
    if (!opt.out_dir.empty()) cfg.out_dir = opt.out_dir;
    if (opt.folds > 0) cfg.n_folds = opt.folds;
    return cfg;
}

int run_gen_phantom(const CliOptions& opt) {
    ExperimentConfig cfg = load_config(opt);
    if (!opt.out_dir.empty()) cfg.dataset_root = opt.out_dir;
    cmd_gen_phantom(cfg, std::cout);
    return kExitOk;
}

int run_validate_data(const CliOptions& opt, const std::string& root_flag) {
    std::string root = root_flag;
    if (root.empty()) root = load_config(opt).dataset_root;
    cmd_validate_data(root, std::cout);
    return kExitOk;
}

int run_train(const CliOptions& opt) {
    ExperimentConfig cfg = load_config(opt);
    const Regime regime = regime_from_name(opt.regime);
    const std::uint64_t seed = opt.seed_given ? opt.seed : cfg.seeds.front();

    const auto cohort = read_dataset(cfg.dataset_root);
    std::vector<std::string> ids;
    for (const auto& s : cohort) ids.push_back(s.id);
    const auto plans = plan_folds(ids, cfg.n_folds, cfg.n_test, cfg.n_val, cfg.fold_seed);

    const TrainConfig train_cfg = cfg.train_template(regime, derive_seed(seed, 0));
    const auto result = train(cohort, plans[0], train_cfg);

    const std::string dir = cfg.out_dir + "/train_" + regime_name(regime) + "_seed" +
                            std::to_string(seed);
    std::filesystem::create_directories(dir);
    detail::write_text(dir + "/loss_curve.csv", curve_to_csv(result.curve));
    {
        std::ofstream f(dir + "/classifier.jsyn", std::ios::binary);
        f.write(result.classifier_checkpoint.data(),
                static_cast<std::streamsize>(result.classifier_checkpoint.size()));
    }
    if (!result.generator_checkpoint.empty()) {
        std::ofstream f(dir + "/generator.jsyn", std::ios::binary);
        f.write(result.generator_checkpoint.data(),
                static_cast<std::streamsize>(result.generator_checkpoint.size()));
    }
    std::cout << "trained " << regime_name(regime) << " on fold 0 (seed " << seed
              << "), selected epoch " << result.selected_epoch << ", outputs in " << dir << "\n";
    return kExitOk;
}

int run_cross_validate(const CliOptions& opt) {
    ExperimentConfig cfg = load_config(opt);
    if (opt.seed_given) cfg.seeds = {opt.seed};
    const auto outputs = cross_validate(cfg, std::cout);
    std::cout << "per-subject rows: " << outputs.per_subject_path << "\n"
              << "summary:          " << outputs.summary_path << "\n";
    return kExitOk;
}

int run_report(const CliOptions& opt) {
    ExperimentConfig cfg = load_config(opt);
    cmd_report(cfg, std::cout);
    return kExitOk;
}

int run_synthesize(const std::string& checkpoint, const std::string& t1_path,
                   const std::string& out_path, const std::string& reference_path,
                   Dim slice_size) {
    Network generator = Network::load(checkpoint);
    if (generator.config().in_channels != 1 ||
        generator.config().final_activation != FinalActivation::LeakyReLU)
        throw ConfigError("synthesize: checkpoint is not a generator (1-channel, leaky head)");
    const Volume t1 = read_volume(t1_path, Modality::T1);
    const Volume synth = synthesize(generator, t1, slice_size);
    write_volume(synth, out_path);
    std::cout << "wrote " << out_path << " (" << synth.depth << "x" << synth.height << "x"
              << synth.width << ")\n";
    if (!reference_path.empty()) {
        const Volume reference_raw = read_volume(reference_path, Modality::FLAIR);
        if (!reference_raw.same_dims(synth))
            throw DataError("synthesize: reference dims differ from the synthetic volume");
        const Volume reference = gaussian_normalize(reference_raw);
        const Volume mask = detail::support_mask(reference_raw);
        std::cout << "MAE " << mae(reference, synth, mask) << "\n"
                  << "PSNR " << psnr(reference, synth, mask) << " dB\n";
    }
    return kExitOk;
}

int run_grad_check(bool single_seed, std::uint64_t seed) {
    std::vector<std::uint64_t> seeds = {0, 1, 2};
    if (single_seed) seeds = {seed};
    const auto t0 = std::chrono::steady_clock::now();
    const auto result = gradcheck::run_suite(seeds, 1e-4, &std::cout);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << (result.all_pass ? "all gradient checks passed" : "GRADIENT CHECKS FAILED")
              << " (" << secs << " s, seeds";
    for (auto s : seeds) std::cout << " " << s;
    std::cout << ")\n";
    return result.all_pass ? kExitOk : kExitNumeric;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"jsynth: joint FLAIR synthesis and WMH segmentation engine"};
    app.require_subcommand(1);

    CliOptions opt;
    std::string root_flag;

    auto add_common = [&](CLI::App* cmd, bool with_regime = false) {
        cmd->add_option("--config", opt.config_path, "experiment config file");
        cmd->add_option("--out", opt.out_dir, "output directory override");
        cmd->add_option("--folds", opt.folds, "override the number of folds");
        auto* seed_opt = cmd->add_option("--seed", opt.seed, "seed override");
        seed_opt->each([&](const std::string&) { opt.seed_given = true; });
        if (with_regime)
            cmd->add_option("--regime", opt.regime, "unimodal|offline|joint");
    };

    auto* gen = app.add_subcommand("gen-phantom", "generate the phantom dataset");
    add_common(gen);
    auto* validate = app.add_subcommand("validate-data", "check a dataset directory");
    add_common(validate);
    validate->add_option("--root", root_flag, "dataset root (defaults to the config value)");
    auto* tr = app.add_subcommand("train", "train one regime on fold 0");
    add_common(tr, true);
    auto* cv = app.add_subcommand("cross-validate",
                                  "train and score every regime x seed x fold");
    add_common(cv, true);
    auto* rep = app.add_subcommand("report", "emit tables and overlay panels");
    add_common(rep);

    std::string synth_checkpoint, synth_t1, synth_out, synth_reference;
    Dim synth_slice = 64;
    auto* synth = app.add_subcommand("synthesize", "run a generator checkpoint on a T1 volume");
    synth->add_option("checkpoint", synth_checkpoint, "generator .jsyn checkpoint")->required();
    synth->add_option("t1", synth_t1, "input T1 .mvol")->required();
    synth->add_option("output", synth_out, "output synthetic FLAIR .mvol")->required();
    synth->add_option("--reference", synth_reference, "real FLAIR .mvol for MAE/PSNR");
    synth->add_option("--slice-size", synth_slice, "network slice size (default 64)");

    auto* gc = app.add_subcommand("grad-check",
                                  "finite-difference check of every op and the composite");
    auto* gc_seed = gc->add_option("--seed", opt.seed, "run a single seed instead of {0,1,2}");
    gc_seed->each([&](const std::string&) { opt.seed_given = true; });

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return run_gen_phantom(opt);
        if (validate->parsed()) return run_validate_data(opt, root_flag);
        if (tr->parsed()) return run_train(opt);
        if (cv->parsed()) return run_cross_validate(opt);
        if (rep->parsed()) return run_report(opt);
        if (synth->parsed())
            return run_synthesize(synth_checkpoint, synth_t1, synth_out, synth_reference,
                                  synth_slice);
        if (gc->parsed()) return run_grad_check(opt.seed_given, opt.seed);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const NumericError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    }
    return kExitConfig;
}
