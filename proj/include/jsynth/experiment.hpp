#pragma once

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "jsynth/folds.hpp"
#include "jsynth/metrics.hpp"
#include "jsynth/phantom.hpp"
#include "jsynth/train.hpp"

namespace jsynth {

struct ExperimentConfig {
    std::string dataset_root = "phantom_data";
    std::string out_dir = "results";
    PhantomSpec phantom;
    // shared training template; the regime field is filled per run
    int epochs = 10;
    int batch_size = 2;
    double lr = 2e-4;
    double lambda_seg = 1.0;
    Dim slice_size = 64;
    Dim depth = 3;
    Dim base_filters = 16;
    // cross-validation protocol
    int n_folds = 3, n_test = 4, n_val = 2;
    std::uint64_t fold_seed = 0;
    std::vector<std::uint64_t> seeds = {0, 1, 2};
    std::vector<Regime> regimes = {Regime::Unimodal, Regime::Offline, Regime::Joint};
    std::string baseline = "unimodal";
    int n_permutations = 20000;
    std::uint64_t report_seed = 0;

    TrainConfig train_template(Regime regime, std::uint64_t run_seed) const {
        TrainConfig t;
        t.regime = regime;
        t.epochs = epochs;
        t.batch_size = batch_size;
        t.lr = lr;
        t.lambda_seg = lambda_seg;
        t.seed = run_seed;
        t.slice_size = slice_size;
        t.depth = depth;
        t.base_filters = base_filters;
        return t;
    }

    void validate() const {
        phantom.validate();
        train_template(Regime::Joint, 0).validate();
        if (seeds.empty()) throw ConfigError("experiment: seeds list is empty");
        if (regimes.empty()) throw ConfigError("experiment: no regimes enabled");
        if (n_permutations < 1) throw ConfigError("experiment: n_permutations must be >= 1");
    }
};

// ---- flat key = value config files ------------------------------------------------

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline double cfg_double(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const double v = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError(msg("config: bad numeric value '", value, "' for key '", key, "'"));
    }
}

inline std::int64_t cfg_int(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const long long v = std::stoll(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError(msg("config: bad integer value '", value, "' for key '", key, "'"));
    }
}

inline std::vector<std::string> split_commas(const std::string& value) {
    std::vector<std::string> parts;
    std::stringstream ss(value);
    std::string part;
    while (std::getline(ss, part, ',')) {
        part = trim(part);
        if (!part.empty()) parts.push_back(part);
    }
    return parts;
}

}  // namespace detail

inline ExperimentConfig parse_experiment_config(const std::string& text) {
    ExperimentConfig cfg;
    std::istringstream is(text);
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(detail::msg("config line ", line_no, ": expected 'key = value'"));
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));

        if (key == "dataset_root") cfg.dataset_root = value;
        else if (key == "out_dir") cfg.out_dir = value;
        else if (key == "phantom_seed") cfg.phantom.seed = static_cast<std::uint64_t>(detail::cfg_int(key, value));
        else if (key == "n_subjects") cfg.phantom.n_subjects = detail::cfg_int(key, value);
        else if (key == "slices_per_subject") cfg.phantom.slices_per_subject = detail::cfg_int(key, value);
        else if (key == "phantom_height") cfg.phantom.height = detail::cfg_int(key, value);
        else if (key == "phantom_width") cfg.phantom.width = detail::cfg_int(key, value);
        else if (key == "lesion_count_min") cfg.phantom.lesion_count_min = detail::cfg_int(key, value);
        else if (key == "lesion_count_max") cfg.phantom.lesion_count_max = detail::cfg_int(key, value);
        else if (key == "lesion_radius_min") cfg.phantom.lesion_radius_min = detail::cfg_double(key, value);
        else if (key == "lesion_radius_max") cfg.phantom.lesion_radius_max = detail::cfg_double(key, value);
        else if (key == "faint_fraction") cfg.phantom.faint_fraction = detail::cfg_double(key, value);
        else if (key == "noise_sigma") cfg.phantom.noise_sigma = detail::cfg_double(key, value);
        else if (key == "epochs") cfg.epochs = static_cast<int>(detail::cfg_int(key, value));
        else if (key == "batch_size") cfg.batch_size = static_cast<int>(detail::cfg_int(key, value));
        else if (key == "lr") cfg.lr = detail::cfg_double(key, value);
        else if (key == "lambda_seg") cfg.lambda_seg = detail::cfg_double(key, value);
        else if (key == "slice_size") cfg.slice_size = detail::cfg_int(key, value);
        else if (key == "depth") cfg.depth = detail::cfg_int(key, value);
        else if (key == "base_filters") cfg.base_filters = detail::cfg_int(key, value);
        else if (key == "n_folds") cfg.n_folds = static_cast<int>(detail::cfg_int(key, value));
        else if (key == "n_test") cfg.n_test = static_cast<int>(detail::cfg_int(key, value));
        else if (key == "n_val") cfg.n_val = static_cast<int>(detail::cfg_int(key, value));
        else if (key == "fold_seed") cfg.fold_seed = static_cast<std::uint64_t>(detail::cfg_int(key, value));
        else if (key == "seeds") {
            cfg.seeds.clear();
            for (const auto& part : detail::split_commas(value))
                cfg.seeds.push_back(static_cast<std::uint64_t>(detail::cfg_int(key, part)));
        } else if (key == "regimes") {
            cfg.regimes.clear();
            for (const auto& part : detail::split_commas(value))
                cfg.regimes.push_back(regime_from_name(part));
        } else if (key == "baseline") cfg.baseline = value;
        else if (key == "n_permutations") cfg.n_permutations = static_cast<int>(detail::cfg_int(key, value));
        else if (key == "report_seed") cfg.report_seed = static_cast<std::uint64_t>(detail::cfg_int(key, value));
        else throw ConfigError(detail::msg("config line ", line_no, ": unknown key '", key, "'"));
    }
    cfg.validate();
    return cfg;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError(detail::msg("cannot open config '", path, "'"));
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_experiment_config(text);
}

// ---- commands ----------------------------------------------------------------------

inline void cmd_gen_phantom(const ExperimentConfig& cfg, std::ostream& log) {
    auto cohort = generate_phantom(cfg.phantom);
    write_dataset(cohort, cfg.dataset_root);
    Dim lesion_voxels = 0, brain_voxels = 0;
    for (const auto& s : cohort) {
        for (double v : s.label.voxels) lesion_voxels += v == 1.0 ? 1 : 0;
        for (double v : s.t1.voxels) brain_voxels += v != 0.0 ? 1 : 0;
    }
    log << "wrote " << cohort.size() << " subjects (" << cfg.phantom.slices_per_subject
        << " slices of " << cfg.phantom.height << "x" << cfg.phantom.width << ") to "
        << cfg.dataset_root << "\n"
        << "lesion voxels: " << lesion_voxels << " (" << std::fixed
        << 100.0 * lesion_voxels / static_cast<double>(brain_voxels) << "% of brain)\n";
    log.unsetf(std::ios::fixed);
}

inline void cmd_validate_data(const std::string& root, std::ostream& log) {
    auto cohort = read_dataset(root);
    for (const auto& s : cohort) s.validate();
    log << "dataset ok: " << cohort.size() << " subjects, dims " << cohort[0].t1.depth << "x"
        << cohort[0].t1.height << "x" << cohort[0].t1.width << "\n";
}

namespace detail {

inline Volume support_mask(const Volume& reference) {
    Volume mask = Volume::zeros(reference.depth, reference.height, reference.width,
                                Modality::LABEL);
    for (std::size_t i = 0; i < reference.voxels.size(); ++i)
        mask.voxels[i] = reference.voxels[i] != 0.0 ? 1.0 : 0.0;
    return mask;
}

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path);
    if (!f) throw IoError(msg("cannot open '", path, "' for writing"));
    f << text;
    if (!f) throw IoError(msg("write failed for '", path, "'"));
}

inline std::string read_text(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError(msg("cannot open '", path, "'"));
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

inline int thread_budget(std::size_t n_tasks) {
    int budget = static_cast<int>(std::thread::hardware_concurrency());
    if (budget < 1) budget = 1;
    if (const char* env = std::getenv("JSYNTH_THREADS")) {
        try {
            budget = std::max(1, static_cast<int>(cfg_int("JSYNTH_THREADS", env)));
        } catch (const ConfigError&) {
            throw ConfigError(msg("JSYNTH_THREADS: bad value '", env, "'"));
        }
    }
    return std::min<int>(budget, static_cast<int>(n_tasks));
}

}  // namespace detail

// One (regime, seed, fold) training-plus-evaluation unit. Fully isolated: its
// RNG streams derive from (seed, fold) and all writes stay inside `dir`.
struct CvTask {
    Regime regime;
    std::uint64_t seed;
    int fold;
    std::string dir;
};

inline void run_cv_task(const CvTask& task, const ExperimentConfig& cfg,
                        const std::vector<Subject>& cohort, const FoldPlan& plan) {
    namespace fs = std::filesystem;
    fs::create_directories(task.dir);

    TrainConfig train_cfg = cfg.train_template(task.regime, derive_seed(task.seed,
                                                                        static_cast<std::uint64_t>(task.fold)));
    TrainResult result = train(cohort, plan, train_cfg);

    detail::write_text(task.dir + "/loss_curve.csv", curve_to_csv(result.curve));
    {
        std::ofstream f(task.dir + "/classifier.jsyn", std::ios::binary);
        f.write(result.classifier_checkpoint.data(),
                static_cast<std::streamsize>(result.classifier_checkpoint.size()));
    }
    Network classifier = Network::deserialize(result.classifier_checkpoint);
    Network generator({1, 1, 1, 1, FinalActivation::LeakyReLU, 0.2}, 0);
    const bool has_generator = !result.generator_checkpoint.empty();
    if (has_generator) {
        std::ofstream f(task.dir + "/generator.jsyn", std::ios::binary);
        f.write(result.generator_checkpoint.data(),
                static_cast<std::streamsize>(result.generator_checkpoint.size()));
        generator = Network::deserialize(result.generator_checkpoint);
    }

    std::vector<SubjectMetrics> rows;
    for (const auto& id : plan.test_ids) {
        const Subject* subject = nullptr;
        for (const auto& s : cohort)
            if (s.id == id) subject = &s;
        if (!subject) throw DataError(detail::msg("test subject '", id, "' missing"));

        SubjectMetrics row;
        row.method = regime_name(task.regime);
        row.subject = id + "@seed" + std::to_string(task.seed);

        Volume pred;
        if (has_generator) {
            Volume synth = synthesize(generator, subject->t1, cfg.slice_size);
            write_volume(synth, task.dir + "/synth_" + id + ".mvol");
            pred = predict(classifier, subject->t1, &synth, cfg.slice_size);
            const Volume reference = gaussian_normalize(subject->flair);
            const Volume mask = detail::support_mask(subject->flair);
            row.mae = mae(reference, synth, mask);
            row.psnr = psnr(reference, synth, mask);
        } else {
            pred = predict(classifier, subject->t1, nullptr, cfg.slice_size);
        }
        write_volume(pred, task.dir + "/pred_" + id + ".mvol");

        const auto counts = confusion(pred, subject->label);
        row.dsc = dice(counts);
        row.fpr = fpr(counts);
        row.fnr = fnr(counts);
        rows.push_back(std::move(row));
    }
    detail::write_text(task.dir + "/rows.csv", subject_metrics_to_csv(rows));
    detail::write_text(task.dir + "/done", "ok\n");
}

struct CrossValidationOutputs {
    std::string folds_path, per_subject_path, summary_path;
    std::vector<MethodSummary> summaries;
};

// Trains every enabled (regime, seed, fold) combination, scoring test subjects
// and aggregating into per-subject and summary CSVs. Completed task
// directories (marked `done`) are skipped, so interrupted grids resume and
// deleted task outputs are reproduced bit for bit.
inline CrossValidationOutputs cross_validate(const ExperimentConfig& cfg, std::ostream& log) {
    namespace fs = std::filesystem;
    cfg.validate();
    const auto cohort = read_dataset(cfg.dataset_root);
    for (const auto& s : cohort) s.validate();
    std::vector<std::string> ids;
    for (const auto& s : cohort) ids.push_back(s.id);
    const auto plans = plan_folds(ids, cfg.n_folds, cfg.n_test, cfg.n_val, cfg.fold_seed);
    check_fold_plans(plans, ids);

    fs::create_directories(cfg.out_dir);
    CrossValidationOutputs out;
    out.folds_path = cfg.out_dir + "/folds.txt";
    detail::write_text(out.folds_path, fold_plans_to_text(plans));

    std::vector<CvTask> tasks;
    for (Regime regime : cfg.regimes)
        for (std::uint64_t seed : cfg.seeds)
            for (int fold = 0; fold < cfg.n_folds; ++fold)
                tasks.push_back({regime, seed, fold,
                                 cfg.out_dir + "/" + regime_name(regime) + "/seed" +
                                     std::to_string(seed) + "/fold" + std::to_string(fold)});

    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::string first_error;
    std::mutex error_mutex;
    const int n_threads = detail::thread_budget(tasks.size());
    const auto worker = [&]() {
        while (!failed.load()) {
            const std::size_t i = next.fetch_add(1);
            if (i >= tasks.size()) return;
            const CvTask& task = tasks[i];
            try {
                if (fs::exists(task.dir + "/done")) continue;
                run_cv_task(task, cfg, cohort, plans[static_cast<std::size_t>(task.fold)]);
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!failed.exchange(true))
                    first_error = detail::msg(task.dir, ": ", e.what());
            }
        }
    };
    if (n_threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    if (failed.load()) throw Error(detail::msg("cross-validate: ", first_error));

    // deterministic aggregation in task order
    std::vector<SubjectMetrics> all_rows;
    for (const auto& task : tasks) {
        auto rows = subject_metrics_from_csv(detail::read_text(task.dir + "/rows.csv"));
        all_rows.insert(all_rows.end(), rows.begin(), rows.end());
    }
    out.per_subject_path = cfg.out_dir + "/per_subject.csv";
    detail::write_text(out.per_subject_path, subject_metrics_to_csv(all_rows));
    out.summaries = summarize_metrics(all_rows, cfg.baseline, cfg.n_permutations,
                                      cfg.report_seed);
    out.summary_path = cfg.out_dir + "/summary.csv";
    detail::write_text(out.summary_path, summaries_to_csv(out.summaries));

    for (const auto& s : out.summaries) {
        log << s.method << ": mean dice " << s.mean_dsc;
        if (s.mean_fpr) log << ", fpr " << *s.mean_fpr;
        if (s.mean_fnr) log << ", fnr " << *s.mean_fnr;
        if (s.mean_mae) log << ", mae " << *s.mean_mae;
        if (s.mean_psnr) log << ", psnr " << *s.mean_psnr;
        log << "\n";
    }
    return out;
}

// ---- report: table renditions + qualitative overlay panels --------------------------

namespace detail {

inline std::string pct(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", 100.0 * v);
    return buf;
}

inline std::string fixed2(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return buf;
}

}  // namespace detail

constexpr double kSignificanceLevel = 0.005;

inline void cmd_report(const ExperimentConfig& cfg, std::ostream& log) {
    namespace fs = std::filesystem;
    const std::string per_subject_path = cfg.out_dir + "/per_subject.csv";
    if (!fs::exists(per_subject_path)) {
        std::string missing;
        for (Regime regime : cfg.regimes)
            for (std::uint64_t seed : cfg.seeds)
                for (int fold = 0; fold < cfg.n_folds; ++fold) {
                    const std::string dir = cfg.out_dir + "/" + regime_name(regime) + "/seed" +
                                            std::to_string(seed) + "/fold" + std::to_string(fold);
                    if (!fs::exists(dir + "/done")) missing += "\n  " + dir;
                }
        throw DataError(detail::msg("report: no aggregated results at '", per_subject_path,
                                    "'; incomplete folds:", missing.empty() ? "\n  (none)" : missing));
    }
    const auto rows = subject_metrics_from_csv(detail::read_text(per_subject_path));
    const auto summaries = summarize_metrics(rows, cfg.baseline, cfg.n_permutations,
                                             cfg.report_seed);

    // segmentation table (percent, starred when p < kSignificanceLevel vs baseline)
    std::ostringstream t1;
    t1 << "method,dsc_pct,fpr_pct,fnr_pct,sig_dsc,sig_fpr,sig_fnr\n";
    std::ostringstream t1txt;
    t1txt << "Segmentation (mean over subjects and seeds; * = p < " << kSignificanceLevel
          << " vs " << cfg.baseline << ")\n";
    t1txt << "method      DSC(%)    FPR(%)    FNR(%)\n";
    for (const auto& s : summaries) {
        const auto star = [](const std::optional<double>& p) {
            return p && *p < kSignificanceLevel ? "*" : "";
        };
        t1 << s.method << "," << detail::pct(s.mean_dsc) << ","
           << (s.mean_fpr ? detail::pct(*s.mean_fpr) : "") << ","
           << (s.mean_fnr ? detail::pct(*s.mean_fnr) : "") << "," << star(s.p_dsc) << ","
           << star(s.p_fpr) << "," << star(s.p_fnr) << "\n";
        char line[128];
        std::snprintf(line, sizeof(line), "%-10s  %7s%-1s  %7s%-1s  %7s%-1s\n", s.method.c_str(),
                      detail::pct(s.mean_dsc).c_str(), star(s.p_dsc),
                      s.mean_fpr ? detail::pct(*s.mean_fpr).c_str() : "-", star(s.p_fpr),
                      s.mean_fnr ? detail::pct(*s.mean_fnr).c_str() : "-", star(s.p_fnr));
        t1txt << line;
    }
    detail::write_text(cfg.out_dir + "/table_segmentation.csv", t1.str());
    detail::write_text(cfg.out_dir + "/table_segmentation.txt", t1txt.str());

    // reconstruction table for the regimes that synthesize
    std::ostringstream t2;
    t2 << "method,mae,psnr_db\n";
    std::ostringstream t2txt;
    t2txt << "Reconstruction vs real FLAIR (brain support)\n";
    t2txt << "method      MAE       PSNR(dB)\n";
    for (const auto& s : summaries) {
        if (!s.mean_mae || !s.mean_psnr) continue;
        t2 << s.method << "," << detail::fixed2(*s.mean_mae) << ","
           << detail::fixed2(*s.mean_psnr) << "\n";
        char line[128];
        std::snprintf(line, sizeof(line), "%-10s  %8s  %8s\n", s.method.c_str(),
                      detail::fixed2(*s.mean_mae).c_str(), detail::fixed2(*s.mean_psnr).c_str());
        t2txt << line;
    }
    detail::write_text(cfg.out_dir + "/table_reconstruction.csv", t2.str());
    detail::write_text(cfg.out_dir + "/table_reconstruction.txt", t2txt.str());

    // qualitative panels at the lesion-load extremes and median, seed seeds[0]
    const auto cohort = read_dataset(cfg.dataset_root);
    const auto plans = fold_plans_from_text(detail::read_text(cfg.out_dir + "/folds.txt"));
    struct SliceLoad {
        std::string subject;
        int fold = 0;
        Dim z = 0;
        Dim load = 0;
    };
    std::vector<SliceLoad> loads;
    for (const auto& plan : plans) {
        for (const auto& id : plan.test_ids) {
            for (const auto& s : cohort) {
                if (s.id != id) continue;
                for (Dim z = 0; z < s.label.depth; ++z) {
                    Dim load = 0;
                    for (double v : s.label.slice(z)) load += v == 1.0 ? 1 : 0;
                    loads.push_back({id, plan.fold, z, load});
                }
            }
        }
    }
    std::sort(loads.begin(), loads.end(), [](const SliceLoad& a, const SliceLoad& b) {
        if (a.load != b.load) return a.load < b.load;
        if (a.subject != b.subject) return a.subject < b.subject;
        return a.z < b.z;
    });
    std::vector<SliceLoad> lesioned;
    for (const auto& l : loads)
        if (l.load > 0) lesioned.push_back(l);
    if (lesioned.empty()) lesioned = loads;
    const std::vector<std::pair<std::string, SliceLoad>> picks = {
        {"low", lesioned.front()},
        {"median", lesioned[lesioned.size() / 2]},
        {"high", lesioned.back()},
    };

    const std::string overlay_dir = cfg.out_dir + "/overlays";
    fs::create_directories(overlay_dir);
    const std::uint64_t seed0 = cfg.seeds.front();
    for (const auto& [tag, pick] : picks) {
        const Subject* subject = nullptr;
        for (const auto& s : cohort)
            if (s.id == pick.subject) subject = &s;
        for (Regime regime : cfg.regimes) {
            const std::string task_dir = cfg.out_dir + "/" + regime_name(regime) + "/seed" +
                                         std::to_string(seed0) + "/fold" +
                                         std::to_string(pick.fold);
            const Volume pred = read_volume(task_dir + "/pred_" + pick.subject + ".mvol",
                                            Modality::LABEL);
            const auto img = render_overlay(pred.slice(pick.z), subject->label.slice(pick.z),
                                            subject->flair.slice(pick.z), subject->flair.height,
                                            subject->flair.width);
            write_ppm(img, overlay_dir + "/" + tag + "_" + pick.subject + "_z" +
                               std::to_string(pick.z) + "_" + regime_name(regime) + ".ppm");
        }
    }
    log << "report written to " << cfg.out_dir << " (tables + " << 3 * cfg.regimes.size()
        << " overlay panels)\n";
}

}  // namespace jsynth
