#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "jsynth/folds.hpp"
#include "jsynth/phantom.hpp"
#include "jsynth/preprocess.hpp"
#include "jsynth/volume.hpp"

using namespace jsynth;
using Catch::Approx;

namespace fs = std::filesystem;

TEST_CASE("phantom generation is a pure function of the spec") {
    PhantomSpec spec;
    spec.seed = 7;
    spec.n_subjects = 3;
    spec.slices_per_subject = 2;
    auto a = generate_phantom(spec);
    auto b = generate_phantom(spec);
    REQUIRE(a.size() == 3);
    for (std::size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i].id == b[i].id);
        REQUIRE(a[i].t1.voxels == b[i].t1.voxels);
        REQUIRE(a[i].flair.voxels == b[i].flair.voxels);
        REQUIRE(a[i].label.voxels == b[i].label.voxels);
    }
    spec.seed = 8;
    auto c = generate_phantom(spec);
    REQUIRE(a[0].t1.voxels != c[0].t1.voxels);
}

TEST_CASE("phantom with empty lesion range has all-zero labels") {
    PhantomSpec spec;
    spec.seed = 1;
    spec.n_subjects = 2;
    spec.lesion_count_min = 0;
    spec.lesion_count_max = 0;
    for (const auto& s : generate_phantom(spec)) {
        for (double v : s.label.voxels) REQUIRE(v == 0.0);
    }
}

TEST_CASE("phantom lesion contrast clears the noise floor") {
    PhantomSpec spec;
    spec.seed = 3;
    spec.n_subjects = 4;
    auto cohort = generate_phantom(spec);
    double lesion_sum = 0.0, tissue_sum = 0.0;
    Dim lesion_n = 0, tissue_n = 0;
    for (const auto& s : cohort) {
        for (std::size_t i = 0; i < s.flair.voxels.size(); ++i) {
            if (s.flair.voxels[i] == 0.0) continue;  // background
            if (s.label.voxels[i] == 1.0) {
                lesion_sum += s.flair.voxels[i];
                ++lesion_n;
            } else {
                tissue_sum += s.flair.voxels[i];
                ++tissue_n;
            }
        }
    }
    REQUIRE(lesion_n > 0);
    const double gap = lesion_sum / lesion_n - tissue_sum / tissue_n;
    REQUIRE(gap >= 3.0 * spec.noise_sigma);
}

TEST_CASE("phantom labels are binary and dims consistent") {
    PhantomSpec spec;
    spec.seed = 9;
    spec.n_subjects = 2;
    for (const auto& s : generate_phantom(spec)) {
        REQUIRE(s.label.is_binary());
        REQUIRE(s.t1.same_dims(s.flair));
        REQUIRE(s.t1.same_dims(s.label));
        REQUIRE_NOTHROW(s.validate());
    }
}

TEST_CASE("crop_or_pad: crop is central") {
    // 200x200 -> 192x192 removes 4 from each side
    auto plan = CropPadPlan::make(200, 200, 192, 192);
    REQUIRE(plan.src_row0 == 4);
    REQUIRE(plan.src_col0 == 4);
    REQUIRE(plan.rows == 192);

    std::vector<double> ramp(200 * 200);
    for (std::size_t i = 0; i < ramp.size(); ++i) ramp[i] = static_cast<double>(i);
    auto out = plan.apply(ramp);
    REQUIRE(out[0] == ramp[4 * 200 + 4]);
    REQUIRE(out[191] == ramp[4 * 200 + 4 + 191]);
}

TEST_CASE("crop_or_pad: identity when sizes match") {
    std::vector<double> s = {1, 2, 3, 4, 5, 6};
    REQUIRE(crop_or_pad(s, 2, 3, 2, 3) == s);
}

TEST_CASE("crop_or_pad: 5x7 -> 8x8 pads 1 top, 2 bottom, 0 left, 1 right") {
    auto plan = CropPadPlan::make(5, 7, 8, 8);
    REQUIRE(plan.dst_row0 == 1);
    REQUIRE(plan.dst_col0 == 0);
    REQUIRE(plan.rows == 5);
    REQUIRE(plan.cols == 7);

    std::vector<double> ones(5 * 7, 1.0);
    auto out = plan.apply(ones);
    for (Dim r = 0; r < 8; ++r)
        for (Dim c = 0; c < 8; ++c) {
            const bool inside = (r >= 1 && r <= 5 && c <= 6);
            REQUIRE(out[static_cast<std::size_t>(r * 8 + c)] == (inside ? 1.0 : 0.0));
        }
}

TEST_CASE("crop_or_pad inverse restores the overlap region") {
    Rng rng(5);
    for (int rep = 0; rep < 50; ++rep) {
        const Dim sh = rng.uniform_int(3, 24), sw = rng.uniform_int(3, 24);
        const Dim dh = rng.uniform_int(3, 24), dw = rng.uniform_int(3, 24);
        auto plan = CropPadPlan::make(sh, sw, dh, dw);
        std::vector<double> src(static_cast<std::size_t>(sh * sw));
        for (auto& v : src) v = rng.uniform(-2, 2);
        auto restored = plan.invert(plan.apply(src));
        // inside the overlap window values are preserved exactly; outside zero
        for (Dim r = 0; r < sh; ++r)
            for (Dim c = 0; c < sw; ++c) {
                const bool overlap = r >= plan.src_row0 && r < plan.src_row0 + plan.rows &&
                                     c >= plan.src_col0 && c < plan.src_col0 + plan.cols;
                const double got = restored[static_cast<std::size_t>(r * sw + c)];
                if (overlap)
                    REQUIRE(got == src[static_cast<std::size_t>(r * sw + c)]);
                else
                    REQUIRE(got == 0.0);
            }
    }
}

TEST_CASE("gaussian_normalize") {
    SECTION("two support values map to -1/+1 under the population sd") {
        Volume v = Volume::zeros(1, 1, 4, Modality::T1);
        v.voxels = {0.0, 1.0, 3.0, 0.0};
        Volume n = gaussian_normalize(v);
        REQUIRE(n.voxels[0] == 0.0);
        REQUIRE(n.voxels[1] == Approx(-1.0).epsilon(1e-12));
        REQUIRE(n.voxels[2] == Approx(1.0).epsilon(1e-12));
        REQUIRE(n.voxels[3] == 0.0);
    }

    SECTION("idempotent on the support") {
        PhantomSpec spec;
        spec.seed = 4;
        spec.n_subjects = 1;
        auto cohort = generate_phantom(spec);
        Volume once = gaussian_normalize(cohort[0].t1);
        Volume twice = gaussian_normalize(once);
        for (std::size_t i = 0; i < once.voxels.size(); ++i)
            REQUIRE(twice.voxels[i] == Approx(once.voxels[i]).margin(1e-10));
    }

    SECTION("support statistics after normalization") {
        PhantomSpec spec;
        spec.seed = 11;
        spec.n_subjects = 1;
        auto cohort = generate_phantom(spec);
        Volume n = gaussian_normalize(cohort[0].flair);
        double s = 0.0, ss = 0.0;
        Dim cnt = 0;
        for (double v : n.voxels) {
            if (v == 0.0) continue;
            s += v;
            ++cnt;
        }
        const double mean = s / cnt;
        for (double v : n.voxels) {
            if (v == 0.0) continue;
            ss += (v - mean) * (v - mean);
        }
        REQUIRE(std::abs(mean) < 1e-10);
        REQUIRE(std::abs(std::sqrt(ss / cnt) - 1.0) < 1e-10);
    }

    SECTION("degenerate inputs are rejected") {
        Volume constant = Volume::zeros(1, 1, 4, Modality::T1);
        constant.voxels = {0.0, 2.0, 2.0, 2.0};
        REQUIRE_THROWS_AS(gaussian_normalize(constant), DataError);

        Volume label = Volume::zeros(1, 2, 2, Modality::LABEL);
        label.voxels = {0, 1, 1, 0};
        REQUIRE_THROWS_AS(gaussian_normalize(label), ValueError);
    }
}

TEST_CASE("plan_folds reproduces the 60/6/10/5/45 arithmetic") {
    std::vector<std::string> ids;
    for (int i = 0; i < 60; ++i) ids.push_back("sub" + std::to_string(i));
    auto plans = plan_folds(ids, 6, 10, 5, 123);
    REQUIRE(plans.size() == 6);
    for (const auto& p : plans) {
        REQUIRE(p.test_ids.size() == 10);
        REQUIRE(p.val_ids.size() == 5);
        REQUIRE(p.train_ids.size() == 45);
    }
    REQUIRE_NOTHROW(check_fold_plans(plans, ids));
}

TEST_CASE("plan_folds: 12 ids, 3 folds, 4 test, 2 val gives train size 6") {
    std::vector<std::string> ids;
    for (int i = 0; i < 12; ++i) ids.push_back("p" + std::to_string(i));
    auto plans = plan_folds(ids, 3, 4, 2, 0);
    for (const auto& p : plans) REQUIRE(p.train_ids.size() == 6);
    REQUIRE_NOTHROW(check_fold_plans(plans, ids));
}

TEST_CASE("plan_folds determinism and seed sensitivity") {
    std::vector<std::string> ids;
    for (int i = 0; i < 24; ++i) ids.push_back("x" + std::to_string(i));
    auto a = plan_folds(ids, 4, 6, 3, 42);
    auto b = plan_folds(ids, 4, 6, 3, 42);
    REQUIRE(fold_plans_to_text(a) == fold_plans_to_text(b));
    auto c = plan_folds(ids, 4, 6, 3, 43);
    REQUIRE(fold_plans_to_text(a) != fold_plans_to_text(c));
}

TEST_CASE("plan_folds rejects bad parameters") {
    std::vector<std::string> ids = {"a", "b", "c", "d", "e"};
    REQUIRE_THROWS_AS(plan_folds(ids, 2, 2, 1, 0), ConfigError);  // 2*2 != 5
    REQUIRE_THROWS_AS(plan_folds(ids, 5, 1, 4, 0), ConfigError);  // n_val too large
}

TEST_CASE("fold plan text round-trips") {
    std::vector<std::string> ids;
    for (int i = 0; i < 12; ++i) ids.push_back("r" + std::to_string(i));
    auto plans = plan_folds(ids, 3, 4, 2, 5);
    auto parsed = fold_plans_from_text(fold_plans_to_text(plans));
    REQUIRE(fold_plans_to_text(parsed) == fold_plans_to_text(plans));
}

TEST_CASE("fold plan properties over random valid parameterizations") {
    Rng rng(99);
    for (int rep = 0; rep < 100; ++rep) {
        const int n_folds = static_cast<int>(rng.uniform_int(2, 8));
        const int n_test = static_cast<int>(rng.uniform_int(1, 6));
        const int total = n_folds * n_test;
        if (total - n_test < 2) continue;
        const int n_val = static_cast<int>(rng.uniform_int(1, total - n_test - 1));
        std::vector<std::string> ids;
        for (int i = 0; i < total; ++i) ids.push_back("s" + std::to_string(i));
        auto plans = plan_folds(ids, n_folds, n_test, n_val, rng.next_u64());
        REQUIRE_NOTHROW(check_fold_plans(plans, ids));
    }
}

TEST_CASE("volume file round-trip and errors") {
    const auto dir = fs::temp_directory_path() / "jsynth_test_vol";
    fs::create_directories(dir);
    const auto path = (dir / "v.mvol").string();

    Volume v = Volume::zeros(2, 3, 4, Modality::FLAIR);
    Rng rng(17);
    for (auto& x : v.voxels) x = rng.uniform(-5, 5);
    write_volume(v, path);

    // 16-byte header + D*H*W doubles
    REQUIRE(fs::file_size(path) == 16 + 2 * 3 * 4 * 8);

    Volume r = read_volume(path, Modality::FLAIR);
    REQUIRE(r.depth == 2);
    REQUIRE(r.height == 3);
    REQUIRE(r.width == 4);
    REQUIRE(r.voxels == v.voxels);

    {
        std::ofstream bad((dir / "bad.mvol").string(), std::ios::binary);
        bad << "NOPE1234";
    }
    REQUIRE_THROWS_AS(read_volume((dir / "bad.mvol").string()), BadMagic);

    {
        std::ifstream in(path, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        std::ofstream out((dir / "trunc.mvol").string(), std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 5));
    }
    REQUIRE_THROWS_AS(read_volume((dir / "trunc.mvol").string()), IoError);

    fs::remove_all(dir);
}

TEST_CASE("dataset directory round-trip") {
    const auto root = fs::temp_directory_path() / "jsynth_test_ds";
    fs::remove_all(root);

    PhantomSpec spec;
    spec.seed = 2;
    spec.n_subjects = 3;
    spec.slices_per_subject = 2;
    auto cohort = generate_phantom(spec);
    write_dataset(cohort, root.string());

    auto loaded = read_dataset(root.string());
    REQUIRE(loaded.size() == cohort.size());
    for (std::size_t i = 0; i < cohort.size(); ++i) {
        REQUIRE(loaded[i].id == cohort[i].id);
        REQUIRE(loaded[i].t1.voxels == cohort[i].t1.voxels);
        REQUIRE(loaded[i].flair.voxels == cohort[i].flair.voxels);
        REQUIRE(loaded[i].label.voxels == cohort[i].label.voxels);
        REQUIRE(loaded[i].label.modality == Modality::LABEL);
    }
    fs::remove_all(root);
}
