#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "jsynth/gradcheck.hpp"
#include "jsynth/metrics.hpp"
#include "jsynth/phantom.hpp"
#include "jsynth/train.hpp"

using namespace jsynth;
using Catch::Approx;

namespace {

PhantomSpec small_phantom(std::uint64_t seed, Dim n_subjects = 4) {
    PhantomSpec spec;
    spec.seed = seed;
    spec.n_subjects = n_subjects;
    spec.slices_per_subject = 4;
    spec.height = 32;
    spec.width = 32;
    spec.lesion_count_min = 1;
    spec.lesion_count_max = 3;
    spec.lesion_radius_min = 2.0;
    spec.lesion_radius_max = 4.0;
    spec.faint_fraction = 0.4;
    spec.noise_sigma = 0.06;
    return spec;
}

TrainConfig small_config(Regime regime, std::uint64_t seed, int epochs = 4) {
    TrainConfig cfg;
    cfg.regime = regime;
    cfg.epochs = epochs;
    cfg.batch_size = 2;
    cfg.lr = 0.01;
    cfg.seed = seed;
    cfg.slice_size = 32;
    cfg.depth = 2;
    cfg.base_filters = 4;
    return cfg;
}

FoldPlan fold_of(const std::vector<Subject>& cohort, int n_train, int n_val, int n_test) {
    FoldPlan plan;
    int i = 0;
    for (; i < n_train; ++i) plan.train_ids.push_back(cohort[static_cast<std::size_t>(i)].id);
    for (; i < n_train + n_val; ++i) plan.val_ids.push_back(cohort[static_cast<std::size_t>(i)].id);
    for (; i < n_train + n_val + n_test; ++i)
        plan.test_ids.push_back(cohort[static_cast<std::size_t>(i)].id);
    return plan;
}

}  // namespace

TEST_CASE("unimodal smoke: finite losses, deterministic checkpoints") {
    auto cohort = generate_phantom(small_phantom(1));
    auto plan = fold_of(cohort, 2, 1, 1);
    auto cfg = small_config(Regime::Unimodal, 5, 2);

    auto r1 = train_unimodal(cohort, plan, cfg);
    REQUIRE(r1.curve.size() == 2);
    for (const auto& e : r1.curve) {
        REQUIRE(std::isfinite(e.l_c));
        REQUIRE(std::isfinite(e.val_dice));
    }
    REQUIRE(r1.selected_epoch >= 0);
    REQUIRE(r1.selected_epoch < cfg.epochs);
    REQUIRE(r1.generator_checkpoint.empty());

    auto r2 = train_unimodal(cohort, plan, cfg);
    REQUIRE(r1.classifier_checkpoint == r2.classifier_checkpoint);
    REQUIRE(curve_to_csv(r1.curve) == curve_to_csv(r2.curve));
}

TEST_CASE("unimodal training reduces the training loss") {
    auto cohort = generate_phantom(small_phantom(2, 5));
    auto plan = fold_of(cohort, 3, 1, 1);
    auto cfg = small_config(Regime::Unimodal, 0, 8);
    auto r = train_unimodal(cohort, plan, cfg);
    INFO("epoch0 " << r.curve[0].l_c << " last "
                   << r.curve[static_cast<std::size_t>(cfg.epochs - 1)].l_c);
    REQUIRE(r.curve[static_cast<std::size_t>(r.selected_epoch)].l_c < r.curve[0].l_c);
    REQUIRE_THROWS_AS(train_unimodal(cohort, FoldPlan{}, cfg), ConfigError);
}

TEST_CASE("offline: generator frozen in stage 2, validation L2 improves") {
    auto cohort = generate_phantom(small_phantom(3, 5));
    auto plan = fold_of(cohort, 3, 1, 1);
    auto cfg = small_config(Regime::Offline, 1, 6);

    std::vector<std::uint64_t> stage1_fingerprints;
    cfg.on_generator_step = [&](const Network& g) {
        stage1_fingerprints.push_back(g.parameter_fingerprint());
    };
    auto r = train_offline(cohort, plan, cfg);

    REQUIRE(r.curve.size() == static_cast<std::size_t>(2 * cfg.epochs));
    for (const auto& e : r.curve) {
        REQUIRE(std::isfinite(e.l_c));
        REQUIRE(std::isfinite(e.l_g_l2));
    }

    // the shipped generator is one of the stage-1 states, untouched by stage 2
    Network gen = Network::deserialize(r.generator_checkpoint);
    const auto fp = gen.parameter_fingerprint();
    REQUIRE(std::find(stage1_fingerprints.begin(), stage1_fingerprints.end(), fp) !=
            stage1_fingerprints.end());

    // stage-1 validation reconstruction error drops from epoch 0 to the best epoch
    double best_val = r.curve[0].val_l2;
    for (int e = 1; e < cfg.epochs; ++e)
        best_val = std::min(best_val, r.curve[static_cast<std::size_t>(e)].val_l2);
    INFO("epoch0 val_l2 " << r.curve[0].val_l2 << " best " << best_val);
    REQUIRE(best_val < r.curve[0].val_l2);
}

TEST_CASE("joint with lambda 0 walks the offline stage-1 trajectory bitwise") {
    auto cohort = generate_phantom(small_phantom(4, 4));
    auto plan = fold_of(cohort, 2, 1, 1);

    auto cfg_joint = small_config(Regime::Joint, 9, 3);
    cfg_joint.lambda_seg = 0.0;
    std::vector<std::uint64_t> joint_traj;
    cfg_joint.on_generator_step = [&](const Network& g) {
        joint_traj.push_back(g.parameter_fingerprint());
    };
    auto rj = train_joint(cohort, plan, cfg_joint);

    auto cfg_off = cfg_joint;
    cfg_off.regime = Regime::Offline;
    std::vector<std::uint64_t> offline_traj;
    cfg_off.on_generator_step = [&](const Network& g) {
        offline_traj.push_back(g.parameter_fingerprint());
    };
    auto ro = train_offline(cohort, plan, cfg_off);

    REQUIRE(joint_traj.size() >= 10);
    REQUIRE(joint_traj == offline_traj);
    // checkpoint selection differs by design (val dice vs val L2), so only the
    // parameter trajectory is compared
    REQUIRE_FALSE(rj.generator_checkpoint.empty());
    REQUIRE_FALSE(ro.generator_checkpoint.empty());
}

TEST_CASE("generator gradient with lambda 1 differs from the pure L2 gradient") {
    auto cohort = generate_phantom(small_phantom(5, 2));
    const auto slices = train_detail::prepare_slices({&cohort[0], &cohort[1]}, 32);

    UNetConfig gen_cfg{1, 1, 2, 4, FinalActivation::LeakyReLU, 0.2};
    UNetConfig cls_cfg{2, 1, 2, 4, FinalActivation::Sigmoid, 0.2};
    Network generator = build_generator(gen_cfg, 3);
    Network classifier = build_classifier(cls_cfg, 4);
    generator.set_mode(Mode::Train);
    classifier.set_mode(Mode::Train);

    const std::vector<std::size_t> idx = {0, 1, 2, 3};
    Tensor t1 = train_detail::gather(slices.t1, idx, 32);
    Tensor flair = train_detail::gather(slices.flair, idx, 32);
    Tensor label = train_detail::gather(slices.label, idx, 32);

    const auto generator_grad = [&](double lambda_seg) {
        generator.zero_grad();
        classifier.zero_grad();
        Tape tape;
        TapeScope scope(tape);
        Tensor g_out = generator.forward(t1);
        Tensor loss = l2_loss(g_out, flair);
        if (lambda_seg > 0.0) {
            Tensor seg = bce_loss(classifier.forward(concat_channels(t1, g_out)), label);
            loss = add(loss, scale(seg, lambda_seg));
        }
        tape.backward(loss);
        std::vector<double> flat;
        for (const auto& p : generator.parameters())
            flat.insert(flat.end(), p.grad().begin(), p.grad().end());
        return flat;
    };

    const auto g_pure = generator_grad(0.0);
    const auto g_joint = generator_grad(1.0);
    double norm = 0.0;
    for (std::size_t i = 0; i < g_pure.size(); ++i) {
        const double d = g_joint[i] - g_pure[i];
        norm += d * d;
    }
    norm = std::sqrt(norm);
    INFO("difference norm " << norm);
    REQUIRE(norm > 1e-12);
}

TEST_CASE("joint smoke: finite losses, determinism, step isolation asserts hold") {
    auto cohort = generate_phantom(small_phantom(6, 4));
    auto plan = fold_of(cohort, 2, 1, 1);
    auto cfg = small_config(Regime::Joint, 2, 2);

    auto r1 = train_joint(cohort, plan, cfg);
    for (const auto& e : r1.curve) {
        REQUIRE(std::isfinite(e.l_c));
        REQUIRE(std::isfinite(e.l_g_l2));
        REQUIRE(std::isfinite(e.l_g_seg));
    }
    auto r2 = train_joint(cohort, plan, cfg);
    REQUIRE(r1.classifier_checkpoint == r2.classifier_checkpoint);
    REQUIRE(r1.generator_checkpoint == r2.generator_checkpoint);
}

TEST_CASE("synthesize: geometry, determinism") {
    auto cohort = generate_phantom(small_phantom(7, 2));
    UNetConfig gen_cfg{1, 1, 2, 4, FinalActivation::LeakyReLU, 0.2};
    Network generator = build_generator(gen_cfg, 8);

    Volume a = synthesize(generator, cohort[0].t1, 32);
    REQUIRE(a.depth == cohort[0].t1.depth);
    REQUIRE(a.height == cohort[0].t1.height);
    REQUIRE(a.width == cohort[0].t1.width);
    REQUIRE(a.modality == Modality::SYNTH_FLAIR);

    Volume b = synthesize(generator, cohort[0].t1, 32);
    REQUIRE(a.voxels == b.voxels);

    REQUIRE_THROWS_AS(synthesize(generator, cohort[0].t1, 30), ShapeError);
}

TEST_CASE("synthesize maps back through crop/pad on odd geometries") {
    PhantomSpec spec = small_phantom(8, 1);
    spec.height = 40;
    spec.width = 26;
    auto cohort = generate_phantom(spec);
    UNetConfig gen_cfg{1, 1, 2, 4, FinalActivation::LeakyReLU, 0.2};
    Network generator = build_generator(gen_cfg, 9);
    Volume s = synthesize(generator, cohort[0].t1, 32);
    REQUIRE(s.height == 40);
    REQUIRE(s.width == 26);
    // rows cropped away by the 40 -> 32 plan come back as zeros
    for (Dim x = 0; x < 26; ++x) {
        REQUIRE(s.at(0, 0, x) == 0.0);
        REQUIRE(s.at(0, 39, x) == 0.0);
    }
}

TEST_CASE("predict: binary output, threshold monotonicity, arity checks") {
    auto cohort = generate_phantom(small_phantom(9, 2));
    UNetConfig cls_cfg{1, 1, 2, 4, FinalActivation::Sigmoid, 0.2};
    Network classifier = build_classifier(cls_cfg, 10);

    Volume pred = predict(classifier, cohort[0].t1, nullptr, 32);
    REQUIRE(pred.is_binary());
    REQUIRE(pred.modality == Modality::LABEL);

    const auto positives = [](const Volume& v) {
        Dim n = 0;
        for (double x : v.voxels) n += x == 1.0 ? 1 : 0;
        return n;
    };
    const Dim at_03 = positives(predict(classifier, cohort[0].t1, nullptr, 32, 0.3));
    const Dim at_05 = positives(predict(classifier, cohort[0].t1, nullptr, 32, 0.5));
    const Dim at_07 = positives(predict(classifier, cohort[0].t1, nullptr, 32, 0.7));
    REQUIRE(at_03 >= at_05);
    REQUIRE(at_05 >= at_07);

    REQUIRE_THROWS_AS(predict(classifier, cohort[0].t1, &cohort[0].flair, 32), ShapeError);
}

TEST_CASE("untrained classifier scores near chance on the phantom") {
    auto cohort = generate_phantom(small_phantom(10, 2));
    for (std::uint64_t seed : {0ULL, 1ULL, 2ULL}) {
        UNetConfig cfg{1, 1, 2, 4, FinalActivation::Sigmoid, 0.2};
        Network net = build_classifier(cfg, seed);
        Volume pred = predict(net, cohort[0].t1, nullptr, 32);
        const double d = dice(confusion(pred, cohort[0].label));
        INFO("seed " << seed << " untrained dice " << d);
        REQUIRE(d < 0.35);
    }
}

TEST_CASE("hand-built oracle classifier copies its label channel to dice 1.0") {
    // depth 1, base 1, in 2: wire every conv as a center-tap identity that
    // routes the second input channel through the skip path, then a steep
    // sigmoid head.
    UNetConfig cfg{2, 1, 1, 1, FinalActivation::Sigmoid, 0.2};
    Network net = build_classifier(cfg, 0);
    auto params = net.parameters();
    for (auto p : params) std::fill(p.values().begin(), p.values().end(), 0.0);
    const auto center_tap = [&](std::size_t pi, Dim co, Dim ci, Dim cin) {
        Tensor w = params[pi];
        w.values()[static_cast<std::size_t>(((co * cin + ci) * 3 + 1) * 3 + 1)] = 1.0;
    };
    // parameter layout per conv-bn block: w, b, gamma, beta
    const auto set_gamma = [&](std::size_t pi) {
        Tensor g = params[pi];
        std::fill(g.values().begin(), g.values().end(), 1.0);
    };
    center_tap(0, 0, 1, 2);   // enc.first reads channel 1 (the label channel)
    set_gamma(2);
    center_tap(4, 0, 0, 1);   // enc.second identity
    set_gamma(6);
    center_tap(8, 0, 0, 1);   // bottleneck.first copies into both channels
    center_tap(8, 1, 0, 1);
    set_gamma(10);
    center_tap(12, 0, 0, 2);  // bottleneck.second identity per channel
    center_tap(12, 1, 1, 2);
    set_gamma(14);
    center_tap(16, 0, 2, 3);  // decoder.first reads the skip channel
    set_gamma(18);
    center_tap(20, 0, 0, 1);  // decoder.second identity
    set_gamma(22);
    {
        Tensor hw = params[24];  // 1x1 head: sigmoid(40x - 20)
        hw.values()[0] = 40.0;
        Tensor hb = params[25];
        hb.values()[0] = -20.0;
    }
    net.set_mode(Mode::Eval);

    auto cohort = generate_phantom(small_phantom(11, 1));
    Volume label_channel = cohort[0].label;
    label_channel.modality = Modality::SYNTH_FLAIR;  // bypass normalization
    Volume pred = predict(net, cohort[0].t1, &label_channel, 32);
    REQUIRE(dice(confusion(pred, cohort[0].label)) == 1.0);
}
