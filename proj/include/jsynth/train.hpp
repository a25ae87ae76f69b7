#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "jsynth/adam.hpp"
#include "jsynth/folds.hpp"
#include "jsynth/metrics.hpp"
#include "jsynth/preprocess.hpp"
#include "jsynth/unet.hpp"
#include "jsynth/volume.hpp"

namespace jsynth {

enum class Regime { Unimodal, Offline, Joint };

inline const char* regime_name(Regime r) {
    switch (r) {
        case Regime::Unimodal: return "unimodal";
        case Regime::Offline: return "offline";
        case Regime::Joint: return "joint";
    }
    return "?";
}

inline Regime regime_from_name(const std::string& name) {
    if (name == "unimodal") return Regime::Unimodal;
    if (name == "offline") return Regime::Offline;
    if (name == "joint") return Regime::Joint;
    throw ConfigError(detail::msg("unknown regime '", name, "'"));
}

struct TrainConfig {
    Regime regime = Regime::Joint;
    int epochs = 10;
    int batch_size = 4;
    double lr = 2e-4;
    double lambda_seg = 1.0;  // weight of the segmentation term in the generator loss
    std::uint64_t seed = 0;
    Dim slice_size = 64;
    Dim depth = 3;
    Dim base_filters = 16;
    // invoked after every generator optimizer step (trajectory instrumentation)
    std::function<void(const Network&)> on_generator_step;

    void validate() const {
        if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
        if (batch_size < 2) throw ConfigError("train: batch_size must be >= 2 (batch norm)");
        if (!(lr > 0.0)) throw ConfigError("train: lr must be > 0");
        if (lambda_seg < 0.0) throw ConfigError("train: lambda_seg must be >= 0");
        if (slice_size % (Dim{1} << depth) != 0)
            throw ConfigError(detail::msg("train: slice_size ", slice_size,
                                          " not divisible by 2^depth = ", Dim{1} << depth));
    }
};

struct EpochStats {
    int epoch = 0;
    double l_c = 0.0;      // mean classifier loss over training batches
    double l_g_l2 = 0.0;   // mean reconstruction term
    double l_g_seg = 0.0;  // mean segmentation term seen by the generator
    double val_dice = 0.0;
    double val_l2 = 0.0;
};

struct TrainResult {
    std::string classifier_checkpoint;  // serialized network bytes
    std::string generator_checkpoint;   // empty for the unimodal regime
    std::vector<EpochStats> curve;
    int selected_epoch = -1;
    std::uint64_t seed = 0;
};

inline std::string curve_to_csv(const std::vector<EpochStats>& curve) {
    std::string out = "epoch,l_c,l_g_l2,l_g_seg,val_dice\n";
    for (const auto& e : curve)
        out += std::to_string(e.epoch) + "," + detail::fmt_double(e.l_c) + "," +
               detail::fmt_double(e.l_g_l2) + "," + detail::fmt_double(e.l_g_seg) + "," +
               detail::fmt_double(e.val_dice) + "\n";
    return out;
}

// ---- slice preparation --------------------------------------------------------

namespace train_detail {

struct PreparedSlices {
    Dim size = 0;
    std::vector<std::vector<double>> t1, flair, label;
    std::vector<std::pair<std::string, Dim>> origin;  // (subject id, z)
};

inline PreparedSlices prepare_slices(const std::vector<const Subject*>& subjects, Dim size) {
    PreparedSlices out;
    out.size = size;
    for (const Subject* s : subjects) {
        const Volume t1n = gaussian_normalize(s->t1);
        const Volume fln = gaussian_normalize(s->flair);
        const auto plan = CropPadPlan::make(s->t1.height, s->t1.width, size, size);
        for (Dim z = 0; z < s->t1.depth; ++z) {
            out.t1.push_back(plan.apply(t1n.slice(z)));
            out.flair.push_back(plan.apply(fln.slice(z)));
            out.label.push_back(plan.apply(s->label.slice(z)));
            out.origin.emplace_back(s->id, z);
        }
    }
    return out;
}

inline Tensor gather(const std::vector<std::vector<double>>& slices,
                     const std::vector<std::size_t>& idx, Dim size) {
    Tensor t = Tensor::zeros({static_cast<Dim>(idx.size()), 1, size, size});
    const auto plane = static_cast<std::size_t>(size * size);
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy_n(slices[idx[i]].begin(), plane, t.values().begin() + i * plane);
    return t;
}

// per-epoch batch schedule: seeded shuffle, contiguous chunks, trailing chunk
// kept only if it satisfies the batch-norm minimum
inline std::vector<std::vector<std::size_t>> batch_schedule(Rng& rng, std::size_t n_items,
                                                            int batch_size) {
    std::vector<std::size_t> order(n_items);
    for (std::size_t i = 0; i < n_items; ++i) order[i] = i;
    rng.shuffle(order);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(batch_size)) {
        const auto end = std::min(order.size(), at + static_cast<std::size_t>(batch_size));
        if (end - at < 2) break;
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(at),
                             order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return batches;
}

inline std::vector<const Subject*> pick_subjects(const std::vector<Subject>& cohort,
                                                 const std::vector<std::string>& ids) {
    std::vector<const Subject*> out;
    for (const auto& id : ids) {
        const Subject* found = nullptr;
        for (const auto& s : cohort)
            if (s.id == id) {
                found = &s;
                break;
            }
        if (!found) throw DataError(detail::msg("subject '", id, "' not in cohort"));
        out.push_back(found);
    }
    return out;
}

inline void check_loss_finite(double v, const char* what) {
    if (!std::isfinite(v)) throw NumericError(detail::msg(what, " became non-finite"));
}

}  // namespace train_detail

// ---- inference ------------------------------------------------------------------

// Slice-wise generator forward on a normalized copy of the T1 volume; the
// result lives in the z-scored intensity domain and is mapped back to the
// source geometry (voxels outside the crop window are zero).
inline Volume synthesize(Network& generator, const Volume& t1, Dim slice_size) {
    if (generator.config().in_channels != 1)
        throw ShapeError("synthesize: generator must take one input channel");
    if (slice_size % (Dim{1} << generator.config().depth) != 0)
        throw ShapeError(detail::msg("synthesize: slice size ", slice_size,
                                     " not divisible by 2^depth"));
    const Mode saved = generator.mode();
    generator.set_mode(Mode::Eval);
    const Volume t1n = gaussian_normalize(t1);
    const auto plan = CropPadPlan::make(t1.height, t1.width, slice_size, slice_size);
    Volume out = Volume::zeros(t1.depth, t1.height, t1.width, Modality::SYNTH_FLAIR);
    for (Dim z = 0; z < t1.depth; ++z) {
        Tensor x = Tensor::from({1, 1, slice_size, slice_size}, plan.apply(t1n.slice(z)));
        Tensor y = generator.forward(x);
        out.set_slice(z, plan.invert(y.values()));
    }
    generator.set_mode(saved);
    return out;
}

// Classifier forward with optional second channel, thresholded into a binary
// label volume in source coordinates. A FLAIR-tagged second volume is
// normalized like the training data; synthetic volumes are already z-scored.
inline Volume predict(Network& classifier, const Volume& t1, const Volume* second,
                      Dim slice_size, double threshold = 0.5) {
    const Dim arity = second ? 2 : 1;
    if (classifier.config().in_channels != arity)
        throw ShapeError(detail::msg("predict: classifier expects ",
                                     classifier.config().in_channels, " channels, got ", arity));
    if (second && !t1.same_dims(*second))
        throw ShapeError("predict: second volume dims differ from t1");
    const Mode saved = classifier.mode();
    classifier.set_mode(Mode::Eval);
    const Volume t1n = gaussian_normalize(t1);
    Volume secn;
    if (second)
        secn = second->modality == Modality::FLAIR ? gaussian_normalize(*second) : *second;
    const auto plan = CropPadPlan::make(t1.height, t1.width, slice_size, slice_size);
    Volume out = Volume::zeros(t1.depth, t1.height, t1.width, Modality::LABEL);
    for (Dim z = 0; z < t1.depth; ++z) {
        Tensor x = Tensor::from({1, 1, slice_size, slice_size}, plan.apply(t1n.slice(z)));
        if (second) {
            Tensor s = Tensor::from({1, 1, slice_size, slice_size}, plan.apply(secn.slice(z)));
            x = concat_channels(x, s);
        }
        Tensor y = classifier.forward(x);
        std::vector<double> binary(y.values().size());
        for (std::size_t i = 0; i < binary.size(); ++i)
            binary[i] = y.values()[i] > threshold ? 1.0 : 0.0;
        out.set_slice(z, plan.invert(binary));
    }
    classifier.set_mode(saved);
    return out;
}

// ---- training regimes ----------------------------------------------------------

namespace train_detail {

// mean validation dice over subjects, using the current networks in eval mode
inline double validation_dice(Network& classifier, Network* generator,
                              const std::vector<const Subject*>& val_subjects, Dim slice_size) {
    if (val_subjects.empty()) return 0.0;
    double acc = 0.0;
    for (const Subject* s : val_subjects) {
        Volume pred;
        if (generator) {
            Volume synth = synthesize(*generator, s->t1, slice_size);
            pred = predict(classifier, s->t1, &synth, slice_size);
        } else {
            pred = predict(classifier, s->t1, nullptr, slice_size);
        }
        acc += dice(confusion(pred, s->label));
    }
    return acc / static_cast<double>(val_subjects.size());
}

inline double validation_l2(Network& generator, const PreparedSlices& val, Dim slice_size) {
    if (val.t1.empty()) return 0.0;
    const Mode saved = generator.mode();
    generator.set_mode(Mode::Eval);
    double acc = 0.0;
    for (std::size_t i = 0; i < val.t1.size(); ++i) {
        Tensor x = Tensor::from({1, 1, slice_size, slice_size}, val.t1[i]);
        Tensor y = generator.forward(x);
        Tensor f = Tensor::from({1, 1, slice_size, slice_size}, val.flair[i]);
        acc += l2_loss(y, f).item();
    }
    generator.set_mode(saved);
    return acc / static_cast<double>(val.t1.size());
}

struct Best {
    double metric = 0.0;
    bool lower_is_better = false;
    int epoch = -1;
    std::string classifier, generator;

    bool improves(double v) const {
        if (epoch < 0) return true;
        return lower_is_better ? v < metric : v > metric;
    }
};

}  // namespace train_detail

inline TrainResult train_unimodal(const std::vector<Subject>& cohort, const FoldPlan& fold,
                                  const TrainConfig& config) {
    config.validate();
    if (fold.train_ids.empty()) throw ConfigError("train_unimodal: empty training set");
    using namespace train_detail;
    const auto train_subjects = pick_subjects(cohort, fold.train_ids);
    const auto val_subjects = pick_subjects(cohort, fold.val_ids);
    const auto train = prepare_slices(train_subjects, config.slice_size);

    UNetConfig net_cfg{1, 1, config.depth, config.base_filters, FinalActivation::Sigmoid, 0.2};
    Network classifier = build_classifier(net_cfg, derive_seed(config.seed, "cls-init"));
    classifier.set_mode(Mode::Train);
    Adam adam(classifier.parameters(), {.lr = config.lr});

    Rng batch_rng(derive_seed(config.seed, "batches"));
    TrainResult result;
    result.seed = config.seed;
    Best best;

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const auto batches = batch_schedule(batch_rng, train.t1.size(), config.batch_size);
        if (batches.empty()) throw ConfigError("train_unimodal: no usable batches");
        double l_c = 0.0;
        for (const auto& idx : batches) {
            adam.zero_grad();
            Tape tape;
            TapeScope scope(tape);
            Tensor x = gather(train.t1, idx, config.slice_size);
            Tensor target = gather(train.label, idx, config.slice_size);
            Tensor loss = bce_loss(classifier.forward(x), target);
            check_loss_finite(loss.item(), "classifier loss");
            tape.backward(loss);
            adam.step();
            l_c += loss.item();
        }
        EpochStats stats;
        stats.epoch = epoch;
        stats.l_c = l_c / static_cast<double>(batches.size());
        stats.val_dice = validation_dice(classifier, nullptr, val_subjects, config.slice_size);
        result.curve.push_back(stats);
        if (best.improves(stats.val_dice)) {
            best.metric = stats.val_dice;
            best.epoch = epoch;
            best.classifier = classifier.serialize();
        }
    }
    result.classifier_checkpoint = best.classifier;
    result.selected_epoch = best.epoch;
    return result;
}

inline TrainResult train_offline(const std::vector<Subject>& cohort, const FoldPlan& fold,
                                 const TrainConfig& config) {
    config.validate();
    if (fold.train_ids.empty()) throw ConfigError("train_offline: empty training set");
    using namespace train_detail;
    const auto train_subjects = pick_subjects(cohort, fold.train_ids);
    const auto val_subjects = pick_subjects(cohort, fold.val_ids);
    const auto train = prepare_slices(train_subjects, config.slice_size);
    const auto val = prepare_slices(val_subjects, config.slice_size);

    TrainResult result;
    result.seed = config.seed;

    // stage 1: generator alone on the reconstruction loss
    UNetConfig gen_cfg{1, 1, config.depth, config.base_filters, FinalActivation::LeakyReLU, 0.2};
    Network generator = build_generator(gen_cfg, derive_seed(config.seed, "gen-init"));
    generator.set_mode(Mode::Train);
    Adam adam_g(generator.parameters(), {.lr = config.lr});
    Rng batch_rng(derive_seed(config.seed, "batches"));

    Best best_g;
    best_g.lower_is_better = true;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const auto batches = batch_schedule(batch_rng, train.t1.size(), config.batch_size);
        if (batches.empty()) throw ConfigError("train_offline: no usable batches");
        double l_g = 0.0;
        for (const auto& idx : batches) {
            adam_g.zero_grad();
            Tape tape;
            TapeScope scope(tape);
            Tensor x = gather(train.t1, idx, config.slice_size);
            Tensor flair = gather(train.flair, idx, config.slice_size);
            Tensor loss = l2_loss(generator.forward(x), flair);
            check_loss_finite(loss.item(), "generator loss");
            tape.backward(loss);
            adam_g.step();
            if (config.on_generator_step) config.on_generator_step(generator);
            l_g += loss.item();
        }
        EpochStats stats;
        stats.epoch = epoch;
        stats.l_g_l2 = l_g / static_cast<double>(batches.size());
        stats.val_l2 = validation_l2(generator, val, config.slice_size);
        result.curve.push_back(stats);
        if (best_g.improves(stats.val_l2)) {
            best_g.metric = stats.val_l2;
            best_g.epoch = epoch;
            best_g.generator = generator.serialize();
        }
    }

    // stage 2: freeze the selected generator, train the classifier on
    // (t1, G(t1)); the synthetic channel is precomputed in eval mode
    Network frozen = Network::deserialize(best_g.generator);
    const std::uint64_t frozen_fingerprint = frozen.parameter_fingerprint();
    std::vector<std::vector<double>> synth(train.t1.size());
    for (std::size_t i = 0; i < train.t1.size(); ++i) {
        Tensor x = Tensor::from({1, 1, config.slice_size, config.slice_size}, train.t1[i]);
        synth[i] = frozen.forward(x).values();
    }

    UNetConfig cls_cfg{2, 1, config.depth, config.base_filters, FinalActivation::Sigmoid, 0.2};
    Network classifier = build_classifier(cls_cfg, derive_seed(config.seed, "cls-init"));
    classifier.set_mode(Mode::Train);
    Adam adam_c(classifier.parameters(), {.lr = config.lr});
    Rng batch_rng2(derive_seed(config.seed, "batches-cls"));

    Best best_c;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const auto batches = batch_schedule(batch_rng2, train.t1.size(), config.batch_size);
        double l_c = 0.0;
        for (const auto& idx : batches) {
            adam_c.zero_grad();
            Tape tape;
            TapeScope scope(tape);
            Tensor x = concat_channels(gather(train.t1, idx, config.slice_size),
                                       gather(synth, idx, config.slice_size));
            Tensor target = gather(train.label, idx, config.slice_size);
            Tensor loss = bce_loss(classifier.forward(x), target);
            check_loss_finite(loss.item(), "classifier loss");
            tape.backward(loss);
            adam_c.step();
            l_c += loss.item();
        }
        EpochStats stats;
        stats.epoch = config.epochs + epoch;
        stats.l_c = l_c / static_cast<double>(batches.size());
        stats.val_dice = validation_dice(classifier, &frozen, val_subjects, config.slice_size);
        result.curve.push_back(stats);
        if (best_c.improves(stats.val_dice)) {
            best_c.metric = stats.val_dice;
            best_c.epoch = config.epochs + epoch;
            best_c.classifier = classifier.serialize();
        }
    }
    if (frozen.parameter_fingerprint() != frozen_fingerprint)
        throw Error("train_offline: generator parameters moved during stage 2");

    result.classifier_checkpoint = best_c.classifier;
    result.generator_checkpoint = best_g.generator;
    result.selected_epoch = best_c.epoch;
    return result;
}

inline TrainResult train_joint(const std::vector<Subject>& cohort, const FoldPlan& fold,
                               const TrainConfig& config) {
    config.validate();
    if (fold.train_ids.empty()) throw ConfigError("train_joint: empty training set");
    using namespace train_detail;
    const auto train_subjects = pick_subjects(cohort, fold.train_ids);
    const auto val_subjects = pick_subjects(cohort, fold.val_ids);
    const auto train = prepare_slices(train_subjects, config.slice_size);
    const auto val = prepare_slices(val_subjects, config.slice_size);

    UNetConfig gen_cfg{1, 1, config.depth, config.base_filters, FinalActivation::LeakyReLU, 0.2};
    UNetConfig cls_cfg{2, 1, config.depth, config.base_filters, FinalActivation::Sigmoid, 0.2};
    Network generator = build_generator(gen_cfg, derive_seed(config.seed, "gen-init"));
    Network classifier = build_classifier(cls_cfg, derive_seed(config.seed, "cls-init"));
    generator.set_mode(Mode::Train);
    classifier.set_mode(Mode::Train);
    Adam adam_g(generator.parameters(), {.lr = config.lr});
    Adam adam_c(classifier.parameters(), {.lr = config.lr});
    Rng batch_rng(derive_seed(config.seed, "batches"));

    TrainResult result;
    result.seed = config.seed;
    Best best;

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const auto batches = batch_schedule(batch_rng, train.t1.size(), config.batch_size);
        if (batches.empty()) throw ConfigError("train_joint: no usable batches");
        double l_c = 0.0, l_g_l2 = 0.0, l_g_seg = 0.0;
        for (const auto& idx : batches) {
            adam_g.zero_grad();
            adam_c.zero_grad();
            Tensor t1 = gather(train.t1, idx, config.slice_size);
            Tensor flair = gather(train.flair, idx, config.slice_size);
            Tensor target = gather(train.label, idx, config.slice_size);

            // one train-mode generator forward per batch, shared by both steps
            Tape gen_tape;
            Tensor g_out;
            {
                TapeScope scope(gen_tape);
                g_out = generator.forward(t1);
            }

            // classifier step: the generator output enters as a constant
            const std::uint64_t gen_before = generator.parameter_fingerprint();
            {
                Tape cls_tape;
                TapeScope scope(cls_tape);
                Tensor c_out = classifier.forward(concat_channels(t1, g_out.detach()));
                Tensor loss_c = bce_loss(c_out, target);
                check_loss_finite(loss_c.item(), "classifier loss");
                cls_tape.backward(loss_c);
                l_c += loss_c.item();
            }
            adam_c.step();
            if (generator.parameter_fingerprint() != gen_before)
                throw Error("train_joint: classifier step changed generator parameters");

            // generator step: reconstruction plus the segmentation loss routed
            // through the (fixed) classifier back into the generator
            const std::uint64_t cls_before = classifier.parameter_fingerprint();
            {
                TapeScope scope(gen_tape);
                Tensor l2v = l2_loss(g_out, flair);
                Tensor loss_g = l2v;
                if (config.lambda_seg > 0.0) {
                    // classifier parameters are fixed here, so their gradients
                    // are never needed; gradient flow still reaches g_out
                    classifier.set_parameters_trainable(false);
                    Tensor c_out = classifier.forward(concat_channels(t1, g_out));
                    Tensor seg = bce_loss(c_out, target);
                    loss_g = add(l2v, scale(seg, config.lambda_seg));
                    l_g_seg += seg.item();
                }
                check_loss_finite(loss_g.item(), "generator loss");
                gen_tape.backward(loss_g);
                classifier.set_parameters_trainable(true);
                l_g_l2 += l2v.item();
            }
            adam_g.step();
            classifier.zero_grad();  // discard the pass-through classifier gradients
            if (classifier.parameter_fingerprint() != cls_before)
                throw Error("train_joint: generator step changed classifier parameters");
            if (config.on_generator_step) config.on_generator_step(generator);
        }
        EpochStats stats;
        stats.epoch = epoch;
        stats.l_c = l_c / static_cast<double>(batches.size());
        stats.l_g_l2 = l_g_l2 / static_cast<double>(batches.size());
        stats.l_g_seg = l_g_seg / static_cast<double>(batches.size());
        stats.val_dice = validation_dice(classifier, &generator, val_subjects, config.slice_size);
        stats.val_l2 = validation_l2(generator, val, config.slice_size);
        result.curve.push_back(stats);
        if (best.improves(stats.val_dice)) {
            best.metric = stats.val_dice;
            best.epoch = epoch;
            best.classifier = classifier.serialize();
            best.generator = generator.serialize();
        }
    }
    result.classifier_checkpoint = best.classifier;
    result.generator_checkpoint = best.generator;
    result.selected_epoch = best.epoch;
    return result;
}

inline TrainResult train(const std::vector<Subject>& cohort, const FoldPlan& fold,
                         const TrainConfig& config) {
    switch (config.regime) {
        case Regime::Unimodal: return train_unimodal(cohort, fold, config);
        case Regime::Offline: return train_offline(cohort, fold, config);
        case Regime::Joint: return train_joint(cohort, fold, config);
    }
    throw ConfigError("train: bad regime");
}

}  // namespace jsynth
