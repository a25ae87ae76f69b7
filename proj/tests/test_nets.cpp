#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

#include "jsynth/gradcheck.hpp"
#include "jsynth/unet.hpp"

using namespace jsynth;

namespace {

Tensor random_input(Shape shape, std::uint64_t seed) {
    Rng rng(seed);
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& v : t.values()) v = rng.uniform(-2.0, 2.0);
    return t;
}

}  // namespace

TEST_CASE("classifier contract: shape and probability range") {
    UNetConfig cfg{2, 1, 1, 2, FinalActivation::Sigmoid, 0.2};
    Network net = build_classifier(cfg, 42);
    net.set_mode(Mode::Eval);
    Tensor x = random_input({1, 2, 8, 8}, 1);
    Tensor y = net.forward(x);
    REQUIRE(y.shape() == Shape{1, 1, 8, 8});
    for (double v : y.values()) {
        REQUIRE(v > 0.0);
        REQUIRE(v < 1.0);
    }
}

TEST_CASE("distinct seeds give distinct parameters") {
    UNetConfig cfg{2, 1, 1, 2, FinalActivation::Sigmoid, 0.2};
    Network a = build_classifier(cfg, 0);
    Network b = build_classifier(cfg, 1);
    REQUIRE(a.parameter_fingerprint() != b.parameter_fingerprint());
}

TEST_CASE("parameter count matches the layer enumeration") {
    // depth=1, base_filters=2, in=2:
    //   encoder block 2->2:    (36+2+2+2) + (36+2+2+2)        = 84
    //   bottleneck 2->4:       (72+4+4+4) + (144+4+4+4)       = 240
    //   decoder block 6->2:    (108+2+2+2) + (36+2+2+2)       = 156
    //   1x1 head 2->1:         2+1                            = 3
    UNetConfig cfg{2, 1, 1, 2, FinalActivation::Sigmoid, 0.2};
    Network net = build_classifier(cfg, 7);
    REQUIRE(net.parameter_count() == 483);
}

TEST_CASE("generator contract") {
    UNetConfig cfg{1, 1, 2, 2, FinalActivation::LeakyReLU, 0.2};
    Network gen = build_generator(cfg, 3);
    gen.set_mode(Mode::Eval);
    Tensor x = random_input({1, 1, 16, 16}, 2);
    Tensor y = gen.forward(x);
    REQUIRE(y.shape() == Shape{1, 1, 16, 16});

    // the leaky head admits negative intensities
    double min_v = 1e9;
    for (std::uint64_t s = 0; s < 4; ++s) {
        Tensor out = gen.forward(random_input({1, 1, 16, 16}, 100 + s));
        for (double v : out.values()) min_v = std::min(min_v, v);
    }
    REQUIRE(min_v < 0.0);
}

TEST_CASE("config validation") {
    UNetConfig cfg{1, 1, 2, 2, FinalActivation::LeakyReLU, 0.2};
    REQUIRE_THROWS_AS(build_classifier(cfg, 0), ConfigError);  // classifier needs sigmoid
    UNetConfig two_ch = cfg;
    two_ch.in_channels = 2;
    REQUIRE_THROWS_AS(build_generator(two_ch, 0), ConfigError);
    UNetConfig bad = cfg;
    bad.in_channels = 3;
    REQUIRE_THROWS_AS(Network(bad, 0), ConfigError);
    bad = cfg;
    bad.depth = 0;
    REQUIRE_THROWS_AS(Network(bad, 0), ConfigError);
    bad = cfg;
    bad.out_channels = 2;
    REQUIRE_THROWS_AS(Network(bad, 0), ConfigError);
}

TEST_CASE("forward input validation") {
    UNetConfig cfg{2, 1, 3, 2, FinalActivation::Sigmoid, 0.2};
    Network net = build_classifier(cfg, 1);
    net.set_mode(Mode::Eval);
    REQUIRE_THROWS_AS(net.forward(Tensor::zeros({1, 1, 16, 16})), ShapeError);
    REQUIRE_THROWS_MATCHES(net.forward(Tensor::zeros({1, 2, 20, 20})), ShapeError,
                           Catch::Matchers::MessageMatches(
                               Catch::Matchers::ContainsSubstring("divisible by 8")));
}

TEST_CASE("shape preservation across configs") {
    for (Dim depth : {1, 2, 3}) {
        for (Dim in_ch : {1, 2}) {
            UNetConfig cfg{in_ch, 1, depth, 2, FinalActivation::Sigmoid, 0.2};
            Network net = build_classifier(cfg, 11);
            net.set_mode(Mode::Eval);
            const Dim side = Dim{1} << (depth + 2);
            Tensor x = random_input({1, in_ch, side, side}, 5);
            Tensor y = net.forward(x);
            REQUIRE(y.shape() == Shape{1, 1, side, side});
        }
    }
}

TEST_CASE("eval forward is deterministic and batch independent") {
    UNetConfig cfg{1, 1, 2, 3, FinalActivation::Sigmoid, 0.2};
    Network net = build_classifier(cfg, 9);
    net.set_mode(Mode::Eval);
    Tensor x = random_input({1, 1, 8, 8}, 4);
    Tensor y1 = net.forward(x);
    Tensor y2 = net.forward(x);
    REQUIRE(y1.values() == y2.values());

    // a batch of two identical slices produces two identical output slices
    Tensor pair = Tensor::zeros({2, 1, 8, 8});
    std::copy(x.values().begin(), x.values().end(), pair.values().begin());
    std::copy(x.values().begin(), x.values().end(), pair.values().begin() + 64);
    Tensor yp = net.forward(pair);
    for (std::size_t i = 0; i < 64; ++i) REQUIRE(yp.values()[i] == yp.values()[64 + i]);
    for (std::size_t i = 0; i < 64; ++i) REQUIRE(yp.values()[i] == y1.values()[i]);
}

TEST_CASE("ablating a skip connection changes the output") {
    UNetConfig cfg{1, 1, 2, 2, FinalActivation::Sigmoid, 0.2};
    Network net = build_classifier(cfg, 31);
    net.set_mode(Mode::Eval);
    Tensor x = random_input({1, 1, 8, 8}, 6);
    Tensor normal = net.forward(x);
    for (int level = 0; level < 2; ++level) {
        Network::ForwardOptions opts;
        opts.ablate_skip_level = level;
        Tensor ablated = net.forward(x, opts);
        REQUIRE(normal.values() != ablated.values());
    }
}

TEST_CASE("checkpoint round-trip is bit exact") {
    UNetConfig cfg{2, 1, 2, 3, FinalActivation::Sigmoid, 0.2};
    Network net = build_classifier(cfg, 77);
    net.set_mode(Mode::Eval);
    Tensor x = random_input({1, 2, 8, 8}, 8);
    Tensor y = net.forward(x);

    const std::string bytes = net.serialize();
    Network loaded = Network::deserialize(bytes);
    REQUIRE(loaded.serialize() == bytes);
    REQUIRE(loaded.forward(x).values() == y.values());

    const auto path = std::filesystem::temp_directory_path() / "jsynth_test_net.jsyn";
    net.save(path.string());
    Network from_disk = Network::load(path.string());
    REQUIRE(from_disk.serialize() == bytes);
    std::filesystem::remove(path);

    std::string corrupt = bytes;
    corrupt[0] = 'X';
    REQUIRE_THROWS_AS(Network::deserialize(corrupt), BadMagic);
    REQUIRE_THROWS_AS(Network::deserialize(bytes.substr(0, bytes.size() - 3)), IoError);
}

TEST_CASE("eval forward does not mutate state, train forward does") {
    UNetConfig cfg{1, 1, 1, 2, FinalActivation::Sigmoid, 0.2};
    Network net = build_classifier(cfg, 13);
    net.set_mode(Mode::Eval);
    const std::string before = net.serialize();
    net.forward(random_input({2, 1, 4, 4}, 3));
    REQUIRE(net.serialize() == before);

    net.set_mode(Mode::Train);
    net.forward(random_input({2, 1, 4, 4}, 3));
    REQUIRE(net.serialize() != before);  // running stats moved
}

TEST_CASE("generator-classifier composite gradient check") {
    auto report = gradcheck::composite_check(0);
    INFO("max rel err " << report.max_rel_err);
    REQUIRE(report.max_rel_err < 1e-4);
}
