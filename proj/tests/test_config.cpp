#include <doctest.h>

#include <cstdlib>
#include <filesystem>

#include "mrlab/config.hpp"
#include "mrlab/error.hpp"
#include "mrlab/io.hpp"

using namespace mrlab;

TEST_CASE("config file parsing and overrides") {
    const std::filesystem::path path = "/tmp/mrlab_test_config.txt";
    atomic_write_file(path, "# comment\nseed = 42\nK = 256\nlambda = 12.5 # inline\n\n");
    config::RunConfig cfg = config::RunConfig::from_file(path);
    CHECK(cfg.seed == 42);
    CHECK(cfg.train.K == 256);
    CHECK(cfg.train.lambda == 12.5);

    cfg.apply_override("k", "32");
    CHECK(cfg.train.k == 32);
    CHECK_THROWS_AS(cfg.apply_override("no_such_key", "1"), ConfigError);
    CHECK_THROWS_AS(cfg.apply_override("K", "not-a-number"), ConfigError);

    atomic_write_file(path, "seed 42\n");
    CHECK_THROWS_AS(config::RunConfig::from_file(path), ConfigError);
    std::filesystem::remove(path);
}

TEST_CASE("environment seed override wins") {
    config::RunConfig cfg;
    cfg.seed = 5;
    setenv("MRLAB_SEED", "777", 1);
    cfg.apply_env_seed();
    unsetenv("MRLAB_SEED");
    CHECK(cfg.seed == 777);
    CHECK(cfg.train.seed == 777);
}

TEST_CASE("resolved snapshot round trips") {
    config::RunConfig cfg;
    cfg.seed = 9;
    cfg.train.k = 64;
    cfg.pretrain_lr = 2e-3;
    const std::string text = cfg.resolved_text();

    const std::filesystem::path path = "/tmp/mrlab_test_snapshot.txt";
    atomic_write_file(path, text);
    const config::RunConfig back = config::RunConfig::from_file(path);
    CHECK(back.seed == 9);
    CHECK(back.train.k == 64);
    CHECK(back.pretrain_lr == 2e-3);
    CHECK(back.resolved_text() == text);
    std::filesystem::remove(path);
}

TEST_CASE("derived configs carry the resolved values") {
    config::RunConfig cfg;
    cfg.dim = 64;
    cfg.layers = 8;
    cfg.families = 4;
    CHECK(cfg.backbone_config().dim == 64);
    CHECK(cfg.pretrain_config().arch.layers == 8);
    CHECK(cfg.gen_config().n_families == 4);
}
