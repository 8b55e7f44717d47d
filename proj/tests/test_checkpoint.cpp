#include <fstream>

#include "doctest.h"
#include "optlab/checkpoint.hpp"
#include "optlab/errors.hpp"
#include "optlab/trainer.hpp"
#include "support.hpp"

using namespace optlab;
using namespace optlab::testing;

namespace {

Checkpoint trained_checkpoint(std::uint64_t steps) {
    Trainer t(tiny_config(steps), tiny_corpus());
    t.run();
    return Checkpoint{kCheckpointVersion, t.config().model, t.state()};
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

} // namespace

TEST_CASE("save, load, save gives identical bytes") {
    const auto ckpt = trained_checkpoint(12);
    const auto dir = fresh_dir("ckpt-roundtrip");
    save_checkpoint(dir / "a.bin", ckpt);
    const auto loaded = load_checkpoint(dir / "a.bin", &ckpt.model);
    save_checkpoint(dir / "b.bin", loaded);
    const auto a = read_bytes(dir / "a.bin");
    CHECK(a == read_bytes(dir / "b.bin"));
    CHECK(a == encode_checkpoint(ckpt));

    CHECK(loaded.state.step == ckpt.state.step);
    CHECK(loaded.state.tokens_seen == ckpt.state.tokens_seen);
    CHECK(params_identical(loaded.state.params, ckpt.state.params));
    CHECK(loaded.state.scaler.scale == ckpt.state.scaler.scale);
    CHECK(loaded.state.health.size() == ckpt.state.health.size());
    CHECK(loaded.state.checkpoints.size() == ckpt.state.checkpoints.size());
    CHECK(peek_checkpoint_version(dir / "a.bin") == kCheckpointVersion);
}

TEST_CASE("corruption is detected") {
    const auto bytes = encode_checkpoint(trained_checkpoint(3));
    SUBCASE("truncated payload") {
        const std::vector<std::uint8_t> cut(bytes.begin(), bytes.end() - 17);
        CHECK_THROWS_WITH_AS(decode_checkpoint(cut), doctest::Contains("checksum"), CheckpointError);
    }
    SUBCASE("truncated header") {
        const std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + 12);
        CHECK_THROWS_WITH_AS(decode_checkpoint(cut), doctest::Contains("checksum"), CheckpointError);
    }
    SUBCASE("flipped payload bit") {
        auto bad = bytes;
        bad[bad.size() / 2] ^= 0x10;
        CHECK_THROWS_AS(decode_checkpoint(bad), CheckpointError);
    }
    SUBCASE("bad magic") {
        auto bad = bytes;
        bad[0] = 'X';
        CHECK_THROWS_AS(decode_checkpoint(bad), CheckpointError);
    }
    SUBCASE("unknown version") {
        auto bad = bytes;
        bad[8] = 99;
        CHECK_THROWS_WITH_AS(decode_checkpoint(bad), doctest::Contains("version"), CheckpointError);
    }
}

TEST_CASE("model config mismatch is a config error") {
    const auto ckpt = trained_checkpoint(2);
    auto other = ckpt.model;
    other.d_model = 32;
    const auto bytes = encode_checkpoint(ckpt);
    CHECK_THROWS_WITH_AS(decode_checkpoint(bytes, &other), doctest::Contains("d_model"), ConfigError);
    CHECK_NOTHROW(decode_checkpoint(bytes, &ckpt.model));

    const auto dir = fresh_dir("ckpt-mismatch");
    save_checkpoint(dir / "c.bin", ckpt);
    auto cfg = tiny_config(4);
    cfg.model = other;
    CHECK_THROWS_AS(Trainer::resume(cfg, tiny_corpus(), dir / "c.bin"), ConfigError);
}

TEST_CASE("missing file is a checkpoint error") {
    CHECK_THROWS_AS(load_checkpoint("/nonexistent/optlab.bin"), CheckpointError);
}

TEST_CASE("fnv1a64 reference values") {
    CHECK(fnv1a64({}) == 0xcbf29ce484222325ULL);
    const std::uint8_t a[] = {'a'};
    CHECK(fnv1a64(a) == 0xaf63dc4c8601ec8cULL);
    const std::uint8_t foobar[] = {'f', 'o', 'o', 'b', 'a', 'r'};
    CHECK(fnv1a64(foobar) == 0x85944171f73967e8ULL);
}

TEST_CASE("resume from a file continues bit-exactly") {
    const auto dir = fresh_dir("ckpt-resume");
    auto cfg = tiny_config(30);
    cfg.run_dir = dir;
    Trainer full(cfg, tiny_corpus());
    full.run();

    const auto dir2 = fresh_dir("ckpt-resume-b");
    auto short_cfg = cfg;
    short_cfg.run_dir = dir2;
    short_cfg.token_budget = 20 * cfg.batch_tokens();
    Trainer first(short_cfg, tiny_corpus());
    first.run();
    const auto latest = latest_checkpoint(dir2);
    REQUIRE(latest.has_value());
    auto resumed = Trainer::resume(cfg, tiny_corpus(), *latest);
    CHECK(resumed.state().step == 20);
    resumed.run();
    CHECK(resumed.state().step == 30);
    CHECK(params_identical(resumed.state().params, full.state().params));
    CHECK(same_bits(resumed.state().health.back().train_loss, full.state().health.back().train_loss));
}
