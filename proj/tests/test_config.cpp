#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "cilia/config.hpp"
#include "cilia/errors.hpp"

using cilia::ConfigError;
using cilia::config::Config;

TEST_CASE("defaults are present for every known key") {
    const Config c;
    for (const auto& k : cilia::config::known_keys()) CHECK(c.get(k.key) == k.default_value);
    CHECK(c.get_double("eval.threshold") == 0.5);
    CHECK(c.get_int("patch.size") == 11);
    CHECK(c.get_ints("seg.down") == std::vector<int>{2, 2});
    CHECK(c.get_bool("deterministic"));
}

TEST_CASE("parse handles comments, blanks and whitespace") {
    const auto c = Config::parse("# run\n\n  seed = 42   # trailing\nflow.alpha=0.25\nseg.down = 3, 4,5\n");
    CHECK(c.get_u64("seed") == 42);
    CHECK(c.get_double("flow.alpha") == 0.25);
    CHECK(c.get_ints("seg.down") == std::vector<int>{3, 4, 5});
}

TEST_CASE("unknown keys and malformed values are rejected with their line") {
    CHECK_THROWS_WITH_AS(Config::parse("seed = 1\nflow.alhpa = 2\n", "run.cfg"), doctest::Contains("run.cfg:2"),
                         ConfigError);
    CHECK_THROWS_AS(Config::parse("seed = minus one\n"), ConfigError);
    CHECK_THROWS_AS(Config::parse("deterministic = maybe\n"), ConfigError);
    CHECK_THROWS_AS(Config::parse("seg.down = 2,x\n"), ConfigError);
    CHECK_THROWS_AS(Config::parse("just words\n"), ConfigError);
    Config c;
    CHECK_THROWS_AS(c.apply_override("threads"), ConfigError);
    CHECK_THROWS_AS(c.apply_override("nope=1"), ConfigError);
    CHECK_THROWS_AS((void)c.get("nope"), ConfigError);
}

TEST_CASE("overrides win over files and resolved text round-trips") {
    const auto dir = std::filesystem::temp_directory_path() / "cilia_test_config";
    std::filesystem::create_directories(dir);
    {
        std::ofstream(dir / "a.cfg") << "seed = 3\nclf.hidden = 8\n";
    }
    Config c;
    c.merge_file(dir / "a.cfg");
    c.apply_override("seed=9");
    CHECK(c.get_u64("seed") == 9);
    CHECK(c.get_int("clf.hidden") == 8);

    c.write_resolved(dir / "resolved.cfg");
    CHECK(Config::load(dir / "resolved.cfg") == c);
    CHECK(Config::parse(c.resolved_text()) == c);
    CHECK(c.resolved_text().find("clf.hidden = 8\n") != std::string::npos);
    CHECK_THROWS_AS(Config::load(dir / "missing.cfg"), ConfigError);
    std::filesystem::remove_all(dir);
}
