#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <sys/wait.h>

#include <json.hpp>

namespace {

struct Result {
    int code{-1};
    std::string out;
};

Result run(const std::string& args)
{
    const std::string cmd = std::string(PITPO_CLI_PATH) + " " + args + " 2>/dev/null";
    Result r;
    FILE* p = ::popen(cmd.c_str(), "r");
    REQUIRE(p != nullptr);
    char buf[4096];
    while (const auto n = std::fread(buf, 1, sizeof buf, p)) {
        r.out.append(buf, n);
    }
    const int status = ::pclose(p);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

}  // namespace

TEST_CASE("version and usage errors")
{
    const auto v = run("--version");
    CHECK(v.code == 0);
    CHECK(v.out.find("pitpo/1") != std::string::npos);
    CHECK(run("run --iters 2").code == 2);
    CHECK(run("run --task oscillator1 --group 1 --iters 2").code == 2);
    CHECK(run("run --task no_such_task --iters 2").code == 3);
    CHECK(run("run --task oscillator1 --config /nonexistent.json").code == 2);
}

TEST_CASE("eval prints the breakdown and rejects bad syntax")
{
    const auto r = run("eval --task oscillator1 --points 400 --program \"c0*sin(c1*x) - c2*v^3 - c3*x^3 - c4*x*v - x*cos(x)\"");
    REQUIRE(r.code == 0);
    const auto j = nlohmann::json::parse(r.out);
    CHECK(j["metrics"]["train"]["nmse"].get<double>() < 1e-12);
    for (const char* k : {"reward", "constraints", "exclusion", "coeffs"}) {
        CHECK(j.contains(k));
    }
    CHECK(run("eval --task oscillator1 --program \"c0*(x\"").code == 4);
    const auto csv = run("eval --task oscillator1 --points 200 --program \"c0*x\" --format csv");
    CHECK(csv.code == 0);
    CHECK(csv.out.find("reward.r_global,") != std::string::npos);
}

TEST_CASE("run writes a trajectory line per iteration")
{
    const auto dir = std::filesystem::temp_directory_path() / "pitpo_cli_run";
    std::filesystem::remove_all(dir);
    const auto r = run("run --task oscillator1 --points 200 --iters 4 --seed 1 --out " + dir.string());
    CHECK(r.code == 0);
    std::ifstream in(dir / "trajectory.jsonl");
    int lines = 0;
    for (std::string l; std::getline(in, l);) {
        ++lines;
    }
    CHECK(lines == 4);

    const auto again_dir = std::filesystem::temp_directory_path() / "pitpo_cli_run2";
    std::filesystem::remove_all(again_dir);
    run("run --task oscillator1 --points 200 --iters 4 --seed 1 --out " + again_dir.string());
    std::ifstream a(dir / "trajectory.jsonl");
    std::ifstream b(again_dir / "trajectory.jsonl");
    std::string sa((std::istreambuf_iterator<char>(a)), {});
    std::string sb((std::istreambuf_iterator<char>(b)), {});
    CHECK(sa == sb);
    std::filesystem::remove_all(dir);
    std::filesystem::remove_all(again_dir);
}

TEST_CASE("run through the echo adapter")
{
    const auto r = run(std::string("run --task oscillator1 --points 200 --iters 2 --policy \"bridge:") + ECHO_ADAPTER_PATH +
                       "\"");
    REQUIRE(r.code == 0);
    const auto j = nlohmann::json::parse(r.out);
    CHECK(j["fallbacks"] == 0);
    CHECK(j["best"]["program"] == "c0*x");
}

TEST_CASE("verify passes and the injected fault is caught")
{
    CHECK(run("verify --trials 200 --gradient-batches 5 --seed 2").code == 0);
    CHECK(run("verify --trials 200 --gradient-batches 1 --inject-fault").code == 1);
    CHECK(run("verify --trials 0 --gradient-batches 0").code == 0);
}
