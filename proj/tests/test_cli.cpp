#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "fixtures.hpp"
#include "saq/dataset.hpp"
#include "saq/diagnostics.hpp"
#include "saq/run_dir.hpp"

using namespace saq;
namespace fs = std::filesystem;

namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(SAQ_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string lookup(const KeyValues& kv, const std::string& key) {
  for (const auto& [k, v] : kv) {
    if (k == key) return v;
  }
  return "<missing>";
}

}  // namespace

TEST_CASE("cli usage errors") {
  CHECK(run("") == 1);
  CHECK(run("frobnicate") == 1);
  CHECK(run("gen-data --env maze") == 1);
  CHECK(run("train --algo sac --dataset x") == 1);
  CHECK(run("--help") == 0);
}

TEST_CASE("cli pipeline") {
  const fs::path dir = testing::scratch_dir("cli");
  const std::string d = dir.string();

  CHECK(run("gen-data --env maze --n 3 --seed 7 --out " + d + "/a.saqd") == 0);
  CHECK(run("gen-data --env maze --n 3 --seed 7 --out " + d + "/b.saqd") == 0);
  CHECK(slurp(dir / "a.saqd") == slurp(dir / "b.saqd"));
  CHECK(load_dataset(dir / "a.saqd").metadata().env == "maze");
  CHECK(run("gen-data --env bandit --n 100 --seed 1 --out " + d + "/bandit.saqd") == 0);
  CHECK(run("gen-data --env nowhere --out " + d + "/x.saqd") == 1);

  CHECK(run("train-quantizer --dataset " + d + "/missing.saqd --out " + d + "/q") == 2);
  const std::string before = slurp(dir / "a.saqd");
  REQUIRE(run("train-quantizer --dataset " + d + "/a.saqd --K 8 --epochs 3 --seed 2 --out " + d + "/q") == 0);
  CHECK(slurp(dir / "a.saqd") == before);
  CHECK(fs::exists(dir / "q" / "quantizer.saqm"));
  CHECK(verify_manifest(dir / "q").empty());
  CHECK(read_manifest(dir / "q").size() >= 3);
  CHECK(lookup(read_key_value_file(dir / "q" / "config.resolved"), "K") == "8");

  SUBCASE("existing run directory needs --force") {
    const std::string manifest = slurp(dir / "q" / "MANIFEST");
    CHECK(run("train-quantizer --dataset " + d + "/a.saqd --K 4 --epochs 2 --out " + d + "/q") == 2);
    CHECK(slurp(dir / "q" / "MANIFEST") == manifest);
    CHECK(run("train-quantizer --dataset " + d + "/a.saqd --K 4 --epochs 2 --out " + d + "/q --force") == 0);
    CHECK(lookup(read_key_value_file(dir / "q" / "config.resolved"), "K") == "4");
  }

  SUBCASE("train, evaluate and override from a config file") {
    REQUIRE(run("quantize --dataset " + d + "/a.saqd --model " + d + "/q/quantizer.saqm --out " + d + "/codes.saqd") ==
            0);
    CHECK(is_discrete_dataset_file(dir / "codes.saqd"));
    std::ofstream(dir / "train.cfg") << "# training\nalpha = 5.0\nsteps = 30\nbatch = 16\n";
    REQUIRE(run("train --config " + d + "/train.cfg --algo cql --dataset " + d + "/codes.saqd --quantizer " + d +
                "/q/quantizer.saqm --alpha 2.0 --episodes 2 --out " + d + "/agent") == 0);
    const KeyValues cfg = read_key_value_file(dir / "agent" / "config.resolved");
    CHECK(parse_real(lookup(cfg, "alpha")) == 2.0);
    CHECK(lookup(cfg, "steps") == "30");
    CHECK(fs::exists(dir / "agent" / "agent.saqa"));
    CHECK(MetricTrace::read_csv(dir / "agent" / "metrics.csv").rows() > 0);
    CHECK(verify_manifest(dir / "agent").empty());

    CHECK(run("eval --agent " + d + "/agent/agent.saqa --quantizer " + d + "/q/quantizer.saqm --episodes 2") == 0);
    CHECK(run("eval --agent " + d + "/agent/agent.saqa --episodes 2") == 1);
    CHECK(run("eval --agent " + d + "/q/quantizer.saqm --quantizer " + d + "/q/quantizer.saqm") == 2);

    REQUIRE(run("train --algo cont-bc --dataset " + d + "/a.saqd --steps 20 --episodes 1 --out " + d + "/cont") == 0);
    CHECK(fs::exists(dir / "cont" / "agent.saqc"));
    CHECK(run("eval --agent " + d + "/cont/agent.saqc --episodes 2") == 0);
  }
}

TEST_CASE("cli default run root") {
  const fs::path root = testing::scratch_dir("cli-root");
  const fs::path data = root / "d.saqd";
  REQUIRE(run("gen-data --env maze --n 1 --seed 3 --out " + data.string()) == 0);
  const std::string cmd = "SAQ_RUN_ROOT=" + root.string() + " " + SAQ_CLI_PATH + " train-quantizer --dataset " +
                          data.string() + " --K 4 --epochs 1 --seed 5 >/dev/null 2>&1";
  CHECK(std::system(cmd.c_str()) == 0);
  CHECK(fs::exists(root / "train-quantizer-seed5" / "MANIFEST"));
}

TEST_CASE("cli diagnose identities") {
  const fs::path dir = testing::scratch_dir("cli-diag");
  const int code = run("diagnose identities --out " + (dir / "id").string());
  REQUIRE(fs::exists(dir / "id" / "report.json"));
  const ExperimentReport r = ExperimentReport::read(dir / "id");
  CHECK(code == (r.passed() ? 0 : 3));
  CHECK(verify_manifest(dir / "id").empty());
  ExperimentReport again = r;
  recompute_verdicts(again);
  CHECK(again.passed() == r.passed());
  CHECK(run("diagnose unknown-experiment --out " + (dir / "u").string()) == 1);
}
