#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "helpers.hpp"
#include "json.hpp"
#include "pami/cli.hpp"
#include "pami/inference.hpp"
#include "pami/io.hpp"

using namespace pami;
using nlohmann::json;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run pami_run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

const fs::path& root() {
  static const fs::path p = [] {
    fs::path d = fs::temp_directory_path() / "pami_cli";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return p;
}

// Dataset and a briefly trained checkpoint shared by the tests below.
const fs::path& trained() {
  static const fs::path ckpt = [] {
    const fs::path data = root() / "data";
    REQUIRE(pami_run({"synth", "--out", data.string(), "--scans", "5", "--slices", "9", "--height", "32", "--width",
                      "32", "--seed", "7"})
                .code == 0);
    io::write_text(root() / "tiny.json", R"({"channels": 16, "n_f": 8, "m_modules": 1, "iterations": 4})");
    const Run r = pami_run({"train", "--data", data.string(), "--out", (root() / "run").string(), "--config",
                            (root() / "tiny.json").string(), "--fold", "0", "--seed", "3"});
    REQUIRE(r.code == 0);
    return root() / "run" / "checkpoint.bin";
  }();
  return ckpt;
}

std::vector<json> read_jsonl(const fs::path& p) {
  std::ifstream in(p);
  std::vector<json> out;
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) out.push_back(json::parse(line));
  return out;
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("synth writes a manifest") {
    const fs::path out = root() / "synth_only";
    const Run r = pami_run({"synth", "--out", out.string(), "--scans", "10", "--seed", "7", "--slices", "9", "--height",
                            "32", "--width", "32"});
    CHECK(r.code == 0);
    CHECK(fs::exists(out / "manifest.json"));
    CHECK(json::parse(io::read_text(out / "manifest.json")).at("scans").size() == 10);
  }

  TEST_CASE("usage errors exit 2, missing files exit 1") {
    CHECK(pami_run({"frobnicate"}).code == cli::kExitUsage);
    CHECK(pami_run({}).code == cli::kExitUsage);
    CHECK(pami_run({"eval", "--bogus-flag"}).code == cli::kExitUsage);
    CHECK(pami_run({"train", "--setting", "3"}).code == cli::kExitUsage);
    CHECK(pami_run({"train", "--data", (root() / "nowhere").string(), "--out", (root() / "x").string()}).code ==
          cli::kExitRuntime);
    CHECK(pami_run({"eval", "--data", (root() / "data").string(), "--ckpt", (root() / "missing.bin").string()}).code ==
          cli::kExitRuntime);
  }

  TEST_CASE("the installed binary reports the same exit codes") {
    const std::string bin = PAMI_CLI_PATH;
    const int status = std::system((bin + " frobnicate > /dev/null 2>&1").c_str());
    CHECK(WEXITSTATUS(status) == 2);
    const int ok = std::system((bin + " --help > /dev/null 2>&1").c_str());
    CHECK(WEXITSTATUS(ok) == 0);
  }

  TEST_CASE("train then eval writes per-class DSC tables that match the saved masks") {
    const fs::path ckpt = trained();
    CHECK(fs::exists(root() / "run" / "config.json"));
    CHECK(read_jsonl(root() / "run" / "loss.jsonl").size() == 4);

    const fs::path out = root() / "eval";
    const Run r = pami_run({"eval", "--data", (root() / "data").string(), "--fold", "0", "--ckpt", ckpt.string(),
                            "--out", out.string()});
    REQUIRE(r.code == 0);
    const json table = json::parse(io::read_text(out / "dsc.json"));
    REQUIRE(table.at("classes").size() == 4);
    for (const auto& c : table.at("classes")) CHECK(c.contains("mean_dsc"));
    CHECK(io::read_text(out / "dsc.csv").find("class") != std::string::npos);

    const auto rows = read_jsonl(out / "results.jsonl");
    REQUIRE(!rows.empty());
    for (const auto& row : rows) {
      CHECK(row.at("fold") == 0);
      const std::string id = row.at("episode_id");
      const Mask pred = io::read_mask_png(out / "masks" / (id + "_pred.png"));
      const Mask gt = io::read_mask_png(out / "masks" / (id + "_gt.png"));
      CHECK(dice_score(pred, gt) == row.at("dsc").get<double>());
    }
  }

  TEST_CASE("eval is reproducible for a fixed seed") {
    const fs::path ckpt = trained();
    for (const char* name : {"rep_a", "rep_b"})
      REQUIRE(pami_run({"eval", "--data", (root() / "data").string(), "--ckpt", ckpt.string(), "--seed", "5", "--out",
                        (root() / name).string()})
                  .code == 0);
    CHECK(io::read_text(root() / "rep_a" / "dsc.json") == io::read_text(root() / "rep_b" / "dsc.json"));
  }

  TEST_CASE("eval refuses a module count that differs from the checkpoint") {
    const Run r = pami_run({"eval", "--data", (root() / "data").string(), "--ckpt", trained().string(), "--modules", "3"});
    CHECK(r.code == cli::kExitUsage);
  }

  TEST_CASE("partition writes region pages") {
    const Mask m(20, 20, 1);
    io::write_mask_png(root() / "fg.png", m);
    const fs::path out = root() / "regions";
    const Run r = pami_run({"partition", "--mask", (root() / "fg.png").string(), "--nf", "6", "--seed", "2", "--out",
                            out.string()});
    REQUIRE(r.code == 0);
    const json idx = json::parse(io::read_text(out / "regions.json"));
    CHECK(idx.at("n_f") == 6);
    CHECK(fs::exists(out / "region_005.png"));
  }

  TEST_CASE("predict renders an overlay, exports features and dumps prototypes") {
    const fs::path ckpt = trained();
    const fs::path dir = root() / "predict";
    fs::create_directories(dir);
    const Run a = pami_run({"predict", "--data", (root() / "data").string(), "--ckpt", ckpt.string(), "--class", "2",
                            "--out", (dir / "a.png").string(), "--export-features", (dir / "feat").string(),
                            "--dump-prototypes", (dir / "protos.json").string()});
    REQUIRE(a.code == 0);
    CHECK(io::read_text(dir / "a.png").substr(1, 3) == "PNG");
    const json protos = json::parse(io::read_text(dir / "protos.json"));
    CHECK(protos.contains("regional"));
    CHECK(protos.contains("prd.0.support"));
    CHECK(protos.at("regional").at("shape")[1] == 16);

    const Run b = pami_run({"predict", "--data", (root() / "data").string(), "--ckpt", ckpt.string(), "--class", "2",
                            "--out", (dir / "b.png").string(), "--support-features", (dir / "feat" / "support.bin").string(),
                            "--query-features", (dir / "feat" / "query.bin").string()});
    REQUIRE(b.code == 0);
    CHECK(a.out.substr(0, a.out.find(" ->")) == b.out.substr(0, b.out.find(" ->")));

    CHECK(pami_run({"predict", "--data", (root() / "data").string(), "--ckpt", ckpt.string(), "--out",
                    (dir / "c.png").string(), "--support-features", (dir / "feat" / "support.bin").string()})
              .code == cli::kExitUsage);
  }
}
