#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "json.hpp"
#include "lfdepth/synthdata.hpp"
#include "support/temp_dir.hpp"

using lfd::testing::TempDir;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& f) {
  std::ifstream in(f, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Run cli(const TempDir& dir, const std::string& args) {
  const std::string out = dir.path("stdout.txt"), err = dir.path("stderr.txt");
  const std::string cmd = std::string("LFDEPTH_THREADS=2 '") + LFDEPTH_CLI + "' " + args + " >'" + out + "' 2>'" + err + "'";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

void write_text(const std::string& path, const std::string& text) { std::ofstream(path) << text; }

std::vector<std::pair<std::string, std::string>> tree(const fs::path& root) {
  std::vector<std::pair<std::string, std::string>> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) files.emplace_back(fs::relative(e.path(), root).string(), slurp(e.path()));
  }
  std::sort(files.begin(), files.end());
  return files;
}

const char* kMicroConfig = R"({
  "seed": 3,
  "network": {"height": 32, "width": 32, "slices": 4, "stage_channels": [2, 2, 4, 4, 4], "decoder_channels": 4},
  "train": {"epochs": 3, "lr": 0.001, "lr_late": 0.0003, "lr_drop_epoch": 2}
})";

/// Shared fixture: a 6-scene micro dataset and one trained checkpoint.
struct Fixture {
  TempDir dir;
  std::string data = dir.path("data");
  std::string config = dir.path("micro.json");
  std::string ckpt = dir.path("ckpt");

  Fixture() {
    write_text(config, kMicroConfig);
    REQUIRE(cli(dir, "generate --out '" + data + "' --scenes 6 --size 32 32 --slices 4 --seed 5").code == 0);
    REQUIRE(cli(dir, "train --data '" + data + "' --config '" + config + "' --out '" + ckpt + "'").code == 0);
  }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

}  // namespace

TEST_CASE("generate: file-count contract, determinism, validation") {
  TempDir dir;
  Run r = cli(dir, "generate --out '" + dir.path("one") + "' --scenes 1 --size 32 32 --slices 4 --seed 1");
  REQUIRE(r.code == 0);
  std::size_t images = 0, meta = 0;
  for (const auto& e : fs::directory_iterator(dir.path("one") + "/scene_0000")) {
    const auto ext = e.path().extension();
    images += ext == ".ppm" || ext == ".pgm";
    meta += e.path().filename() == "meta.json";
  }
  CHECK(images == 4 + 2);
  CHECK(meta == 1);
  CHECK(fs::exists(dir.path("one") + "/manifest.json"));

  REQUIRE(cli(dir, "generate --out '" + dir.path("a") + "' --scenes 3 --size 32 32 --slices 4 --seed 9").code == 0);
  REQUIRE(cli(dir, "generate --out '" + dir.path("b") + "' --scenes 3 --size 32 32 --slices 4 --seed 9").code == 0);
  CHECK(tree(dir.path("a")) == tree(dir.path("b")));

  r = cli(dir, "generate --out '" + dir.path("c") + "' --scenes 1 --size 30 30");
  CHECK(r.code == 1);
  CHECK(r.err.find("error[E_CONFIG]") == 0);

  write_text(dir.path("file"), "x");
  r = cli(dir, "generate --out '" + dir.path("file") + "/sub' --scenes 1 --size 32 32 --slices 2");
  CHECK(r.code == 2);
  CHECK(r.err.find("error[E_IO]") == 0);

  r = cli(dir, "generate --scenes 1");
  CHECK(r.code == 1);
  CHECK(r.err.find("error[E_USAGE]") == 0);
}

TEST_CASE("train: errors are reported with codes") {
  TempDir dir;
  Fixture& f = fixture();
  write_text(dir.path("bad.json"), R"({"network": {"foo": 1}})");
  Run r = cli(dir, "train --data '" + f.data + "' --config '" + dir.path("bad.json") + "' --out '" + dir.path("o") + "'");
  CHECK(r.code == 1);
  CHECK(r.err.find("network.foo") != std::string::npos);

  r = cli(dir, "train --data '" + dir.path("nothing") + "' --config '" + f.config + "' --out '" + dir.path("o") + "'");
  CHECK(r.code == 2);
  CHECK(r.err.find("error[E_IO]") == 0);

  r = cli(dir, "train --data '" + f.data + "' --out '" + dir.path("o") + "'");
  CHECK(r.code == 1);  // default 64x64 network against 32x32 scenes
}

TEST_CASE("train: log contents and resume reproduces the uninterrupted run") {
  TempDir dir;
  Fixture& f = fixture();
  const auto log = nlohmann::json::parse(slurp(f.ckpt + "/train_log.json"));
  const auto manifest = lfd::read_manifest(f.data);
  CHECK(log["steps"].size() == 3 * manifest.train.size());
  CHECK(log["epochs"].size() == 3);
  CHECK(log["epochs"][0].contains("metrics"));

  const std::string out = dir.path("split");
  REQUIRE(cli(dir, "train --data '" + f.data + "' --config '" + f.config + "' --out '" + out + "' --stop-after 1").code ==
          0);
  CHECK(nlohmann::json::parse(slurp(out + "/checkpoint.json"))["epoch"] == 1);
  REQUIRE(cli(dir, "train --data '" + f.data + "' --out '" + out + "' --resume").code == 0);
  CHECK(tree(out) == tree(f.ckpt));
}

TEST_CASE("eval: repeatable JSON, harness path, row count") {
  TempDir dir;
  Fixture& f = fixture();
  const std::string args = "eval --data '" + f.data + "' --ckpt '" + f.ckpt + "' --split test --out ";
  REQUIRE(cli(dir, args + "'" + dir.path("a.json") + "'").code == 0);
  Run r = cli(dir, args + "'" + dir.path("b.json") + "'");
  REQUIRE(r.code == 0);
  CHECK(slurp(dir.path("a.json")) == slurp(dir.path("b.json")));
  const auto j = nlohmann::json::parse(slurp(dir.path("a.json")));
  const auto manifest = lfd::read_manifest(f.data);
  CHECK(j["scenes"].size() == manifest.test.size());
  CHECK(r.out.find("| Method | rms | abs rel | sq rel | δ1 | δ2 | δ3 |") == 0);

  REQUIRE(cli(dir, "eval --data '" + f.data + "' --split train --gt-as-prediction --out '" + dir.path("gt.json") + "'")
              .code == 0);
  const auto g = nlohmann::json::parse(slurp(dir.path("gt.json")));
  CHECK(g["scenes"].size() == manifest.train.size());
  for (const auto& row : g["scenes"]) {
    CHECK(row["metrics"]["rms"] == 0.0);
    CHECK(row["metrics"]["abs_rel"] == 0.0);
    CHECK(row["metrics"]["sq_rel"] == 0.0);
    CHECK(row["metrics"]["delta1"] == 1.0);
  }

  fs::copy(f.ckpt, dir.path("old"));
  auto side = nlohmann::json::parse(slurp(dir.path("old") + "/checkpoint.json"));
  side["format_version"] = 99;
  write_text(dir.path("old") + "/checkpoint.json", side.dump());
  r = cli(dir, "eval --data '" + f.data + "' --ckpt '" + dir.path("old") + "'");
  CHECK(r.code == 2);
  CHECK(r.err.find("error[E_FORMAT]") == 0);
}

TEST_CASE("infer: dims, readability, stability, slice mismatch") {
  TempDir dir;
  Fixture& f = fixture();
  const std::string scene = f.data + "/scene_0000";
  const std::string args = "infer --scene '" + scene + "' --ckpt '" + f.ckpt + "/checkpoint.json' --out ";
  REQUIRE(cli(dir, args + "'" + dir.path("a.pgm") + "'").code == 0);
  REQUIRE(cli(dir, args + "'" + dir.path("b.pgm") + "'").code == 0);
  CHECK(slurp(dir.path("a.pgm")) == slurp(dir.path("b.pgm")));
  const lfd::Tensor d = lfd::read_depth_pgm(dir.path("a.pgm"));
  CHECK(d.shape() == lfd::Shape{1, 32, 32});

  REQUIRE(cli(dir, "generate --out '" + dir.path("six") + "' --scenes 1 --size 32 32 --slices 6 --seed 1").code == 0);
  Run r = cli(dir, "infer --scene '" + dir.path("six") + "/scene_0000' --ckpt '" + f.ckpt + "' --out '" +
                       dir.path("c.pgm") + "'");
  CHECK(r.code == 1);
  CHECK(r.err.find("error[E_USAGE]") == 0);
  CHECK(r.err.find("slices") != std::string::npos);
}

TEST_CASE("ablate: row count, format, unknown names") {
  TempDir dir;
  Fixture& f = fixture();
  write_text(dir.path("one.json"), R"({
    "seed": 3,
    "network": {"height": 32, "width": 32, "slices": 4, "stage_channels": [2, 2, 4, 4, 4], "decoder_channels": 4},
    "train": {"epochs": 1}
  })");
  const std::string base = "ablate --data '" + f.data + "' --config '" + dir.path("one.json") + "' --out '";
  Run r = cli(dir, base + dir.path("one") + "' --ladder baseline");
  REQUIRE(r.code == 0);
  const std::string md = slurp(dir.path("one") + "/ablation.md");
  CHECK(md.find("| Method | rms | abs rel | sq rel | δ1 | δ2 | δ3 |") == 0);
  CHECK(md.find("| Baseline |") != std::string::npos);
  CHECK(nlohmann::json::parse(slurp(dir.path("one") + "/ablation.json"))["rows"].size() == 1);

  r = cli(dir, base + dir.path("all") + "' --ladder all");
  REQUIRE(r.code == 0);
  const auto rows = nlohmann::json::parse(slurp(dir.path("all") + "/ablation.json"))["rows"];
  CHECK(rows.size() == 8);
  const std::vector<std::string> labels = {"rgb",          "focal stack",    "Baseline",       "+CRU",
                                           "+CMFA",        "+CRU(md)+CMFA", "+CRU(mg)+CMFA", "+CRU+CMFA"};
  for (std::size_t i = 0; i < 8; ++i) CHECK(rows[i]["label"] == labels[i]);

  r = cli(dir, base + dir.path("bad") + "' --ladder baseline,resnet");
  CHECK(r.code == 1);
  CHECK(r.err.find("resnet") != std::string::npos);
}

TEST_CASE("gradcheck: pass, fault detection, report paths") {
  TempDir dir;
  Run r = cli(dir, "gradcheck --module cru --seed 1 --json '" + dir.path("cru.json") + "'");
  CHECK(r.code == 0);
  const auto j = nlohmann::json::parse(slurp(dir.path("cru.json")));
  CHECK(j["passed"] == true);
  for (const auto& e : j["entries"]) CHECK(r.out.find(e["path"].get<std::string>()) != std::string::npos);

  r = cli(dir, "gradcheck --module cru --seed 1 --inject-fault matmul");
  CHECK(r.code == 3);
  CHECK(r.err.find("error[E_NUMCHECK]") == 0);
  r = cli(dir, "gradcheck --module ops --seed 1 --inject-fault sigmoid");
  CHECK(r.code == 3);
  r = cli(dir, "gradcheck --module decoder");
  CHECK(r.code == 1);
}
