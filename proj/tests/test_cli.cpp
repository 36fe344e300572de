#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "dvc/config.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(bool(is));
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// DVC_BIN is injected by the build; commands run relative to `dir` so the
// temp artifacts stay out of the source tree
int run_cli(const fs::path& dir, const std::string& args) {
  std::string cmd = "cd " + dir.string() + " && " + DVC_BIN + " " + args +
                    " > cli_stdout.txt 2> cli_stderr.txt";
  int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p);
  os << text;
}

// small enough that train/convert finish in seconds
const char* kTinyConfig = R"({
  "seed": 9,
  "corpus": {"n_speakers": 3, "utts_per_speaker": 3, "held_out_speakers": 1,
             "n_units": 4, "min_seconds": 0.8, "max_seconds": 1.0},
  "tokenizer": {"k": 8, "iters": 4, "max_frames": 2000},
  "codec": {"hidden": 16, "codebook_size": 16, "code_dim": 8},
  "duration": {"hidden": 12},
  "fmt": {"layers": 1, "heads": 2, "embed": 32, "ff": 48,
          "token_embed": 8, "steps": 3},
  "pmt": {"layers": 1, "heads": 2, "embed": 32, "ff": 48, "decode_steps": 4},
  "stage1": {"steps": 4, "batch_frames": 100, "checkpoint_every": 0,
             "log_every": 1},
  "stage2": {"steps": 4, "batch_tokens": 60, "checkpoint_every": 0,
             "log_every": 1},
  "convert": {"griffin_lim_iters": 3, "prompt_cap_frames": 40}
})";

}  // namespace

TEST_CASE("run config parsing applies defaults and rejects bad input") {
  SECTION("empty object keeps every default") {
    dvc::RunConfig rc = dvc::parse_run_config(json::object());
    dvc::RunConfig def;
    def.derive();
    CHECK(rc.seed == def.seed);
    CHECK(rc.corpus.n_speakers == def.corpus.n_speakers);
    CHECK(rc.pipe.tokenizer.k == def.pipe.tokenizer.k);
    CHECK(rc.pipe.stage1.steps == def.pipe.stage1.steps);
  }

  SECTION("nested values land in the right fields") {
    json j = {{"seed", 42},
              {"tokenizer", {{"k", 32}}},
              {"stage1", {{"steps", 123}, {"optimizer", {{"lr_start", 0.5}}}}}};
    dvc::RunConfig rc = dvc::parse_run_config(j);
    CHECK(rc.seed == 42);
    CHECK(rc.pipe.tokenizer.k == 32);
    CHECK(rc.pipe.stage1.steps == 123);
    CHECK(rc.pipe.stage1.optimizer.lr_start == Catch::Approx(0.5));
  }

  SECTION("unknown keys are rejected with their scope") {
    json j = {{"tokenizer", {{"clusters", 32}}}};
    CHECK_THROWS_WITH(dvc::parse_run_config(j),
                      Catch::Matchers::ContainsSubstring("clusters") &&
                          Catch::Matchers::ContainsSubstring("tokenizer"));
    json top = {{"bogus_key", 1}};
    CHECK_THROWS_AS(dvc::parse_run_config(top), dvc::ConfigError);
  }

  SECTION("wrong value types are reported by path") {
    json j = {{"mel", {{"n_mels", "eighty"}}}};
    CHECK_THROWS_WITH(dvc::parse_run_config(j),
                      Catch::Matchers::ContainsSubstring("mel.n_mels"));
  }

  SECTION("invalid values fail validation") {
    json j = {{"corpus", {{"held_out_speakers", 99}}}};
    CHECK_THROWS_AS(dvc::parse_run_config(j), dvc::ConfigError);
  }

  SECTION("derived fields follow their sources") {
    json j = {{"mel", {{"n_mels", 40}}}, {"tokenizer", {{"k", 24}}}};
    dvc::RunConfig rc = dvc::parse_run_config(j);
    CHECK(rc.pipe.codec.in_dim == 42);  // mels plus f0 and voicing rows
    CHECK(rc.pipe.fmt.mel_dim == 40);
    CHECK(rc.pipe.fmt.content_vocab == 24);
    CHECK(rc.pipe.pmt.content_vocab == 24);
    CHECK(rc.pipe.pmt.prosody_vocab == rc.pipe.codec.codebook_size);
  }

  SECTION("resolved config round-trips through the parser") {
    json j = {{"seed", 5},
              {"fmt", {{"layers", 3}, {"embed", 96}}},
              {"stage2", {{"batch_tokens", 512}}}};
    dvc::RunConfig rc = dvc::parse_run_config(j);
    json echoed = json::parse(dvc::resolved_config(rc).dump());
    dvc::RunConfig again = dvc::parse_run_config(echoed);
    CHECK(again.seed == rc.seed);
    CHECK(again.pipe.fmt.layers == 3);
    CHECK(again.pipe.fmt.embed == 96);
    CHECK(again.pipe.stage2.batch_tokens == 512);
    CHECK(json::parse(dvc::resolved_config(again).dump()) == echoed);
  }
}

TEST_CASE("cli rejects bad invocations with usage exits") {
  fs::path dir = fresh_dir("dvc_cli_usage");
  CHECK(run_cli(dir, "") == 1);
  CHECK(slurp(dir / "cli_stderr.txt").find("Usage") != std::string::npos);
  CHECK(run_cli(dir, "frobnicate") == 1);
  CHECK(run_cli(dir, "--help") == 0);
  CHECK(slurp(dir / "cli_stdout.txt").find("gen-corpus") != std::string::npos);
  CHECK(run_cli(dir, "gen-corpus") == 1);  // missing --out
  write_text(dir / "bad.json", "{\"seed\": 1, \"bogus\": 2}");
  CHECK(run_cli(dir, "gen-corpus --config bad.json --out c") == 1);
  CHECK(slurp(dir / "cli_stderr.txt").find("bogus") != std::string::npos);
  write_text(dir / "broken.json", "{nope");
  CHECK(run_cli(dir, "gen-corpus --config broken.json --out c") == 1);
}

TEST_CASE("gen-corpus is reproducible and writes a run record") {
  fs::path dir = fresh_dir("dvc_cli_gen");
  write_text(dir / "cfg.json", kTinyConfig);
  REQUIRE(run_cli(dir, "gen-corpus --config cfg.json --seed 7 --out a") == 0);
  REQUIRE(run_cli(dir, "gen-corpus --config cfg.json --seed 7 --out b") == 0);
  CHECK(slurp(dir / "a/manifest.json") == slurp(dir / "b/manifest.json"));
  CHECK(slurp(dir / "a/wav/spk00_utt000.wav") ==
        slurp(dir / "b/wav/spk00_utt000.wav"));

  json rec = json::parse(slurp(dir / "a/run_gen_corpus.json"));
  CHECK(rec["command"] == "gen-corpus");
  CHECK(rec["config"]["seed"] == 7);  // flag wins over the config file
  CHECK(rec["threads"]["used"] == 1);
  // the echoed config reruns to the same corpus
  write_text(dir / "echo.json", rec["config"].dump());
  REQUIRE(run_cli(dir, "gen-corpus --config echo.json --out c") == 0);
  CHECK(slurp(dir / "a/manifest.json") == slurp(dir / "c/manifest.json"));

  // a different seed actually changes the data
  REQUIRE(run_cli(dir, "gen-corpus --config cfg.json --seed 8 --out d") == 0);
  CHECK(slurp(dir / "a/manifest.json") != slurp(dir / "d/manifest.json"));
}

TEST_CASE("cli pipeline runs end to end", "[slow]") {
  fs::path dir = fresh_dir("dvc_cli_e2e");
  write_text(dir / "cfg.json", kTinyConfig);
  REQUIRE(run_cli(dir, "gen-corpus --config cfg.json --out corpus") == 0);
  REQUIRE(run_cli(dir, "fit-tokenizer --config cfg.json "
                       "--corpus corpus/manifest.json --out ckpt") == 0);

  SECTION("training stages depend on their prerequisites") {
    fs::create_directories(dir / "bare");
    CHECK(run_cli(dir, "train --stage 1 --config cfg.json "
                       "--corpus corpus/manifest.json --out bare") == 1);
    CHECK(run_cli(dir, "train --stage 2 --config cfg.json "
                       "--corpus corpus/manifest.json --out ckpt") == 1);
    CHECK(slurp(dir / "cli_stderr.txt").find("stage-1") != std::string::npos);
  }

  REQUIRE(run_cli(dir, "train --stage 1 --config cfg.json "
                       "--corpus corpus/manifest.json --out ckpt") == 0);
  REQUIRE(run_cli(dir, "train --stage 2 --config cfg.json "
                       "--corpus corpus/manifest.json --out ckpt") == 0);
  REQUIRE(fs::exists(dir / "ckpt/stage1.ckpt"));
  REQUIRE(fs::exists(dir / "ckpt/stage2.ckpt"));
  CHECK(fs::exists(dir / "ckpt/train_stage1.jsonl"));
  json meta = json::parse(slurp(dir / "ckpt/meta.json"));
  CHECK(meta["stage1_steps"] == 4);
  CHECK(meta["stage2_steps"] == 4);

  SECTION("convert writes a wav with a sidecar and repeats bit-exactly") {
    std::string conv =
        "convert --config cfg.json --mode zero_shot_vc "
        "--source corpus/wav/spk00_utt000.wav "
        "--reference corpus/wav/spk01_utt001.wav --ckpt ckpt";
    REQUIRE(run_cli(dir, conv + " --out out1.wav") == 0);
    REQUIRE(run_cli(dir, conv + " --out out2.wav") == 0);
    CHECK(slurp(dir / "out1.wav") == slurp(dir / "out2.wav"));
    json side = json::parse(slurp(dir / "out1.wav.json"));
    CHECK(side["mode"] == "zero_shot_vc");
    CHECK(side["content_tokens"].is_array());
    CHECK(side["f0_corr_vs_source"].contains("r"));
    CHECK(side["run"]["command"] == "convert");

    // a fresh seed changes the sampled noise, hence the waveform
    REQUIRE(run_cli(dir, conv + " --seed 123 --out out3.wav") == 0);
    CHECK(slurp(dir / "out1.wav") != slurp(dir / "out3.wav"));
  }

  SECTION("prosody_converted requires the stage-2 checkpoint") {
    fs::create_directories(dir / "half");
    fs::copy_file(dir / "ckpt/tokenizer.ckpt", dir / "half/tokenizer.ckpt");
    fs::copy_file(dir / "ckpt/stage1.ckpt", dir / "half/stage1.ckpt");
    CHECK(run_cli(dir, "convert --config cfg.json --mode prosody_converted "
                       "--source corpus/wav/spk00_utt000.wav "
                       "--reference corpus/wav/spk01_utt001.wav "
                       "--ckpt half --out pc.wav") == 1);
    CHECK(run_cli(dir, "convert --config cfg.json --mode prosody_converted "
                       "--source corpus/wav/spk00_utt000.wav "
                       "--reference corpus/wav/spk01_utt001.wav "
                       "--ckpt ckpt --out pc.wav") == 0);
  }

  SECTION("missing input files are config errors") {
    CHECK(run_cli(dir, "convert --config cfg.json --source missing.wav "
                       "--reference corpus/wav/spk01_utt001.wav "
                       "--ckpt ckpt --out z.wav") == 1);
  }

  SECTION("ablate writes wav, csv, pgm and sidecar under one prefix") {
    REQUIRE(run_cli(dir, "ablate --config cfg.json --drop content "
                         "--source corpus/wav/spk00_utt000.wav "
                         "--reference corpus/wav/spk01_utt001.wav "
                         "--ckpt ckpt --out abl") == 0);
    CHECK(fs::exists(dir / "abl.wav"));
    CHECK(fs::exists(dir / "abl.csv"));
    CHECK(fs::exists(dir / "abl.pgm"));
    json side = json::parse(slurp(dir / "abl.json"));
    CHECK(side["drop"] == "content");
    CHECK(run_cli(dir, "ablate --config cfg.json --drop everything "
                       "--source corpus/wav/spk00_utt000.wav "
                       "--reference corpus/wav/spk01_utt001.wav "
                       "--ckpt ckpt --out abl2") == 1);
  }

  SECTION("eval scores pairs and persists the classifier") {
    write_text(dir / "pairs.json",
               R"({"pairs": [
                 {"source": "corpus/wav/spk00_utt000.wav",
                  "reference": "corpus/wav/spk01_utt001.wav"},
                 {"source": "corpus/wav/spk01_utt000.wav",
                  "reference": "corpus/wav/spk00_utt002.wav",
                  "mode": "prosody_preserved"}]})");
    REQUIRE(run_cli(dir, "eval --config cfg.json --pairs pairs.json "
                         "--corpus corpus/manifest.json --ckpt ckpt "
                         "--out report.json") == 0);
    json rep = json::parse(slurp(dir / "report.json"));
    REQUIRE(rep["pairs"].size() == 2);
    CHECK(rep["aggregate"]["f0_corr"].contains("mean"));
    CHECK(rep["pairs"][0].contains("speaker_similarity"));
    CHECK(fs::exists(dir / "report_wavs/pair_000.wav"));
    CHECK(fs::exists(dir / "report_wavs/pair_001.wav"));
    CHECK(fs::exists(dir / "ckpt/speaker_clf.ckpt"));

    // second run reuses the saved classifier and reproduces the report
    std::string first = slurp(dir / "report.json");
    REQUIRE(run_cli(dir, "eval --config cfg.json --pairs pairs.json "
                         "--corpus corpus/manifest.json --ckpt ckpt "
                         "--out report.json") == 0);
    json rep2 = json::parse(first);
    json rep3 = json::parse(slurp(dir / "report.json"));
    rep2.erase("run");
    rep3.erase("run");
    CHECK(rep2 == rep3);

    CHECK(run_cli(dir, "eval --config cfg.json --pairs pairs.json "
                       "--corpus corpus/manifest.json --ckpt ckpt") == 1);
    write_text(dir / "empty.json", R"({"pairs": []})");
    CHECK(run_cli(dir, "eval --config cfg.json --pairs empty.json "
                       "--corpus corpus/manifest.json --ckpt ckpt "
                       "--out r2.json") == 1);
  }
}
