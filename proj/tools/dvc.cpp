// Command line front end: corpus synthesis, tokenizer fitting, two training
// stages, conversion, evaluation, condition ablation and the gradient suite.
// Exit codes: 0 success, 1 usage or config problem, 2 runtime failure.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dvc/config.hpp"
#include "dvc/eval.hpp"
#include "dvc/grad_suite.hpp"
#include "dvc/pipeline.hpp"

namespace {

using nlohmann::ordered_json;

int threads_requested() {
  const char* env = std::getenv("DVC_THREADS");
  if (!env || !*env) return 1;
  int n = std::atoi(env);
  return n >= 1 ? n : 1;
}

// every numeric kernel runs on the calling thread; the env var is recorded
// so run manifests stay honest about what was actually used
constexpr int kThreadsUsed = 1;

struct CommonArgs {
  std::string config_path;
  std::uint64_t seed = 0;
  bool seed_given = false;
};

dvc::RunConfig resolve_config(const CommonArgs& args) {
  dvc::RunConfig rc;
  if (!args.config_path.empty()) rc = dvc::load_run_config(args.config_path);
  if (args.seed_given) rc.seed = args.seed;
  return rc;
}

ordered_json run_record(const std::string& command, const dvc::RunConfig& rc,
                        const ordered_json& args) {
  ordered_json j;
  j["command"] = command;
  j["args"] = args;
  j["threads"] = {{"requested", threads_requested()}, {"used", kThreadsUsed}};
  j["config"] = dvc::resolved_config(rc);
  return j;
}

void write_json(const std::filesystem::path& path, const ordered_json& j) {
  std::ofstream os(path);
  dvc::check(bool(os), "cannot write " + path.string());
  os << j.dump(2) << "\n";
}

void require_file(const std::filesystem::path& p, const std::string& what) {
  if (!std::filesystem::exists(p))
    throw dvc::ConfigError(what + " not found: " + p.string());
}

dvc::ContentCodebook load_codebook(const std::filesystem::path& ckpt,
                                   const dvc::RunConfig& rc) {
  require_file(ckpt / dvc::kTokenizerFile, "content codebook");
  return dvc::load_tokenizer(ckpt, rc.pipe.tokenizer.k, dvc::kMfccCount);
}

void load_stage1(const std::filesystem::path& ckpt, dvc::VoicePipeline& vp) {
  require_file(ckpt / dvc::kStage1File, "stage-1 checkpoint");
  dvc::load_params(ckpt / dvc::kStage1File, vp.stage1_params());
}

void load_stage2(const std::filesystem::path& ckpt, dvc::VoicePipeline& vp) {
  require_file(ckpt / dvc::kStage2File, "stage-2 checkpoint");
  dvc::load_params(ckpt / dvc::kStage2File, vp.pmt_params());
}

// --------------------------------------------------------------------------

int cmd_gen_corpus(const CommonArgs& common, const std::string& out) {
  dvc::RunConfig rc = resolve_config(common);
  std::filesystem::path dir(out);
  dvc::Corpus corpus = dvc::generate_corpus(rc.corpus, rc.seed, dir);
  dvc::save_manifest(dir / "manifest.json", corpus);
  write_json(dir / "run_gen_corpus.json",
             run_record("gen-corpus", rc, {{"out", out}}));
  std::printf("gen-corpus: %zu utterances, %d speakers -> %s\n",
              corpus.utterances.size(), rc.corpus.n_speakers, out.c_str());
  return 0;
}

int cmd_fit_tokenizer(const CommonArgs& common, const std::string& manifest,
                      const std::string& out) {
  dvc::RunConfig rc = resolve_config(common);
  require_file(manifest, "corpus manifest");
  dvc::Corpus corpus = dvc::load_manifest(manifest);
  std::filesystem::path root = std::filesystem::path(manifest).parent_path();
  dvc::ContentCodebook cb =
      dvc::fit_tokenizer(corpus, root, rc.pipe.tokenizer, rc.seed);
  std::filesystem::path dir(out);
  std::filesystem::create_directories(dir);
  dvc::save_tokenizer(dir, cb);
  write_json(dir / "run_fit_tokenizer.json",
             run_record("fit-tokenizer", rc,
                        {{"corpus", manifest}, {"out", out}}));
  std::printf("fit-tokenizer: k=%d dim=%d -> %s\n", cb.k, cb.dim, out.c_str());
  return 0;
}

int cmd_train(const CommonArgs& common, int stage, const std::string& manifest,
              const std::string& out, bool resume) {
  dvc::RunConfig rc = resolve_config(common);
  require_file(manifest, "corpus manifest");
  dvc::Corpus corpus = dvc::load_manifest(manifest);
  std::filesystem::path root = std::filesystem::path(manifest).parent_path();
  std::filesystem::path ckpt(out);
  std::filesystem::create_directories(ckpt);

  dvc::ContentCodebook cb = load_codebook(ckpt, rc);
  dvc::MelProcessor mp(rc.pipe.mel);
  std::vector<dvc::PreparedUtterance> data =
      dvc::prepare_training_set(corpus, root, cb, mp);

  dvc::VoicePipeline vp(rc.pipe, rc.seed);
  std::string log_name = "train_stage" + std::to_string(stage) + ".jsonl";
  bool continuing =
      resume && std::filesystem::exists(
                    ckpt / (stage == 1 ? dvc::kStage1File : dvc::kStage2File));
  std::ofstream log(ckpt / log_name,
                    continuing ? std::ios::app : std::ios::trunc);
  dvc::check(bool(log), "cannot write " + (ckpt / log_name).string());

  dvc::TrainResult result;
  if (stage == 1) {
    result = dvc::train_stage1(vp, data, ckpt, rc.seed, resume, &log);
  } else {
    load_stage1(ckpt, vp);
    result = dvc::train_stage2(vp, data, ckpt, rc.seed, resume, &log);
  }
  write_json(ckpt / ("run_train_stage" + std::to_string(stage) + ".json"),
             run_record("train", rc,
                        {{"stage", stage},
                         {"corpus", manifest},
                         {"out", out},
                         {"resume", resume}}));
  std::printf("train stage %d: %lld steps, last total %.6f -> %s\n", stage,
              (long long)result.steps_completed, result.last_total,
              out.c_str());
  return 0;
}

dvc::ConversionRequest build_request(const dvc::RunConfig& rc,
                                     const std::string& mode,
                                     const std::string& source,
                                     const std::string& reference,
                                     const std::string& out_wav,
                                     const std::string& drop) {
  dvc::ConversionRequest req;
  try {
    req.mode = dvc::mode_from_name(mode);
    req.drop = dvc::drop_from_name(drop);
  } catch (const std::runtime_error& e) {
    throw dvc::ConfigError(e.what());
  }
  require_file(source, "source wav");
  require_file(reference, "reference wav");
  req.source_wav = source;
  req.reference_wav = reference;
  req.output_wav = out_wav;
  req.seed = rc.seed;
  return req;
}

// source-vs-output pitch agreement appended to the conversion sidecar
ordered_json f0_corr_entry(const dvc::VoicePipeline& vp,
                           const dvc::ConversionArtifacts& art,
                           const std::string& source_wav) {
  std::vector<float> src =
      dvc::read_wav(source_wav, vp.config().mel.sample_rate);
  dvc::F0CorrResult r = dvc::f0_pearson(
      dvc::estimate_f0(src, vp.config().mel),
      dvc::estimate_f0(art.wav, vp.config().mel));
  return {{"r", r.r}, {"defined", r.defined}};
}

int cmd_convert(const CommonArgs& common, const std::string& mode,
                const std::string& source, const std::string& reference,
                const std::string& ckpt_dir, const std::string& out,
                const std::string& drop) {
  dvc::RunConfig rc = resolve_config(common);
  dvc::ConversionRequest req =
      build_request(rc, mode, source, reference, out, drop);

  std::filesystem::path ckpt(ckpt_dir);
  dvc::ContentCodebook cb = load_codebook(ckpt, rc);
  dvc::VoicePipeline vp(rc.pipe, rc.seed);
  load_stage1(ckpt, vp);
  if (req.mode == dvc::ConvertMode::prosody_converted) load_stage2(ckpt, vp);

  dvc::ConversionArtifacts art = dvc::convert(vp, cb, req);
  ordered_json sidecar = art.sidecar;
  sidecar["f0_corr_vs_source"] = f0_corr_entry(vp, art, source);
  sidecar["run"] = run_record("convert", rc,
                              {{"mode", mode},
                               {"source", source},
                               {"reference", reference},
                               {"ckpt", ckpt_dir},
                               {"out", out},
                               {"drop", drop}});
  write_json(out + ".json", sidecar);
  std::printf("convert: %d frames (%s) -> %s\n", art.generated_frames,
              mode.c_str(), out.c_str());
  return 0;
}

int cmd_ablate(const CommonArgs& common, const std::string& drop,
               const std::string& mode, const std::string& source,
               const std::string& reference, const std::string& ckpt_dir,
               const std::string& out_prefix) {
  dvc::RunConfig rc = resolve_config(common);
  dvc::ConversionRequest req =
      build_request(rc, mode, source, reference, out_prefix + ".wav", drop);

  std::filesystem::path ckpt(ckpt_dir);
  dvc::ContentCodebook cb = load_codebook(ckpt, rc);
  dvc::VoicePipeline vp(rc.pipe, rc.seed);
  load_stage1(ckpt, vp);
  if (req.mode == dvc::ConvertMode::prosody_converted) load_stage2(ckpt, vp);

  dvc::ConversionArtifacts art = dvc::ablation_dump(vp, cb, req, out_prefix);
  ordered_json sidecar = art.sidecar;
  sidecar["f0_corr_vs_source"] = f0_corr_entry(vp, art, source);
  sidecar["run"] = run_record("ablate", rc,
                              {{"drop", drop},
                               {"mode", mode},
                               {"source", source},
                               {"reference", reference},
                               {"ckpt", ckpt_dir},
                               {"out", out_prefix}});
  write_json(out_prefix + ".json", sidecar);
  std::printf("ablate (drop=%s): %d frames -> %s.{wav,csv,pgm}\n",
              drop.c_str(), art.generated_frames, out_prefix.c_str());
  return 0;
}

struct EvalPair {
  std::string source, reference, mode;
};

std::vector<EvalPair> load_pairs(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw dvc::ConfigError("pairs file not found: " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw dvc::ConfigError("pairs file: parse error: " + std::string(e.what()));
  }
  const nlohmann::json* arr = nullptr;
  if (j.is_array()) {
    arr = &j;
  } else if (j.is_object() && j.contains("pairs") && j["pairs"].is_array()) {
    arr = &j["pairs"];
  } else {
    throw dvc::ConfigError("pairs file: expected an array or {\"pairs\": []}");
  }
  std::vector<EvalPair> pairs;
  for (const nlohmann::json& e : *arr) {
    if (!e.is_object() || !e.contains("source") || !e.contains("reference"))
      throw dvc::ConfigError(
          "pairs file: each entry needs \"source\" and \"reference\"");
    EvalPair p;
    p.source = e.at("source").get<std::string>();
    p.reference = e.at("reference").get<std::string>();
    p.mode = e.value("mode", std::string("zero_shot_vc"));
    pairs.push_back(std::move(p));
  }
  if (pairs.empty()) throw dvc::ConfigError("pairs file: no pairs listed");
  return pairs;
}

int cmd_eval(const CommonArgs& common, const std::string& pairs_path,
             const std::string& manifest, const std::string& ckpt_dir,
             const std::string& out) {
  dvc::RunConfig rc = resolve_config(common);
  std::vector<EvalPair> pairs = load_pairs(pairs_path);
  require_file(manifest, "corpus manifest");
  dvc::Corpus corpus = dvc::load_manifest(manifest);
  std::filesystem::path corpus_root =
      std::filesystem::path(manifest).parent_path();

  std::filesystem::path ckpt(ckpt_dir);
  dvc::ContentCodebook cb = load_codebook(ckpt, rc);
  dvc::VoicePipeline vp(rc.pipe, rc.seed);
  load_stage1(ckpt, vp);
  bool needs_pmt = false;
  for (const EvalPair& p : pairs)
    needs_pmt = needs_pmt || p.mode == "prosody_converted";
  if (needs_pmt) load_stage2(ckpt, vp);

  dvc::SpeakerClassifierConfig clf_cfg;
  clf_cfg.mel_dim = rc.pipe.mel.n_mels;
  clf_cfg.n_speakers = int(dvc::train_speaker_labels(corpus).size());
  dvc::ParamStore clf_ps;
  dvc::SpeakerClassifier clf(clf_ps, clf_cfg,
                             dvc::RngStream::from_seed(rc.seed, "speaker_clf"));
  if (std::filesystem::exists(ckpt / dvc::kSpeakerClfFile)) {
    dvc::load_params(ckpt / dvc::kSpeakerClfFile, clf_ps);
    dvc::check(clf.trained(), "speaker classifier checkpoint is untrained");
  } else {
    dvc::SpeakerClassifierTrainResult tr =
        dvc::train_speaker_classifier(clf, clf_ps, corpus, corpus_root, rc.seed);
    if (tr.train_accuracy < 0.95)
      throw dvc::PipelineError(
          "speaker classifier failed to reach 95% train accuracy");
    dvc::save_params(ckpt / dvc::kSpeakerClfFile, clf_ps);
  }

  std::filesystem::path out_path(out);
  std::filesystem::path wav_dir =
      out_path.parent_path() / (out_path.stem().string() + "_wavs");
  std::filesystem::create_directories(wav_dir);

  dvc::EvalReport report;
  report.seed = rc.seed;
  report.checkpoint_dir = ckpt_dir;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const EvalPair& p = pairs[i];
    char name[32];
    std::snprintf(name, sizeof name, "pair_%03zu.wav", i);
    dvc::ConversionRequest req = build_request(
        rc, p.mode, p.source, p.reference, (wav_dir / name).string(), "none");
    req.seed = rc.seed + i;
    report.pairs.push_back(dvc::evaluate_pair(vp, cb, clf, req));
    std::printf("eval %zu/%zu: f0 %.3f content %.3f prefers_ref %d\n", i + 1,
                pairs.size(), report.pairs.back().f0_corr,
                report.pairs.back().content_acc,
                int(report.pairs.back().prefers_reference));
  }

  ordered_json j = report.to_json();
  j["run"] = run_record("eval", rc,
                        {{"pairs", pairs_path},
                         {"corpus", manifest},
                         {"ckpt", ckpt_dir},
                         {"out", out},
                         {"pair_seed_base", rc.seed}});
  write_json(out_path, j);
  std::printf("eval: %zu pairs -> %s\n", pairs.size(), out.c_str());
  return 0;
}

int cmd_grad_check() {
  std::vector<dvc::SuiteEntry> entries = dvc::run_gradient_suite();
  bool all_ok = true;
  for (const dvc::SuiteEntry& e : entries) {
    bool ok = e.result.rel_error <= 1e-3f;
    all_ok = all_ok && ok;
    std::printf("%-28s rel %.3e  %s\n", e.name.c_str(),
                double(e.result.rel_error), ok ? "ok" : "FAIL");
  }
  std::printf("grad-check: %zu blocks %s\n", entries.size(),
              all_ok ? "passed" : "FAILED");
  return all_ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"controllable zero-shot voice conversion toolkit"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  auto add_common = [](CLI::App* sub, CommonArgs& c) {
    sub->add_option("--config", c.config_path, "JSON run configuration");
    sub->add_option("--seed", c.seed, "override the config seed");
  };

  CommonArgs c_gen, c_fit, c_train, c_conv, c_eval, c_abl;
  std::string gen_out;
  CLI::App* gen = app.add_subcommand("gen-corpus", "synthesize the corpus");
  add_common(gen, c_gen);
  gen->add_option("--out", gen_out, "output directory")->required();

  std::string fit_manifest, fit_out;
  CLI::App* fit =
      app.add_subcommand("fit-tokenizer", "fit the content codebook");
  add_common(fit, c_fit);
  fit->add_option("--corpus", fit_manifest, "corpus manifest")->required();
  fit->add_option("--out", fit_out, "checkpoint directory")->required();

  int train_stage = 0;
  std::string train_manifest, train_out;
  bool train_resume = false;
  CLI::App* train = app.add_subcommand("train", "run a training stage");
  add_common(train, c_train);
  train->add_option("--stage", train_stage, "1 or 2")
      ->required()
      ->check(CLI::IsMember({1, 2}));
  train->add_option("--corpus", train_manifest, "corpus manifest")->required();
  train->add_option("--out", train_out, "checkpoint directory")->required();
  train->add_flag("--resume", train_resume, "continue from the checkpoint");

  std::string conv_mode = "prosody_preserved", conv_src, conv_ref, conv_ckpt,
              conv_out, conv_drop = "none";
  CLI::App* conv = app.add_subcommand("convert", "convert one utterance");
  add_common(conv, c_conv);
  conv->add_option("--mode", conv_mode,
                   "zero_shot_vc | prosody_preserved | prosody_converted");
  conv->add_option("--source", conv_src, "source wav")->required();
  conv->add_option("--reference", conv_ref, "reference wav")->required();
  conv->add_option("--ckpt", conv_ckpt, "checkpoint directory")->required();
  conv->add_option("--out", conv_out, "output wav")->required();
  conv->add_option("--drop", conv_drop, "none | content | prosody");

  std::string eval_pairs, eval_manifest, eval_ckpt, eval_out;
  CLI::App* eval = app.add_subcommand("eval", "score conversion pairs");
  add_common(eval, c_eval);
  eval->add_option("--pairs", eval_pairs, "pairs JSON file")->required();
  eval->add_option("--corpus", eval_manifest, "corpus manifest")->required();
  eval->add_option("--ckpt", eval_ckpt, "checkpoint directory")->required();
  eval->add_option("--out", eval_out, "report JSON path")->required();

  std::string abl_drop, abl_mode = "prosody_preserved", abl_src, abl_ref,
              abl_ckpt, abl_out;
  CLI::App* abl =
      app.add_subcommand("ablate", "convert with one condition nulled");
  add_common(abl, c_abl);
  abl->add_option("--drop", abl_drop, "content | prosody | none")->required();
  abl->add_option("--mode", abl_mode, "conversion mode");
  abl->add_option("--source", abl_src, "source wav")->required();
  abl->add_option("--reference", abl_ref, "reference wav")->required();
  abl->add_option("--ckpt", abl_ckpt, "checkpoint directory")->required();
  abl->add_option("--out", abl_out, "output path prefix")->required();

  CLI::App* grad =
      app.add_subcommand("grad-check", "finite-difference gradient suite");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  c_gen.seed_given = gen->count("--seed") > 0;
  c_fit.seed_given = fit->count("--seed") > 0;
  c_train.seed_given = train->count("--seed") > 0;
  c_conv.seed_given = conv->count("--seed") > 0;
  c_eval.seed_given = eval->count("--seed") > 0;
  c_abl.seed_given = abl->count("--seed") > 0;

  try {
    if (*gen) return cmd_gen_corpus(c_gen, gen_out);
    if (*fit) return cmd_fit_tokenizer(c_fit, fit_manifest, fit_out);
    if (*train)
      return cmd_train(c_train, train_stage, train_manifest, train_out,
                       train_resume);
    if (*conv)
      return cmd_convert(c_conv, conv_mode, conv_src, conv_ref, conv_ckpt,
                         conv_out, conv_drop);
    if (*eval)
      return cmd_eval(c_eval, eval_pairs, eval_manifest, eval_ckpt, eval_out);
    if (*abl)
      return cmd_ablate(c_abl, abl_drop, abl_mode, abl_src, abl_ref, abl_ckpt,
                        abl_out);
    if (*grad) return cmd_grad_check();
  } catch (const dvc::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}
