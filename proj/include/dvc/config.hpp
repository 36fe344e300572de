#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

#include "dvc/pipeline.hpp"

namespace dvc {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// One mel grid, one corpus recipe, one pipeline. Linked sizes (vocabulary
// widths, embedding handoffs, mel dimensions) are derived after parsing so a
// config file cannot put the modules in contradiction.
struct RunConfig {
  std::uint64_t seed = 1;
  CorpusConfig corpus;
  PipelineConfig pipe;

  void derive() {
    pipe.mel = corpus.mel;
    pipe.codec.in_dim = corpus.mel.n_mels + 2;
    pipe.fmt.mel_dim = corpus.mel.n_mels;
    pipe.fmt.content_vocab = pipe.tokenizer.k;
    pipe.fmt.prosody_vocab = pipe.codec.codebook_size;
    pipe.pmt.content_vocab = pipe.tokenizer.k;
    pipe.pmt.prosody_vocab = pipe.codec.codebook_size;
    pipe.duration.embed_dim = pipe.fmt.token_embed;
  }

  void validate() const {
    corpus.validate();
    pipe.validate();
  }
};

namespace detail {

// tracks which keys of one JSON object were consumed; leftovers are errors
class Section {
public:
  Section(const nlohmann::json& j, std::string scope)
      : j_(j), scope_(std::move(scope)) {
    if (!j_.is_object())
      throw ConfigError("config: \"" + scope_ + "\" must be an object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("config: bad value for \"" + scope_ + "." + key +
                        "\"");
    }
  }

  const nlohmann::json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return nullptr;
    if (!it->is_object())
      throw ConfigError("config: \"" + scope_ + "." + key +
                        "\" must be an object");
    return &*it;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (seen_.find(it.key()) == seen_.end())
        throw ConfigError("config: unknown key \"" + it.key() + "\" in \"" +
                          scope_ + "\"");
  }

private:
  const nlohmann::json& j_;
  std::string scope_;
  std::set<std::string> seen_;
};

inline void read_optimizer(const nlohmann::json& j, const std::string& scope,
                           AdamWConfig& o) {
  Section s(j, scope);
  s.read("lr_start", o.lr_start);
  s.read("lr_end", o.lr_end);
  s.read("decay_steps", o.decay_steps);
  s.read("beta1", o.beta1);
  s.read("beta2", o.beta2);
  s.read("eps", o.eps);
  s.read("weight_decay", o.weight_decay);
  s.finish();
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
  RunConfig rc;
  detail::Section top(j, "config");
  top.read("seed", rc.seed);

  if (const nlohmann::json* c = top.child("corpus")) {
    detail::Section s(*c, "corpus");
    s.read("n_speakers", rc.corpus.n_speakers);
    s.read("utts_per_speaker", rc.corpus.utts_per_speaker);
    s.read("held_out_speakers", rc.corpus.held_out_speakers);
    s.read("n_units", rc.corpus.n_units);
    s.read("min_seconds", rc.corpus.min_seconds);
    s.read("max_seconds", rc.corpus.max_seconds);
    s.finish();
  }
  if (const nlohmann::json* c = top.child("mel")) {
    detail::Section s(*c, "mel");
    s.read("sample_rate", rc.corpus.mel.sample_rate);
    s.read("n_fft", rc.corpus.mel.n_fft);
    s.read("hop", rc.corpus.mel.hop);
    s.read("n_mels", rc.corpus.mel.n_mels);
    s.read("fmin", rc.corpus.mel.fmin);
    s.read("fmax", rc.corpus.mel.fmax);
    s.read("log_floor", rc.corpus.mel.log_floor);
    s.finish();
  }
  if (const nlohmann::json* c = top.child("tokenizer")) {
    detail::Section s(*c, "tokenizer");
    s.read("k", rc.pipe.tokenizer.k);
    s.read("iters", rc.pipe.tokenizer.iters);
    s.read("max_frames", rc.pipe.tokenizer.max_frames);
    s.finish();
  }
  if (const nlohmann::json* c = top.child("codec")) {
    detail::Section s(*c, "codec");
    s.read("hidden", rc.pipe.codec.hidden);
    s.read("codebook_size", rc.pipe.codec.codebook_size);
    s.read("code_dim", rc.pipe.codec.code_dim);
    s.read("lambda_commit", rc.pipe.codec.lambda_commit);
    s.read("vanilla_vq", rc.pipe.codec.vanilla_vq);
    s.finish();
  }
  if (const nlohmann::json* c = top.child("duration")) {
    detail::Section s(*c, "duration");
    s.read("hidden", rc.pipe.duration.hidden);
    s.read("dropout", rc.pipe.duration.dropout);
    s.finish();
  }
  if (const nlohmann::json* c = top.child("fmt")) {
    detail::Section s(*c, "fmt");
    s.read("layers", rc.pipe.fmt.layers);
    s.read("heads", rc.pipe.fmt.heads);
    s.read("embed", rc.pipe.fmt.embed);
    s.read("ff", rc.pipe.fmt.ff);
    s.read("token_embed", rc.pipe.fmt.token_embed);
    s.read("cond_drop", rc.pipe.fmt.cond_drop);
    s.read("steps", rc.pipe.fmt.steps);
    s.read("guidance", rc.pipe.fmt.guidance);
    s.finish();
  }
  if (const nlohmann::json* c = top.child("pmt")) {
    detail::Section s(*c, "pmt");
    s.read("layers", rc.pipe.pmt.layers);
    s.read("heads", rc.pipe.pmt.heads);
    s.read("embed", rc.pipe.pmt.embed);
    s.read("ff", rc.pipe.pmt.ff);
    s.read("cond_drop", rc.pipe.pmt.cond_drop);
    s.read("decode_steps", rc.pipe.pmt.decode_steps);
    s.read("guidance", rc.pipe.pmt.guidance);
    s.read("top_k", rc.pipe.pmt.top_k);
    s.read("temp_start", rc.pipe.pmt.temp_start);
    s.read("temp_floor", rc.pipe.pmt.temp_floor);
    s.finish();
  }
  if (const nlohmann::json* c = top.child("stage1")) {
    detail::Section s(*c, "stage1");
    s.read("steps", rc.pipe.stage1.steps);
    s.read("batch_frames", rc.pipe.stage1.batch_frames);
    s.read("w_dur", rc.pipe.stage1.w_dur);
    s.read("w_simvq", rc.pipe.stage1.w_simvq);
    s.read("w_fmt", rc.pipe.stage1.w_fmt);
    s.read("w_f0", rc.pipe.stage1.w_f0);
    s.read("checkpoint_every", rc.pipe.stage1.checkpoint_every);
    s.read("log_every", rc.pipe.stage1.log_every);
    if (const nlohmann::json* o = s.child("optimizer"))
      detail::read_optimizer(*o, "stage1.optimizer", rc.pipe.stage1.optimizer);
    s.finish();
  }
  if (const nlohmann::json* c = top.child("stage2")) {
    detail::Section s(*c, "stage2");
    s.read("steps", rc.pipe.stage2.steps);
    s.read("batch_tokens", rc.pipe.stage2.batch_tokens);
    s.read("checkpoint_every", rc.pipe.stage2.checkpoint_every);
    s.read("log_every", rc.pipe.stage2.log_every);
    if (const nlohmann::json* o = s.child("optimizer"))
      detail::read_optimizer(*o, "stage2.optimizer", rc.pipe.stage2.optimizer);
    s.finish();
  }
  if (const nlohmann::json* c = top.child("convert")) {
    detail::Section s(*c, "convert");
    s.read("griffin_lim_iters", rc.pipe.convert.griffin_lim_iters);
    s.read("prompt_cap_frames", rc.pipe.convert.prompt_cap_frames);
    s.finish();
  }
  top.finish();

  rc.derive();
  try {
    rc.validate();
  } catch (const std::runtime_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: parse error in " + path.string() + ": " +
                      e.what());
  }
  return parse_run_config(j);
}

// every user-settable knob with its in-effect value, parseable back into the
// identical RunConfig
inline nlohmann::ordered_json resolved_config(const RunConfig& rc) {
  nlohmann::ordered_json j;
  j["seed"] = rc.seed;
  j["corpus"] = {{"n_speakers", rc.corpus.n_speakers},
                 {"utts_per_speaker", rc.corpus.utts_per_speaker},
                 {"held_out_speakers", rc.corpus.held_out_speakers},
                 {"n_units", rc.corpus.n_units},
                 {"min_seconds", rc.corpus.min_seconds},
                 {"max_seconds", rc.corpus.max_seconds}};
  j["mel"] = {{"sample_rate", rc.corpus.mel.sample_rate},
              {"n_fft", rc.corpus.mel.n_fft},
              {"hop", rc.corpus.mel.hop},
              {"n_mels", rc.corpus.mel.n_mels},
              {"fmin", rc.corpus.mel.fmin},
              {"fmax", rc.corpus.mel.fmax},
              {"log_floor", rc.corpus.mel.log_floor}};
  j["tokenizer"] = {{"k", rc.pipe.tokenizer.k},
                    {"iters", rc.pipe.tokenizer.iters},
                    {"max_frames", rc.pipe.tokenizer.max_frames}};
  j["codec"] = {{"hidden", rc.pipe.codec.hidden},
                {"codebook_size", rc.pipe.codec.codebook_size},
                {"code_dim", rc.pipe.codec.code_dim},
                {"lambda_commit", rc.pipe.codec.lambda_commit},
                {"vanilla_vq", rc.pipe.codec.vanilla_vq}};
  j["duration"] = {{"hidden", rc.pipe.duration.hidden},
                   {"dropout", rc.pipe.duration.dropout}};
  j["fmt"] = {{"layers", rc.pipe.fmt.layers},
              {"heads", rc.pipe.fmt.heads},
              {"embed", rc.pipe.fmt.embed},
              {"ff", rc.pipe.fmt.ff},
              {"token_embed", rc.pipe.fmt.token_embed},
              {"cond_drop", rc.pipe.fmt.cond_drop},
              {"steps", rc.pipe.fmt.steps},
              {"guidance", rc.pipe.fmt.guidance}};
  j["pmt"] = {{"layers", rc.pipe.pmt.layers},
              {"heads", rc.pipe.pmt.heads},
              {"embed", rc.pipe.pmt.embed},
              {"ff", rc.pipe.pmt.ff},
              {"cond_drop", rc.pipe.pmt.cond_drop},
              {"decode_steps", rc.pipe.pmt.decode_steps},
              {"guidance", rc.pipe.pmt.guidance},
              {"top_k", rc.pipe.pmt.top_k},
              {"temp_start", rc.pipe.pmt.temp_start},
              {"temp_floor", rc.pipe.pmt.temp_floor}};
  auto optimizer_json = [](const AdamWConfig& o) {
    return nlohmann::ordered_json{
        {"lr_start", o.lr_start},   {"lr_end", o.lr_end},
        {"decay_steps", o.decay_steps}, {"beta1", o.beta1},
        {"beta2", o.beta2},         {"eps", o.eps},
        {"weight_decay", o.weight_decay}};
  };
  j["stage1"] = {{"steps", rc.pipe.stage1.steps},
                 {"batch_frames", rc.pipe.stage1.batch_frames},
                 {"w_dur", rc.pipe.stage1.w_dur},
                 {"w_simvq", rc.pipe.stage1.w_simvq},
                 {"w_fmt", rc.pipe.stage1.w_fmt},
                 {"w_f0", rc.pipe.stage1.w_f0},
                 {"checkpoint_every", rc.pipe.stage1.checkpoint_every},
                 {"log_every", rc.pipe.stage1.log_every},
                 {"optimizer", optimizer_json(rc.pipe.stage1.optimizer)}};
  j["stage2"] = {{"steps", rc.pipe.stage2.steps},
                 {"batch_tokens", rc.pipe.stage2.batch_tokens},
                 {"checkpoint_every", rc.pipe.stage2.checkpoint_every},
                 {"log_every", rc.pipe.stage2.log_every},
                 {"optimizer", optimizer_json(rc.pipe.stage2.optimizer)}};
  j["convert"] = {{"griffin_lim_iters", rc.pipe.convert.griffin_lim_iters},
                  {"prompt_cap_frames", rc.pipe.convert.prompt_cap_frames}};
  return j;
}

}  // namespace dvc
