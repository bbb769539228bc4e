// SPDX-License-Identifier: Apache-2.0
#include "mmfuse/synthdata.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace mmfuse::synthdata {

using json = nlohmann::json;
namespace fs = std::filesystem;

void CorpusSpec::validate() const {
  if (vocab_size <= vocab::kContentBase) {
    throw ConfigError("vocab_size too small: need > " +
                      std::to_string(vocab::kContentBase));
  }
  if (n_languages < 1 || n_languages > vocab::kMaxLanguages) {
    throw ConfigError("n_languages must be in [1," +
                      std::to_string(vocab::kMaxLanguages) + "]");
  }
  if (n_src_tokens < 4 || n_homographs < 0 || n_homographs > n_src_tokens) {
    throw ConfigError("bad n_src_tokens/n_homographs");
  }
  // each language needs an injective image set over the pool
  if (n_src_tokens + n_homographs > pool_size()) {
    throw ConfigError("vocab too small for ciphers: need pool >= " +
                      std::to_string(n_src_tokens + n_homographs) + ", have " +
                      std::to_string(pool_size()));
  }
  if (min_len < 1 || max_len < min_len) throw ConfigError("bad sentence lengths");
  if (grid_rows < 1 || grid_cols < 2) throw ConfigError("bad grid dims");
  if (speech_upsample < 1) throw ConfigError("speech_upsample must be >= 1");
  if (speech_noise < 0 || speech_noise >= 1) throw ConfigError("bad speech_noise");
  if (homograph_rate < 0 || homograph_rate > 1) throw ConfigError("bad homograph_rate");
  if (n_train < 0 || n_valid < 0 || n_test < 0 || n_disamb < 0) {
    throw ConfigError("split sizes must be nonnegative");
  }
}

std::string CorpusSpec::to_json() const {
  json j;
  j["vocab_size"] = vocab_size;
  j["n_languages"] = n_languages;
  j["n_src_tokens"] = n_src_tokens;
  j["n_homographs"] = n_homographs;
  j["homograph_rate"] = homograph_rate;
  j["n_train"] = n_train;
  j["n_valid"] = n_valid;
  j["n_test"] = n_test;
  j["n_disamb"] = n_disamb;
  j["grid_rows"] = grid_rows;
  j["grid_cols"] = grid_cols;
  j["min_len"] = min_len;
  j["max_len"] = max_len;
  j["speech_upsample"] = speech_upsample;
  j["speech_noise"] = speech_noise;
  j["seed"] = seed;
  return j.dump();
}

CorpusSpec CorpusSpec::from_json(const std::string& s) {
  json j = json::parse(s);
  CorpusSpec c;
  c.vocab_size = j.at("vocab_size");
  c.n_languages = j.at("n_languages");
  c.n_src_tokens = j.at("n_src_tokens");
  c.n_homographs = j.at("n_homographs");
  c.homograph_rate = j.at("homograph_rate");
  c.n_train = j.at("n_train");
  c.n_valid = j.at("n_valid");
  c.n_test = j.at("n_test");
  c.n_disamb = j.at("n_disamb");
  c.grid_rows = j.at("grid_rows");
  c.grid_cols = j.at("grid_cols");
  c.min_len = j.at("min_len");
  c.max_len = j.at("max_len");
  c.speech_upsample = j.at("speech_upsample");
  c.speech_noise = j.at("speech_noise");
  c.seed = j.at("seed");
  return c;
}

// ----- cipher -----

Cipher::Cipher(const CorpusSpec& spec, int lang_index)
    : lang_(lang_index),
      n_src_(spec.n_src_tokens),
      n_homographs_(spec.n_homographs) {
  if (lang_index < 1 || lang_index > spec.n_languages) {
    throw ConfigError("cipher language index out of range");
  }
  const int pool = spec.pool_size();
  std::vector<int> perm(pool);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(mix64(spec.seed, 0xc1f3e2, static_cast<uint64_t>(lang_index)));
  rng.shuffle(perm);
  // slots [0, 2H) are homograph images, [2H, 2H + (n_src - H)) regular
  homo_.resize(n_homographs_);
  for (int h = 0; h < n_homographs_; ++h) {
    homo_[h] = {vocab::kContentBase + perm[2 * h],
                vocab::kContentBase + perm[2 * h + 1]};
  }
  regular_image_.assign(n_src_, -1);
  int slot = 2 * n_homographs_;
  for (int i = n_homographs_; i < n_src_; ++i) {
    regular_image_[i] = vocab::kContentBase + perm[slot++];
  }
}

bool Cipher::is_homograph(int src_token) const {
  int idx = src_token - vocab::kContentBase;
  return idx >= 0 && idx < n_homographs_;
}

int Cipher::image_of(int src_token, char key) const {
  int idx = src_token - vocab::kContentBase;
  if (idx < 0 || idx >= n_src_) {
    throw DataError("token " + std::to_string(src_token) +
                    " is not a source content token");
  }
  if (idx < n_homographs_) {
    if (key != 'A' && key != 'B') {
      throw DataError("homograph token " + std::to_string(src_token) +
                      " needs a context key");
    }
    return key == 'A' ? homo_[idx].first : homo_[idx].second;
  }
  return regular_image_[idx];
}

std::vector<int> Cipher::reorder(std::vector<int> toks) const {
  switch ((lang_ - 1) % 4) {
    case 0:  // swap adjacent pairs
      for (size_t i = 0; i + 1 < toks.size(); i += 2) std::swap(toks[i], toks[i + 1]);
      return toks;
    case 1:  // rotate left by one
      if (toks.size() > 1) std::rotate(toks.begin(), toks.begin() + 1, toks.end());
      return toks;
    case 2:  // rotate right by one
      if (toks.size() > 1) std::rotate(toks.begin(), toks.end() - 1, toks.end());
      return toks;
    default:  // identity
      return toks;
  }
}

std::vector<int> Cipher::translate(const std::vector<int>& src, char key) const {
  std::vector<int> mapped;
  mapped.reserve(src.size());
  for (int t : src) mapped.push_back(image_of(t, key));
  return reorder(std::move(mapped));
}

// ----- corpus generation -----

std::vector<int> speech_stream(const std::vector<int>& src, const CorpusSpec& spec,
                               Rng& rng) {
  std::vector<int> out;
  out.reserve(src.size() * spec.speech_upsample);
  // substitutions come from outside the source-content range, so the clean
  // copy of a corrupted token stays identifiable
  const int noise_lo = spec.n_src_tokens;
  const int noise_n = spec.pool_size() - spec.n_src_tokens;
  for (int t : src) {
    size_t start = out.size();
    for (int k = 0; k < spec.speech_upsample; ++k) out.push_back(t);
    if (rng.uniform() < spec.speech_noise) {
      size_t victim = start + rng.uniform_int(spec.speech_upsample);
      out[victim] =
          vocab::kContentBase + noise_lo + static_cast<int>(rng.uniform_int(noise_n));
    }
  }
  return out;
}

namespace {

SynthExample make_example(const CorpusSpec& spec, const std::vector<Cipher>& ciphers,
                          uint64_t split_salt, int index, bool force_homograph,
                          bool image_task_only) {
  Rng rng(mix64(spec.seed, split_salt, static_cast<uint64_t>(index)));
  SynthExample ex;

  const int len = spec.min_len + static_cast<int>(rng.uniform_int(
                                     spec.max_len - spec.min_len + 1));
  const int n_regular = spec.n_src_tokens - spec.n_homographs;
  ex.src.resize(len);
  for (int i = 0; i < len; ++i) {
    ex.src[i] = vocab::kContentBase + spec.n_homographs +
                static_cast<int>(rng.uniform_int(n_regular));
  }
  bool homograph = force_homograph || rng.uniform() < spec.homograph_rate;
  if (homograph && spec.n_homographs > 0) {
    int count = 1 + ((len >= 5 && rng.uniform() < 0.3) ? 1 : 0);
    for (int c = 0; c < count; ++c) {
      int pos = static_cast<int>(rng.uniform_int(len));
      int h = static_cast<int>(rng.uniform_int(spec.n_homographs));
      ex.src[pos] = vocab::kContentBase + h;
    }
    // positions may collide; recheck presence
    bool any = false;
    for (int t : ex.src) any = any || (t - vocab::kContentBase) < spec.n_homographs;
    if (!any) ex.src[0] = vocab::kContentBase;
    ex.context_key = rng.uniform() < 0.5 ? 'A' : 'B';
  }

  ex.asr_transcript = ex.src;
  ex.lang = 1 + static_cast<int>(rng.uniform_int(spec.n_languages));
  for (int l = 1; l <= spec.n_languages; ++l) {
    ex.tgt[l] = ciphers[l].translate(ex.src, ex.context_key ? ex.context_key : 'A');
  }

  const char* kinds[3] = {"ST", "SIT", "TIT"};
  if (image_task_only) {
    ex.task = rng.uniform() < 0.5 ? "SIT" : "TIT";
  } else {
    ex.task = kinds[rng.uniform_int(3)];
  }
  // an ST example cannot carry its key in an image
  bool wants_image = ex.task != "ST";

  if (ex.task != "TIT") {
    ex.speech = speech_stream(ex.src, spec, rng);
    if (ex.has_homograph() && !wants_image) {
      ex.speech.push_back(vocab::kAudioCtx);
      ex.speech.push_back(ex.context_key == 'A' ? vocab::kKeyA : vocab::kKeyB);
    }
  }
  if (wants_image) {
    ex.image.assign(spec.grid_rows, std::vector<int>(spec.grid_cols, vocab::kBlank));
    std::vector<int> keywords;
    if (ex.has_homograph()) {
      keywords.push_back(ex.context_key == 'A' ? vocab::kKeyA : vocab::kKeyB);
    }
    int extra = 1 + static_cast<int>(rng.uniform_int(3));  // 1..3 content keywords
    for (int k = 0; k < extra; ++k) {
      keywords.push_back(ex.src[rng.uniform_int(ex.src.size())]);
    }
    const int cells = spec.grid_rows * spec.grid_cols;
    std::vector<int> cell(cells);
    std::iota(cell.begin(), cell.end(), 0);
    rng.shuffle(cell);
    std::vector<int> chosen(cell.begin(), cell.begin() + keywords.size());
    std::sort(chosen.begin(), chosen.end());  // reading order
    for (size_t k = 0; k < keywords.size(); ++k) {
      ex.image[chosen[k] / spec.grid_cols][chosen[k] % spec.grid_cols] = keywords[k];
      ex.ocr_text.push_back(keywords[k]);
    }
  }
  if (ex.task == "TIT") ex.text = ex.src;
  return ex;
}

}  // namespace

Corpus Corpus::generate(const CorpusSpec& spec) {
  spec.validate();
  Corpus c;
  c.spec = spec;
  c.ciphers_.reserve(spec.n_languages + 1);
  c.ciphers_.emplace_back(spec, 1);  // placeholder slot 0; pivot uses identity
  for (int l = 1; l <= spec.n_languages; ++l) c.ciphers_.emplace_back(spec, l);

  auto fill = [&](std::vector<SynthExample>& dst, int n, uint64_t salt,
                  bool force_homo, bool image_only) {
    dst.reserve(n);
    for (int i = 0; i < n; ++i) {
      dst.push_back(make_example(spec, c.ciphers_, salt, i, force_homo, image_only));
    }
  };
  fill(c.train, spec.n_train, 0x7261, false, false);
  fill(c.valid, spec.n_valid, 0x7661, false, false);
  fill(c.test, spec.n_test, 0x7465, false, false);
  // without homographs there is nothing to disambiguate
  if (spec.homograph_rate > 0 && spec.n_homographs > 0) {
    fill(c.disamb, spec.n_disamb, 0x6469, true, true);
  }

  // the suite must be decidable only through the key: both readings differ
  for (const auto& ex : c.disamb) {
    if (c.reference_translate(ex.src, ex.lang, 'A') ==
        c.reference_translate(ex.src, ex.lang, 'B')) {
      throw DataError("disambiguation suite entry with identical readings");
    }
  }
  return c;
}

const Cipher& Corpus::cipher(int lang_index) const {
  if (lang_index < 1 || lang_index > spec.n_languages) {
    throw ConfigError("cipher index out of range");
  }
  return ciphers_[lang_index];
}

std::vector<int> Corpus::reference_translate(const std::vector<int>& src,
                                             int lang, char key) const {
  if (lang == 0) return src;  // pivot
  return cipher(lang).translate(src, key ? key : 'A');
}

std::vector<int> Corpus::reference(const SynthExample& ex) const {
  return reference_translate(ex.src, ex.lang, ex.context_key);
}

// ----- serialization -----

namespace {

json tokens_json(const std::vector<int>& v) { return json(v); }

std::vector<int> tokens_from(const json& j) {
  return j.get<std::vector<int>>();
}

}  // namespace

std::string SynthExample::to_json() const {
  json j;
  j["src"] = src;
  json t;
  for (const auto& [l, toks] : tgt) t[std::to_string(l)] = toks;
  j["tgt"] = t;
  j["asr_transcript"] = asr_transcript;
  j["ocr_text"] = ocr_text;
  j["image"] = image;
  j["speech"] = speech;
  j["text"] = text;
  j["lang"] = lang;
  j["context_key"] = context_key ? std::string(1, context_key) : "";
  j["task"] = task;
  return j.dump();
}

SynthExample SynthExample::from_json(const std::string& s) {
  json j = json::parse(s);
  SynthExample ex;
  ex.src = tokens_from(j.at("src"));
  for (auto& [k, v] : j.at("tgt").items()) ex.tgt[std::stoi(k)] = tokens_from(v);
  ex.asr_transcript = tokens_from(j.at("asr_transcript"));
  ex.ocr_text = tokens_from(j.at("ocr_text"));
  ex.image = j.at("image").get<std::vector<std::vector<int>>>();
  ex.speech = tokens_from(j.at("speech"));
  ex.text = tokens_from(j.at("text"));
  ex.lang = j.at("lang");
  std::string key = j.at("context_key");
  ex.context_key = key.empty() ? 0 : key[0];
  ex.task = j.at("task");
  return ex;
}

std::string cascade_to_string(Cascade c) {
  switch (c) {
    case Cascade::kNone: return "none";
    case Cascade::kAsr: return "asr";
    case Cascade::kOcr: return "ocr";
  }
  throw ConfigError("bad cascade value");
}

Cascade cascade_from_string(const std::string& s) {
  if (s == "none") return Cascade::kNone;
  if (s == "asr") return Cascade::kAsr;
  if (s == "ocr") return Cascade::kOcr;
  throw ConfigError("unknown cascade '" + s + "'");
}

std::string TrainingExample::to_json() const {
  json j;
  j["speech"] = payload.speech;
  j["image"] = payload.image;
  j["text"] = payload.text;
  j["inp"] = inp;
  j["lbl"] = lbl;
  j["task"] = task;
  j["cascade"] = cascade_to_string(cascade);
  return j.dump();
}

TrainingExample TrainingExample::from_json(const std::string& s) {
  json j = json::parse(s);
  TrainingExample ex;
  ex.payload.speech = tokens_from(j.at("speech"));
  ex.payload.image = j.at("image").get<std::vector<std::vector<int>>>();
  ex.payload.text = tokens_from(j.at("text"));
  ex.inp = tokens_from(j.at("inp"));
  ex.lbl = tokens_from(j.at("lbl"));
  ex.task = j.at("task");
  ex.cascade = cascade_from_string(j.at("cascade"));
  return ex;
}

namespace {

std::string header_line(const CorpusSpec& spec) {
  json j;
  j["format"] = "mmfuse-corpus";
  j["version"] = 1;
  j["spec"] = json::parse(spec.to_json());
  json reserved;
  for (int id = 0; id < vocab::kContentBase; ++id) {
    reserved[vocab::token_name(id)] = id;
  }
  j["reserved"] = reserved;
  json names;
  for (int id = vocab::kContentBase; id < spec.vocab_size; ++id) {
    names[vocab::token_name(id)] = id;
  }
  j["content"] = names;
  return j.dump();
}

void save_split(const fs::path& path, const CorpusSpec& spec,
                const std::vector<SynthExample>& split) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << header_line(spec) << '\n';
  for (const auto& ex : split) f << ex.to_json() << '\n';
}

std::vector<SynthExample> load_split(const fs::path& path, CorpusSpec* spec_out) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(f, line)) throw IoError("empty corpus file " + path.string());
  json header = json::parse(line);
  if (header.value("format", "") != "mmfuse-corpus") {
    throw IoError("not a corpus file: " + path.string());
  }
  if (header.value("version", 0) != 1) {
    throw IoError("corpus version mismatch in " + path.string());
  }
  CorpusSpec spec = CorpusSpec::from_json(header.at("spec").dump());
  // reserved-id layout must match the compiled constants
  for (auto& [name, id] : header.at("reserved").items()) {
    if (vocab::token_name(id.get<int>()) != name) {
      throw IoError("corpus reserved-token layout mismatch for '" + name + "'");
    }
  }
  if (spec_out) *spec_out = spec;
  std::vector<SynthExample> out;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    out.push_back(SynthExample::from_json(line));
  }
  return out;
}

}  // namespace

void Corpus::save(const std::string& dir) const {
  fs::create_directories(dir);
  save_split(fs::path(dir) / "train.jsonl", spec, train);
  save_split(fs::path(dir) / "valid.jsonl", spec, valid);
  save_split(fs::path(dir) / "test.jsonl", spec, test);
  save_split(fs::path(dir) / "disamb.jsonl", spec, disamb);
}

Corpus Corpus::load(const std::string& dir) {
  Corpus c;
  c.train = load_split(fs::path(dir) / "train.jsonl", &c.spec);
  CorpusSpec check;
  c.valid = load_split(fs::path(dir) / "valid.jsonl", &check);
  if (!(check == c.spec)) throw IoError("corpus splits disagree on spec");
  c.test = load_split(fs::path(dir) / "test.jsonl", &check);
  if (!(check == c.spec)) throw IoError("corpus splits disagree on spec");
  c.disamb = load_split(fs::path(dir) / "disamb.jsonl", &check);
  if (!(check == c.spec)) throw IoError("corpus splits disagree on spec");
  c.spec.validate();
  c.ciphers_.reserve(c.spec.n_languages + 1);
  c.ciphers_.emplace_back(c.spec, 1);
  for (int l = 1; l <= c.spec.n_languages; ++l) c.ciphers_.emplace_back(c.spec, l);
  return c;
}

const std::vector<SynthExample>& Corpus::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "valid") return valid;
  if (name == "test") return test;
  if (name == "disamb") return disamb;
  throw ConfigError("unknown split '" + name + "'");
}

// ----- prompt building -----

namespace {

void append(std::vector<int>& v, const std::vector<int>& tail) {
  v.insert(v.end(), tail.begin(), tail.end());
}

std::vector<int> mask_words(const std::vector<int>& src, double prob_words,
                            double mask_chance, Rng& rng) {
  if (rng.uniform() >= mask_chance) return src;
  std::vector<int> out = src;
  for (auto& t : out) {
    if (rng.uniform() < prob_words) t = vocab::kMaskTok;
  }
  return out;
}

}  // namespace

TrainingExample build_prompt(const SynthExample& ex, Rng& rng) {
  const bool aud = !ex.speech.empty();
  const bool img = !ex.image.empty();
  if (!aud && !img) throw DataError("no modalities");

  std::vector<int> src = ex.src;
  std::vector<int> tgt = ex.tgt.at(ex.lang);
  int suffix = vocab::lang_tag(ex.lang - 1);

  TrainingExample out;
  out.task = ex.task;

  if (aud && !img) {  // speech only
    out.payload.speech = ex.speech;
    if (rng.uniform() < 0.1) {  // ASR self-cascade
      out.cascade = Cascade::kAsr;
      out.inp = {vocab::kPivotLang};
      out.lbl = ex.asr_transcript;
      out.lbl.push_back(vocab::kEos);
      out.lbl.push_back(suffix);
      append(out.lbl, tgt);
      out.lbl.push_back(vocab::kEos);
    } else {
      out.inp = {suffix};
      out.lbl = tgt;
      out.lbl.push_back(vocab::kEos);
    }
  } else if (img && !aud) {  // image only
    out.payload.image = ex.image;
    if (rng.uniform() < 0.05) {
      std::swap(src, tgt);  // translate back into the pivot
      suffix = vocab::kPivotLang;
    }
    std::vector<int> src_m = mask_words(src, 0.2, 0.2, rng);
    out.payload.text = src_m;
    out.inp = {vocab::kSrcMark};
    append(out.inp, src_m);
    out.inp.push_back(vocab::kEos);
    out.inp.push_back(suffix);
    out.lbl = tgt;
    out.lbl.push_back(vocab::kEos);
  } else {  // speech + image
    out.payload.speech = ex.speech;
    out.payload.image = ex.image;
    if (rng.uniform() < 0.8) {
      if (rng.uniform() < 0.1) {  // nested ASR self-cascade
        out.cascade = Cascade::kAsr;
        out.inp = {vocab::kPivotLang};
        out.lbl = ex.asr_transcript;
        out.lbl.push_back(vocab::kEos);
        out.lbl.push_back(suffix);
        append(out.lbl, tgt);
        out.lbl.push_back(vocab::kEos);
      } else {
        out.inp = {suffix};
        out.lbl = tgt;
        out.lbl.push_back(vocab::kEos);
      }
    } else {  // OCR self-cascade
      out.cascade = Cascade::kOcr;
      out.inp = {vocab::kOcrMark};
      out.lbl = ex.ocr_text;
      out.lbl.push_back(vocab::kEos);
      out.lbl.push_back(suffix);
      append(out.lbl, tgt);
      out.lbl.push_back(vocab::kEos);
    }
  }
  return out;
}

TrainingExample build_ape(const SynthExample& ex, const CorpusSpec& spec,
                          double corruption_rate, Rng& rng) {
  if (ex.speech.empty()) {
    throw DataError("post-editing tuples need a speech payload");
  }
  if (corruption_rate < 0 || corruption_rate >= 1) {
    throw ConfigError("corruption_rate must be in [0,1)");
  }
  std::vector<int> tgt = ex.tgt.at(ex.lang);
  std::vector<int> hyp;
  const int pool = spec.pool_size();
  for (int t : tgt) {
    if (rng.uniform() < corruption_rate) {
      if (rng.uniform() < 0.5) {
        hyp.push_back(vocab::kContentBase + static_cast<int>(rng.uniform_int(pool)));
      }
      // else deletion
    } else {
      hyp.push_back(t);
    }
  }
  TrainingExample out;
  out.task = "APE";
  out.payload.speech = ex.speech;
  out.inp = {vocab::kApeMark};
  append(out.inp, hyp);
  out.inp.push_back(vocab::kEos);
  out.inp.push_back(vocab::lang_tag(ex.lang - 1));
  out.lbl = tgt;
  out.lbl.push_back(vocab::kEos);
  return out;
}

TrainingExample build_mt(const SynthExample& ex) {
  TrainingExample out;
  out.task = "MT";
  out.inp = {vocab::kSrcMark};
  append(out.inp, ex.src);
  out.inp.push_back(vocab::kEos);
  out.inp.push_back(vocab::lang_tag(ex.lang - 1));
  out.lbl = ex.tgt.at(ex.lang);
  out.lbl.push_back(vocab::kEos);
  return out;
}

TrainingExample build_text_analogue(const SynthExample& ex, Rng& rng) {
  TrainingExample t = build_prompt(ex, rng);
  std::vector<int> inp = model::mmfm_input_tokens(t.payload);
  append(inp, t.inp);
  t.inp = std::move(inp);
  t.payload = model::ModalityPayload{};
  t.task = "TXT";
  return t;
}

TrainingExample build_asr(const SynthExample& ex, bool with_image) {
  if (ex.speech.empty()) throw DataError("transcription needs a speech payload");
  TrainingExample out;
  out.task = "ASR";
  out.payload.speech = ex.speech;
  if (with_image && !ex.image.empty()) out.payload.image = ex.image;
  out.inp = {vocab::kPivotLang};
  out.lbl = ex.asr_transcript;
  out.lbl.push_back(vocab::kEos);
  return out;
}

NmtTargets nmt_targets(const TrainingExample& ex, int fused_len) {
  if (ex.inp.empty()) throw DataError("training example with empty input");
  NmtTargets t;
  t.tokens = ex.inp;
  append(t.tokens, ex.lbl);
  const int total = fused_len + static_cast<int>(t.tokens.size());
  t.labels.assign(total, 0);
  t.mask.assign(total, false);
  const int first = fused_len + static_cast<int>(ex.inp.size()) - 1;
  for (size_t k = 0; k < ex.lbl.size(); ++k) {
    t.labels[first + k] = ex.lbl[k];
    t.mask[first + k] = true;
  }
  return t;
}

ParsedOutput parse_output(const std::vector<int>& out, bool cascade_expected) {
  ParsedOutput p;
  std::vector<int> toks = out;
  if (!toks.empty() && toks.back() == vocab::kEos) toks.pop_back();
  if (!cascade_expected) {
    p.translation = toks;
    return p;
  }
  auto eos_it = std::find(toks.begin(), toks.end(), vocab::kEos);
  if (eos_it == toks.end() || eos_it + 1 == toks.end() ||
      !(vocab::is_lang_tag(*(eos_it + 1)) || *(eos_it + 1) == vocab::kPivotLang)) {
    p.parse_ok = false;
    p.translation = toks;  // fall back to the whole output
    return p;
  }
  p.intermediate.assign(toks.begin(), eos_it);
  auto tgt_begin = eos_it + 2;
  auto tgt_end = std::find(tgt_begin, toks.end(), vocab::kEos);
  p.translation.assign(tgt_begin, tgt_end);
  return p;
}

}  // namespace mmfuse::synthdata
