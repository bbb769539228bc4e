// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <vector>

#include "mmfuse/model.hpp"
#include "mmfuse/util.hpp"
#include "mmfuse/vocab.hpp"

namespace mmfuse::synthdata {

struct CorpusSpec {
  int vocab_size = 128;
  int n_languages = 4;
  int n_src_tokens = 40;
  int n_homographs = 6;       // first n_homographs source tokens are ambiguous
  double homograph_rate = 0.35;
  int n_train = 1200;
  int n_valid = 64;
  int n_test = 200;
  int n_disamb = 120;
  int grid_rows = 4;
  int grid_cols = 6;
  int min_len = 3;
  int max_len = 8;
  int speech_upsample = 2;
  double speech_noise = 0.1;
  uint64_t seed = 1234;

  void validate() const;
  int pool_size() const { return vocab_size - vocab::kContentBase; }
  std::string to_json() const;
  static CorpusSpec from_json(const std::string& s);
  bool operator==(const CorpusSpec&) const = default;
};

// One synthetic sentence with all its modality renderings. Target language
// index 0 is the pivot (identity); indices 1..n_languages are the cipher
// languages carrying tags <l1>..<ln>.
struct SynthExample {
  std::vector<int> src;
  std::map<int, std::vector<int>> tgt;  // language index -> reference tokens
  std::vector<int> asr_transcript;      // == src
  std::vector<int> ocr_text;            // grid keywords in reading order
  std::vector<std::vector<int>> image;  // empty when the task has no image
  std::vector<int> speech;              // empty when the task has no speech
  std::vector<int> text;                // source text modality (TIT)
  int lang = 1;                         // designated target language (1-based)
  char context_key = 0;                 // 'A' or 'B'; 0 when no homograph
  std::string task;                     // ST | SIT | TIT

  bool has_homograph() const { return context_key != 0; }
  std::string to_json() const;
  static SynthExample from_json(const std::string& s);
};

enum class Cascade { kNone, kAsr, kOcr };
std::string cascade_to_string(Cascade c);
Cascade cascade_from_string(const std::string& s);

// One training item: encoder-side payload plus the translation-LM input and
// label segments assembled by the online prompt builder.
struct TrainingExample {
  model::ModalityPayload payload;
  std::vector<int> inp;
  std::vector<int> lbl;
  std::string task;  // ST | SIT | TIT | APE | MT | ASR
  Cascade cascade = Cascade::kNone;

  std::string to_json() const;
  static TrainingExample from_json(const std::string& s);
};

// Injective token mapping plus deterministic reordering for one target
// language. Homograph source tokens own two images selected by context key.
class Cipher {
 public:
  Cipher(const CorpusSpec& spec, int lang_index);

  int image_of(int src_token, char key) const;
  bool is_homograph(int src_token) const;
  // full translation: map tokens (homographs by `key`) then reorder
  std::vector<int> translate(const std::vector<int>& src, char key) const;
  std::vector<int> reorder(std::vector<int> toks) const;
  int lang_index() const { return lang_; }

 private:
  int lang_;
  int n_src_;
  int n_homographs_;
  std::vector<int> regular_image_;           // per src index
  std::vector<std::pair<int, int>> homo_;    // per homograph index: (A, B)
};

class Corpus {
 public:
  CorpusSpec spec;
  std::vector<SynthExample> train;
  std::vector<SynthExample> valid;
  std::vector<SynthExample> test;
  std::vector<SynthExample> disamb;  // every entry contains >= 1 homograph

  static Corpus generate(const CorpusSpec& spec);

  const Cipher& cipher(int lang_index) const;
  // deterministic gold reference for the example's designated language
  std::vector<int> reference(const SynthExample& ex) const;
  std::vector<int> reference_translate(const std::vector<int>& src, int lang,
                                       char key) const;

  void save(const std::string& dir) const;
  static Corpus load(const std::string& dir);

  const std::vector<SynthExample>& split(const std::string& name) const;

 private:
  std::vector<Cipher> ciphers_;  // index 1..n_languages (0 unused: pivot identity)
};

// Alg-style online prompt builder. Branch probabilities: speech-only ASR
// self-cascade 0.1; image-only swap 0.05 with masking (20% of words on 20%
// of examples); speech+image takes the speech branch with 0.8, else OCR
// self-cascade.
TrainingExample build_prompt(const SynthExample& ex, Rng& rng);

// speech-aware post-editing tuples: hypothesis is the gold target corrupted
// at `corruption_rate` (substitutions/deletions)
TrainingExample build_ape(const SynthExample& ex, const CorpusSpec& spec,
                          double corruption_rate, Rng& rng);
// text-only translation pair (pretraining / cascade MT data)
TrainingExample build_mt(const SynthExample& ex);
// transcription task for the cascade front stage
TrainingExample build_asr(const SynthExample& ex, bool with_image);
// pretraining analogue of a fused example: the encoder-side token sequence
// is spliced into the LM input as literal text, so the base model learns the
// stream/grid reading skills at the exact positions the fused prefix will
// occupy later
TrainingExample build_text_analogue(const SynthExample& ex, Rng& rng);

// labels/mask aligned with logit rows for a fused-prefix + inp + lbl run
struct NmtTargets {
  std::vector<int> tokens;  // inp ++ lbl (teacher forced)
  std::vector<int> labels;
  std::vector<bool> mask;
};
NmtTargets nmt_targets(const TrainingExample& ex, int fused_len);

// split a cascade-mode output into (intermediate, translation) at the
// eos/language-tag boundary
struct ParsedOutput {
  std::vector<int> intermediate;
  std::vector<int> translation;
  bool parse_ok = true;
};
ParsedOutput parse_output(const std::vector<int>& out, bool cascade_expected);

// upsampled noisy speech stream; each source token is emitted `upsample`
// times and with probability `noise` one random copy is substituted
std::vector<int> speech_stream(const std::vector<int>& src, const CorpusSpec& spec,
                               Rng& rng);

}  // namespace mmfuse::synthdata
