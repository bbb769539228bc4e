// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "mmfuse/synthdata.hpp"

namespace synth = mmfuse::synthdata;
namespace vocab = mmfuse::vocab;
using mmfuse::Rng;
using synth::Cascade;
using synth::CorpusSpec;
using synth::SynthExample;

static CorpusSpec small_spec() {
  CorpusSpec s;
  s.n_train = 60;
  s.n_valid = 12;
  s.n_test = 30;
  s.n_disamb = 20;
  s.seed = 99;
  return s;
}

// find a seed whose first uniform draw lands in [lo, hi); lets tests force a
// specific branch of the stochastic builder
static uint64_t seed_with_first_draw(double lo, double hi) {
  for (uint64_t s = 0; s < 100000; ++s) {
    Rng r(s);
    double u = r.uniform();
    if (u >= lo && u < hi) return s;
  }
  FAIL("no seed found");
  return 0;
}

TEST_CASE("corpus generation is deterministic and validates") {
  CorpusSpec s = small_spec();
  synth::Corpus a = synth::Corpus::generate(s);
  synth::Corpus b = synth::Corpus::generate(s);
  REQUIRE(a.train.size() == b.train.size());
  for (size_t i = 0; i < a.train.size(); ++i) {
    CHECK(a.train[i].to_json() == b.train[i].to_json());
  }
  CHECK(a.disamb.size() == 20);
  for (const auto& ex : a.disamb) CHECK(ex.has_homograph());

  CorpusSpec bad = s;
  bad.vocab_size = 50;  // pool too small for 40+6 images
  CHECK_THROWS_AS(synth::Corpus::generate(bad), mmfuse::ConfigError);

  CorpusSpec none = s;
  none.homograph_rate = 0.0;
  synth::Corpus c = synth::Corpus::generate(none);
  CHECK(c.disamb.empty());
}

TEST_CASE("corpus file round trip") {
  namespace fs = std::filesystem;
  CorpusSpec s = small_spec();
  synth::Corpus a = synth::Corpus::generate(s);
  fs::path dir = fs::temp_directory_path() / "mmfuse_corpus_test";
  fs::remove_all(dir);
  a.save(dir.string());
  synth::Corpus b = synth::Corpus::load(dir.string());
  CHECK(b.spec == a.spec);
  REQUIRE(b.train.size() == a.train.size());
  for (size_t i = 0; i < a.train.size(); ++i) {
    CHECK(a.train[i].to_json() == b.train[i].to_json());
  }
  // byte-identical on re-save
  a.save((dir / "again1").string());
  b.save((dir / "again2").string());
  CHECK(mmfuse::read_file((dir / "again1" / "train.jsonl").string()) ==
        mmfuse::read_file((dir / "again2" / "train.jsonl").string()));
  fs::remove_all(dir);
}

TEST_CASE("cipher: injective images, reorder rules, reference oracle") {
  CorpusSpec s = small_spec();
  synth::Corpus corpus = synth::Corpus::generate(s);
  for (int lang = 1; lang <= s.n_languages; ++lang) {
    const synth::Cipher& c = corpus.cipher(lang);
    std::set<int> images;
    for (int i = 0; i < s.n_src_tokens; ++i) {
      int tok = vocab::kContentBase + i;
      if (c.is_homograph(tok)) {
        images.insert(c.image_of(tok, 'A'));
        images.insert(c.image_of(tok, 'B'));
        CHECK(c.image_of(tok, 'A') != c.image_of(tok, 'B'));
      } else {
        images.insert(c.image_of(tok, 0));
      }
    }
    // injective over the combined src+key domain
    CHECK(images.size() ==
          static_cast<size_t>(s.n_src_tokens + s.n_homographs));
  }

  // empty source
  CHECK(corpus.reference_translate({}, 1, 'A').empty());

  // independent re-implementation: per-token map then hand-rolled reorder
  Rng rng(5);
  for (int rep = 0; rep < 50; ++rep) {
    int lang = 1 + static_cast<int>(rng.uniform_int(s.n_languages));
    int len = 1 + static_cast<int>(rng.uniform_int(7));
    std::vector<int> src(len);
    for (auto& t : src) {
      t = vocab::kContentBase + s.n_homographs +
          static_cast<int>(rng.uniform_int(s.n_src_tokens - s.n_homographs));
    }
    std::vector<int> mapped(len);
    const synth::Cipher& c = corpus.cipher(lang);
    for (int i = 0; i < len; ++i) mapped[i] = c.image_of(src[i], 0);
    std::vector<int> expect(len);
    switch ((lang - 1) % 4) {
      case 0:
        for (int i = 0; i < len; ++i) {
          int j = (i % 2 == 0) ? (i + 1 < len ? i + 1 : i) : i - 1;
          expect[i] = mapped[j];
        }
        break;
      case 1:
        for (int i = 0; i < len; ++i) expect[i] = mapped[(i + 1) % len];
        break;
      case 2:
        for (int i = 0; i < len; ++i) expect[i] = mapped[(i - 1 + len) % len];
        break;
      default:
        expect = mapped;
    }
    CHECK(corpus.reference_translate(src, lang, 0) == expect);
  }

  // homograph readings differ
  int homo = vocab::kContentBase;
  auto ra = corpus.reference_translate({homo}, 1, 'A');
  auto rb = corpus.reference_translate({homo}, 1, 'B');
  CHECK(ra != rb);

  CHECK_THROWS_AS(corpus.reference_translate({vocab::kEos}, 1, 'A'),
                  mmfuse::DataError);
}

TEST_CASE("disambiguation suite is undecidable from text alone") {
  CorpusSpec s = small_spec();
  s.n_disamb = 400;
  synth::Corpus corpus = synth::Corpus::generate(s);
  // both readings always differ (checked exhaustively at generation too)
  long key_a = 0;
  for (const auto& ex : corpus.disamb) {
    CHECK(corpus.reference_translate(ex.src, ex.lang, 'A') !=
          corpus.reference_translate(ex.src, ex.lang, 'B'));
    if (ex.context_key == 'A') ++key_a;
  }
  // keys are sampled uniformly: a text-only predictor is at chance
  double p = static_cast<double>(key_a) / corpus.disamb.size();
  double sigma = std::sqrt(0.25 / corpus.disamb.size());
  CHECK(std::fabs(p - 0.5) < 3 * sigma);
}

TEST_CASE("speech stream: upsampling, noise rate, audio context keys") {
  CorpusSpec s = small_spec();
  std::vector<int> src(10, vocab::kContentBase + 8);
  Rng rng(7);
  long corrupted = 0, total = 0;
  for (int rep = 0; rep < 2000; ++rep) {
    auto stream = synth::speech_stream(src, s, rng);
    REQUIRE(stream.size() == 20);
    for (size_t i = 0; i < stream.size(); i += 2) {
      ++total;
      // at most one copy per source token is substituted
      bool a = stream[i] != src[i / 2];
      bool b = stream[i + 1] != src[i / 2];
      CHECK_FALSE((a && b));
      if (a || b) ++corrupted;
    }
  }
  double rate = static_cast<double>(corrupted) / total;
  double sigma = std::sqrt(0.1 * 0.9 / total);
  CHECK(std::fabs(rate - 0.1) < 4 * sigma);
  // substitutions never collide with source-content ids
  Rng vr(8);
  for (int rep = 0; rep < 200; ++rep) {
    auto stream = synth::speech_stream(src, s, vr);
    for (size_t i = 0; i < stream.size(); ++i) {
      if (stream[i] != src[i / 2]) {
        CHECK(stream[i] >= vocab::kContentBase + s.n_src_tokens);
      }
    }
  }

  // ST homograph examples carry the key in the audio stream
  synth::Corpus corpus = synth::Corpus::generate(s);
  bool found = false;
  for (const auto& ex : corpus.train) {
    if (ex.task == "ST" && ex.has_homograph()) {
      found = true;
      REQUIRE(ex.speech.size() >= 2);
      CHECK(ex.speech[ex.speech.size() - 2] == vocab::kAudioCtx);
      CHECK(ex.speech.back() ==
            (ex.context_key == 'A' ? vocab::kKeyA : vocab::kKeyB));
      CHECK(ex.image.empty());
    }
    if (ex.task != "ST" && ex.has_homograph()) {
      // image-bearing examples keep the key out of the audio
      CHECK(std::find(ex.speech.begin(), ex.speech.end(), vocab::kAudioCtx) ==
            ex.speech.end());
      bool in_grid = false;
      for (const auto& row : ex.image) {
        for (int t : row) {
          if (t == vocab::kKeyA || t == vocab::kKeyB) in_grid = true;
        }
      }
      CHECK(in_grid);
    }
  }
  CHECK(found);
}

TEST_CASE("prompt builder: forced branch structures") {
  CorpusSpec s = small_spec();
  synth::Corpus corpus = synth::Corpus::generate(s);
  const SynthExample* st = nullptr;
  const SynthExample* sit = nullptr;
  const SynthExample* tit = nullptr;
  for (const auto& ex : corpus.train) {
    if (!st && ex.task == "ST") st = &ex;
    if (!sit && ex.task == "SIT") sit = &ex;
    if (!tit && ex.task == "TIT") tit = &ex;
  }
  REQUIRE(st);
  REQUIRE(sit);
  REQUIRE(tit);

  SUBCASE("speech-only cascade branch") {
    Rng rng(seed_with_first_draw(0.0, 0.1));
    synth::TrainingExample t = synth::build_prompt(*st, rng);
    CHECK(t.cascade == Cascade::kAsr);
    CHECK(t.inp == std::vector<int>{vocab::kPivotLang});
    // lbl = transcript ++ eos ++ suffix ++ tgt ++ eos
    std::vector<int> expect = st->asr_transcript;
    expect.push_back(vocab::kEos);
    expect.push_back(vocab::lang_tag(st->lang - 1));
    auto tgt = st->tgt.at(st->lang);
    expect.insert(expect.end(), tgt.begin(), tgt.end());
    expect.push_back(vocab::kEos);
    CHECK(t.lbl == expect);
    CHECK(t.payload.has_speech());
    CHECK_FALSE(t.payload.has_image());
  }
  SUBCASE("speech-only direct branch") {
    Rng rng(seed_with_first_draw(0.1, 1.0));
    synth::TrainingExample t = synth::build_prompt(*st, rng);
    CHECK(t.cascade == Cascade::kNone);
    CHECK(t.inp == std::vector<int>{vocab::lang_tag(st->lang - 1)});
    std::vector<int> expect = st->tgt.at(st->lang);
    expect.push_back(vocab::kEos);
    CHECK(t.lbl == expect);
  }
  SUBCASE("speech+image forced past the speech branch lands on ocr") {
    Rng rng(seed_with_first_draw(0.8, 1.0));
    synth::TrainingExample t = synth::build_prompt(*sit, rng);
    CHECK(t.cascade == Cascade::kOcr);
    CHECK(t.inp == std::vector<int>{vocab::kOcrMark});
    REQUIRE(t.lbl.size() >= sit->ocr_text.size());
    for (size_t i = 0; i < sit->ocr_text.size(); ++i) {
      CHECK(t.lbl[i] == sit->ocr_text[i]);  // label begins with the OCR text
    }
    CHECK(t.payload.has_image());
    CHECK(t.payload.has_speech());
  }
  SUBCASE("image-only swap branch uses the pivot suffix") {
    Rng rng(seed_with_first_draw(0.0, 0.05));
    synth::TrainingExample t = synth::build_prompt(*tit, rng);
    CHECK(t.cascade == Cascade::kNone);
    CHECK(t.inp[0] == vocab::kSrcMark);
    // suffix is the last input token before labels
    CHECK(t.inp.back() == vocab::kPivotLang);
    std::vector<int> expect = tit->src;  // swapped: target is the pivot source
    expect.push_back(vocab::kEos);
    CHECK(t.lbl == expect);
  }
  SUBCASE("no modalities") {
    SynthExample empty = *tit;
    empty.image.clear();
    empty.speech.clear();
    Rng rng(1);
    CHECK_THROWS_WITH_AS(synth::build_prompt(empty, rng), "no modalities",
                         mmfuse::DataError);
  }
}

TEST_CASE("prompt builder: branch frequencies within 3 sigma") {
  CorpusSpec s = small_spec();
  synth::Corpus corpus = synth::Corpus::generate(s);
  const SynthExample* st = nullptr;
  const SynthExample* sit = nullptr;
  const SynthExample* tit = nullptr;
  for (const auto& ex : corpus.train) {
    if (!st && ex.task == "ST") st = &ex;
    if (!sit && ex.task == "SIT") sit = &ex;
    if (!tit && ex.task == "TIT") tit = &ex;
  }
  REQUIRE((st && sit && tit));
  const int n = 10000;

  long asr = 0;
  for (int i = 0; i < n; ++i) {
    Rng rng(mmfuse::mix64(0xf1, i));
    if (synth::build_prompt(*st, rng).cascade == Cascade::kAsr) ++asr;
  }
  double p = static_cast<double>(asr) / n;
  CHECK(std::fabs(p - 0.1) < 3 * std::sqrt(0.1 * 0.9 / n));

  long ocr = 0, nested_asr = 0;
  for (int i = 0; i < n; ++i) {
    Rng rng(mmfuse::mix64(0xf2, i));
    auto t = synth::build_prompt(*sit, rng);
    if (t.cascade == Cascade::kOcr) ++ocr;
    if (t.cascade == Cascade::kAsr) ++nested_asr;
  }
  p = static_cast<double>(ocr) / n;
  CHECK(std::fabs(p - 0.2) < 3 * std::sqrt(0.2 * 0.8 / n));
  p = static_cast<double>(nested_asr) / n;
  CHECK(std::fabs(p - 0.08) < 3 * std::sqrt(0.08 * 0.92 / n));

  long swapped = 0, masked_examples = 0, masked_tokens = 0, tokens_in_masked = 0;
  for (int i = 0; i < n; ++i) {
    Rng rng(mmfuse::mix64(0xf3, i));
    auto t = synth::build_prompt(*tit, rng);
    if (t.inp.back() == vocab::kPivotLang) ++swapped;
    long m = std::count(t.payload.text.begin(), t.payload.text.end(),
                        vocab::kMaskTok);
    if (m > 0) {
      ++masked_examples;
      masked_tokens += m;
      tokens_in_masked += static_cast<long>(t.payload.text.size());
    }
  }
  p = static_cast<double>(swapped) / n;
  CHECK(std::fabs(p - 0.05) < 3 * std::sqrt(0.05 * 0.95 / n));
  // conditioned on masking applied, each word is masked at 0.2; examples with
  // zero masked words are indistinguishable from unmasked draws, so compare
  // against the zero-truncated expectation
  const size_t len = tit->src.size();
  double p_some = 1.0 - std::pow(0.8, static_cast<double>(len));
  double expect_examples = 0.2 * p_some;
  p = static_cast<double>(masked_examples) / n;
  CHECK(std::fabs(p - expect_examples) <
        3 * std::sqrt(expect_examples * (1 - expect_examples) / n));
  double frac = static_cast<double>(masked_tokens) / tokens_in_masked;
  double expect_frac = 0.2 / p_some;
  CHECK(std::fabs(frac - expect_frac) < 0.02);
}

TEST_CASE("labels never cover prompt or input positions") {
  CorpusSpec s = small_spec();
  synth::Corpus corpus = synth::Corpus::generate(s);
  Rng rng(17);
  for (int rep = 0; rep < 200; ++rep) {
    const auto& ex = corpus.train[rng.uniform_int(corpus.train.size())];
    Rng brng(rng.next_u64());
    auto t = synth::build_prompt(ex, brng);
    int fused_len = 3 + static_cast<int>(rng.uniform_int(5));
    auto targets = synth::nmt_targets(t, fused_len);
    REQUIRE(targets.labels.size() == targets.mask.size());
    REQUIRE(targets.tokens.size() == t.inp.size() + t.lbl.size());
    // mask is false on all fused positions and on input positions other than
    // the final one (which predicts the first label token)
    const int first_label_row = fused_len + static_cast<int>(t.inp.size()) - 1;
    for (int i = 0; i < static_cast<int>(targets.mask.size()); ++i) {
      bool in_label_region = i >= first_label_row &&
                             i < first_label_row + static_cast<int>(t.lbl.size());
      CHECK(targets.mask[i] == in_label_region);
    }
  }
}

TEST_CASE("training example serialization round trip") {
  CorpusSpec s = small_spec();
  synth::Corpus corpus = synth::Corpus::generate(s);
  Rng rng(23);
  for (int rep = 0; rep < 100; ++rep) {
    const auto& ex = corpus.train[rng.uniform_int(corpus.train.size())];
    Rng brng(rng.next_u64());
    auto t = synth::build_prompt(ex, brng);
    auto back = synth::TrainingExample::from_json(t.to_json());
    CHECK(back.inp == t.inp);
    CHECK(back.lbl == t.lbl);
    CHECK(back.task == t.task);
    CHECK(back.cascade == t.cascade);
    CHECK(back.payload.speech == t.payload.speech);
    CHECK(back.payload.image == t.payload.image);
    CHECK(back.payload.text == t.payload.text);
    CHECK(back.to_json() == t.to_json());
  }
}

TEST_CASE("cascade output parsing recovers the label segments") {
  CorpusSpec s = small_spec();
  synth::Corpus corpus = synth::Corpus::generate(s);
  Rng rng(29);
  int cascades = 0;
  for (int rep = 0; rep < 400 && cascades < 40; ++rep) {
    const auto& ex = corpus.train[rng.uniform_int(corpus.train.size())];
    Rng brng(rng.next_u64());
    auto t = synth::build_prompt(ex, brng);
    bool cascade = t.cascade != Cascade::kNone;
    auto parsed = synth::parse_output(t.lbl, cascade);
    CHECK(parsed.parse_ok);
    if (cascade) {
      ++cascades;
      std::vector<int> expect_inter = t.cascade == Cascade::kAsr
                                          ? ex.asr_transcript
                                          : ex.ocr_text;
      CHECK(parsed.intermediate == expect_inter);
    }
    if (!t.inp.empty() && t.inp.back() == vocab::kPivotLang &&
        t.task == "TIT") {
      // swapped build: the target is the pivot-side source
      CHECK(parsed.translation == ex.src);
    } else {
      CHECK(parsed.translation == corpus.reference(ex));
    }
  }
  CHECK(cascades >= 40);

  // missing separator falls back to the whole output
  auto broken = synth::parse_output({30, 31, 32}, true);
  CHECK_FALSE(broken.parse_ok);
  CHECK(broken.translation == std::vector<int>{30, 31, 32});
}

TEST_CASE("post-editing tuples") {
  CorpusSpec s = small_spec();
  synth::Corpus corpus = synth::Corpus::generate(s);
  const SynthExample* st = nullptr;
  for (const auto& ex : corpus.train) {
    if (ex.task == "ST") {
      st = &ex;
      break;
    }
  }
  REQUIRE(st);
  std::vector<int> gold = st->tgt.at(st->lang);

  Rng rng(31);
  auto near_zero = synth::build_ape(*st, s, 1e-12, rng);
  // corruption -> 0: hypothesis equals the gold target
  std::vector<int> hyp(near_zero.inp.begin() + 1, near_zero.inp.end() - 2);
  CHECK(hyp == gold);
  CHECK(near_zero.inp.front() == vocab::kApeMark);
  CHECK(near_zero.inp.back() == vocab::lang_tag(st->lang - 1));
  std::vector<int> lbl = gold;
  lbl.push_back(vocab::kEos);
  CHECK(near_zero.lbl == lbl);
  CHECK(near_zero.payload.has_speech());
  CHECK_FALSE(near_zero.payload.has_image());

  // rate 0.3: mean edit distance concentrates near 0.3 * len
  auto levenshtein = [](const std::vector<int>& a, const std::vector<int>& b) {
    std::vector<std::vector<int>> d(a.size() + 1,
                                    std::vector<int>(b.size() + 1, 0));
    for (size_t i = 0; i <= a.size(); ++i) d[i][0] = static_cast<int>(i);
    for (size_t j = 0; j <= b.size(); ++j) d[0][j] = static_cast<int>(j);
    for (size_t i = 1; i <= a.size(); ++i) {
      for (size_t j = 1; j <= b.size(); ++j) {
        d[i][j] = std::min({d[i - 1][j] + 1, d[i][j - 1] + 1,
                            d[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
      }
    }
    return d[a.size()][b.size()];
  };
  double dist_sum = 0;
  const int reps = 4000;
  for (int rep = 0; rep < reps; ++rep) {
    Rng r(mmfuse::mix64(0xa9e, rep));
    auto t = synth::build_ape(*st, s, 0.3, r);
    std::vector<int> h(t.inp.begin() + 1, t.inp.end() - 2);
    dist_sum += levenshtein(h, gold);
  }
  double rate = dist_sum / (reps * static_cast<double>(gold.size()));
  CHECK(rate > 0.25);
  CHECK(rate < 0.35);

  SynthExample no_speech = *st;
  no_speech.speech.clear();
  CHECK_THROWS_AS(synth::build_ape(no_speech, s, 0.3, rng), mmfuse::DataError);
}

TEST_CASE("auxiliary task builders") {
  CorpusSpec s = small_spec();
  synth::Corpus corpus = synth::Corpus::generate(s);
  const SynthExample& ex = corpus.train.front();
  auto mt = synth::build_mt(ex);
  CHECK(mt.payload.empty());
  CHECK(mt.inp.front() == vocab::kSrcMark);
  CHECK(mt.inp.back() == vocab::lang_tag(ex.lang - 1));
  std::vector<int> lbl = ex.tgt.at(ex.lang);
  lbl.push_back(vocab::kEos);
  CHECK(mt.lbl == lbl);

  const SynthExample* speech_ex = nullptr;
  for (const auto& e : corpus.train) {
    if (!e.speech.empty()) {
      speech_ex = &e;
      break;
    }
  }
  REQUIRE(speech_ex);
  auto asr = synth::build_asr(*speech_ex, false);
  CHECK(asr.inp == std::vector<int>{vocab::kPivotLang});
  std::vector<int> albl = speech_ex->asr_transcript;
  albl.push_back(vocab::kEos);
  CHECK(asr.lbl == albl);
}
