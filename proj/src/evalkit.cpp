// SPDX-License-Identifier: Apache-2.0
#include "mmfuse/evalkit.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

namespace mmfuse::evalkit {

namespace fs = std::filesystem;
using synthdata::SynthExample;

// ----- scoring -----

EditCounts align_edit_distance(const std::vector<int>& hyp,
                               const std::vector<int>& ref) {
  const int n = static_cast<int>(hyp.size());
  const int m = static_cast<int>(ref.size());
  std::vector<std::vector<int>> d(n + 1, std::vector<int>(m + 1, 0));
  for (int i = 0; i <= n; ++i) d[i][0] = i;
  for (int j = 0; j <= m; ++j) d[0][j] = j;
  for (int i = 1; i <= n; ++i) {
    for (int j = 1; j <= m; ++j) {
      int sub = d[i - 1][j - 1] + (hyp[i - 1] == ref[j - 1] ? 0 : 1);
      int ins = d[i - 1][j] + 1;   // hyp token not in ref
      int del = d[i][j - 1] + 1;   // ref token missing from hyp
      d[i][j] = std::min({sub, ins, del});
    }
  }
  EditCounts c;
  c.aligned.assign(m, -1);
  int i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 &&
        d[i][j] == d[i - 1][j - 1] + (hyp[i - 1] == ref[j - 1] ? 0 : 1)) {
      c.aligned[j - 1] = hyp[i - 1];
      if (hyp[i - 1] != ref[j - 1]) ++c.substitutions;
      --i;
      --j;
    } else if (i > 0 && d[i][j] == d[i - 1][j] + 1) {
      ++c.insertions;
      --i;
    } else {
      ++c.deletions;
      --j;
    }
  }
  return c;
}

QualityReport score(const std::vector<ScoreItem>& items) {
  QualityReport r;
  long pos_match = 0;
  long homo_correct = 0;
  for (const auto& it : items) {
    ++r.n_examples;
    r.ref_tokens += static_cast<long>(it.ref.size());
    size_t lim = std::min(it.hyp.size(), it.ref.size());
    for (size_t i = 0; i < lim; ++i) {
      if (it.hyp[i] == it.ref[i]) ++pos_match;
    }
    if (it.hyp == it.ref) r.exact_match += 1;
    EditCounts ec = align_edit_distance(it.hyp, it.ref);
    r.substitutions += ec.substitutions;
    r.insertions += ec.insertions;
    r.deletions += ec.deletions;
    for (int p : it.homograph_positions) {
      if (p < 0 || p >= static_cast<int>(it.ref.size())) {
        throw DataError("homograph position out of reference range");
      }
      ++r.homograph_total;
      if (ec.aligned[p] == it.ref[p]) ++homo_correct;
    }
  }
  if (r.n_examples > 0) r.exact_match /= r.n_examples;
  r.token_accuracy = r.ref_tokens > 0
                         ? static_cast<double>(pos_match) / r.ref_tokens
                         : 0.0;
  r.homograph_accuracy = r.homograph_total > 0
                             ? static_cast<double>(homo_correct) / r.homograph_total
                             : 0.0;
  return r;
}

QualityReport score(const std::vector<std::vector<int>>& hyps,
                    const std::vector<std::vector<int>>& refs) {
  if (hyps.size() != refs.size()) {
    throw DataError("score: " + std::to_string(hyps.size()) + " hypotheses vs " +
                    std::to_string(refs.size()) + " references");
  }
  std::vector<ScoreItem> items(hyps.size());
  for (size_t i = 0; i < hyps.size(); ++i) {
    items[i].hyp = hyps[i];
    items[i].ref = refs[i];
  }
  return score(items);
}

// ----- offline inference -----

void InferenceMode::validate(const SynthExample& ex) const {
  if (kind == InferenceKind::kSelfCascadeOcr && (ex.image.empty() || !image_enabled)) {
    throw ConfigError("ocr self-cascade requires an image payload");
  }
  if (kind == InferenceKind::kSelfCascadeAsr && ex.speech.empty()) {
    throw ConfigError("asr self-cascade requires a speech payload");
  }
}

model::ModalityPayload payload_for(const SynthExample& ex, bool image_enabled) {
  model::ModalityPayload p;
  p.speech = ex.speech;
  if (image_enabled) p.image = ex.image;
  if (ex.task == "TIT") p.text = ex.src;
  if (p.empty()) throw DataError("example has no usable modalities");
  return p;
}

OfflineResult translate_offline(const trainer::FusedSystem& sys,
                                const SynthExample& ex, const InferenceMode& mode,
                                trainer::TapCache* cache, int max_new) {
  mode.validate(ex);
  model::ModalityPayload payload = payload_for(ex, mode.image_enabled);
  const int suffix = vocab::lang_tag(ex.lang - 1);
  std::vector<int> inp;
  bool cascade = false;
  switch (mode.kind) {
    case InferenceKind::kDirect:
      if (ex.task == "TIT") {
        inp.push_back(vocab::kSrcMark);
        inp.insert(inp.end(), ex.src.begin(), ex.src.end());
        inp.push_back(vocab::kEos);
      }
      inp.push_back(suffix);
      break;
    case InferenceKind::kSelfCascadeAsr:
      inp.push_back(vocab::kPivotLang);
      cascade = true;
      break;
    case InferenceKind::kSelfCascadeOcr:
      inp.push_back(vocab::kOcrMark);
      cascade = true;
      break;
    case InferenceKind::kApe:
      inp.push_back(vocab::kApeMark);
      inp.insert(inp.end(), mode.ape_hypothesis.begin(), mode.ape_hypothesis.end());
      inp.push_back(vocab::kEos);
      inp.push_back(suffix);
      break;
  }
  OfflineResult out;
  std::vector<int> raw = sys.translate(payload, inp, {}, max_new,
                                       &out.decode_steps, cache, cascade ? 2 : 1);
  synthdata::ParsedOutput parsed = synthdata::parse_output(raw, cascade);
  out.hypothesis = parsed.translation;
  out.intermediate = parsed.intermediate;
  out.parse_ok = parsed.parse_ok;
  return out;
}

std::vector<int> homograph_positions(const synthdata::Corpus& corpus,
                                     const SynthExample& ex) {
  if (!ex.has_homograph()) return {};
  const synthdata::Cipher& ciph = corpus.cipher(ex.lang);
  // apply the language's reordering to the index sequence to find where
  // each source position lands in the reference
  std::vector<int> idx(ex.src.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<int> landed = ciph.reorder(idx);
  std::vector<int> out;
  for (size_t j = 0; j < landed.size(); ++j) {
    if (ciph.is_homograph(ex.src[landed[j]])) out.push_back(static_cast<int>(j));
  }
  return out;
}

QualityReport eval_disambiguation(const trainer::FusedSystem& sys,
                                  const synthdata::Corpus& corpus,
                                  bool with_image, int max_examples) {
  trainer::TapCache cache;
  std::vector<ScoreItem> items;
  int n = static_cast<int>(corpus.disamb.size());
  if (max_examples > 0) n = std::min(n, max_examples);
  if (n == 0) throw DataError("disambiguation suite is empty");
  for (int i = 0; i < n; ++i) {
    const auto& ex = corpus.disamb[i];
    InferenceMode mode;
    mode.kind = InferenceKind::kDirect;
    mode.image_enabled = with_image;
    OfflineResult res = translate_offline(sys, ex, mode, &cache);
    ScoreItem it;
    it.hyp = res.hypothesis;
    it.ref = corpus.reference(ex);
    it.homograph_positions = homograph_positions(corpus, ex);
    items.push_back(std::move(it));
  }
  return score(items);
}

QualityReport eval_slice(const trainer::FusedSystem& sys,
                         const synthdata::Corpus& corpus,
                         const std::vector<SynthExample>& slice,
                         const InferenceMode& mode, int max_examples) {
  trainer::TapCache cache;
  std::vector<ScoreItem> items;
  int n = static_cast<int>(slice.size());
  if (max_examples > 0) n = std::min(n, max_examples);
  for (int i = 0; i < n; ++i) {
    const auto& ex = slice[i];
    OfflineResult res = translate_offline(sys, ex, mode, &cache);
    ScoreItem it;
    it.hyp = res.hypothesis;
    it.ref = corpus.reference(ex);
    it.homograph_positions = homograph_positions(corpus, ex);
    items.push_back(std::move(it));
  }
  return score(items);
}

QualityReport eval_cascade_offline(const trainer::FusedSystem& asr,
                                   const trainer::FusedSystem& mt,
                                   const synthdata::Corpus& corpus,
                                   const std::vector<SynthExample>& slice,
                                   bool image_enabled, int max_examples) {
  trainer::TapCache cache;
  std::vector<ScoreItem> items;
  int n = static_cast<int>(slice.size());
  if (max_examples > 0) n = std::min(n, max_examples);
  for (int i = 0; i < n; ++i) {
    const auto& ex = slice[i];
    model::ModalityPayload p;
    p.speech = ex.speech;
    if (image_enabled) p.image = ex.image;
    std::vector<int> transcript =
        asr.translate(p, {vocab::kPivotLang}, {}, 48, nullptr, &cache);
    if (!transcript.empty() && transcript.back() == vocab::kEos) {
      transcript.pop_back();
    }
    std::vector<int> inp = {vocab::kSrcMark};
    inp.insert(inp.end(), transcript.begin(), transcript.end());
    inp.push_back(vocab::kEos);
    inp.push_back(vocab::lang_tag(ex.lang - 1));
    std::vector<int> hyp = mt.translate({}, inp, {}, 48, nullptr, nullptr);
    if (!hyp.empty() && hyp.back() == vocab::kEos) hyp.pop_back();
    ScoreItem it;
    it.hyp = hyp;
    it.ref = corpus.reference(ex);
    it.homograph_positions = homograph_positions(corpus, ex);
    items.push_back(std::move(it));
  }
  return score(items);
}

// ----- experiment matrix -----

trainer::FusedSystem load_system_checkpoint(const std::string& path) {
  return trainer::restore_system(model::Container::load(path));
}

std::string results_csv(const std::vector<ExperimentRow>& rows) {
  std::ostringstream os;
  os << "system,image,infer,token_accuracy,exact_match,homograph_accuracy,"
        "substitutions,insertions,deletions,n_examples\n";
  for (const auto& r : rows) {
    os << r.system << ',' << (r.image ? 1 : 0) << ',' << r.infer << ','
       << fmt6(r.report.token_accuracy) << ',' << fmt6(r.report.exact_match) << ','
       << fmt6(r.report.homograph_accuracy) << ',' << r.report.substitutions << ','
       << r.report.insertions << ',' << r.report.deletions << ','
       << r.report.n_examples << '\n';
  }
  return os.str();
}

std::vector<ExperimentRow> run_experiment(const ExperimentConfig& cfg) {
  std::vector<std::string> missing;
  for (const auto& [label, path] :
       std::initializer_list<std::pair<const char*, const std::string&>>{
           {"corpus", cfg.corpus_dir},
           {"gated checkpoint", cfg.gated_ckpt},
           {"mid-only checkpoint", cfg.mid_ckpt},
           {"transcription checkpoint", cfg.asr_ckpt},
           {"text-translation checkpoint", cfg.mt_ckpt}}) {
    if (path.empty() || !fs::exists(path)) {
      missing.push_back(std::string(label) + " (" + (path.empty() ? "unset" : path) + ")");
    }
  }
  if (!missing.empty()) {
    std::string msg = "missing artifacts, build these first:";
    for (const auto& m : missing) msg += "\n  - " + m;
    throw IoError(msg);
  }
  synthdata::Corpus corpus = synthdata::Corpus::load(cfg.corpus_dir);
  trainer::FusedSystem gated = load_system_checkpoint(cfg.gated_ckpt);
  trainer::FusedSystem mid = load_system_checkpoint(cfg.mid_ckpt);
  trainer::FusedSystem asr = load_system_checkpoint(cfg.asr_ckpt);
  trainer::FusedSystem mt = load_system_checkpoint(cfg.mt_ckpt);

  std::vector<SynthExample> sit;
  for (const auto& ex : corpus.test) {
    if (ex.task == "SIT") sit.push_back(ex);
  }
  std::vector<ExperimentRow> rows;
  for (bool image : {false, true}) {
    ExperimentRow row;
    row.system = "cascade";
    row.image = image;
    row.infer = "direct";
    row.report =
        eval_cascade_offline(asr, mt, corpus, sit, image, cfg.max_examples);
    rows.push_back(std::move(row));
  }
  struct Sys {
    const char* name;
    const trainer::FusedSystem* sys;
  };
  for (const Sys& s : {Sys{"e2e_mid", &mid}, Sys{"e2e_gated", &gated}}) {
    for (bool image : {false, true}) {
      for (const char* infer : {"direct", "self_cascade"}) {
        InferenceMode mode;
        mode.kind = std::string(infer) == "direct" ? InferenceKind::kDirect
                                                   : InferenceKind::kSelfCascadeAsr;
        mode.image_enabled = image;
        ExperimentRow row;
        row.system = s.name;
        row.image = image;
        row.infer = infer;
        row.report = eval_slice(*s.sys, corpus, sit, mode, cfg.max_examples);
        rows.push_back(std::move(row));
      }
    }
  }

  fs::create_directories(cfg.out_dir);
  write_file((fs::path(cfg.out_dir) / "results.csv").string(), results_csv(rows));
  if (gated.bridge &&
      gated.bridge->variant() == fusion::FusionVariant::kGated) {
    write_file((fs::path(cfg.out_dir) / "gates.csv").string(),
               run_gate_report(gated, corpus, cfg.gate_examples_per_combo));
  }
  std::ostringstream sum;
  sum << "offline evaluation over " << sit.size() << " speech+image test examples\n";
  for (const auto& r : rows) {
    sum << "  " << r.system << (r.image ? " +image" : " -image") << ' ' << r.infer
        << ": token_acc=" << fmt6(r.report.token_accuracy)
        << " exact=" << fmt6(r.report.exact_match)
        << " errors(sub/ins/del)=" << r.report.substitutions << '/'
        << r.report.insertions << '/' << r.report.deletions << '\n';
  }
  write_file((fs::path(cfg.out_dir) / "summary.txt").string(), sum.str());
  return rows;
}

// ----- streaming sweep wiring -----

namespace {

class E2eAdapter : public simulst::IncrementalTranslator {
 public:
  E2eAdapter(const trainer::FusedSystem& sys, const SynthExample& ex, bool image,
             trainer::TapCache* cache, int max_new)
      : sys_(sys), ex_(ex), image_(image), cache_(cache), max_new_(max_new) {}

  Output generate(const std::vector<int>& source_prefix,
                  const std::vector<int>& committed) override {
    model::ModalityPayload p;
    p.speech = source_prefix;
    if (image_) p.image = ex_.image;
    Output out;
    std::vector<int> hyp =
        sys_.translate(p, {vocab::lang_tag(ex_.lang - 1)}, committed, max_new_,
                       &out.decode_steps, cache_);
    if (!hyp.empty() && hyp.back() == vocab::kEos) hyp.pop_back();
    out.hypothesis = std::move(hyp);
    return out;
  }

 private:
  const trainer::FusedSystem& sys_;
  const SynthExample& ex_;
  bool image_;
  trainer::TapCache* cache_;
  int max_new_;
};

class AsrAdapter : public simulst::IncrementalTranslator {
 public:
  AsrAdapter(const trainer::FusedSystem& sys, const SynthExample& ex, bool image,
             trainer::TapCache* cache, int max_new)
      : sys_(sys), ex_(ex), image_(image), cache_(cache), max_new_(max_new) {}

  Output generate(const std::vector<int>& source_prefix,
                  const std::vector<int>& committed) override {
    model::ModalityPayload p;
    p.speech = source_prefix;
    if (image_) p.image = ex_.image;
    Output out;
    std::vector<int> hyp = sys_.translate(p, {vocab::kPivotLang}, committed,
                                          max_new_, &out.decode_steps, cache_);
    if (!hyp.empty() && hyp.back() == vocab::kEos) hyp.pop_back();
    out.hypothesis = std::move(hyp);
    return out;
  }

 private:
  const trainer::FusedSystem& sys_;
  const SynthExample& ex_;
  bool image_;
  trainer::TapCache* cache_;
  int max_new_;
};

class MtAdapter : public simulst::IncrementalTranslator {
 public:
  MtAdapter(const trainer::FusedSystem& sys, const SynthExample& ex, int max_new)
      : sys_(sys), ex_(ex), max_new_(max_new) {}

  Output generate(const std::vector<int>& transcript,
                  const std::vector<int>& committed) override {
    std::vector<int> inp = {vocab::kSrcMark};
    inp.insert(inp.end(), transcript.begin(), transcript.end());
    inp.push_back(vocab::kEos);
    inp.push_back(vocab::lang_tag(ex_.lang - 1));
    Output out;
    std::vector<int> hyp =
        sys_.translate({}, inp, committed, max_new_, &out.decode_steps, nullptr);
    if (!hyp.empty() && hyp.back() == vocab::kEos) hyp.pop_back();
    out.hypothesis = std::move(hyp);
    return out;
  }

 private:
  const trainer::FusedSystem& sys_;
  const SynthExample& ex_;
  int max_new_;
};

}  // namespace

std::vector<simulst::LatencyReport> run_sweep(const SweepRunConfig& cfg) {
  synthdata::Corpus corpus = synthdata::Corpus::load(cfg.corpus_dir);
  trainer::FusedSystem e2e = load_system_checkpoint(cfg.e2e_ckpt);
  trainer::FusedSystem asr = load_system_checkpoint(cfg.asr_ckpt);
  trainer::FusedSystem mt = load_system_checkpoint(cfg.mt_ckpt);

  std::vector<const SynthExample*> pool;
  for (const auto& ex : corpus.test) {
    if (!ex.speech.empty() && !ex.image.empty()) pool.push_back(&ex);
  }
  if (cfg.max_examples > 0 && static_cast<int>(pool.size()) > cfg.max_examples) {
    pool.resize(cfg.max_examples);
  }
  if (pool.empty()) throw DataError("no speech+image test examples for the sweep");

  std::vector<simulst::SweepExample> examples;
  for (size_t i = 0; i < pool.size(); ++i) {
    examples.push_back({static_cast<int>(i), pool[i]->speech});
  }

  trainer::TapCache cache(8192);
  simulst::SweepHooks hooks;
  hooks.e2e = [&](int idx, bool image) {
    return std::make_unique<E2eAdapter>(e2e, *pool[idx], image, &cache, cfg.max_new);
  };
  hooks.cascade_asr = [&](int idx, bool image) {
    return std::make_unique<AsrAdapter>(asr, *pool[idx], image, &cache, cfg.max_new);
  };
  hooks.cascade_mt = [&](int idx) {
    return std::make_unique<MtAdapter>(mt, *pool[idx], cfg.max_new);
  };
  hooks.quality = [&](int idx, const std::vector<int>& hyp) {
    QualityReport r = score({hyp}, {corpus.reference(*pool[idx])});
    return r.token_accuracy;
  };
  hooks.reference_length = [&](int idx) {
    return static_cast<int>(corpus.reference(*pool[idx]).size());
  };

  simulst::ClockModel clock;
  clock.deterministic = cfg.deterministic_clock;
  std::vector<simulst::CommitTrace> traces;
  std::vector<simulst::LatencyReport> rows =
      simulst::sweep(examples, cfg.chunk_sizes, {"e2e", "cascade"}, {false, true},
                     clock, hooks, &traces);

  fs::create_directories(fs::path(cfg.out_dir) / "traces");
  write_file((fs::path(cfg.out_dir) / "sweep.csv").string(), simulst::latency_csv(rows));
  for (size_t i = 0; i < traces.size(); ++i) {
    write_file((fs::path(cfg.out_dir) / "traces" /
                ("trace_" + std::to_string(i) + ".jsonl"))
                   .string(),
               traces[i].to_jsonl());
  }
  return rows;
}

std::string run_gate_report(const trainer::FusedSystem& sys,
                            const synthdata::Corpus& corpus, int per_combo) {
  if (!sys.multimodal()) throw ConfigError("gate report needs a multimodal system");
  std::vector<model::ModalityPayload> payloads;
  int n_speech = 0, n_both = 0, n_image = 0;
  auto consider = [&](const SynthExample& ex) {
    if (ex.task == "ST" && n_speech < per_combo) {
      payloads.push_back(payload_for(ex, true));
      ++n_speech;
    } else if (ex.task == "SIT" && n_both < per_combo) {
      payloads.push_back(payload_for(ex, true));
      ++n_both;
    } else if (ex.task == "TIT" && n_image < per_combo) {
      payloads.push_back(payload_for(ex, true));
      ++n_image;
    }
  };
  for (const auto& ex : corpus.train) consider(ex);
  for (const auto& ex : corpus.test) consider(ex);
  if (payloads.empty()) throw DataError("no payloads for gate report");
  auto stats = fusion::gate_statistics(*sys.encoder, *sys.bridge, payloads);
  return fusion::gate_stats_csv(stats);
}

}  // namespace mmfuse::evalkit
