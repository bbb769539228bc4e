// SPDX-License-Identifier: Apache-2.0
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mmfuse/evalkit.hpp"
#include "mmfuse/synthdata.hpp"
#include "mmfuse/trainer.hpp"

namespace fs = std::filesystem;
using namespace mmfuse;

namespace {

int cmd_gen_data(const synthdata::CorpusSpec& spec, const std::string& out_dir) {
  synthdata::Corpus corpus = synthdata::Corpus::generate(spec);
  corpus.save(out_dir);
  std::cout << "wrote corpus to " << out_dir << " (train=" << corpus.train.size()
            << " valid=" << corpus.valid.size() << " test=" << corpus.test.size()
            << " disamb=" << corpus.disamb.size() << ")\n";
  return 0;
}

int cmd_train(trainer::TrainConfig cfg, const std::string& corpus_dir,
              const std::string& out_dir, const std::string& config_path,
              const std::string& resume_path) {
  if (!config_path.empty()) {
    cfg = trainer::TrainConfig::from_kv(parse_kv_file(config_path));
  }
  synthdata::Corpus corpus = synthdata::Corpus::load(corpus_dir);
  if (!resume_path.empty()) {
    trainer::Trainer t(resume_path, corpus);
    t.run(out_dir);
    std::cout << "resumed to step " << t.step() << ", checkpoints in " << out_dir
              << "\n";
    return 0;
  }
  trainer::Trainer t(cfg, corpus);
  t.run(out_dir);
  auto v = t.validate();
  std::cout << "finished " << t.step() << " steps; valid loss " << fmt6(v.loss)
            << " token_acc " << fmt6(v.token_accuracy) << "; checkpoints in "
            << out_dir << "\n";
  return 0;
}

int cmd_eval_offline(const evalkit::ExperimentConfig& cfg, bool check) {
  auto rows = evalkit::run_experiment(cfg);
  std::cout << read_file((fs::path(cfg.out_dir) / "summary.txt").string());
  if (!check) return 0;
  auto find = [&](const std::string& sys, bool image,
                  const std::string& infer) -> const evalkit::ExperimentRow* {
    for (const auto& r : rows) {
      if (r.system == sys && r.image == image && r.infer == infer) return &r;
    }
    return nullptr;
  };
  int failures = 0;
  const auto* gated = find("e2e_gated", true, "direct");
  const auto* mid = find("e2e_mid", true, "direct");
  if (gated && mid &&
      gated->report.token_accuracy < mid->report.token_accuracy - 0.01) {
    std::cerr << "check failed: gated fusion below mid-only fusion\n";
    ++failures;
  }
  const auto* cascade = find("e2e_gated", true, "self_cascade");
  if (gated && cascade &&
      cascade->report.token_accuracy < gated->report.token_accuracy - 0.01) {
    std::cerr << "check failed: self-cascade below direct\n";
    ++failures;
  }
  return failures == 0 ? 0 : 1;
}

int cmd_simul_sweep(const evalkit::SweepRunConfig& cfg, bool check) {
  auto rows = evalkit::run_sweep(cfg);
  std::cout << simulst::latency_csv(rows);
  if (!check) return 0;
  int failures = 0;
  for (const auto& r : rows) {
    if (r.mode != "e2e") continue;
    for (const auto& c : rows) {
      if (c.mode == "cascade" && c.image == r.image &&
          c.chunk_size == r.chunk_size) {
        if (!(r.al_unaware < c.al_unaware)) {
          std::cerr << "check failed: e2e AL not below cascade at chunk "
                    << r.chunk_size << "\n";
          ++failures;
        }
        if (!(r.decode_steps < c.decode_steps)) {
          std::cerr << "check failed: e2e decode steps not below cascade at chunk "
                    << r.chunk_size << "\n";
          ++failures;
        }
      }
    }
    if (r.al_aware < r.al_unaware) {
      std::cerr << "check failed: aware AL below unaware AL\n";
      ++failures;
    }
  }
  return failures == 0 ? 0 : 1;
}

int cmd_gate_report(const std::string& corpus_dir, const std::string& ckpt,
                    const std::string& out_file, int per_combo) {
  synthdata::Corpus corpus = synthdata::Corpus::load(corpus_dir);
  trainer::FusedSystem sys = evalkit::load_system_checkpoint(ckpt);
  std::string csv = evalkit::run_gate_report(sys, corpus, per_combo);
  if (out_file.empty()) {
    std::cout << csv;
  } else {
    write_file(out_file, csv);
    std::cout << "wrote " << out_file << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"toy multimodal translation lab: gated layer fusion of a frozen "
               "multimodal encoder into a translation decoder, with offline and "
               "streaming evaluation"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic corpus");
  synthdata::CorpusSpec spec;
  std::string gen_out = "data";
  gen->add_option("--out", gen_out, "output directory");
  gen->add_option("--seed", spec.seed, "corpus seed");
  gen->add_option("--vocab", spec.vocab_size, "vocabulary size");
  gen->add_option("--languages", spec.n_languages, "number of target languages");
  gen->add_option("--src-tokens", spec.n_src_tokens, "source content tokens");
  gen->add_option("--homographs", spec.n_homographs, "homograph tokens");
  gen->add_option("--homograph-rate", spec.homograph_rate, "homograph example rate");
  gen->add_option("--train", spec.n_train, "train examples");
  gen->add_option("--valid", spec.n_valid, "validation examples");
  gen->add_option("--test", spec.n_test, "test examples");
  gen->add_option("--disamb", spec.n_disamb, "disambiguation suite examples");

  // train
  auto* tr = app.add_subcommand("train", "train a system");
  trainer::TrainConfig tcfg;
  std::string tr_corpus = "data", tr_out = "runs/run", tr_config, tr_resume;
  tr->add_option("--corpus", tr_corpus, "corpus directory");
  tr->add_option("--out", tr_out, "run output directory");
  tr->add_option("--config", tr_config, "key=value config file (overrides flags)");
  tr->add_option("--resume", tr_resume, "checkpoint to resume from");
  tr->add_option("--mode", tcfg.mode, "fuse | pretrain | asr | mt");
  tr->add_option("--steps", tcfg.max_steps, "optimizer steps");
  tr->add_option("--seed", tcfg.seed, "training seed");
  tr->add_option("--lr", tcfg.learning_rate, "learning rate");
  tr->add_option("--variant", tcfg.fusion_variant,
                 "gated | first_only | mid_only | last_only");
  tr->add_option("--init-nmt", tcfg.init_nmt_from,
                 "checkpoint providing the frozen LM base");
  tr->add_option("--lora-rank", tcfg.lora.rank, "adapter rank");
  tr->add_option("--eval-every", tcfg.eval_every, "validation interval");

  // eval-offline
  auto* ev = app.add_subcommand("eval-offline", "offline evaluation matrix");
  evalkit::ExperimentConfig ecfg;
  bool ev_check = false;
  ev->add_option("--corpus", ecfg.corpus_dir, "corpus directory")->required();
  ev->add_option("--gated", ecfg.gated_ckpt, "gated fusion checkpoint")->required();
  ev->add_option("--mid", ecfg.mid_ckpt, "mid-only fusion checkpoint")->required();
  ev->add_option("--asr", ecfg.asr_ckpt, "transcription checkpoint")->required();
  ev->add_option("--mt", ecfg.mt_ckpt, "text translation checkpoint")->required();
  ev->add_option("--out", ecfg.out_dir, "report directory")->required();
  ev->add_option("--max-examples", ecfg.max_examples, "cap evaluated examples");
  ev->add_flag("--check", ev_check, "nonzero exit on property failures");

  // simul-sweep
  auto* sw = app.add_subcommand("simul-sweep", "streaming latency/quality sweep");
  evalkit::SweepRunConfig scfg;
  bool sw_check = false;
  bool wall_clock = false;
  sw->add_option("--corpus", scfg.corpus_dir, "corpus directory")->required();
  sw->add_option("--e2e", scfg.e2e_ckpt, "fused system checkpoint")->required();
  sw->add_option("--asr", scfg.asr_ckpt, "transcription checkpoint")->required();
  sw->add_option("--mt", scfg.mt_ckpt, "text translation checkpoint")->required();
  sw->add_option("--out", scfg.out_dir, "sweep output directory")->required();
  sw->add_option("--chunks", scfg.chunk_sizes, "chunk sizes in time units");
  sw->add_option("--max-examples", scfg.max_examples, "streams per configuration");
  sw->add_flag("--wall-clock", wall_clock,
               "charge measured wall clock instead of the deterministic cost");
  sw->add_flag("--check", sw_check, "nonzero exit on property failures");

  // gate-report
  auto* gr = app.add_subcommand("gate-report", "per-layer gate contribution report");
  std::string gr_corpus, gr_ckpt, gr_out;
  int gr_per_combo = 100;
  gr->add_option("--corpus", gr_corpus, "corpus directory")->required();
  gr->add_option("--ckpt", gr_ckpt, "gated fusion checkpoint")->required();
  gr->add_option("--out", gr_out, "output csv (stdout if omitted)");
  gr->add_option("--per-combo", gr_per_combo, "examples per modality combination");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(spec, gen_out);
    if (tr->parsed()) return cmd_train(tcfg, tr_corpus, tr_out, tr_config, tr_resume);
    if (ev->parsed()) return cmd_eval_offline(ecfg, ev_check);
    if (sw->parsed()) {
      scfg.deterministic_clock = !wall_clock;
      return cmd_simul_sweep(scfg, sw_check);
    }
    if (gr->parsed()) return cmd_gate_report(gr_corpus, gr_ckpt, gr_out, gr_per_combo);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
