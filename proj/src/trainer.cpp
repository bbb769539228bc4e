// SPDX-License-Identifier: Apache-2.0
#include "mmfuse/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace mmfuse::trainer {

namespace fs = std::filesystem;
using synthdata::TrainingExample;

// ----- config -----

void TrainConfig::validate() const {
  if (learning_rate < 0 || weight_decay < 0) throw ConfigError("negative lr/decay");
  if (batch_size <= 0 || grad_accum_steps <= 0 || max_steps < 0 ||
      eval_every <= 0 || save_limit <= 0) {
    throw ConfigError("batch/accum/steps/eval/save settings must be positive");
  }
  if (mode != "fuse" && mode != "pretrain" && mode != "asr" && mode != "mt") {
    throw ConfigError("unknown trainer mode '" + mode + "'");
  }
  if (mix_st < 0 || mix_sit < 0 || mix_tit < 0 || mix_ape < 0) {
    throw ConfigError("task mix weights must be nonnegative");
  }
  if (mode == "fuse" && mix_st + mix_sit + mix_tit + mix_ape <= 0) {
    throw ConfigError("task mix has zero total weight");
  }
  fusion::variant_from_string(fusion_variant);
  nmt.validate();
  if (mode == "fuse" || mode == "asr") mmfm.validate(true);
}

std::string TrainConfig::to_kv() const {
  std::ostringstream os;
  os << "mode = " << mode << "\n";
  os << "learning_rate = " << std::setprecision(17) << learning_rate << "\n";
  os << "batch_size = " << batch_size << "\n";
  os << "grad_accum_steps = " << grad_accum_steps << "\n";
  os << "weight_decay = " << std::setprecision(17) << weight_decay << "\n";
  os << "grad_clip = " << grad_clip << "\n";
  os << "max_steps = " << max_steps << "\n";
  os << "eval_every = " << eval_every << "\n";
  os << "save_limit = " << save_limit << "\n";
  os << "seed = " << seed << "\n";
  os << "mmfm_seed = " << mmfm_seed << "\n";
  os << "fusion_variant = " << fusion_variant << "\n";
  os << "mix_st = " << mix_st << "\n";
  os << "mix_sit = " << mix_sit << "\n";
  os << "mix_tit = " << mix_tit << "\n";
  os << "mix_ape = " << mix_ape << "\n";
  os << "ape_corruption = " << ape_corruption << "\n";
  os << "pretrain_stream_mix = " << pretrain_stream_mix << "\n";
  os << "asr_with_image = " << (asr_with_image ? 1 : 0) << "\n";
  os << "init_nmt_from = " << init_nmt_from << "\n";
  auto dump_model = [&](const char* p, const model::TransformerConfig& m) {
    os << p << ".vocab_size = " << m.vocab_size << "\n";
    os << p << ".d_model = " << m.d_model << "\n";
    os << p << ".n_layers = " << m.n_layers << "\n";
    os << p << ".n_heads = " << m.n_heads << "\n";
    os << p << ".d_ff = " << m.d_ff << "\n";
    os << p << ".max_seq_len = " << m.max_seq_len << "\n";
    os << p << ".dropout_rate = " << m.dropout_rate << "\n";
  };
  dump_model("mmfm", mmfm);
  dump_model("nmt", nmt);
  os << "lora.rank = " << lora.rank << "\n";
  os << "lora.alpha = " << lora.alpha << "\n";
  os << "lora.targets = ";
  for (size_t i = 0; i < lora.targets.size(); ++i) {
    if (i) os << ",";
    os << lora.targets[i];
  }
  os << "\n";
  return os.str();
}

TrainConfig TrainConfig::from_kv(const std::map<std::string, std::string>& kv) {
  TrainConfig c;
  auto get = [&](const char* k) -> const std::string* {
    auto it = kv.find(k);
    return it == kv.end() ? nullptr : &it->second;
  };
  auto geti = [&](const char* k, int& dst) {
    if (auto* v = get(k)) dst = std::stoi(*v);
  };
  auto getu = [&](const char* k, uint64_t& dst) {
    if (auto* v = get(k)) dst = std::stoull(*v);
  };
  auto getd = [&](const char* k, double& dst) {
    if (auto* v = get(k)) dst = std::stod(*v);
  };
  auto gets = [&](const char* k, std::string& dst) {
    if (auto* v = get(k)) dst = *v;
  };
  gets("mode", c.mode);
  getd("learning_rate", c.learning_rate);
  geti("batch_size", c.batch_size);
  geti("grad_accum_steps", c.grad_accum_steps);
  getd("weight_decay", c.weight_decay);
  getd("grad_clip", c.grad_clip);
  geti("max_steps", c.max_steps);
  geti("eval_every", c.eval_every);
  geti("save_limit", c.save_limit);
  getu("seed", c.seed);
  getu("mmfm_seed", c.mmfm_seed);
  gets("fusion_variant", c.fusion_variant);
  getd("mix_st", c.mix_st);
  getd("mix_sit", c.mix_sit);
  getd("mix_tit", c.mix_tit);
  getd("mix_ape", c.mix_ape);
  getd("ape_corruption", c.ape_corruption);
  getd("pretrain_stream_mix", c.pretrain_stream_mix);
  int awi = c.asr_with_image ? 1 : 0;
  geti("asr_with_image", awi);
  c.asr_with_image = awi != 0;
  gets("init_nmt_from", c.init_nmt_from);
  auto load_model = [&](const char* p, model::TransformerConfig& m) {
    std::string pre(p);
    geti((pre + ".vocab_size").c_str(), m.vocab_size);
    geti((pre + ".d_model").c_str(), m.d_model);
    geti((pre + ".n_layers").c_str(), m.n_layers);
    geti((pre + ".n_heads").c_str(), m.n_heads);
    geti((pre + ".d_ff").c_str(), m.d_ff);
    geti((pre + ".max_seq_len").c_str(), m.max_seq_len);
    getd((pre + ".dropout_rate").c_str(), m.dropout_rate);
  };
  load_model("mmfm", c.mmfm);
  load_model("nmt", c.nmt);
  geti("lora.rank", c.lora.rank);
  getd("lora.alpha", c.lora.alpha);
  if (auto* v = get("lora.targets")) {
    c.lora.targets.clear();
    std::istringstream is(*v);
    std::string item;
    while (std::getline(is, item, ',')) {
      if (!item.empty()) c.lora.targets.push_back(item);
    }
  }
  return c;
}

// ----- tap cache -----

const model::LayerTaps* TapCache::find(uint64_t key) const {
  auto it = map_.find(key);
  return it == map_.end() ? nullptr : &it->second;
}

void TapCache::put(uint64_t key, model::LayerTaps taps) {
  if (map_.size() >= cap_) map_.clear();
  map_.emplace(key, std::move(taps));
}

// ----- fused system -----

FusedSystem FusedSystem::create_multimodal(const model::TransformerConfig& mmfm_cfg,
                                           const model::TransformerConfig& nmt_cfg,
                                           const std::string& variant,
                                           uint64_t mmfm_seed, uint64_t seed) {
  FusedSystem s;
  s.mmfm_cfg = mmfm_cfg;
  s.nmt_cfg = nmt_cfg;
  s.fusion_variant = variant;
  Rng enc_rng(mix64(mmfm_seed, 0xe2c));
  s.encoder = std::make_unique<model::MultimodalEncoder>(mmfm_cfg, enc_rng);
  Rng bridge_rng(mix64(seed, 0xb31d6e));
  s.bridge = std::make_unique<fusion::FusionBridge>(
      mmfm_cfg.d_model, nmt_cfg.d_model, fusion::variant_from_string(variant),
      bridge_rng);
  Rng nmt_rng(mix64(seed, 0x17a2));
  s.nmt = std::make_unique<model::TransformerLM>(nmt_cfg, nmt_rng, true);
  return s;
}

FusedSystem FusedSystem::create_text_only(const model::TransformerConfig& nmt_cfg,
                                          uint64_t seed) {
  FusedSystem s;
  s.nmt_cfg = nmt_cfg;
  Rng nmt_rng(mix64(seed, 0x17a2));
  s.nmt = std::make_unique<model::TransformerLM>(nmt_cfg, nmt_rng, true);
  return s;
}

std::vector<std::pair<std::string, nc::Tensor>> FusedSystem::named_parameters()
    const {
  std::vector<std::pair<std::string, nc::Tensor>> out;
  if (encoder) {
    for (auto& [n, t] : encoder->named_parameters()) out.emplace_back("mmfm." + n, t);
  }
  for (auto& [n, t] : nmt->named_parameters()) out.emplace_back("nmt." + n, t);
  if (bridge) {
    for (auto& [n, t] : bridge->named_parameters()) out.emplace_back("fusion." + n, t);
  }
  return out;
}

fusion::FusedContext FusedSystem::fuse_payload(const model::ModalityPayload& p,
                                               TapCache* cache) const {
  if (!encoder || !bridge) {
    throw ConfigError("text-only system cannot fuse a multimodal payload");
  }
  if (cache) {
    std::vector<int> ids = model::mmfm_input_tokens(p);
    uint64_t key = fnv1a64(ids.data(), ids.size() * sizeof(int));
    if (const model::LayerTaps* hit = cache->find(key)) return bridge->fuse(*hit);
    model::LayerTaps taps = encoder->forward(p);
    cache->put(key, taps);
    return bridge->fuse(taps);
  }
  return bridge->fuse(encoder->forward(p));
}

nc::Tensor FusedSystem::example_loss(const TrainingExample& ex,
                                     TapCache* cache) const {
  if (ex.payload.empty() || !multimodal()) {
    if (!ex.payload.empty()) {
      throw ConfigError("text-only system fed a multimodal example");
    }
    auto t = synthdata::nmt_targets(ex, 0);
    return nmt->loss(nmt->embed(t.tokens, 0), t.labels, t.mask);
  }
  fusion::FusedContext fused = fuse_payload(ex.payload, cache);
  auto t = synthdata::nmt_targets(ex, fused.m.rows());
  nc::Tensor emb = fusion::concat_multimodal(fused, *nmt, t.tokens);
  return nmt->loss(emb, t.labels, t.mask);
}

FusedSystem::EvalResult FusedSystem::example_eval(const TrainingExample& ex,
                                                  TapCache* cache) const {
  nc::Tensor emb;
  synthdata::NmtTargets t;
  if (ex.payload.empty() || !multimodal()) {
    t = synthdata::nmt_targets(ex, 0);
    emb = nmt->embed(t.tokens, 0);
  } else {
    fusion::FusedContext fused = fuse_payload(ex.payload, cache);
    t = synthdata::nmt_targets(ex, fused.m.rows());
    emb = fusion::concat_multimodal(fused, *nmt, t.tokens);
  }
  nc::Tensor lg = nmt->logits(emb);
  EvalResult r;
  r.loss = nc::cross_entropy_masked(lg, t.labels, t.mask).value();
  for (int row = 0; row < lg.rows(); ++row) {
    if (!t.mask[row]) continue;
    int best = 0;
    double bv = lg.at(row, 0);
    for (int v = 1; v < lg.cols(); ++v) {
      if (lg.at(row, v) > bv) {
        bv = lg.at(row, v);
        best = v;
      }
    }
    r.correct += best == t.labels[row] ? 1 : 0;
    ++r.total;
  }
  return r;
}

std::vector<int> FusedSystem::translate(const model::ModalityPayload& p,
                                        const std::vector<int>& inp,
                                        const std::vector<int>& committed,
                                        int max_new, int* decode_steps,
                                        TapCache* cache, int stop_eos_count) const {
  nc::Tensor prefix;
  if (p.empty() || !multimodal()) {
    if (!p.empty()) throw ConfigError("text-only system fed a multimodal payload");
    prefix = nmt->embed(inp, 0);
  } else {
    fusion::FusedContext fused = fuse_payload(p, cache);
    prefix = fusion::concat_multimodal(fused, *nmt, inp);
  }
  return nmt->generate(prefix, committed, max_new, decode_steps, stop_eos_count);
}

void store_system(const FusedSystem& sys, model::Container& c) {
  c.strings["multimodal"] = sys.multimodal() ? "1" : "0";
  c.strings["fusion_variant"] = sys.fusion_variant;
  c.strings["nmt_config"] = sys.nmt_cfg.to_json();
  if (sys.multimodal()) c.strings["mmfm_config"] = sys.mmfm_cfg.to_json();
  c.strings["lora_applied"] = sys.nmt->has_lora() ? "1" : "0";
  for (auto& [n, t] : sys.named_parameters()) c.tensors[n] = t;
}

FusedSystem restore_system(const model::Container& c) {
  auto need = [&](const char* k) -> const std::string& {
    auto it = c.strings.find(k);
    if (it == c.strings.end()) {
      throw IoError(std::string("checkpoint missing field '") + k + "'");
    }
    return it->second;
  };
  bool multimodal = need("multimodal") == "1";
  model::TransformerConfig nmt_cfg =
      model::TransformerConfig::from_json(need("nmt_config"));
  FusedSystem sys;
  if (multimodal) {
    model::TransformerConfig mmfm_cfg =
        model::TransformerConfig::from_json(need("mmfm_config"));
    sys = FusedSystem::create_multimodal(mmfm_cfg, nmt_cfg,
                                         need("fusion_variant"), 0, 0);
  } else {
    sys = FusedSystem::create_text_only(nmt_cfg, 0);
  }
  // lora structure must exist before tensors are matched by name
  if (need("lora_applied") == "1") {
    auto it = c.strings.find("train_config");
    model::LoraSpec spec;
    if (it != c.strings.end()) {
      spec = TrainConfig::from_kv(parse_kv_text(it->second)).lora;
    }
    sys.nmt->set_trainable_all(false);
    sys.nmt->apply_lora(spec);
  }
  sys.nmt->load_tensors(c.tensors, "nmt.");
  if (multimodal) {
    sys.encoder->load_tensors(c.tensors, "mmfm.");
    sys.bridge->load_tensors(c.tensors, "fusion.");
  }
  return sys;
}

// ----- optimizer -----

AdamW::AdamW(std::vector<std::pair<std::string, nc::Tensor>> params, double lr,
             double weight_decay, double beta1, double beta2, double eps)
    : params_(std::move(params)),
      lr_(lr),
      wd_(weight_decay),
      b1_(beta1),
      b2_(beta2),
      eps_(eps) {
  m_.resize(params_.size());
  v_.resize(params_.size());
  for (size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].second.requires_grad()) {
      throw ConfigError("optimizer given frozen parameter '" + params_[i].first + "'");
    }
    m_[i].assign(params_[i].second.numel(), 0.0);
    v_[i].assign(params_[i].second.numel(), 0.0);
  }
}

void AdamW::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    nc::Tensor& p = params_[i].second;
    const std::vector<double>* g = p.grad();
    auto& data = p.data();
    for (size_t j = 0; j < data.size(); ++j) {
      double gj = g ? (*g)[j] : 0.0;
      m_[i][j] = b1_ * m_[i][j] + (1.0 - b1_) * gj;
      v_[i][j] = b2_ * v_[i][j] + (1.0 - b2_) * gj * gj;
      double mh = m_[i][j] / bc1;
      double vh = v_[i][j] / bc2;
      data[j] -= lr_ * (mh / (std::sqrt(vh) + eps_) + wd_ * data[j]);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& [n, p] : params_) p.zero_grad();
}

double AdamW::grad_norm() const {
  double total = 0;
  for (const auto& [n, p] : params_) {
    if (const auto* g = p.grad()) {
      for (double v : *g) total += v * v;
    }
  }
  return std::sqrt(total);
}

double AdamW::clip_grad_norm(double max_norm) {
  double norm = grad_norm();
  if (max_norm > 0 && norm > max_norm) {
    double scale = max_norm / norm;
    for (auto& [n, p] : params_) {
      if (p.grad()) {
        for (auto& v : nc::Tensor(p).ensure_grad()) v *= scale;
      }
    }
  }
  return norm;
}

void AdamW::store(model::Container& c) const {
  c.strings["opt.t"] = std::to_string(t_);
  for (size_t i = 0; i < params_.size(); ++i) {
    const auto& p = params_[i].second;
    c.tensors["opt.m." + params_[i].first] =
        nc::Tensor::from(m_[i], p.rows(), p.cols());
    c.tensors["opt.v." + params_[i].first] =
        nc::Tensor::from(v_[i], p.rows(), p.cols());
  }
}

void AdamW::restore(const model::Container& c) {
  auto it = c.strings.find("opt.t");
  if (it == c.strings.end()) throw IoError("checkpoint missing optimizer state");
  t_ = std::stol(it->second);
  for (size_t i = 0; i < params_.size(); ++i) {
    auto mi = c.tensors.find("opt.m." + params_[i].first);
    auto vi = c.tensors.find("opt.v." + params_[i].first);
    if (mi == c.tensors.end() || vi == c.tensors.end()) {
      throw IoError("checkpoint missing optimizer moments for '" +
                    params_[i].first + "'");
    }
    m_[i] = mi->second.data();
    v_[i] = vi->second.data();
  }
}

// ----- trainer -----

namespace {

FusedSystem build_system(const TrainConfig& cfg) {
  cfg.validate();
  FusedSystem sys;
  if (cfg.mode == "fuse" || cfg.mode == "asr") {
    sys = FusedSystem::create_multimodal(cfg.mmfm, cfg.nmt, cfg.fusion_variant,
                                         cfg.mmfm_seed, cfg.seed);
  } else {
    sys = FusedSystem::create_text_only(cfg.nmt, cfg.seed);
  }
  if (cfg.mode != "pretrain") {
    if (!cfg.init_nmt_from.empty()) {
      model::Container base = model::Container::load(cfg.init_nmt_from);
      sys.nmt->load_tensors(base.tensors, "nmt.");
    }
    sys.nmt->set_trainable_all(false);
    sys.nmt->apply_lora(cfg.lora);
  }
  return sys;
}

}  // namespace

Trainer::Trainer(TrainConfig cfg, const synthdata::Corpus& corpus)
    : cfg_(std::move(cfg)), corpus_(corpus), system_(build_system(cfg_)) {
  init_partition();
}

Trainer::Trainer(const std::string& checkpoint_path,
                 const synthdata::Corpus& corpus)
    : cfg_(), corpus_(corpus) {
  model::Container c = model::Container::load(checkpoint_path);
  auto it = c.strings.find("train_config");
  if (it == c.strings.end()) throw IoError("checkpoint missing train_config");
  cfg_ = TrainConfig::from_kv(parse_kv_text(it->second));
  cfg_.validate();
  system_ = restore_system(c);
  init_partition();
  opt_->restore(c);
  step_ = std::stoi(c.strings.at("step"));
  best_valid_ = std::stod(c.strings.at("best_valid"));
}

void Trainer::init_partition() {
  audit_partition();
  opt_ = std::make_unique<AdamW>(trainable_parameters(), cfg_.learning_rate,
                                 cfg_.weight_decay);
  pool_st_.clear();
  pool_sit_.clear();
  pool_tit_.clear();
  pool_speech_.clear();
  pool_all_.clear();
  for (size_t i = 0; i < corpus_.train.size(); ++i) {
    const auto& ex = corpus_.train[i];
    pool_all_.push_back(i);
    if (ex.task == "ST") pool_st_.push_back(i);
    if (ex.task == "SIT") pool_sit_.push_back(i);
    if (ex.task == "TIT") pool_tit_.push_back(i);
    if (!ex.speech.empty()) pool_speech_.push_back(i);
  }
}

void Trainer::audit_partition() const {
  const bool pretrain = cfg_.mode == "pretrain";
  for (const auto& [name, t] : system_.named_parameters()) {
    bool is_mmfm = name.rfind("mmfm.", 0) == 0;
    bool is_fusion = name.rfind("fusion.", 0) == 0;
    bool is_lora = name.find("lora_") != std::string::npos;
    bool expected;
    if (is_mmfm) {
      expected = false;
    } else if (is_fusion || is_lora) {
      expected = true;
    } else {
      expected = pretrain;  // LM base only trains during pretraining
    }
    if (t.requires_grad() != expected) {
      throw ConfigError("parameter partition violation: '" + name + "' is " +
                        (t.requires_grad() ? "trainable" : "frozen") +
                        " but should be " + (expected ? "trainable" : "frozen"));
    }
  }
}

std::vector<std::pair<std::string, nc::Tensor>> Trainer::trainable_parameters()
    const {
  std::vector<std::pair<std::string, nc::Tensor>> out;
  for (auto& [name, t] : system_.named_parameters()) {
    if (t.requires_grad()) out.emplace_back(name, t);
  }
  return out;
}

const std::vector<size_t>& Trainer::pool_for(const std::string& task) const {
  if (task == "ST") return pool_st_;
  if (task == "SIT") return pool_sit_;
  if (task == "TIT") return pool_tit_;
  if (task == "APE" || task == "ASR") return pool_speech_;
  return pool_all_;  // MT
}

std::string Trainer::sample_task(Rng& rng) const {
  if (cfg_.mode == "pretrain") {
    return rng.uniform() < cfg_.pretrain_stream_mix ? "TXT" : "MT";
  }
  if (cfg_.mode == "mt") return "MT";
  if (cfg_.mode == "asr") return "ASR";
  struct W {
    const char* name;
    double w;
  };
  W ws[4] = {{"ST", cfg_.mix_st}, {"SIT", cfg_.mix_sit},
             {"TIT", cfg_.mix_tit}, {"APE", cfg_.mix_ape}};
  double total = 0;
  for (auto& w : ws) {
    if (pool_for(w.name).empty()) w.w = 0;
    total += w.w;
  }
  if (total <= 0) throw DataError("no examples available for the task mix");
  double u = rng.uniform() * total;
  for (auto& w : ws) {
    if (u < w.w) return w.name;
    u -= w.w;
  }
  return "ST";
}

TrainingExample Trainer::build_for_task(const std::string& task,
                                        const synthdata::SynthExample& ex,
                                        Rng& rng) const {
  if (task == "MT") return synthdata::build_mt(ex);
  if (task == "TXT") return synthdata::build_text_analogue(ex, rng);
  if (task == "ASR") return synthdata::build_asr(ex, cfg_.asr_with_image);
  if (task == "APE") {
    return synthdata::build_ape(ex, corpus_.spec, cfg_.ape_corruption, rng);
  }
  return synthdata::build_prompt(ex, rng);
}

synthdata::TrainingExample Trainer::slot_example(int step, int slot) const {
  Rng rng(mix64(cfg_.seed, 0xba7c4ULL + static_cast<uint64_t>(step),
                static_cast<uint64_t>(slot)));
  std::string task = sample_task(rng);
  const auto& pool = pool_for(task);
  if (pool.empty()) throw DataError("empty example pool for task " + task);
  const auto& ex = corpus_.train[pool[rng.uniform_int(pool.size())]];
  return build_for_task(task, ex, rng);
}

StepMetrics Trainer::train_step() {
  const int total = cfg_.batch_size * cfg_.grad_accum_steps;
  double loss_sum = 0;
  std::vector<int> bad_slots;
  std::string first_error;
  int slot = 0;
  for (int micro = 0; micro < cfg_.grad_accum_steps; ++micro) {
    for (int b = 0; b < cfg_.batch_size; ++b, ++slot) {
      TrainingExample ex = slot_example(step_, slot);
      nc::GradTape tape;
      nc::TapeScope scope(tape);
      try {
        nc::Tensor loss = system_.example_loss(ex, &cache_);
        double lv = loss.value();
        if (!std::isfinite(lv)) {
          bad_slots.push_back(slot);
          continue;
        }
        loss_sum += lv;
        nc::backward(nc::scale(loss, 1.0 / total));
      } catch (const NumericError& e) {
        bad_slots.push_back(slot);
        if (first_error.empty()) first_error = e.what();
      }
    }
  }
  if (!bad_slots.empty()) {
    std::string ids;
    for (int s : bad_slots) ids += (ids.empty() ? "" : ",") + std::to_string(s);
    throw NumericError("non-finite loss at step " + std::to_string(step_) +
                       ", slots [" + ids + "]" +
                       (first_error.empty() ? "" : ": " + first_error));
  }
  StepMetrics m;
  m.grad_norm = opt_->clip_grad_norm(cfg_.grad_clip);
  opt_->step();
  opt_->zero_grad();
  ++step_;
  m.step = step_;
  m.loss = loss_sum / total;
  return m;
}

ValidationMetrics Trainer::validate() {
  if (corpus_.valid.empty()) throw DataError("empty validation set");
  ValidationMetrics v;
  long correct = 0, total = 0, exact = 0, used = 0;
  for (size_t i = 0; i < corpus_.valid.size(); ++i) {
    Rng rng(mix64(cfg_.seed, 0x5a11d, i));
    std::string task;
    if (cfg_.mode == "pretrain") {
      task = i % 2 == 0 ? "TXT" : "MT";
    } else if (cfg_.mode == "mt") {
      task = "MT";
    } else if (cfg_.mode == "asr") {
      if (corpus_.valid[i].speech.empty()) continue;
      task = "ASR";
    }
    TrainingExample ex;
    if (task.empty()) {
      ex = synthdata::build_prompt(corpus_.valid[i], rng);
    } else {
      ex = build_for_task(task, corpus_.valid[i], rng);
    }
    auto r = system_.example_eval(ex, &cache_);
    v.loss += r.loss;
    correct += r.correct;
    total += r.total;
    exact += (r.correct == r.total) ? 1 : 0;
    ++used;
  }
  if (used == 0) throw DataError("no usable validation examples for this mode");
  v.loss /= used;
  v.token_accuracy = total > 0 ? static_cast<double>(correct) / total : 0;
  v.exact_match = static_cast<double>(exact) / used;
  return v;
}

void Trainer::save_checkpoint(const std::string& path) const {
  model::Container c;
  c.strings["format"] = "mmfuse-train-ckpt";
  c.strings["train_config"] = cfg_.to_kv();
  c.strings["step"] = std::to_string(step_);
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", best_valid_);
  c.strings["best_valid"] = buf;
  store_system(system_, c);
  opt_->store(c);
  c.save(path);
}

void Trainer::run(const std::string& out_dir) {
  fs::create_directories(out_dir);
  std::ofstream log(fs::path(out_dir) / "log.csv", std::ios::trunc);
  log << "step,loss,grad_norm,lr\n";
  std::ofstream vlog(fs::path(out_dir) / "valid.csv", std::ios::trunc);
  vlog << "step,loss,token_accuracy,exact_match\n";
  while (step_ < cfg_.max_steps) {
    StepMetrics m = train_step();
    log << m.step << ',' << fmt6(m.loss) << ',' << fmt6(m.grad_norm) << ','
        << fmt6(cfg_.learning_rate) << '\n';
    if (m.step % cfg_.eval_every == 0 || m.step == cfg_.max_steps) {
      ValidationMetrics v = validate();
      vlog << m.step << ',' << fmt6(v.loss) << ',' << fmt6(v.token_accuracy)
           << ',' << fmt6(v.exact_match) << '\n';
      vlog.flush();
      if (v.loss < best_valid_) {
        best_valid_ = v.loss;
        save_checkpoint((fs::path(out_dir) / "best.ckpt").string());
      }
      std::string name = "step_" + std::to_string(m.step) + ".ckpt";
      std::string path = (fs::path(out_dir) / name).string();
      save_checkpoint(path);
      saved_checkpoints_.push_back(path);
      while (static_cast<int>(saved_checkpoints_.size()) > cfg_.save_limit) {
        fs::remove(saved_checkpoints_.front());
        saved_checkpoints_.erase(saved_checkpoints_.begin());
      }
    }
  }
}

}  // namespace mmfuse::trainer
