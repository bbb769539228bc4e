// SPDX-License-Identifier: Apache-2.0
#include "mmfuse/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace mmfuse::vocab {

std::string token_name(int id) {
  switch (id) {
    case kPad: return "<pad>";
    case kEos: return "<eos>";
    case kMaskTok: return "<mask>";
    case kRowSep: return "<row>";
    case kBlank: return "<blank>";
    case kAudioCtx: return "<actx>";
    case kSrcMark: return "<src>";
    case kOcrMark: return "<ocr>";
    case kApeMark: return "<ape>";
    case kPivotLang: return "<l:pivot>";
    case kPromptSpeechImage: return "<p:speech+image>";
    case kPromptSpeech: return "<p:speech>";
    case kPromptImage: return "<p:image>";
    case kPromptText: return "<p:text>";
    case kPromptEnd: return "<p:end>";
    case kKeyA: return "<keyA>";
    case kKeyB: return "<keyB>";
    default: break;
  }
  if (is_lang_tag(id)) return "<l" + std::to_string(id - kLangBase + 1) + ">";
  if (id >= kContentBase) return "w" + std::to_string(id - kContentBase);
  return "<id" + std::to_string(id) + ">";
}

}  // namespace mmfuse::vocab

namespace mmfuse::model {

using json = nlohmann::json;

void TransformerConfig::validate(bool is_multimodal_encoder) const {
  if (vocab_size <= 0 || d_model <= 0 || n_layers <= 0 || n_heads <= 0 ||
      d_ff <= 0 || max_seq_len <= 0) {
    throw ConfigError("transformer config fields must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) +
                      " not divisible by n_heads " + std::to_string(n_heads));
  }
  if (is_multimodal_encoder && n_layers < 3) {
    throw ConfigError("multimodal encoder needs n_layers >= 3 so the "
                      "first/mid/last taps are distinct, got " +
                      std::to_string(n_layers));
  }
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
    throw ConfigError("dropout_rate must be in [0,1)");
  }
}

std::string TransformerConfig::to_json() const {
  json j;
  j["vocab_size"] = vocab_size;
  j["d_model"] = d_model;
  j["n_layers"] = n_layers;
  j["n_heads"] = n_heads;
  j["d_ff"] = d_ff;
  j["max_seq_len"] = max_seq_len;
  j["dropout_rate"] = dropout_rate;
  return j.dump();
}

TransformerConfig TransformerConfig::from_json(const std::string& s) {
  json j = json::parse(s);
  TransformerConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.dropout_rate = j.at("dropout_rate").get<double>();
  return c;
}

// ----- payload assembly -----

std::string ModalityPayload::combo() const {
  if (has_speech() && has_image()) return "speech+image";
  if (has_speech()) return "speech";
  if (has_image()) return "image";
  if (has_text()) return "text";
  return "none";
}

std::vector<int> mmfm_prompt(const ModalityPayload& p) {
  if (p.empty()) throw DataError("no modalities");
  int head;
  if (p.has_speech() && p.has_image()) {
    head = vocab::kPromptSpeechImage;
  } else if (p.has_speech()) {
    head = vocab::kPromptSpeech;
  } else if (p.has_image()) {
    head = vocab::kPromptImage;
  } else {
    head = vocab::kPromptText;
  }
  return {head, vocab::kPromptEnd};
}

std::vector<int> mmfm_input_tokens(const ModalityPayload& p) {
  std::vector<int> ids = mmfm_prompt(p);
  for (const auto& row : p.image) {
    ids.insert(ids.end(), row.begin(), row.end());
    ids.push_back(vocab::kRowSep);
  }
  ids.insert(ids.end(), p.speech.begin(), p.speech.end());
  ids.insert(ids.end(), p.text.begin(), p.text.end());
  return ids;
}

// ----- linear / lora -----

nc::Tensor Linear::forward(const nc::Tensor& x) const {
  nc::Tensor base = nc::matmul(x, w);
  if (!lora) return base;
  nc::Tensor delta = nc::matmul(nc::matmul(x, nc::transpose(lora->a)),
                                nc::transpose(lora->b));
  return nc::add(base, nc::scale(delta, lora->scaling));
}

// ----- transformer -----

static nc::Tensor sinusoidal_positions(int max_len, int d) {
  nc::Tensor pe = nc::Tensor::zeros(max_len, d);
  for (int pos = 0; pos < max_len; ++pos) {
    for (int i = 0; i < d; i += 2) {
      double angle = pos / std::pow(10000.0, static_cast<double>(i) / d);
      pe.at(pos, i) = std::sin(angle);
      if (i + 1 < d) pe.at(pos, i + 1) = std::cos(angle);
    }
  }
  return pe;
}

TransformerLM::TransformerLM(TransformerConfig cfg, Rng& rng, bool trainable)
    : cfg_(cfg) {
  cfg_.validate();
  const int D = cfg_.d_model, V = cfg_.vocab_size, F = cfg_.d_ff;
  const double ws = 0.08;  // init scale for projections
  tok_emb_ = nc::Tensor::randn(V, D, rng, 0.6, trainable);
  auto lin = [&](int din, int dout) {
    Linear l;
    l.w = nc::Tensor::randn(din, dout, rng, ws, trainable);
    return l;
  };
  blocks_.resize(cfg_.n_layers);
  for (auto& b : blocks_) {
    b.ln1_g = nc::Tensor::full(1, D, 1.0, trainable);
    b.ln1_b = nc::Tensor::zeros(1, D, trainable);
    b.ln2_g = nc::Tensor::full(1, D, 1.0, trainable);
    b.ln2_b = nc::Tensor::zeros(1, D, trainable);
    b.wq = lin(D, D);
    b.wk = lin(D, D);
    b.wv = lin(D, D);
    b.wo = lin(D, D);
    b.w1 = lin(D, F);
    b.w2 = lin(F, D);
  }
  lnf_g_ = nc::Tensor::full(1, D, 1.0, trainable);
  lnf_b_ = nc::Tensor::zeros(1, D, trainable);
  head_ = lin(D, V);
  pos_enc_ = sinusoidal_positions(cfg_.max_seq_len, D);
}

nc::Tensor TransformerLM::add_positions(const nc::Tensor& x, int offset) const {
  if (offset < 0 || offset + x.rows() > cfg_.max_seq_len) {
    throw LengthError("sequence [" + std::to_string(offset) + "," +
                      std::to_string(offset + x.rows()) +
                      ") exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));
  }
  return nc::add(x, nc::slice(pos_enc_, offset, offset + x.rows(), 0, cfg_.d_model));
}

nc::Tensor TransformerLM::embed(const std::vector<int>& ids, int pos_offset) const {
  return add_positions(nc::embedding_lookup(tok_emb_, ids), pos_offset);
}

nc::Tensor TransformerLM::block_forward(const Block& blk, const nc::Tensor& x) const {
  nc::Tensor a_in = nc::layer_norm(x, blk.ln1_g, blk.ln1_b);
  nc::Tensor att = nc::causal_attention(blk.wq.forward(a_in), blk.wk.forward(a_in),
                                        blk.wv.forward(a_in), cfg_.n_heads);
  nc::Tensor h = nc::add(x, blk.wo.forward(att));
  nc::Tensor f_in = nc::layer_norm(h, blk.ln2_g, blk.ln2_b);
  nc::Tensor f = blk.w2.forward(nc::gelu(blk.w1.forward(f_in)));
  return nc::add(h, f);
}

nc::Tensor TransformerLM::hidden_states(const nc::Tensor& x) const {
  if (x.rows() > cfg_.max_seq_len) {
    throw LengthError("sequence length " + std::to_string(x.rows()) +
                      " exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));
  }
  nc::Tensor h = x;
  for (const auto& b : blocks_) h = block_forward(b, h);
  return nc::layer_norm(h, lnf_g_, lnf_b_);
}

nc::Tensor TransformerLM::logits(const nc::Tensor& x) const {
  return head_.forward(hidden_states(x));
}

LayerTaps TransformerLM::tapped_forward(const nc::Tensor& x) const {
  if (x.rows() > cfg_.max_seq_len) {
    throw LengthError("sequence length " + std::to_string(x.rows()) +
                      " exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));
  }
  const int mid = cfg_.n_layers / 2;  // 1-based block index
  LayerTaps taps;
  nc::Tensor h = x;
  for (int i = 0; i < cfg_.n_layers; ++i) {
    h = block_forward(blocks_[i], h);
    int layer = i + 1;
    if (layer == 1) taps.first = h;
    if (layer == mid) taps.mid = h;
    if (layer == cfg_.n_layers) taps.last = h;
  }
  return taps;
}

nc::Tensor TransformerLM::loss(const nc::Tensor& input_embeddings,
                               const std::vector<int>& labels,
                               const std::vector<bool>& mask) const {
  return nc::cross_entropy_masked(logits(input_embeddings), labels, mask);
}

std::vector<int> TransformerLM::generate(const nc::Tensor& prefix_embeddings,
                                         const std::vector<int>& committed,
                                         int max_new, int* decode_steps,
                                         int stop_eos_count) const {
  std::vector<int> out = committed;
  const int prefix_len = prefix_embeddings.rows();
  int steps = 0;
  int eos_seen = 0;
  for (int n = 0; n < max_new; ++n) {
    if (prefix_len + static_cast<int>(out.size()) >= cfg_.max_seq_len) break;
    nc::Tensor ctx = prefix_embeddings;
    if (!out.empty()) ctx = nc::concat_rows(ctx, embed(out, prefix_len));
    nc::Tensor lg = logits(ctx);
    ++steps;
    const int last = lg.rows() - 1;
    int best = 0;
    double best_v = lg.at(last, 0);
    for (int v = 1; v < cfg_.vocab_size; ++v) {
      if (lg.at(last, v) > best_v) {
        best_v = lg.at(last, v);
        best = v;
      }
    }
    out.push_back(best);
    if (best == vocab::kEos && ++eos_seen >= stop_eos_count) break;
  }
  if (decode_steps) *decode_steps += steps;
  return out;
}

void TransformerLM::apply_lora(const LoraSpec& spec) {
  static const std::vector<std::string> known = {"wq", "wk", "wv", "wo",
                                                 "w1", "w2", "head"};
  for (const auto& t : spec.targets) {
    if (std::find(known.begin(), known.end(), t) == known.end()) {
      throw ConfigError("unknown lora target '" + t + "'");
    }
  }
  if (spec.rank < 0) throw ConfigError("lora rank must be >= 0");
  lora_applied_ = true;
  if (spec.rank == 0) return;  // zero trainable LM params
  Rng rng(mix64(0x10aa, static_cast<uint64_t>(spec.rank)));
  auto attach = [&](Linear& l) {
    LoraAdapter ad;
    const int din = l.w.rows(), dout = l.w.cols();
    ad.a = nc::Tensor::randn(spec.rank, din, rng, 0.02, true);
    ad.b = nc::Tensor::zeros(dout, spec.rank, true);
    ad.scaling = spec.alpha / spec.rank;
    l.lora = std::move(ad);
  };
  auto has = [&](const char* t) {
    return std::find(spec.targets.begin(), spec.targets.end(), t) !=
           spec.targets.end();
  };
  for (auto& b : blocks_) {
    if (has("wq")) attach(b.wq);
    if (has("wk")) attach(b.wk);
    if (has("wv")) attach(b.wv);
    if (has("wo")) attach(b.wo);
    if (has("w1")) attach(b.w1);
    if (has("w2")) attach(b.w2);
  }
  if (has("head")) attach(head_);
}

long TransformerLM::lora_parameter_count() const {
  long total = 0;
  auto count = [&](const Linear& l) {
    if (l.lora) {
      total += static_cast<long>(l.lora->a.rows()) * (l.w.rows() + l.w.cols());
    }
  };
  for (const auto& b : blocks_) {
    count(b.wq);
    count(b.wk);
    count(b.wv);
    count(b.wo);
    count(b.w1);
    count(b.w2);
  }
  count(head_);
  return total;
}

void TransformerLM::set_trainable_all(bool trainable) {
  for (auto& [name, t] : named_parameters()) {
    // lora params keep their own flag; base params follow the switch
    if (name.find("lora_") == std::string::npos) {
      nc::Tensor(t).set_requires_grad(trainable);
    }
  }
}

std::vector<std::pair<std::string, nc::Tensor>> TransformerLM::named_parameters()
    const {
  std::vector<std::pair<std::string, nc::Tensor>> out;
  out.emplace_back("tok_emb", tok_emb_);
  auto add_linear = [&](const std::string& base, const Linear& l) {
    out.emplace_back(base + ".w", l.w);
    if (l.lora) {
      out.emplace_back(base + ".lora_a", l.lora->a);
      out.emplace_back(base + ".lora_b", l.lora->b);
    }
  };
  for (size_t i = 0; i < blocks_.size(); ++i) {
    const auto& b = blocks_[i];
    std::string p = "layers." + std::to_string(i) + ".";
    out.emplace_back(p + "ln1.g", b.ln1_g);
    out.emplace_back(p + "ln1.b", b.ln1_b);
    add_linear(p + "attn.wq", b.wq);
    add_linear(p + "attn.wk", b.wk);
    add_linear(p + "attn.wv", b.wv);
    add_linear(p + "attn.wo", b.wo);
    out.emplace_back(p + "ln2.g", b.ln2_g);
    out.emplace_back(p + "ln2.b", b.ln2_b);
    add_linear(p + "mlp.w1", b.w1);
    add_linear(p + "mlp.w2", b.w2);
  }
  out.emplace_back("lnf.g", lnf_g_);
  out.emplace_back("lnf.b", lnf_b_);
  add_linear("head", head_);
  return out;
}

uint64_t TransformerLM::checksum(bool frozen_only) const {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, t] : named_parameters()) {
    if (frozen_only && t.requires_grad()) continue;
    h ^= fnv1a64(name.data(), name.size());
    h ^= fnv1a64(t.data().data(), t.data().size() * sizeof(double));
    h *= 0x100000001b3ULL;
  }
  return h;
}

void TransformerLM::load_tensors(const std::map<std::string, nc::Tensor>& named,
                                 const std::string& prefix) {
  for (auto& [name, t] : named_parameters()) {
    auto it = named.find(prefix + name);
    if (it == named.end()) {
      throw IoError("checkpoint missing tensor '" + prefix + name + "'");
    }
    const nc::Tensor& src = it->second;
    if (src.rows() != t.rows() || src.cols() != t.cols()) {
      throw IoError("checkpoint tensor '" + prefix + name + "' has shape [" +
                    std::to_string(src.rows()) + "x" + std::to_string(src.cols()) +
                    "], expected [" + std::to_string(t.rows()) + "x" +
                    std::to_string(t.cols()) + "]");
    }
    nc::Tensor dst(t);
    dst.data() = src.data();
  }
}

// ----- multimodal encoder -----

MultimodalEncoder::MultimodalEncoder(TransformerConfig cfg, Rng& rng)
    : lm_((cfg.validate(true), cfg), rng, /*trainable=*/false) {}

LayerTaps MultimodalEncoder::forward(const ModalityPayload& payload) const {
  std::vector<int> ids = mmfm_input_tokens(payload);
  if (static_cast<int>(ids.size()) > lm_.config().max_seq_len) {
    throw LengthError("multimodal input length " + std::to_string(ids.size()) +
                      " exceeds max_seq_len " +
                      std::to_string(lm_.config().max_seq_len));
  }
  return lm_.tapped_forward(lm_.embed(ids));
}

// ----- container -----

namespace {

void put_u32(std::string& s, uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& s, uint64_t v) {
  for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
  const std::string& s;
  size_t pos = 0;
  void need(size_t n) const {
    if (pos + n > s.size()) throw IoError("checkpoint truncated");
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<uint32_t>(static_cast<unsigned char>(s[pos + i])) << (8 * i);
    }
    pos += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<uint64_t>(static_cast<unsigned char>(s[pos + i])) << (8 * i);
    }
    pos += 8;
    return v;
  }
  std::string bytes(size_t n) {
    need(n);
    std::string out = s.substr(pos, n);
    pos += n;
    return out;
  }
};

constexpr char kMagic[4] = {'M', 'M', 'F', 'Z'};
constexpr uint32_t kVersion = 1;

}  // namespace

void Container::save(const std::string& path) const {
  std::string body;
  body.append(kMagic, 4);
  put_u32(body, kVersion);
  put_u32(body, static_cast<uint32_t>(strings.size()));
  for (const auto& [k, v] : strings) {
    put_u32(body, static_cast<uint32_t>(k.size()));
    body += k;
    put_u64(body, v.size());
    body += v;
  }
  put_u32(body, static_cast<uint32_t>(tensors.size()));
  for (const auto& [k, t] : tensors) {
    put_u32(body, static_cast<uint32_t>(k.size()));
    body += k;
    put_u32(body, static_cast<uint32_t>(t.rows()));
    put_u32(body, static_cast<uint32_t>(t.cols()));
    size_t nbytes = t.data().size() * sizeof(double);
    body.append(reinterpret_cast<const char*>(t.data().data()), nbytes);
  }
  put_u64(body, fnv1a64(body.data(), body.size()));
  write_file(path, body);
}

Container Container::load(const std::string& path) {
  std::string body = read_file(path);
  if (body.size() < 16) throw IoError("checkpoint too small: " + path);
  uint64_t stored = 0;
  for (int i = 0; i < 8; ++i) {
    stored |= static_cast<uint64_t>(static_cast<unsigned char>(body[body.size() - 8 + i]))
              << (8 * i);
  }
  if (fnv1a64(body.data(), body.size() - 8) != stored) {
    throw IoError("checkpoint checksum mismatch (corrupted file): " + path);
  }
  Reader r{body};
  if (r.bytes(4) != std::string(kMagic, 4)) {
    throw IoError("not a checkpoint file: " + path);
  }
  uint32_t version = r.u32();
  if (version != kVersion) {
    throw IoError("checkpoint version mismatch: file has " +
                  std::to_string(version) + ", expected " +
                  std::to_string(kVersion));
  }
  Container c;
  uint32_t ns = r.u32();
  for (uint32_t i = 0; i < ns; ++i) {
    std::string k = r.bytes(r.u32());
    uint64_t len = r.u64();
    c.strings[k] = r.bytes(len);
  }
  uint32_t nt = r.u32();
  for (uint32_t i = 0; i < nt; ++i) {
    std::string k = r.bytes(r.u32());
    int rows = static_cast<int>(r.u32());
    int cols = static_cast<int>(r.u32());
    size_t nbytes = static_cast<size_t>(rows) * cols * sizeof(double);
    std::string raw = r.bytes(nbytes);
    std::vector<double> vals(static_cast<size_t>(rows) * cols);
    std::memcpy(vals.data(), raw.data(), nbytes);
    c.tensors[k] = nc::Tensor::from(std::move(vals), rows, cols);
  }
  return c;
}

}  // namespace mmfuse::model
