#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "spcm/autograd.hpp"
#include "spcm/container.hpp"
#include "spcm/dam.hpp"
#include "spcm/layers.hpp"

namespace spcm {

// ---- modality encoder: two shape-preserving convs, 1 -> 16 -> 32 channels ----

struct EncoderParams {
  Parameter* k1 = nullptr;  // [16, 1, 3, 3]
  Parameter* b1 = nullptr;
  Parameter* k2 = nullptr;  // [32, 16, 3, 3]
  Parameter* b2 = nullptr;

  static EncoderParams build(ParamStore& store, const std::string& prefix, Rng& rng) {
    EncoderParams e;
    e.k1 = &store.glorot(prefix + "/k1", {16, 1, 3, 3}, rng);
    e.b1 = &store.zeros(prefix + "/b1", {16});
    e.k2 = &store.glorot(prefix + "/k2", {32, 16, 3, 3}, rng);
    e.b2 = &store.zeros(prefix + "/b2", {32});
    return e;
  }

  std::vector<Parameter*> group() const { return {k1, b1, k2, b2}; }
};

inline Value encode(Tape& tape, const EncoderParams& e, Value x) {
  Value h = tape.relu(tape.conv2d(x, tape.param(*e.k1), tape.param(*e.b1), 1));
  return tape.relu(tape.conv2d(h, tape.param(*e.k2), tape.param(*e.b2), 1));
}

// ---- attentive convolutional LSTM ----

struct AlstmParams {
  // input convs [32, Cin, 3, 3], recurrent convs [32, 32, 3, 3], biases [32]
  Parameter *wi, *ui, *bi;
  Parameter *wf, *uf, *bf;
  Parameter *wo, *uo, *bo;
  Parameter *wc, *uc, *bc;
  // attention: q = W_q * tanh(W_a*s + U_a*h_prev + b_a), no bias on W_q
  Parameter *wa, *ua, *ba, *wq;

  static AlstmParams build(ParamStore& store, const std::string& prefix, std::size_t in_ch,
                           Rng& rng) {
    AlstmParams a;
    auto gate = [&](const char* g, Parameter*& w, Parameter*& u, Parameter*& b, double bias) {
      w = &store.glorot(strf("%s/w%s", prefix.c_str(), g), {32, in_ch, 3, 3}, rng);
      u = &store.glorot(strf("%s/u%s", prefix.c_str(), g), {32, 32, 3, 3}, rng);
      b = &store.constant(strf("%s/b%s", prefix.c_str(), g), {32}, bias);
    };
    gate("i", a.wi, a.ui, a.bi, 0.0);
    gate("f", a.wf, a.uf, a.bf, 1.0);  // open forget gate at init
    gate("o", a.wo, a.uo, a.bo, 0.0);
    gate("c", a.wc, a.uc, a.bc, 0.0);
    a.wa = &store.glorot(prefix + "/wa", {32, in_ch, 3, 3}, rng);
    a.ua = &store.glorot(prefix + "/ua", {32, 32, 3, 3}, rng);
    a.ba = &store.zeros(prefix + "/ba", {32});
    a.wq = &store.glorot(prefix + "/wq", {32, 32, 3, 3}, rng);
    return a;
  }

  std::vector<Parameter*> group() const {
    return {wi, ui, bi, wf, uf, bf, wo, uo, bo, wc, uc, bc, wa, ua, ba, wq};
  }
};

struct AlstmState {
  Value h, c;
  std::optional<Value> q;  // absent before the first step
};

inline AlstmState alstm_init(Tape& tape, std::size_t H, std::size_t W) {
  AlstmState s;
  s.h = tape.leaf(Tensor({32, H, W}));
  s.c = tape.leaf(Tensor({32, H, W}));
  return s;
}

// s = spatial_softmax(q_prev) applied to the raw input; channel counts may
// differ by an integer factor (tiled attention)
inline Value alstm_attend(Tape& tape, Value q_prev, Value s_raw) {
  return tape.attend_mul(s_raw, tape.spatial_softmax(q_prev));
}

inline AlstmState alstm_step(Tape& tape, const AlstmParams& p, Value s, const AlstmState& prev) {
  auto pre = [&](Parameter* w, Parameter* u, Parameter* b) {
    return tape.add(tape.conv2d(s, tape.param(*w), tape.param(*b), 1),
                    tape.conv2d(prev.h, tape.param(*u), std::nullopt, 1));
  };
  Value i = tape.sigmoid(pre(p.wi, p.ui, p.bi));
  Value f = tape.sigmoid(pre(p.wf, p.uf, p.bf));
  Value o = tape.sigmoid(pre(p.wo, p.uo, p.bo));
  Value g = tape.tanh_(pre(p.wc, p.uc, p.bc));
  AlstmState next;
  next.c = tape.add(tape.mul(f, prev.c), tape.mul(i, g));
  next.h = tape.mul(o, tape.tanh_(next.c));
  next.q = tape.conv2d(tape.tanh_(pre(p.wa, p.ua, p.ba)), tape.param(*p.wq), std::nullopt, 1);
  return next;
}

// ---- gated multimodal unit ----

struct GmuParams {
  // per input k: W_j [32, in_ch_k, 1, 1] on the input, W_d [32, sum in_ch, 1, 1]
  // on the concatenation
  std::vector<Parameter*> wj, bj, wd, bd;

  static GmuParams build(ParamStore& store, const std::string& prefix,
                         const std::vector<std::size_t>& in_channels, Rng& rng) {
    if (in_channels.empty()) throw ConfigError("gmu: no inputs");
    std::size_t total = 0;
    for (std::size_t c : in_channels) total += c;
    GmuParams g;
    for (std::size_t k = 0; k < in_channels.size(); ++k) {
      g.wj.push_back(&store.glorot(strf("%s/%zu/wj", prefix.c_str(), k),
                                   {32, in_channels[k], 1, 1}, rng));
      g.bj.push_back(&store.zeros(strf("%s/%zu/bj", prefix.c_str(), k), {32}));
      g.wd.push_back(&store.glorot(strf("%s/%zu/wd", prefix.c_str(), k), {32, total, 1, 1},
                                   rng));
      g.bd.push_back(&store.zeros(strf("%s/%zu/bd", prefix.c_str(), k), {32}));
    }
    return g;
  }

  std::vector<Parameter*> group() const {
    std::vector<Parameter*> g;
    for (std::size_t k = 0; k < wj.size(); ++k) {
      g.push_back(wj[k]);
      g.push_back(bj[k]);
      g.push_back(wd[k]);
      g.push_back(bd[k]);
    }
    return g;
  }
};

inline Value gmu_fuse(Tape& tape, const GmuParams& p, const std::vector<Value>& inputs) {
  if (inputs.empty()) throw ShapeError("gmu_fuse: empty input list");
  if (inputs.size() != p.wj.size())
    throw ShapeError(strf("gmu_fuse: %zu inputs for %zu gates", inputs.size(), p.wj.size()));
  Value cat = inputs.size() == 1 ? inputs[0] : tape.concat_ch(inputs);
  std::optional<Value> out;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Value j = tape.tanh_(tape.conv2d(inputs[k], tape.param(*p.wj[k]), tape.param(*p.bj[k]), 0));
    Value d = tape.sigmoid(tape.conv2d(cat, tape.param(*p.wd[k]), tape.param(*p.bd[k]), 0));
    Value term = tape.mul(d, j);
    out = out ? tape.add(*out, term) : term;
  }
  return *out;
}

// ---- full model ----

struct ModelConfig {
  std::string variant = "argmu";  // argmu | largmu
  std::vector<std::string> modalities;  // cue names; "history" appended by callers
  std::size_t context = 0;              // 0 -> variant default (argmu 8, largmu 10)
  std::size_t height = 24, width = 24;
  std::size_t gamma = 4;
  bool largmu_group_split = false;  // split the hidden state into K gated groups
  std::uint64_t init_seed = 1;

  std::size_t effective_context() const {
    if (context > 0) return context;
    return variant == "largmu" ? 10 : 8;
  }

  void validate() const {
    if (variant != "argmu" && variant != "largmu")
      throw ConfigError(strf("model: unknown variant '%s'", variant.c_str()));
    if (modalities.empty()) throw ConfigError("model: no modalities");
    std::set<std::string> uniq(modalities.begin(), modalities.end());
    if (uniq.size() != modalities.size()) throw ConfigError("model: duplicate modality");
    if (height < 4 || width < 4 || height % 2 != 0 || width % 2 != 0)
      throw ConfigError(strf("model: resolution %zux%zu must be even and >= 4", width, height));
    if (gamma == 0) throw ConfigError("model: gamma must be positive");
    if (largmu_group_split && variant == "largmu" && 32 % modalities.size() != 0)
      throw ConfigError("model: group split needs the modality count to divide 32");
  }
};

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  return {{"variant", c.variant},       {"modalities", c.modalities},
          {"context", c.context},       {"height", c.height},
          {"width", c.width},           {"gamma", c.gamma},
          {"largmu_group_split", c.largmu_group_split},
          {"init_seed", c.init_seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.variant = j.at("variant").get<std::string>();
  c.modalities = j.at("modalities").get<std::vector<std::string>>();
  c.context = j.at("context").get<std::size_t>();
  c.height = j.at("height").get<std::size_t>();
  c.width = j.at("width").get<std::size_t>();
  c.gamma = j.at("gamma").get<std::size_t>();
  c.largmu_group_split = j.at("largmu_group_split").get<bool>();
  c.init_seed = j.at("init_seed").get<std::uint64_t>();
  c.validate();
  return c;
}

struct ForwardResult {
  Value pred;       // [1,H,W], elementwise sigmoid
  Value pred_mass;  // mass-normalized copy for divergence losses and metrics
  std::optional<Value> dam_loss;  // unweighted; present when targets supplied
};

class ScanpathModel {
 public:
  ModelConfig cfg;

  static ScanpathModel build(const ModelConfig& cfg_in) {
    ModelConfig cfg = cfg_in;
    cfg.validate();
    cfg.context = cfg.effective_context();
    ScanpathModel m;
    m.cfg = cfg;
    Rng rng(cfg.init_seed);
    const std::size_t K = cfg.modalities.size();
    m.dam_ = Dam::build(m.store_, K, cfg.context, cfg.gamma, rng);
    for (const std::string& mod : cfg.modalities)
      m.encoders_.push_back(EncoderParams::build(m.store_, "enc/" + mod, rng));
    if (cfg.variant == "argmu") {
      for (const std::string& mod : cfg.modalities)
        m.alstms_.push_back(AlstmParams::build(m.store_, "alstm/" + mod, 32, rng));
      m.gmu_ = GmuParams::build(m.store_, "gmu", std::vector<std::size_t>(K, 32), rng);
    } else {
      m.alstms_.push_back(AlstmParams::build(m.store_, "alstm/all", 32 * K, rng));
      if (cfg.largmu_group_split)
        m.gmu_ = GmuParams::build(m.store_, "gmu", std::vector<std::size_t>(K, 32 / K), rng);
      else
        m.gmu_ = GmuParams::build(m.store_, "gmu", {32}, rng);
    }
    m.head_k_ = &m.store_.glorot("head/k", {1, 32, 1, 1}, rng);
    m.head_b_ = &m.store_.zeros("head/b", {1});
    return m;
  }

  // inputs: per modality, context()-many [1,H,W] maps, oldest first.
  // density_targets: optional context()-many [1,H,W] mass-1 maps for the
  // trainable stream.
  ForwardResult forward(Tape& tape, const std::vector<std::vector<Tensor>>& inputs,
                        const std::vector<Tensor>* density_targets = nullptr) {
    const std::size_t K = cfg.modalities.size(), T = cfg.context;
    if (inputs.size() != K)
      throw ShapeError(strf("model: %zu input streams for %zu modalities", inputs.size(), K));
    for (const auto& seq : inputs) {
      if (seq.size() != T)
        throw ShapeError(strf("model: stream has %zu steps, context is %zu", seq.size(), T));
      for (const Tensor& m : seq)
        if (m.rank() != 3 || m.shape[0] != 1 || m.shape[1] != cfg.height ||
            m.shape[2] != cfg.width)
          throw ShapeError(strf("model: input map must be [1,%zu,%zu]", cfg.height, cfg.width));
    }

    // stack modalities channelwise per timestep for the attention module
    std::vector<Tensor> stacked;
    stacked.reserve(T);
    const std::size_t hw = cfg.height * cfg.width;
    for (std::size_t t = 0; t < T; ++t) {
      Tensor r({K, cfg.height, cfg.width});
      for (std::size_t k = 0; k < K; ++k)
        std::copy(inputs[k][t].data.begin(), inputs[k][t].data.end(),
                  r.data.begin() + k * hw);
      stacked.push_back(std::move(r));
    }
    const std::vector<Tensor> direct = dam_direct(dam_, stacked);

    // per-modality encoded sequences from the rescaled constant maps
    std::vector<std::vector<Value>> enc(K);
    for (std::size_t k = 0; k < K; ++k) {
      enc[k].reserve(T);
      for (std::size_t t = 0; t < T; ++t) {
        Tensor ch({1, cfg.height, cfg.width});
        std::copy(direct[t].data.begin() + k * hw, direct[t].data.begin() + (k + 1) * hw,
                  ch.data.begin());
        enc[k].push_back(encode(tape, encoders_[k], tape.leaf(std::move(ch))));
      }
    }

    Value fused = cfg.variant == "argmu" ? forward_argmu(tape, enc)
                                         : forward_largmu(tape, enc);
    ForwardResult out{
        tape.sigmoid(tape.conv2d(fused, tape.param(*head_k_), tape.param(*head_b_), 0)),
        Value{}, std::nullopt};
    out.pred_mass = tape.normalize_sum(out.pred);
    if (density_targets)
      out.dam_loss = dam_inverted_loss(tape, dam_, stacked, *density_targets);
    return out;
  }

  std::size_t context() const { return cfg.context; }
  const Dam& dam() const { return dam_; }
  const std::vector<EncoderParams>& encoders() const { return encoders_; }
  const std::vector<AlstmParams>& alstms() const { return alstms_; }
  const GmuParams& gmu() const { return gmu_; }

  std::vector<Parameter*> all_params() { return store_.all(); }
  std::vector<Parameter*> dam_group() const { return dam_.group(); }

  std::vector<Parameter*> integrator_group() {
    std::vector<Parameter*> g;
    for (const auto& e : encoders_)
      for (Parameter* p : e.group()) g.push_back(p);
    for (const auto& a : alstms_)
      for (Parameter* p : a.group()) g.push_back(p);
    for (Parameter* p : gmu_.group()) g.push_back(p);
    g.push_back(head_k_);
    g.push_back(head_b_);
    return g;
  }

  std::size_t parameter_count() const { return store_.total_scalars(); }

  // ---- checkpoints: <prefix>.json header + <prefix>.spcm weights ----

  void save_checkpoint(const std::filesystem::path& prefix,
                       const nlohmann::json& meta = nlohmann::json::object()) {
    std::vector<ContainerEntry> entries;
    nlohmann::json names = nlohmann::json::array();
    for (Parameter* p : all_params()) {
      entries.push_back({p->name, p->value});
      names.push_back(p->name);
    }
    save_container(with_ext(prefix, ".spcm"), entries);
    nlohmann::json j;
    j["format"] = "spcm-checkpoint";
    j["version"] = 1;
    j["config"] = model_config_to_json(cfg);
    j["params"] = names;
    j["meta"] = meta;
    std::ofstream f(with_ext(prefix, ".json"), std::ios::trunc);
    if (!f) throw IoError(strf("%s: cannot open for writing", prefix.string().c_str()));
    f << j.dump(2) << "\n";
  }

  static ScanpathModel load_checkpoint(const std::filesystem::path& prefix,
                                       nlohmann::json* meta_out = nullptr) {
    std::ifstream f(with_ext(prefix, ".json"));
    if (!f) throw IoError(strf("%s: cannot open", with_ext(prefix, ".json").string().c_str()));
    nlohmann::json j;
    try {
      f >> j;
    } catch (const nlohmann::json::exception& e) {
      throw IoError(strf("%s: %s", prefix.string().c_str(), e.what()));
    }
    if (j.value("format", "") != std::string("spcm-checkpoint"))
      throw IoError(strf("%s: not a checkpoint header", prefix.string().c_str()));
    if (j.value("version", 0) != 1)
      throw IoError(strf("%s: unsupported checkpoint version", prefix.string().c_str()));
    ScanpathModel m = build(model_config_from_json(j.at("config")));
    auto weights = load_container(with_ext(prefix, ".spcm"));
    const auto expected = j.at("params").get<std::vector<std::string>>();
    for (const std::string& name : expected) {
      Parameter* p = m.store_.find(name);
      if (!p) throw DataError(strf("checkpoint: unknown parameter '%s'", name.c_str()));
      const Tensor& w = container_find(weights, name);
      if (w.shape != p->value.shape)
        throw DataError(strf("checkpoint: parameter '%s' shape mismatch", name.c_str()));
      p->value = w;
    }
    if (m.store_.size() != expected.size())
      throw DataError(strf("checkpoint: %zu parameters listed, model has %zu", expected.size(),
                           m.store_.size()));
    if (meta_out) *meta_out = j.value("meta", nlohmann::json::object());
    return m;
  }

  // round every weight through storage precision, in place
  void round_to_storage() {
    for (Parameter* p : all_params())
      for (double& v : p->value.data) v = double(float(v));
  }

 private:
  ParamStore store_;
  Dam dam_;
  std::vector<EncoderParams> encoders_;
  std::vector<AlstmParams> alstms_;
  GmuParams gmu_;
  Parameter* head_k_ = nullptr;
  Parameter* head_b_ = nullptr;

  static std::filesystem::path with_ext(std::filesystem::path p, const char* ext) {
    p += ext;
    return p;
  }

  Value run_alstm(Tape& tape, const AlstmParams& params, const std::vector<Value>& seq) {
    AlstmState state = alstm_init(tape, cfg.height, cfg.width);
    for (std::size_t t = 0; t < seq.size(); ++t) {
      Value s = t == 0 ? seq[t] : alstm_attend(tape, *state.q, seq[t]);
      state = alstm_step(tape, params, s, state);
    }
    return state.h;
  }

  Value forward_argmu(Tape& tape, const std::vector<std::vector<Value>>& enc) {
    std::vector<Value> hidden;
    for (std::size_t k = 0; k < enc.size(); ++k)
      hidden.push_back(run_alstm(tape, alstms_[k], enc[k]));
    return gmu_fuse(tape, gmu_, hidden);
  }

  Value forward_largmu(Tape& tape, const std::vector<std::vector<Value>>& enc) {
    const std::size_t T = cfg.context, K = enc.size();
    std::vector<Value> seq;
    seq.reserve(T);
    for (std::size_t t = 0; t < T; ++t) {
      std::vector<Value> per_mod;
      per_mod.reserve(K);
      for (std::size_t k = 0; k < K; ++k) per_mod.push_back(enc[k][t]);
      seq.push_back(K == 1 ? per_mod[0] : tape.concat_ch(per_mod));
    }
    Value h = run_alstm(tape, alstms_[0], seq);
    if (cfg.largmu_group_split) {
      const std::size_t w = 32 / K;
      std::vector<Value> groups;
      for (std::size_t k = 0; k < K; ++k)
        groups.push_back(tape.slice_ch(h, k * w, (k + 1) * w));
      return gmu_fuse(tape, gmu_, groups);
    }
    return gmu_fuse(tape, gmu_, {h});
  }
};

}  // namespace spcm
