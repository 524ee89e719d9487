#include "tokman/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace tokman {

namespace {

const char* kSlotNames[kNumSlots] = {
    "embedding", "enc_w", "enc_u", "enc_b", "dec_w", "dec_u", "dec_b",
    "att_w", "cmb_w", "cmb_b", "idx_emb", "tok_w", "tok_b", "man_w", "man_b",
    "critic_w", "critic_b",
    "d_embedding", "d_enc_w", "d_enc_u", "d_enc_b", "d_dec_w", "d_dec_u",
    "d_dec_b", "d_att_w", "d_cmb_w", "d_cmb_b", "d_out_w", "d_out_b",
};

struct Shape {
  int rows, cols;
};

Shape slot_shape(const ModelConfig& c, Slot s) {
  const int V = c.vocab_size, de = c.d_emb, dh = c.d_hid, di = c.d_idx;
  switch (s) {
    case Slot::kEmb: return {V, de};
    case Slot::kEncW: return {4 * dh, de};
    case Slot::kEncU: return {4 * dh, dh};
    case Slot::kEncB: return {1, 4 * dh};
    case Slot::kDecW: return {4 * dh, de};
    case Slot::kDecU: return {4 * dh, dh};
    case Slot::kDecB: return {1, 4 * dh};
    case Slot::kAttW: return {dh, dh};
    case Slot::kCmbW: return {dh, 2 * dh + di};
    case Slot::kCmbB: return {1, dh};
    case Slot::kIdxEmb: return {c.idx_clamp + 1, di};
    case Slot::kTokW: return {V, dh};
    case Slot::kTokB: return {1, V};
    case Slot::kManW: return {4, dh};
    case Slot::kManB: return {1, 4};
    case Slot::kCritW: return {1, dh};
    case Slot::kCritB: return {1, 1};
    case Slot::kDEmb: return {V, de};
    case Slot::kDEncW: return {4 * dh, de};
    case Slot::kDEncU: return {4 * dh, dh};
    case Slot::kDEncB: return {1, 4 * dh};
    case Slot::kDDecW: return {4 * dh, de};
    case Slot::kDDecU: return {4 * dh, dh};
    case Slot::kDDecB: return {1, 4 * dh};
    case Slot::kDAttW: return {dh, dh};
    case Slot::kDCmbW: return {dh, 2 * dh};
    case Slot::kDCmbB: return {1, dh};
    case Slot::kDOutW: return {1, dh};
    case Slot::kDOutB: return {1, 1};
    default: throw std::logic_error("slot_shape: bad slot");
  }
}

bool is_bias(Slot s) {
  switch (s) {
    case Slot::kEncB: case Slot::kDecB: case Slot::kCmbB: case Slot::kTokB:
    case Slot::kManB: case Slot::kCritB: case Slot::kDEncB: case Slot::kDDecB:
    case Slot::kDCmbB: case Slot::kDOutB:
      return true;
    default:
      return false;
  }
}

bool is_lstm_bias(Slot s) {
  return s == Slot::kEncB || s == Slot::kDecB || s == Slot::kDEncB ||
         s == Slot::kDDecB;
}

}  // namespace

const char* slot_name(Slot s) { return kSlotNames[static_cast<int>(s)]; }

Model::Model(const ModelConfig& cfg) : cfg_(cfg) {
  if (cfg.vocab_size < 2) throw std::invalid_argument("ModelConfig: vocab_size < 2");
  if (cfg.eos_id < 0 || cfg.eos_id >= cfg.vocab_size)
    throw std::invalid_argument("ModelConfig: eos_id out of range");
  if (cfg.bos_id < 0 || cfg.bos_id >= cfg.vocab_size)
    throw std::invalid_argument("ModelConfig: bos_id out of range");
  for (int i = 0; i < kNumSlots; ++i) {
    Shape sh = slot_shape(cfg, static_cast<Slot>(i));
    Tensor& t = t_[i];
    t.rows = sh.rows;
    t.cols = sh.cols;
    t.v.assign(static_cast<size_t>(sh.rows) * sh.cols, 0.0);
    t.g.assign(t.v.size(), 0.0);
  }
}

Model Model::random_init(const ModelConfig& cfg, Rng& rng) {
  Model m(cfg);
  const double scale = 0.1;
  for (int i = 0; i < kNumSlots; ++i) {
    Slot s = static_cast<Slot>(i);
    Tensor& t = m.t_[i];
    if (is_bias(s)) {
      if (is_lstm_bias(s)) {
        // forget-gate block starts one hidden-width in (gate order i,f,g,o)
        int dh = cfg.d_hid;
        for (int j = dh; j < 2 * dh; ++j) t.v[j] = 1.0;
      }
      continue;
    }
    for (double& x : t.v) x = rng.normal(0.0, scale);
  }
  return m;
}

ParamView Model::view(Slot s) {
  Tensor& t = tensor(s);
  return {t.v.data(), t.g.data(), t.size()};
}

ParamView Model::row_view(Slot s, int row) {
  Tensor& t = tensor(s);
  if (row < 0 || row >= t.rows) throw std::out_of_range("row_view: bad row");
  return {t.v.data() + static_cast<size_t>(row) * t.cols,
          t.g.data() + static_cast<size_t>(row) * t.cols, t.cols};
}

void Model::zero_grads() {
  for (Tensor& t : t_) std::fill(t.g.begin(), t.g.end(), 0.0);
}

size_t Model::parameter_count() const {
  size_t n = 0;
  for (const Tensor& t : t_) n += t.v.size();
  return n;
}

bool Model::all_finite() const {
  for (const Tensor& t : t_)
    for (double x : t.v)
      if (!std::isfinite(x)) return false;
  return true;
}

std::vector<Slot> Model::generator_slots() {
  std::vector<Slot> v;
  for (int i = 0; i <= static_cast<int>(Slot::kCritB); ++i)
    v.push_back(static_cast<Slot>(i));
  return v;
}

std::vector<Slot> Model::discriminator_slots() {
  std::vector<Slot> v;
  for (int i = static_cast<int>(Slot::kDEmb); i < kNumSlots; ++i)
    v.push_back(static_cast<Slot>(i));
  return v;
}

std::vector<Slot> Model::critic_slots() { return {Slot::kCritW, Slot::kCritB}; }
std::vector<Slot> Model::token_head_slots() { return {Slot::kTokW, Slot::kTokB}; }
std::vector<Slot> Model::manipulator_head_slots() { return {Slot::kManW, Slot::kManB}; }

std::vector<Slot> Model::trunk_slots() {
  return {Slot::kEmb,  Slot::kEncW, Slot::kEncU, Slot::kEncB, Slot::kDecW,
          Slot::kDecU, Slot::kDecB, Slot::kAttW, Slot::kCmbW, Slot::kCmbB,
          Slot::kIdxEmb};
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

namespace {

struct StackSlots {
  Slot emb, enc_w, enc_u, enc_b, dec_w, dec_u, dec_b, att_w, cmb_w, cmb_b;
};

StackSlots stack_slots(Net net) {
  if (net == Net::kGenerator)
    return {Slot::kEmb, Slot::kEncW, Slot::kEncU, Slot::kEncB, Slot::kDecW,
            Slot::kDecU, Slot::kDecB, Slot::kAttW, Slot::kCmbW, Slot::kCmbB};
  return {Slot::kDEmb, Slot::kDEncW, Slot::kDEncU, Slot::kDEncB, Slot::kDDecW,
          Slot::kDDecU, Slot::kDDecB, Slot::kDAttW, Slot::kDCmbW, Slot::kDCmbB};
}

LstmState lstm_zero_state(Tape& tape, int d_hid) {
  std::vector<double> z(d_hid, 0.0);
  Tape::Id h = tape.constant(z);
  Tape::Id c = tape.constant(z);
  return {h, c};
}

LstmState lstm_step(Tape& tape, Model& m, Slot w, Slot u, Slot b, Tape::Id input,
                    const LstmState& prev) {
  const int dh = m.config().d_hid;
  Tape::Id wx = tape.matvec(tape.param(m.view(w)), 4 * dh, m.tensor(w).cols, input);
  Tape::Id uh = tape.matvec(tape.param(m.view(u)), 4 * dh, dh, prev.h);
  Tape::Id z = tape.add(tape.add(wx, uh), tape.param(m.view(b)));
  Tape::Id gi = tape.sigmoid(tape.slice(z, 0, dh));
  Tape::Id gf = tape.sigmoid(tape.slice(z, dh, dh));
  Tape::Id gg = tape.tanh(tape.slice(z, 2 * dh, dh));
  Tape::Id go = tape.sigmoid(tape.slice(z, 3 * dh, dh));
  Tape::Id c = tape.add(tape.mul(gf, prev.c), tape.mul(gi, gg));
  Tape::Id h = tape.mul(go, tape.tanh(c));
  return {h, c};
}

// Attention context over encoder outputs; zero vector for an empty seed.
Tape::Id attention_context(Tape& tape, Model& m, Slot att_w, Tape::Id query,
                           std::span<const Tape::Id> enc) {
  const int dh = m.config().d_hid;
  if (enc.empty()) {
    std::vector<double> z(dh, 0.0);
    return tape.constant(z);
  }
  Tape::Id q = tape.matvec(tape.param(m.view(att_w)), dh, dh, query);
  std::vector<Tape::Id> scores;
  scores.reserve(enc.size());
  for (Tape::Id e : enc) scores.push_back(tape.dot(q, e));
  Tape::Id alpha = tape.softmax(tape.stack(scores));
  return tape.blend(alpha, enc);
}

}  // namespace

std::vector<Tape::Id> encode_seed(Tape& tape, Model& model, Net net,
                                  std::span<const int> seed_tokens) {
  StackSlots s = stack_slots(net);
  std::vector<Tape::Id> out;
  out.reserve(seed_tokens.size());
  LstmState st = lstm_zero_state(tape, model.config().d_hid);
  for (int tok : seed_tokens) {
    Tape::Id x = tape.param(model.row_view(s.emb, tok));
    st = lstm_step(tape, model, s.enc_w, s.enc_u, s.enc_b, x, st);
    out.push_back(st.h);
  }
  return out;
}

LstmState decoder_start(Tape& tape, Model& model, Net net) {
  StackSlots s = stack_slots(net);
  LstmState st = lstm_zero_state(tape, model.config().d_hid);
  Tape::Id bos = tape.param(model.row_view(s.emb, model.config().bos_id));
  return lstm_step(tape, model, s.dec_w, s.dec_u, s.dec_b, bos, st);
}

LstmState decoder_advance(Tape& tape, Model& model, Net net,
                          const LstmState& state, int token) {
  if (token < 0 || token >= model.config().vocab_size)
    throw std::out_of_range("decoder_advance: token id out of range");
  StackSlots s = stack_slots(net);
  Tape::Id x = tape.param(model.row_view(s.emb, token));
  return lstm_step(tape, model, s.dec_w, s.dec_u, s.dec_b, x, state);
}

GenHeads generator_heads(Tape& tape, Model& model, const LstmState& state,
                         std::span<const Tape::Id> enc, int idx, bool need_tok,
                         bool need_critic, const std::vector<double>* dropout_keep) {
  const ModelConfig& cfg = model.config();
  Tape::Id ctx = attention_context(tape, model, Slot::kAttW, state.h, enc);
  int idx_row = std::min(idx, cfg.idx_clamp);
  Tape::Id idx_feat = tape.param(model.row_view(Slot::kIdxEmb, idx_row));
  std::array<Tape::Id, 3> parts = {state.h, ctx, idx_feat};
  Tape::Id cat = tape.concat(parts);
  Tape::Id pre = tape.add(
      tape.matvec(tape.param(model.view(Slot::kCmbW)), cfg.d_hid,
                  2 * cfg.d_hid + cfg.d_idx, cat),
      tape.param(model.view(Slot::kCmbB)));
  Tape::Id htilde = tape.tanh(pre);
  if (dropout_keep) htilde = tape.mul(htilde, tape.constant(*dropout_keep));

  GenHeads out;
  out.htilde = htilde;
  out.man_logits = tape.add(
      tape.matvec(tape.param(model.view(Slot::kManW)), 4, cfg.d_hid, htilde),
      tape.param(model.view(Slot::kManB)));
  if (need_tok) out.tok_logits = token_logits_from(tape, model, htilde);
  if (need_critic) {
    out.critic = tape.add(
        tape.matvec(tape.param(model.view(Slot::kCritW)), 1, cfg.d_hid, htilde),
        tape.param(model.view(Slot::kCritB)));
  }
  return out;
}

Tape::Id token_logits_from(Tape& tape, Model& model, Tape::Id htilde) {
  const ModelConfig& cfg = model.config();
  return tape.add(
      tape.matvec(tape.param(model.view(Slot::kTokW)), cfg.vocab_size, cfg.d_hid,
                  htilde),
      tape.param(model.view(Slot::kTokB)));
}

PolicyEval::PolicyEval(Tape& tape, Model& model, std::span<const int> seed_tokens)
    : tape_(tape), model_(model) {
  enc_ = encode_seed(tape, model, Net::kGenerator, seed_tokens);
  state_ = decoder_start(tape, model, Net::kGenerator);
}

void PolicyEval::feed(int token) {
  state_ = decoder_advance(tape_, model_, Net::kGenerator, state_, token);
  ++steps_fed_;
}

GenHeads PolicyEval::eval(int idx, bool need_tok, bool need_critic,
                          const std::vector<double>* dropout_keep) {
  return generator_heads(tape_, model_, state_, enc_, idx, need_tok, need_critic,
                         dropout_keep);
}

Tape::Id PolicyEval::token_logits(const GenHeads& heads) {
  return token_logits_from(tape_, model_, heads.htilde);
}

std::vector<Tape::Id> discriminator_probs(Tape& tape, Model& model,
                                          std::span<const int> seed_tokens,
                                          std::span<const int> y) {
  if (y.empty())
    throw std::invalid_argument("discriminator_probs: empty sequence");
  const ModelConfig& cfg = model.config();
  StackSlots s = stack_slots(Net::kDiscriminator);
  std::vector<Tape::Id> enc = encode_seed(tape, model, Net::kDiscriminator, seed_tokens);
  LstmState st = decoder_start(tape, model, Net::kDiscriminator);

  std::vector<Tape::Id> probs;
  probs.reserve(y.size());
  for (int tok : y) {
    st = decoder_advance(tape, model, Net::kDiscriminator, st, tok);
    Tape::Id ctx = attention_context(tape, model, s.att_w, st.h, enc);
    std::array<Tape::Id, 2> parts = {st.h, ctx};
    Tape::Id cat = tape.concat(parts);
    Tape::Id pre = tape.add(
        tape.matvec(tape.param(model.view(s.cmb_w)), cfg.d_hid, 2 * cfg.d_hid, cat),
        tape.param(model.view(s.cmb_b)));
    Tape::Id htilde = tape.tanh(pre);
    Tape::Id logit = tape.add(
        tape.matvec(tape.param(model.view(Slot::kDOutW)), 1, cfg.d_hid, htilde),
        tape.param(model.view(Slot::kDOutB)));
    probs.push_back(tape.clamp(tape.sigmoid(logit), kDiscProbFloor, 1.0 - kDiscProbFloor));
  }
  return probs;
}

std::vector<double> discriminate(Model& model, std::span<const int> seed_tokens,
                                 std::span<const int> y) {
  Tape tape(/*grad_enabled=*/false);
  std::vector<Tape::Id> nodes = discriminator_probs(tape, model, seed_tokens, y);
  std::vector<double> out;
  out.reserve(nodes.size());
  for (Tape::Id id : nodes) out.push_back(tape.scalar(id));
  return out;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient verification
// ---------------------------------------------------------------------------

GradCheckReport grad_check(Model& model, const GradProbe& probe,
                           std::span<const Slot> slots, double epsilon) {
  model.zero_grads();
  {
    Tape tape(/*grad_enabled=*/true);
    Tape::Id root = probe(tape, model);
    tape.backward(root);
  }

  GradCheckReport rep;
  for (Slot s : slots) {
    Tensor& t = model.tensor(s);
    for (int i = 0; i < t.size(); ++i) {
      const double saved = t.v[i];
      t.v[i] = saved + epsilon;
      double fp;
      {
        Tape tape(/*grad_enabled=*/false);
        fp = tape.scalar(probe(tape, model));
      }
      t.v[i] = saved - epsilon;
      double fm;
      {
        Tape tape(/*grad_enabled=*/false);
        fm = tape.scalar(probe(tape, model));
      }
      t.v[i] = saved;
      const double numeric = (fp - fm) / (2.0 * epsilon);
      const double analytic = t.g[i];
      const double denom = std::max(std::abs(numeric), std::abs(analytic));
      double rel = 0.0;
      if (denom >= 1e-8) rel = std::abs(numeric - analytic) / denom;
      ++rep.params_checked;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst = std::string(slot_name(s)) + "[" + std::to_string(i) + "]";
      }
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

void save_checkpoint(const Model& model, const Rng& rng, const std::string& path) {
  nlohmann::ordered_json header;
  header["version"] = 1;
  const ModelConfig& c = model.config();
  header["config"] = {
      {"vocab_size", c.vocab_size}, {"bos_id", c.bos_id}, {"eos_id", c.eos_id},
      {"d_emb", c.d_emb},           {"d_hid", c.d_hid},   {"d_idx", c.d_idx},
      {"idx_clamp", c.idx_clamp},   {"vocab_hash", c.vocab_hash}};
  nlohmann::ordered_json arrays = nlohmann::ordered_json::array();
  for (int i = 0; i < kNumSlots; ++i) {
    const Tensor& t = model.tensor(static_cast<Slot>(i));
    arrays.push_back({{"name", kSlotNames[i]}, {"rows", t.rows}, {"cols", t.cols}});
  }
  header["arrays"] = std::move(arrays);
  header["rng"] = rng.serialize();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out << header.dump() << '\n';
  for (int i = 0; i < kNumSlots; ++i) {
    const Tensor& t = model.tensor(static_cast<Slot>(i));
    static_assert(sizeof(double) == 8);
    out.write(reinterpret_cast<const char*>(t.v.data()),
              static_cast<std::streamsize>(t.v.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("save_checkpoint: write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  std::string header_line;
  if (!std::getline(in, header_line))
    throw std::runtime_error("load_checkpoint: missing header");
  nlohmann::json header = nlohmann::json::parse(header_line);
  if (header.at("version").get<int>() != 1)
    throw std::runtime_error("load_checkpoint: unsupported version");

  ModelConfig cfg;
  const auto& jc = header.at("config");
  cfg.vocab_size = jc.at("vocab_size").get<int>();
  cfg.bos_id = jc.at("bos_id").get<int>();
  cfg.eos_id = jc.at("eos_id").get<int>();
  cfg.d_emb = jc.at("d_emb").get<int>();
  cfg.d_hid = jc.at("d_hid").get<int>();
  cfg.d_idx = jc.at("d_idx").get<int>();
  cfg.idx_clamp = jc.at("idx_clamp").get<int>();
  cfg.vocab_hash = jc.at("vocab_hash").get<uint64_t>();

  Checkpoint ck{Model(cfg), Rng::deserialize(header.at("rng").get<std::string>())};

  // Trainer checkpoints append optimizer arrays after the parameter arrays;
  // model loading reads the parameters and leaves the rest untouched.
  const auto& arrays = header.at("arrays");
  if (arrays.size() < static_cast<size_t>(kNumSlots))
    throw std::runtime_error("load_checkpoint: array count mismatch");
  for (int i = 0; i < kNumSlots; ++i) {
    Tensor& t = ck.model.tensor(static_cast<Slot>(i));
    const auto& a = arrays.at(i);
    if (a.at("name").get<std::string>() != kSlotNames[i] ||
        a.at("rows").get<int>() != t.rows || a.at("cols").get<int>() != t.cols)
      throw std::runtime_error("load_checkpoint: shape mismatch for array " +
                               std::string(kSlotNames[i]));
    in.read(reinterpret_cast<char*>(t.v.data()),
            static_cast<std::streamsize>(t.v.size() * sizeof(double)));
    if (!in) throw std::runtime_error("load_checkpoint: truncated data");
  }
  return ck;
}

Checkpoint load_checkpoint(const std::string& path, uint64_t expected_vocab_hash) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.model.config().vocab_hash != expected_vocab_hash)
    throw std::runtime_error("load_checkpoint: vocabulary hash mismatch");
  return ck;
}

}  // namespace tokman
