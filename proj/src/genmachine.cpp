#include "tokman/genmachine.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <json.hpp>

namespace tokman {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double logaddexp(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

const std::vector<int>& all_action_indices() {
  static const std::vector<int> k = {0, 1, 2, 3};
  return k;
}

const std::vector<int>& add_only_indices() {
  static const std::vector<int> k = {0};
  return k;
}

// Masked log-softmax of the action logits at the given temperature;
// temperature 1 uses the raw logits node so the distribution is untouched.
Tape::Id action_logp_node(Tape& tape, Tape::Id man_logits, double temperature,
                          std::span<const int> valid) {
  Tape::Id logits = man_logits;
  if (temperature != 1.0) logits = tape.affine(man_logits, 1.0 / temperature, 0.0);
  return tape.masked_log_softmax(logits, valid);
}

Tape::Id token_logp_node(Tape& tape, Tape::Id tok_logits, double temperature) {
  Tape::Id logits = tok_logits;
  if (temperature != 1.0) logits = tape.affine(tok_logits, 1.0 / temperature, 0.0);
  return tape.log_softmax(logits);
}

int sample_from_logp(std::span<const double> logp, Rng& rng) {
  std::vector<double> p(logp.size());
  for (size_t i = 0; i < logp.size(); ++i)
    p[i] = logp[i] == kNegInf ? 0.0 : std::exp(logp[i]);
  return rng.categorical(p);
}

int argmax_over(std::span<const double> values, std::span<const int> allowed) {
  int best = allowed[0];
  for (int i : allowed)
    if (values[i] > values[best]) best = i;
  return best;
}

}  // namespace

const char* action_name(Action a) {
  switch (a) {
    case Action::kAdd: return "ADD";
    case Action::kReplace: return "REPLACE";
    case Action::kUse: return "USE";
    case Action::kPass: return "PASS";
  }
  throw std::logic_error("action_name: bad action");
}

Action action_from_name(const std::string& name) {
  if (name == "ADD") return Action::kAdd;
  if (name == "REPLACE") return Action::kReplace;
  if (name == "USE") return Action::kUse;
  if (name == "PASS") return Action::kPass;
  throw std::invalid_argument("action_from_name: unknown action '" + name + "'");
}

std::vector<Action> valid_actions(const GenState& state) {
  if (state.done) throw std::logic_error("valid_actions: episode is done");
  if (state.seed.exhausted()) return {Action::kAdd};
  return {Action::kAdd, Action::kReplace, Action::kUse, Action::kPass};
}

std::vector<int> valid_action_indices(const GenState& state) {
  if (state.done) throw std::logic_error("valid_action_indices: episode is done");
  return state.seed.exhausted() ? add_only_indices() : all_action_indices();
}

StepResult step(const MachineSpec& spec, const GenState& state, Action action,
                std::optional<int> token) {
  if (state.done) throw std::logic_error("step: episode is done");
  if (mints_token(action) != token.has_value())
    throw std::invalid_argument("step: token must be given exactly for add/replace");
  if (action != Action::kAdd && state.seed.exhausted())
    throw std::invalid_argument("step: only add is valid once the seed is consumed");

  StepResult r;
  r.next = state;
  r.next.t = state.t + 1;
  switch (action) {
    case Action::kAdd:
      r.emission = *token;
      break;
    case Action::kReplace:
      r.emission = *token;
      r.next.seed.idx += 1;
      break;
    case Action::kUse:
      r.emission = state.seed.tokens[state.seed.idx];
      r.next.seed.idx += 1;
      break;
    case Action::kPass:
      r.emission = kNullToken;
      r.next.seed.idx += 1;
      break;
  }
  if (r.emission != kNullToken) {
    r.next.emitted.push_back(r.emission);
    if (r.emission == spec.eos_id ||
        static_cast<int>(r.next.emitted.size()) >= spec.max_len)
      r.next.done = true;
  }
  return r;
}

Sentence ManipulationTrace::sentence(int eos_id) const {
  Sentence s = emitted;
  if (!s.empty() && s.back() == eos_id) s.pop_back();
  return s;
}

ManipulationTrace generate(Model& model, const SeedSequence& seed, int max_len,
                           double temperature, Rng& rng, const GenerateOptions& opts) {
  if (temperature < 0.0) throw std::invalid_argument("generate: negative temperature");
  const bool greedy = temperature == 0.0;
  const ModelConfig& cfg = model.config();
  MachineSpec spec{max_len, cfg.eos_id};

  ManipulationTrace trace;
  trace.seed = seed;
  trace.seed.idx = 0;
  if (max_len <= 0) return trace;

  Tape tape(/*grad_enabled=*/false);
  PolicyEval pe(tape, model, seed.tokens);

  GenState st;
  st.seed = trace.seed;
  while (!st.done) {
    std::vector<int> valid = valid_action_indices(st);

    const std::vector<double>* keep = nullptr;
    std::vector<double> keep_storage;
    if (opts.dropout_rate > 0.0) {
      keep_storage.resize(cfg.d_hid);
      double inv = 1.0 / (1.0 - opts.dropout_rate);
      for (double& k : keep_storage)
        k = rng.bernoulli(opts.dropout_rate) ? 0.0 : inv;
      keep = &keep_storage;
    }

    GenHeads heads = pe.eval(st.seed.idx, /*need_tok=*/false, /*need_critic=*/true, keep);
    Tape::Id man_t1 = action_logp_node(tape, heads.man_logits, 1.0, valid);
    Tape::Id man_T = greedy || temperature == 1.0
                         ? man_t1
                         : action_logp_node(tape, heads.man_logits, temperature, valid);

    int a_idx;
    if (greedy) a_idx = argmax_over(tape.value(man_t1), valid);
    else a_idx = sample_from_logp(tape.value(man_T), rng);
    Action action = static_cast<Action>(a_idx);

    TraceStep ts;
    ts.action = action;
    ts.idx_before = st.seed.idx;
    ts.logp_man = tape.value(man_T)[a_idx];
    ts.logp_man_t1 = tape.value(man_t1)[a_idx];
    ts.baseline = tape.scalar(heads.critic);

    std::optional<int> minted;
    if (mints_token(action)) {
      Tape::Id tok_logits = pe.token_logits(heads);
      Tape::Id tok_t1 = token_logp_node(tape, tok_logits, 1.0);
      Tape::Id tok_T = greedy || temperature == 1.0
                           ? tok_t1
                           : token_logp_node(tape, tok_logits, temperature);
      int tok;
      if (greedy) {
        std::span<const double> v = tape.value(tok_t1);
        tok = 0;
        for (int i = 1; i < cfg.vocab_size; ++i)
          if (v[i] > v[tok]) tok = i;
      } else {
        tok = sample_from_logp(tape.value(tok_T), rng);
      }
      minted = tok;
      ts.logp_tok = tape.value(tok_T)[tok];
      ts.logp_tok_t1 = tape.value(tok_t1)[tok];
    }

    StepResult sr = step(spec, st, action, minted);
    ts.token = sr.emission;
    if (!std::isfinite(ts.logp_man) || (minted && !std::isfinite(ts.logp_tok)))
      throw std::runtime_error("generate: non-finite policy output");

    trace.steps.push_back(ts);
    if (keep) trace.dropout_keep.push_back(keep_storage);
    else if (!trace.dropout_keep.empty()) trace.dropout_keep.emplace_back();

    if (sr.emission != kNullToken) pe.feed(sr.emission);
    st = std::move(sr.next);
  }
  trace.emitted = st.emitted;
  if (!trace.dropout_keep.empty() && trace.dropout_keep.size() != trace.steps.size())
    throw std::logic_error("generate: dropout mask bookkeeping out of sync");
  return trace;
}

Sentence replay(const SeedSequence& seed, const std::vector<Action>& actions,
                const std::vector<int>& add_tokens) {
  size_t minted = 0;
  for (Action a : actions)
    if (mints_token(a)) ++minted;
  if (minted != add_tokens.size())
    throw std::invalid_argument("replay: add_tokens count does not match add/replace count");

  Sentence out;
  int idx = seed.idx;
  size_t next_token = 0;
  for (Action a : actions) {
    if (a != Action::kAdd && idx >= seed.length())
      throw std::invalid_argument("replay: seed exhausted before action sequence");
    switch (a) {
      case Action::kAdd:
        out.push_back(add_tokens[next_token++]);
        break;
      case Action::kReplace:
        out.push_back(add_tokens[next_token++]);
        ++idx;
        break;
      case Action::kUse:
        out.push_back(seed.tokens[idx]);
        ++idx;
        break;
      case Action::kPass:
        ++idx;
        break;
    }
  }
  return out;
}

Sentence replay(const SeedSequence& seed, const SupervisedTarget& target) {
  std::vector<Action> actions;
  actions.reserve(target.actions.size());
  for (TargetAction a : target.actions)
    actions.push_back(a == TargetAction::kAdd ? Action::kAdd : Action::kUse);
  return replay(seed, actions, target.add_tokens);
}

double marginal_log_likelihood(Model& model, const SeedSequence& seed,
                               const Sentence& y, int max_len) {
  const ModelConfig& cfg = model.config();
  const int n = static_cast<int>(y.size());
  const int S = seed.length();
  if (n > max_len) return kNegInf;
  for (int tok : y) {
    if (tok < 0 || tok >= cfg.vocab_size)
      throw std::out_of_range("marginal_log_likelihood: token id out of range");
    if (tok == cfg.eos_id) return kNegInf;  // the machine stops at EOS
  }

  Tape tape(/*grad_enabled=*/false);
  PolicyEval pe(tape, model, seed.tokens);

  std::vector<std::vector<double>> alpha(n + 1, std::vector<double>(S + 1, kNegInf));
  alpha[0][0] = 0.0;
  double total = kNegInf;

  for (int k = 0; k <= n; ++k) {
    if (k > 0) pe.feed(y[k - 1]);
    const bool terminal_row = k == n;
    // Reaching the emission cap ends the episode immediately: no further
    // pass steps, no EOS step.
    if (terminal_row && n == max_len) {
      for (int j = 0; j <= S; ++j) total = logaddexp(total, alpha[k][j]);
      break;
    }
    for (int j = 0; j <= S; ++j) {
      if (alpha[k][j] == kNegInf) continue;
      std::span<const int> valid =
          j < S ? std::span<const int>(all_action_indices())
                : std::span<const int>(add_only_indices());
      GenHeads heads = pe.eval(j, /*need_tok=*/false, /*need_critic=*/false);
      std::span<const double> man =
          tape.value(action_logp_node(tape, heads.man_logits, 1.0, valid));
      std::span<const double> tok =
          tape.value(token_logp_node(tape, pe.token_logits(heads), 1.0));
      if (j < S) {
        // pass: epsilon transition within the row (ascending j keeps order)
        alpha[k][j + 1] = logaddexp(alpha[k][j + 1],
                                    alpha[k][j] + man[static_cast<int>(Action::kPass)]);
      }
      if (!terminal_row) {
        const int ty = y[k];
        alpha[k + 1][j] = logaddexp(
            alpha[k + 1][j],
            alpha[k][j] + man[static_cast<int>(Action::kAdd)] + tok[ty]);
        if (j < S) {
          alpha[k + 1][j + 1] = logaddexp(
              alpha[k + 1][j + 1],
              alpha[k][j] + man[static_cast<int>(Action::kReplace)] + tok[ty]);
          if (seed.tokens[j] == ty)
            alpha[k + 1][j + 1] = logaddexp(
                alpha[k + 1][j + 1],
                alpha[k][j] + man[static_cast<int>(Action::kUse)]);
        }
      } else {
        double term = man[static_cast<int>(Action::kAdd)] + tok[cfg.eos_id];
        if (j < S)
          term = logaddexp(term,
                           man[static_cast<int>(Action::kReplace)] + tok[cfg.eos_id]);
        total = logaddexp(total, alpha[k][j] + term);
      }
    }
  }
  return total;
}

Sentence maskgan_generate(Model& model, const Sentence& sentence, const MaskSpec& mask,
                          double temperature, Rng& rng) {
  if (sentence.size() != mask.bits.size())
    throw std::invalid_argument("maskgan_generate: sentence/mask length mismatch");
  if (temperature < 0.0)
    throw std::invalid_argument("maskgan_generate: negative temperature");
  const bool greedy = temperature == 0.0;
  const ModelConfig& cfg = model.config();

  SeedSequence seed = extract_seed(sentence, mask);
  Tape tape(/*grad_enabled=*/false);
  PolicyEval pe(tape, model, seed.tokens);

  Sentence out;
  int j = 0;
  for (size_t i = 0; i < sentence.size(); ++i) {
    if (mask.bits[i]) {
      GenHeads heads = pe.eval(j, /*need_tok=*/true, /*need_critic=*/false);
      Tape::Id lp = token_logp_node(tape, heads.tok_logits, greedy ? 1.0 : temperature);
      std::span<const double> v = tape.value(lp);
      int tok;
      if (greedy) {
        tok = 0;
        for (int t = 1; t < cfg.vocab_size; ++t)
          if (v[t] > v[tok]) tok = t;
      } else {
        tok = sample_from_logp(v, rng);
      }
      if (tok == cfg.eos_id) break;  // the machine would stop here
      out.push_back(tok);
      pe.feed(tok);
    } else {
      out.push_back(sentence[i]);
      pe.feed(sentence[i]);
      ++j;
    }
  }
  return out;
}

std::string trace_to_json(const ManipulationTrace& trace) {
  nlohmann::ordered_json j;
  j["seed"] = trace.seed.tokens;
  nlohmann::ordered_json actions = nlohmann::ordered_json::array();
  nlohmann::ordered_json tokens = nlohmann::ordered_json::array();
  nlohmann::ordered_json logp_man = nlohmann::ordered_json::array();
  nlohmann::ordered_json logp_tok = nlohmann::ordered_json::array();
  for (const TraceStep& s : trace.steps) {
    actions.push_back(action_name(s.action));
    if (s.token == kNullToken) tokens.push_back(nullptr);
    else tokens.push_back(s.token);
    logp_man.push_back(s.logp_man);
    logp_tok.push_back(s.logp_tok);
  }
  j["actions"] = std::move(actions);
  j["tokens"] = std::move(tokens);
  j["logp_man"] = std::move(logp_man);
  j["logp_tok"] = std::move(logp_tok);
  return j.dump();
}

}  // namespace tokman
