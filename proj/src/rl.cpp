#include "tokman/rl.hpp"

#include <cmath>
#include <stdexcept>

namespace tokman::rl {

namespace {

const std::vector<int> kAllActions = {0, 1, 2, 3};
const std::vector<int> kAddOnly = {0};
const std::vector<int> kMintPair = {static_cast<int>(Action::kAdd),
                                    static_cast<int>(Action::kReplace)};
const std::vector<int> kKeepPair = {static_cast<int>(Action::kUse),
                                    static_cast<int>(Action::kPass)};

}  // namespace

std::vector<double> step_rewards(std::span<const double> disc_probs,
                                 const ManipulationTrace& trace) {
  std::vector<double> r(trace.steps.size(), 0.0);
  size_t pos = 0;
  for (size_t t = 0; t < trace.steps.size(); ++t) {
    if (trace.steps[t].token == kNullToken) continue;  // pass: no immediate reward
    if (pos >= disc_probs.size())
      throw std::invalid_argument("step_rewards: fewer probabilities than emissions");
    r[t] = std::log(disc_probs[pos]);
    ++pos;
  }
  if (pos != disc_probs.size())
    throw std::invalid_argument("step_rewards: more probabilities than emissions");
  return r;
}

std::vector<double> discounted_returns(std::span<const double> rewards, double gamma) {
  if (!(gamma > 0.0 && gamma <= 1.0))
    throw std::invalid_argument("discounted_returns: gamma outside (0, 1]");
  std::vector<double> R(rewards.size(), 0.0);
  double acc = 0.0;
  for (size_t t = rewards.size(); t-- > 0;) {
    acc = rewards[t] + gamma * acc;
    R[t] = acc;
  }
  return R;
}

HierSplit hierarchical_logprobs(const std::array<double, 4>& p_man, Action action) {
  HierSplit h;
  h.mint = mints_token(action) ? 1 : 0;
  double gate = h.mint
                    ? p_man[static_cast<int>(Action::kAdd)] +
                          p_man[static_cast<int>(Action::kReplace)]
                    : p_man[static_cast<int>(Action::kUse)] +
                          p_man[static_cast<int>(Action::kPass)];
  if (!(gate > 0.0))
    throw std::runtime_error("hierarchical_logprobs: sampled branch has zero mass");
  h.log_gate = std::log(gate);
  h.log_cond = std::log(p_man[static_cast<int>(action)]) - h.log_gate;
  return h;
}

RolloutBatch build_rollout_batch(Model& model, std::vector<ManipulationTrace> traces,
                                 double gamma, bool standardize_advantages) {
  RolloutBatch b;
  b.gamma = gamma;
  b.traces = std::move(traces);
  b.rewards.reserve(b.traces.size());
  for (const ManipulationTrace& tr : b.traces) {
    std::vector<double> probs;
    if (!tr.emitted.empty())
      probs = discriminate(model, tr.seed.tokens, tr.emitted);
    b.rewards.push_back(step_rewards(probs, tr));
    b.returns.push_back(discounted_returns(b.rewards.back(), gamma));
    std::vector<double> base(tr.steps.size());
    for (size_t t = 0; t < tr.steps.size(); ++t) base[t] = tr.steps[t].baseline;
    b.baselines.push_back(std::move(base));
    std::vector<double> adv(tr.steps.size());
    for (size_t t = 0; t < tr.steps.size(); ++t) {
      adv[t] = b.returns.back()[t] - b.baselines.back()[t];
      if (!std::isfinite(adv[t]))
        throw std::runtime_error("build_rollout_batch: non-finite advantage");
    }
    b.advantages.push_back(std::move(adv));
  }
  if (standardize_advantages) standardize(b);
  return b;
}

void standardize(RolloutBatch& batch) {
  double sum = 0.0, sq = 0.0;
  size_t n = 0;
  for (const auto& adv : batch.advantages)
    for (double a : adv) {
      sum += a;
      sq += a * a;
      ++n;
    }
  if (n == 0) return;
  double mean = sum / static_cast<double>(n);
  double var = sq / static_cast<double>(n) - mean * mean;
  double sd = std::sqrt(std::max(var, 0.0));
  double inv = 1.0 / std::max(sd, 1e-8);
  for (auto& adv : batch.advantages)
    for (double& a : adv) a = (a - mean) * inv;
}

Tape::Id generator_surrogate(Tape& tape, Model& model, const RolloutBatch& batch,
                             const SurrogateOptions& opts,
                             std::vector<std::vector<std::vector<double>>>* htilde_out) {
  std::vector<Tape::Id> terms;
  std::vector<double> coeffs;
  if (htilde_out) htilde_out->assign(batch.traces.size(), {});

  for (size_t i = 0; i < batch.traces.size(); ++i) {
    const ManipulationTrace& tr = batch.traces[i];
    const std::vector<double>& adv = batch.advantages[i];
    if (adv.size() != tr.steps.size())
      throw std::invalid_argument("generator_surrogate: advantage count mismatch");

    PolicyEval pe(tape, model, tr.seed.tokens);
    const int seed_len = tr.seed.length();
    double visit = 1.0;  // gamma^(t-1): the step's share of the start-state objective
    for (size_t t = 0; t < tr.steps.size(); ++t, visit *= batch.gamma) {
      const TraceStep& st = tr.steps[t];
      const std::vector<double>* keep =
          !tr.dropout_keep.empty() && !tr.dropout_keep[t].empty() ? &tr.dropout_keep[t]
                                                                  : nullptr;
      GenHeads heads = pe.eval(st.idx_before, /*need_tok=*/false,
                               /*need_critic=*/false, keep);
      if (htilde_out)
        (*htilde_out)[i].emplace_back(tape.value(heads.htilde).begin(),
                                      tape.value(heads.htilde).end());

      std::span<const int> valid = st.idx_before < seed_len
                                       ? std::span<const int>(kAllActions)
                                       : std::span<const int>(kAddOnly);
      Tape::Id man_lp = tape.masked_log_softmax(heads.man_logits, valid);
      const int a = static_cast<int>(st.action);
      const bool mint = mints_token(st.action);
      Tape::Id log_gate =
          tape.logsumexp_pick(man_lp, mint ? std::span<const int>(kMintPair)
                                           : std::span<const int>(kKeepPair));
      Tape::Id log_cond = tape.sub(tape.pick(man_lp, a), log_gate);

      const double c = visit * adv[t];
      const double gate_hat = std::exp(tape.scalar(log_gate));
      if (mint) {
        Tape::Id tok_lp = tape.log_softmax(pe.token_logits(heads));
        Tape::Id log_tok = tape.pick(tok_lp, st.token);
        const double tok_hat = std::exp(tape.scalar(log_tok));
        terms.push_back(log_tok);
        coeffs.push_back(c * (opts.mutual_weighting ? gate_hat : 1.0));
        terms.push_back(log_gate);
        coeffs.push_back(c * (opts.mutual_weighting ? tok_hat : 1.0));
        terms.push_back(log_cond);
        coeffs.push_back(c * (opts.mutual_weighting ? gate_hat : 1.0));
      } else {
        const double cond_hat = std::exp(tape.scalar(log_cond));
        terms.push_back(log_cond);
        coeffs.push_back(c * (opts.mutual_weighting ? gate_hat : 1.0));
        terms.push_back(log_gate);
        coeffs.push_back(c * (opts.mutual_weighting ? cond_hat : 1.0));
      }
      if (st.token != kNullToken) pe.feed(st.token);
    }
  }
  return tape.weighted_sum(terms, coeffs);
}

Tape::Id critic_loss(Tape& tape, Model& model, const RolloutBatch& batch,
                     const std::vector<std::vector<std::vector<double>>>& htilde) {
  const ModelConfig& cfg = model.config();
  std::vector<Tape::Id> terms;
  size_t steps = 0;
  for (size_t i = 0; i < batch.traces.size(); ++i) {
    for (size_t t = 0; t < batch.traces[i].steps.size(); ++t) {
      Tape::Id h = tape.constant(htilde[i][t]);  // trunk enters as a constant
      Tape::Id pred = tape.add(
          tape.matvec(tape.param(model.view(Slot::kCritW)), 1, cfg.d_hid, h),
          tape.param(model.view(Slot::kCritB)));
      Tape::Id err = tape.affine(pred, 1.0, -batch.returns[i][t]);
      terms.push_back(tape.mul(err, err));
      ++steps;
    }
  }
  if (terms.empty()) return tape.constant(0.0);
  std::vector<double> coeffs(terms.size(), 1.0 / static_cast<double>(steps));
  return tape.weighted_sum(terms, coeffs);
}

Tape::Id critic_loss(Tape& tape, Model& model, const RolloutBatch& batch) {
  std::vector<std::vector<std::vector<double>>> htilde(batch.traces.size());
  Tape scratch(/*grad_enabled=*/false);
  for (size_t i = 0; i < batch.traces.size(); ++i) {
    const ManipulationTrace& tr = batch.traces[i];
    PolicyEval pe(scratch, model, tr.seed.tokens);
    for (size_t t = 0; t < tr.steps.size(); ++t) {
      const std::vector<double>* keep =
          !tr.dropout_keep.empty() && !tr.dropout_keep[t].empty() ? &tr.dropout_keep[t]
                                                                  : nullptr;
      GenHeads heads = pe.eval(tr.steps[t].idx_before, false, false, keep);
      htilde[i].emplace_back(scratch.value(heads.htilde).begin(),
                             scratch.value(heads.htilde).end());
      if (tr.steps[t].token != kNullToken) pe.feed(tr.steps[t].token);
    }
  }
  return critic_loss(tape, model, batch, htilde);
}

Tape::Id discriminator_loss(Tape& tape, Model& model, std::span<const ScoredSeq> real,
                            std::span<const ScoredSeq> fake) {
  if (real.empty() || fake.empty())
    throw std::invalid_argument("discriminator_loss: empty batch");
  if (real.size() != fake.size())
    throw std::invalid_argument("discriminator_loss: real/fake batch size mismatch");

  std::vector<Tape::Id> terms;
  std::vector<double> coeffs;
  const double w = -1.0 / static_cast<double>(real.size());
  for (const ScoredSeq& s : real) {
    for (Tape::Id p : discriminator_probs(tape, model, s.seed, s.y)) {
      terms.push_back(tape.log(p));
      coeffs.push_back(w);
    }
  }
  for (const ScoredSeq& s : fake) {
    for (Tape::Id p : discriminator_probs(tape, model, s.seed, s.y)) {
      terms.push_back(tape.log(tape.affine(p, -1.0, 1.0)));
      coeffs.push_back(w);
    }
  }
  return tape.weighted_sum(terms, coeffs);
}

}  // namespace tokman::rl
