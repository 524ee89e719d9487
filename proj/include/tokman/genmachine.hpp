#pragma once

#include <optional>
#include <string>
#include <vector>

#include "tokman/corpus.hpp"
#include "tokman/model.hpp"
#include "tokman/rng.hpp"

namespace tokman {

// One manipulation per step: add mints a fresh token and leaves the cursor
// alone; replace mints a fresh token in place of the current seed token;
// use emits the current seed token; pass drops it. All but add advance the
// cursor.
enum class Action : uint8_t { kAdd, kReplace, kUse, kPass };

constexpr int kNumActions = 4;
constexpr int kNullToken = -1;

const char* action_name(Action a);
Action action_from_name(const std::string& name);

// True when the action mints a fresh token from the token generator.
inline bool mints_token(Action a) { return a == Action::kAdd || a == Action::kReplace; }

struct GenState {
  std::vector<int> emitted;  // includes a terminal EOS when one was emitted
  SeedSequence seed;
  int t = 0;
  bool done = false;
};

// Termination rules: an episode ends when it emits EOS or reaches max_len
// emitted tokens.
struct MachineSpec {
  int max_len = 0;
  int eos_id = kEosId;
};

// All four actions while seed tokens remain, add alone once the cursor is
// exhausted. Throws on a done state.
std::vector<Action> valid_actions(const GenState& state);

// Indices into the 4-way action distribution for masked renormalization.
std::vector<int> valid_action_indices(const GenState& state);

struct StepResult {
  int emission = kNullToken;
  GenState next;
};

// Applies one action. `token` must be given exactly for add/replace.
StepResult step(const MachineSpec& spec, const GenState& state, Action action,
                std::optional<int> token);

struct TraceStep {
  Action action = Action::kAdd;
  int token = kNullToken;    // emitted token, kNullToken for pass
  int idx_before = 0;
  double logp_man = 0.0;     // action log-prob at the applied temperature
  double logp_tok = 0.0;     // token log-prob at the applied temperature, 0 if none
  double logp_man_t1 = 0.0;  // same quantities at temperature 1
  double logp_tok_t1 = 0.0;
  double baseline = 0.0;     // critic value at the pre-step state
};

struct ManipulationTrace {
  SeedSequence seed;          // initial seed, cursor 0
  std::vector<TraceStep> steps;
  std::vector<int> emitted;   // non-null emissions, including a terminal EOS
  std::vector<std::vector<double>> dropout_keep;  // per-step masks, empty if unused

  // Emitted sequence with a trailing EOS stripped.
  Sentence sentence(int eos_id) const;
};

struct GenerateOptions {
  double dropout_rate = 0.0;  // exploration dropout on the combined hidden state
};

// Samples one episode. Temperature scales both the manipulator and the token
// softmax; temperature 0 means greedy argmax throughout.
ManipulationTrace generate(Model& model, const SeedSequence& seed, int max_len,
                           double temperature, Rng& rng,
                           const GenerateOptions& opts = {});

// Deterministically re-executes an action sequence against a seed.
// add_tokens supplies the minted token for each add/replace in order.
Sentence replay(const SeedSequence& seed, const std::vector<Action>& actions,
                const std::vector<int>& add_tokens);

Sentence replay(const SeedSequence& seed, const SupervisedTarget& target);

// log P(y | seed): forward lattice over (emitted count, cursor) summing every
// action sequence consistent with y, including pass interleavings and the
// terminating EOS (or the length cap when |y| = max_len). Returns -inf when
// y is unreachable.
double marginal_log_likelihood(Model& model, const SeedSequence& seed,
                               const Sentence& y, int max_len);

// Mask-dictated special case: position by position, a blanked token is
// sampled fresh and a surviving token is copied. Ends early if EOS is
// sampled, mirroring the full machine under the forced action schedule.
Sentence maskgan_generate(Model& model, const Sentence& sentence,
                          const MaskSpec& mask, double temperature, Rng& rng);

// One JSON object per episode, fields in fixed order:
// {seed, actions, tokens, logp_man, logp_tok}; pass steps carry null tokens.
std::string trace_to_json(const ManipulationTrace& trace);

}  // namespace tokman
