#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tokman/rng.hpp"
#include "tokman/tape.hpp"

namespace tokman {

// Dimensions and token conventions shared by generator and discriminator.
struct ModelConfig {
  int vocab_size = 0;
  int bos_id = 1;
  int eos_id = 2;
  int d_emb = 32;
  int d_hid = 64;
  int d_idx = 8;
  int idx_clamp = 32;       // cursor feature saturates at this value
  uint64_t vocab_hash = 0;  // binds checkpoints to the vocabulary they were trained on

  bool operator==(const ModelConfig&) const = default;
};

// Every learnable array, in checkpoint order. The discriminator mirrors the
// generator's encoder/decoder/attention stack with its own weights and a
// scalar probability head instead of the token/manipulator/critic heads.
enum class Slot : int {
  kEmb, kEncW, kEncU, kEncB, kDecW, kDecU, kDecB, kAttW, kCmbW, kCmbB,
  kIdxEmb, kTokW, kTokB, kManW, kManB, kCritW, kCritB,
  kDEmb, kDEncW, kDEncU, kDEncB, kDDecW, kDDecU, kDDecB, kDAttW, kDCmbW,
  kDCmbB, kDOutW, kDOutB,
  kCount,
};

constexpr int kNumSlots = static_cast<int>(Slot::kCount);

const char* slot_name(Slot s);

struct Tensor {
  int rows = 0, cols = 0;
  std::vector<double> v;  // row-major values
  std::vector<double> g;  // gradient accumulator, same layout
  int size() const { return rows * cols; }
};

enum class Net { kGenerator, kDiscriminator };

class Model {
 public:
  Model() = default;
  explicit Model(const ModelConfig& cfg);  // zero-initialized
  static Model random_init(const ModelConfig& cfg, Rng& rng);

  const ModelConfig& config() const { return cfg_; }
  Tensor& tensor(Slot s) { return t_[static_cast<int>(s)]; }
  const Tensor& tensor(Slot s) const { return t_[static_cast<int>(s)]; }

  ParamView view(Slot s);
  ParamView row_view(Slot s, int row);  // one row of an embedding-style table

  void zero_grads();
  size_t parameter_count() const;
  bool all_finite() const;

  static std::vector<Slot> generator_slots();      // includes the critic head
  static std::vector<Slot> discriminator_slots();
  static std::vector<Slot> critic_slots();
  static std::vector<Slot> token_head_slots();
  static std::vector<Slot> manipulator_head_slots();
  static std::vector<Slot> trunk_slots();          // generator minus heads

 private:
  ModelConfig cfg_;
  std::array<Tensor, kNumSlots> t_;
};

// ---------------------------------------------------------------------------
// Forward passes. Everything below builds nodes on the caller's tape; run on
// a grad-disabled tape for plain evaluation.
// ---------------------------------------------------------------------------

struct LstmState {
  Tape::Id h = -1, c = -1;
};

// Per-position context vectors for the seed tokens. Empty seed -> empty list.
std::vector<Tape::Id> encode_seed(Tape& tape, Model& model, Net net,
                                  std::span<const int> seed_tokens);

// Low-level decoder access for drivers that hold several recurrence states at
// once (the marginal lattice and the enumeration oracle). The recurrence
// consumes one emitted token per advance; decoder_start has already consumed
// BOS. PolicyEval below wraps these for the common sequential case.
LstmState decoder_start(Tape& tape, Model& model, Net net);
LstmState decoder_advance(Tape& tape, Model& model, Net net,
                          const LstmState& state, int token);

struct GenHeads {
  Tape::Id htilde = -1;
  Tape::Id man_logits = -1;  // 4 entries
  Tape::Id tok_logits = -1;  // -1 when not requested
  Tape::Id critic = -1;      // -1 when not requested
};

// Generator head stack at one decision point: attention over the encoded
// seed, cursor feature, combine, heads.
GenHeads generator_heads(Tape& tape, Model& model, const LstmState& state,
                         std::span<const Tape::Id> enc, int idx, bool need_tok,
                         bool need_critic,
                         const std::vector<double>* dropout_keep = nullptr);

Tape::Id token_logits_from(Tape& tape, Model& model, Tape::Id htilde);

// Incremental generator-side policy evaluation: the recurrence consumes one
// emitted token per advance (starting with BOS), and the cursor enters the
// head stack as a per-decision feature, so the policy is a function of
// (emitted prefix, seed, idx) only.
class PolicyEval {
 public:
  PolicyEval(Tape& tape, Model& model, std::span<const int> seed_tokens);

  void feed(int token);  // advance the recurrence with an emitted token

  // dropout_keep: optional per-unit multiplicative mask over htilde
  // (pre-scaled by 1/keep_prob); nullptr for no dropout.
  GenHeads eval(int idx, bool need_tok, bool need_critic,
                const std::vector<double>* dropout_keep = nullptr);

  // Token head evaluated lazily against an earlier eval()'s hidden state.
  Tape::Id token_logits(const GenHeads& heads);

  int steps_fed() const { return steps_fed_; }

 private:
  Tape& tape_;
  Model& model_;
  std::vector<Tape::Id> enc_;
  LstmState state_;
  int steps_fed_ = 0;
};

// Per-position realness probabilities for a non-empty sequence y, clamped to
// [1e-7, 1 - 1e-7]. Output t is conditioned on y_1..y_t and the seed.
std::vector<Tape::Id> discriminator_probs(Tape& tape, Model& model,
                                          std::span<const int> seed_tokens,
                                          std::span<const int> y);

// Values-only convenience running on an internal grad-free tape.
std::vector<double> discriminate(Model& model, std::span<const int> seed_tokens,
                                 std::span<const int> y);

constexpr double kDiscProbFloor = 1e-7;

// ---------------------------------------------------------------------------
// Gradient verification: central finite differences against the tape.
// ---------------------------------------------------------------------------

// Builds a scalar loss on the tape and returns its node.
using GradProbe = std::function<Tape::Id(Tape&, Model&)>;

struct GradCheckReport {
  double max_rel_err = 0.0;
  int params_checked = 0;
  std::string worst;  // "slot[index]" of the worst element
};

GradCheckReport grad_check(Model& model, const GradProbe& probe,
                           std::span<const Slot> slots, double epsilon = 1e-5);

// ---------------------------------------------------------------------------
// Checkpoints: one-line JSON header (version, config, array shapes, rng
// state), then raw little-endian doubles in slot order.
// ---------------------------------------------------------------------------

void save_checkpoint(const Model& model, const Rng& rng, const std::string& path);

struct Checkpoint {
  Model model;
  Rng rng;
};

Checkpoint load_checkpoint(const std::string& path);
Checkpoint load_checkpoint(const std::string& path, uint64_t expected_vocab_hash);

}  // namespace tokman
