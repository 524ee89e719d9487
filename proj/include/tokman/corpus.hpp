#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "tokman/rng.hpp"

namespace tokman {

// Reserved token ids. Corpus words start at id 4.
constexpr int kPadId = 0;
constexpr int kBosId = 1;
constexpr int kEosId = 2;
constexpr int kUnkId = 3;
constexpr int kNumReserved = 4;

// Token ids of one sentence; BOS/EOS/PAD never stored.
using Sentence = std::vector<int>;

class Vocabulary {
 public:
  Vocabulary();

  // Corpus words ordered by descending frequency, ties broken
  // lexicographically, so rebuilding from the same corpus is deterministic.
  static Vocabulary build(const std::vector<std::vector<std::string>>& sentences);

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::string& surface(int id) const;
  // Returns kUnkId for unknown surfaces.
  int id(const std::string& surface) const;
  bool contains(const std::string& surface) const;

  // One corpus word per line; the four reserved ids are implicit and the
  // file's line k (0-based) holds the surface for id k + 4.
  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

  uint64_t hash() const;  // FNV-1a over the stored surfaces

 private:
  std::vector<std::string> tokens_;                 // index = id
  std::unordered_map<std::string, int> index_;
};

// Per-position blanking decisions: bit 1 = token is blanked (to be
// generated), bit 0 = token survives into the seed.
struct MaskSpec {
  std::vector<uint8_t> bits;
  double rate = 0.0;
};

// The ordered given tokens plus the consumption cursor.
struct SeedSequence {
  std::vector<int> tokens;
  int idx = 0;

  int length() const { return static_cast<int>(tokens.size()); }
  bool exhausted() const { return idx >= length(); }
};

enum class TargetAction : uint8_t { kAdd, kUse };

// Supervised pretraining targets: per position, add the blanked token or use
// the next seed token. Replaying them against the seed rebuilds the source.
struct SupervisedTarget {
  std::vector<TargetAction> actions;
  std::vector<int> add_tokens;
};

struct Corpus {
  std::vector<Sentence> sentences;
  Vocabulary vocab;
};

// Reads a UTF-8, one-sentence-per-line, whitespace-tokenized file.
// Lines are lowercased and trimmed; sentences longer than max_len are
// dropped. With a vocabulary given (test mode), sentences containing
// out-of-vocabulary words are dropped; otherwise the vocabulary is built
// from the retained sentences.
Corpus load_corpus(const std::string& path, const std::optional<Vocabulary>& vocab,
                   int max_len);

// Writes sentences back out, one per line, single-space separated.
void save_corpus(const std::vector<Sentence>& sentences, const Vocabulary& vocab,
                 const std::string& path);

// Independent Bernoulli(rate) bit per position.
MaskSpec sample_mask(int length, double rate, Rng& rng);

// Subsequence of the sentence at surviving (bit 0) positions, cursor at 0.
SeedSequence extract_seed(const Sentence& sentence, const MaskSpec& mask);

// Blanked positions become add targets carrying the blanked token;
// surviving positions become use targets.
SupervisedTarget derive_targets(const Sentence& sentence, const MaskSpec& mask);

}  // namespace tokman
