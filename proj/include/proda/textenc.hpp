#pragma once

// Frozen stand-in for the text encoder: learnable prompt tokens are combined
// with fixed class-name token rows and mapped through a small frozen network
// to a unit-norm class weight.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "proda/diffcore.hpp"

namespace proda {

using diff::Tape;
using diff::Tensor;
using diff::Var;

enum class Position { Front, Middle, End };

std::string_view to_string(Position p);
Position position_from_string(std::string_view s);

struct Prompt {
  Tensor tokens;  // p x e
  Position position = Position::End;
};

struct PositionHistogram {
  std::size_t front = 0;
  std::size_t middle = 0;
  std::size_t end = 0;
  friend bool operator==(const PositionHistogram&, const PositionHistogram&) = default;
};

struct PromptCollection {
  std::vector<Prompt> prompts;
  std::uint64_t seed = 0;

  std::size_t size() const { return prompts.size(); }
  PositionHistogram histogram() const;
};

inline constexpr double kPromptInitStd = 0.02;

// K prompts with i.i.d. N(0, 0.02^2) entries. Tags are floor(K/4) Front, then
// floor(K/4) Middle, then End for the rest (End absorbs any remainder).
PromptCollection init_prompt_collection(std::size_t count, std::size_t length, std::size_t dim,
                                        std::uint64_t seed);

// Re-tags every prompt with the class name at the end.
void set_all_positions(PromptCollection& collection, Position position);

// Input word embeddings of the class names, one n_c x e matrix per class.
struct ClassNameTokens {
  std::vector<Tensor> per_class;

  std::size_t classes() const { return per_class.size(); }
  std::size_t dim() const { return per_class.empty() ? 0 : per_class.front().cols(); }
};

enum class EncoderKind { MeanPoolMLP, SingleAttentionBlock };

std::string_view to_string(EncoderKind k);
EncoderKind encoder_kind_from_string(std::string_view s);

struct EncoderConfig {
  EncoderKind kind = EncoderKind::MeanPoolMLP;
  std::size_t input_dim = 16;
  std::size_t hidden_dim = 64;
  std::size_t output_dim = 32;
  // Scale of the first layer relative to 1/sqrt(input_dim).
  double gain = 14.0;
  std::uint64_t weight_seed = 0;
  // Attention variant only: rows of the frozen positional table.
  std::size_t max_positions = 77;
  // When set, weights are read from this directory instead of the seed.
  std::optional<std::filesystem::path> weight_path;
};

class TextEncoder;

// Encoder weights placed as constants on one tape, so a training step does
// not copy them for every description.
class BoundEncoder {
 public:
  BoundEncoder(const TextEncoder& encoder, Tape& tape);

  // Unit-norm 1 x d embedding of an n x e token sequence.
  Var encode(Var tokens) const;
  Tape& tape() const { return *tape_; }
  const TextEncoder& encoder() const { return *encoder_; }

 private:
  const TextEncoder* encoder_;
  Tape* tape_;
  std::vector<Var> weights_;
};

class TextEncoder {
 public:
  explicit TextEncoder(EncoderConfig config);

  const EncoderConfig& config() const { return config_; }
  std::size_t input_dim() const { return config_.input_dim; }
  std::size_t output_dim() const { return config_.output_dim; }

  BoundEncoder bind(Tape& tape) const { return BoundEncoder(*this, tape); }
  Tensor encode(const Tensor& tokens) const;

  // Named frozen tensors; order is fixed per kind.
  const std::vector<std::pair<std::string, Tensor>>& weights() const { return weights_; }

  // One EmbeddingFile per weight, named "<name>.pdle".
  void save(const std::filesystem::path& dir) const;

 private:
  friend class BoundEncoder;
  EncoderConfig config_;
  std::vector<std::pair<std::string, Tensor>> weights_;
};

// End -> [prompt; name], Front -> [name; prompt], Middle -> the name inserted
// after the first floor(p/2) prompt rows. Only the prompt carries gradient.
Var assemble_description(Tape& tape, Var prompt, Position position, const Tensor& class_tokens);
Tensor assemble_description(const Prompt& prompt, const Tensor& class_tokens);

Var encode_text(const BoundEncoder& encoder, Var tokens);
Tensor encode_text(const TextEncoder& encoder, const Tensor& tokens);

// Embedding of the bare prompt, without any class name.
Var encode_prompt_semantic(const BoundEncoder& encoder, Var prompt);
Tensor encode_prompt_semantic(const TextEncoder& encoder, const Prompt& prompt);

}  // namespace proda
