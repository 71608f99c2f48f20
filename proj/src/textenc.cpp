#include "proda/textenc.hpp"

#include <cmath>

#include "proda/dataio.hpp"
#include "proda/rng.hpp"

namespace proda {

std::string_view to_string(Position p) {
  switch (p) {
    case Position::Front: return "front";
    case Position::Middle: return "middle";
    case Position::End: return "end";
  }
  return "end";
}

Position position_from_string(std::string_view s) {
  if (s == "front") return Position::Front;
  if (s == "middle") return Position::Middle;
  if (s == "end") return Position::End;
  throw InvalidArgument("unknown prompt position '" + std::string(s) + "'");
}

std::string_view to_string(EncoderKind k) {
  return k == EncoderKind::MeanPoolMLP ? "mean-pool-mlp" : "single-attention-block";
}

EncoderKind encoder_kind_from_string(std::string_view s) {
  if (s == "mean-pool-mlp") return EncoderKind::MeanPoolMLP;
  if (s == "single-attention-block") return EncoderKind::SingleAttentionBlock;
  throw InvalidArgument("unknown encoder kind '" + std::string(s) + "'");
}

PositionHistogram PromptCollection::histogram() const {
  PositionHistogram h;
  for (const auto& p : prompts) {
    switch (p.position) {
      case Position::Front: ++h.front; break;
      case Position::Middle: ++h.middle; break;
      case Position::End: ++h.end; break;
    }
  }
  return h;
}

PromptCollection init_prompt_collection(std::size_t count, std::size_t length, std::size_t dim,
                                        std::uint64_t seed) {
  if (count == 0 || length == 0 || dim == 0) {
    throw InvalidArgument("prompt collection needs K, p, e >= 1");
  }
  PromptCollection out;
  out.seed = seed;
  out.prompts.reserve(count);
  Rng rng(seed);
  const std::size_t quarter = count / 4;
  for (std::size_t k = 0; k < count; ++k) {
    Prompt p;
    p.tokens = Tensor(length, dim);
    for (double& v : p.tokens.data()) v = kPromptInitStd * rng.normal();
    p.position = k < quarter ? Position::Front
                 : k < 2 * quarter ? Position::Middle
                                   : Position::End;
    out.prompts.push_back(std::move(p));
  }
  return out;
}

void set_all_positions(PromptCollection& collection, Position position) {
  for (auto& p : collection.prompts) p.position = position;
}

// ---------------------------------------------------------------------------

namespace {

Tensor gaussian(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  Tensor t(rows, cols);
  for (double& v : t.data()) v = stddev * rng.normal();
  return t;
}

std::vector<std::string> weight_names(EncoderKind kind) {
  std::vector<std::string> names;
  if (kind == EncoderKind::SingleAttentionBlock) {
    names = {"attn.pos", "attn.wq", "attn.wk", "attn.wv"};
  }
  names.insert(names.end(), {"head.w1", "head.b1", "head.w2", "head.b2"});
  return names;
}

}  // namespace

TextEncoder::TextEncoder(EncoderConfig config) : config_(std::move(config)) {
  const std::size_t e = config_.input_dim, h = config_.hidden_dim, d = config_.output_dim;
  if (e == 0 || h == 0 || d == 0) throw InvalidArgument("encoder dimensions must be >= 1");

  if (config_.weight_path) {
    for (const auto& name : weight_names(config_.kind)) {
      const auto file = *config_.weight_path / (name + ".pdle");
      weights_.emplace_back(name, read_embedding(file).to_matrix());
    }
    auto expect = [&](std::size_t i, std::size_t r, std::size_t c) {
      const Tensor& w = weights_.at(i).second;
      if (w.rows() != r || w.cols() != c) {
        throw DataError("encoder weight " + weights_[i].first + " has shape " +
                        w.shape_string());
      }
    };
    std::size_t i = 0;
    if (config_.kind == EncoderKind::SingleAttentionBlock) {
      config_.max_positions = weights_[0].second.rows();
      expect(i++, config_.max_positions, e);
      expect(i++, e, e);
      expect(i++, e, e);
      expect(i++, e, e);
    }
    expect(i++, e, h);
    expect(i++, 1, h);
    expect(i++, h, d);
    expect(i++, 1, d);
    return;
  }

  Rng rng(config_.weight_seed);
  const double inv_e = 1.0 / std::sqrt(static_cast<double>(e));
  if (config_.kind == EncoderKind::SingleAttentionBlock) {
    // Positions and projections live at the token scale so that the
    // attention pattern depends on where the class name sits.
    weights_.emplace_back("attn.pos", gaussian(rng, config_.max_positions, e, 0.05));
    weights_.emplace_back("attn.wq", gaussian(rng, e, e, config_.gain * inv_e));
    weights_.emplace_back("attn.wk", gaussian(rng, e, e, config_.gain * inv_e));
    weights_.emplace_back("attn.wv", gaussian(rng, e, e, inv_e));
  }
  weights_.emplace_back("head.w1", gaussian(rng, e, h, config_.gain * inv_e));
  weights_.emplace_back("head.b1", gaussian(rng, 1, h, 0.1));
  weights_.emplace_back("head.w2", gaussian(rng, h, d, 1.0 / std::sqrt(static_cast<double>(h))));
  weights_.emplace_back("head.b2", gaussian(rng, 1, d, 0.01));
}

Tensor TextEncoder::encode(const Tensor& tokens) const {
  Tape tape;
  return bind(tape).encode(tape.constant(tokens)).value();
}

void TextEncoder::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  for (const auto& [name, w] : weights_) {
    write_embedding(dir / (name + ".pdle"), w, DType::F64);
  }
}

BoundEncoder::BoundEncoder(const TextEncoder& encoder, Tape& tape)
    : encoder_(&encoder), tape_(&tape) {
  weights_.reserve(encoder.weights_.size());
  for (const auto& [name, w] : encoder.weights_) weights_.push_back(tape.constant(w));
}

Var BoundEncoder::encode(Var tokens) const {
  const EncoderConfig& cfg = encoder_->config();
  if (tokens.rows() == 0) throw ShapeError("encode_text of an empty sequence");
  if (tokens.cols() != cfg.input_dim) {
    throw ShapeError("token dim " + std::to_string(tokens.cols()) + " != encoder input dim " +
                     std::to_string(cfg.input_dim));
  }
  std::size_t w = 0;
  Var pooled;
  if (cfg.kind == EncoderKind::SingleAttentionBlock) {
    const std::size_t n = tokens.rows();
    if (n > cfg.max_positions) throw ShapeError("sequence longer than the positional table");
    Var x = tokens + diff::slice_rows(weights_[0], 0, n);
    Var q = diff::matmul(x, weights_[1]);
    Var k = diff::matmul(x, weights_[2]);
    Var v = diff::matmul(x, weights_[3]);
    Var scores = diff::matmul(q, diff::transpose(k)) /
                 std::sqrt(static_cast<double>(cfg.input_dim));
    Var attn = diff::exp(scores - diff::logsumexp(scores, diff::Axis::Cols));
    pooled = diff::mean(x + diff::matmul(attn, v), diff::Axis::Rows);
    w = 4;
  } else {
    pooled = diff::mean(tokens, diff::Axis::Rows);
  }
  Var hidden = diff::tanh(diff::matmul(pooled, weights_[w]) + weights_[w + 1]);
  Var out = diff::matmul(hidden, weights_[w + 2]) + weights_[w + 3];
  return diff::l2_normalize(out);
}

// ---------------------------------------------------------------------------

Var assemble_description(Tape& tape, Var prompt, Position position, const Tensor& class_tokens) {
  if (prompt.cols() != class_tokens.cols()) {
    throw ShapeError("prompt dim " + std::to_string(prompt.cols()) + " != class token dim " +
                     std::to_string(class_tokens.cols()));
  }
  if (class_tokens.rows() == 0) throw ShapeError("class name has no tokens");
  Var name = tape.constant(class_tokens);
  switch (position) {
    case Position::End: {
      const Var parts[] = {prompt, name};
      return diff::concat_rows(parts);
    }
    case Position::Front: {
      const Var parts[] = {name, prompt};
      return diff::concat_rows(parts);
    }
    case Position::Middle: {
      const std::size_t split = prompt.rows() / 2;
      const Var parts[] = {diff::slice_rows(prompt, 0, split), name,
                           diff::slice_rows(prompt, split, prompt.rows())};
      return diff::concat_rows(parts);
    }
  }
  throw InvalidArgument("bad position");
}

Tensor assemble_description(const Prompt& prompt, const Tensor& class_tokens) {
  Tape tape;
  return assemble_description(tape, tape.constant(prompt.tokens), prompt.position, class_tokens)
      .value();
}

Var encode_text(const BoundEncoder& encoder, Var tokens) { return encoder.encode(tokens); }

Tensor encode_text(const TextEncoder& encoder, const Tensor& tokens) {
  return encoder.encode(tokens);
}

Var encode_prompt_semantic(const BoundEncoder& encoder, Var prompt) {
  return encoder.encode(prompt);
}

Tensor encode_prompt_semantic(const TextEncoder& encoder, const Prompt& prompt) {
  return encoder.encode(prompt.tokens);
}

}  // namespace proda
