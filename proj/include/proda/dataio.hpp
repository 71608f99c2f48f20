#pragma once

// EmbeddingFile container, task manifests and the synthetic task generator.
//
// EmbeddingFile layout (little-endian throughout):
//   "PDLE" | u32 version = 1 | u32 dtype (0 f32, 1 f64, 2 u32) | u32 rank
//   | rank x u64 dims | row-major payload

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "proda/inference.hpp"
#include "proda/textenc.hpp"

namespace proda {

inline constexpr std::uint32_t kEmbeddingFileVersion = 1;
inline constexpr std::uint32_t kManifestVersion = 1;

enum class DType : std::uint32_t { F32 = 0, F64 = 1, U32 = 2 };

std::size_t element_size(DType t);

struct StoredTensor {
  std::vector<std::uint64_t> dims;
  std::variant<std::vector<float>, std::vector<double>, std::vector<std::uint32_t>> data;

  DType dtype() const { return static_cast<DType>(data.index()); }
  std::size_t element_count() const;

  // Rank 2 as is, rank 1 as a single row. Values widened to double.
  Tensor to_matrix() const;
  // Rank 3 [n, r, c] as n matrices, rank 2 as one.
  std::vector<Tensor> to_slices() const;
  // Rank-1 u32 labels.
  std::vector<std::size_t> to_labels() const;

  friend bool operator==(const StoredTensor&, const StoredTensor&) = default;
};

// f64 -> f32 rounds to nearest even; non-finite values or out-of-range f32
// results are rejected.
StoredTensor make_stored(const Tensor& t, DType dtype);
StoredTensor make_stored(std::span<const Tensor> slices, DType dtype);
StoredTensor make_labels(std::span<const std::size_t> labels);

std::vector<std::uint8_t> encode_embedding(const StoredTensor& t);
StoredTensor decode_embedding(std::span<const std::uint8_t> bytes);

void write_embedding(const std::filesystem::path& path, const StoredTensor& t);
void write_embedding(const std::filesystem::path& path, const Tensor& t, DType dtype);
StoredTensor read_embedding(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_file(const std::filesystem::path& path);

// ---------------------------------------------------------------------------

struct FewShotTask {
  std::vector<std::string> class_names;
  ClassNameTokens name_tokens;  // empty for feature-only (exported) tasks
  Tensor train_z;
  std::vector<std::size_t> train_labels;
  Tensor test_z;
  std::vector<std::size_t> test_labels;
  std::size_t shots = 0;
  MetricKind metric = MetricKind::Accuracy;
  std::uint64_t seed = 0;
  std::optional<EncoderConfig> encoder;
  // Per-prompt-set class embeddings [P, C, d], e.g. hand-crafted templates.
  std::vector<Tensor> class_weights;
  // Optional reference.json contents, kept opaque.
  std::optional<std::string> reference_json;

  std::size_t classes() const { return class_names.size(); }
  std::size_t dim() const { return test_z.cols(); }
  bool trainable() const { return name_tokens.classes() == classes() && encoder.has_value(); }
};

// Checks labels, shot counts and dimensions.
void validate_task(const FewShotTask& task);

struct SyntheticSpec {
  std::size_t classes = 10;
  std::size_t shots = 1;
  std::size_t dim = 32;
  double noise_sigma = 0.6;
  std::uint64_t seed = 0;
  std::size_t test_per_class = 100;
  std::size_t name_length = 2;
  double name_std = 0.643;
  // Hidden context the anchors are rendered with: a shared mean row plus
  // per-row jitter at context_jitter times that scale.
  std::size_t context_length = 16;
  double context_std = 0.0714;
  double context_jitter = 0.1;
};

// Anchors u_c = encode_text(assemble([hidden context; name_c])), images
// L2-normalize(u_c + noise * N(0, I)). Train images come first, class-major,
// then the test images.
FewShotTask gen_synthetic_task(const SyntheticSpec& spec, const TextEncoder& encoder);

// Zero prompt tokens of the given length (class name at the end).
Prompt empty_prompt(std::size_t length, std::size_t dim);

// Writes the tensors and task.json (with SHA-256 checksums) into dir.
std::filesystem::path save_task(const FewShotTask& task, const std::filesystem::path& dir,
                                DType dtype = DType::F64);

// Loads a manifest. When shots is given and smaller than the stored count,
// each class keeps the first `shots` entries of its ascending index list
// after one Fisher-Yates pass, drawn class by class from Rng(manifest seed).
FewShotTask load_task(const std::filesystem::path& manifest,
                      std::optional<std::size_t> shots = std::nullopt);

std::vector<std::size_t> subsample_shots(std::span<const std::size_t> labels,
                                         std::size_t classes, std::size_t shots,
                                         std::uint64_t seed);

}  // namespace proda
