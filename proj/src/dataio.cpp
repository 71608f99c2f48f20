#include "proda/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include <openssl/evp.h>

#include "json.hpp"
#include "proda/rng.hpp"

namespace proda {

using nlohmann::json;

std::size_t element_size(DType t) {
  switch (t) {
    case DType::F32: return 4;
    case DType::F64: return 8;
    case DType::U32: return 4;
  }
  throw DataError("unknown dtype");
}

std::size_t StoredTensor::element_count() const {
  return std::visit([](const auto& v) { return v.size(); }, data);
}

namespace {

std::size_t product(std::span<const std::uint64_t> dims) {
  std::size_t n = 1;
  for (auto d : dims) {
    if (d != 0 && n > std::numeric_limits<std::size_t>::max() / d) {
      throw DataError("tensor dimensions overflow");
    }
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::vector<double> widened(const StoredTensor& t) {
  return std::visit(
      [](const auto& v) { return std::vector<double>(v.begin(), v.end()); }, t.data);
}

}  // namespace

Tensor StoredTensor::to_matrix() const {
  if (dims.size() == 1) return Tensor(1, dims[0], widened(*this));
  if (dims.size() == 2) return Tensor(dims[0], dims[1], widened(*this));
  throw DataError("expected a rank-1 or rank-2 tensor, got rank " + std::to_string(dims.size()));
}

std::vector<Tensor> StoredTensor::to_slices() const {
  if (dims.size() == 2) return {to_matrix()};
  if (dims.size() != 3) throw DataError("expected a rank-3 tensor, got rank " + std::to_string(dims.size()));
  const std::vector<double> all = widened(*this);
  const std::size_t r = dims[1], c = dims[2];
  std::vector<Tensor> out;
  for (std::size_t s = 0; s < dims[0]; ++s) {
    out.emplace_back(r, c, std::vector<double>(all.begin() + s * r * c, all.begin() + (s + 1) * r * c));
  }
  return out;
}

std::vector<std::size_t> StoredTensor::to_labels() const {
  if (dims.size() != 1 || dtype() != DType::U32) throw DataError("labels must be a rank-1 u32 tensor");
  const auto& v = std::get<std::vector<std::uint32_t>>(data);
  return {v.begin(), v.end()};
}

namespace {

StoredTensor make_from_values(std::vector<std::uint64_t> dims, std::span<const double> values,
                              DType dtype) {
  StoredTensor out;
  out.dims = std::move(dims);
  for (double v : values) {
    if (!std::isfinite(v)) throw DataError("refusing to write a non-finite value");
  }
  switch (dtype) {
    case DType::F64: out.data = std::vector<double>(values.begin(), values.end()); break;
    case DType::F32: {
      std::vector<float> f(values.size());
      for (std::size_t i = 0; i < values.size(); ++i) {
        f[i] = static_cast<float>(values[i]);
        if (!std::isfinite(f[i])) throw DataError("value out of f32 range");
      }
      out.data = std::move(f);
      break;
    }
    case DType::U32: {
      std::vector<std::uint32_t> u(values.size());
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double v = values[i];
        if (v < 0 || v > 4294967295.0 || v != std::floor(v)) {
          throw DataError("value not representable as u32");
        }
        u[i] = static_cast<std::uint32_t>(v);
      }
      out.data = std::move(u);
      break;
    }
  }
  return out;
}

}  // namespace

StoredTensor make_stored(const Tensor& t, DType dtype) {
  return make_from_values({t.rows(), t.cols()}, t.data(), dtype);
}

StoredTensor make_stored(std::span<const Tensor> slices, DType dtype) {
  if (slices.empty()) throw InvalidArgument("no slices to store");
  std::vector<double> all;
  for (const Tensor& s : slices) {
    if (!s.same_shape(slices.front())) throw ShapeError("slices differ in shape");
    all.insert(all.end(), s.data().begin(), s.data().end());
  }
  return make_from_values({slices.size(), slices.front().rows(), slices.front().cols()}, all, dtype);
}

StoredTensor make_labels(std::span<const std::size_t> labels) {
  StoredTensor out;
  out.dims = {labels.size()};
  std::vector<std::uint32_t> u;
  u.reserve(labels.size());
  for (std::size_t y : labels) {
    if (y > 0xffffffffu) throw DataError("label does not fit u32");
    u.push_back(static_cast<std::uint32_t>(y));
  }
  out.data = std::move(u);
  return out;
}

// ---------------------------------------------------------------------------

namespace {

template <typename U>
void put(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename U>
U get(std::span<const std::uint8_t> in, std::size_t& pos) {
  if (in.size() - pos < sizeof(U)) throw DataError("truncated embedding file header");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(in[pos + i]) << (8 * i);
  pos += sizeof(U);
  return v;
}

}  // namespace

std::vector<std::uint8_t> encode_embedding(const StoredTensor& t) {
  if (product(t.dims) != t.element_count()) throw ShapeError("dims do not match element count");
  std::vector<std::uint8_t> out;
  out.reserve(16 + 8 * t.dims.size() + element_size(t.dtype()) * t.element_count());
  out.insert(out.end(), {'P', 'D', 'L', 'E'});
  put<std::uint32_t>(out, kEmbeddingFileVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t.dtype()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t.dims.size()));
  for (auto d : t.dims) put<std::uint64_t>(out, d);
  std::visit(
      [&](const auto& values) {
        using T = typename std::decay_t<decltype(values)>::value_type;
        for (T v : values) {
          if constexpr (std::is_same_v<T, float>) {
            std::uint32_t bits;
            std::memcpy(&bits, &v, 4);
            put(out, bits);
          } else if constexpr (std::is_same_v<T, double>) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, 8);
            put(out, bits);
          } else {
            put(out, v);
          }
        }
      },
      t.data);
  return out;
}

StoredTensor decode_embedding(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "PDLE", 4) != 0) {
    throw DataError("bad magic: not an embedding file");
  }
  std::size_t pos = 4;
  const auto version = get<std::uint32_t>(bytes, pos);
  if (version != kEmbeddingFileVersion) {
    throw DataError("unsupported embedding file version " + std::to_string(version));
  }
  const auto code = get<std::uint32_t>(bytes, pos);
  if (code > 2) throw DataError("unknown dtype code " + std::to_string(code));
  const auto rank = get<std::uint32_t>(bytes, pos);
  if (rank > 16) throw DataError("implausible rank " + std::to_string(rank));
  StoredTensor out;
  for (std::uint32_t i = 0; i < rank; ++i) out.dims.push_back(get<std::uint64_t>(bytes, pos));
  const std::size_t n = product(out.dims);
  const auto dtype = static_cast<DType>(code);
  const std::size_t need = n * element_size(dtype);
  if (n != 0 && need / n != element_size(dtype)) throw DataError("payload size overflow");
  if (bytes.size() - pos < need) throw DataError("truncated embedding payload");
  if (bytes.size() - pos > need) throw DataError("trailing bytes after embedding payload");
  switch (dtype) {
    case DType::F32: {
      std::vector<float> v(n);
      for (auto& x : v) {
        const auto bits = get<std::uint32_t>(bytes, pos);
        std::memcpy(&x, &bits, 4);
      }
      out.data = std::move(v);
      break;
    }
    case DType::F64: {
      std::vector<double> v(n);
      for (auto& x : v) {
        const auto bits = get<std::uint64_t>(bytes, pos);
        std::memcpy(&x, &bits, 8);
      }
      out.data = std::move(v);
      break;
    }
    case DType::U32: {
      std::vector<std::uint32_t> v(n);
      for (auto& x : v) x = get<std::uint32_t>(bytes, pos);
      out.data = std::move(v);
      break;
    }
  }
  return out;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw DataError("read failure on " + path.string());
  return bytes;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failure on " + path.string());
}

void write_embedding(const std::filesystem::path& path, const StoredTensor& t) {
  write_file(path, encode_embedding(t));
}

void write_embedding(const std::filesystem::path& path, const Tensor& t, DType dtype) {
  write_embedding(path, make_stored(t, dtype));
}

StoredTensor read_embedding(const std::filesystem::path& path) {
  try {
    return decode_embedding(read_file(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 computation failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 15]);
  }
  return out;
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_file(path)); }

// ---------------------------------------------------------------------------

void validate_task(const FewShotTask& task) {
  const std::size_t C = task.classes(), d = task.dim();
  if (C < 2) throw DataError("task needs at least two classes");
  if (task.test_z.rows() == 0) throw DataError("task has no test examples");
  if (task.test_z.rows() != task.test_labels.size()) throw DataError("test labels do not match features");
  if (task.train_z.rows() != task.train_labels.size()) throw DataError("train labels do not match features");
  if (!task.train_labels.empty() && task.train_z.cols() != d) {
    throw DataError("train features have dim " + std::to_string(task.train_z.cols()) +
                    ", test features " + std::to_string(d));
  }
  std::vector<std::size_t> per_class(C, 0);
  for (std::size_t y : task.train_labels) {
    if (y >= C) throw DataError("train label out of range");
    ++per_class[y];
  }
  for (std::size_t y : task.test_labels) {
    if (y >= C) throw DataError("test label out of range");
  }
  if (!task.train_labels.empty()) {
    for (std::size_t c = 0; c < C; ++c) {
      if (per_class[c] != task.shots) {
        throw DataError("class " + std::to_string(c) + " has " + std::to_string(per_class[c]) +
                        " training examples, expected " + std::to_string(task.shots));
      }
    }
  }
  if (task.name_tokens.classes() != 0) {
    if (task.name_tokens.classes() != C) throw DataError("name tokens do not cover every class");
    for (const Tensor& t : task.name_tokens.per_class) {
      if (t.rows() == 0 || t.cols() != task.name_tokens.dim()) {
        throw DataError("name token matrices disagree in width");
      }
    }
    if (task.encoder && task.encoder->input_dim != task.name_tokens.dim()) {
      throw DataError("name token width does not match the encoder input dim");
    }
  }
  if (task.encoder && task.encoder->output_dim != d) {
    throw DataError("encoder output dim " + std::to_string(task.encoder->output_dim) +
                    " does not match feature dim " + std::to_string(d));
  }
  for (const Tensor& w : task.class_weights) {
    if (w.rows() != C || w.cols() != d) throw DataError("class_weights must be [P, C, dim]");
  }
}

namespace {

Tensor normalized(Tensor v) {
  double n = 0.0;
  for (double x : v.data()) n += x * x;
  n = std::sqrt(n);
  if (n == 0.0) throw NumericError("zero-norm synthetic image embedding");
  for (double& x : v.data()) x /= n;
  return v;
}

}  // namespace

Prompt empty_prompt(std::size_t length, std::size_t dim) {
  return Prompt{Tensor(length, dim), Position::End};
}

FewShotTask gen_synthetic_task(const SyntheticSpec& spec, const TextEncoder& encoder) {
  if (spec.classes < 2) throw InvalidArgument("synthetic task needs at least two classes");
  if (spec.shots < 1) throw InvalidArgument("synthetic task needs shots >= 1");
  if (spec.dim != encoder.output_dim()) {
    throw InvalidArgument("dim " + std::to_string(spec.dim) + " != encoder output dim " +
                          std::to_string(encoder.output_dim()));
  }
  if (!(spec.noise_sigma >= 0.0)) throw InvalidArgument("noise sigma must be >= 0");
  const std::size_t C = spec.classes, e = encoder.input_dim(), d = spec.dim;

  for (std::uint64_t seed = spec.seed;; ++seed) {
    Rng rng(seed);
    FewShotTask task;
    for (std::size_t c = 0; c < C; ++c) {
      Tensor t(spec.name_length, e);
      for (double& v : t.data()) v = spec.name_std * rng.normal();
      task.name_tokens.per_class.push_back(std::move(t));
      task.class_names.push_back("class" + std::to_string(c));
    }
    Prompt context{Tensor(spec.context_length, e), Position::End};
    std::vector<double> base(e);
    for (double& v : base) v = spec.context_std * rng.normal();
    for (std::size_t r = 0; r < spec.context_length; ++r)
      for (std::size_t k = 0; k < e; ++k)
        context.tokens(r, k) = base[k] + spec.context_jitter * spec.context_std * rng.normal();

    std::vector<Tensor> anchors;
    for (std::size_t c = 0; c < C; ++c) {
      anchors.push_back(encode_text(encoder, assemble_description(context, task.name_tokens.per_class[c])));
    }
    double closest = INFINITY;
    for (std::size_t a = 0; a < C; ++a)
      for (std::size_t b = a + 1; b < C; ++b) {
        double dist = 0.0;
        for (std::size_t k = 0; k < d; ++k) dist += std::pow(anchors[a][k] - anchors[b][k], 2);
        closest = std::min(closest, std::sqrt(dist));
      }
    if (closest < 1e-3) continue;

    auto draw = [&](std::size_t per_class, Tensor& z, std::vector<std::size_t>& labels) {
      z = Tensor(C * per_class, d);
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t s = 0; s < per_class; ++s) {
          Tensor v(1, d);
          for (std::size_t k = 0; k < d; ++k) v[k] = anchors[c][k] + spec.noise_sigma * rng.normal();
          v = normalized(std::move(v));
          std::copy(v.data().begin(), v.data().end(), z.row_span(c * per_class + s).begin());
          labels.push_back(c);
        }
      }
    };
    draw(spec.shots, task.train_z, task.train_labels);
    draw(spec.test_per_class, task.test_z, task.test_labels);
    task.shots = spec.shots;
    task.seed = seed;
    task.encoder = encoder.config();
    return task;
  }
}

// ---------------------------------------------------------------------------

namespace {

json encoder_to_json(const EncoderConfig& cfg) {
  json j = {{"kind", std::string(to_string(cfg.kind))},
            {"input_dim", cfg.input_dim},
            {"hidden_dim", cfg.hidden_dim},
            {"output_dim", cfg.output_dim},
            {"gain", cfg.gain},
            {"seed", cfg.weight_seed}};
  if (cfg.kind == EncoderKind::SingleAttentionBlock) j["max_positions"] = cfg.max_positions;
  if (cfg.weight_path) j["weights"] = cfg.weight_path->string();
  return j;
}

EncoderConfig encoder_from_json(const json& j, const std::filesystem::path& base) {
  EncoderConfig cfg;
  cfg.kind = encoder_kind_from_string(j.value("kind", "mean-pool-mlp"));
  cfg.input_dim = j.at("input_dim").get<std::size_t>();
  cfg.hidden_dim = j.at("hidden_dim").get<std::size_t>();
  cfg.output_dim = j.at("output_dim").get<std::size_t>();
  cfg.gain = j.value("gain", cfg.gain);
  cfg.weight_seed = j.value("seed", std::uint64_t{0});
  cfg.max_positions = j.value("max_positions", cfg.max_positions);
  if (j.contains("weights")) cfg.weight_path = base / j.at("weights").get<std::string>();
  return cfg;
}

}  // namespace

std::filesystem::path save_task(const FewShotTask& task, const std::filesystem::path& dir,
                                DType dtype) {
  validate_task(task);
  if (dtype == DType::U32) throw InvalidArgument("features must be stored as f32 or f64");
  std::filesystem::create_directories(dir);
  json checksums = json::object();
  auto emit = [&](const std::string& name, const StoredTensor& t) {
    auto bytes = encode_embedding(t);
    write_file(dir / name, bytes);
    checksums[name] = sha256_hex(bytes);
    return name;
  };

  json m;
  m["version"] = kManifestVersion;
  m["dim"] = task.dim();
  m["classes"] = task.class_names;
  m["name_token_files"] = json::array();
  if (task.name_tokens.classes() != 0) {
    m["name_token_files"].push_back(emit("name_tokens.pdle", make_stored(task.name_tokens.per_class, dtype)));
  }
  if (!task.train_labels.empty()) {
    m["train_features"] = emit("train_features.pdle", make_stored(task.train_z, dtype));
    m["train_labels"] = emit("train_labels.pdle", make_labels(task.train_labels));
  }
  m["test_features"] = emit("test_features.pdle", make_stored(task.test_z, dtype));
  m["test_labels"] = emit("test_labels.pdle", make_labels(task.test_labels));
  if (!task.class_weights.empty()) {
    m["class_weights"] = emit("class_weights.pdle", make_stored(task.class_weights, dtype));
  }
  m["shots"] = task.shots;
  m["metric"] = std::string(to_string(task.metric));
  m["seed"] = task.seed;
  m["prng"] = std::string(Rng::kAlgorithm);
  if (task.encoder) m["encoder"] = encoder_to_json(*task.encoder);
  if (task.reference_json) {
    const std::string text = *task.reference_json;
    write_file(dir / "reference.json", std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
    m["reference"] = "reference.json";
  }
  m["checksums"] = checksums;
  const auto path = dir / "task.json";
  const std::string text = m.dump(2) + "\n";
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  return path;
}

std::vector<std::size_t> subsample_shots(std::span<const std::size_t> labels, std::size_t classes,
                                         std::size_t shots, std::uint64_t seed) {
  if (shots == 0) throw InvalidArgument("shots must be >= 1");
  Rng rng(seed);
  std::vector<std::size_t> keep;
  for (std::size_t c = 0; c < classes; ++c) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == c) idx.push_back(i);
    }
    if (idx.size() < shots) {
      throw DataError("class " + std::to_string(c) + " has only " + std::to_string(idx.size()) +
                      " training examples, " + std::to_string(shots) + " requested");
    }
    rng.shuffle(std::span<std::size_t>(idx));
    keep.insert(keep.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(shots));
  }
  return keep;
}

FewShotTask load_task(const std::filesystem::path& manifest, std::optional<std::size_t> shots) {
  const auto base = manifest.parent_path();
  json m;
  try {
    const auto bytes = read_file(manifest);
    m = json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw DataError(manifest.string() + ": malformed manifest: " + e.what());
  }

  try {
    if (m.at("version").get<std::uint32_t>() != kManifestVersion) {
      throw DataError("unsupported manifest version");
    }
    if (m.contains("prng") && m.at("prng").get<std::string>() != Rng::kAlgorithm) {
      throw DataError("manifest uses PRNG '" + m.at("prng").get<std::string>() +
                      "', this build implements " + std::string(Rng::kAlgorithm));
    }
    const json sums = m.value("checksums", json::object());
    auto load = [&](const std::string& name) {
      const auto bytes = read_file(base / name);
      if (sums.contains(name) && sums.at(name).get<std::string>() != sha256_hex(bytes)) {
        throw DataError("checksum mismatch for " + name);
      }
      try {
        return decode_embedding(bytes);
      } catch (const DataError& e) {
        throw DataError(name + ": " + e.what());
      }
    };

    FewShotTask task;
    const auto dim = m.at("dim").get<std::size_t>();
    task.class_names = m.at("classes").get<std::vector<std::string>>();
    const std::size_t C = task.class_names.size();
    const auto token_files = m.value("name_token_files", std::vector<std::string>{});
    if (token_files.size() == 1) {
      task.name_tokens.per_class = load(token_files.front()).to_slices();
    } else {
      for (const auto& f : token_files) task.name_tokens.per_class.push_back(load(f).to_matrix());
    }
    if (!token_files.empty() && task.name_tokens.classes() != C) {
      throw DataError("name tokens cover " + std::to_string(task.name_tokens.classes()) +
                      " classes, manifest lists " + std::to_string(C));
    }
    if (m.contains("train_features")) {
      task.train_z = load(m.at("train_features").get<std::string>()).to_matrix();
      task.train_labels = load(m.at("train_labels").get<std::string>()).to_labels();
    }
    task.test_z = load(m.at("test_features").get<std::string>()).to_matrix();
    task.test_labels = load(m.at("test_labels").get<std::string>()).to_labels();
    if (task.test_z.cols() != dim) {
      throw DataError("test features have dim " + std::to_string(task.test_z.cols()) +
                      ", manifest says " + std::to_string(dim));
    }
    if (m.contains("class_weights")) {
      const StoredTensor w = load(m.at("class_weights").get<std::string>());
      if (w.dims.size() != 3 || w.dims[1] != C || w.dims[2] != dim) {
        throw DataError("class_weights must have shape [P, " + std::to_string(C) + ", " +
                        std::to_string(dim) + "]");
      }
      task.class_weights = w.to_slices();
    }
    task.shots = m.value("shots", std::size_t{0});
    task.metric = metric_from_string(m.value("metric", "accuracy"));
    task.seed = m.value("seed", std::uint64_t{0});
    if (m.contains("encoder")) task.encoder = encoder_from_json(m.at("encoder"), base);
    if (m.contains("reference")) {
      const auto bytes = read_file(base / m.at("reference").get<std::string>());
      task.reference_json = std::string(bytes.begin(), bytes.end());
    }

    if (shots && !task.train_labels.empty()) {
      const auto keep = subsample_shots(task.train_labels, C, *shots, task.seed);
      if (keep.size() != task.train_labels.size()) {
        Tensor z(keep.size(), task.train_z.cols());
        std::vector<std::size_t> labels;
        for (std::size_t i = 0; i < keep.size(); ++i) {
          auto src = task.train_z.row_span(keep[i]);
          std::copy(src.begin(), src.end(), z.row_span(i).begin());
          labels.push_back(task.train_labels[keep[i]]);
        }
        task.train_z = std::move(z);
        task.train_labels = std::move(labels);
      }
      task.shots = *shots;
    }
    validate_task(task);
    return task;
  } catch (const json::exception& e) {
    throw DataError(manifest.string() + ": " + e.what());
  }
}

}  // namespace proda
