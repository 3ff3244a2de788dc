#pragma once

// Audio-based language embedding network.
//
//   frames (T x D) --encoder--> z_lang (64) --projection--> h_lang (32)
//   h_lang --> language head                      (language logits)
//   h_lang --> grad_reverse --> speaker head      (speaker logits, SAT)
//   [frame, h_lang] per frame --> phoneme head    (downstream proxy task)
//
// Parameters live in four freeze groups. The encoder is pretrained alone on
// language identification and then frozen; stage 1 trains projection,
// classifiers and the phoneme head; stage 2 trains only the phoneme head.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "langemb/binary_io.hpp"
#include "langemb/config.hpp"
#include "langemb/random.hpp"
#include "langemb/tensor.hpp"

namespace langemb {

enum class ParamGroup { kEncoder, kProjection, kClassifiers, kDownstream };

inline constexpr std::array<ParamGroup, 4> kAllGroups{
    ParamGroup::kEncoder, ParamGroup::kProjection, ParamGroup::kClassifiers,
    ParamGroup::kDownstream};

inline const char* group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::kEncoder: return "encoder";
    case ParamGroup::kProjection: return "projection";
    case ParamGroup::kClassifiers: return "classifiers";
    case ParamGroup::kDownstream: return "downstream";
  }
  return "?";
}

inline ParamGroup group_from_name(const std::string& name) {
  for (ParamGroup g : kAllGroups)
    if (name == group_name(g)) return g;
  throw std::invalid_argument("unknown parameter group '" + name + "'");
}

struct ModelDims {
  std::size_t bins = 24;
  std::size_t conv_channels = 32;
  std::size_t kernel = 3;
  std::array<std::size_t, 3> dilations{1, 2, 3};
  std::size_t z_dim = 64;
  std::size_t h_dim = 32;
  std::size_t phoneme_hidden = 64;
  std::size_t n_languages = 6;       // seen languages (language head)
  std::size_t n_speakers = 48;       // seen speakers (speaker head)
  std::size_t n_phonemes_total = 56;  // global phoneme index space

  std::size_t receptive_field() const {
    std::size_t r = 1;
    for (std::size_t d : dilations) r += (kernel - 1) * d;
    return r;
  }

  static ModelDims from_corpus(const CorpusConfig& c) {
    ModelDims d;
    d.bins = static_cast<std::size_t>(c.bins);
    d.n_languages = static_cast<std::size_t>(c.n_seen_languages);
    d.n_speakers = static_cast<std::size_t>(c.n_seen_speakers());
    d.n_phonemes_total = static_cast<std::size_t>(c.n_phonemes_total());
    return d;
  }

  std::string describe() const {
    std::string s = "bins=" + std::to_string(bins) +
                    ";conv=" + std::to_string(conv_channels) +
                    ";kernel=" + std::to_string(kernel) + ";dil=";
    for (std::size_t d : dilations) s += std::to_string(d) + ",";
    s += ";z=" + std::to_string(z_dim) + ";h=" + std::to_string(h_dim) +
         ";ph=" + std::to_string(phoneme_hidden) +
         ";lang=" + std::to_string(n_languages) +
         ";spk=" + std::to_string(n_speakers) +
         ";phon=" + std::to_string(n_phonemes_total);
    return s;
  }
};

struct NamedParam {
  std::string name;
  ParamGroup group;
  Tensor value;
};

struct HeadOutputs {
  Tensor lang_logits;
  Tensor spk_logits;
};

/// Wraps an utterance's feature matrix as a constant T x D tensor.
inline Tensor frames_tensor(std::span<const double> features, std::size_t frames,
                            std::size_t bins) {
  return Tensor({frames, bins}, std::vector<double>(features.begin(), features.end()));
}

/// x (n x in) * W (in x out) + b
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return add_bias(matmul(x, weight), bias);
}

class ModelGraph {
 public:
  ModelGraph(ModelDims dims, std::uint64_t seed) : dims_(dims) {
    const std::size_t C = dims.conv_channels;
    std::size_t cin = dims.bins;
    for (std::size_t i = 0; i < dims.dilations.size(); ++i) {
      const std::string p = "encoder.tdnn" + std::to_string(i);
      add(p + ".weight", ParamGroup::kEncoder, {dims.kernel, cin, C},
          dims.kernel * cin, seed);
      add(p + ".bias", ParamGroup::kEncoder, {C}, 0, seed);
      cin = C;
    }
    add("encoder.linear.weight", ParamGroup::kEncoder, {2 * C, dims.z_dim}, 2 * C, seed);
    add("encoder.linear.bias", ParamGroup::kEncoder, {dims.z_dim}, 0, seed);
    add("projection.weight", ParamGroup::kProjection, {1, dims.z_dim, dims.h_dim},
        dims.z_dim, seed);
    add("projection.bias", ParamGroup::kProjection, {dims.h_dim}, 0, seed);
    add("classifiers.language.weight", ParamGroup::kClassifiers,
        {dims.h_dim, dims.n_languages}, dims.h_dim, seed);
    add("classifiers.language.bias", ParamGroup::kClassifiers, {dims.n_languages}, 0, seed);
    add("classifiers.speaker.weight", ParamGroup::kClassifiers,
        {dims.h_dim, dims.n_speakers}, dims.h_dim, seed);
    add("classifiers.speaker.bias", ParamGroup::kClassifiers, {dims.n_speakers}, 0, seed);
    const std::size_t in = dims.bins + dims.h_dim;
    add("downstream.hidden.weight", ParamGroup::kDownstream,
        {in, dims.phoneme_hidden}, in, seed);
    add("downstream.hidden.bias", ParamGroup::kDownstream, {dims.phoneme_hidden}, 0, seed);
    add("downstream.output.weight", ParamGroup::kDownstream,
        {dims.phoneme_hidden, dims.n_phonemes_total}, dims.phoneme_hidden, seed);
    add("downstream.output.bias", ParamGroup::kDownstream, {dims.n_phonemes_total}, 0, seed);
  }

  const ModelDims& dims() const { return dims_; }

  // --- encoder -------------------------------------------------------------

  /// T x D frames -> 1 x z_dim.
  Tensor encode_row(const Tensor& frames) const {
    if (frames.rank() != 2 || frames.dim(1) != dims_.bins) {
      throw ShapeError("encode: expected T x " + std::to_string(dims_.bins) +
                       " frames, got " + shape_str(frames.shape()));
    }
    if (frames.dim(0) < dims_.receptive_field()) {
      throw ShapeError("encode: utterance has " + std::to_string(frames.dim(0)) +
                       " frames, the encoder needs at least " +
                       std::to_string(dims_.receptive_field()));
    }
    Tensor x = frames;
    for (std::size_t i = 0; i < dims_.dilations.size(); ++i) {
      const std::string p = "encoder.tdnn" + std::to_string(i);
      x = relu(conv1d(x, param(p + ".weight"), param(p + ".bias"),
                      dims_.dilations[i]));
    }
    Tensor pooled = reshape(statistics_pooling(x), {1, 2 * dims_.conv_channels});
    return linear(pooled, param("encoder.linear.weight"), param("encoder.linear.bias"));
  }

  /// z_lang as a length-z_dim vector.
  Tensor encode(const Tensor& frames) const {
    return reshape(encode_row(frames), {dims_.z_dim});
  }

  // --- projection ----------------------------------------------------------

  /// B x z_dim -> B x h_dim. A kernel-size-1 convolution treats the rows as
  /// independent positions, so each z_lang is projected on its own.
  Tensor project(const Tensor& z) const {
    if (z.rank() != 2 || z.dim(1) != dims_.z_dim) {
      throw ShapeError("project: expected B x " + std::to_string(dims_.z_dim) +
                       " input, got " + shape_str(z.shape()));
    }
    return relu(conv1d(z, param("projection.weight"), param("projection.bias"), 1));
  }

  /// Projection-disabled ablation: the leading h_dim coordinates of z_lang.
  Tensor truncate(const Tensor& z) const {
    if (z.rank() != 2 || z.dim(1) != dims_.z_dim) {
      throw ShapeError("truncate: expected B x " + std::to_string(dims_.z_dim) +
                       " input, got " + shape_str(z.shape()));
    }
    return slice_cols(z, 0, dims_.h_dim);
  }

  Tensor embed(const Tensor& z, bool projection_enabled) const {
    return projection_enabled ? project(z) : truncate(z);
  }

  // --- heads ---------------------------------------------------------------

  HeadOutputs forward_heads(const Tensor& h, bool sat_enabled, double lambda) const {
    HeadOutputs out;
    out.lang_logits = linear(h, param("classifiers.language.weight"),
                             param("classifiers.language.bias"));
    const Tensor spk_in = sat_enabled ? grad_reverse(h, lambda) : h;
    out.spk_logits = linear(spk_in, param("classifiers.speaker.weight"),
                            param("classifiers.speaker.bias"));
    return out;
  }

  /// Per-frame phoneme logits for a batch. frames[i] is T_i x D, h is B x h_dim.
  /// Returns (sum T_i) x n_phonemes_total with utterances stacked in order.
  Tensor phoneme_logits(const std::vector<Tensor>& frames, const Tensor& h) const {
    if (h.rank() != 2 || h.dim(0) != frames.size() || h.dim(1) != dims_.h_dim) {
      throw ShapeError("phoneme_logits: " + std::to_string(frames.size()) +
                       " utterances with embeddings of shape " + shape_str(h.shape()));
    }
    std::vector<Tensor> rows;
    rows.reserve(frames.size());
    for (std::size_t i = 0; i < frames.size(); ++i) {
      const Tensor hi = frames.size() == 1 ? h : slice_rows(h, i, i + 1);
      rows.push_back(concat({frames[i], tile_rows(hi, frames[i].dim(0))}, 1));
    }
    const Tensor x = rows.size() == 1 ? rows[0] : concat(rows, 0);
    const Tensor hidden = relu(linear(x, param("downstream.hidden.weight"),
                                      param("downstream.hidden.bias")));
    return linear(hidden, param("downstream.output.weight"),
                  param("downstream.output.bias"));
  }

  // --- parameters ----------------------------------------------------------

  const std::vector<NamedParam>& parameters() const { return params_; }
  std::vector<NamedParam>& parameters() { return params_; }

  std::vector<Tensor> group_tensors(ParamGroup g) const {
    std::vector<Tensor> out;
    for (const auto& p : params_)
      if (p.group == g) out.push_back(p.value);
    return out;
  }

  const Tensor& param(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return params_[it->second].value;
  }
  Tensor& param(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return params_[it->second].value;
  }

  void zero_grad() {
    for (auto& p : params_) p.value.zero_grad();
  }

  /// Content hash over names, shapes and raw bytes of one group.
  std::string group_hash(ParamGroup g) const {
    Fnv1a h;
    for (const auto& p : params_) {
      if (p.group != g) continue;
      h.update(p.name);
      h.update(shape_str(p.value.shape()));
      const auto d = p.value.data();
      h.update(std::span(reinterpret_cast<const std::uint8_t*>(d.data()),
                         d.size() * sizeof(double)));
    }
    return h.hex();
  }

  /// Re-draws every parameter of one group from `seed`.
  void reinitialize(ParamGroup g, std::uint64_t seed) {
    for (auto& p : params_) {
      if (p.group != g) continue;
      fill_init(p, seed);
    }
  }

 private:
  void add(const std::string& name, ParamGroup group, Shape shape,
           std::size_t fan_in, std::uint64_t seed) {
    NamedParam p{name, group, Tensor::zeros(std::move(shape), true)};
    fan_in_[name] = fan_in;
    fill_init(p, seed);
    index_[name] = params_.size();
    params_.push_back(std::move(p));
  }

  // He-uniform weights, zero biases; each parameter draws from its own stream.
  void fill_init(NamedParam& p, std::uint64_t seed) {
    const std::size_t fan_in = fan_in_.at(p.name);
    auto data = p.value.mutable_data();
    if (fan_in == 0) {
      std::fill(data.begin(), data.end(), 0.0);
      return;
    }
    Rng rng(derive_seed(seed, p.name));
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (double& v : data) v = rng.uniform(-a, a);
  }

  ModelDims dims_;
  std::vector<NamedParam> params_;
  std::map<std::string, std::size_t> index_;
  std::map<std::string, std::size_t> fan_in_;
};

/// Linear language classifier on z_lang used only while pretraining the
/// encoder; discarded afterwards.
struct PretrainHead {
  Tensor weight;
  Tensor bias;

  PretrainHead(std::size_t z_dim, std::size_t n_languages, std::uint64_t seed)
      : weight(Tensor::zeros({z_dim, n_languages}, true)),
        bias(Tensor::zeros({n_languages}, true)) {
    Rng rng(derive_seed(seed, "pretrain_head"));
    const double a = std::sqrt(6.0 / static_cast<double>(z_dim));
    for (double& v : weight.mutable_data()) v = rng.uniform(-a, a);
  }

  Tensor logits(const Tensor& z) const { return linear(z, weight, bias); }
};

class UnseenLanguageError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// Fixed per-language embedding rows indexed by language id. Any id outside
/// the construction set raises UnseenLanguageError.
class LanguageIDBaseline {
 public:
  LanguageIDBaseline(std::span<const int> language_ids, std::size_t dim,
                     std::uint64_t seed)
      : dim_(dim) {
    for (int id : language_ids) {
      Rng rng(derive_seed(seed, {0x1d5ULL, static_cast<std::uint64_t>(id)}));
      std::vector<double> row(dim);
      for (double& v : row) v = rng.uniform(-1.0, 1.0);
      table_.emplace(id, std::move(row));
    }
  }

  Tensor embed(int language_id) const {
    auto it = table_.find(language_id);
    if (it == table_.end()) {
      throw UnseenLanguageError("unseen language has no ID: " +
                                std::to_string(language_id));
    }
    return Tensor({dim_}, it->second);
  }

  bool contains(int language_id) const { return table_.count(language_id) > 0; }
  std::size_t dim() const { return dim_; }

 private:
  std::size_t dim_;
  std::map<int, std::vector<double>> table_;
};

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------
//
// "LDCK" | u32 version | u64 architecture hash | u32 record count |
// records: group name, parameter name (u32 length + bytes), u32 rank,
//          rank x u64 dims, float64 payload.

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::uint64_t architecture_hash(const ModelDims& d) {
  Fnv1a h;
  h.update(d.describe());
  return h.value();
}

inline std::vector<std::uint8_t> encode_checkpoint(const ModelGraph& model) {
  ByteWriter w;
  w.put_magic("LDCK");
  w.put(kCheckpointVersion);
  w.put(architecture_hash(model.dims()));
  w.put(static_cast<std::uint32_t>(model.parameters().size()));
  for (const auto& p : model.parameters()) {
    w.put_string(group_name(p.group));
    w.put_string(p.name);
    w.put(static_cast<std::uint32_t>(p.value.rank()));
    for (std::size_t d : p.value.shape()) w.put(static_cast<std::uint64_t>(d));
    for (double v : p.value.data()) w.put(v);
  }
  return w.bytes();
}

inline void decode_checkpoint(ModelGraph& model, std::span<const std::uint8_t> bytes,
                              const std::string& source) {
  ByteReader r(bytes, source);
  r.expect_magic("LDCK");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError(source + ": unsupported checkpoint version " +
                      std::to_string(version));
  }
  if (r.get<std::uint64_t>() != architecture_hash(model.dims())) {
    throw FormatError(source + ": checkpoint was written for a different architecture");
  }
  const auto count = r.get<std::uint32_t>();
  if (count != model.parameters().size()) {
    throw FormatError(source + ": expected " +
                      std::to_string(model.parameters().size()) +
                      " parameter records, found " + std::to_string(count));
  }
  std::vector<std::pair<std::string, std::vector<double>>> staged;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string group = r.get_string();
    const std::string name = r.get_string();
    const NamedParam& meta = model.parameters()[i];
    if (meta.name != name || group != group_name(meta.group)) {
      throw FormatError(source + ": unexpected record " + group + "/" + name);
    }
    const Tensor& target = meta.value;
    const auto rank = r.get<std::uint32_t>();
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>());
    if (shape != target.shape()) {
      throw FormatError(source + ": " + name + " has shape " + shape_str(shape) +
                        ", model expects " + shape_str(target.shape()));
    }
    std::vector<double> values(shape_numel(shape));
    for (double& v : values) v = r.get<double>();
    staged.emplace_back(name, std::move(values));
  }
  if (!r.done()) throw FormatError(source + ": trailing bytes after last record");
  for (auto& [name, values] : staged) {
    auto dst = model.param(name).mutable_data();
    std::copy(values.begin(), values.end(), dst.begin());
  }
}

inline void save_checkpoint(const ModelGraph& model, const std::filesystem::path& path) {
  write_file_bytes(path, encode_checkpoint(model));
}

inline void load_checkpoint(ModelGraph& model, const std::filesystem::path& path) {
  decode_checkpoint(model, read_file_bytes(path), path.string());
}

}  // namespace langemb
