#pragma once

// Synthetic multilingual corpus with known language, speaker and phoneme
// factors. Frames are log-filterbank-like vectors generated directly:
//
//   frame[b] = template[phoneme][(b - pitch_offset) mod D]
//            + tilt * (b - (D-1)/2) + gain + N(0, sigma^2)
//
// Each language owns an inventory of formant bins; every phoneme template is
// a sum of 2-3 Gaussian bumps centred on inventory bins. Bump combinations
// are unique across all languages, so no two languages share a template and
// the held-out language's combinations are disjoint from the seen ones.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "langemb/binary_io.hpp"
#include "langemb/config.hpp"
#include "langemb/random.hpp"

namespace langemb {

struct LanguageSpec {
  int language_id = 0;
  std::vector<int> inventory;                   // formant bins available
  std::vector<std::vector<int>> formants;       // per phoneme
  std::vector<std::vector<double>> templates;   // P x D log-energies
  std::vector<std::vector<double>> transition;  // P x P, row-stochastic
  double mean_phoneme_duration = 6.0;

  std::size_t n_phonemes() const { return templates.size(); }
};

struct SpeakerSpec {
  int speaker_id = 0;
  int pitch_offset = 0;  // circular bin shift, -2..2
  double spectral_tilt = 0.0;
  double gain = 0.0;
};

struct SyntheticUtterance {
  std::size_t frames = 0;  // T
  std::size_t bins = 0;    // D
  std::vector<double> features;  // T x D row-major
  int y_lang = 0;
  int y_spk = 0;
  std::vector<std::uint16_t> phonemes;  // per frame, local to the language
  std::uint64_t seed = 0;

  bool operator==(const SyntheticUtterance&) const = default;
};

inline constexpr int kInventorySize = 8;
inline constexpr double kFormantWidth = 1.6;
inline constexpr double kMinTemplateDistance = 1.0;

namespace detail {

inline double l2_distance(const std::vector<double>& a,
                          const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

inline std::uint64_t binomial(int n, int k) {
  if (k < 0 || k > n) return 0;
  std::uint64_t r = 1;
  for (int i = 1; i <= k; ++i) r = r * static_cast<std::uint64_t>(n - k + i) / i;
  return r;
}

}  // namespace detail

/// Deterministic language inventories, templates and Markov chains.
/// Throws std::invalid_argument when the requested sizes cannot be separated
/// within `bins` frequency bins.
inline std::vector<LanguageSpec> make_language_specs(
    int n_languages, int n_phonemes, std::uint64_t seed, int bins = 24,
    double mean_phoneme_duration = 6.0) {
  if (n_languages < 2) throw std::invalid_argument("make_language_specs: n_languages must be >= 2");
  if (n_phonemes < 3) throw std::invalid_argument("make_language_specs: n_phonemes must be >= 3");
  const int inv = std::min(kInventorySize, bins);
  const std::uint64_t per_language =
      detail::binomial(inv, 2) + detail::binomial(inv, 3);
  const std::uint64_t overall =
      detail::binomial(bins, 2) + detail::binomial(bins, 3);
  if (static_cast<std::uint64_t>(n_phonemes) > per_language ||
      static_cast<std::uint64_t>(n_languages) * n_phonemes > overall) {
    throw std::invalid_argument(
        "make_language_specs: cannot separate " + std::to_string(n_languages) +
        " languages x " + std::to_string(n_phonemes) + " phonemes in " +
        std::to_string(bins) + " bins");
  }

  Rng rng(derive_seed(seed, "languages"));
  std::set<std::vector<int>> used_combos;
  std::set<std::vector<int>> used_inventories;
  std::vector<LanguageSpec> specs;
  for (int l = 0; l < n_languages; ++l) {
    LanguageSpec spec;
    spec.language_id = l;
    spec.mean_phoneme_duration = mean_phoneme_duration;

    constexpr int kMaxAttempts = 20000;
    bool built = false;
    for (int attempt = 0; attempt < 50 && !built; ++attempt) {
      std::vector<int> all(static_cast<std::size_t>(bins));
      for (int b = 0; b < bins; ++b) all[static_cast<std::size_t>(b)] = b;
      rng.shuffle(std::span(all));
      std::vector<int> inventory(all.begin(), all.begin() + inv);
      std::sort(inventory.begin(), inventory.end());
      if (used_inventories.count(inventory)) continue;

      spec.inventory = inventory;
      spec.formants.clear();
      spec.templates.clear();
      std::set<std::vector<int>> local;
      for (int tries = 0; tries < kMaxAttempts &&
                          static_cast<int>(spec.templates.size()) < n_phonemes;
           ++tries) {
        const int k = 2 + static_cast<int>(rng.below(2));
        std::vector<int> pick = inventory;
        rng.shuffle(std::span(pick));
        pick.resize(static_cast<std::size_t>(k));
        std::sort(pick.begin(), pick.end());
        if (used_combos.count(pick) || local.count(pick)) continue;

        std::vector<double> tpl(static_cast<std::size_t>(bins), 0.0);
        for (int f : pick) {
          const double amp = rng.uniform(1.5, 3.0);
          for (int b = 0; b < bins; ++b) {
            const double d = static_cast<double>(b - f);
            tpl[static_cast<std::size_t>(b)] +=
                amp * std::exp(-d * d / (2.0 * kFormantWidth * kFormantWidth));
          }
        }
        bool separated = true;
        for (const auto& other : spec.templates)
          separated = separated &&
                      detail::l2_distance(tpl, other) >= kMinTemplateDistance;
        if (!separated) continue;
        local.insert(pick);
        spec.formants.push_back(pick);
        spec.templates.push_back(std::move(tpl));
      }
      built = static_cast<int>(spec.templates.size()) == n_phonemes;
    }
    if (!built) {
      throw std::invalid_argument(
          "make_language_specs: failed to build language " + std::to_string(l) +
          " with " + std::to_string(n_phonemes) + " separated phonemes");
    }
    used_inventories.insert(spec.inventory);
    for (const auto& f : spec.formants) used_combos.insert(f);

    const auto P = static_cast<std::size_t>(n_phonemes);
    spec.transition.assign(P, std::vector<double>(P, 0.0));
    for (std::size_t i = 0; i < P; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < P; ++j) {
        if (i == j) continue;
        double u = rng.uniform();
        while (u <= 0.0) u = rng.uniform();
        spec.transition[i][j] = -std::log(u);
        total += spec.transition[i][j];
      }
      for (double& v : spec.transition[i]) v /= total;
    }
    specs.push_back(std::move(spec));
  }
  return specs;
}

/// Speakers of one language; global ids are language * count + local index.
inline std::vector<SpeakerSpec> make_speaker_specs(int language_id, int count,
                                                   std::uint64_t seed) {
  std::vector<SpeakerSpec> out;
  Rng rng(derive_seed(seed, {0x5be4ULL, static_cast<std::uint64_t>(language_id)}));
  for (int s = 0; s < count; ++s) {
    SpeakerSpec spk;
    spk.speaker_id = language_id * count + s;
    spk.pitch_offset = static_cast<int>(rng.below(5)) - 2;
    spk.spectral_tilt = rng.uniform(-0.01, 0.01);
    spk.gain = rng.uniform(-0.15, 0.15);
    out.push_back(spk);
  }
  return out;
}

/// Renders one utterance. The phoneme path and the noise come from separate
/// streams derived from `seed`, so the path depends only on (language, seed).
inline SyntheticUtterance render_utterance(const LanguageSpec& lang,
                                           const SpeakerSpec& spk,
                                           std::size_t length,
                                           std::uint64_t seed,
                                           double noise_sigma = 0.05) {
  if (length < 20) {
    throw std::invalid_argument("render_utterance: length must be >= 20, got " +
                                std::to_string(length));
  }
  if (lang.templates.empty()) throw std::invalid_argument("render_utterance: empty language");
  const std::size_t D = lang.templates[0].size();
  const std::size_t P = lang.n_phonemes();
  Rng path(derive_seed(seed, "path"));
  Rng noise(derive_seed(seed, "noise"));

  SyntheticUtterance u;
  u.frames = length;
  u.bins = D;
  u.y_lang = lang.language_id;
  u.y_spk = spk.speaker_id;
  u.seed = seed;
  u.features.resize(length * D);
  u.phonemes.resize(length);

  const double leave = 1.0 / lang.mean_phoneme_duration;
  const double centre = (static_cast<double>(D) - 1.0) / 2.0;
  const auto Di = static_cast<long>(D);
  std::size_t p = static_cast<std::size_t>(path.below(P));
  for (std::size_t t = 0; t < length; ++t) {
    u.phonemes[t] = static_cast<std::uint16_t>(p);
    const auto& tpl = lang.templates[p];
    for (std::size_t b = 0; b < D; ++b) {
      long src = (static_cast<long>(b) - spk.pitch_offset) % Di;
      if (src < 0) src += Di;
      u.features[t * D + b] =
          tpl[static_cast<std::size_t>(src)] +
          spk.spectral_tilt * (static_cast<double>(b) - centre) + spk.gain +
          noise_sigma * noise.normal();
    }
    if (path.uniform() < leave) {
      const double r = path.uniform();
      double acc = 0.0;
      std::size_t next = P - 1;
      for (std::size_t j = 0; j < P; ++j) {
        acc += lang.transition[p][j];
        if (r < acc) {
          next = j;
          break;
        }
      }
      // A zero-probability row can only occur for a single-phoneme language.
      if (lang.transition[p][next] > 0.0) p = next;
    }
  }
  return u;
}

// ---------------------------------------------------------------------------
// On-disk corpus
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kUtteranceFormatVersion = 1;
inline constexpr std::uint32_t kManifestFormatVersion = 1;

inline std::vector<std::uint8_t> encode_utterance(const SyntheticUtterance& u) {
  ByteWriter w;
  w.put_magic("SYNU");
  w.put(kUtteranceFormatVersion);
  w.put(static_cast<std::uint32_t>(u.frames));
  w.put(static_cast<std::uint32_t>(u.bins));
  w.put(static_cast<std::uint32_t>(u.y_lang));
  w.put(static_cast<std::uint32_t>(u.y_spk));
  for (double v : u.features) w.put(v);
  for (std::uint16_t p : u.phonemes) w.put(p);
  return w.bytes();
}

inline SyntheticUtterance decode_utterance(std::span<const std::uint8_t> bytes,
                                           const std::string& source) {
  ByteReader r(bytes, source);
  r.expect_magic("SYNU");
  const auto version = r.get<std::uint32_t>();
  if (version != kUtteranceFormatVersion) {
    throw FormatError(source + ": unsupported utterance version " +
                      std::to_string(version));
  }
  SyntheticUtterance u;
  u.frames = r.get<std::uint32_t>();
  u.bins = r.get<std::uint32_t>();
  u.y_lang = static_cast<int>(r.get<std::uint32_t>());
  u.y_spk = static_cast<int>(r.get<std::uint32_t>());
  r.expect_remaining(u.frames * u.bins * sizeof(double) +
                     u.frames * sizeof(std::uint16_t));
  u.features.resize(u.frames * u.bins);
  for (double& v : u.features) v = r.get<double>();
  u.phonemes.resize(u.frames);
  for (auto& p : u.phonemes) p = r.get<std::uint16_t>();
  return u;
}

struct UtteranceEntry {
  std::string file;  // relative to the dataset directory
  int language = 0;
  int speaker = 0;
  std::string split;  // "train" or "eval"
  int index = 0;
  std::uint64_t seed = 0;
};

struct LanguageEntry {
  int id = 0;
  bool seen = true;
  std::vector<int> speakers;
  int train_count = 0;
  int eval_count = 0;
};

struct CorpusManifest {
  std::uint32_t format_version = kManifestFormatVersion;
  std::uint64_t seed = 0;
  int frames = 0;
  int bins = 0;
  int phonemes_per_language = 0;
  double noise_sigma = 0.0;
  double mean_phoneme_duration = 0.0;
  std::vector<LanguageEntry> languages;
  std::vector<UtteranceEntry> utterances;

  int n_seen_languages() const {
    return static_cast<int>(std::count_if(languages.begin(), languages.end(),
                                          [](const auto& l) { return l.seen; }));
  }
  bool is_seen(int language) const {
    return languages.at(static_cast<std::size_t>(language)).seen;
  }
  /// Entry indices of a split, optionally restricted to seen or unseen.
  std::vector<std::size_t> select(const std::string& split,
                                  std::optional<bool> seen = std::nullopt) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < utterances.size(); ++i) {
      const auto& e = utterances[i];
      if (e.split != split) continue;
      if (seen && is_seen(e.language) != *seen) continue;
      out.push_back(i);
    }
    return out;
  }
};

inline nlohmann::ordered_json manifest_to_json(const CorpusManifest& m) {
  nlohmann::ordered_json j;
  j["format_version"] = m.format_version;
  j["seed"] = m.seed;
  j["frames"] = m.frames;
  j["bins"] = m.bins;
  j["phonemes_per_language"] = m.phonemes_per_language;
  j["noise_sigma"] = m.noise_sigma;
  j["mean_phoneme_duration"] = m.mean_phoneme_duration;
  j["languages"] = nlohmann::ordered_json::array();
  for (const auto& l : m.languages) {
    j["languages"].push_back({{"id", l.id},
                              {"seen", l.seen},
                              {"speakers", l.speakers},
                              {"counts", {{"train", l.train_count},
                                          {"eval", l.eval_count}}}});
  }
  j["utterances"] = nlohmann::ordered_json::array();
  for (const auto& e : m.utterances) {
    j["utterances"].push_back({{"file", e.file},
                               {"language", e.language},
                               {"speaker", e.speaker},
                               {"split", e.split},
                               {"index", e.index},
                               {"seed", e.seed}});
  }
  return j;
}

inline CorpusManifest manifest_from_json(const nlohmann::ordered_json& j,
                                         const std::string& source) {
  try {
    CorpusManifest m;
    m.format_version = j.at("format_version").get<std::uint32_t>();
    if (m.format_version != kManifestFormatVersion) {
      throw FormatError(source + ": unsupported manifest version " +
                        std::to_string(m.format_version));
    }
    m.seed = j.at("seed").get<std::uint64_t>();
    m.frames = j.at("frames").get<int>();
    m.bins = j.at("bins").get<int>();
    m.phonemes_per_language = j.at("phonemes_per_language").get<int>();
    m.noise_sigma = j.at("noise_sigma").get<double>();
    m.mean_phoneme_duration = j.at("mean_phoneme_duration").get<double>();
    for (const auto& lj : j.at("languages")) {
      LanguageEntry l;
      l.id = lj.at("id").get<int>();
      l.seen = lj.at("seen").get<bool>();
      l.speakers = lj.at("speakers").get<std::vector<int>>();
      l.train_count = lj.at("counts").at("train").get<int>();
      l.eval_count = lj.at("counts").at("eval").get<int>();
      m.languages.push_back(std::move(l));
    }
    for (const auto& ej : j.at("utterances")) {
      UtteranceEntry e;
      e.file = ej.at("file").get<std::string>();
      e.language = ej.at("language").get<int>();
      e.speaker = ej.at("speaker").get<int>();
      e.split = ej.at("split").get<std::string>();
      e.index = ej.at("index").get<int>();
      e.seed = ej.at("seed").get<std::uint64_t>();
      m.utterances.push_back(std::move(e));
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(source + ": malformed manifest: " + e.what());
  }
}

inline std::string manifest_text(const CorpusManifest& m) {
  return manifest_to_json(m).dump(1) + "\n";
}

/// Language and speaker generators for a corpus configuration.
struct CorpusSpecs {
  std::vector<LanguageSpec> languages;
  std::vector<std::vector<SpeakerSpec>> speakers;  // per language
};

inline CorpusSpecs make_corpus_specs(const CorpusConfig& c, std::uint64_t seed) {
  CorpusSpecs s;
  s.languages = make_language_specs(c.n_languages(), c.phonemes_per_language,
                                    seed, c.bins, c.mean_phoneme_duration);
  for (int l = 0; l < c.n_languages(); ++l)
    s.speakers.push_back(make_speaker_specs(l, c.speakers_per_language, seed));
  return s;
}

inline std::uint64_t utterance_seed(std::uint64_t corpus_seed, int language,
                                    int speaker, bool eval_split, int index) {
  return derive_seed(corpus_seed, {static_cast<std::uint64_t>(language),
                                   static_cast<std::uint64_t>(speaker),
                                   eval_split ? 1ULL : 0ULL,
                                   static_cast<std::uint64_t>(index)});
}

/// Generates the full corpus into `dir` (manifest.json + utt/*.synu).
/// Languages [0, n_seen) are seen; the remaining ones are held out.
inline CorpusManifest build_corpus(const TrainConfig& config,
                                   const std::filesystem::path& dir) {
  config.validate();
  const auto& c = config.corpus;
  const CorpusSpecs specs = make_corpus_specs(c, config.seed);

  CorpusManifest m;
  m.seed = config.seed;
  m.frames = c.frames;
  m.bins = c.bins;
  m.phonemes_per_language = c.phonemes_per_language;
  m.noise_sigma = c.noise_sigma;
  m.mean_phoneme_duration = c.mean_phoneme_duration;

  std::filesystem::create_directories(dir / "utt");
  for (int l = 0; l < c.n_languages(); ++l) {
    LanguageEntry le;
    le.id = l;
    le.seen = l < c.n_seen_languages;
    for (const auto& spk : specs.speakers[static_cast<std::size_t>(l)])
      le.speakers.push_back(spk.speaker_id);
    le.train_count = c.speakers_per_language * c.train_per_speaker;
    le.eval_count = c.speakers_per_language * c.eval_per_speaker;
    m.languages.push_back(le);

    for (int split = 0; split < 2; ++split) {
      const bool is_eval = split == 1;
      const int count = is_eval ? c.eval_per_speaker : c.train_per_speaker;
      // Interleave speakers so any prefix of a split is speaker-balanced.
      for (int i = 0; i < count; ++i) {
        for (int s = 0; s < c.speakers_per_language; ++s) {
          const auto& spk = specs.speakers[static_cast<std::size_t>(l)]
                                          [static_cast<std::size_t>(s)];
          UtteranceEntry e;
          e.language = l;
          e.speaker = spk.speaker_id;
          e.split = is_eval ? "eval" : "train";
          e.index = i;
          e.seed = utterance_seed(config.seed, l, spk.speaker_id, is_eval, i);
          char name[96];
          std::snprintf(name, sizeof(name), "utt/l%02d_s%03d_%s_%04d.synu", l,
                        spk.speaker_id, e.split.c_str(), i);
          e.file = name;
          const auto u = render_utterance(
              specs.languages[static_cast<std::size_t>(l)], spk,
              static_cast<std::size_t>(c.frames), e.seed, c.noise_sigma);
          write_file_bytes(dir / e.file, encode_utterance(u));
          m.utterances.push_back(std::move(e));
        }
      }
    }
  }
  write_file_text(dir / "manifest.json", manifest_text(m));
  return m;
}

inline CorpusManifest load_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  if (!std::filesystem::exists(path)) {
    throw std::runtime_error("missing dataset manifest " + path.string());
  }
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(read_file_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return manifest_from_json(j, path.string());
}

/// Reads one utterance and checks it against its manifest entry.
inline SyntheticUtterance load_utterance(const CorpusManifest& m,
                                         const std::filesystem::path& dir,
                                         std::size_t index) {
  const auto& e = m.utterances.at(index);
  const auto path = dir / e.file;
  const std::size_t expected = 24 + static_cast<std::size_t>(m.frames) *
                                        (m.bins * sizeof(double) + sizeof(std::uint16_t));
  if (!std::filesystem::exists(path)) {
    throw FormatError(path.string() + ": missing utterance file");
  }
  const auto bytes = read_file_bytes(path);
  if (bytes.size() != expected) {
    throw FormatError(path.string() + ": expected " + std::to_string(expected) +
                      " bytes, found " + std::to_string(bytes.size()));
  }
  auto u = decode_utterance(bytes, path.string());
  if (static_cast<int>(u.frames) != m.frames || static_cast<int>(u.bins) != m.bins ||
      u.y_lang != e.language || u.y_spk != e.speaker) {
    throw FormatError(path.string() + ": header disagrees with manifest entry");
  }
  u.seed = e.seed;
  return u;
}

/// Manifest plus every utterance held in memory.
struct Corpus {
  std::filesystem::path dir;
  CorpusManifest manifest;
  std::vector<SyntheticUtterance> utterances;  // parallel to manifest.utterances
  std::string manifest_hash;
};

inline Corpus load_corpus(const std::filesystem::path& dir) {
  Corpus c;
  c.dir = dir;
  c.manifest = load_manifest(dir);
  c.manifest_hash = hash_file(dir / "manifest.json");
  c.utterances.reserve(c.manifest.utterances.size());
  for (std::size_t i = 0; i < c.manifest.utterances.size(); ++i)
    c.utterances.push_back(load_utterance(c.manifest, dir, i));
  return c;
}

}  // namespace langemb
