#pragma once

// Evaluation of language embeddings: the token-error-rate proxy for
// intelligibility, post-hoc linear probes, PCA and silhouette analysis of
// the embedding space, scatter plots, and the SAT x projection ablation grid.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "langemb/binary_io.hpp"
#include "langemb/config.hpp"
#include "langemb/model.hpp"
#include "langemb/random.hpp"
#include "langemb/synthdata.hpp"
#include "langemb/tensor.hpp"

namespace langemb {

class MissingArtifactError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Token error rate
// ---------------------------------------------------------------------------

inline double token_error_rate(std::span<const int> predictions,
                               std::span<const int> labels) {
  if (predictions.size() != labels.size()) {
    throw std::invalid_argument("token_error_rate: " +
                                std::to_string(predictions.size()) +
                                " predictions for " + std::to_string(labels.size()) +
                                " labels");
  }
  if (labels.empty()) return 0.0;
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) wrong += predictions[i] != labels[i];
  return static_cast<double>(wrong) / static_cast<double>(labels.size());
}

/// Index of the largest entry of each row (first on ties).
inline std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = logits.data().data() + i * k;
    out[i] = static_cast<int>(std::max_element(row, row + k) - row);
  }
  return out;
}

/// Global phoneme label: language * phonemes_per_language + local index.
inline std::vector<int> global_phoneme_labels(const SyntheticUtterance& u,
                                              int phonemes_per_language) {
  std::vector<int> out(u.phonemes.size());
  for (std::size_t t = 0; t < out.size(); ++t)
    out[t] = u.y_lang * phonemes_per_language + u.phonemes[t];
  return out;
}

// ---------------------------------------------------------------------------
// Embedding extraction
// ---------------------------------------------------------------------------

struct Embeddings {
  Tensor z;  // N x z_dim
  Tensor h;  // N x h_dim
  std::vector<int> languages;
  std::vector<int> speakers;
};

/// z_lang and the embedding used downstream (projected or truncated).
inline Embeddings compute_embeddings(const ModelGraph& model, const Corpus& corpus,
                                     std::span<const std::size_t> indices,
                                     bool projection_enabled) {
  NoGradGuard no_grad;
  const auto& d = model.dims();
  std::vector<double> z(indices.size() * d.z_dim);
  Embeddings e;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& u = corpus.utterances.at(indices[i]);
    const Tensor zi = model.encode(frames_tensor(u.features, u.frames, u.bins));
    std::copy(zi.data().begin(), zi.data().end(), z.begin() + i * d.z_dim);
    e.languages.push_back(u.y_lang);
    e.speakers.push_back(u.y_spk);
  }
  e.z = Tensor({indices.size(), d.z_dim}, std::move(z));
  e.h = model.embed(e.z, projection_enabled).detach();
  return e;
}

/// Mean embedding per language over `indices`: the reference language
/// embedding used when decoding, standing in for reference audio of the
/// language rather than the utterance being decoded.
inline std::map<int, std::vector<double>> language_prototypes(
    const ModelGraph& model, const Corpus& corpus,
    std::span<const std::size_t> indices, bool projection_enabled) {
  const Embeddings e = compute_embeddings(model, corpus, indices, projection_enabled);
  const std::size_t d = e.h.dim(1);
  std::map<int, std::vector<double>> sums;
  std::map<int, std::size_t> counts;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    auto& s = sums[e.languages[i]];
    s.resize(d, 0.0);
    for (std::size_t k = 0; k < d; ++k) s[k] += e.h[i * d + k];
    ++counts[e.languages[i]];
  }
  for (auto& [lang, s] : sums)
    for (double& v : s) v /= static_cast<double>(counts[lang]);
  return sums;
}

/// Token error rate of the phoneme head per language over `indices`, each
/// utterance decoded with its language's reference embedding.
inline std::map<int, double> evaluate_ter(
    const ModelGraph& model, const Corpus& corpus,
    std::span<const std::size_t> indices,
    const std::map<int, std::vector<double>>& prototypes) {
  NoGradGuard no_grad;
  const int P = corpus.manifest.phonemes_per_language;
  std::map<int, std::pair<std::size_t, std::size_t>> counts;  // wrong, total
  for (std::size_t idx : indices) {
    const auto& u = corpus.utterances.at(idx);
    auto it = prototypes.find(u.y_lang);
    if (it == prototypes.end()) {
      throw std::invalid_argument("evaluate_ter: no reference embedding for language " +
                                  std::to_string(u.y_lang));
    }
    const Tensor h({1, it->second.size()}, it->second);
    const Tensor logits =
        model.phoneme_logits({frames_tensor(u.features, u.frames, u.bins)}, h);
    const auto pred = argmax_rows(logits);
    const auto labels = global_phoneme_labels(u, P);
    auto& [wrong, total] = counts[u.y_lang];
    for (std::size_t t = 0; t < labels.size(); ++t) wrong += pred[t] != labels[t];
    total += labels.size();
  }
  std::map<int, double> out;
  for (const auto& [lang, c] : counts)
    out[lang] = static_cast<double>(c.first) / static_cast<double>(c.second);
  return out;
}

inline double mean_of(const std::map<int, double>& m) {
  if (m.empty()) return 0.0;
  double s = 0.0;
  for (const auto& [k, v] : m) s += v;
  return s / static_cast<double>(m.size());
}

// ---------------------------------------------------------------------------
// Linear probe
// ---------------------------------------------------------------------------

struct ProbeResult {
  double accuracy = 0.0;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
  std::size_t n_classes = 0;
  std::string warning;
};

/// Multinomial logistic regression on frozen embeddings (N x d): a seeded
/// per-class 70/30 split, z-scored features, full-batch gradient descent from
/// zero weights. Returns held-out accuracy. Operates on copies only.
inline ProbeResult linear_probe(const Tensor& embeddings, std::span<const int> labels,
                                const ProbeConfig& cfg, std::uint64_t seed) {
  if (embeddings.rank() != 2 || embeddings.dim(0) != labels.size()) {
    throw ShapeError("linear_probe: " + std::to_string(labels.size()) +
                     " labels for embeddings of shape " + shape_str(embeddings.shape()));
  }
  const std::size_t N = labels.size(), d = embeddings.dim(1);
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < N; ++i) by_class[labels[i]].push_back(i);
  for (const auto& [label, members] : by_class) {
    if (members.size() < 2) {
      throw std::invalid_argument("linear_probe: class " + std::to_string(label) +
                                  " has fewer than 2 samples");
    }
  }
  ProbeResult result;
  result.n_classes = by_class.size();
  if (by_class.size() == 1) {
    result.accuracy = 1.0;
    result.n_test = N;
    result.warning = "single class: accuracy is trivially 1";
    return result;
  }

  Rng rng(derive_seed(seed, "probe_split"));
  std::vector<std::size_t> train, test;
  std::vector<int> cls(N);
  int k = 0;
  for (auto& [label, members] : by_class) {
    for (std::size_t i : members) cls[i] = k;
    ++k;
    rng.shuffle(std::span(members));
    const auto n = members.size();
    auto n_train = static_cast<std::size_t>(
        std::floor(cfg.train_fraction * static_cast<double>(n) + 0.5));
    n_train = std::clamp<std::size_t>(n_train, 1, n - 1);
    train.insert(train.end(), members.begin(), members.begin() + n_train);
    test.insert(test.end(), members.begin() + n_train, members.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  const std::size_t K = by_class.size();

  const auto X = embeddings.data();
  std::vector<double> mu(d, 0.0), sd(d, 0.0);
  for (std::size_t i : train)
    for (std::size_t j = 0; j < d; ++j) mu[j] += X[i * d + j];
  for (double& m : mu) m /= static_cast<double>(train.size());
  for (std::size_t i : train)
    for (std::size_t j = 0; j < d; ++j) {
      const double t = X[i * d + j] - mu[j];
      sd[j] += t * t;
    }
  for (double& s : sd) {
    s = std::sqrt(s / static_cast<double>(train.size()));
    if (s < 1e-12) s = 1.0;
  }
  auto standardized = [&](const std::vector<std::size_t>& rows) {
    std::vector<double> out(rows.size() * d);
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t j = 0; j < d; ++j)
        out[r * d + j] = (X[rows[r] * d + j] - mu[j]) / sd[j];
    return out;
  };
  const auto Xtr = standardized(train);
  const auto Xte = standardized(test);

  std::vector<double> W(d * K, 0.0), b(K, 0.0), gW(d * K), gb(K), p(K);
  const double inv_n = 1.0 / static_cast<double>(train.size());
  for (int step = 0; step < cfg.steps; ++step) {
    std::fill(gW.begin(), gW.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    for (std::size_t r = 0; r < train.size(); ++r) {
      const double* x = Xtr.data() + r * d;
      for (std::size_t c = 0; c < K; ++c) p[c] = b[c];
      for (std::size_t j = 0; j < d; ++j)
        for (std::size_t c = 0; c < K; ++c) p[c] += x[j] * W[j * K + c];
      const double mx = *std::max_element(p.begin(), p.end());
      double z = 0.0;
      for (double& v : p) z += (v = std::exp(v - mx));
      for (double& v : p) v /= z;
      p[static_cast<std::size_t>(cls[train[r]])] -= 1.0;
      for (std::size_t j = 0; j < d; ++j)
        for (std::size_t c = 0; c < K; ++c) gW[j * K + c] += x[j] * p[c];
      for (std::size_t c = 0; c < K; ++c) gb[c] += p[c];
    }
    for (std::size_t i = 0; i < W.size(); ++i) W[i] -= cfg.learning_rate * gW[i] * inv_n;
    for (std::size_t c = 0; c < K; ++c) b[c] -= cfg.learning_rate * gb[c] * inv_n;
  }

  std::size_t correct = 0;
  for (std::size_t r = 0; r < test.size(); ++r) {
    const double* x = Xte.data() + r * d;
    for (std::size_t c = 0; c < K; ++c) p[c] = b[c];
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t c = 0; c < K; ++c) p[c] += x[j] * W[j * K + c];
    const auto best = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
    correct += best == cls[test[r]];
  }
  result.accuracy = static_cast<double>(correct) / static_cast<double>(test.size());
  result.n_train = train.size();
  result.n_test = test.size();
  return result;
}

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

/// Eigenvalues (descending) and eigenvectors (as rows, same order) of a
/// symmetric n x n row-major matrix.
inline std::pair<std::vector<double>, std::vector<std::vector<double>>>
symmetric_eigen(const std::vector<double>& a, std::size_t n) {
  const auto N = static_cast<Eigen::Index>(n);
  const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
      m(a.data(), N, N);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  if (es.info() != Eigen::Success) throw NumericError("symmetric_eigen: solver did not converge");
  std::vector<double> values;
  std::vector<std::vector<double>> vectors;
  for (Eigen::Index c = N - 1; c >= 0; --c) {  // Eigen sorts ascending
    values.push_back(es.eigenvalues()(c));
    std::vector<double> col(n);
    for (Eigen::Index k = 0; k < N; ++k) col[static_cast<std::size_t>(k)] = es.eigenvectors()(k, c);
    vectors.push_back(std::move(col));
  }
  return {values, vectors};
}

struct PcaResult {
  Tensor coords;  // N x 2
  std::array<double, 2> explained_variance_ratio{0.0, 0.0};
  std::array<std::vector<double>, 2> components;
};

/// Top-2 principal components of mean-centred rows. Each component's
/// largest-magnitude coordinate is made positive.
inline PcaResult pca2(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("pca2: expected N x d input, got " + shape_str(x.shape()));
  const std::size_t N = x.dim(0), d = x.dim(1);
  if (d < 2) throw std::invalid_argument("pca2: need at least 2 dimensions, got " + std::to_string(d));
  if (N < 3) throw std::invalid_argument("pca2: need at least 3 points, got " + std::to_string(N));
  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < d; ++j) mean[j] += x[i * d + j];
  for (double& m : mean) m /= static_cast<double>(N);
  std::vector<double> centred(N * d);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < d; ++j) centred[i * d + j] = x[i * d + j] - mean[j];
  std::vector<double> cov(d * d, 0.0);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t a = 0; a < d; ++a) {
      const double xa = centred[i * d + a];
      for (std::size_t b = a; b < d; ++b) cov[a * d + b] += xa * centred[i * d + b];
    }
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = a; b < d; ++b) {
      cov[a * d + b] /= static_cast<double>(N - 1);
      cov[b * d + a] = cov[a * d + b];
    }
  double trace = 0.0;
  for (std::size_t a = 0; a < d; ++a) trace += cov[a * d + a];
  auto [values, vectors] = symmetric_eigen(cov, d);

  PcaResult r;
  std::vector<double> coords(N * 2, 0.0);
  for (std::size_t c = 0; c < 2; ++c) {
    auto comp = vectors[c];
    std::size_t big = 0;
    for (std::size_t k = 1; k < d; ++k)
      if (std::abs(comp[k]) > std::abs(comp[big]) + 1e-12) big = k;
    if (comp[big] < 0)
      for (double& v : comp) v = -v;
    r.explained_variance_ratio[c] =
        trace > 0.0 ? std::max(0.0, values[c]) / trace : 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += centred[i * d + k] * comp[k];
      coords[i * 2 + c] = s;
    }
    r.components[c] = std::move(comp);
  }
  r.coords = Tensor({N, 2}, std::move(coords));
  return r;
}

// ---------------------------------------------------------------------------
// Silhouette
// ---------------------------------------------------------------------------

/// Mean silhouette with Euclidean distance, O(N^2).
inline double silhouette(const Tensor& x, std::span<const int> labels) {
  if (x.rank() != 2 || x.dim(0) != labels.size()) {
    throw ShapeError("silhouette: " + std::to_string(labels.size()) +
                     " labels for points of shape " + shape_str(x.shape()));
  }
  const std::size_t N = labels.size(), d = x.dim(1);
  std::map<int, std::size_t> sizes;
  for (int l : labels) ++sizes[l];
  if (sizes.size() < 2) throw std::invalid_argument("silhouette: need at least 2 classes");
  for (const auto& [l, n] : sizes)
    if (n < 2)
      throw std::invalid_argument("silhouette: class " + std::to_string(l) +
                                  " has fewer than 2 members");
  std::map<int, std::size_t> slot;
  for (const auto& [l, n] : sizes) slot.emplace(l, slot.size());
  std::vector<double> sums(sizes.size());
  std::vector<std::size_t> counts(sizes.size());
  for (const auto& [l, n] : sizes) counts[slot[l]] = n;

  double total = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    std::fill(sums.begin(), sums.end(), 0.0);
    for (std::size_t j = 0; j < N; ++j) {
      if (i == j) continue;
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double t = x[i * d + k] - x[j * d + k];
        s += t * t;
      }
      sums[slot[labels[j]]] += std::sqrt(s);
    }
    const std::size_t own = slot[labels[i]];
    const double a = sums[own] / static_cast<double>(counts[own] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < sums.size(); ++c)
      if (c != own) b = std::min(b, sums[c] / static_cast<double>(counts[c]));
    const double m = std::max(a, b);
    total += m > 0.0 ? (b - a) / m : 0.0;
  }
  return total / static_cast<double>(N);
}

// ---------------------------------------------------------------------------
// SVG scatter plots
// ---------------------------------------------------------------------------

inline constexpr std::array<const char*, 10> kLanguagePalette{
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

/// 800x600 scatter of N x 2 coordinates. Colour encodes language; when
/// `speakers` is given, marker shape encodes the speaker within its language.
inline std::string scatter_svg(const Tensor& coords, std::span<const int> languages,
                               std::span<const int> speakers,
                               int speakers_per_language, const std::string& title) {
  constexpr double W = 800, H = 600, margin = 60;
  const std::size_t N = coords.dim(0);
  double xmin = 0, xmax = 0, ymin = 0, ymax = 0;
  for (std::size_t i = 0; i < N; ++i) {
    const double x = coords.at(i, 0), y = coords.at(i, 1);
    if (i == 0 || x < xmin) xmin = x;
    if (i == 0 || x > xmax) xmax = x;
    if (i == 0 || y < ymin) ymin = y;
    if (i == 0 || y > ymax) ymax = y;
  }
  if (xmax - xmin < 1e-12) xmax = xmin + 1.0;
  if (ymax - ymin < 1e-12) ymax = ymin + 1.0;
  auto sx = [&](double x) { return margin + (x - xmin) / (xmax - xmin) * (W - 2 * margin - 120); };
  auto sy = [&](double y) { return H - margin - (y - ymin) / (ymax - ymin) * (H - 2 * margin); };

  std::string out;
  char buf[320];
  std::snprintf(buf, sizeof(buf),
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%d\" height=\"%d\" "
                "viewBox=\"0 0 %d %d\">\n",
                800, 600, 800, 600);
  out += buf;
  out += "<rect width=\"800\" height=\"600\" fill=\"white\"/>\n";
  std::snprintf(buf, sizeof(buf),
                "<rect x=\"%.0f\" y=\"%.0f\" width=\"%.0f\" height=\"%.0f\" "
                "fill=\"none\" stroke=\"#444\"/>\n",
                margin, margin, W - 2 * margin - 120, H - 2 * margin);
  out += buf;
  out += "<text x=\"400\" y=\"32\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "font-size=\"18\">" + title + "</text>\n";
  out += "<text x=\"" + std::to_string(static_cast<int>((W - 120) / 2)) +
         "\" y=\"585\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "font-size=\"14\">PC1</text>\n";
  out += "<text x=\"20\" y=\"300\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "font-size=\"14\" transform=\"rotate(-90 20 300)\">PC2</text>\n";

  for (std::size_t i = 0; i < N; ++i) {
    const double x = sx(coords.at(i, 0)), y = sy(coords.at(i, 1));
    const char* colour = kLanguagePalette[static_cast<std::size_t>(languages[i]) %
                                          kLanguagePalette.size()];
    const int shape = speakers.empty() ? 0 : speakers[i] % std::max(1, speakers_per_language) % 8;
    switch (shape) {
      case 0:
        std::snprintf(buf, sizeof(buf),
                      "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"3.5\" fill=\"%s\" fill-opacity=\"0.7\"/>\n",
                      x, y, colour);
        break;
      case 1:
        std::snprintf(buf, sizeof(buf),
                      "<rect x=\"%.2f\" y=\"%.2f\" width=\"7\" height=\"7\" fill=\"%s\" fill-opacity=\"0.7\"/>\n",
                      x - 3.5, y - 3.5, colour);
        break;
      case 2:
        std::snprintf(buf, sizeof(buf),
                      "<polygon points=\"%.2f,%.2f %.2f,%.2f %.2f,%.2f\" fill=\"%s\" fill-opacity=\"0.7\"/>\n",
                      x, y - 4.5, x - 4, y + 3.5, x + 4, y + 3.5, colour);
        break;
      case 3:
        std::snprintf(buf, sizeof(buf),
                      "<polygon points=\"%.2f,%.2f %.2f,%.2f %.2f,%.2f\" fill=\"%s\" fill-opacity=\"0.7\"/>\n",
                      x, y + 4.5, x - 4, y - 3.5, x + 4, y - 3.5, colour);
        break;
      case 4:
        std::snprintf(buf, sizeof(buf),
                      "<polygon points=\"%.2f,%.2f %.2f,%.2f %.2f,%.2f %.2f,%.2f\" fill=\"%s\" fill-opacity=\"0.7\"/>\n",
                      x, y - 4.5, x + 4.5, y, x, y + 4.5, x - 4.5, y, colour);
        break;
      case 5:
        std::snprintf(buf, sizeof(buf),
                      "<path d=\"M%.2f %.2fL%.2f %.2fM%.2f %.2fL%.2f %.2f\" stroke=\"%s\" stroke-width=\"2\"/>\n",
                      x - 4, y - 4, x + 4, y + 4, x - 4, y + 4, x + 4, y - 4, colour);
        break;
      case 6:
        std::snprintf(buf, sizeof(buf),
                      "<path d=\"M%.2f %.2fL%.2f %.2fM%.2f %.2fL%.2f %.2f\" stroke=\"%s\" stroke-width=\"2\"/>\n",
                      x - 4.5, y, x + 4.5, y, x, y - 4.5, x, y + 4.5, colour);
        break;
      default:
        std::snprintf(buf, sizeof(buf),
                      "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"3.5\" fill=\"none\" stroke=\"%s\" stroke-width=\"1.5\"/>\n",
                      x, y, colour);
        break;
    }
    out += buf;
  }

  std::set<int> langs(languages.begin(), languages.end());
  double ly = margin + 10;
  for (int l : langs) {
    std::snprintf(buf, sizeof(buf),
                  "<circle cx=\"%.0f\" cy=\"%.0f\" r=\"5\" fill=\"%s\"/>"
                  "<text x=\"%.0f\" y=\"%.0f\" font-family=\"sans-serif\" font-size=\"12\">"
                  "language %d</text>\n",
                  W - 150, ly, kLanguagePalette[static_cast<std::size_t>(l) % kLanguagePalette.size()],
                  W - 140, ly + 4, l);
    out += buf;
    ly += 18;
  }
  out += "</svg>\n";
  return out;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct EvalReport {
  std::string condition;
  bool sat_enabled = true;
  bool projection_enabled = true;
  std::optional<int> budget;
  std::map<int, double> token_error_rate;  // empty when not applicable
  double language_probe_accuracy = 0.0;
  double speaker_probe_accuracy = 0.0;
  double speaker_probe_chance = 0.0;
  double silhouette_z = 0.0;
  double silhouette_h = 0.0;
  PcaResult pca;
  std::vector<int> languages;
  std::vector<int> speakers;
  std::string notes;
};

inline nlohmann::ordered_json report_to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["condition"] = r.condition;
  j["sat_enabled"] = r.sat_enabled;
  j["projection_enabled"] = r.projection_enabled;
  j["budget"] = r.budget ? nlohmann::ordered_json(*r.budget) : nlohmann::ordered_json();
  if (r.token_error_rate.empty()) {
    j["token_error_rate"] = nullptr;
    j["mean_token_error_rate"] = nullptr;
  } else {
    nlohmann::ordered_json ter;
    for (const auto& [l, v] : r.token_error_rate) ter[std::to_string(l)] = v;
    j["token_error_rate"] = ter;
    j["mean_token_error_rate"] = mean_of(r.token_error_rate);
  }
  j["language_probe_accuracy"] = r.language_probe_accuracy;
  j["speaker_probe_accuracy"] = r.speaker_probe_accuracy;
  j["speaker_probe_chance"] = r.speaker_probe_chance;
  j["silhouette_by_language_z"] = r.silhouette_z;
  j["silhouette_by_language_h"] = r.silhouette_h;
  j["pca"]["explained_variance_ratio"] = {r.pca.explained_variance_ratio[0],
                                          r.pca.explained_variance_ratio[1]};
  auto coords = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < r.pca.coords.dim(0); ++i)
    coords.push_back({r.pca.coords.at(i, 0), r.pca.coords.at(i, 1)});
  j["pca"]["coords"] = coords;
  j["pca"]["languages"] = r.languages;
  j["pca"]["speakers"] = r.speakers;
  j["notes"] = r.notes;
  return j;
}

inline EvalReport report_from_json(const nlohmann::ordered_json& j) {
  EvalReport r;
  r.condition = j.at("condition").get<std::string>();
  r.sat_enabled = j.at("sat_enabled").get<bool>();
  r.projection_enabled = j.at("projection_enabled").get<bool>();
  if (!j.at("budget").is_null()) r.budget = j.at("budget").get<int>();
  if (!j.at("token_error_rate").is_null())
    for (const auto& [k, v] : j.at("token_error_rate").items())
      r.token_error_rate[std::stoi(k)] = v.get<double>();
  r.language_probe_accuracy = j.at("language_probe_accuracy").get<double>();
  r.speaker_probe_accuracy = j.at("speaker_probe_accuracy").get<double>();
  r.speaker_probe_chance = j.at("speaker_probe_chance").get<double>();
  r.silhouette_z = j.at("silhouette_by_language_z").get<double>();
  r.silhouette_h = j.at("silhouette_by_language_h").get<double>();
  const auto& p = j.at("pca");
  r.pca.explained_variance_ratio = {p.at("explained_variance_ratio")[0].get<double>(),
                                    p.at("explained_variance_ratio")[1].get<double>()};
  std::vector<double> coords;
  for (const auto& c : p.at("coords")) {
    coords.push_back(c[0].get<double>());
    coords.push_back(c[1].get<double>());
  }
  r.pca.coords = Tensor({coords.size() / 2, 2}, coords);
  r.languages = p.at("languages").get<std::vector<int>>();
  r.speakers = p.at("speakers").get<std::vector<int>>();
  r.notes = j.at("notes").get<std::string>();
  return r;
}

/// Embedding analysis of one model on the seen-language eval split.
/// Speaker-probe chance is 1 / speakers_per_language: speakers are nested in
/// languages, so a probe that knows only the language already reaches it.
inline EvalReport evaluate_condition(const ModelGraph& model, const Corpus& corpus,
                                     const TrainConfig& cfg, bool sat_enabled,
                                     bool projection_enabled, bool with_ter) {
  const auto indices = corpus.manifest.select("eval", true);
  const Embeddings e = compute_embeddings(model, corpus, indices, projection_enabled);
  EvalReport r;
  r.sat_enabled = sat_enabled;
  r.projection_enabled = projection_enabled;
  r.condition = std::string("sat_") + (sat_enabled ? "on" : "off") + "_proj_" +
                (projection_enabled ? "on" : "off");
  if (with_ter) {
    const auto refs = language_prototypes(model, corpus, corpus.manifest.select("train", true),
                                          projection_enabled);
    r.token_error_rate = evaluate_ter(model, corpus, indices, refs);
  }
  const std::uint64_t seed = derive_seed(cfg.seed, "probe");
  r.language_probe_accuracy = linear_probe(e.h, e.languages, cfg.probe, seed).accuracy;
  r.speaker_probe_accuracy = linear_probe(e.h, e.speakers, cfg.probe, seed).accuracy;
  r.speaker_probe_chance = 1.0 / static_cast<double>(cfg.corpus.speakers_per_language);
  r.silhouette_z = silhouette(model.truncate(e.z), e.languages);
  r.silhouette_h = silhouette(e.h, e.languages);
  r.pca = pca2(e.h);
  r.languages = e.languages;
  r.speakers = e.speakers;
  r.notes = std::string("PCA fit per condition on the seen-language eval split; ") +
            (projection_enabled ? "embedding = projected h_lang"
                                : "embedding = z_lang truncated to h_dim") +
            (with_ter ? "" : "; token error rate not applicable (phoneme head was "
                             "trained on projected embeddings)");
  return r;
}

inline void write_report(const std::filesystem::path& path, const EvalReport& r) {
  write_file_text(path, report_to_json(r).dump(1) + "\n");
}

inline EvalReport read_report(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw MissingArtifactError("missing eval report " + path.string());
  }
  return report_from_json(nlohmann::ordered_json::parse(read_file_text(path)));
}

/// Writes the two PCA scatters (by language, by speaker) of a report.
inline std::vector<std::filesystem::path> write_report_plots(
    const EvalReport& r, const std::filesystem::path& plot_dir,
    int speakers_per_language) {
  const auto by_lang = plot_dir / (r.condition + "_by_language.svg");
  const auto by_spk = plot_dir / (r.condition + "_by_speaker.svg");
  const std::string what = r.projection_enabled ? "h_lang" : "truncated z_lang";
  const std::string sat = r.sat_enabled ? "SAT on" : "SAT off";
  write_file_text(by_lang, scatter_svg(r.pca.coords, r.languages, {},
                                       speakers_per_language,
                                       "2D PCA of " + what + " (" + sat + "), by language"));
  write_file_text(by_spk, scatter_svg(r.pca.coords, r.languages, r.speakers,
                                      speakers_per_language,
                                      "2D PCA of " + what + " (" + sat + "), by speaker"));
  return {by_lang, by_spk};
}

struct AblationGrid {
  std::vector<EvalReport> reports;
  std::vector<std::filesystem::path> plots;
};

/// Evaluates {SAT on, SAT off} stage-1 checkpoints with the projection on
/// and off, writing <out>/ablation/<condition>/eval_report.json and
/// <out>/plots/<condition>_by_{language,speaker}.svg.
inline AblationGrid run_ablation_grid(
    const TrainConfig& cfg, const Corpus& corpus,
    const std::map<std::string, std::filesystem::path>& stage1_checkpoints,
    const std::filesystem::path& out) {
  std::vector<std::string> missing;
  for (const char* cond : {"sat_on", "sat_off"}) {
    auto it = stage1_checkpoints.find(cond);
    if (it == stage1_checkpoints.end() || !std::filesystem::exists(it->second)) {
      missing.push_back(std::string(cond) + " (" +
                        (it == stage1_checkpoints.end() ? "not given" : it->second.string()) +
                        ")");
    }
  }
  if (!missing.empty()) {
    std::string m = "ablation: missing stage-1 checkpoint for";
    for (const auto& s : missing) m += " " + s;
    throw MissingArtifactError(m);
  }
  AblationGrid grid;
  for (bool sat : {true, false}) {
    ModelGraph model(ModelDims::from_corpus(cfg.corpus), cfg.seed);
    load_checkpoint(model, stage1_checkpoints.at(sat ? "sat_on" : "sat_off"));
    for (bool proj : {true, false}) {
      EvalReport r = evaluate_condition(model, corpus, cfg, sat, proj, proj);
      write_report(out / "ablation" / r.condition / "eval_report.json", r);
      for (auto& p : write_report_plots(r, out / "plots", cfg.corpus.speakers_per_language))
        grid.plots.push_back(p);
      grid.reports.push_back(std::move(r));
    }
  }
  return grid;
}

}  // namespace langemb
