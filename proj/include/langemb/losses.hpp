#pragma once

// Language-embedding objectives and the stage composites.
//
//   L_lang = CE(lang_logits, y_lang)              batch mean
//   L_spk  = CE(spk_logits, y_spk)                logits come through the GRL
//   L_le   = L_lang + L_spk
//   stage 1 (multilingual):  L_task + L_le
//   stage 2 (low resource):  L_task
//
// L_task is the per-frame phoneme cross-entropy of the downstream head.

#include <cstdio>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "langemb/binary_io.hpp"
#include "langemb/config.hpp"
#include "langemb/tensor.hpp"

namespace langemb {

struct LossReport {
  double l_lang = 0.0;
  double l_spk = 0.0;
  double l_le = 0.0;
  double l_task = 0.0;
  double l_total = 0.0;
  long step = 0;
};

inline Tensor language_loss(const Tensor& lang_logits, std::span<const int> y_lang) {
  return softmax_cross_entropy(lang_logits, y_lang);
}

/// Plain cross-entropy; the adversarial effect lives in the GRL backward rule
/// applied upstream of `spk_logits`.
inline Tensor speaker_loss(const Tensor& spk_logits, std::span<const int> y_spk) {
  return softmax_cross_entropy(spk_logits, y_spk);
}

inline Tensor le_loss(const Tensor& l_lang, const Tensor& l_spk) {
  return add(l_lang, l_spk);
}

inline Tensor composite_loss(Stage stage, const Tensor& l_le, const Tensor& l_task) {
  switch (stage) {
    case Stage::kMultilingual: return add(l_task, l_le);
    case Stage::kLowResource: return l_task;
  }
  throw std::invalid_argument("composite_loss: unknown stage " +
                              std::to_string(static_cast<int>(stage)));
}

inline Stage parse_stage(const std::string& s) {
  if (s == "multilingual" || s == "1") return Stage::kMultilingual;
  if (s == "low_resource" || s == "2") return Stage::kLowResource;
  throw std::invalid_argument("unknown stage '" + s + "'");
}

// ---------------------------------------------------------------------------
// metrics.csv
// ---------------------------------------------------------------------------
//
// One file per run directory. Each training invocation owns a block of rows
// tagged with its stage name; rewriting a tag replaces its block in place so
// re-running a command reproduces the file byte for byte.

inline constexpr const char* kMetricsHeader =
    "stage,step,l_lang,l_spk,l_le,l_task,l_total";

inline std::string format_metrics_row(const std::string& tag, const LossReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%s,%ld,%.17g,%.17g,%.17g,%.17g,%.17g",
                tag.c_str(), r.step, r.l_lang, r.l_spk, r.l_le, r.l_task,
                r.l_total);
  return buf;
}

inline void write_metrics_block(const std::filesystem::path& path,
                                const std::string& tag,
                                const std::vector<LossReport>& rows) {
  std::vector<std::pair<std::string, std::vector<std::string>>> blocks;
  if (std::filesystem::exists(path)) {
    std::string text = read_file_text(path);
    std::size_t pos = 0;
    bool header = true;
    while (pos < text.size()) {
      std::size_t end = text.find('\n', pos);
      if (end == std::string::npos) end = text.size();
      std::string line = text.substr(pos, end - pos);
      pos = end + 1;
      if (header) {
        header = false;
        continue;
      }
      if (line.empty()) continue;
      const std::string t = line.substr(0, line.find(','));
      if (blocks.empty() || blocks.back().first != t) blocks.push_back({t, {}});
      blocks.back().second.push_back(std::move(line));
    }
  }
  std::vector<std::string> fresh;
  for (const auto& r : rows) fresh.push_back(format_metrics_row(tag, r));
  bool replaced = false;
  std::vector<std::pair<std::string, std::vector<std::string>>> merged;
  for (auto& b : blocks) {
    if (b.first == tag) {
      if (!replaced) merged.push_back({tag, fresh});
      replaced = true;
    } else {
      merged.push_back(std::move(b));
    }
  }
  if (!replaced) merged.push_back({tag, fresh});

  std::string out = std::string(kMetricsHeader) + "\n";
  for (const auto& b : merged)
    for (const auto& line : b.second) out += line + "\n";
  write_file_text(path, out);
}

}  // namespace langemb
