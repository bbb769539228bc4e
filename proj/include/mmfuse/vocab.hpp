// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "mmfuse/util.hpp"

// Fixed reserved token ids shared by the corpus, the multimodal encoder and
// the translation model. Corpus files record these in their header; loaders
// reject corpora whose layout disagrees.
namespace mmfuse::vocab {

inline constexpr int kPad = 0;
inline constexpr int kEos = 1;
inline constexpr int kMaskTok = 2;
inline constexpr int kRowSep = 3;    // image grid row separator
inline constexpr int kBlank = 4;     // empty image grid cell
inline constexpr int kAudioCtx = 5;  // marker preceding an audio context key
inline constexpr int kSrcMark = 6;   // introduces source text in the LM input
inline constexpr int kOcrMark = 7;   // requests an OCR-first decode
inline constexpr int kApeMark = 8;   // introduces a hypothesis to post-edit
inline constexpr int kPivotLang = 9; // source-side language tag

inline constexpr int kLangBase = 10;  // target language tags, kMaxLanguages of them
inline constexpr int kMaxLanguages = 4;

inline constexpr int kPromptSpeechImage = 14;
inline constexpr int kPromptSpeech = 15;
inline constexpr int kPromptImage = 16;
inline constexpr int kPromptText = 17;
inline constexpr int kPromptEnd = 18;

inline constexpr int kKeyA = 19;
inline constexpr int kKeyB = 20;

inline constexpr int kContentBase = 21;  // first content-pool id

inline int lang_tag(int lang_index) {
  if (lang_index < 0 || lang_index >= kMaxLanguages) {
    throw ConfigError("language index " + std::to_string(lang_index) +
                      " outside [0," + std::to_string(kMaxLanguages) + ")");
  }
  return kLangBase + lang_index;
}

inline bool is_lang_tag(int id) {
  return id >= kLangBase && id < kLangBase + kMaxLanguages;
}

std::string token_name(int id);  // readable name for corpus headers/reports

}  // namespace mmfuse::vocab
