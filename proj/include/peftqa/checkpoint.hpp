#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>

#include "peftqa/encoder.hpp"
#include "peftqa/tokenizer.hpp"

namespace peftqa {

inline constexpr std::uint16_t kCheckpointVersion = 1;

enum class CheckpointKind { kFull, kAdapter };

/// Header: "PFTF", version u16, u32-length JSON config (model geometry,
/// adapter settings, vocabulary, kind), u32 record count. Each record: name,
/// dtype tag (0 = float32, 1 = NF4), then either rank u32 + u64 dims + float
/// array, or the quantized wire format.
///
/// Adapter checkpoints keep adapter tensors plus the QA head, which is
/// trained alongside them.
void save_checkpoint(std::ostream& os, const EncoderModel& model, const Vocabulary& vocab, CheckpointKind kind);
void save_checkpoint(const std::filesystem::path& path, const EncoderModel& model, const Vocabulary& vocab,
                     CheckpointKind kind);

struct LoadedCheckpoint {
    EncoderModel model;
    Vocabulary vocab;
    CheckpointKind kind = CheckpointKind::kFull;
};

/// Restores a full checkpoint.
LoadedCheckpoint load_checkpoint(std::istream& is);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

/// Attaches the adapters stored in an adapter checkpoint to `base` (an
/// unadapted model of the same geometry) and returns the vocabulary.
Vocabulary apply_adapter_checkpoint(std::istream& is, EncoderModel& base);
Vocabulary apply_adapter_checkpoint(const std::filesystem::path& path, EncoderModel& base);

std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

}  // namespace peftqa
