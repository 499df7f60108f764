#pragma once

#include <filesystem>
#include <string>

#include "vitc/model/vit.hpp"

namespace vitc {

// Checkpoint layout (all models: baseline, compacted, folded):
//
//   VITC-CHECKPOINT 1
//   config <field> <value>           one line per ViTConfig field
//   merge <after_block> <h|v>        one line per merge plan entry
//   meta <key> <value>               free-form run metadata
//   retained <block> <qk|v> <head> <indices...>   folded models only
//   retained <block> <proj|fc1> <indices...>
//   tensor <name> f32 <rank> <dims...> <byte_offset>
//   end
//   <payload: little-endian f32 data of every tensor in manifest order>
//
// Offsets are relative to the first payload byte. Compactor masks are stored
// as tensors named masks.<block>.<kind>.
std::string serialize_checkpoint(const ViTModel& model);
ViTModel deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const ViTModel& model, const std::filesystem::path& path);
// Throws CheckpointError on missing files, malformed headers or truncation.
ViTModel load_checkpoint(const std::filesystem::path& path);

// FNV-1a over the serialized bytes, as 16 hex digits.
std::string checkpoint_hash(const ViTModel& model);

}  // namespace vitc
