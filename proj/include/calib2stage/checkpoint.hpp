#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "calib2stage/model.hpp"
#include "json.hpp"

namespace calib2stage {

enum class StageTag { stage1, tst, vtst, e2e, var_e2e };

std::string_view to_string(StageTag s);
StageTag parse_stage_tag(std::string_view s);

// Whether the stage trains with a frozen extractor.
constexpr bool is_two_stage(StageTag s) { return s == StageTag::tst || s == StageTag::vtst; }

struct Checkpoint {
  Model model;
  StageTag stage = StageTag::stage1;
  std::uint64_t seed = 0;
};

nlohmann::json spec_to_json(const ModelSpec& spec);
// Throws ParseError naming the offending key.
ModelSpec spec_from_json(const nlohmann::json& j);

// Single JSON document: {"spec", "stage_tag", "seed", "params": {key: {shape, data}}}.
// Doubles are written in shortest round-trip form, so load(save(m)) is bit-exact.
std::string checkpoint_to_string(const Checkpoint& ckpt);
Checkpoint checkpoint_from_string(const std::string& text);

// Written atomically (temp file + rename).
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// FNV-1a over the raw bytes of every parameter in a group, in key order.
std::uint64_t group_hash(const Model& model, GroupName group);

}  // namespace calib2stage
