#pragma once

#include <filesystem>
#include <vector>

#include "red/world.hpp"

namespace red {

/// Whether the evaluation-only "meta" object survives loading. Model-facing
/// code always strips it; only the bias audit and evaluation stratification
/// may keep it.
enum class MetaPolicy { kStrip, kKeep };

void write_jsonl(const std::filesystem::path& path, const std::vector<Sample>& samples);

std::vector<Sample> read_jsonl(const std::filesystem::path& path,
                               MetaPolicy policy = MetaPolicy::kStrip);

}  // namespace red
