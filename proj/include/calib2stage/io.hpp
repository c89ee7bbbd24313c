#pragma once

#include <filesystem>
#include <string>

namespace calib2stage {

// Writes to "<path>.tmp.<unique>" then renames over `path`, so concurrent
// writers never leave an interleaved file behind.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);

std::string read_file(const std::filesystem::path& path);

}  // namespace calib2stage
