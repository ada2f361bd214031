#pragma once

#include <filesystem>
#include <string>

namespace refine3d {

std::string read_file(const std::filesystem::path& path);

// Writes to a sibling temp file and renames into place, so failed commands
// never leave partial output behind.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);

// Renames tmp over final (same guarantee, for writers that need a FILE*).
void atomic_replace(const std::filesystem::path& tmp, const std::filesystem::path& final_path);

std::filesystem::path temp_sibling(const std::filesystem::path& path);

}  // namespace refine3d
