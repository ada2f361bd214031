#include "refine3d/binvox.hpp"

#include <sstream>

#include "refine3d/errors.hpp"
#include "refine3d/fsio.hpp"

namespace refine3d {

std::string binvox_bytes(const VoxelGrid& grid) {
    const int64_t d = grid.dim;
    std::string out = "#binvox 1\n";
    out += "dim " + std::to_string(d) + " " + std::to_string(d) + " " + std::to_string(d) + "\n";
    out += "translate 0 0 0\n";
    out += "scale 1\n";
    out += "data\n";

    uint8_t run_value = 0;
    int run_len = 0;
    bool first = true;
    auto flush = [&] {
        while (run_len > 0) {
            const int chunk = run_len > 255 ? 255 : run_len;
            out.push_back(static_cast<char>(run_value));
            out.push_back(static_cast<char>(chunk));
            run_len -= chunk;
        }
    };
    for (int64_t x = 0; x < d; ++x)
        for (int64_t z = 0; z < d; ++z)
            for (int64_t y = 0; y < d; ++y) {
                const uint8_t v = grid.at(x, y, z) > 0.5f ? 1 : 0;
                if (first || v != run_value) {
                    flush();
                    run_value = v;
                    run_len = 1;
                    first = false;
                } else {
                    ++run_len;
                }
            }
    flush();
    return out;
}

VoxelGrid parse_binvox(const std::string& bytes) {
    size_t pos = 0;
    auto next_line = [&]() -> std::string {
        const size_t nl = bytes.find('\n', pos);
        if (nl == std::string::npos)
            throw FormatError("binvox: unterminated header at byte " + std::to_string(pos));
        std::string line = bytes.substr(pos, nl - pos);
        pos = nl + 1;
        return line;
    };

    if (next_line() != "#binvox 1") throw FormatError("binvox: bad magic line");
    int64_t dx = 0, dy = 0, dz = 0;
    bool have_dim = false;
    for (;;) {
        const size_t line_start = pos;
        std::string line = next_line();
        if (line == "data") break;
        std::istringstream ls(line);
        std::string keyword;
        ls >> keyword;
        if (keyword == "dim") {
            if (!(ls >> dx >> dy >> dz))
                throw FormatError("binvox: unparseable dim line at byte " +
                                  std::to_string(line_start));
            have_dim = true;
        } else if (keyword == "translate" || keyword == "scale") {
            // accepted, not used
        } else {
            throw FormatError("binvox: unknown header keyword '" + keyword + "' at byte " +
                              std::to_string(line_start));
        }
    }
    if (!have_dim) throw FormatError("binvox: missing dim line");
    if (dx < 1 || dx != dy || dy != dz)
        throw FormatError("binvox: expected cubic positive dims, got " + std::to_string(dx) +
                          " " + std::to_string(dy) + " " + std::to_string(dz));

    VoxelGrid grid(dx);
    const int64_t total = dx * dx * dx;
    int64_t filled = 0;
    int64_t x = 0, z = 0, y = 0;
    while (filled < total) {
        if (pos >= bytes.size())
            throw FormatError("binvox: truncated payload at byte " + std::to_string(pos));
        if (pos + 1 >= bytes.size())
            throw FormatError("binvox: dangling value byte at byte " + std::to_string(pos));
        const uint8_t value = static_cast<uint8_t>(bytes[pos]);
        const uint8_t count = static_cast<uint8_t>(bytes[pos + 1]);
        if (value > 1)
            throw FormatError("binvox: non-binary value byte at byte " + std::to_string(pos));
        if (count == 0)
            throw FormatError("binvox: zero run length at byte " + std::to_string(pos + 1));
        if (filled + count > total)
            throw FormatError("binvox: run overflows the grid at byte " + std::to_string(pos));
        for (int i = 0; i < count; ++i) {
            grid.at(x, y, z) = static_cast<float>(value);
            ++filled;
            if (++y == dx) {
                y = 0;
                if (++z == dx) {
                    z = 0;
                    ++x;
                }
            }
        }
        pos += 2;
    }
    return grid;
}

void write_binvox(const VoxelGrid& grid, const std::filesystem::path& path) {
    write_file_atomic(path, binvox_bytes(grid));
}

VoxelGrid read_binvox(const std::filesystem::path& path) { return parse_binvox(read_file(path)); }

}  // namespace refine3d
