#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "protodensity/tensor.hpp"

namespace protodensity {

/// Shortest decimal representation that round-trips exactly.
std::string format_double(double value);
double parse_double(std::string_view text, std::string_view what);
long long parse_int(std::string_view text, std::string_view what);

std::string trim(std::string_view text);
std::vector<std::string> split(std::string_view text, char sep);

void write_text(const std::filesystem::path& path, std::string_view contents);
std::string read_text(const std::filesystem::path& path);

struct PixelRect {
    std::size_t x0, y0, x1, y1;  // inclusive
};

/// 8-bit binary PGM with linear min-max scaling; the scaling is written to
/// `<path>.scale` as `min = ...` / `max = ...` lines. Accepts [H x W] or
/// [1 x H x W]. Rectangles are drawn as 1-px white borders after scaling.
void write_pgm(const std::filesystem::path& path, const Tensor& image,
               const std::vector<PixelRect>& boxes = {});

} // namespace protodensity
