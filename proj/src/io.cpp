#include "protodensity/io.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <iterator>
#include <sstream>

#include "protodensity/errors.hpp"

namespace protodensity {

std::string format_double(double value) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), value);
    return std::string(buf, res.ptr);
}

double parse_double(std::string_view text, std::string_view what) {
    const std::string t = trim(text);
    double value = 0.0;
    auto res = std::from_chars(t.data(), t.data() + t.size(), value);
    if (res.ec != std::errc() || res.ptr != t.data() + t.size()) {
        throw ConfigError(std::string(what) + ": not a number: '" + t + "'");
    }
    return value;
}

long long parse_int(std::string_view text, std::string_view what) {
    const std::string t = trim(text);
    long long value = 0;
    auto res = std::from_chars(t.data(), t.data() + t.size(), value);
    if (res.ec != std::errc() || res.ptr != t.data() + t.size()) {
        throw ConfigError(std::string(what) + ": not an integer: '" + t + "'");
    }
    return value;
}

std::string trim(std::string_view text) {
    const auto not_space = [](unsigned char c) { return !std::isspace(c); };
    auto b = std::find_if(text.begin(), text.end(), not_space);
    auto e = std::find_if(text.rbegin(), text.rend(), not_space).base();
    return b < e ? std::string(b, e) : std::string();
}

std::vector<std::string> split(std::string_view text, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = text.find(sep, start);
        out.emplace_back(trim(text.substr(start, pos - start)));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

void write_text(const std::filesystem::path& path, std::string_view contents) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw IoError("write failed: " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for reading: " + path.string());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_pgm(const std::filesystem::path& path, const Tensor& image,
               const std::vector<PixelRect>& boxes) {
    std::size_t h = 0, w = 0;
    if (image.rank() == 2) {
        h = image.dim(0);
        w = image.dim(1);
    } else if (image.rank() == 3 && image.dim(0) == 1) {
        h = image.dim(1);
        w = image.dim(2);
    } else {
        throw DimensionError("write_pgm: expected [H x W] or [1 x H x W], got " +
                             shape_string(image.shape()));
    }
    const auto [lo_it, hi_it] = std::minmax_element(image.data().begin(), image.data().end());
    const double lo = *lo_it, hi = *hi_it;
    const double range = hi > lo ? hi - lo : 1.0;
    std::vector<unsigned char> pixels(h * w);
    for (std::size_t i = 0; i < pixels.size(); ++i) {
        const double v = (image[i] - lo) / range * 255.0;
        pixels[i] = static_cast<unsigned char>(std::clamp(v + 0.5, 0.0, 255.0));
    }
    for (const PixelRect& r : boxes) {
        const std::size_t x1 = std::min(r.x1, w - 1), y1 = std::min(r.y1, h - 1);
        for (std::size_t x = r.x0; x <= x1; ++x) {
            pixels[r.y0 * w + x] = 255;
            pixels[y1 * w + x] = 255;
        }
        for (std::size_t y = r.y0; y <= y1; ++y) {
            pixels[y * w + r.x0] = 255;
            pixels[y * w + x1] = 255;
        }
    }
    std::ostringstream os;
    os << "P5\n" << w << ' ' << h << "\n255\n";
    std::string data = os.str();
    data.append(pixels.begin(), pixels.end());
    write_text(path, data);
    write_text(path.string() + ".scale",
               "min = " + format_double(lo) + "\nmax = " + format_double(hi) + "\n");
}

} // namespace protodensity
