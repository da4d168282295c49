#include "structlat/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>

namespace structlat {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void png_fail(png_structp, png_const_charp msg) { throw FormatError(std::string("libpng: ") + msg); }
void png_warn(png_structp, png_const_charp) {}

std::uint8_t to_byte(float v) {
    const float u = (std::clamp(v, -1.0f, 1.0f) + 1.0f) * 127.5f;
    return static_cast<std::uint8_t>(std::lround(u));
}

}  // namespace

void write_png(const std::filesystem::path& path, const Raster& image) {
    if (image.width <= 0 || image.height <= 0 ||
        image.rgb.size() != static_cast<std::size_t>(image.width) * image.height * 3) {
        throw ArgumentError("write_png: raster size does not match its dimensions");
    }
    FilePtr file(std::fopen(path.c_str(), "wb"));
    if (!file) throw FormatError("write_png: cannot open " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
    png_infop info = png_create_info_struct(png);
    try {
        png_init_io(png, file.get());
        png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
                     PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
        png_write_info(png, info);
        for (int y = 0; y < image.height; ++y) {
            png_write_row(png, image.rgb.data() + static_cast<std::size_t>(y) * image.width * 3);
        }
        png_write_end(png, nullptr);
    } catch (...) {
        png_destroy_write_struct(&png, &info);
        throw;
    }
    png_destroy_write_struct(&png, &info);
}

Raster read_png(const std::filesystem::path& path) {
    FilePtr file(std::fopen(path.c_str(), "rb"));
    if (!file) throw FormatError("read_png: cannot open " + path.string());
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
    png_infop info = png_create_info_struct(png);
    Raster out;
    try {
        png_init_io(png, file.get());
        png_read_info(png, info);
        const auto color = png_get_color_type(png, info);
        if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
        if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
        if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
        if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
        if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
        png_read_update_info(png, info);
        out.width = static_cast<int>(png_get_image_width(png, info));
        out.height = static_cast<int>(png_get_image_height(png, info));
        if (png_get_rowbytes(png, info) != static_cast<std::size_t>(out.width) * 3) {
            throw FormatError("read_png: unsupported pixel layout in " + path.string());
        }
        out.rgb.resize(static_cast<std::size_t>(out.width) * out.height * 3);
        for (int y = 0; y < out.height; ++y) {
            png_read_row(png, out.rgb.data() + static_cast<std::size_t>(y) * out.width * 3, nullptr);
        }
    } catch (...) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw;
    }
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

Raster to_raster(const Tensor4<float>& images, Index b) {
    if (images.c != 3) throw ArgumentError("to_raster: expected 3 channels, got " + images.shape_string());
    Raster r{static_cast<int>(images.w), static_cast<int>(images.h), {}};
    r.rgb.resize(static_cast<std::size_t>(images.size() / images.n));
    const auto s = images.sample(b);
    for (Index p = 0; p < s.rows(); ++p)
        for (Index ch = 0; ch < 3; ++ch) r.rgb[static_cast<std::size_t>(p * 3 + ch)] = to_byte(s(p, ch));
    return r;
}

namespace {

template <typename PixelFn>
Raster tile(Index n, Index h, Index w, int cols, PixelFn pixel) {
    if (n <= 0) throw ArgumentError("image grid: no samples");
    if (cols <= 0) throw ArgumentError("image grid: cols must be positive");
    const Index ncols = std::min<Index>(cols, n);
    const Index nrows = (n + ncols - 1) / ncols;
    Raster r;
    r.width = static_cast<int>(ncols * (w + 1) + 1);
    r.height = static_cast<int>(nrows * (h + 1) + 1);
    r.rgb.assign(static_cast<std::size_t>(r.width) * r.height * 3, 255);
    for (Index b = 0; b < n; ++b) {
        const Index y0 = (b / ncols) * (h + 1) + 1;
        const Index x0 = (b % ncols) * (w + 1) + 1;
        for (Index i = 0; i < h; ++i) {
            for (Index j = 0; j < w; ++j) {
                std::uint8_t* dst = r.rgb.data() + ((y0 + i) * r.width + x0 + j) * 3;
                pixel(b, i, j, dst);
            }
        }
    }
    return r;
}

}  // namespace

Raster image_grid(const Tensor4<float>& images, int cols) {
    if (images.c != 3) throw ArgumentError("image_grid: expected 3 channels, got " + images.shape_string());
    return tile(images.n, images.h, images.w, cols, [&](Index b, Index i, Index j, std::uint8_t* dst) {
        for (Index ch = 0; ch < 3; ++ch) dst[ch] = to_byte(images(b, i, j, ch));
    });
}

Raster map_grid(const Tensor4<float>& maps, int cols) {
    if (maps.c != 1) throw ArgumentError("map_grid: expected 1 channel, got " + maps.shape_string());
    std::vector<std::pair<float, float>> range(static_cast<std::size_t>(maps.n));
    for (Index b = 0; b < maps.n; ++b) {
        range[static_cast<std::size_t>(b)] = {maps.sample(b).minCoeff(), maps.sample(b).maxCoeff()};
    }
    return tile(maps.n, maps.h, maps.w, cols, [&](Index b, Index i, Index j, std::uint8_t* dst) {
        const auto [lo, hi] = range[static_cast<std::size_t>(b)];
        const float u = hi > lo ? (maps(b, i, j, 0) - lo) / (hi - lo) : 0.5f;
        dst[0] = dst[1] = dst[2] = static_cast<std::uint8_t>(std::lround(255.0f * u));
    });
}

void save_image_dataset(const std::filesystem::path& dir, const ImageDataset& data) {
    std::filesystem::create_directories(dir);
    std::ofstream index(dir / "index.csv");
    if (!index) throw FormatError("save_image_dataset: cannot write " + (dir / "index.csv").string());
    index << "file,label,objects\n";
    for (Index b = 0; b < data.size(); ++b) {
        char name[32];
        std::snprintf(name, sizeof(name), "%05lld.png", static_cast<long long>(b));
        write_png(dir / name, to_raster(data.images, b));
        index << name << ',' << (data.labels.empty() ? 0 : data.labels[static_cast<std::size_t>(b)]) << ',';
        if (!data.objects.empty()) {
            // shape:color:cx:cy:scale separated by ';'
            const auto& objs = data.objects[static_cast<std::size_t>(b)];
            for (std::size_t k = 0; k < objs.size(); ++k) {
                if (k) index << ';';
                index << objs[k].shape << ':' << objs[k].color << ':' << objs[k].cx << ':' << objs[k].cy << ':'
                      << objs[k].scale;
            }
        }
        index << '\n';
    }
}

ImageDataset load_image_dataset(const std::filesystem::path& dir, int size) {
    if (!std::filesystem::is_directory(dir)) throw FormatError("dataset directory not found: " + dir.string());
    std::vector<std::filesystem::path> files;
    std::vector<int> labels;
    const auto index_path = dir / "index.csv";
    if (std::filesystem::exists(index_path)) {
        std::ifstream in(index_path);
        std::string line;
        std::getline(in, line);
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            std::istringstream row(line);
            std::string file, label;
            std::getline(row, file, ',');
            std::getline(row, label, ',');
            files.push_back(dir / file);
            try {
                labels.push_back(std::stoi(label));
            } catch (const std::exception&) {
                throw FormatError("index.csv: bad label '" + label + "' for " + file);
            }
        }
    } else {
        for (const auto& e : std::filesystem::directory_iterator(dir)) {
            if (e.path().extension() == ".png") files.push_back(e.path());
        }
        std::sort(files.begin(), files.end());
        labels.assign(files.size(), 0);
    }
    if (files.empty()) throw FormatError("no images in " + dir.string());
    ImageDataset data;
    data.images = Tensor4<float>(static_cast<Index>(files.size()), size, size, 3);
    data.labels = labels;
    data.num_classes = *std::max_element(labels.begin(), labels.end()) + 1;
    for (std::size_t b = 0; b < files.size(); ++b) {
        const Raster r = read_png(files[b]);
        if (r.width != size || r.height != size) {
            throw FormatError(files[b].string() + ": expected " + std::to_string(size) + "x" + std::to_string(size) +
                              ", got " + std::to_string(r.width) + "x" + std::to_string(r.height));
        }
        auto s = data.images.sample(static_cast<Index>(b));
        for (Index p = 0; p < s.rows(); ++p)
            for (Index ch = 0; ch < 3; ++ch) s(p, ch) = r.rgb[static_cast<std::size_t>(p * 3 + ch)] / 127.5f - 1.0f;
    }
    return data;
}

}  // namespace structlat
