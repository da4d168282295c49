#pragma once

#include "structlat/dataset.hpp"

#include <filesystem>

namespace structlat {

/// 8-bit RGB raster, row-major, 3 bytes per pixel.
struct Raster {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> rgb;
};

void write_png(const std::filesystem::path& path, const Raster& image);
Raster read_png(const std::filesystem::path& path);  // gray / alpha are converted to RGB

/// Sample `b` of an image batch in [-1, 1] to 8-bit RGB.
Raster to_raster(const Tensor4<float>& images, Index b);

/// Tiles samples into a grid of `cols` columns with a 1-pixel border.
Raster image_grid(const Tensor4<float>& images, int cols);

/// Tiles single-channel maps into a grid; each map is min-max normalized to
/// [0, 1] on its own (constant maps render mid-gray).
Raster map_grid(const Tensor4<float>& maps, int cols);

/// Writes images as 00000.png, ... plus index.csv (file,label,objects).
void save_image_dataset(const std::filesystem::path& dir, const ImageDataset& data);

/// Reads a directory written by save_image_dataset, or any directory of
/// PNGs (sorted by name, label 0) when index.csv is absent. Images must all
/// be `size` x `size`.
ImageDataset load_image_dataset(const std::filesystem::path& dir, int size);

}  // namespace structlat
