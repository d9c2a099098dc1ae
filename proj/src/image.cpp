#include "vitlens/error.hpp"
#include "vitlens/model_io.hpp"
#include "vitlens/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <jpeglib.h>
#include <png.h>

namespace vitlens {

namespace fs = std::filesystem;

Image Image::solid(int width, int height, std::array<uint8_t, 3> rgb) {
    Image img{width, height, std::vector<uint8_t>(static_cast<size_t>(width) * height * 3)};
    for (size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = rgb[i % 3];
    return img;
}

void validate_image(const Image& image) {
    if (image.width <= 0 || image.height <= 0) {
        fail(ErrorCode::input, "degenerate image " + std::to_string(image.width) + "x" + std::to_string(image.height));
    }
    if (image.pixels.size() != static_cast<size_t>(image.width) * image.height * 3) {
        fail(ErrorCode::input, "image pixel buffer does not match its dimensions");
    }
}

void validate_boxes(const std::vector<Box>& boxes, int width, int height) {
    for (const auto& b : boxes) {
        if (b.x0 < 0 || b.y0 < 0 || b.x1 > width || b.y1 > height || b.x0 >= b.x1 || b.y0 >= b.y1) {
            fail(ErrorCode::input, "box '" + b.label + "' (" + std::to_string(b.x0) + "," + std::to_string(b.y0) + ")-(" +
                                       std::to_string(b.x1) + "," + std::to_string(b.y1) + ") is invalid for a " +
                                       std::to_string(width) + "x" + std::to_string(height) + " image");
        }
    }
}

namespace {

bool is_png(std::span<const uint8_t> bytes) {
    return bytes.size() >= 8 && png_sig_cmp(bytes.data(), 0, 8) == 0;
}

bool is_jpeg(std::span<const uint8_t> bytes) {
    return bytes.size() >= 3 && bytes[0] == 0xFF && bytes[1] == 0xD8 && bytes[2] == 0xFF;
}

Image decode_png(std::span<const uint8_t> bytes) {
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
        fail(ErrorCode::format, std::string("PNG decode failed: ") + img.message);
    }
    img.format = PNG_FORMAT_RGB;
    Image out{static_cast<int>(img.width), static_cast<int>(img.height),
              std::vector<uint8_t>(PNG_IMAGE_SIZE(img))};
    if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
        std::string msg = img.message;
        png_image_free(&img);
        fail(ErrorCode::format, "PNG decode failed: " + msg);
    }
    return out;
}

struct JpegErrorManager {
    jpeg_error_mgr base;
    char message[JMSG_LENGTH_MAX];
};

[[noreturn]] void jpeg_error_exit(j_common_ptr cinfo) {
    auto* mgr = reinterpret_cast<JpegErrorManager*>(cinfo->err);
    (*cinfo->err->format_message)(cinfo, mgr->message);
    throw Error(ErrorCode::format, std::string("JPEG decode failed: ") + mgr->message);
}

Image decode_jpeg(std::span<const uint8_t> bytes) {
    jpeg_decompress_struct cinfo{};
    JpegErrorManager err{};
    cinfo.err = jpeg_std_error(&err.base);
    err.base.error_exit = jpeg_error_exit;
    try {
        jpeg_create_decompress(&cinfo);
        jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
        jpeg_read_header(&cinfo, TRUE);
        cinfo.out_color_space = JCS_RGB;
        jpeg_start_decompress(&cinfo);
        Image out{static_cast<int>(cinfo.output_width), static_cast<int>(cinfo.output_height), {}};
        out.pixels.resize(static_cast<size_t>(out.width) * out.height * 3);
        while (cinfo.output_scanline < cinfo.output_height) {
            JSAMPROW row = out.pixels.data() + static_cast<size_t>(cinfo.output_scanline) * out.width * 3;
            jpeg_read_scanlines(&cinfo, &row, 1);
        }
        jpeg_finish_decompress(&cinfo);
        jpeg_destroy_decompress(&cinfo);
        return out;
    } catch (...) {
        jpeg_destroy_decompress(&cinfo);
        throw;
    }
}

struct ResizeGeometry {
    int resized_w, resized_h, left, top;
};

ResizeGeometry resize_geometry(int width, int height, int size) {
    ResizeGeometry g{};
    if (width <= height) {
        g.resized_w = size;
        g.resized_h = std::max(size, static_cast<int>(std::lround(static_cast<double>(height) * size / width)));
    } else {
        g.resized_h = size;
        g.resized_w = std::max(size, static_cast<int>(std::lround(static_cast<double>(width) * size / height)));
    }
    g.left = (g.resized_w - size) / 2;
    g.top = (g.resized_h - size) / 2;
    return g;
}

} // namespace

Image decode_image(std::span<const uint8_t> bytes) {
    if (is_png(bytes)) return decode_png(bytes);
    if (is_jpeg(bytes)) return decode_jpeg(bytes);
    fail(ErrorCode::format, "unsupported image format (expected PNG or JPEG)");
}

Image load_image(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::io, "cannot open " + path.string());
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_image(bytes);
}

std::vector<uint8_t> encode_png(const Image& image) {
    validate_image(image);
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(image.width);
    img.height = static_cast<png_uint_32>(image.height);
    img.format = PNG_FORMAT_RGB;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&img, nullptr, &size, 0, image.pixels.data(), 0, nullptr)) {
        fail(ErrorCode::io, std::string("PNG encode failed: ") + img.message);
    }
    std::vector<uint8_t> out(size);
    if (!png_image_write_to_memory(&img, out.data(), &size, 0, image.pixels.data(), 0, nullptr)) {
        fail(ErrorCode::io, std::string("PNG encode failed: ") + img.message);
    }
    out.resize(size);
    return out;
}

void save_png(const Image& image, const fs::path& path) {
    const auto bytes = encode_png(image);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::io, "cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

namespace {

// Square [size x size x 3] buffer of resized, cropped pixel values in [0, 255].
std::vector<double> square_pixels(const Image& image, int size) {
    std::vector<double> square(static_cast<size_t>(size) * size * 3);
    if (image.width == size && image.height == size) {
        for (size_t i = 0; i < square.size(); ++i) square[i] = image.pixels[i];
        return square;
    }
    const ResizeGeometry g = resize_geometry(image.width, image.height, size);
    const double sx = static_cast<double>(image.width) / g.resized_w;
    const double sy = static_cast<double>(image.height) / g.resized_h;
    for (int oy = 0; oy < size; ++oy) {
        const double fy = std::clamp((oy + g.top + 0.5) * sy - 0.5, 0.0, image.height - 1.0);
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, image.height - 1);
        const double wy = fy - y0;
        for (int ox = 0; ox < size; ++ox) {
            const double fx = std::clamp((ox + g.left + 0.5) * sx - 0.5, 0.0, image.width - 1.0);
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, image.width - 1);
            const double wx = fx - x0;
            for (int c = 0; c < 3; ++c) {
                const double top = image.at(x0, y0, c) * (1.0 - wx) + image.at(x1, y0, c) * wx;
                const double bottom = image.at(x0, y1, c) * (1.0 - wx) + image.at(x1, y1, c) * wx;
                square[static_cast<size_t>((oy * size + ox) * 3 + c)] = top * (1.0 - wy) + bottom * wy;
            }
        }
    }
    return square;
}

} // namespace

Image model_frame(const Image& image, const Manifest& manifest) {
    validate_image(image);
    const int size = manifest.image_size;
    const auto square = square_pixels(image, size);
    Image out{size, size, std::vector<uint8_t>(square.size())};
    for (size_t i = 0; i < square.size(); ++i) {
        out.pixels[i] = static_cast<uint8_t>(std::clamp(std::lround(square[i]), 0L, 255L));
    }
    return out;
}

Tensor preprocess(const Image& image, const Manifest& manifest) {
    validate_image(image);
    const int size = manifest.image_size;
    const int p = manifest.patch_size;
    const int grid = manifest.grid_size();
    const auto square = square_pixels(image, size);

    Tensor patches({manifest.num_patches(), manifest.patch_dim()});
    for (int gy = 0; gy < grid; ++gy) {
        for (int gx = 0; gx < grid; ++gx) {
            auto row = patches.row(gy * grid + gx);
            for (int c = 0; c < 3; ++c) {
                const double mean = manifest.preprocess_mean[static_cast<size_t>(c)];
                const double stdev = manifest.preprocess_std[static_cast<size_t>(c)];
                for (int py = 0; py < p; ++py) {
                    for (int px = 0; px < p; ++px) {
                        const int y = gy * p + py, x = gx * p + px;
                        const double v = square[static_cast<size_t>((y * size + x) * 3 + c)] / 255.0;
                        row[static_cast<size_t>((c * p + py) * p + px)] = static_cast<float>((v - mean) / stdev);
                    }
                }
            }
        }
    }
    return patches;
}

std::vector<Box> map_boxes_to_model(const std::vector<Box>& boxes, int width, int height, const Manifest& manifest) {
    const int size = manifest.image_size;
    std::vector<Box> out;
    if (width == size && height == size) {
        for (const auto& b : boxes) {
            Box c{b.label, std::max(b.x0, 0), std::max(b.y0, 0), std::min(b.x1, size), std::min(b.y1, size)};
            if (c.x0 < c.x1 && c.y0 < c.y1) out.push_back(c);
        }
        return out;
    }
    const ResizeGeometry g = resize_geometry(width, height, size);
    const double sx = static_cast<double>(g.resized_w) / width;
    const double sy = static_cast<double>(g.resized_h) / height;
    for (const auto& b : boxes) {
        Box c{b.label,
              std::clamp(static_cast<int>(std::lround(b.x0 * sx)) - g.left, 0, size),
              std::clamp(static_cast<int>(std::lround(b.y0 * sy)) - g.top, 0, size),
              std::clamp(static_cast<int>(std::lround(b.x1 * sx)) - g.left, 0, size),
              std::clamp(static_cast<int>(std::lround(b.y1 * sy)) - g.top, 0, size)};
        if (c.x0 < c.x1 && c.y0 < c.y1) out.push_back(c);
    }
    return out;
}

std::array<uint8_t, 3> mean_color(const Manifest& manifest) {
    std::array<uint8_t, 3> rgb{};
    for (size_t c = 0; c < 3; ++c) {
        rgb[c] = static_cast<uint8_t>(std::clamp(std::lround(manifest.preprocess_mean[c] * 255.0), 0L, 255L));
    }
    return rgb;
}

Image mask_boxes(const Image& image, const std::vector<Box>& boxes, MaskFill fill, const Manifest& manifest) {
    validate_image(image);
    validate_boxes(boxes, image.width, image.height);
    const auto color = fill == MaskFill::mean ? mean_color(manifest) : std::array<uint8_t, 3>{0, 0, 0};
    Image out = image;
    for (const auto& b : boxes) {
        for (int y = b.y0; y < b.y1; ++y) {
            for (int x = b.x0; x < b.x1; ++x) {
                for (int c = 0; c < 3; ++c) out.at(x, y, c) = color[static_cast<size_t>(c)];
            }
        }
    }
    return out;
}

int64_t union_area(const std::vector<Box>& boxes, int width, int height) {
    if (boxes.empty()) return 0;
    std::vector<uint8_t> covered(static_cast<size_t>(width) * height, 0);
    int64_t area = 0;
    for (const auto& b : boxes) {
        for (int y = std::max(b.y0, 0); y < std::min(b.y1, height); ++y) {
            for (int x = std::max(b.x0, 0); x < std::min(b.x1, width); ++x) {
                auto& cell = covered[static_cast<size_t>(y) * width + x];
                if (!cell) {
                    cell = 1;
                    ++area;
                }
            }
        }
    }
    return area;
}

std::vector<Box> random_mask_like(const std::vector<Box>& boxes, int width, int height, uint64_t seed) {
    if (width <= 0 || height <= 0) fail(ErrorCode::input, "random_mask_like: degenerate image dimensions");
    const int64_t target = union_area(boxes, width, height);
    if (target == 0) return {};
    if (target > static_cast<int64_t>(width) * height) {
        fail(ErrorCode::input, "random_mask_like: area " + std::to_string(target) + " exceeds the image");
    }

    // Prefer an exact factorization closest to square; otherwise round.
    int best_w = 0, best_h = 0;
    for (int w = 1; w <= width; ++w) {
        if (target % w != 0) continue;
        const int64_t h = target / w;
        if (h > height) continue;
        if (best_w == 0 || std::abs(w - h) < std::abs(best_w - best_h)) {
            best_w = w;
            best_h = static_cast<int>(h);
        }
    }
    if (best_w == 0) {
        const int side = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(target))));
        best_w = std::min(width, side);
        best_h = static_cast<int>(std::lround(static_cast<double>(target) / best_w));
        if (best_h > height) {
            best_h = height;
            best_w = static_cast<int>(std::lround(static_cast<double>(target) / height));
        }
        best_w = std::clamp(best_w, 1, width);
        best_h = std::clamp(best_h, 1, height);
    }
    SeededStream rng(seed);
    const int x0 = static_cast<int>(rng.next_below(static_cast<uint64_t>(width - best_w + 1)));
    const int y0 = static_cast<int>(rng.next_below(static_cast<uint64_t>(height - best_h + 1)));
    const std::string label = boxes.size() == 1 ? boxes.front().label : std::string("random");
    return {Box{label, x0, y0, x0 + best_w, y0 + best_h}};
}

} // namespace vitlens
