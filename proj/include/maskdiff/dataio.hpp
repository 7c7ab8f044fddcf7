#pragma once

#include <png.h>

#include <array>
#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "maskdiff/conditioning.hpp"
#include "maskdiff/errors.hpp"
#include "maskdiff/losses.hpp"
#include "maskdiff/rng.hpp"
#include "maskdiff/tensor.hpp"

namespace maskdiff {

static_assert(std::endian::native == std::endian::little,
              "checkpoint container assumes a little-endian host");

// ============================================================================
// PNG I/O
// ============================================================================

struct ImageU8 {
    int w = 0, h = 0, channels = 0;  // interleaved rows, 1 or 3 channels
    std::vector<std::uint8_t> v;
};

inline ImageU8 read_png(const std::string& path) {
    FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw io_error("cannot open '" + path + "'");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(f);
        throw io_error("libpng initialization failed for '" + path + "'");
    }
    std::vector<std::uint8_t> data;
    std::vector<png_bytep> rows;
    int w = 0, h = 0, channels = 0;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(f);
        throw io_error("failed to decode PNG '" + path + "'");
    }
    png_init_io(png, f);
    png_read_info(png, info);
    w = static_cast<int>(png_get_image_width(png, info));
    h = static_cast<int>(png_get_image_height(png, info));
    const png_byte color = png_get_color_type(png, info);
    const png_byte depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    channels = static_cast<int>(png_get_channels(png, info));
    data.resize(static_cast<size_t>(w) * h * channels);
    rows.resize(static_cast<size_t>(h));
    for (int y = 0; y < h; ++y) rows[static_cast<size_t>(y)] = data.data() + static_cast<size_t>(y) * w * channels;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(f);
    ImageU8 img;
    img.w = w;
    img.h = h;
    img.channels = channels;
    img.v = std::move(data);
    return img;
}

inline void write_png(const std::string& path, const ImageU8& img) {
    if (img.channels != 1 && img.channels != 3)
        throw argument_error("write_png: only grayscale or RGB supported");
    FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw io_error("cannot create '" + path + "'");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_write_struct(&png, &info);
        std::fclose(f);
        throw io_error("libpng initialization failed for '" + path + "'");
    }
    std::vector<png_bytep> rows(static_cast<size_t>(img.h));
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(f);
        throw io_error("failed to encode PNG '" + path + "'");
    }
    png_init_io(png, f);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.w), static_cast<png_uint_32>(img.h), 8,
                 img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < img.h; ++y)
        rows[static_cast<size_t>(y)] =
            const_cast<png_bytep>(img.v.data() + static_cast<size_t>(y) * img.w * img.channels);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(f);
}

// ============================================================================
// Image conversions
// ============================================================================

// 8-bit RGB -> [-1, 1] planar tensor [3, h, w].
template <typename T>
Tensor<T> image_to_tensor(const ImageU8& img) {
    if (img.channels != 3) throw validation_error("image_to_tensor: RGB image expected");
    Tensor<T> t({3, img.h, img.w});
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int c = 0; c < 3; ++c)
                t.at(c, y, x) = static_cast<T>(
                    img.v[(static_cast<size_t>(y) * img.w + x) * 3 + c] / 255.0 * 2.0 - 1.0);
    return t;
}

template <typename T>
ImageU8 tensor_to_image(const Tensor<T>& t) {
    if (t.rank() != 3 || t.dim(0) != 3) throw argument_error("tensor_to_image: [3,h,w] expected");
    ImageU8 img;
    img.channels = 3;
    img.h = t.dim(1);
    img.w = t.dim(2);
    img.v.resize(static_cast<size_t>(img.h) * img.w * 3);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int c = 0; c < 3; ++c) {
                double u = (static_cast<double>(t.at(c, y, x)) + 1.0) / 2.0 * 255.0;
                u = std::min(255.0, std::max(0.0, std::round(u)));
                img.v[(static_cast<size_t>(y) * img.w + x) * 3 + c] =
                    static_cast<std::uint8_t>(u);
            }
    return img;
}

template <typename T>
ImageU8 map_to_gray_image(const Tensor<T>& m) {
    if (m.rank() != 2) throw argument_error("map_to_gray_image: rank-2 tensor expected");
    ImageU8 img;
    img.channels = 1;
    img.h = m.dim(0);
    img.w = m.dim(1);
    img.v.resize(static_cast<size_t>(img.h) * img.w);
    for (long long i = 0; i < m.numel(); ++i) {
        double u = std::min(1.0, std::max(0.0, static_cast<double>(m[i]))) * 255.0;
        img.v[static_cast<size_t>(i)] = static_cast<std::uint8_t>(std::round(u));
    }
    return img;
}

// Bilinear resize of a planar [c, h, w] tensor. Identity sizes pass through
// bit-equal.
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& t, int h2, int w2) {
    if (t.rank() != 3) throw argument_error("bilinear_resize: rank-3 tensor expected");
    const int c = t.dim(0), h = t.dim(1), w = t.dim(2);
    if (h == h2 && w == w2) return t;
    Tensor<T> out({c, h2, w2});
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h2; ++y) {
            const double sy = (y + 0.5) * h / static_cast<double>(h2) - 0.5;
            const int y0 = std::max(0, std::min(h - 1, static_cast<int>(std::floor(sy))));
            const int y1 = std::min(h - 1, y0 + 1);
            const double fy = std::min(1.0, std::max(0.0, sy - y0));
            for (int x = 0; x < w2; ++x) {
                const double sx = (x + 0.5) * w / static_cast<double>(w2) - 0.5;
                const int x0 = std::max(0, std::min(w - 1, static_cast<int>(std::floor(sx))));
                const int x1 = std::min(w - 1, x0 + 1);
                const double fx = std::min(1.0, std::max(0.0, sx - x0));
                const double v00 = t.at(ch, y0, x0), v01 = t.at(ch, y0, x1);
                const double v10 = t.at(ch, y1, x0), v11 = t.at(ch, y1, x1);
                out.at(ch, y, x) = static_cast<T>((1 - fy) * ((1 - fx) * v00 + fx * v01) +
                                                  fy * ((1 - fx) * v10 + fx * v11));
            }
        }
    return out;
}

// Grayscale mask file -> binary mask at target size (threshold 128, then
// nearest-neighbor so it stays binary).
inline BinaryMask load_mask_png(const std::string& path, int target_size) {
    ImageU8 m = read_png(path);
    if (m.channels != 1) throw validation_error("mask '" + path + "' is not single-channel");
    BinaryMask bm(m.h, m.w);
    for (size_t j = 0; j < m.v.size(); ++j) bm.v[j] = m.v[j] >= 128 ? 1 : 0;
    if (bm.is_blank())
        throw validation_error("mask '" + path + "' is empty after thresholding");
    bm = nearest_resize(bm, target_size, target_size);
    if (bm.is_blank()) throw validation_error("mask '" + path + "' vanished after resizing");
    return bm;
}

// Image + per-subject mask files -> model-ready pair. Images are bilinearly
// resized to target_size and scaled to [-1, 1]; masks are thresholded at 128
// and nearest-neighbor resized so they stay binary.
template <typename T>
std::pair<Tensor<T>, SubjectMaskSet> load_pair(const std::string& image_path,
                                               const std::vector<std::string>& mask_paths,
                                               int target_size) {
    ImageU8 img = read_png(image_path);
    if (img.channels != 3)
        throw validation_error("image '" + image_path + "' is not 8-bit RGB");
    Tensor<T> latent = bilinear_resize(image_to_tensor<T>(img), target_size, target_size);
    SubjectMaskSet masks;
    for (size_t i = 0; i < mask_paths.size(); ++i) {
        BinaryMask bm = load_mask_png(mask_paths[i], target_size);
        bm.subject = static_cast<int>(i);
        masks[static_cast<int>(i)] = bm;
    }
    return {std::move(latent), std::move(masks)};
}

// ============================================================================
// Toy scenes
// ============================================================================

enum class ShapeKind { Circle, Square, Triangle };

inline const std::vector<std::string>& toy_shape_names() {
    static const std::vector<std::string> names{"circle", "square", "triangle"};
    return names;
}

struct NamedColor {
    std::string name;
    std::array<std::uint8_t, 3> rgb;
};

inline const std::vector<NamedColor>& toy_palette() {
    static const std::vector<NamedColor> palette{
        {"red", {230, 40, 40}},   {"green", {40, 200, 60}}, {"blue", {50, 80, 235}},
        {"yellow", {235, 220, 50}}, {"magenta", {225, 60, 220}},
    };
    return palette;
}

inline std::vector<std::string> toy_color_names() {
    std::vector<std::string> names;
    for (const auto& c : toy_palette()) names.push_back(c.name);
    return names;
}

// Plain words covering every toy-scene caption plus the finetune prompt
// scaffold ("a photo of ... and ...").
inline std::vector<std::string> toy_vocabulary_words() {
    std::vector<std::string> words{"a", "photo", "of", "and"};
    for (const auto& c : toy_palette()) words.push_back(c.name);
    for (const auto& s : toy_shape_names()) words.push_back(s);
    return words;
}

struct SubjectSpec {
    ShapeKind shape = ShapeKind::Circle;
    std::string color_name;
    std::array<std::uint8_t, 3> color{255, 255, 255};
    int min_scale = 10, max_scale = 22;  // bounding-box side in pixels
};

struct SceneSpec {
    int canvas = 64;
    std::vector<SubjectSpec> subjects;
    // Background color is drawn uniformly from this palette; empty means a
    // uniformly random RGB color.
    std::vector<std::array<std::uint8_t, 3>> background_palette;
    std::string caption_template = "a photo of {subjects}";
    bool allow_overlap = false;
    int max_placement_attempts = 100;
};

template <typename T>
struct ToyScene {
    Tensor<T> image;  // [3, s, s] in [-1, 1]
    SubjectMaskSet masks;
    std::string caption;
    std::vector<std::string> subject_descriptions;
};

namespace detail {

inline BinaryMask rasterize(ShapeKind kind, int size, int x0, int y0, int canvas) {
    BinaryMask m(canvas, canvas);
    switch (kind) {
        case ShapeKind::Square:
            for (int y = 0; y < size; ++y)
                for (int x = 0; x < size; ++x) m.at(y0 + y, x0 + x) = 1;
            break;
        case ShapeKind::Circle: {
            const double r = size / 2.0;
            const double cy = y0 + r - 0.5, cx = x0 + r - 0.5;
            for (int y = y0; y < y0 + size; ++y)
                for (int x = x0; x < x0 + size; ++x) {
                    const double dy = y - cy, dx = x - cx;
                    if (dy * dy + dx * dx <= r * r) m.at(y, x) = 1;
                }
            break;
        }
        case ShapeKind::Triangle:
            // Upward triangle: apex on the top row, full base on the bottom.
            for (int y = 0; y < size; ++y) {
                const double half = size <= 1 ? 0.5 : 0.5 * size * y / (size - 1.0);
                const double cx = x0 + size / 2.0 - 0.5;
                for (int x = x0; x < x0 + size; ++x)
                    if (std::abs(x - cx) <= half) m.at(y0 + y, x) = 1;
            }
            break;
    }
    return m;
}

}  // namespace detail

inline std::string shape_name(ShapeKind k) {
    return toy_shape_names()[static_cast<size_t>(k)];
}

// Renders anti-alias-free shapes on a solid background. Every subject's mask
// is its exact rendered footprint.
template <typename T>
ToyScene<T> make_toy_scene(const SceneSpec& spec, Rng& rng) {
    if (spec.subjects.empty()) throw config_error("scene: no subjects");
    for (size_t i = 0; i < spec.subjects.size(); ++i) {
        if (spec.subjects[i].max_scale > spec.canvas)
            throw config_error("scene: subject does not fit on canvas");
        for (size_t j = i + 1; j < spec.subjects.size(); ++j)
            if (spec.subjects[i].color == spec.subjects[j].color)
                throw config_error("scene: subject colors must be distinct");
    }
    const int s = spec.canvas;
    std::array<std::uint8_t, 3> bg{};
    if (spec.background_palette.empty()) {
        for (auto& c : bg) c = static_cast<std::uint8_t>(rng.uniform_index(256));
    } else {
        bg = spec.background_palette[rng.uniform_index(spec.background_palette.size())];
    }
    ToyScene<T> scene;
    scene.image = Tensor<T>({3, s, s});
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < s * s; ++i)
            scene.image.v[static_cast<size_t>(c) * s * s + i] =
                static_cast<T>(bg[static_cast<size_t>(c)] / 255.0 * 2.0 - 1.0);

    BinaryMask occupied(s, s);
    for (size_t si = 0; si < spec.subjects.size(); ++si) {
        const auto& sub = spec.subjects[si];
        BinaryMask mask;
        bool placed = false;
        for (int attempt = 0; attempt < spec.max_placement_attempts && !placed; ++attempt) {
            const int size =
                sub.min_scale + static_cast<int>(rng.uniform_index(
                                    static_cast<std::uint64_t>(sub.max_scale - sub.min_scale + 1)));
            const int x0 = static_cast<int>(rng.uniform_index(
                static_cast<std::uint64_t>(s - size + 1)));
            const int y0 = static_cast<int>(rng.uniform_index(
                static_cast<std::uint64_t>(s - size + 1)));
            mask = detail::rasterize(sub.shape, size, x0, y0, s);
            if (spec.allow_overlap) {
                placed = true;
            } else {
                bool clash = false;
                for (size_t p = 0; p < mask.v.size(); ++p)
                    if (mask.v[p] && occupied.v[p]) {
                        clash = true;
                        break;
                    }
                placed = !clash;
            }
        }
        if (!placed)
            throw validation_error("scene: could not place subject " + std::to_string(si) +
                                   " without overlap");
        for (size_t p = 0; p < mask.v.size(); ++p) occupied.v[p] |= mask.v[p];
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x)
                if (mask.at(y, x))
                    for (int c = 0; c < 3; ++c)
                        scene.image.at(c, y, x) =
                            static_cast<T>(sub.color[static_cast<size_t>(c)] / 255.0 * 2.0 - 1.0);
        mask.subject = static_cast<int>(si);
        scene.masks[static_cast<int>(si)] = mask;
        scene.subject_descriptions.push_back(sub.color_name + " " + shape_name(sub.shape));
    }
    std::string joined;
    for (size_t i = 0; i < scene.subject_descriptions.size(); ++i) {
        if (i) joined += " and ";
        joined += scene.subject_descriptions[i];
    }
    scene.caption = spec.caption_template;
    const auto pos = scene.caption.find("{subjects}");
    if (pos != std::string::npos) scene.caption.replace(pos, 10, joined);
    return scene;
}

// Random scene specification for corpus generation: 1-2 subjects with
// distinct palette colors and random shapes.
struct CorpusOptions {
    int canvas = 64;
    int min_subjects = 1, max_subjects = 2;
    int min_scale = 12, max_scale = 24;
};

inline SceneSpec random_scene_spec(const CorpusOptions& opt, Rng& rng) {
    SceneSpec spec;
    spec.canvas = opt.canvas;
    const int n = opt.min_subjects +
                  static_cast<int>(rng.uniform_index(
                      static_cast<std::uint64_t>(opt.max_subjects - opt.min_subjects + 1)));
    std::vector<int> colors;
    while (static_cast<int>(colors.size()) < n) {
        const int c = static_cast<int>(rng.uniform_index(toy_palette().size()));
        bool used = false;
        for (int u : colors) used = used || u == c;
        if (!used) colors.push_back(c);
    }
    for (int i = 0; i < n; ++i) {
        SubjectSpec sub;
        sub.shape = static_cast<ShapeKind>(rng.uniform_index(3));
        sub.color_name = toy_palette()[static_cast<size_t>(colors[static_cast<size_t>(i)])].name;
        sub.color = toy_palette()[static_cast<size_t>(colors[static_cast<size_t>(i)])].rgb;
        sub.min_scale = opt.min_scale;
        sub.max_scale = opt.max_scale;
        spec.subjects.push_back(sub);
    }
    return spec;
}

// ============================================================================
// Checkpoint container
// ============================================================================

// Single-file archive: 8-byte magic, u64 manifest length, JSON manifest,
// then raw little-endian f32 array data.
constexpr char kCheckpointMagic[8] = {'M', 'C', 'K', 'P', 'T', '0', '0', '1'};
constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
    std::map<std::string, Tensor<float>> arrays;
    nlohmann::json metadata;  // schedule params, config digest, phase tag, step count
};

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    nlohmann::json manifest;
    manifest["format_version"] = kCheckpointFormatVersion;
    manifest["metadata"] = ck.metadata;
    nlohmann::json arrays = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : ck.arrays) {
        nlohmann::json entry;
        entry["name"] = name;
        entry["shape"] = t.shape;
        entry["offset"] = offset;
        arrays.push_back(entry);
        offset += static_cast<std::uint64_t>(t.numel()) * sizeof(float);
    }
    manifest["arrays"] = arrays;
    const std::string mtext = manifest.dump();

    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw io_error("cannot create '" + tmp + "'");
        out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
        const std::uint64_t mlen = mtext.size();
        out.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
        out.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
        for (const auto& [name, t] : ck.arrays)
            out.write(reinterpret_cast<const char*>(t.data()),
                      static_cast<std::streamsize>(t.numel() * sizeof(float)));
        if (!out) throw io_error("failed writing '" + tmp + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw io_error("cannot move checkpoint into place at '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open '" + path + "'");
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
        throw schema_error("'" + path + "' is not a checkpoint file (bad magic)");
    std::uint64_t mlen = 0;
    in.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
    if (!in || mlen > (1u << 26)) throw schema_error("'" + path + "' has a corrupt manifest");
    std::string mtext(mlen, '\0');
    in.read(mtext.data(), static_cast<std::streamsize>(mlen));
    if (!in) throw schema_error("'" + path + "' is truncated (manifest)");
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(mtext);
    } catch (const nlohmann::json::exception&) {
        throw schema_error("'" + path + "' has an unparsable manifest");
    }
    if (!manifest.contains("format_version") ||
        manifest["format_version"].get<int>() != kCheckpointFormatVersion)
        throw schema_error("'" + path + "' has an unsupported format version");
    Checkpoint ck;
    ck.metadata = manifest.value("metadata", nlohmann::json::object());
    // Validate the full data section length before populating anything.
    const auto data_begin = in.tellg();
    in.seekg(0, std::ios::end);
    const std::uint64_t data_len = static_cast<std::uint64_t>(in.tellg() - data_begin);
    std::uint64_t expect = 0;
    for (const auto& entry : manifest["arrays"]) {
        long long n = 1;
        for (int d : entry["shape"].get<std::vector<int>>()) n *= d;
        if (entry["offset"].get<std::uint64_t>() != expect)
            throw schema_error("'" + path + "' manifest offsets are inconsistent");
        expect += static_cast<std::uint64_t>(n) * sizeof(float);
    }
    if (expect != data_len)
        throw schema_error("'" + path + "' is truncated (expected " + std::to_string(expect) +
                           " data bytes, found " + std::to_string(data_len) + ")");
    in.seekg(data_begin);
    for (const auto& entry : manifest["arrays"]) {
        const std::string name = entry["name"].get<std::string>();
        const std::vector<int> shape = entry["shape"].get<std::vector<int>>();
        Tensor<float> t(shape);
        in.read(reinterpret_cast<char*>(t.data()),
                static_cast<std::streamsize>(t.numel() * sizeof(float)));
        if (!in) throw schema_error("'" + path + "' is truncated (array '" + name + "')");
        ck.arrays.emplace(name, std::move(t));
    }
    return ck;
}

}  // namespace maskdiff
