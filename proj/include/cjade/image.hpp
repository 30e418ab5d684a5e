#pragma once

// Small image toolkit over CHW float tensors in [0,1]. Everything here is
// deterministic; resampling is bilinear throughout.

#include <cmath>

#include "cjade/tensor.hpp"

namespace cjade::img {

// Samples channel c of a CHW tensor at a real-valued point with the edge rule
// chosen by the caller. reflect: mirror across the border (abcb|a pattern);
// clamp: nearest edge pixel.
enum class EdgeRule { Clamp, Reflect };

inline int wrap_index(int i, int n, EdgeRule rule) {
    if (n == 1) return 0;
    if (rule == EdgeRule::Clamp) return i < 0 ? 0 : (i >= n ? n - 1 : i);
    // reflect without repeating the border sample
    const int period = 2 * (n - 1);
    int m = i % period;
    if (m < 0) m += period;
    return m < n ? m : period - m;
}

inline float sample_bilinear(const Tensor& chw, int c, float y, float x, EdgeRule rule) {
    const int H = chw.shape[1], W = chw.shape[2];
    const float fy = std::floor(y), fx = std::floor(x);
    const int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
    const float dy = y - fy, dx = x - fx;
    const float* base = chw.data.data() + static_cast<std::size_t>(c) * H * W;
    auto px = [&](int yy, int xx) {
        return base[static_cast<std::size_t>(wrap_index(yy, H, rule)) * W + wrap_index(xx, W, rule)];
    };
    const float top = px(y0, x0) * (1 - dx) + px(y0, x0 + 1) * dx;
    const float bot = px(y0 + 1, x0) * (1 - dx) + px(y0 + 1, x0 + 1) * dx;
    return top * (1 - dy) + bot * dy;
}

// Bilinear resize of a CHW image using pixel-center alignment.
inline Tensor resize_bilinear(const Tensor& chw, int out_h, int out_w) {
    if (chw.ndim() != 3) throw ShapeError("resize: expected CHW, got " + chw.shape_str());
    if (out_h < 1 || out_w < 1) throw ValueError("resize: output must be at least 1x1");
    const int C = chw.shape[0], H = chw.shape[1], W = chw.shape[2];
    Tensor out({C, out_h, out_w});
    const float sy = static_cast<float>(H) / out_h;
    const float sx = static_cast<float>(W) / out_w;
    for (int c = 0; c < C; ++c)
        for (int oy = 0; oy < out_h; ++oy)
            for (int ox = 0; ox < out_w; ++ox) {
                const float y = (oy + 0.5f) * sy - 0.5f;
                const float x = (ox + 0.5f) * sx - 0.5f;
                out.data[(static_cast<std::size_t>(c) * out_h + oy) * out_w + ox] =
                    sample_bilinear(chw, c, y, x, EdgeRule::Clamp);
            }
    return out;
}

// Pads (replicating edges) or crops around the center so the result is
// exactly out_h x out_w. A constant image stays constant.
inline Tensor center_pad_crop(const Tensor& chw, int out_h, int out_w) {
    if (chw.ndim() != 3) throw ShapeError("center_pad_crop: expected CHW, got " + chw.shape_str());
    const int C = chw.shape[0], H = chw.shape[1], W = chw.shape[2];
    Tensor out({C, out_h, out_w});
    const int oy0 = (H - out_h) / 2;
    const int ox0 = (W - out_w) / 2;
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < out_h; ++y)
            for (int x = 0; x < out_w; ++x) {
                const int sy = wrap_index(y + oy0, H, EdgeRule::Clamp);
                const int sx = wrap_index(x + ox0, W, EdgeRule::Clamp);
                out.data[(static_cast<std::size_t>(c) * out_h + y) * out_w + x] =
                    chw.data[(static_cast<std::size_t>(c) * H + sy) * W + sx];
            }
    return out;
}

// Rotation about the image center with reflected-edge fill. Angle in degrees,
// positive = counterclockwise in image coordinates.
inline Tensor rotate_bilinear(const Tensor& chw, float degrees) {
    if (chw.ndim() != 3) throw ShapeError("rotate: expected CHW, got " + chw.shape_str());
    const int C = chw.shape[0], H = chw.shape[1], W = chw.shape[2];
    const float rad = degrees * 3.14159265358979323846f / 180.0f;
    const float cs = std::cos(rad), sn = std::sin(rad);
    const float cy = (H - 1) * 0.5f, cx = (W - 1) * 0.5f;
    Tensor out({C, H, W});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            // inverse map: rotate the output grid back into source space
            const float ry = y - cy, rx = x - cx;
            const float sy = cy + ry * cs - rx * sn;
            const float sx = cx + ry * sn + rx * cs;
            for (int c = 0; c < C; ++c)
                out.data[(static_cast<std::size_t>(c) * H + y) * W + x] =
                    sample_bilinear(chw, c, sy, sx, EdgeRule::Reflect);
        }
    return out;
}

inline void clamp01(Tensor& t) {
    for (auto& v : t.data) v = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
}

// Crop [y0, y1) x [x0, x1) from a CHW image.
inline Tensor crop(const Tensor& chw, int y0, int x0, int y1, int x1) {
    if (chw.ndim() != 3) throw ShapeError("crop: expected CHW, got " + chw.shape_str());
    const int C = chw.shape[0], H = chw.shape[1], W = chw.shape[2];
    if (y0 < 0 || x0 < 0 || y1 > H || x1 > W || y0 >= y1 || x0 >= x1)
        throw ValueError("crop: box [" + std::to_string(y0) + "," + std::to_string(x0) + ")x[" +
                         std::to_string(y1) + "," + std::to_string(x1) + ") outside " + chw.shape_str());
    Tensor out({C, y1 - y0, x1 - x0});
    for (int c = 0; c < C; ++c)
        for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x)
                out.data[(static_cast<std::size_t>(c) * (y1 - y0) + (y - y0)) * (x1 - x0) + (x - x0)] =
                    chw.data[(static_cast<std::size_t>(c) * H + y) * W + x];
    return out;
}

} // namespace cjade::img
