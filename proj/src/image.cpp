#include "conpure/image.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "conpure/error.hpp"

namespace conpure {

Image::Image(int height, int width, float fill) : height_(height), width_(width) {
    if (height < 0 || width < 0) {
        throw ShapeError("negative image dimension");
    }
    data_.assign(static_cast<std::size_t>(height) * width, fill);
}

Mask::Mask(int height, int width, bool fill) : height_(height), width_(width) {
    if (height < 0 || width < 0) {
        throw ShapeError("negative mask dimension");
    }
    data_.assign(static_cast<std::size_t>(height) * width, fill ? 1 : 0);
}

std::size_t Mask::count() const {
    return static_cast<std::size_t>(std::count(data_.begin(), data_.end(), std::uint8_t{1}));
}

double psnr(const Image& a, const Image& b) {
    if (!a.same_shape(b)) {
        throw ShapeError("psnr: image shapes differ");
    }
    double mse = 0.0;
    auto pa = a.pixels();
    auto pb = b.pixels();
    for (std::size_t i = 0; i < pa.size(); ++i) {
        const double d = static_cast<double>(pa[i]) - pb[i];
        mse += d * d;
    }
    mse /= static_cast<double>(pa.size());
    if (mse == 0.0) {
        return std::numeric_limits<double>::infinity();
    }
    return 10.0 * std::log10(1.0 / mse);
}

void quantize_8bit(Image& image) {
    for (auto& v : image.pixels()) {
        const float c = std::clamp(v, 0.0f, 1.0f);
        v = static_cast<float>(std::lround(c * 255.0f)) / 255.0f;
    }
}

void clamp_unit(Image& image) {
    for (auto& v : image.pixels()) {
        v = std::clamp(v, 0.0f, 1.0f);
    }
}

Image mask_to_image(const Mask& mask) {
    Image out(mask.height(), mask.width());
    auto bits = mask.bits();
    auto px = out.pixels();
    for (std::size_t i = 0; i < bits.size(); ++i) {
        px[i] = bits[i] ? 1.0f : 0.0f;
    }
    return out;
}

}  // namespace conpure
