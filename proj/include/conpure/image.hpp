#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace conpure {

/// Single-channel image, row-major, pixel values nominally in [0, 1].
class Image {
public:
    Image() = default;
    Image(int height, int width, float fill = 0.0f);

    int height() const { return height_; }
    int width() const { return width_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    float& operator()(int y, int x) { return data_[static_cast<std::size_t>(y) * width_ + x]; }
    float operator()(int y, int x) const { return data_[static_cast<std::size_t>(y) * width_ + x]; }

    std::span<float> pixels() { return data_; }
    std::span<const float> pixels() const { return data_; }

    bool same_shape(const Image& other) const {
        return height_ == other.height_ && width_ == other.width_;
    }

    friend bool operator==(const Image&, const Image&) = default;

private:
    int height_ = 0;
    int width_ = 0;
    std::vector<float> data_;
};

/// Binary map; stored as 0/1 bytes.
class Mask {
public:
    Mask() = default;
    Mask(int height, int width, bool fill = false);

    int height() const { return height_; }
    int width() const { return width_; }
    std::size_t size() const { return data_.size(); }

    bool operator()(int y, int x) const { return data_[static_cast<std::size_t>(y) * width_ + x] != 0; }
    void set(int y, int x, bool v) { data_[static_cast<std::size_t>(y) * width_ + x] = v ? 1 : 0; }

    std::span<const std::uint8_t> bits() const { return data_; }
    std::span<std::uint8_t> bits() { return data_; }

    std::size_t count() const;
    bool same_shape(const Mask& other) const {
        return height_ == other.height_ && width_ == other.width_;
    }

    friend bool operator==(const Mask&, const Mask&) = default;

private:
    int height_ = 0;
    int width_ = 0;
    std::vector<std::uint8_t> data_;
};

/// Peak signal-to-noise ratio in dB for images in [0, 1]; +inf for identical images.
double psnr(const Image& a, const Image& b);

/// Rounds every pixel to the nearest multiple of 1/255 after clamping to [0, 1].
void quantize_8bit(Image& image);

void clamp_unit(Image& image);

Image mask_to_image(const Mask& mask);

}  // namespace conpure
