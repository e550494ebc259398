// Loads an on-disk dataset tree (see datagen.hpp for the layout) into
// ImageSets with pixel values scaled to [0,1].
#pragma once

#include <string>
#include <vector>

#include "afrd/datagen.hpp"
#include "afrd/image_set.hpp"

AFRD_BEGIN_NAMESPACE

struct Dataset {
    std::size_t n_lightings = 0;
    std::vector<ImageSet> train;
    std::vector<ImageSet> test;
};

/// [3,H,W] tensor from a PPM image, values v / maxval.
Tensor image_to_tensor(const Image8& image);
/// 8-bit PPM from a [3,H,W] tensor in [0,1] (round to nearest).
Image8 tensor_to_image(const Tensor& image);

/// Masks are binarized at 128. Errors name the sample, lighting and path.
Dataset load_dataset(const std::string& root);
Dataset load_dataset(const DatasetIndex& index);

AFRD_END_NAMESPACE
