#pragma once

#include <optional>
#include <string>
#include <vector>

#include "afrd/tensor.hpp"

AFRD_BEGIN_NAMESPACE

enum class Label { normal = 0, anomalous = 1 };

/// One physical sample imaged under N lightings.
struct ImageSet {
    std::vector<Tensor> images;  // N tensors [3,H,W], values in [0,1]
    Label label = Label::normal;
    std::optional<Tensor> mask;  // [H,W], values in {0,1}
    std::string sample_id;

    std::size_t lightings() const { return images.size(); }
    std::size_t height() const { return images.empty() ? 0 : images[0].dim(1); }
    std::size_t width() const { return images.empty() ? 0 : images[0].dim(2); }

    /// Throws DataError when the set violates its invariants.
    void validate() const;
};

AFRD_END_NAMESPACE
