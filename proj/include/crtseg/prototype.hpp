#pragma once

// Prototype classifier: local prototypes pooled over non-overlapping windows,
// class prototypes by masked average pooling, scaled-cosine scoring of the
// query features, within-class fusion of prototype scores and a class softmax.

#include "crtseg/data.hpp"
#include "crtseg/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <vector>

namespace crtseg {

struct ALPConfig {
    std::size_t window_h = 4;
    std::size_t window_w = 4;
    double fg_threshold = 0.95;  // minimum class fraction of a window
    double alpha = 20.0;         // cosine multiplier

    void validate() const;
    bool operator==(const ALPConfig&) const = default;
};

enum class PrototypeKind { local, global };

struct Prototype {
    std::vector<double> vector;
    std::int32_t class_id = 0;
    PrototypeKind kind = PrototypeKind::global;
    std::size_t origin_m = 0, origin_n = 0;  // window index, locals only
    // The vector is weight * sum of the features at these positions.
    std::vector<std::size_t> positions;
    double weight = 0.0;
};

struct PrototypeSet {
    std::vector<Prototype> prototypes;
    std::vector<std::int32_t> classes{0, 1};

    std::size_t count(std::int32_t class_id) const;
    std::size_t size() const noexcept { return prototypes.size(); }
};

// Windows whose fraction of `mask` pixels reaches the threshold, each giving
// the plain mean of its features. Remainder rows/columns are dropped.
std::vector<Prototype> local_prototypes(const FeatureMap& features, const MaskMap& mask_ds,
                                        const ALPConfig& cfg, std::int32_t class_id = 1);

// sum(y f) / sum(y) over positions where mask_ds == 1. Throws EmptyClassMask.
Prototype class_prototype(const FeatureMap& features, const MaskMap& mask_ds, std::int32_t class_id);

// Background (complement of mask_ds) then foreground; each class contributes
// its class prototype followed by its gated local prototypes. A feature grid
// smaller than the window yields class prototypes only.
PrototypeSet assemble_prototype_set(const FeatureMap& features, const MaskMap& mask_ds,
                                    const ALPConfig& cfg);

constexpr double kCosineEps = 1e-8;

struct ScoreMaps {
    std::size_t height = 0, width = 0;
    std::vector<std::int32_t> prototype_class;  // class of each row of `scores`
    Matrix scores;  // P x (H'W'), each in [-alpha, alpha]
    Matrix fused;   // (J+1) x (H'W')
    // Intermediates reused by the backward pass.
    std::vector<double> prototype_norms, feature_norms;
    Matrix fusion_weights;  // P x (H'W'), softmax within each class
};

ScoreMaps similarity_maps(const PrototypeSet& set, const FeatureMap& query, double alpha);

struct Prediction {
    std::size_t height = 0, width = 0;  // feature grid
    Matrix probs;                       // (J+1) x (H'W')
    MaskMap labels;                     // H' x W'
    std::size_t out_height = 0, out_width = 0;
    Matrix probs_full;                  // (J+1) x (HW), bilinear from probs
    MaskMap labels_full;                // H x W
};

// Class softmax of the fused maps, argmax with ties to the lowest class, and
// bilinear (half-pixel centers) upsampling of the probabilities to out_h x out_w.
Prediction predict(const ScoreMaps& scores, std::size_t out_h, std::size_t out_w);

// Separable bilinear resampling with half-pixel centers, edge-clamped.
struct Resampler {
    struct Tap {
        std::size_t i0, i1;
        double w0, w1;
    };
    std::size_t in_h = 0, in_w = 0, out_h = 0, out_w = 0;
    std::vector<Tap> rows, cols;

    Resampler(std::size_t in_h, std::size_t in_w, std::size_t out_h, std::size_t out_w);
    // Each row of `in` is one in_h x in_w plane.
    Matrix forward(const Matrix& in) const;
    Matrix backward(const Matrix& grad_out) const;
};

// Prototype set, scoring and prediction in one traced pass.
struct HeadTrace {
    PrototypeSet prototypes;
    ScoreMaps scores;
    Prediction prediction;
};

Prediction classify(const FeatureMap& support, const MaskMap& support_mask_ds, const FeatureMap& query,
                    const ALPConfig& cfg, std::size_t out_h, std::size_t out_w, HeadTrace* trace = nullptr);

struct HeadGrads {
    FeatureMap support, query;
};

// Given dL/d(probs_full), returns dL/d(support features) and dL/d(query features).
HeadGrads classify_backward(const HeadTrace& trace, const FeatureMap& support, const FeatureMap& query,
                            const Matrix& grad_probs_full, double alpha);

}  // namespace crtseg
