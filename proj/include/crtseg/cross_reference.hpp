#pragma once

// Cross-reference block: bidirectional cross-attention between support and
// query features, global pooling, two FC gating blocks, gate fusion by
// element-wise product, and channel reweighting of both feature maps.

#include "crtseg/data.hpp"
#include "crtseg/linear.hpp"
#include "crtseg/params.hpp"
#include "crtseg/tensor.hpp"

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace crtseg {

struct AttentionConfig {
    std::size_t dim = 32;    // projection width d
    std::size_t heads = 1;
    std::uint64_t seed = 2;
    // Direction 2 reuses direction 1's projections and the query gate reuses
    // the support gate.
    bool tie_directions = false;

    void validate() const;
    bool operator==(const AttentionConfig&) const = default;
};

// Which parts of the block are active. Both off leaves plain channel gating
// on globally pooled features.
struct BlockOptions {
    bool mask_support = true;  // multiply support features by the support mask
    bool attention = true;     // cross-attention feeds the gates
    bool bypass = false;       // identity: the block is skipped entirely

    bool operator==(const BlockOptions&) const = default;
};

struct GateVector {
    std::vector<double> w;  // each component in (0,1)
};

// Average over each stride x stride cell (partial edge cells average over
// the pixels they cover), then threshold at 0.5 inclusive. Output is
// ceil(H/stride) x ceil(W/stride).
MaskMap downsample_mask(const MaskMap& mask, std::size_t stride);

// Zeroes background positions of the support features. Throws
// ValidationError if the mask does not reduce to the feature grid.
FeatureMap mask_support_features(const FeatureMap& support, const MaskMap& support_mask);
FeatureMap mask_features_ds(const FeatureMap& features, const MaskMap& mask_ds);

// Per-channel spatial mean.
std::vector<double> global_pool(const FeatureMap& features);

struct AttentionCache {
    std::vector<Matrix> probs;  // per head, N x M
};

// softmax(Q K^T / sqrt(d_head)) V, heads split the d columns evenly.
Matrix cross_attention(const Matrix& queries, const Matrix& keys, const Matrix& values,
                       std::size_t heads = 1, AttentionCache* cache = nullptr);

struct AttentionGrads {
    Matrix queries, keys, values;
};

AttentionGrads cross_attention_backward(const Matrix& queries, const Matrix& keys,
                                        const Matrix& values, const AttentionCache& cache,
                                        const Matrix& grad_out, std::size_t heads = 1);

// sigmoid(W2 relu(W1 v + b1) + b2)
class FcGate {
public:
    struct Cache {
        Matrix input, hidden_pre, hidden, output;
    };

    FcGate() = default;
    FcGate(const std::string& name, std::size_t channels, std::size_t hidden);

    GateVector forward(std::span<const double> v, Cache* cache = nullptr) const;
    std::vector<double> backward(const Cache& cache, std::span<const double> grad_gate);

    std::size_t channels() const noexcept { return fc1.in_features(); }
    std::size_t hidden() const noexcept { return fc1.out_features(); }
    void collect(ParameterList& out);

    Linear fc1;
    Linear fc2;
};

GateVector fc_gate(std::span<const double> v, const FcGate& gate);

// Token projections for one attention direction plus the map back to D.
struct ProjectionSet {
    ProjectionSet() = default;
    ProjectionSet(const std::string& name, std::size_t channels, std::size_t dim);

    Linear query, key, value, output;
    void collect(ParameterList& out);
};

// D x N feature map <-> N x D token matrix.
Matrix to_tokens(const FeatureMap& f);
FeatureMap from_tokens(const Matrix& tokens, const FeatureMap& like);

class CrossReferenceBlock {
public:
    struct Output {
        FeatureMap support;
        FeatureMap query;
        GateVector gate_support;
        GateVector gate_query;
        GateVector gate;  // gate_support * gate_query
    };

    struct DirectionTrace {
        Matrix q, k, v, attended, projected;
        AttentionCache attention;
    };

    struct Trace {
        FeatureMap support, query, support_in;
        MaskMap mask_ds;
        Matrix support_tokens, query_tokens;
        DirectionTrace s2q, q2s;
        std::vector<double> pooled_support, pooled_query;
        FcGate::Cache gate_support_cache, gate_query_cache;
        GateVector gate_support, gate_query, gate;
    };

    CrossReferenceBlock(std::size_t channels, const AttentionConfig& config, const BlockOptions& options);

    Output forward(const FeatureMap& support, const FeatureMap& query, const MaskMap& support_mask,
                   Trace* trace = nullptr) const;
    // Accumulates parameter gradients; returns (dL/dsupport, dL/dquery).
    std::pair<FeatureMap, FeatureMap> backward(const Trace& trace, const FeatureMap& grad_support,
                                               const FeatureMap& grad_query);

    // All distinct parameters (tied ones once).
    ParameterList parameters();
    // Parameters that can receive gradient under the current options.
    ParameterList active_parameters();

    const AttentionConfig& config() const noexcept { return config_; }
    const BlockOptions& options() const noexcept { return options_; }
    void set_options(const BlockOptions& o) { options_ = o; }
    std::size_t channels() const noexcept { return channels_; }

    ProjectionSet& support_to_query() { return s2q_; }
    ProjectionSet& query_to_support() { return config_.tie_directions ? s2q_ : q2s_; }
    FcGate& support_gate() { return gate_s_; }
    FcGate& query_gate() { return config_.tie_directions ? gate_s_ : gate_q_; }

private:
    const ProjectionSet& proj_q2s() const { return config_.tie_directions ? s2q_ : q2s_; }
    const FcGate& gate_q() const { return config_.tie_directions ? gate_s_ : gate_q_; }

    std::size_t channels_;
    AttentionConfig config_;
    BlockOptions options_;
    ProjectionSet s2q_, q2s_;
    FcGate gate_s_, gate_q_;
};

}  // namespace crtseg
