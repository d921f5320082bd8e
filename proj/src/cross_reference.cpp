#include "crtseg/cross_reference.hpp"

#include "crtseg/encoder.hpp"
#include "crtseg/errors.hpp"
#include "crtseg/kernels.hpp"
#include "crtseg/rng.hpp"

#include <algorithm>
#include <cmath>

namespace crtseg {

using kernels::Trans;

namespace {

double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

void init_linear(Linear& l, Rng& rng, double gain) {
    l.weight.fill_normal(rng, std::sqrt(gain / static_cast<double>(l.in_features())));
}

// Forward of one attention direction: queries from `from`, keys/values from `to`.
Matrix run_direction(const ProjectionSet& p, const Matrix& from, const Matrix& to, std::size_t heads,
                     CrossReferenceBlock::DirectionTrace* t) {
    Matrix q = p.query.forward(from);
    Matrix k = p.key.forward(to);
    Matrix v = p.value.forward(to);
    AttentionCache cache;
    Matrix attended = cross_attention(q, k, v, heads, t ? &cache : nullptr);
    Matrix projected = p.output.forward(attended);
    if (t) {
        t->q = std::move(q);
        t->k = std::move(k);
        t->v = std::move(v);
        t->attention = std::move(cache);
        t->attended = std::move(attended);
        t->projected = projected;
    }
    return projected;
}

// Backward of one direction given dL/d(projected); returns (dfrom, dto).
std::pair<Matrix, Matrix> backprop_direction(ProjectionSet& p, const Matrix& from, const Matrix& to,
                                             std::size_t heads,
                                             const CrossReferenceBlock::DirectionTrace& t,
                                             const Matrix& grad_projected) {
    const Matrix d_attended = p.output.backward(t.attended, grad_projected);
    const AttentionGrads g = cross_attention_backward(t.q, t.k, t.v, t.attention, d_attended, heads);
    Matrix d_from = p.query.backward(from, g.queries);
    Matrix d_to = p.key.backward(to, g.keys);
    const Matrix d_to_v = p.value.backward(to, g.values);
    for (std::size_t i = 0; i < d_to.data.size(); ++i) d_to.data[i] += d_to_v.data[i];
    return {std::move(d_from), std::move(d_to)};
}

std::vector<double> column_mean(const Matrix& m) {
    std::vector<double> out(m.cols, 0.0);
    for (std::size_t r = 0; r < m.rows; ++r)
        for (std::size_t c = 0; c < m.cols; ++c) out[c] += m(r, c);
    for (double& v : out) v /= static_cast<double>(m.rows);
    return out;
}

}  // namespace

void AttentionConfig::validate() const {
    if (heads == 0) throw ValidationError("attention heads must be positive");
    if (dim < 8) throw ValidationError("attention dim must be at least 8");
    if (dim % heads != 0) throw ValidationError("attention dim must be divisible by heads");
}

MaskMap downsample_mask(const MaskMap& mask, std::size_t stride) {
    if (stride == 0) throw ValidationError("downsample_mask: stride must be positive");
    if (!mask.is_binary()) throw ValidationError("downsample_mask: mask must be binary");
    const std::size_t h = feature_extent(mask.height, stride), w = feature_extent(mask.width, stride);
    MaskMap out(h, w, 0);
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
            const std::size_t r1 = std::min((i + 1) * stride, mask.height);
            const std::size_t c1 = std::min((j + 1) * stride, mask.width);
            std::size_t on = 0, total = 0;
            for (std::size_t r = i * stride; r < r1; ++r)
                for (std::size_t c = j * stride; c < c1; ++c) {
                    on += static_cast<std::size_t>(mask.at(r, c));
                    ++total;
                }
            out.at(i, j) = 2 * on >= total ? 1 : 0;
        }
    return out;
}

FeatureMap mask_features_ds(const FeatureMap& features, const MaskMap& mask_ds) {
    if (mask_ds.height != features.height || mask_ds.width != features.width)
        throw ValidationError("mask grid " + std::to_string(mask_ds.height) + "x" +
                              std::to_string(mask_ds.width) + " does not match feature grid " +
                              std::to_string(features.height) + "x" + std::to_string(features.width));
    FeatureMap out = features;
    const std::size_t n = features.plane();
    for (std::size_t c = 0; c < features.channels; ++c)
        for (std::size_t i = 0; i < n; ++i)
            if (mask_ds.data[i] == 0) out.data[c * n + i] = 0.0;
    return out;
}

FeatureMap mask_support_features(const FeatureMap& support, const MaskMap& support_mask) {
    if (support.stride == 0) throw ValidationError("mask_support_features: feature stride unknown");
    if (feature_extent(support_mask.height, support.stride) != support.height ||
        feature_extent(support_mask.width, support.stride) != support.width)
        throw ValidationError("mask_support_features: a " + std::to_string(support_mask.height) + "x" +
                              std::to_string(support_mask.width) + " mask at stride " +
                              std::to_string(support.stride) + " does not give a " +
                              std::to_string(support.height) + "x" + std::to_string(support.width) +
                              " grid");
    return mask_features_ds(support, downsample_mask(support_mask, support.stride));
}

std::vector<double> global_pool(const FeatureMap& features) {
    std::vector<double> out(features.channels, 0.0);
    const double n = static_cast<double>(features.plane());
    for (std::size_t c = 0; c < features.channels; ++c) {
        double s = 0.0;
        for (double v : features.channel(c)) s += v;
        out[c] = s / n;
    }
    return out;
}

Matrix cross_attention(const Matrix& queries, const Matrix& keys, const Matrix& values,
                       std::size_t heads, AttentionCache* cache) {
    const std::size_t n = queries.rows, m = keys.rows, d = queries.cols;
    if (heads == 0 || d % heads != 0) throw ValidationError("cross_attention: d not divisible by heads");
    if (keys.cols != d || values.cols != d)
        throw ValidationError("cross_attention: query/key/value widths differ");
    if (values.rows != m) throw ValidationError("cross_attention: keys and values differ in length");
    if (m == 0) throw ValidationError("cross_attention: no keys");
    const std::size_t dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Matrix out(n, d);
    if (cache) cache->probs.assign(heads, Matrix());
    Matrix p(n, m);
    for (std::size_t h = 0; h < heads; ++h) {
        kernels::gemm(Trans::no, Trans::yes, n, m, dh, queries.data.data() + h * dh, d,
                      keys.data.data() + h * dh, d, 0.0, p.data.data(), m);
        for (std::size_t i = 0; i < n; ++i) {
            auto row = p.row(i);
            double mx = -INFINITY;
            for (double& s : row) {
                s *= scale;
                mx = std::max(mx, s);
            }
            double sum = 0.0;
            for (double& s : row) {
                s = std::exp(s - mx);
                sum += s;
            }
            for (double& s : row) s /= sum;
        }
        kernels::gemm(Trans::no, Trans::no, n, dh, m, p.data.data(), m, values.data.data() + h * dh, d,
                      0.0, out.data.data() + h * dh, d);
        if (cache) cache->probs[h] = p;
    }
    return out;
}

AttentionGrads cross_attention_backward(const Matrix& queries, const Matrix& keys,
                                        const Matrix& values, const AttentionCache& cache,
                                        const Matrix& grad_out, std::size_t heads) {
    const std::size_t n = queries.rows, m = keys.rows, d = queries.cols;
    if (cache.probs.size() != heads) throw ValidationError("cross_attention_backward: cache/head mismatch");
    if (grad_out.rows != n || grad_out.cols != d)
        throw ValidationError("cross_attention_backward: gradient shape mismatch");
    const std::size_t dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    AttentionGrads g{Matrix(n, d), Matrix(m, d), Matrix(m, d)};
    Matrix ds(n, m);
    for (std::size_t h = 0; h < heads; ++h) {
        const Matrix& p = cache.probs[h];
        // dV = P^T dA
        kernels::gemm(Trans::yes, Trans::no, m, dh, n, p.data.data(), m, grad_out.data.data() + h * dh, d,
                      0.0, g.values.data.data() + h * dh, d);
        // dP = dA V^T
        kernels::gemm(Trans::no, Trans::yes, n, m, dh, grad_out.data.data() + h * dh, d,
                      values.data.data() + h * dh, d, 0.0, ds.data.data(), m);
        for (std::size_t i = 0; i < n; ++i) {
            auto dp = ds.row(i);
            const auto pr = p.row(i);
            double inner = 0.0;
            for (std::size_t j = 0; j < m; ++j) inner += dp[j] * pr[j];
            for (std::size_t j = 0; j < m; ++j) dp[j] = pr[j] * (dp[j] - inner) * scale;
        }
        kernels::gemm(Trans::no, Trans::no, n, dh, m, ds.data.data(), m, keys.data.data() + h * dh, d, 0.0,
                      g.queries.data.data() + h * dh, d);
        kernels::gemm(Trans::yes, Trans::no, m, dh, n, ds.data.data(), m, queries.data.data() + h * dh, d,
                      0.0, g.keys.data.data() + h * dh, d);
    }
    return g;
}

FcGate::FcGate(const std::string& name, std::size_t channels, std::size_t hidden)
    : fc1(name + ".fc1", channels, hidden, true), fc2(name + ".fc2", hidden, channels, true) {}

GateVector FcGate::forward(std::span<const double> v, Cache* cache) const {
    if (v.size() != channels()) throw ValidationError("fc_gate: input length mismatch");
    Matrix x(1, v.size());
    std::copy(v.begin(), v.end(), x.data.begin());
    Matrix pre = fc1.forward(x);
    Matrix hid = pre;
    for (double& z : hid.data) z = z > 0.0 ? z : 0.0;
    Matrix out = fc2.forward(hid);
    GateVector g;
    g.w.resize(out.cols);
    for (std::size_t c = 0; c < out.cols; ++c) g.w[c] = sigmoid(out.data[c]);
    if (cache) {
        cache->input = std::move(x);
        cache->hidden_pre = std::move(pre);
        cache->hidden = std::move(hid);
        cache->output = Matrix(1, g.w.size());
        cache->output.data = g.w;
    }
    return g;
}

std::vector<double> FcGate::backward(const Cache& cache, std::span<const double> grad_gate) {
    Matrix dz(1, grad_gate.size());
    for (std::size_t c = 0; c < grad_gate.size(); ++c) {
        const double s = cache.output.data[c];
        dz.data[c] = grad_gate[c] * s * (1.0 - s);
    }
    Matrix dh = fc2.backward(cache.hidden, dz);
    for (std::size_t i = 0; i < dh.data.size(); ++i)
        if (!(cache.hidden_pre.data[i] > 0.0)) dh.data[i] = 0.0;
    return fc1.backward(cache.input, dh).data;
}

void FcGate::collect(ParameterList& out) {
    fc1.collect(out);
    fc2.collect(out);
}

GateVector fc_gate(std::span<const double> v, const FcGate& gate) { return gate.forward(v); }

ProjectionSet::ProjectionSet(const std::string& name, std::size_t channels, std::size_t dim)
    : query(name + ".query", channels, dim, false),
      key(name + ".key", channels, dim, false),
      value(name + ".value", channels, dim, false),
      output(name + ".output", dim, channels, false) {}

void ProjectionSet::collect(ParameterList& out) {
    query.collect(out);
    key.collect(out);
    value.collect(out);
    output.collect(out);
}

Matrix to_tokens(const FeatureMap& f) {
    const std::size_t n = f.plane();
    Matrix t(n, f.channels);
    for (std::size_t c = 0; c < f.channels; ++c)
        for (std::size_t i = 0; i < n; ++i) t(i, c) = f.data[c * n + i];
    return t;
}

FeatureMap from_tokens(const Matrix& tokens, const FeatureMap& like) {
    FeatureMap f(like.channels, like.height, like.width, like.stride);
    const std::size_t n = f.plane();
    for (std::size_t c = 0; c < f.channels; ++c)
        for (std::size_t i = 0; i < n; ++i) f.data[c * n + i] = tokens(i, c);
    return f;
}

CrossReferenceBlock::CrossReferenceBlock(std::size_t channels, const AttentionConfig& config,
                                         const BlockOptions& options)
    : channels_(channels), config_(config), options_(options) {
    config_.validate();
    if (channels == 0) throw ValidationError("cross-reference block needs at least one channel");
    const std::size_t hidden = std::max<std::size_t>(1, channels / 4);
    s2q_ = ProjectionSet("cross_reference.support_to_query", channels, config_.dim);
    q2s_ = ProjectionSet("cross_reference.query_to_support", channels, config_.dim);
    gate_s_ = FcGate("cross_reference.gate_support", channels, hidden);
    gate_q_ = FcGate("cross_reference.gate_query", channels, hidden);

    Rng rng(derive_seed(config_.seed, 0xC7));
    for (ProjectionSet* p : {&s2q_, &q2s_}) {
        init_linear(p->query, rng, 1.0);
        init_linear(p->key, rng, 1.0);
        init_linear(p->value, rng, 1.0);
        init_linear(p->output, rng, 1.0);
    }
    for (FcGate* g : {&gate_s_, &gate_q_}) {
        init_linear(g->fc1, rng, 2.0);
        init_linear(g->fc2, rng, 1.0);
    }
}

CrossReferenceBlock::Output CrossReferenceBlock::forward(const FeatureMap& support, const FeatureMap& query,
                                                         const MaskMap& support_mask, Trace* trace) const {
    if (!support.same_shape(query)) throw ValidationError("cross-reference block: support/query shapes differ");
    if (support.channels != channels_) throw ValidationError("cross-reference block: channel count mismatch");
    Output out;
    if (options_.bypass) {
        out.support = support;
        out.query = query;
        out.gate.w.assign(channels_, 1.0);
        out.gate_support = out.gate_query = out.gate;
        return out;
    }

    MaskMap mask_ds;
    FeatureMap support_in = support;
    if (options_.mask_support) {
        support_in = mask_support_features(support, support_mask);
        mask_ds = downsample_mask(support_mask, support.stride);
    }

    std::vector<double> pooled_s, pooled_q;
    Matrix s_tokens, q_tokens;
    DirectionTrace t_s2q, t_q2s;
    if (options_.attention) {
        s_tokens = to_tokens(support_in);
        q_tokens = to_tokens(query);
        const Matrix o1 = run_direction(s2q_, s_tokens, q_tokens, config_.heads, trace ? &t_s2q : nullptr);
        const Matrix o2 = run_direction(proj_q2s(), q_tokens, s_tokens, config_.heads, trace ? &t_q2s : nullptr);
        pooled_s = column_mean(o1);
        pooled_q = column_mean(o2);
    } else {
        pooled_s = global_pool(support_in);
        pooled_q = global_pool(query);
    }

    FcGate::Cache cs, cq;
    out.gate_support = gate_s_.forward(pooled_s, trace ? &cs : nullptr);
    out.gate_query = gate_q().forward(pooled_q, trace ? &cq : nullptr);
    out.gate.w.resize(channels_);
    for (std::size_t c = 0; c < channels_; ++c) out.gate.w[c] = out.gate_support.w[c] * out.gate_query.w[c];

    out.support = support;
    out.query = query;
    const std::size_t n = support.plane();
    for (std::size_t c = 0; c < channels_; ++c)
        for (std::size_t i = 0; i < n; ++i) {
            out.support.data[c * n + i] *= out.gate.w[c];
            out.query.data[c * n + i] *= out.gate.w[c];
        }

    if (trace) {
        trace->support = support;
        trace->query = query;
        trace->support_in = std::move(support_in);
        trace->mask_ds = std::move(mask_ds);
        trace->support_tokens = std::move(s_tokens);
        trace->query_tokens = std::move(q_tokens);
        trace->s2q = std::move(t_s2q);
        trace->q2s = std::move(t_q2s);
        trace->pooled_support = std::move(pooled_s);
        trace->pooled_query = std::move(pooled_q);
        trace->gate_support_cache = std::move(cs);
        trace->gate_query_cache = std::move(cq);
        trace->gate_support = out.gate_support;
        trace->gate_query = out.gate_query;
        trace->gate = out.gate;
    }
    return out;
}

std::pair<FeatureMap, FeatureMap> CrossReferenceBlock::backward(const Trace& t, const FeatureMap& grad_support,
                                                                const FeatureMap& grad_query) {
    if (options_.bypass) return {grad_support, grad_query};
    const FeatureMap& fs = t.support;
    const FeatureMap& fq = t.query;
    if (!grad_support.same_shape(fs) || !grad_query.same_shape(fq))
        throw ValidationError("cross-reference block: gradient shape mismatch");
    const std::size_t n = fs.plane();

    FeatureMap d_support(fs.channels, fs.height, fs.width, fs.stride);
    FeatureMap d_query(fq.channels, fq.height, fq.width, fq.stride);
    std::vector<double> d_gate(channels_, 0.0);
    for (std::size_t c = 0; c < channels_; ++c) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t k = c * n + i;
            d_support.data[k] = grad_support.data[k] * t.gate.w[c];
            d_query.data[k] = grad_query.data[k] * t.gate.w[c];
            acc += grad_support.data[k] * fs.data[k] + grad_query.data[k] * fq.data[k];
        }
        d_gate[c] = acc;
    }
    std::vector<double> d_ws(channels_), d_wq(channels_);
    for (std::size_t c = 0; c < channels_; ++c) {
        d_ws[c] = d_gate[c] * t.gate_query.w[c];
        d_wq[c] = d_gate[c] * t.gate_support.w[c];
    }
    const std::vector<double> d_pooled_s = gate_s_.backward(t.gate_support_cache, d_ws);
    const std::vector<double> d_pooled_q = query_gate().backward(t.gate_query_cache, d_wq);

    FeatureMap d_support_in(fs.channels, fs.height, fs.width, fs.stride);
    if (options_.attention) {
        const double inv_n = 1.0 / static_cast<double>(n);
        Matrix d_o1(n, channels_), d_o2(n, channels_);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < channels_; ++c) {
                d_o1(i, c) = d_pooled_s[c] * inv_n;
                d_o2(i, c) = d_pooled_q[c] * inv_n;
            }
        auto [ds_1, dq_1] = backprop_direction(s2q_, t.support_tokens, t.query_tokens, config_.heads, t.s2q, d_o1);
        auto [dq_2, ds_2] =
            backprop_direction(query_to_support(), t.query_tokens, t.support_tokens, config_.heads, t.q2s, d_o2);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < channels_; ++c) {
                d_support_in.data[c * n + i] = ds_1(i, c) + ds_2(i, c);
                d_query.data[c * n + i] += dq_1(i, c) + dq_2(i, c);
            }
    } else {
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t c = 0; c < channels_; ++c)
            for (std::size_t i = 0; i < n; ++i) {
                d_support_in.data[c * n + i] = d_pooled_s[c] * inv_n;
                d_query.data[c * n + i] += d_pooled_q[c] * inv_n;
            }
    }

    for (std::size_t c = 0; c < channels_; ++c)
        for (std::size_t i = 0; i < n; ++i) {
            const bool keep = !options_.mask_support || t.mask_ds.data[i] != 0;
            if (keep) d_support.data[c * n + i] += d_support_in.data[c * n + i];
        }
    return {std::move(d_support), std::move(d_query)};
}

ParameterList CrossReferenceBlock::parameters() {
    ParameterList out;
    s2q_.collect(out);
    if (!config_.tie_directions) q2s_.collect(out);
    gate_s_.collect(out);
    if (!config_.tie_directions) gate_q_.collect(out);
    return out;
}

ParameterList CrossReferenceBlock::active_parameters() {
    ParameterList out;
    if (options_.bypass) return out;
    if (options_.attention) {
        s2q_.collect(out);
        if (!config_.tie_directions) q2s_.collect(out);
    }
    gate_s_.collect(out);
    if (!config_.tie_directions) gate_q_.collect(out);
    return out;
}

}  // namespace crtseg
