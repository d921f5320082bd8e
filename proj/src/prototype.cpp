#include "crtseg/prototype.hpp"

#include "crtseg/errors.hpp"
#include "crtseg/kernels.hpp"

#include <algorithm>
#include <cmath>

namespace crtseg {

using kernels::Trans;

void ALPConfig::validate() const {
    if (window_h == 0 || window_w == 0) throw ValidationError("ALP window must be positive");
    if (!(fg_threshold > 0.0 && fg_threshold <= 1.0))
        throw ValidationError("ALP threshold must lie in (0, 1]");
    if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ValidationError("alpha must be positive");
}

std::size_t PrototypeSet::count(std::int32_t class_id) const {
    return static_cast<std::size_t>(std::count_if(prototypes.begin(), prototypes.end(),
                                                  [&](const Prototype& p) { return p.class_id == class_id; }));
}

namespace {

void check_mask_grid(const FeatureMap& f, const MaskMap& m) {
    if (m.height != f.height || m.width != f.width)
        throw ValidationError("mask " + std::to_string(m.height) + "x" + std::to_string(m.width) +
                              " does not match feature grid " + std::to_string(f.height) + "x" +
                              std::to_string(f.width));
}

void pool(const FeatureMap& f, Prototype& p) {
    p.vector.assign(f.channels, 0.0);
    const std::size_t n = f.plane();
    for (std::size_t c = 0; c < f.channels; ++c) {
        double s = 0.0;
        for (std::size_t pos : p.positions) s += f.data[c * n + pos];
        p.vector[c] = s * p.weight;
    }
}

MaskMap complement(const MaskMap& m) {
    MaskMap out(m.height, m.width);
    for (std::size_t i = 0; i < m.size(); ++i) out.data[i] = m.data[i] == 0 ? 1 : 0;
    return out;
}

}  // namespace

std::vector<Prototype> local_prototypes(const FeatureMap& features, const MaskMap& mask_ds,
                                        const ALPConfig& cfg, std::int32_t class_id) {
    cfg.validate();
    check_mask_grid(features, mask_ds);
    if (cfg.window_h > features.height || cfg.window_w > features.width)
        throw ValidationError("ALP window " + std::to_string(cfg.window_h) + "x" + std::to_string(cfg.window_w) +
                              " exceeds feature grid " + std::to_string(features.height) + "x" +
                              std::to_string(features.width));
    const std::size_t area = cfg.window_h * cfg.window_w;
    std::vector<Prototype> out;
    for (std::size_t m = 0; m < features.height / cfg.window_h; ++m)
        for (std::size_t n = 0; n < features.width / cfg.window_w; ++n) {
            Prototype p;
            p.class_id = class_id;
            p.kind = PrototypeKind::local;
            p.origin_m = m;
            p.origin_n = n;
            std::size_t on = 0;
            for (std::size_t r = m * cfg.window_h; r < (m + 1) * cfg.window_h; ++r)
                for (std::size_t c = n * cfg.window_w; c < (n + 1) * cfg.window_w; ++c) {
                    p.positions.push_back(r * features.width + c);
                    on += mask_ds.at(r, c) != 0;
                }
            if (static_cast<double>(on) < cfg.fg_threshold * static_cast<double>(area)) continue;
            p.weight = 1.0 / static_cast<double>(area);
            pool(features, p);
            out.push_back(std::move(p));
        }
    return out;
}

Prototype class_prototype(const FeatureMap& features, const MaskMap& mask_ds, std::int32_t class_id) {
    check_mask_grid(features, mask_ds);
    Prototype p;
    p.class_id = class_id;
    p.kind = PrototypeKind::global;
    for (std::size_t i = 0; i < mask_ds.size(); ++i)
        if (mask_ds.data[i] != 0) p.positions.push_back(i);
    if (p.positions.empty()) throw EmptyClassMask(class_id);
    p.weight = 1.0 / static_cast<double>(p.positions.size());
    pool(features, p);
    return p;
}

PrototypeSet assemble_prototype_set(const FeatureMap& features, const MaskMap& mask_ds, const ALPConfig& cfg) {
    if (!mask_ds.is_binary()) throw ValidationError("prototype mask must be binary");
    const MaskMap bg = complement(mask_ds);
    // A grid smaller than one window holds no whole window, so only class prototypes remain.
    const bool windows_fit = cfg.window_h <= features.height && cfg.window_w <= features.width;
    PrototypeSet set;
    for (std::int32_t cls : set.classes) {
        const MaskMap& m = cls == 0 ? bg : mask_ds;
        set.prototypes.push_back(class_prototype(features, m, cls));
        if (!windows_fit) continue;
        for (Prototype& p : local_prototypes(features, m, cfg, cls)) set.prototypes.push_back(std::move(p));
    }
    return set;
}

ScoreMaps similarity_maps(const PrototypeSet& set, const FeatureMap& query, double alpha) {
    const std::size_t P = set.size(), D = query.channels, N = query.plane();
    if (P == 0) throw ValidationError("similarity_maps: empty prototype set");
    for (std::int32_t cls : set.classes)
        if (set.count(cls) == 0) throw ValidationError("similarity_maps: class " + std::to_string(cls) + " has no prototype");

    Matrix protos(P, D);
    ScoreMaps s;
    s.height = query.height;
    s.width = query.width;
    s.prototype_norms.resize(P);
    for (std::size_t l = 0; l < P; ++l) {
        const Prototype& p = set.prototypes[l];
        if (p.vector.size() != D) throw ValidationError("similarity_maps: prototype width differs from feature depth");
        if (p.class_id < 0 || static_cast<std::size_t>(p.class_id) >= set.classes.size())
            throw ValidationError("similarity_maps: undeclared prototype class");
        std::copy(p.vector.begin(), p.vector.end(), protos.row(l).begin());
        s.prototype_class.push_back(p.class_id);
        double sq = 0.0;
        for (double v : p.vector) sq += v * v;
        s.prototype_norms[l] = std::sqrt(sq);
    }
    s.feature_norms.assign(N, 0.0);
    for (std::size_t c = 0; c < D; ++c)
        for (std::size_t n = 0; n < N; ++n) s.feature_norms[n] += query.data[c * N + n] * query.data[c * N + n];
    for (double& v : s.feature_norms) v = std::sqrt(v);

    s.scores = Matrix(P, N);
    kernels::gemm(Trans::no, Trans::no, P, N, D, protos.data.data(), D, query.data.data(), N, 0.0,
                  s.scores.data.data(), N);
    for (std::size_t l = 0; l < P; ++l) {
        const double np = std::max(s.prototype_norms[l], kCosineEps);
        for (std::size_t n = 0; n < N; ++n) {
            const double nf = std::max(s.feature_norms[n], kCosineEps);
            const double cosine = std::clamp(s.scores(l, n) / (np * nf), -1.0, 1.0);
            s.scores(l, n) = alpha * cosine;
        }
    }

    const std::size_t C = set.classes.size();
    s.fused = Matrix(C, N);
    s.fusion_weights = Matrix(P, N);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t j = 0; j < C; ++j) {
            double mx = -INFINITY;
            for (std::size_t l = 0; l < P; ++l)
                if (s.prototype_class[l] == static_cast<std::int32_t>(j)) mx = std::max(mx, s.scores(l, n));
            double sum = 0.0;
            for (std::size_t l = 0; l < P; ++l)
                if (s.prototype_class[l] == static_cast<std::int32_t>(j)) {
                    s.fusion_weights(l, n) = std::exp(s.scores(l, n) - mx);
                    sum += s.fusion_weights(l, n);
                }
            double fused = 0.0;
            for (std::size_t l = 0; l < P; ++l)
                if (s.prototype_class[l] == static_cast<std::int32_t>(j)) {
                    s.fusion_weights(l, n) /= sum;
                    fused += s.fusion_weights(l, n) * s.scores(l, n);
                }
            s.fused(j, n) = fused;
        }
    return s;
}

Resampler::Resampler(std::size_t ih, std::size_t iw, std::size_t oh, std::size_t ow)
    : in_h(ih), in_w(iw), out_h(oh), out_w(ow) {
    if (ih == 0 || iw == 0 || oh == 0 || ow == 0) throw ValidationError("Resampler: empty extent");
    auto build = [](std::size_t in, std::size_t out) {
        std::vector<Tap> taps(out);
        const double scale = static_cast<double>(in) / static_cast<double>(out);
        for (std::size_t o = 0; o < out; ++o) {
            const double src = std::max(0.0, (static_cast<double>(o) + 0.5) * scale - 0.5);
            const std::size_t i0 = std::min(static_cast<std::size_t>(src), in - 1);
            const std::size_t i1 = std::min(i0 + 1, in - 1);
            const double f = src - static_cast<double>(i0);
            taps[o] = {i0, i1, 1.0 - f, f};
        }
        return taps;
    };
    rows = build(ih, oh);
    cols = build(iw, ow);
}

Matrix Resampler::forward(const Matrix& in) const {
    if (in.cols != in_h * in_w) throw ValidationError("Resampler: input plane size mismatch");
    Matrix out(in.rows, out_h * out_w);
    for (std::size_t k = 0; k < in.rows; ++k) {
        const auto src = in.row(k);
        auto dst = out.row(k);
        for (std::size_t y = 0; y < out_h; ++y) {
            const Tap& ty = rows[y];
            for (std::size_t x = 0; x < out_w; ++x) {
                const Tap& tx = cols[x];
                dst[y * out_w + x] = ty.w0 * (tx.w0 * src[ty.i0 * in_w + tx.i0] + tx.w1 * src[ty.i0 * in_w + tx.i1]) +
                                     ty.w1 * (tx.w0 * src[ty.i1 * in_w + tx.i0] + tx.w1 * src[ty.i1 * in_w + tx.i1]);
            }
        }
    }
    return out;
}

Matrix Resampler::backward(const Matrix& grad_out) const {
    if (grad_out.cols != out_h * out_w) throw ValidationError("Resampler: gradient plane size mismatch");
    Matrix g(grad_out.rows, in_h * in_w);
    for (std::size_t k = 0; k < grad_out.rows; ++k) {
        const auto src = grad_out.row(k);
        auto dst = g.row(k);
        for (std::size_t y = 0; y < out_h; ++y) {
            const Tap& ty = rows[y];
            for (std::size_t x = 0; x < out_w; ++x) {
                const Tap& tx = cols[x];
                const double v = src[y * out_w + x];
                dst[ty.i0 * in_w + tx.i0] += ty.w0 * tx.w0 * v;
                dst[ty.i0 * in_w + tx.i1] += ty.w0 * tx.w1 * v;
                dst[ty.i1 * in_w + tx.i0] += ty.w1 * tx.w0 * v;
                dst[ty.i1 * in_w + tx.i1] += ty.w1 * tx.w1 * v;
            }
        }
    }
    return g;
}

namespace {

MaskMap argmax_labels(const Matrix& probs, std::size_t h, std::size_t w) {
    MaskMap out(h, w);
    for (std::size_t n = 0; n < probs.cols; ++n) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < probs.rows; ++j)
            if (probs(j, n) > probs(best, n)) best = j;
        out.data[n] = static_cast<std::int32_t>(best);
    }
    return out;
}

}  // namespace

Prediction predict(const ScoreMaps& scores, std::size_t out_h, std::size_t out_w) {
    const std::size_t C = scores.fused.rows, N = scores.fused.cols;
    Prediction p;
    p.height = scores.height;
    p.width = scores.width;
    p.probs = Matrix(C, N);
    for (std::size_t n = 0; n < N; ++n) {
        double mx = -INFINITY;
        for (std::size_t j = 0; j < C; ++j) mx = std::max(mx, scores.fused(j, n));
        double sum = 0.0;
        for (std::size_t j = 0; j < C; ++j) {
            p.probs(j, n) = std::exp(scores.fused(j, n) - mx);
            sum += p.probs(j, n);
        }
        for (std::size_t j = 0; j < C; ++j) p.probs(j, n) /= sum;
    }
    p.labels = argmax_labels(p.probs, p.height, p.width);
    p.out_height = out_h;
    p.out_width = out_w;
    p.probs_full = Resampler(p.height, p.width, out_h, out_w).forward(p.probs);
    p.labels_full = argmax_labels(p.probs_full, out_h, out_w);
    return p;
}

Prediction classify(const FeatureMap& support, const MaskMap& support_mask_ds, const FeatureMap& query,
                    const ALPConfig& cfg, std::size_t out_h, std::size_t out_w, HeadTrace* trace) {
    if (!support.same_shape(query)) throw ValidationError("classify: support/query feature shapes differ");
    PrototypeSet set = assemble_prototype_set(support, support_mask_ds, cfg);
    ScoreMaps scores = similarity_maps(set, query, cfg.alpha);
    Prediction pred = predict(scores, out_h, out_w);
    if (trace) {
        trace->prototypes = std::move(set);
        trace->scores = std::move(scores);
        trace->prediction = pred;
    }
    return pred;
}

HeadGrads classify_backward(const HeadTrace& t, const FeatureMap& support, const FeatureMap& query,
                            const Matrix& grad_probs_full, double alpha) {
    const Prediction& pred = t.prediction;
    const ScoreMaps& s = t.scores;
    const std::size_t C = pred.probs.rows, N = pred.probs.cols, P = s.scores.rows, D = query.channels;

    const Matrix d_probs =
        Resampler(pred.height, pred.width, pred.out_height, pred.out_width).backward(grad_probs_full);

    Matrix d_fused(C, N);
    for (std::size_t n = 0; n < N; ++n) {
        double inner = 0.0;
        for (std::size_t j = 0; j < C; ++j) inner += d_probs(j, n) * pred.probs(j, n);
        for (std::size_t j = 0; j < C; ++j) d_fused(j, n) = pred.probs(j, n) * (d_probs(j, n) - inner);
    }

    // dS, then through the cosine: S = alpha * dot / (|p| |f|) with guarded norms.
    Matrix d_dots(P, N);
    std::vector<double> d_norm_p(P, 0.0), d_norm_f(N, 0.0);
    for (std::size_t l = 0; l < P; ++l) {
        const std::size_t j = static_cast<std::size_t>(s.prototype_class[l]);
        const double np = std::max(s.prototype_norms[l], kCosineEps);
        for (std::size_t n = 0; n < N; ++n) {
            const double score = s.scores(l, n);
            const double ds = d_fused(j, n) * s.fusion_weights(l, n) * (1.0 + score - s.fused(j, n));
            const double nf = std::max(s.feature_norms[n], kCosineEps);
            d_dots(l, n) = ds * alpha / (np * nf);
            d_norm_p[l] -= ds * score / np;
            d_norm_f[n] -= ds * score / nf;
        }
    }

    Matrix protos(P, D);
    for (std::size_t l = 0; l < P; ++l)
        std::copy(t.prototypes.prototypes[l].vector.begin(), t.prototypes.prototypes[l].vector.end(),
                  protos.row(l).begin());

    HeadGrads g{FeatureMap(support.channels, support.height, support.width, support.stride),
                FeatureMap(query.channels, query.height, query.width, query.stride)};
    kernels::gemm(Trans::yes, Trans::no, D, N, P, protos.data.data(), D, d_dots.data.data(), N, 0.0,
                  g.query.data.data(), N);
    for (std::size_t n = 0; n < N; ++n) {
        if (!(s.feature_norms[n] > kCosineEps)) continue;
        const double k = d_norm_f[n] / s.feature_norms[n];
        for (std::size_t c = 0; c < D; ++c) g.query.data[c * N + n] += k * query.data[c * N + n];
    }

    Matrix d_protos(P, D);
    kernels::gemm(Trans::no, Trans::yes, P, D, N, d_dots.data.data(), N, query.data.data(), N, 0.0,
                  d_protos.data.data(), D);
    for (std::size_t l = 0; l < P; ++l) {
        const Prototype& p = t.prototypes.prototypes[l];
        if (s.prototype_norms[l] > kCosineEps) {
            const double k = d_norm_p[l] / s.prototype_norms[l];
            for (std::size_t c = 0; c < D; ++c) d_protos(l, c) += k * p.vector[c];
        }
        for (std::size_t c = 0; c < D; ++c) {
            const double v = d_protos(l, c) * p.weight;
            for (std::size_t pos : p.positions) g.support.data[c * N + pos] += v;
        }
    }
    return g;
}

}  // namespace crtseg
