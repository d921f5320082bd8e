#include "crtseg/trainer.hpp"

#include "crtseg/config.hpp"
#include "crtseg/errors.hpp"
#include "crtseg/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <thread>

namespace crtseg {

using nlohmann::json;

namespace {

constexpr std::uint64_t kStreamTag = 0x57EA;
constexpr std::size_t kSliceAttempts = 8;

void add_into(FeatureMap& dst, const FeatureMap& src) {
    for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
}

void fnv(std::uint64_t& h, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        h ^= (v >> (8 * i)) & 0xFF;
        h *= 0x100000001b3ULL;
    }
}

std::string class_name(const SliceDataset& d, std::int32_t c) {
    if (c >= 0 && static_cast<std::size_t>(c) < d.class_names.size()) return d.class_names[c];
    return "class_" + std::to_string(c);
}

}  // namespace

BlockOptions block_options(const AblationFlags& flags) {
    BlockOptions o;
    o.mask_support = flags.use_support_mask;
    o.attention = flags.use_cross_reference;
    o.bypass = false;
    return o;
}

void TrainConfig::validate() const {
    if (iterations == 0) throw ValidationError("iterations must be at least 1");
    if (batch_size != 1) throw ValidationError("only batch_size 1 is supported (1-way 1-shot)");
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ValidationError("lambda must be a non-negative number");
    if (log_every == 0) throw ValidationError("log_every must be positive");
    schedule.validate();
    adam.validate();
    encoder.validate();
    alp.validate();
    attention.validate();
    superpixel.validate();
    transforms.validate();
}

Model::Model(const EncoderConfig& enc, const AttentionConfig& attention, const BlockOptions& options,
             const ALPConfig& alp_config)
    : encoder(enc), block(enc.channels, attention, options), alp(alp_config) {
    alp.validate();
}

Model::Model(const TrainConfig& c) : Model(c.encoder, c.attention, block_options(c.flags), c.alp) {}

ParameterList Model::parameters() {
    ParameterList out = encoder.parameters();
    for (Parameter* p : block.parameters()) out.push_back(p);
    return out;
}

ParameterList Model::active_parameters() {
    ParameterList out = encoder.parameters();
    for (Parameter* p : block.active_parameters()) out.push_back(p);
    return out;
}

void Model::save(Container& out) const {
    Model& self = const_cast<Model&>(*this);
    const EncoderConfig& e = encoder.config();
    out.header["encoder"] = {{"architecture", e.architecture}, {"channels", e.channels}, {"stride", e.stride}, {"seed", e.seed}};
    for (Parameter* p : self.parameters()) out.tensors.push_back({p->name, p->shape, p->value});
}

void Model::load(const Container& in) {
    for (Parameter* p : parameters()) {
        const TensorBlob* t = in.find(p->name);
        if (!t) throw LoadError("checkpoint has no tensor '" + p->name + "'");
        if (t->shape != p->shape) throw LoadError("checkpoint tensor '" + p->name + "' has the wrong shape");
        p->value = t->data;
    }
}

EpisodeResult forward_episode(Model& model, const Episode& ep, double lambda, bool accumulate) {
    EpisodeResult r;
    const std::size_t stride = model.encoder.config().stride;
    const MaskMap support_ds = downsample_mask(ep.support_mask, stride);
    if (support_ds.count(1) == 0) {
        r.skipped = SkippedEpisode{"support foreground vanishes at feature stride"};
        return r;
    }
    if (support_ds.count(0) == 0) {
        r.skipped = SkippedEpisode{"support background vanishes at feature stride"};
        return r;
    }

    Encoder::Trace ts, tq;
    const FeatureMap fs = model.encoder.forward(ep.support_image, Mode::train, accumulate ? &ts : nullptr);
    const FeatureMap fq = model.encoder.forward(ep.query_image, Mode::train, accumulate ? &tq : nullptr);

    CrossReferenceBlock::Trace bt1;
    const auto o1 = model.block.forward(fs, fq, ep.support_mask, accumulate ? &bt1 : nullptr);
    HeadTrace ht1;
    r.query_prediction = classify(o1.support, support_ds, o1.query, model.alp, ep.query_image.height,
                                  ep.query_image.width, &ht1);
    const double seg = seg_loss(r.query_prediction.probs_full, ep.query_mask);

    // Alignment: the predicted query mask annotates the query, which now
    // plays the support role, and the original support is re-segmented.
    const MaskMap& predicted = r.query_prediction.labels_full;
    const MaskMap predicted_ds = downsample_mask(predicted, stride);
    double reg = 0.0;
    CrossReferenceBlock::Trace bt2;
    HeadTrace ht2;
    CrossReferenceBlock::Output o2;
    Prediction p2;
    if (predicted_ds.count(1) > 0 && predicted_ds.count(0) > 0) {
        r.alignment_applied = true;
        o2 = model.block.forward(fq, fs, predicted, accumulate ? &bt2 : nullptr);
        p2 = classify(o2.support, predicted_ds, o2.query, model.alp, ep.support_image.height,
                      ep.support_image.width, &ht2);
        reg = alignment_loss(p2.probs_full, ep.support_mask);
    }
    r.loss = total_loss(seg, reg, lambda);
    if (!accumulate) return r;

    const Matrix g1 = seg_loss_grad(r.query_prediction.probs_full, ep.query_mask);
    const HeadGrads h1 = classify_backward(ht1, o1.support, o1.query, g1, model.alp.alpha);
    auto [d_fs, d_fq] = model.block.backward(bt1, h1.support, h1.query);
    if (r.alignment_applied && lambda != 0.0) {
        Matrix g2 = seg_loss_grad(p2.probs_full, ep.support_mask);
        for (double& v : g2.data) v *= lambda;
        const HeadGrads h2 = classify_backward(ht2, o2.support, o2.query, g2, model.alp.alpha);
        auto [d_fq2, d_fs2] = model.block.backward(bt2, h2.support, h2.query);
        add_into(d_fs, d_fs2);
        add_into(d_fq, d_fq2);
    }
    model.encoder.backward(ts, d_fs);
    model.encoder.backward(tq, d_fq);
    return r;
}

MaskMap predict_query(const Model& model, const Episode& ep) {
    const std::size_t stride = model.encoder.config().stride;
    const MaskMap support_ds = downsample_mask(ep.support_mask, stride);
    if (support_ds.count(1) == 0 || support_ds.count(0) == 0)
        return MaskMap(ep.query_image.height, ep.query_image.width, 0);
    const FeatureMap fs = model.encoder.forward(ep.support_image, Mode::eval);
    const FeatureMap fq = model.encoder.forward(ep.query_image, Mode::eval);
    const auto o = model.block.forward(fs, fq, ep.support_mask);
    return classify(o.support, support_ds, o.query, model.alp, ep.query_image.height, ep.query_image.width)
        .labels_full;
}

json to_json(const LogRecord& r) {
    json j = {{"iteration", r.iteration}, {"lr", r.lr}, {"episode_seed", r.episode_seed}};
    if (r.loss) {
        j["seg"] = r.loss->seg;
        j["reg"] = r.loss->reg;
        j["total"] = r.loss->total;
    } else {
        j["seg"] = nullptr;
        j["reg"] = nullptr;
        j["total"] = nullptr;
        j["skipped"] = r.skipped;
    }
    return j;
}

Trainer::Trainer(const TrainConfig& config, const SliceDataset& dataset)
    : config_(config), dataset_(dataset), model_(config), adam_(config.adam) {
    config_.validate();
    if (dataset_.empty()) throw ValidationError("training dataset is empty");
    dataset_.validate();
    superpixels_.resize(dataset_.size());
    auto work = [&](std::size_t begin, std::size_t step) {
        for (std::size_t i = begin; i < dataset_.size(); i += step)
            superpixels_[i] = felzenszwalb_segment(dataset_.slices[i].image, config_.superpixel);
    };
    if (config_.workers > 0) {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < config_.workers; ++w) pool.emplace_back(work, w, config_.workers);
        for (auto& t : pool) t.join();
    } else {
        work(0, 1);
    }
}

StreamEntry Trainer::episode_at(std::size_t iteration) const {
    StreamEntry e;
    const std::uint64_t base = derive_seed(derive_seed(config_.seed, kStreamTag), iteration);
    for (std::size_t attempt = 0; attempt < kSliceAttempts; ++attempt) {
        const std::uint64_t seed = derive_seed(base, attempt);
        Rng rng(derive_seed(seed, 3));
        e.slice = static_cast<std::size_t>(rng.below(dataset_.size()));
        e.episode_seed = seed;
        try {
            Episode ep = build_episode(dataset_.slices[e.slice].image, *superpixels_[e.slice], config_.superpixel,
                                       config_.transforms, seed);
            ep.support_id = ep.query_id = dataset_.slices[e.slice].id;
            e.episode = std::move(ep);
            e.skip_reason.clear();
            return e;
        } catch (const NoEligibleSegment&) {
            e.skip_reason = "no eligible superpixel after " + std::to_string(attempt + 1) + " slice draws";
        }
    }
    return e;
}

LogRecord Trainer::step() {
    LogRecord rec;
    rec.iteration = iteration_;
    rec.lr = learning_rate(iteration_, config_.schedule);
    const StreamEntry entry = episode_at(iteration_);
    rec.episode_seed = entry.episode_seed;
    fnv(fingerprint_, iteration_);
    fnv(fingerprint_, entry.slice);
    fnv(fingerprint_, entry.episode_seed);

    if (!entry.episode) {
        rec.skipped = entry.skip_reason;
    } else {
        const ParameterList params = model_.parameters();
        zero_grads(params);
        const EpisodeResult r = forward_episode(model_, *entry.episode, config_.lambda, true);
        if (r.skipped) {
            rec.skipped = r.skipped->reason;
        } else {
            if (!std::isfinite(r.loss.total))
                throw NumericalError("non-finite loss at iteration " + std::to_string(iteration_) + " (episode seed " +
                                         std::to_string(entry.episode_seed) + ")",
                                     static_cast<long>(iteration_), entry.episode_seed);
            rec.loss = r.loss;
            adam_.step(params, rec.lr);
        }
    }
    fnv(fingerprint_, rec.skipped.empty() ? 0 : 1);
    if (!rec.skipped.empty()) ++skipped_;
    ++iteration_;
    return rec;
}

void Trainer::run(const std::function<void(const LogRecord&)>& sink) {
    while (iteration_ < config_.iterations) {
        const LogRecord rec = step();
        if (sink && (rec.iteration % config_.log_every == 0 || !rec.skipped.empty() ||
                     rec.iteration + 1 == config_.iterations))
            sink(rec);
    }
}

namespace {

// Everything that changes the model or the episode stream.
json resume_key(const TrainConfig& c) {
    json j = to_json(c);
    j.erase("iterations");
    j.erase("log_every");
    return j;
}

}  // namespace

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
    Container c;
    c.header["format"] = "crtseg-checkpoint";
    c.header["version"] = 1;
    c.header["iteration"] = iteration_;
    c.header["skipped"] = skipped_;
    c.header["stream_fingerprint"] = fingerprint_;
    c.header["config"] = to_json(config_);
    c.header["config_hash"] = config_hash(resume_key(config_));
    c.header["model_hash"] = model_hash(config_);
    c.header["rng"] = {{"episode_stream", "derived from (seed, iteration)"}, {"seed", config_.seed}};
    model_.save(c);
    adam_.save(c);
    write_container(path, c);
}

void Trainer::load_checkpoint(const std::filesystem::path& path) {
    const Container c = read_container(path);
    if (c.header.value("format", "") != "crtseg-checkpoint") throw LoadError(path.string() + " is not a training checkpoint");
    const std::string want = config_hash(resume_key(config_));
    const std::string have = c.header.value("config_hash", "");
    if (want != have)
        throw LoadError("checkpoint " + path.string() + " was written with config " + have +
                        ", current config is " + want);
    model_.load(c);
    adam_.load(c);
    iteration_ = c.header.at("iteration").get<std::size_t>();
    skipped_ = c.header.at("skipped").get<std::size_t>();
    fingerprint_ = c.header.at("stream_fingerprint").get<std::uint64_t>();
}

// ---- evaluation -------------------------------------------------------------

void EvalOptions::validate() const {
    if (protocol != "cross_slice" && protocol != "transformed")
        throw ValidationError("eval protocol must be \"cross_slice\" or \"transformed\"");
    if (folds == 0) throw ValidationError("folds must be at least 1");
    if (fold >= folds) throw ValidationError("fold must be below folds");
    transforms.validate();
}

std::vector<EvalEpisodeSpec> plan_evaluation(const SliceDataset& dataset, const EvalOptions& o) {
    o.validate();
    std::vector<std::int32_t> classes = o.classes;
    if (classes.empty())
        for (std::size_t c = 1; c < std::max<std::size_t>(dataset.class_names.size(), 1); ++c)
            classes.push_back(static_cast<std::int32_t>(c));
    std::erase_if(classes, [&](std::int32_t c) { return std::find(o.exclude.begin(), o.exclude.end(), c) != o.exclude.end(); });

    auto has = [&](std::size_t i, std::int32_t c) {
        return dataset.slices[i].mask && dataset.slices[i].mask->count(c) > 0;
    };
    auto in_test = [&](std::size_t i) { return o.folds == 1 || i % o.folds == o.fold; };

    std::vector<std::vector<EvalEpisodeSpec>> per_class;
    for (std::int32_t c : classes) {
        std::vector<EvalEpisodeSpec> eps;
        for (std::size_t q = 0; q < dataset.size(); ++q) {
            if (!in_test(q) || !has(q, c)) continue;
            EvalEpisodeSpec s;
            s.query = q;
            s.class_id = c;
            s.seed = derive_seed(derive_seed(o.seed, static_cast<std::uint64_t>(c)), q);
            if (o.protocol == "transformed") {
                s.support = q;
            } else {
                std::vector<std::size_t> pool;
                for (std::size_t i = 0; i < dataset.size(); ++i)
                    if (i != q && has(i, c) && (o.folds == 1 || !in_test(i))) pool.push_back(i);
                if (pool.empty()) continue;
                s.support = pool[Rng(s.seed).below(pool.size())];
            }
            eps.push_back(s);
        }
        per_class.push_back(std::move(eps));
    }
    // Round-robin across classes so a cap keeps every class represented.
    std::vector<EvalEpisodeSpec> out;
    for (std::size_t k = 0;; ++k) {
        bool any = false;
        for (const auto& eps : per_class)
            if (k < eps.size()) {
                any = true;
                out.push_back(eps[k]);
            }
        if (!any) break;
    }
    if (o.max_episodes > 0 && out.size() > o.max_episodes) out.resize(o.max_episodes);
    return out;
}

Episode materialize(const SliceDataset& dataset, const EvalEpisodeSpec& s, const EvalOptions& o) {
    const Slice& sup = dataset.slices.at(s.support);
    const Slice& qry = dataset.slices.at(s.query);
    if (!sup.mask || !qry.mask) throw ValidationError("evaluation needs labeled slices");
    if (o.protocol == "transformed") {
        Episode ep;
        ep.class_id = s.class_id;
        ep.episode_seed = s.seed;
        ep.support_image = sup.image;
        ep.support_mask = binarize(*sup.mask, s.class_id);
        ep.params = sample_transform(o.transforms, sup.image.height, sup.image.width, transform_seed(s.seed));
        ep.query_image = apply_gamma(apply_affine(sup.image, ep.params, Interp::bilinear), ep.params.gamma);
        ep.query_mask = apply_affine(ep.support_mask, ep.params, Interp::nearest);
        ep.support_id = ep.query_id = sup.id;
        return ep;
    }
    Episode ep = build_eval_episode(sup.image, *sup.mask, qry.image, *qry.mask, s.class_id);
    ep.episode_seed = s.seed;
    ep.support_id = sup.id;
    ep.query_id = qry.id;
    return ep;
}

DiceReport evaluate(const Model& model, const SliceDataset& dataset, const EvalOptions& o) {
    dataset.validate();
    std::vector<std::int32_t> classes = o.classes;
    if (classes.empty())
        for (std::size_t c = 1; c < dataset.class_names.size(); ++c) classes.push_back(static_cast<std::int32_t>(c));

    DiceReport report;
    std::map<std::int32_t, std::pair<double, std::size_t>> acc;
    for (const EvalEpisodeSpec& s : plan_evaluation(dataset, o)) {
        const Episode ep = materialize(dataset, s, o);
        const double d = dice(predict_query(model, ep), ep.query_mask);
        acc[s.class_id].first += d;
        acc[s.class_id].second += 1;
        ++report.evaluated;
    }
    double sum = 0.0;
    std::size_t n = 0;
    for (std::int32_t c : classes) {
        const std::string name = class_name(dataset, c);
        const auto it = acc.find(c);
        if (it == acc.end()) {
            report.per_class[name] = std::nullopt;
            report.episodes[name] = 0;
            continue;
        }
        const double mean = it->second.first / static_cast<double>(it->second.second);
        report.per_class[name] = mean;
        report.episodes[name] = it->second.second;
        sum += mean;
        ++n;
    }
    report.mean = n ? sum / static_cast<double>(n) : 0.0;
    return report;
}

// ---- ablation ---------------------------------------------------------------

std::string AblationReport::to_tsv() const {
    std::ostringstream out;
    out << "setting";
    for (const auto& c : class_names) out << '\t' << c;
    out << "\tMean\n";
    char buf[32];
    for (const auto& r : rows) {
        out << r.name;
        for (const auto& c : class_names) {
            const auto it = r.dice.per_class.find(c);
            if (it == r.dice.per_class.end() || !it->second) {
                out << "\tnot-evaluated";
            } else {
                std::snprintf(buf, sizeof buf, "%.2f", 100.0 * *it->second);
                out << '\t' << buf;
            }
        }
        std::snprintf(buf, sizeof buf, "%.2f", 100.0 * r.dice.mean);
        out << '\t' << buf << '\n';
    }
    return out.str();
}

json AblationReport::to_json() const {
    json rows_j = json::array();
    for (const auto& r : rows) {
        json d;
        crtseg::to_json(d, r.dice);
        rows_j.push_back({{"name", r.name},
                          {"use_support_mask", r.flags.use_support_mask},
                          {"use_cross_reference", r.flags.use_cross_reference},
                          {"dice", d},
                          {"stream_fingerprint", r.stream_fingerprint},
                          {"skipped_episodes", r.skipped}});
    }
    return {{"rows", rows_j},
            {"classes", class_names},
            {"identical_streams", identical_streams},
            {"delta_full_minus_base", delta},
            {"direction", direction}};
}

AblationReport run_ablation(const TrainConfig& config, const SliceDataset& train_set, const SliceDataset& eval_set,
                            const EvalOptions& options) {
    const std::vector<std::pair<std::string, AblationFlags>> settings{
        {"Base", {false, false}},
        {"Base+Support Mask", {true, false}},
        {"Base+Mask+Transformer", {true, true}},
    };
    AblationReport report;
    std::vector<std::int32_t> classes = options.classes;
    if (classes.empty())
        for (std::size_t c = 1; c < eval_set.class_names.size(); ++c) classes.push_back(static_cast<std::int32_t>(c));
    for (std::int32_t c : classes)
        if (std::find(options.exclude.begin(), options.exclude.end(), c) == options.exclude.end())
            report.class_names.push_back(class_name(eval_set, c));

    for (const auto& [name, flags] : settings) {
        TrainConfig c = config;
        c.flags = flags;
        Trainer trainer(c, train_set);
        trainer.run();
        AblationRow row;
        row.name = name;
        row.flags = flags;
        row.dice = evaluate(trainer.model(), eval_set, options);
        row.stream_fingerprint = trainer.stream_fingerprint();
        row.skipped = trainer.skipped();
        report.rows.push_back(std::move(row));
    }
    report.identical_streams = std::all_of(report.rows.begin(), report.rows.end(), [&](const AblationRow& r) {
        return r.stream_fingerprint == report.rows.front().stream_fingerprint;
    });
    report.delta = report.rows.back().dice.mean - report.rows.front().dice.mean;
    report.direction = report.delta >= 0.0 ? "full >= base" : "full < base";
    return report;
}

}  // namespace crtseg
