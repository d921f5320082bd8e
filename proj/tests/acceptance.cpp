// Acceptance gate: one PASS/FAIL line per criterion. Pass criterion numbers as
// arguments to run a subset; exit status is nonzero if any selected one fails.

#include "crtseg/config.hpp"
#include "crtseg/errors.hpp"
#include "crtseg/gradcheck.hpp"
#include "crtseg/superpixel.hpp"
#include "crtseg/trainer.hpp"

#include "oracles.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <set>
#include <sstream>
#include <string>

using namespace crtseg;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances and budgets.
constexpr std::size_t kOracleInstances = 20;
constexpr double kOracleTolerance = 1e-6;
constexpr double kOracleBudgetSeconds = 60.0;
constexpr std::size_t kGradcheckInstances = 10;
constexpr double kGradcheckEpsilon = 1e-3;
constexpr double kGradcheckTolerance = 1e-5;
constexpr double kGradcheckBudgetSeconds = 300.0;
constexpr double kNormTolerance = 1e-6;
constexpr double kAlpha = 20.0;
constexpr double kDiceTarget = 0.85;
constexpr std::size_t kHeldOutEpisodes = 50;
constexpr std::size_t kCompetenceIterations = 2000;
constexpr double kCompetenceBudgetSeconds = 1200.0;
constexpr std::size_t kAblationIterations = 40;
constexpr std::size_t kDeterminismIterations = 12;
constexpr std::size_t kFuzzEpisodes = 1000;

struct Verdict {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) return INFINITY;
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

RunConfig default_config() {
    return load_config(fs::path(CRTSEG_SOURCE_DIR) / "config" / "default.json");
}

// Reduced synthetic setting for the multi-run criteria.
RunConfig desk_config(std::size_t iterations) {
    RunConfig c = default_config();
    for (DataSpec* d : {&c.data, &c.eval_data}) {
        d->synthetic.count = 16;
        d->synthetic.height = d->synthetic.width = 64;
        d->synthetic.radius_min = 6;
        d->synthetic.radius_max = 12;
    }
    c.train.iterations = iterations;
    c.train.log_every = 1;
    c.train.superpixel.min_size = 30;
    c.train.superpixel.min_area = 30;
    c.eval.max_episodes = 20;
    return c;
}

// ---- 1 ----------------------------------------------------------------------

Verdict oracle_equivalence() {
    const auto t0 = Clock::now();
    std::map<std::string, double> worst;
    std::map<std::string, std::size_t> count;
    bool labels_agree = true;
    auto record = [&](const std::string& name, double diff) {
        worst[name] = std::max(worst[name], diff);
        ++count[name];
    };
    for (std::uint64_t seed = 1; seed <= kOracleInstances; ++seed) {
        Rng rng(derive_seed(0xACC1, seed));

        const std::size_t heads = 1 + rng.below(2), n = 1 + rng.below(12), m = 1 + rng.below(12), d = 8;
        const Matrix q = oracle::random_matrix(rng, n, d, 2.0), k = oracle::random_matrix(rng, m, d, 2.0),
                     v = oracle::random_matrix(rng, m, d);
        record("cross_attention", max_abs_diff(cross_attention(q, k, v, heads).data, oracle::attention(q, k, v, heads).data));

        const std::size_t channels = 4 + rng.below(13);
        FcGate gate("acc", channels, std::max<std::size_t>(1, channels / 4));
        for (Parameter* p : {&gate.fc1.weight, &gate.fc1.bias, &gate.fc2.weight, &gate.fc2.bias})
            for (double& x : p->value) x = 0.5 * rng.normal();
        std::vector<double> x(channels);
        for (double& e : x) e = rng.normal();
        record("fc_gate", max_abs_diff(fc_gate(x, gate).w, oracle::gate(gate.fc1.weight.value, gate.fc1.bias.value,
                                                                          gate.fc2.weight.value, gate.fc2.bias.value, x)));

        const std::size_t h = 2 + rng.below(7), w = 2 + rng.below(7);
        const FeatureMap f = oracle::random_features(rng, 6, h, w);
        record("global_pool", max_abs_diff(global_pool(f), oracle::pool(f)));

        ALPConfig alp;
        alp.window_h = 1 + rng.below(std::min<std::size_t>(3, h));
        alp.window_w = 1 + rng.below(std::min<std::size_t>(3, w));
        alp.fg_threshold = rng.uniform(0.3, 1.0);
        MaskMap dense(h, w);
        for (auto& e : dense.data) e = rng.uniform() < 0.7 ? 1 : 0;
        const auto got = local_prototypes(f, dense, alp);
        const auto want = oracle::locals(f, dense, alp.window_h, alp.window_w, alp.fg_threshold, 1);
        double ld = got.size() == want.size() ? 0.0 : INFINITY;
        for (std::size_t i = 0; i < std::min(got.size(), want.size()); ++i)
            ld = std::max(ld, max_abs_diff(got[i].vector, want[i]));
        record("local_prototypes", ld);

        const MaskMap mask = oracle::random_binary_mask(rng, h, w);
        record("class_prototype", max_abs_diff(class_prototype(f, mask, 1).vector, oracle::masked_mean(f, mask, 1)));

        const FeatureMap query = oracle::random_features(rng, 6, h, w);
        alp.fg_threshold = 0.5;
        std::vector<std::vector<oracle::Vec>> protos(2);
        for (std::int32_t cls : {0, 1}) {
            MaskMap cm = mask;
            if (cls == 0)
                for (auto& e : cm.data) e = 1 - e;
            protos[cls].push_back(oracle::masked_mean(f, cm, 1));
            for (auto& l : oracle::locals(f, cm, alp.window_h, alp.window_w, alp.fg_threshold, 1)) protos[cls].push_back(l);
        }
        const std::size_t oh = h * 8 - rng.below(8), ow = w * 8 - rng.below(8);
        const oracle::Head ref = oracle::head(protos, query, kAlpha, oh, ow);
        const Prediction p = predict(similarity_maps(assemble_prototype_set(f, mask, alp), query, kAlpha), oh, ow);
        record("predict", std::max(max_abs_diff(p.probs.data, ref.probs.data), max_abs_diff(p.probs_full.data, ref.probs_full.data)));
        labels_agree = labels_agree && p.labels == ref.labels && p.labels_full == ref.labels_full;

        const std::size_t classes = 2 + rng.below(2), pixels = 4 + rng.below(30);
        Matrix probs(classes, pixels);
        for (std::size_t i = 0; i < pixels; ++i) {
            double z = 0.0;
            for (std::size_t c = 0; c < classes; ++c) z += (probs(c, i) = rng.uniform(0.01, 1.0));
            for (std::size_t c = 0; c < classes; ++c) probs(c, i) /= z;
        }
        MaskMap target(1, pixels);
        for (auto& e : target.data) e = static_cast<std::int32_t>(rng.below(classes));
        record("seg_loss", std::abs(seg_loss(probs, target) - oracle::cross_entropy(probs, target)));
    }
    const double elapsed = seconds_since(t0);
    double all = 0.0;
    bool enough = true;
    for (const auto& [name, d] : worst) {
        all = std::max(all, d);
        enough = enough && count[name] >= kOracleInstances;
    }
    Verdict v;
    v.pass = enough && worst.size() == 7 && all <= kOracleTolerance && labels_agree && elapsed < kOracleBudgetSeconds;
    v.detail = fmt("7 functions x %zu instances, max |diff| %.2e (tol %.0e), labels %s, %.2f s", kOracleInstances, all,
                   kOracleTolerance, labels_agree ? "identical" : "DIFFER", elapsed);
    return v;
}

// ---- 2 ----------------------------------------------------------------------

Verdict gradient_correctness() {
    const auto t0 = Clock::now();
    std::string detail;
    bool pass = true;
    for (const char* component : {"cross_reference_block", "classifier_head", "losses"}) {
        double worst = 0.0;
        for (std::uint64_t seed = 1; seed <= kGradcheckInstances; ++seed)
            worst = std::max(worst, finite_difference_check(component, seed, kGradcheckEpsilon).max_rel_error);
        pass = pass && worst < kGradcheckTolerance;
        detail += fmt("%s %.2e, ", component, worst);
    }
    const double elapsed = seconds_since(t0);
    pass = pass && elapsed < kGradcheckBudgetSeconds;
    return {pass, detail + fmt("%zu instances each, eps %.0e, tol %.0e, %.2f s", kGradcheckInstances, kGradcheckEpsilon,
                               kGradcheckTolerance, elapsed)};
}

// ---- 3 ----------------------------------------------------------------------

struct NormStats {
    double attention_rows = 0.0, class_probs = 0.0, gate_min = 1.0, gate_max = 0.0, score_abs = 0.0;

    void attention(const AttentionCache& cache) {
        for (const Matrix& p : cache.probs)
            for (std::size_t i = 0; i < p.rows; ++i) {
                double s = 0.0;
                for (std::size_t j = 0; j < p.cols; ++j) s += p(i, j);
                attention_rows = std::max(attention_rows, std::abs(s - 1.0));
            }
    }
    void probs(const Matrix& m) {
        for (std::size_t i = 0; i < m.cols; ++i) {
            double s = 0.0;
            for (std::size_t c = 0; c < m.rows; ++c) s += m(c, i);
            class_probs = std::max(class_probs, std::abs(s - 1.0));
        }
    }
    void gate(const GateVector& g) {
        for (double w : g.w) {
            gate_min = std::min(gate_min, w);
            gate_max = std::max(gate_max, w);
        }
    }
    void scores(const Matrix& s) {
        for (double x : s.data) score_abs = std::max(score_abs, std::abs(x));
    }
};

Verdict normalization_invariants() {
    NormStats st;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        Rng rng(derive_seed(0xACC3, seed));
        AttentionCache cache;
        const std::size_t heads = 1 + rng.below(4);
        const std::size_t keys = 1 + rng.below(20);
        cross_attention(oracle::random_matrix(rng, 1 + rng.below(20), 8 * heads, 3.0),
                        oracle::random_matrix(rng, keys, 8 * heads, 3.0), oracle::random_matrix(rng, keys, 8 * heads),
                        heads, &cache);
        st.attention(cache);
    }
    // The real pipeline on synthetic slices with the default model.
    const RunConfig cfg = default_config();
    RunConfig small = cfg;
    small.data.synthetic.count = 6;
    const SliceDataset ds = training_dataset(small);
    Model model(cfg.train);
    std::size_t episodes = 0;
    for (std::uint64_t seed = 0; episodes < 6 && seed < 40; ++seed) {
        Episode ep;
        try {
            ep = build_episode(ds.slices[seed % ds.size()].image, cfg.train.superpixel, cfg.train.transforms, seed);
        } catch (const NoEligibleSegment&) {
            continue;
        }
        const MaskMap sds = downsample_mask(ep.support_mask, model.encoder.config().stride);
        if (sds.count(1) == 0 || sds.count(0) == 0) continue;
        const FeatureMap fs = model.encoder.forward(ep.support_image, Mode::eval);
        const FeatureMap fq = model.encoder.forward(ep.query_image, Mode::eval);
        CrossReferenceBlock::Trace bt;
        const auto out = model.block.forward(fs, fq, ep.support_mask, &bt);
        st.gate(out.gate_support);
        st.gate(out.gate_query);
        st.attention(bt.s2q.attention);
        st.attention(bt.q2s.attention);
        HeadTrace ht;
        const Prediction p = classify(out.support, sds, out.query, model.alp, ep.query_image.height, ep.query_image.width, &ht);
        st.probs(p.probs);
        st.probs(p.probs_full);
        st.scores(ht.scores.scores);
        ++episodes;
    }
    Verdict v;
    v.pass = episodes == 6 && st.attention_rows <= kNormTolerance && st.class_probs <= kNormTolerance &&
             st.gate_min > 0.0 && st.gate_max < 1.0 && st.score_abs <= kAlpha;
    v.detail = fmt("attention rows |1-sum| %.1e, class probs |1-sum| %.1e (tol %.0e), gates in [%.4f, %.4f], "
                   "max |score| %.3f <= %.0f, %zu pipeline episodes",
                   st.attention_rows, st.class_probs, kNormTolerance, st.gate_min, st.gate_max, st.score_abs, kAlpha,
                   episodes);
    return v;
}

// ---- 4 ----------------------------------------------------------------------

Verdict schedule_exactness() {
    bool pass = true;
    std::string detail;
    for (std::size_t t : {0u, 999u, 1000u, 5000u}) {
        const double want = 0.001 * std::pow(0.98, std::floor(static_cast<double>(t) / 1000.0));
        const double got = learning_rate(t);
        pass = pass && got == want;
        detail += fmt("t=%zu %.10g, ", t, got);
    }
    return {pass, detail + "bitwise equal to 0.001*0.98^floor(t/1000)"};
}

// ---- 5 ----------------------------------------------------------------------

Verdict synthetic_competence() {
    const auto t0 = Clock::now();
    RunConfig cfg = default_config();
    cfg.train.iterations = kCompetenceIterations;
    cfg.eval.max_episodes = kHeldOutEpisodes;
    const SliceDataset train = training_dataset(cfg), held = evaluation_dataset(cfg);
    Trainer trainer(cfg.train, train);
    trainer.run();
    const double train_s = seconds_since(t0);
    const DiceReport r = evaluate(trainer.model(), held, cfg.eval);
    const double elapsed = seconds_since(t0);
    std::string per_class;
    for (const auto& [name, d] : r.per_class)
        per_class += d ? fmt("%s %.3f, ", name.c_str(), *d) : fmt("%s not-evaluated, ", name.c_str());
    Verdict v;
    v.pass = r.evaluated == kHeldOutEpisodes && r.mean >= kDiceTarget && elapsed <= kCompetenceBudgetSeconds;
    v.detail = fmt("mean Dice %.4f (target %.2f) over %zu held-out %s episodes; %s%zu skipped; train %.0f s, total %.0f s",
                   r.mean, kDiceTarget, r.evaluated, cfg.eval.protocol.c_str(), per_class.c_str(), trainer.skipped(),
                   train_s, elapsed);
    return v;
}

// ---- 6 ----------------------------------------------------------------------

Verdict ablation_harness() {
    const RunConfig cfg = desk_config(kAblationIterations);
    const AblationReport r = run_ablation(cfg.train, training_dataset(cfg), evaluation_dataset(cfg), cfg.eval);
    const std::string tsv = r.to_tsv();
    std::istringstream lines(tsv);
    std::string header;
    std::getline(lines, header);
    const bool shape = r.rows.size() == 3 && r.rows[0].name == "Base" && r.rows[1].name == "Base+Support Mask" &&
                       r.rows[2].name == "Base+Mask+Transformer" && std::count(tsv.begin(), tsv.end(), '\n') == 4 &&
                       header.size() >= 5 && header.substr(header.size() - 5) == "\tMean";
    const bool delta = r.delta == r.rows.back().dice.mean - r.rows.front().dice.mean && !r.direction.empty();
    Verdict v;
    v.pass = shape && r.identical_streams && delta;
    v.detail = fmt("3 rows %s, identical streams %s, Base %.4f -> full %.4f, delta %+.4f (%s, reported only)",
                   shape ? "ok" : "MALFORMED", r.identical_streams ? "yes" : "NO", r.rows.front().dice.mean,
                   r.rows.back().dice.mean, r.delta, r.direction.c_str());
    return v;
}

// ---- 7 ----------------------------------------------------------------------

Verdict determinism() {
    RunConfig cfg = default_config();
    cfg.train.iterations = kDeterminismIterations;
    cfg.train.log_every = 1;
    cfg.train.workers = 0;
    cfg.data.synthetic.count = 8;
    const SliceDataset ds = training_dataset(cfg);
    const fs::path dir = fs::temp_directory_path() / "crtseg_acceptance_determinism";
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::vector<std::string> logs[2];
    std::string ckpt[2];
    for (int run = 0; run < 2; ++run) {
        Trainer t(cfg.train, ds);
        t.run([&](const LogRecord& r) { logs[run].push_back(to_json(r).dump()); });
        const fs::path p = dir / fmt("run%d.ckpt", run);
        t.save_checkpoint(p);
        std::ifstream in(p, std::ios::binary);
        ckpt[run].assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }
    fs::remove_all(dir);
    Verdict v;
    v.pass = logs[0].size() == kDeterminismIterations && logs[0] == logs[1] && !ckpt[0].empty() && ckpt[0] == ckpt[1];
    v.detail = fmt("%zu-iteration runs: loss logs %s (%zu records), checkpoints %s (%zu bytes)", kDeterminismIterations,
                   logs[0] == logs[1] ? "identical" : "DIFFER", logs[0].size(), ckpt[0] == ckpt[1] ? "identical" : "DIFFER",
                   ckpt[0].size());
    return v;
}

// ---- 8 ----------------------------------------------------------------------

Image2D fuzz_image(Rng& rng, int kind, std::size_t h, std::size_t w) {
    Image2D img(h, w);
    switch (kind) {
        case 0:  // blank
            break;
        case 1:  // constant raw value, normalized
            img = normalize_intensity(std::vector<double>(h * w, rng.uniform(-5.0, 5.0)), h, w);
            break;
        case 2:  // white noise
            for (double& v : img.data) v = rng.uniform();
            break;
        case 3: {  // one bright pixel
            img.at(rng.below(h), rng.below(w)) = 1.0;
            break;
        }
        case 4:  // two halves
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x) img.at(y, x) = x < w / 2 ? 0.0 : 1.0;
            break;
        default: {  // synthetic organs
            SyntheticSpec s;
            s.count = 1;
            s.height = h;
            s.width = w;
            s.radius_min = static_cast<double>(std::min(h, w)) / 10.0;
            s.radius_max = static_cast<double>(std::min(h, w)) / 5.0;
            img = make_synthetic_dataset(s, rng.next()).slices[0].image;
        }
    }
    return img;
}

Verdict degenerate_robustness() {
    const auto t0 = Clock::now();
    TrainConfig tc;
    tc.encoder.channels = 16;
    tc.superpixel.min_size = 20;
    tc.superpixel.min_area = 20;
    Model model(tc);
    TrainConfig zero_tc = tc;
    Model flat(zero_tc);
    for (Parameter* p : flat.encoder.parameters()) std::fill(p->value.begin(), p->value.end(), 0.0);

    std::map<std::string, std::size_t> outcomes;
    std::size_t crashes = 0, nonfinite = 0, bad_dice = 0;
    std::string first_crash;
    Rng rng(0xF022);
    for (std::size_t i = 0; i < kFuzzEpisodes; ++i) {
        const int kind = static_cast<int>(rng.below(6));
        const std::size_t h = 16 + 8 * rng.below(9), w = 16 + 8 * rng.below(9);
        const Image2D img = fuzz_image(rng, kind, h, w);
        Model& m = rng.below(4) == 0 ? flat : model;
        try {
            Episode ep;
            if (rng.below(3) == 0) {
                // Evaluation path: labels from a threshold, query may lack the class.
                MaskMap labels(h, w, 0);
                for (std::size_t p = 0; p < labels.data.size(); ++p) labels.data[p] = img.data[p] > 0.5 ? 1 : 0;
                if (labels.count(1) == 0) labels.at(0, 0) = 1;
                const Image2D qimg = fuzz_image(rng, static_cast<int>(rng.below(6)), h, w);
                MaskMap qlabels(h, w, 0);
                for (std::size_t p = 0; p < qlabels.data.size(); ++p) qlabels.data[p] = qimg.data[p] > 0.5 ? 1 : 0;
                ep = build_eval_episode(img, labels, qimg, qlabels, 1);
            } else {
                ep = build_episode(img, tc.superpixel, tc.transforms, rng.next());
            }
            const MaskMap pred = predict_query(m, ep);
            const double d = dice(pred, ep.query_mask);
            if (!(d >= 0.0 && d <= 1.0)) ++bad_dice;
            if (pred.count(1) == 0) ++outcomes["empty prediction"];
            const EpisodeResult r = forward_episode(m, ep, 1.0, rng.below(2) == 0);
            if (r.skipped) {
                ++outcomes["skipped episode"];
            } else {
                if (!std::isfinite(r.loss.total)) ++nonfinite;
                ++outcomes[r.alignment_applied ? "scored with alignment" : "scored, alignment skipped"];
            }
        } catch (const NoEligibleSegment&) {
            ++outcomes["no eligible superpixel"];
        } catch (const std::exception& e) {
            if (crashes++ == 0) first_crash = e.what();
        }
        if (kind <= 1) ++outcomes["blank slice"];
    }
    // The trainer itself over a stream that includes blank slices.
    SliceDataset mixed;
    mixed.class_names = {"background"};
    for (int i = 0; i < 6; ++i)
        mixed.slices.push_back({fmt("s%d", i), fuzz_image(rng, i % 3 == 0 ? 0 : 5, 48, 48), std::nullopt});
    TrainConfig short_run = tc;
    short_run.iterations = 30;
    std::size_t trainer_skips = 0;
    try {
        Trainer t(short_run, mixed);
        t.run();
        trainer_skips = t.skipped();
    } catch (const std::exception& e) {
        if (crashes++ == 0) first_crash = e.what();
    }
    const double elapsed = seconds_since(t0);
    const bool covered = outcomes["blank slice"] > 0 && outcomes["no eligible superpixel"] > 0 &&
                         outcomes["empty prediction"] > 0 && outcomes["skipped episode"] > 0;
    std::string summary;
    for (const auto& [k, n] : outcomes) summary += fmt("%s %zu, ", k.c_str(), n);
    Verdict v;
    v.pass = crashes == 0 && nonfinite == 0 && bad_dice == 0 && covered;
    v.detail = fmt("%zu episodes: %scrashes %zu%s%s, non-finite losses %zu, out-of-range Dice %zu, trainer skips %zu/30, %.1f s",
                   kFuzzEpisodes, summary.c_str(), crashes, crashes ? " first: " : "", first_crash.c_str(), nonfinite,
                   bad_dice, trainer_skips, elapsed);
    return v;
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
        {"oracle equivalence", oracle_equivalence},
        {"gradient correctness", gradient_correctness},
        {"normalization invariants", normalization_invariants},
        {"schedule exactness", schedule_exactness},
        {"end-to-end synthetic competence", synthetic_competence},
        {"ablation harness", ablation_harness},
        {"determinism", determinism},
        {"degenerate-input robustness", degenerate_robustness},
    };
    std::set<int> selected;
    for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
    bool all = true;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i + 1);
        if (!selected.empty() && !selected.count(id)) continue;
        Verdict v;
        try {
            v = criteria[i].second();
        } catch (const std::exception& e) {
            v = {false, std::string("threw: ") + e.what()};
        }
        all = all && v.pass;
        std::printf("criterion %d %s %s: %s\n", id, v.pass ? "PASS" : "FAIL", criteria[i].first.c_str(), v.detail.c_str());
        std::fflush(stdout);
    }
    return all ? 0 : 1;
}
