// crtseg: dataset generation, training, evaluation, ablation, gradient
// checking and overlay rendering. Every command writes run_manifest.json
// into its output directory.

#include "crtseg/checkpoint.hpp"
#include "crtseg/config.hpp"
#include "crtseg/episode.hpp"
#include "crtseg/errors.hpp"
#include "crtseg/gradcheck.hpp"
#include "crtseg/kernels.hpp"
#include "crtseg/render.hpp"
#include "crtseg/rng.hpp"
#include "crtseg/superpixel.hpp"
#include "crtseg/trainer.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace crtseg;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;

struct Common {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out;
    bool force = false;
};

std::string utc_now() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
    char buf[40];
    const std::size_t n = std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", std::gmtime(&t));
    std::snprintf(buf + n, sizeof buf - n, ".%03dZ", static_cast<int>(ms));
    return buf;
}

RunConfig resolve(const Common& c) {
    RunConfig cfg = c.config_path.empty() ? RunConfig{} : load_config(c.config_path);
    if (c.seed) {
        // --seed replaces the top-level seed; re-parse so derived seeds follow it.
        json j = c.config_path.empty() ? json::object() : json::parse(std::ifstream(c.config_path));
        j["seed"] = *c.seed;
        cfg = parse_config(j);
    }
    if (const char* w = std::getenv("CRTSEG_NUM_WORKERS")) cfg.train.workers = std::strtoull(w, nullptr, 10);
    return cfg;
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream f(path);
    if (!f) throw Error("cannot write " + path.string());
    f << j.dump(2) << '\n';
}

// Creates the output directory. An existing non-empty directory is only
// reused with --force.
void prepare_out(const Common& c) {
    if (c.out.empty()) throw ValidationError("--out is required");
    const fs::path out(c.out);
    const fs::path parent = fs::absolute(out).parent_path();
    if (!fs::exists(parent)) throw Error("output parent directory does not exist: " + parent.string());
    if (fs::exists(out) && !fs::is_empty(out)) {
        if (!c.force) throw Error("output directory " + out.string() + " is not empty (use --force)");
        fs::remove_all(out);
    }
    fs::create_directories(out);
}

class Manifest {
public:
    Manifest(std::string command, const Common& c, const RunConfig& cfg)
        : command_(std::move(command)), common_(c), resolved_(to_json(cfg)), started_(utc_now()) {}

    void write(const json& extra = json::object()) const {
        json m = {{"command", command_},
                  {"config_path", common_.config_path},
                  {"config_hash", config_hash(resolved_)},
                  {"seed", resolved_["seed"]},
                  {"output_dir", common_.out},
                  {"started_at", started_},
                  {"finished_at", utc_now()},
                  {"isa", std::string(kernels::isa_name(kernels::active_isa()))},
                  {"resolved_config", resolved_}};
        for (const auto& [k, v] : extra.items()) m[k] = v;
        write_json(fs::path(common_.out) / "run_manifest.json", m);
    }

private:
    std::string command_;
    Common common_;
    json resolved_;
    std::string started_;
};

SliceDataset training_data(const RunConfig& cfg) { return training_dataset(cfg); }
SliceDataset evaluation_data(const RunConfig& cfg) { return evaluation_dataset(cfg); }

Model load_model(const RunConfig& cfg, const fs::path& checkpoint) {
    const Container c = read_container(checkpoint);
    const std::string have = c.header.value("model_hash", "");
    const std::string want = model_hash(cfg.train);
    if (have != want)
        throw LoadError("checkpoint " + checkpoint.string() + " has model hash " + have +
                        " but the config resolves to " + want);
    Model m(cfg.train);
    m.load(c);
    return m;
}

int cmd_gen_data(const Common& c) {
    const RunConfig cfg = resolve(c);
    prepare_out(c);
    Manifest man("gen-data", c, cfg);
    const SliceDataset ds = training_data(cfg);
    save_slice_dataset(ds, c.out);
    man.write({{"slices", ds.size()}});
    std::printf("wrote %zu slices to %s\n", ds.size(), c.out.c_str());
    return 0;
}

int cmd_train(const Common& c, const std::string& resume) {
    const RunConfig cfg = resolve(c);
    prepare_out(c);
    Manifest man("train", c, cfg);
    const SliceDataset ds = training_data(cfg);
    Trainer trainer(cfg.train, ds);
    std::ofstream log;
    if (!resume.empty()) {
        trainer.load_checkpoint(resume);
        std::printf("resumed at iteration %zu\n", trainer.iteration());
    }
    log.open(fs::path(c.out) / "loss_log.jsonl");
    try {
        trainer.run([&](const LogRecord& r) {
            log << to_json(r).dump() << '\n';
            if (r.loss && r.iteration % 100 == 0)
                std::printf("iter %6zu  seg %.4f  reg %.4f  total %.4f  lr %.3g\n", r.iteration, r.loss->seg,
                            r.loss->reg, r.loss->total, r.lr);
        });
    } catch (const NumericalError& e) {
        trainer.save_checkpoint(fs::path(c.out) / "diverged.ckpt");
        write_json(fs::path(c.out) / "error.json",
                   {{"error", "numerical"}, {"message", e.what()}, {"iteration", e.iteration()},
                    {"episode_seed", e.episode_seed()}});
        throw;
    }
    trainer.save_checkpoint(fs::path(c.out) / "checkpoint.ckpt");
    man.write({{"iterations", trainer.iteration()},
               {"skipped_episodes", trainer.skipped()},
               {"stream_fingerprint", trainer.stream_fingerprint()},
               {"resumed_from", resume}});
    std::printf("trained %zu iterations (%zu skipped)\n", trainer.iteration(), trainer.skipped());
    return 0;
}

int cmd_eval(const Common& c, const std::string& checkpoint) {
    const RunConfig cfg = resolve(c);
    prepare_out(c);
    Manifest man("eval", c, cfg);
    const Model model = load_model(cfg, checkpoint);
    const DiceReport report = evaluate(model, evaluation_data(cfg), cfg.eval);
    json j;
    to_json(j, report);
    write_json(fs::path(c.out) / "dice_report.json", j);
    man.write({{"checkpoint", checkpoint}});
    std::printf("%s\n", j.dump(2).c_str());
    return 0;
}

int cmd_ablate(const Common& c) {
    const RunConfig cfg = resolve(c);
    prepare_out(c);
    Manifest man("ablate", c, cfg);
    const AblationReport report = run_ablation(cfg.train, training_data(cfg), evaluation_data(cfg), cfg.eval);
    std::ofstream(fs::path(c.out) / "ablation.tsv") << report.to_tsv();
    write_json(fs::path(c.out) / "ablation.json", report.to_json());
    man.write();
    std::printf("%s", report.to_tsv().c_str());
    std::printf("identical episode streams: %s; full - base = %+.4f (%s)\n", report.identical_streams ? "yes" : "no",
                report.delta, report.direction.c_str());
    return 0;
}

int cmd_gradcheck(const Common& c) {
    const RunConfig cfg = resolve(c);
    if (!c.out.empty()) prepare_out(c);
    json results = json::object();
    bool ok = true;
    for (const std::string& comp : cfg.gradcheck.components) {
        double worst = 0.0;
        for (std::size_t i = 0; i < cfg.gradcheck.instances; ++i) {
            const GradcheckResult r = finite_difference_check(comp, derive_seed(cfg.seed, i), cfg.gradcheck.epsilon);
            worst = std::max(worst, r.max_rel_error);
        }
        const bool pass = worst < cfg.gradcheck.tolerance;
        ok = ok && pass;
        results[comp] = {{"max_rel_error", worst}, {"pass", pass}};
        std::printf("%-24s max relative error %.3e  %s\n", comp.c_str(), worst, pass ? "ok" : "FAIL");
    }
    if (!c.out.empty()) {
        write_json(fs::path(c.out) / "gradcheck.json",
                   {{"epsilon", cfg.gradcheck.epsilon}, {"tolerance", cfg.gradcheck.tolerance},
                    {"instances", cfg.gradcheck.instances}, {"components", results}});
        Manifest("gradcheck", c, cfg).write({{"pass", ok}});
    }
    return ok ? 0 : kExitFailure;
}

// Archive of evaluation episodes (or training episodes) for replay and rendering.
int cmd_episodes(const Common& c, const std::string& kind, std::size_t count) {
    const RunConfig cfg = resolve(c);
    prepare_out(c);
    Manifest man("episodes", c, cfg);
    std::vector<Episode> eps;
    if (kind == "eval") {
        const SliceDataset ds = evaluation_data(cfg);
        for (const EvalEpisodeSpec& s : plan_evaluation(ds, cfg.eval)) {
            if (eps.size() == count) break;
            eps.push_back(materialize(ds, s, cfg.eval));
        }
    } else if (kind == "train") {
        const SliceDataset ds = training_data(cfg);
        TrainConfig t = cfg.train;
        Trainer trainer(t, ds);
        for (std::size_t i = 0; eps.size() < count && i < count * 8; ++i) {
            StreamEntry e = trainer.episode_at(i);
            if (e.episode) eps.push_back(std::move(*e.episode));
        }
    } else {
        throw ValidationError("--kind must be \"eval\" or \"train\"");
    }
    export_episodes(fs::path(c.out) / "episodes", eps);
    man.write({{"episodes", eps.size()}, {"kind", kind}});
    std::printf("exported %zu episodes\n", eps.size());
    return 0;
}

int cmd_render(const Common& c, const std::string& checkpoint, const std::string& archive) {
    const RunConfig cfg = resolve(c);
    const std::vector<Episode> eps = import_episodes(archive);
    const Model model = load_model(cfg, checkpoint);
    prepare_out(c);
    Manifest man("render", c, cfg);
    for (std::size_t i = 0; i < eps.size(); ++i) {
        const Episode& ep = eps[i];
        char stem[32];
        std::snprintf(stem, sizeof stem, "episode_%04zu", i);
        const fs::path base = fs::path(c.out) / stem;
        write_png(base.string() + "_support.png", overlay(ep.support_image, ep.support_mask));
        write_png(base.string() + "_truth.png", overlay(ep.query_image, ep.query_mask));
        write_png(base.string() + "_prediction.png", overlay(ep.query_image, predict_query(model, ep)));
    }
    man.write({{"checkpoint", checkpoint}, {"episodes", archive}, {"images", 3 * eps.size()}});
    std::printf("rendered %zu episodes\n", eps.size());
    return 0;
}

int cmd_superpixels(const Common& c, std::size_t count) {
    const RunConfig cfg = resolve(c);
    prepare_out(c);
    Manifest man("superpixels", c, cfg);
    const SliceDataset ds = training_data(cfg);
    for (std::size_t i = 0; i < std::min(count, ds.size()); ++i) {
        const SuperpixelMap spx = felzenszwalb_segment(ds.slices[i].image, cfg.train.superpixel);
        export_superpixels(fs::path(c.out) / ds.slices[i].id, spx);
    }
    man.write();
    return 0;
}

void add_common(CLI::App* app, Common& c, bool out_required = true) {
    app->add_option("--config", c.config_path, "JSON config file")->check(CLI::ExistingFile);
    app->add_option("--seed", c.seed, "overrides the config seed");
    auto* out = app->add_option("--out", c.out, "output directory");
    if (out_required) out->required();
    app->add_flag("--force", c.force, "replace a non-empty output directory");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Cross-reference prototype segmentation toolkit"};
    app.require_subcommand(1);
    Common common;
    std::string checkpoint, resume, archive, kind = "eval";
    std::size_t count = 4;

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic slice dataset");
    add_common(gen, common);
    auto* train = app.add_subcommand("train", "episodic self-supervised training");
    add_common(train, common);
    train->add_option("--resume", resume, "checkpoint to continue from")->check(CLI::ExistingFile);
    auto* eval = app.add_subcommand("eval", "Dice evaluation of a checkpoint");
    add_common(eval, common);
    eval->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
    auto* ablate = app.add_subcommand("ablate", "three-row ablation table");
    add_common(ablate, common);
    auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    add_common(grad, common, false);
    auto* episodes = app.add_subcommand("episodes", "export an episode archive");
    add_common(episodes, common);
    episodes->add_option("--kind", kind, "eval | train");
    episodes->add_option("--count", count);
    auto* render = app.add_subcommand("render", "PNG overlays for an episode archive");
    add_common(render, common);
    render->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
    render->add_option("--episodes", archive, "episode archive directory")->required()->check(CLI::ExistingDirectory);
    auto* spx = app.add_subcommand("superpixels", "debug export of superpixel maps");
    add_common(spx, common);
    spx->add_option("--count", count);

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_data(common);
        if (train->parsed()) return cmd_train(common, resume);
        if (eval->parsed()) return cmd_eval(common, checkpoint);
        if (ablate->parsed()) return cmd_ablate(common);
        if (grad->parsed()) return cmd_gradcheck(common);
        if (episodes->parsed()) return cmd_episodes(common, kind, count);
        if (render->parsed()) return cmd_render(common, checkpoint, archive);
        if (spx->parsed()) return cmd_superpixels(common, count);
    } catch (const ConfigError& e) {
        std::cerr << e.to_json().dump() << '\n';
        return kExitConfig;
    } catch (const NumericalError& e) {
        std::cerr << json{{"error", "numerical"}, {"message", e.what()}, {"iteration", e.iteration()},
                          {"episode_seed", e.episode_seed()}}
                         .dump()
                  << '\n';
        return kExitFailure;
    } catch (const std::exception& e) {
        std::cerr << json{{"error", "runtime"}, {"message", e.what()}}.dump() << '\n';
        return kExitFailure;
    }
    return kExitFailure;
}
