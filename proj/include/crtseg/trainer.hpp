#pragma once

// Episodic training, checkpointing, evaluation and the three-row ablation.

#include "crtseg/cross_reference.hpp"
#include "crtseg/data.hpp"
#include "crtseg/encoder.hpp"
#include "crtseg/episode.hpp"
#include "crtseg/objectives.hpp"
#include "crtseg/optimizer.hpp"
#include "crtseg/prototype.hpp"
#include "crtseg/superpixel.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace crtseg {

struct AblationFlags {
    bool use_support_mask = true;
    bool use_cross_reference = true;

    bool operator==(const AblationFlags&) const = default;
};

// Gating always runs; the flags switch support masking and cross-attention.
BlockOptions block_options(const AblationFlags& flags);

struct TrainConfig {
    std::size_t iterations = 2000;
    ScheduleConfig schedule;
    AdamConfig adam;
    std::size_t batch_size = 1;
    std::uint64_t seed = 0;
    double lambda = 1.0;
    AblationFlags flags;
    EncoderConfig encoder;
    ALPConfig alp;
    AttentionConfig attention;
    SuperpixelConfig superpixel;
    TransformRanges transforms;
    std::size_t log_every = 1;
    std::size_t workers = 0;  // superpixel prefetch threads; 0 = inline

    void validate() const;
};

class Model {
public:
    Model(const EncoderConfig& encoder, const AttentionConfig& attention, const BlockOptions& options,
          const ALPConfig& alp);
    explicit Model(const TrainConfig& config);

    Encoder encoder;
    CrossReferenceBlock block;
    ALPConfig alp;

    ParameterList parameters();
    // Parameters reachable from the loss under the block options.
    ParameterList active_parameters();

    void save(Container& out) const;
    void load(const Container& in);
};

struct SkippedEpisode {
    std::string reason;
};

struct EpisodeResult {
    std::optional<SkippedEpisode> skipped;
    LossReport loss;
    Prediction query_prediction;
    bool alignment_applied = false;
};

// Full pipeline on one episode: shared encoder, cross-reference block,
// prototype head and segmentation loss on the query, then the alignment pass
// with the query's predicted mask as the support annotation (the argmax is
// not differentiated). With accumulate, parameter gradients are added.
EpisodeResult forward_episode(Model& model, const Episode& episode, double lambda, bool accumulate);

// Inference only. A support mask that vanishes at feature stride yields an
// empty prediction.
MaskMap predict_query(const Model& model, const Episode& episode);

struct LogRecord {
    std::size_t iteration = 0;
    double lr = 0.0;
    std::optional<LossReport> loss;
    std::string skipped;  // reason; empty when a step was taken
    std::uint64_t episode_seed = 0;
};

nlohmann::json to_json(const LogRecord& r);

// Training episode for an iteration: a pure function of (seed, iteration,
// dataset, superpixel and transform configs).
struct StreamEntry {
    std::optional<Episode> episode;
    std::string skip_reason;
    std::size_t slice = 0;
    std::uint64_t episode_seed = 0;
};

class Trainer {
public:
    Trainer(const TrainConfig& config, const SliceDataset& dataset);

    StreamEntry episode_at(std::size_t iteration) const;
    LogRecord step();
    // Runs until `iterations` have been done; calls sink for every logged record.
    void run(const std::function<void(const LogRecord&)>& sink = {});

    std::size_t iteration() const noexcept { return iteration_; }
    std::size_t skipped() const noexcept { return skipped_; }
    Model& model() noexcept { return model_; }
    const TrainConfig& config() const noexcept { return config_; }
    // FNV-1a over (iteration, slice, episode seed, skip) of consumed episodes.
    std::uint64_t stream_fingerprint() const noexcept { return fingerprint_; }

    void save_checkpoint(const std::filesystem::path& path) const;
    void load_checkpoint(const std::filesystem::path& path);

private:
    TrainConfig config_;
    const SliceDataset& dataset_;
    std::vector<std::optional<SuperpixelMap>> superpixels_;
    Model model_;
    Adam adam_;
    std::size_t iteration_ = 0;
    std::size_t skipped_ = 0;
    std::uint64_t fingerprint_ = 0xcbf29ce484222325ULL;
};

// ---- evaluation -------------------------------------------------------------

struct EvalOptions {
    // "cross_slice": support and query are different labeled slices.
    // "transformed": query is a random affine/gamma warp of the support slice.
    std::string protocol = "cross_slice";
    std::size_t folds = 5;
    std::size_t fold = 0;
    std::vector<std::int32_t> classes;  // empty = all declared foreground classes
    std::vector<std::int32_t> exclude;
    std::size_t max_episodes = 0;       // 0 = no cap
    std::uint64_t seed = 0;
    TransformRanges transforms;

    void validate() const;
};

struct EvalEpisodeSpec {
    std::size_t support = 0, query = 0;
    std::int32_t class_id = 0;
    std::uint64_t seed = 0;
};

// The episodes evaluate() would score, in order.
std::vector<EvalEpisodeSpec> plan_evaluation(const SliceDataset& dataset, const EvalOptions& options);
Episode materialize(const SliceDataset& dataset, const EvalEpisodeSpec& spec, const EvalOptions& options);

DiceReport evaluate(const Model& model, const SliceDataset& dataset, const EvalOptions& options);

// ---- ablation ---------------------------------------------------------------

struct AblationRow {
    std::string name;
    AblationFlags flags;
    DiceReport dice;
    std::uint64_t stream_fingerprint = 0;
    std::size_t skipped = 0;
};

struct AblationReport {
    std::vector<AblationRow> rows;
    std::vector<std::string> class_names;
    bool identical_streams = false;
    double delta = 0.0;  // last row mean - first row mean
    std::string direction;

    std::string to_tsv() const;
    nlohmann::json to_json() const;
};

AblationReport run_ablation(const TrainConfig& config, const SliceDataset& train_set,
                            const SliceDataset& eval_set, const EvalOptions& options);

}  // namespace crtseg
