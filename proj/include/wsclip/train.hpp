#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "wsclip/checkpoint.hpp"
#include "wsclip/config.hpp"
#include "wsclip/corpus.hpp"
#include "wsclip/eval.hpp"
#include "wsclip/models.hpp"
#include "wsclip/objectives.hpp"
#include "wsclip/optim.hpp"

namespace wsclip {

enum class StageObjective { distill, contrastive };

// One curriculum stage: which loss, how much data, patch dropout, schedule.
struct TrainStage {
    StageObjective objective = StageObjective::contrastive;
    std::int64_t samples_to_see = 0;
    std::int64_t batch_size = 32;
    double patch_dropout = 0.0;            // contrastive input dropout
    double mask_ratio = 0.5;               // distillation target mask
    std::int64_t resolution = 0;           // 0 = tower default
    std::map<std::string, double> data_mix = {{"train", 1.0}};
    std::int64_t warmup_steps = -1;        // -1 = min(100, steps/10)
    bool augment = true;                   // random resized crop, scale (0.9, 1)
    std::int64_t frames = 0;               // >0: frame-stack samples, mean-pooled
    OptimConfig optim;

    std::int64_t steps() const;
    std::int64_t effective_warmup() const;
    void validate() const;
};

struct TraceEntry {
    std::int64_t step = 0;
    double lr = 0.0;    // vision head-group rate at this step
    double loss = 0.0;  // pre-update batch loss
    double in_batch_top1 = 0.0;
};

struct StageResult {
    std::vector<TraceEntry> trace;
    double final_loss = 0.0;
    std::int64_t steps_run = 0;
    std::int64_t visible_patches = 0;  // patch tokens per image after dropout
    LambState optimizer;               // final moments, for checkpointing
};

struct ClipModel {
    ClipConfig config;
    TowerWeights vision;
    TowerWeights text;
};

// Drops patch tokens by mask, preserving relative order. Positions and the
// class token are handled by the vision forward.
Tensor apply_patch_dropout(const Tensor& patch_tokens, const PatchMask& mask);

// Moving average of the loss trace with the given window.
std::vector<double> loss_moving_average(const std::vector<TraceEntry>& trace,
                                        std::int64_t window);

// Weights must match the config's parameter shapes exactly; mismatches
// raise CheckpointError listing every offending name.
void validate_tower_weights(const TowerConfig& cfg, const TowerWeights& weights,
                            const std::string& label);

struct DistillResult {
    TowerWeights student;
    StageResult stats;
};

// Trains a student vision tower to reproduce the frozen teacher's final
// patch features at masked positions. A linear alignment head (identity at
// init when the widths already match) bridges width mismatches; it is
// trained jointly and discarded. use_align_head=false requires equal widths.
DistillResult run_distillation(const ClipModel& teacher, const TowerConfig& student_cfg,
                               const Corpus& corpus, const TrainStage& stage, std::uint64_t seed,
                               const TowerWeights* student_init = nullptr,
                               bool use_align_head = true);

// Contrastive training over the model in place: LAMB, layer-wise decayed
// learning rates, warmup + cosine schedule, per-step patch dropout.
StageResult run_clip_stage(ClipModel& model, const Corpus& corpus, const TrainStage& stage,
                           std::uint64_t seed);

// ---------------------------------------------------------------------------
// the weak-to-strong cycle
// ---------------------------------------------------------------------------

struct GenerationPlan {
    std::string name;
    TowerConfig student;  // vision tower, strictly larger than the teacher's
    TrainStage distill;
    std::vector<TrainStage> clip_stages;
};

struct CyclePlan {
    std::uint64_t seed = 1;
    std::string corpus_dir;
    std::string out_dir;

    std::string seed_checkpoint;  // when set, the seed model is loaded
    ClipConfig seed_config;       // otherwise trained from scratch
    TrainStage seed_stage;
    std::vector<GenerationPlan> generations;

    static CyclePlan load(const std::string& path);
    static CyclePlan from_kv(const KeyValueConfig& kv);
};

struct GenerationRecord {
    std::string name;
    std::int64_t vision_params = 0;
    double forward_gflops = 0.0;
    double distill_final_loss = 0.0;
    double clip_final_loss = 0.0;
    double zs_top1 = 0.0;
    double zs_top5 = 0.0;
    double retrieval_mr = 0.0;
    std::uint64_t checkpoint_hash = 0;
    std::uint64_t teacher_hash = 0;
    std::uint64_t seed = 0;
};

struct LineageRecord {
    std::vector<GenerationRecord> generations;
    std::string to_kv_text() const;
    std::string to_csv() const;  // generation, params, gflops, eval metrics
};

// Validates the plan (strictly growing student parameter counts), then runs
// distill -> init -> contrastive stages per generation, promoting each
// output to teacher. Checkpoints, the lineage record, and the scaling-curve
// CSV land under plan.out_dir; a stage failure persists the partial lineage
// before rethrowing.
LineageRecord run_weak_to_strong_cycle(const CyclePlan& plan);

// CLIP checkpoint layout: tensors under "vision."/"text." prefixes, config
// record carrying the ClipConfig plus free metadata.
void save_clip_checkpoint(const std::string& path, const ClipModel& model,
                          const KeyValueConfig& metadata);
ClipModel load_clip_checkpoint(const std::string& path);

// Lean per-generation evaluation: zero-shot classification (best of the two
// transforms) and retrieval on the test split.
EvalReport evaluate_generation(const ClipModel& model, const Corpus& corpus, std::uint64_t seed);

}  // namespace wsclip
