#include "wsclip/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <sstream>

#include "wsclip/errors.hpp"

namespace wsclip {

std::int64_t TrainStage::steps() const {
    return (samples_to_see + batch_size - 1) / batch_size;
}

std::int64_t TrainStage::effective_warmup() const {
    if (warmup_steps >= 0) return std::min(warmup_steps, steps() - 1);
    return std::min<std::int64_t>(100, steps() / 10);
}

void TrainStage::validate() const {
    if (samples_to_see <= 0) throw ConfigError("stage: samples_to_see must be > 0");
    if (batch_size <= 0) throw ConfigError("stage: batch_size must be > 0");
    if (!(patch_dropout >= 0.0 && patch_dropout < 1.0))
        throw ConfigError("stage: patch_dropout outside [0, 1)");
    if (!(mask_ratio >= 0.0 && mask_ratio < 1.0))
        throw ConfigError("stage: mask_ratio outside [0, 1)");
    if (data_mix.empty()) throw ConfigError("stage: empty data mix");
    for (const auto& [name, w] : data_mix)
        if (!(w > 0.0)) throw ConfigError("stage: data mix weight for '" + name + "' must be > 0");
    if (frames < 0 || frames == 1)
        throw ConfigError("stage: frames must be 0 (off) or >= 2");
}

Tensor apply_patch_dropout(const Tensor& patch_tokens, const PatchMask& mask) {
    if (patch_tokens.rank() != 3)
        throw DimensionError("apply_patch_dropout: expects [b, n, d] patch tokens");
    if (static_cast<std::int64_t>(mask.keep.size()) != patch_tokens.dim(1))
        throw DimensionError("apply_patch_dropout: mask length " +
                             std::to_string(mask.keep.size()) + " != patch count " +
                             std::to_string(patch_tokens.dim(1)));
    return select_tokens(patch_tokens, mask.kept_indices());
}

std::vector<double> loss_moving_average(const std::vector<TraceEntry>& trace,
                                        std::int64_t window) {
    if (window <= 0) throw ConfigError("loss_moving_average: window must be > 0");
    std::vector<double> out;
    double acc = 0.0;
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(trace.size()); ++i) {
        acc += trace[static_cast<size_t>(i)].loss;
        if (i >= window) acc -= trace[static_cast<size_t>(i - window)].loss;
        if (i >= window - 1) out.push_back(acc / static_cast<double>(window));
    }
    return out;
}

void validate_tower_weights(const TowerConfig& cfg, const TowerWeights& weights,
                            const std::string& label) {
    std::string bad;
    auto expected = tower_parameter_shapes(cfg);
    for (const auto& [name, shape] : expected) {
        auto it = weights.find(name);
        if (it == weights.end())
            bad += (bad.empty() ? "" : ", ") + label + "." + name + " (missing)";
        else if (it->second.shape() != shape)
            bad += (bad.empty() ? "" : ", ") + label + "." + name + " (shape " +
                   shape_str(it->second.shape()) + ", want " + shape_str(shape) + ")";
    }
    if (weights.size() != expected.size())
        for (const auto& [name, t] : weights) {
            bool known = false;
            for (const auto& [ename, eshape] : expected)
                if (ename == name) known = true;
            if (!known) bad += (bad.empty() ? "" : ", ") + label + "." + name + " (unexpected)";
        }
    if (!bad.empty()) throw CheckpointError("incompatible weights: " + bad);
}

// ---------------------------------------------------------------------------
// batching
// ---------------------------------------------------------------------------

namespace {

struct Pick {
    const CorpusSplit* split;
    std::int64_t index;
};

std::vector<Pick> draw_batch(const Corpus& corpus, const TrainStage& stage, Rng& rng) {
    std::vector<std::pair<const CorpusSplit*, double>> cum;
    double total = 0.0;
    for (const auto& [name, weight] : stage.data_mix) {
        total += weight;
        cum.emplace_back(&corpus.split(name), total);
    }
    std::vector<Pick> picks;
    picks.reserve(static_cast<size_t>(stage.batch_size));
    for (std::int64_t i = 0; i < stage.batch_size; ++i) {
        const double u = rng.uniform(0.0, total);
        const CorpusSplit* split = cum.back().first;
        for (const auto& [s, edge] : cum)
            if (u < edge) {
                split = s;
                break;
            }
        picks.push_back(
            {split, static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(split->size())))});
    }
    return picks;
}

Tensor assemble_images(const std::vector<Pick>& picks, std::int64_t resolution,
                       bool augment, Rng& aug_rng) {
    std::vector<double> out;
    out.reserve(picks.size() * static_cast<size_t>(3 * resolution * resolution));
    const CropScaleRange range{0.9, 1.0};
    for (const auto& pick : picks) {
        Tensor img = pick.split->image(pick.index);
        if (augment)
            img = preprocess(img, TransformMode::direct_resize, resolution, &range, &aug_rng);
        else if (img.dim(1) != resolution || img.dim(2) != resolution)
            img = preprocess(img, TransformMode::direct_resize, resolution);
        out.insert(out.end(), img.values().begin(), img.values().end());
    }
    return Tensor({static_cast<std::int64_t>(picks.size()), 3, resolution, resolution},
                  std::move(out));
}

std::vector<std::vector<std::int64_t>> assemble_tokens(const std::vector<Pick>& picks,
                                                       const Vocab& vocab,
                                                       std::int64_t context) {
    std::vector<std::vector<std::int64_t>> rows;
    rows.reserve(picks.size());
    for (const auto& pick : picks)
        rows.push_back(
            tokenize(pick.split->captions[static_cast<size_t>(pick.index)], vocab, context));
    return rows;
}

// ---------------------------------------------------------------------------
// grouped LAMB
// ---------------------------------------------------------------------------

struct NamedParams {
    // label -> live weights; gradients arrive under the same labels
    std::map<std::string, TowerWeights*> towers;
};

void apply_grouped_lamb(const std::vector<ParamGroup>& groups, NamedParams& params,
                        const std::map<std::string, TowerWeights>& grads, LambState& state,
                        const LambHyper& hyper, std::int64_t warmup, std::int64_t total) {
    for (const auto& group : groups) {
        const auto& tower_grads = grads.at(group.tower);
        for (const auto& name : group.names) {
            const auto& g = tower_grads.at(name);
            for (double v : g.values())
                if (std::isnan(v))
                    throw NumericError("lamb: NaN gradient in " + group.tower + "." + name);
        }
    }
    state.step += 1;
    for (const auto& group : groups) {
        ScheduleSpec spec{group.base_peak_lr, warmup, total};
        const double lr = cosine_lr(std::min(state.step, total), spec) * group.lr_scale();
        TowerWeights& tower = *params.towers.at(group.tower);
        const TowerWeights& tower_grads = grads.at(group.tower);
        for (const auto& name : group.names) {
            auto& slot = state.slots[group.tower + "/" + name];
            Tensor& p = tower.at(name);
            if (slot.m.empty()) {
                slot.m.assign(static_cast<size_t>(p.size()), 0.0);
                slot.v.assign(static_cast<size_t>(p.size()), 0.0);
            }
            lamb_update_tensor(p.mutable_values(), tower_grads.at(name).values(), slot.m, slot.v,
                               state.step, hyper, lr);
        }
    }
}

TowerWeights collect_grads(Tape& tape, const TowerWeights& watched) {
    TowerWeights grads;
    for (const auto& [name, t] : watched) grads.emplace(name, tape.grad(t));
    return grads;
}

double in_batch_diag_top1(const Tensor& logits) {
    const std::int64_t b = logits.dim(0);
    std::int64_t hits = 0;
    for (std::int64_t i = 0; i < b; ++i) {
        std::int64_t best = 0;
        for (std::int64_t j = 1; j < b; ++j)
            if (logits.values()[static_cast<size_t>(i * b + j)] >
                logits.values()[static_cast<size_t>(i * b + best)])
                best = j;
        if (best == i) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(b);
}

double tail_mean_loss(const std::vector<TraceEntry>& trace) {
    if (trace.empty()) return 0.0;
    const auto tail = std::max<std::int64_t>(1, static_cast<std::int64_t>(trace.size()) / 10);
    double acc = 0.0;
    for (std::int64_t i = static_cast<std::int64_t>(trace.size()) - tail;
         i < static_cast<std::int64_t>(trace.size()); ++i)
        acc += trace[static_cast<size_t>(i)].loss;
    return acc / static_cast<double>(tail);
}

}  // namespace

// ---------------------------------------------------------------------------
// distillation
// ---------------------------------------------------------------------------

DistillResult run_distillation(const ClipModel& teacher, const TowerConfig& student_cfg,
                               const Corpus& corpus, const TrainStage& stage, std::uint64_t seed,
                               const TowerWeights* student_init, bool use_align_head) {
    stage.validate();
    if (stage.objective != StageObjective::distill)
        throw ConfigError("run_distillation: stage objective is not distill");
    student_cfg.validate();
    teacher.config.validate();
    const TowerConfig& tcfg = teacher.config.vision;
    if (student_cfg.n_patches() != tcfg.n_patches() ||
        student_cfg.input_resolution != tcfg.input_resolution)
        throw ConfigError("run_distillation: student patch grid " +
                          std::to_string(student_cfg.n_patches()) + "@" +
                          std::to_string(student_cfg.input_resolution) +
                          "px does not match the teacher's");
    const std::int64_t ws = student_cfg.width, wt = tcfg.width;
    if (!use_align_head && ws != wt)
        throw ConfigError("run_distillation: feature dims " + std::to_string(ws) + " vs " +
                          std::to_string(wt) + " are incompatible without the alignment head");

    TowerWeights student = student_init ? *student_init
                                        : build_tower(student_cfg, Rng::mix(seed, 0x696e6974));
    validate_tower_weights(student_cfg, student, "student");

    // alignment head, identity at init when widths already agree
    Tensor align({ws, wt});
    {
        auto& v = align.mutable_values();
        if (ws == wt) {
            for (std::int64_t i = 0; i < ws; ++i) v[static_cast<size_t>(i * wt + i)] = 1.0;
        } else {
            Rng rng(Rng::mix(seed, 0x616c6967));
            const double std_dev = std::sqrt(2.0 / static_cast<double>(ws + wt));
            for (auto& x : v) x = rng.normal(0.0, std_dev);
        }
    }
    TowerWeights align_map;
    align_map.emplace("head.weight", align);

    std::vector<ParamGroup> groups = build_tower_groups(
        student, stage.optim.vision_layer_decay, stage.optim.vision_peak_lr, "student");
    ParamGroup align_group;
    align_group.tower = "align";
    align_group.names = {"head.weight"};
    align_group.layer_index = 0;
    align_group.top_index = 0;  // undecayed
    align_group.decay_rate = 1.0;
    align_group.base_peak_lr = stage.optim.vision_peak_lr;
    groups.push_back(align_group);

    const std::int64_t steps = stage.steps();
    const std::int64_t warmup = stage.effective_warmup();
    const std::int64_t resolution =
        stage.resolution > 0 ? stage.resolution : student_cfg.input_resolution;
    if (resolution != student_cfg.input_resolution)
        throw ConfigError("run_distillation: stage resolution differs from the student tower");

    std::vector<std::int64_t> patch_rows(static_cast<size_t>(tcfg.n_patches()));
    for (std::int64_t i = 0; i < tcfg.n_patches(); ++i) patch_rows[static_cast<size_t>(i)] = i + 1;

    LambState state;
    Rng data_rng(Rng::mix(seed, 0x64617461));
    Rng aug_rng(Rng::mix(seed, 0x61756721));
    StageResult stats;
    for (std::int64_t step = 0; step < steps; ++step) {
        const auto picks = draw_batch(corpus, stage, data_rng);
        Tensor images = assemble_images(picks, resolution, stage.augment, aug_rng);

        // frozen teacher: plain eager forward, final-norm patch tokens
        Tensor teacher_feats =
            select_tokens(vision_forward(teacher.vision, tcfg, images).tokens, patch_rows);

        Tape tape;
        TowerWeights watched = watch_tower(tape, student);
        TowerWeights walign = watch_tower(tape, align_map);
        Tensor tokens = vision_forward(watched, student_cfg, images).tokens;
        Tensor student_feats = linear_matmul(select_tokens(tokens, patch_rows),
                                             walign.at("head.weight"));
        PatchMask mask = sample_patch_mask(tcfg.n_patches(), stage.mask_ratio,
                                           Rng::mix(seed, 0x6d61736bull + static_cast<std::uint64_t>(step)));
        Tensor loss = distillation_loss(student_feats, teacher_feats, mask);
        tape.backward(loss);

        std::map<std::string, TowerWeights> grads;
        grads.emplace("student", collect_grads(tape, watched));
        grads.emplace("align", collect_grads(tape, walign));
        NamedParams params;
        params.towers["student"] = &student;
        params.towers["align"] = &align_map;
        apply_grouped_lamb(groups, params, grads, state, stage.optim.lamb, warmup, steps);

        ScheduleSpec head{stage.optim.vision_peak_lr, warmup, steps};
        stats.trace.push_back(TraceEntry{step, cosine_lr(std::min(state.step, steps), head),
                                         loss.item(), 0.0});
    }
    stats.steps_run = steps;
    stats.final_loss = tail_mean_loss(stats.trace);
    stats.visible_patches = tcfg.n_patches();
    stats.optimizer = std::move(state);
    return DistillResult{std::move(student), std::move(stats)};
}

// ---------------------------------------------------------------------------
// contrastive stage
// ---------------------------------------------------------------------------

StageResult run_clip_stage(ClipModel& model, const Corpus& corpus, const TrainStage& stage,
                           std::uint64_t seed) {
    stage.validate();
    if (stage.objective != StageObjective::contrastive)
        throw ConfigError("run_clip_stage: stage objective is not contrastive");
    model.config.validate();
    validate_tower_weights(model.config.vision, model.vision, "vision");
    validate_tower_weights(model.config.text, model.text, "text");
    const TowerConfig& vcfg = model.config.vision;
    const TowerConfig& tcfg = model.config.text;
    const std::int64_t resolution =
        stage.resolution > 0 ? stage.resolution : vcfg.input_resolution;
    if (resolution != vcfg.input_resolution)
        throw ConfigError("run_clip_stage: stage resolution differs from the vision tower");

    std::vector<ParamGroup> groups = build_param_groups(model.vision, model.text, stage.optim);

    // learnable logit scale (ablation switch); initialized at 1/tau
    TowerWeights scale_map;
    if (model.config.temperature_learnable) {
        scale_map.emplace("logit_scale", Tensor::scalar(1.0 / model.config.temperature));
        ParamGroup g;
        g.tower = "scale";
        g.names = {"logit_scale"};
        g.layer_index = 0;
        g.top_index = 0;
        g.decay_rate = 1.0;
        g.base_peak_lr = stage.optim.vision_peak_lr;
        groups.push_back(g);
    }

    const std::int64_t steps = stage.steps();
    const std::int64_t warmup = stage.effective_warmup();
    LambState state;
    Rng data_rng(Rng::mix(seed, 0x64617461));
    Rng aug_rng(Rng::mix(seed, 0x61756721));
    Rng frame_rng(Rng::mix(seed, 0x6672616d));
    StageResult stats;
    stats.visible_patches = vcfg.n_patches();

    for (std::int64_t step = 0; step < steps; ++step) {
        const auto picks = draw_batch(corpus, stage, data_rng);
        Tensor images = assemble_images(picks, resolution, stage.augment, aug_rng);
        const auto rows = assemble_tokens(picks, corpus.vocab, tcfg.context_length);

        PatchMask mask;
        const bool use_mask = stage.patch_dropout > 0.0;
        if (use_mask) {
            mask = sample_patch_mask(vcfg.n_patches(), stage.patch_dropout,
                                     Rng::mix(seed, 0x6d61736bull + static_cast<std::uint64_t>(step)));
            stats.visible_patches = mask.kept_count();
        }

        Tape tape;
        TowerWeights wv = watch_tower(tape, model.vision);
        TowerWeights wt = watch_tower(tape, model.text);
        TowerWeights wscale =
            model.config.temperature_learnable ? watch_tower(tape, scale_map) : TowerWeights{};

        Tensor img_emb;
        if (stage.frames > 0) {
            // frame-stack samples: mean of per-frame embeddings
            const std::int64_t b = static_cast<std::int64_t>(picks.size());
            std::vector<double> all;
            all.reserve(static_cast<size_t>(b * stage.frames * 3 * resolution * resolution));
            const std::int64_t per = images.size() / b;
            for (std::int64_t i = 0; i < b; ++i) {
                std::vector<double> one(images.values().begin() + i * per,
                                        images.values().begin() + (i + 1) * per);
                Tensor stack = make_frame_stack(Tensor({3, resolution, resolution}, std::move(one)),
                                                stage.frames, frame_rng);
                all.insert(all.end(), stack.values().begin(), stack.values().end());
            }
            Tensor flat = encode_image(
                wv, vcfg,
                Tensor({b * stage.frames, 3, resolution, resolution}, std::move(all)),
                use_mask ? &mask.keep : nullptr);
            Tensor grouped = reshape(flat, {b, stage.frames, vcfg.projection_dim});
            Tensor acc = select_tokens(grouped, {0});
            for (std::int64_t f = 1; f < stage.frames; ++f)
                acc = add(acc, select_tokens(grouped, {f}));
            img_emb = reshape(affine(acc, 1.0 / static_cast<double>(stage.frames), 0.0),
                              {b, vcfg.projection_dim});
        } else {
            img_emb = encode_image(wv, vcfg, images, use_mask ? &mask.keep : nullptr);
        }
        Tensor txt_emb = encode_text(wt, tcfg, rows, Vocab::kEnd);

        ContrastiveResult res =
            model.config.temperature_learnable
                ? contrastive_loss_scaled(img_emb, txt_emb, wscale.at("logit_scale"))
                : contrastive_loss({img_emb, txt_emb, model.config.temperature});
        tape.backward(res.loss);

        std::map<std::string, TowerWeights> grads;
        grads.emplace("vision", collect_grads(tape, wv));
        grads.emplace("text", collect_grads(tape, wt));
        if (model.config.temperature_learnable)
            grads.emplace("scale", collect_grads(tape, wscale));
        NamedParams params;
        params.towers["vision"] = &model.vision;
        params.towers["text"] = &model.text;
        if (model.config.temperature_learnable) params.towers["scale"] = &scale_map;
        apply_grouped_lamb(groups, params, grads, state, stage.optim.lamb, warmup, steps);

        ScheduleSpec head{stage.optim.vision_peak_lr, warmup, steps};
        stats.trace.push_back(TraceEntry{step, cosine_lr(std::min(state.step, steps), head),
                                         res.loss.item(), in_batch_diag_top1(res.logits)});
    }
    if (model.config.temperature_learnable)
        model.config.temperature = 1.0 / scale_map.at("logit_scale").values()[0];
    stats.steps_run = steps;
    stats.final_loss = tail_mean_loss(stats.trace);
    stats.optimizer = std::move(state);
    return stats;
}

// ---------------------------------------------------------------------------
// plan parsing
// ---------------------------------------------------------------------------

namespace {

TrainStage stage_from_kv(const std::string& prefix, const KeyValueConfig& kv,
                         StageObjective objective) {
    TrainStage s;
    s.objective = objective;
    s.samples_to_see = kv.get_int(prefix + "samples");
    s.batch_size = kv.get_int(prefix + "batch", 32);
    s.patch_dropout = kv.get_double(prefix + "patch_dropout", 0.0);
    s.mask_ratio = kv.get_double(prefix + "mask_ratio", 0.5);
    s.warmup_steps = kv.get_int(prefix + "warmup", -1);
    s.augment = kv.get_bool(prefix + "augment", true);
    s.resolution = kv.get_int(prefix + "resolution", 0);
    s.frames = kv.get_int(prefix + "frames", 0);
    s.optim.vision_peak_lr = kv.get_double(prefix + "vision_peak_lr", 4e-4);
    s.optim.text_peak_lr = kv.get_double(prefix + "text_peak_lr", 4e-5);
    s.optim.vision_layer_decay = kv.get_double(prefix + "vision_layer_decay", 0.9);
    s.optim.text_layer_decay = kv.get_double(prefix + "text_layer_decay", 0.75);
    const std::string mix = kv.get_string(prefix + "mix", "train");
    s.data_mix.clear();
    std::istringstream ms(mix);
    std::string item;
    while (std::getline(ms, item, ',')) {
        const size_t colon = item.find(':');
        if (colon == std::string::npos)
            s.data_mix[item] = 1.0;
        else
            s.data_mix[item.substr(0, colon)] = std::stod(item.substr(colon + 1));
    }
    s.validate();
    return s;
}

}  // namespace

CyclePlan CyclePlan::load(const std::string& path) {
    return from_kv(KeyValueConfig::parse_file(path));
}

CyclePlan CyclePlan::from_kv(const KeyValueConfig& kv) {
    CyclePlan plan;
    plan.seed = static_cast<std::uint64_t>(kv.get_int("seed", 1));
    plan.corpus_dir = kv.get_string("corpus");
    plan.out_dir = kv.get_string("out", "");
    plan.seed_checkpoint = kv.get_string("seed.checkpoint", "");
    if (plan.seed_checkpoint.empty()) {
        plan.seed_config.vision = tower_from_kv("seed.vision.", kv, TowerKind::vision);
        plan.seed_config.text = tower_from_kv("seed.text.", kv, TowerKind::text);
        plan.seed_config.temperature = kv.get_double("seed.temperature", 0.01);
        plan.seed_config.temperature_learnable = kv.get_bool("seed.temperature_learnable", false);
        plan.seed_config.validate();
        plan.seed_stage = stage_from_kv("seed.stage.", kv, StageObjective::contrastive);
    }
    const std::int64_t generations = kv.get_int("generations");
    if (generations < 1) throw ConfigError("cycle plan: generations must be >= 1");
    for (std::int64_t g = 0; g < generations; ++g) {
        const std::string gp = "gen." + std::to_string(g) + ".";
        GenerationPlan gen;
        gen.name = kv.get_string(gp + "name", "gen" + std::to_string(g));
        gen.student = tower_from_kv(gp + "student.", kv, TowerKind::vision);
        gen.distill = stage_from_kv(gp + "distill.", kv, StageObjective::distill);
        if (kv.has(gp + "clip.stage.0.samples")) {
            for (std::int64_t s = 0;; ++s) {
                const std::string sp = gp + "clip.stage." + std::to_string(s) + ".";
                if (!kv.has(sp + "samples")) break;
                gen.clip_stages.push_back(stage_from_kv(sp, kv, StageObjective::contrastive));
            }
        } else {
            // default curriculum: 90% of samples at 0.5 patch dropout, then a
            // 10% cool-down without dropout
            TrainStage base = stage_from_kv(gp + "clip.", kv, StageObjective::contrastive);
            TrainStage main = base;
            main.samples_to_see = std::max<std::int64_t>(base.batch_size,
                                                         base.samples_to_see * 9 / 10);
            main.patch_dropout = 0.5;
            TrainStage cooldown = base;
            cooldown.samples_to_see =
                std::max<std::int64_t>(base.batch_size, base.samples_to_see / 10);
            cooldown.patch_dropout = 0.0;
            gen.clip_stages = {main, cooldown};
        }
        plan.generations.push_back(std::move(gen));
    }
    kv.require_all_consumed();
    return plan;
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

void save_clip_checkpoint(const std::string& path, const ClipModel& model,
                          const KeyValueConfig& metadata) {
    Checkpoint ckpt;
    clip_to_kv(model.config, ckpt.config);
    for (const auto& [key, value] : metadata.entries()) ckpt.config.set("meta." + key, value);
    for (const auto& [name, t] : model.vision) ckpt.tensors.emplace("vision." + name, t);
    for (const auto& [name, t] : model.text) ckpt.tensors.emplace("text." + name, t);
    save_checkpoint(path, ckpt);
}

ClipModel load_clip_checkpoint(const std::string& path) {
    Checkpoint ckpt = load_checkpoint(path);
    ClipModel model;
    model.config = clip_from_kv(ckpt.config);
    for (const auto& [name, t] : ckpt.tensors) {
        if (name.rfind("vision.", 0) == 0)
            model.vision.emplace(name.substr(7), t);
        else if (name.rfind("text.", 0) == 0)
            model.text.emplace(name.substr(5), t);
        else if (name.rfind("opt.", 0) != 0)
            throw FormatError("clip checkpoint: unexpected tensor '" + name + "'");
    }
    validate_tower_weights(model.config.vision, model.vision, "vision");
    validate_tower_weights(model.config.text, model.text, "text");
    return model;
}

// ---------------------------------------------------------------------------
// cycle
// ---------------------------------------------------------------------------

EvalReport evaluate_generation(const ClipModel& model, const Corpus& corpus,
                               std::uint64_t seed) {
    EvalManifest manifest;
    manifest.corpus_dir = "";
    BenchmarkEntry cls;
    cls.name = "shapes-test";
    cls.task = "classification";
    cls.transform_best_of_two = true;
    cls.split = "test";
    manifest.benchmarks.push_back(cls);
    BenchmarkEntry ret;
    ret.name = "shapes-retrieval";
    ret.task = "retrieval";
    ret.metric = "mr";
    ret.transform = TransformMode::direct_resize;
    ret.split = "test";
    manifest.benchmarks.push_back(ret);
    return run_eval(model.config, model.vision, model.text, corpus, manifest, seed);
}

namespace {

std::string hash_hex(std::uint64_t h) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace

std::string LineageRecord::to_kv_text() const {
    KeyValueConfig kv;
    kv.set_int("generations", static_cast<std::int64_t>(generations.size()));
    for (size_t i = 0; i < generations.size(); ++i) {
        const auto& g = generations[i];
        const std::string p = "gen." + std::to_string(i) + ".";
        kv.set(p + "name", g.name);
        kv.set_int(p + "vision_params", g.vision_params);
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.17g", g.forward_gflops);
        kv.set(p + "forward_gflops", buf);
        std::snprintf(buf, sizeof(buf), "%.17g", g.distill_final_loss);
        kv.set(p + "distill_final_loss", buf);
        std::snprintf(buf, sizeof(buf), "%.17g", g.clip_final_loss);
        kv.set(p + "clip_final_loss", buf);
        std::snprintf(buf, sizeof(buf), "%.17g", g.zs_top1);
        kv.set(p + "zs_top1", buf);
        std::snprintf(buf, sizeof(buf), "%.17g", g.zs_top5);
        kv.set(p + "zs_top5", buf);
        std::snprintf(buf, sizeof(buf), "%.17g", g.retrieval_mr);
        kv.set(p + "retrieval_mr", buf);
        kv.set(p + "checkpoint_hash", hash_hex(g.checkpoint_hash));
        kv.set(p + "teacher_hash", hash_hex(g.teacher_hash));
        kv.set_int(p + "seed", static_cast<std::int64_t>(g.seed));
    }
    return kv.to_text();
}

std::string LineageRecord::to_csv() const {
    std::string out =
        "generation,name,vision_params,forward_gflops,zs_top1,zs_top5,retrieval_mr\n";
    char buf[256];
    for (size_t i = 0; i < generations.size(); ++i) {
        const auto& g = generations[i];
        std::snprintf(buf, sizeof(buf), "%zu,%s,%lld,%.17g,%.17g,%.17g,%.17g\n", i,
                      g.name.c_str(), static_cast<long long>(g.vision_params), g.forward_gflops,
                      g.zs_top1, g.zs_top5, g.retrieval_mr);
        out += buf;
    }
    return out;
}

LineageRecord run_weak_to_strong_cycle(const CyclePlan& plan) {
    if (plan.out_dir.empty()) throw ConfigError("cycle plan: missing out directory");
    Corpus corpus = load_corpus(plan.corpus_dir);
    std::filesystem::create_directories(plan.out_dir);

    ClipModel teacher;
    if (!plan.seed_checkpoint.empty()) {
        teacher = load_clip_checkpoint(plan.seed_checkpoint);
    } else {
        teacher.config = plan.seed_config;
        teacher.vision = build_tower(teacher.config.vision, Rng::mix(plan.seed, 0x73656564));
        teacher.text = build_tower(teacher.config.text, Rng::mix(plan.seed, 0x74657874));
        run_clip_stage(teacher, corpus, plan.seed_stage, Rng::mix(plan.seed, 0x73746167));
    }

    // monotone growth gate before any generation runs
    std::int64_t prev = count_parameters(teacher.config.vision);
    for (const auto& gen : plan.generations) {
        const std::int64_t count = count_parameters(gen.student);
        if (count <= prev)
            throw ContractError("cycle plan: student '" + gen.name + "' has " +
                                std::to_string(count) +
                                " vision parameters, not strictly above the teacher's " +
                                std::to_string(prev));
        prev = count;
    }

    const std::string seed_path = plan.out_dir + "/seed.ckpt";
    KeyValueConfig seed_meta;
    seed_meta.set("role", "seed-teacher");
    seed_meta.set_int("plan_seed", static_cast<std::int64_t>(plan.seed));
    save_clip_checkpoint(seed_path, teacher, seed_meta);
    std::uint64_t teacher_hash = file_hash(seed_path);

    LineageRecord lineage;
    auto persist = [&] {
        write_text_file(plan.out_dir + "/lineage.txt", lineage.to_kv_text());
        write_text_file(plan.out_dir + "/lineage.csv", lineage.to_csv());
    };

    try {
        for (size_t gi = 0; gi < plan.generations.size(); ++gi) {
            const GenerationPlan& gen = plan.generations[gi];
            const std::string gen_dir = plan.out_dir + "/" + gen.name;
            std::filesystem::create_directories(gen_dir);
            const std::uint64_t gen_seed =
                Rng::mix(plan.seed, 0x67656e00ull + static_cast<std::uint64_t>(gi));

            DistillResult distilled = run_distillation(teacher, gen.student, corpus, gen.distill,
                                                       Rng::mix(gen_seed, 0x64697374));
            {
                Checkpoint ckpt;
                tower_to_kv("vision.", gen.student, ckpt.config);
                ckpt.config.set("meta.role", "distilled-student");
                for (const auto& [name, t] : distilled.student)
                    ckpt.tensors.emplace("vision." + name, t);
                save_checkpoint(gen_dir + "/distilled.ckpt", ckpt);
            }

            ClipModel next;
            next.config.vision = gen.student;
            next.config.text = teacher.config.text;
            next.config.temperature = teacher.config.temperature;
            next.config.temperature_learnable = teacher.config.temperature_learnable;
            next.config.validate();
            next.vision = std::move(distilled.student);
            next.text = teacher.text;  // text tower carried over, size fixed

            double clip_final = 0.0;
            for (size_t si = 0; si < gen.clip_stages.size(); ++si) {
                StageResult res = run_clip_stage(
                    next, corpus, gen.clip_stages[si],
                    Rng::mix(gen_seed, 0x636c6970ull + static_cast<std::uint64_t>(si)));
                clip_final = res.final_loss;
            }

            EvalReport report = evaluate_generation(next, corpus, plan.seed);

            const std::string ckpt_path = gen_dir + "/clip.ckpt";
            KeyValueConfig meta;
            meta.set("role", "generation");
            meta.set("name", gen.name);
            meta.set_int("plan_seed", static_cast<std::int64_t>(plan.seed));
            save_clip_checkpoint(ckpt_path, next, meta);
            write_text_file(gen_dir + "/report.txt", report.to_kv_text());
            write_text_file(gen_dir + "/report.csv", report.to_csv());

            GenerationRecord record;
            record.name = gen.name;
            record.vision_params = count_parameters(gen.student);
            record.forward_gflops = forward_gflops(gen.student);
            record.distill_final_loss = distilled.stats.final_loss;
            record.clip_final_loss = clip_final;
            record.zs_top1 = report.value("shapes-test", "top1");
            record.zs_top5 = report.value("shapes-test", "top5");
            record.retrieval_mr = report.value("shapes-retrieval", "mr");
            record.checkpoint_hash = file_hash(ckpt_path);
            record.teacher_hash = teacher_hash;
            record.seed = gen_seed;
            lineage.generations.push_back(record);
            persist();

            teacher = std::move(next);
            teacher_hash = record.checkpoint_hash;
        }
    } catch (...) {
        persist();
        throw;
    }
    persist();
    return lineage;
}

}  // namespace wsclip
