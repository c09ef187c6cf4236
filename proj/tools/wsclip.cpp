// wsclip: desk-scale weak-to-strong CLIP workbench.
//
// Subcommands: gen-data, distill, train-clip, cycle, eval, count, report.
// Contract failures print one machine-parsable line, "error[<category>]: ...",
// and exit 1; usage problems exit 2.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <iostream>

#include "wsclip/checkpoint.hpp"
#include "wsclip/config.hpp"
#include "wsclip/corpus.hpp"
#include "wsclip/errors.hpp"
#include "wsclip/eval.hpp"
#include "wsclip/models.hpp"
#include "wsclip/threading.hpp"
#include "wsclip/train.hpp"

using namespace wsclip;

namespace {

struct GlobalOpts {
    std::int64_t seed = 1;
    int threads = 1;
    std::string config;
    std::string out;
};

void dump_defaults() {
    KeyValueConfig kv;
    kv.set_double("defaults.vision_peak_lr", 4e-4);
    kv.set_double("defaults.text_peak_lr", 4e-5);
    kv.set_double("defaults.vision_layer_decay", 0.9);
    kv.set_double("defaults.text_layer_decay", 0.75);
    kv.set_double("defaults.temperature", 0.01);
    kv.set_double("defaults.lamb_beta1", 0.9);
    kv.set_double("defaults.lamb_beta2", 0.95);
    kv.set_double("defaults.lamb_epsilon", 1e-6);
    kv.set_double("defaults.weight_decay", 0);
    kv.set_int("defaults.warmup_steps", 2000);
    kv.set_double("defaults.crop_scale_lo", 0.9);
    kv.set_double("defaults.crop_scale_hi", 1);
    std::fputs(kv.to_text().c_str(), stdout);
}

void dump_stage(const std::string& prefix, const TrainStage& stage) {
    KeyValueConfig kv;
    kv.set(prefix + ".objective",
           stage.objective == StageObjective::distill ? "distill" : "contrastive");
    kv.set_int(prefix + ".samples", stage.samples_to_see);
    kv.set_int(prefix + ".batch", stage.batch_size);
    kv.set_int(prefix + ".steps", stage.steps());
    kv.set_int(prefix + ".warmup", stage.effective_warmup());
    kv.set_double(prefix + ".patch_dropout", stage.patch_dropout);
    kv.set_double(prefix + ".mask_ratio", stage.mask_ratio);
    kv.set_bool(prefix + ".augment", stage.augment);
    kv.set_double(prefix + ".vision_peak_lr", stage.optim.vision_peak_lr);
    kv.set_double(prefix + ".text_peak_lr", stage.optim.text_peak_lr);
    kv.set_double(prefix + ".vision_layer_decay", stage.optim.vision_layer_decay);
    kv.set_double(prefix + ".text_layer_decay", stage.optim.text_layer_decay);
    std::fputs(kv.to_text().c_str(), stdout);
}

void dump_header(const std::string& subcommand, const GlobalOpts& g) {
    std::printf("# wsclip %s: effective configuration\n", subcommand.c_str());
    KeyValueConfig kv;
    kv.set_int("run.seed", g.seed);
    kv.set_int("run.threads", g.threads);
    std::fputs(kv.to_text().c_str(), stdout);
    dump_defaults();
}

KeyValueConfig opt_state_meta(const LambState& state) {
    KeyValueConfig kv;
    kv.set_int("opt.step", state.step);
    return kv;
}

void add_opt_tensors(Checkpoint& ckpt, const LambState& state) {
    for (const auto& [name, slot] : state.slots) {
        ckpt.tensors.emplace("opt.m." + name,
                             Tensor({static_cast<std::int64_t>(slot.m.size())}, slot.m));
        ckpt.tensors.emplace("opt.v." + name,
                             Tensor({static_cast<std::int64_t>(slot.v.size())}, slot.v));
    }
    ckpt.tensors.emplace("opt.step", Tensor::scalar(static_cast<double>(state.step)));
}

int cmd_gen_data(const GlobalOpts& g) {
    if (g.out.empty()) throw ConfigError("gen-data: --out directory is required");
    SyntheticSpec spec;
    if (!g.config.empty()) {
        KeyValueConfig kv = KeyValueConfig::parse_file(g.config);
        spec.image_size = kv.get_int("image_size", spec.image_size);
        spec.classes = kv.get_int("classes", spec.classes);
        spec.colors = kv.get_int("colors", spec.colors);
        spec.train_samples = kv.get_int("train_samples", spec.train_samples);
        spec.val_samples = kv.get_int("val_samples", spec.val_samples);
        spec.test_samples = kv.get_int("test_samples", spec.test_samples);
        spec.hard_test_samples = kv.get_int("hard_test_samples", spec.hard_test_samples);
        spec.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<std::int64_t>(g.seed)));
        kv.require_all_consumed();
    } else {
        spec.seed = static_cast<std::uint64_t>(g.seed);
    }
    dump_header("gen-data", g);
    KeyValueConfig kv;
    kv.set_int("corpus.image_size", spec.image_size);
    kv.set_int("corpus.classes", spec.classes);
    kv.set_int("corpus.train_samples", spec.train_samples);
    std::fputs(kv.to_text().c_str(), stdout);

    Corpus corpus = generate_synthetic_corpus(spec);
    save_corpus(g.out, corpus);
    std::printf("wrote corpus to %s (train %lld, val %lld, test %lld, test_hard %lld)\n",
                g.out.c_str(), static_cast<long long>(spec.train_samples),
                static_cast<long long>(spec.val_samples),
                static_cast<long long>(spec.test_samples),
                static_cast<long long>(spec.hard_test_samples));
    return 0;
}

int cmd_count(const GlobalOpts& g, const std::string& preset) {
    TowerConfig cfg;
    if (!preset.empty()) {
        if (preset == "reference-text") {
            cfg.kind = TowerKind::text;
            cfg.layers = 32;
            cfg.width = 1280;
            cfg.heads = 20;
            cfg.vocab_size = 49408;
            cfg.context_length = 77;
            cfg.projection_dim = 1024;
            cfg.norm_kind = NormKind::layer;
        } else {
            throw ConfigError("count: unknown preset '" + preset +
                              "' (available: reference-text)");
        }
    } else {
        if (g.config.empty()) throw ConfigError("count: --config or --preset is required");
        KeyValueConfig kv = KeyValueConfig::parse_file(g.config);
        const std::string kind = kv.get_string("kind");
        cfg = tower_from_kv("", kv,
                            kind == "vision" ? TowerKind::vision : TowerKind::text);
        kv.require_all_consumed();
    }
    dump_header("count", g);
    std::printf("tower_kind = %s\n", to_string(cfg.kind));
    std::printf("parameters = %lld\n", static_cast<long long>(count_parameters(cfg)));
    std::printf("forward_gflops = %.6f\n", forward_gflops(cfg));
    return 0;
}

int cmd_distill(const GlobalOpts& g, const std::string& teacher_path,
                const std::string& corpus_dir) {
    if (g.config.empty()) throw ConfigError("distill: --config is required");
    if (g.out.empty()) throw ConfigError("distill: --out checkpoint path is required");
    KeyValueConfig kv = KeyValueConfig::parse_file(g.config);
    TowerConfig student = tower_from_kv("student.", kv, TowerKind::vision);
    TrainStage stage;
    stage.objective = StageObjective::distill;
    stage.samples_to_see = kv.get_int("stage.samples");
    stage.batch_size = kv.get_int("stage.batch", 32);
    stage.mask_ratio = kv.get_double("stage.mask_ratio", 0.5);
    stage.warmup_steps = kv.get_int("stage.warmup", -1);
    stage.augment = kv.get_bool("stage.augment", true);
    stage.optim.vision_peak_lr = kv.get_double("stage.vision_peak_lr", 4e-4);
    stage.optim.text_peak_lr = kv.get_double("stage.text_peak_lr", 4e-5);
    stage.optim.vision_layer_decay = kv.get_double("stage.vision_layer_decay", 0.9);
    stage.optim.text_layer_decay = kv.get_double("stage.text_layer_decay", 0.75);
    kv.require_all_consumed();

    dump_header("distill", g);
    dump_stage("stage", stage);

    ClipModel teacher = load_clip_checkpoint(teacher_path);
    Corpus corpus = load_corpus(corpus_dir);
    DistillResult res = run_distillation(teacher, student, corpus, stage,
                                         static_cast<std::uint64_t>(g.seed));

    Checkpoint ckpt;
    tower_to_kv("vision.", student, ckpt.config);
    ckpt.config.set("meta.role", "distilled-student");
    ckpt.config.set_int("meta.seed", g.seed);
    for (const auto& [name, t] : res.student) ckpt.tensors.emplace("vision." + name, t);
    add_opt_tensors(ckpt, res.stats.optimizer);
    save_checkpoint(g.out, ckpt);
    std::printf("distilled %lld steps, final loss %.6f -> %s\n",
                static_cast<long long>(res.stats.steps_run), res.stats.final_loss,
                g.out.c_str());
    return 0;
}

int cmd_train_clip(const GlobalOpts& g, const std::string& init_path,
                   const std::string& corpus_dir) {
    if (g.config.empty()) throw ConfigError("train-clip: --config is required");
    if (g.out.empty()) throw ConfigError("train-clip: --out checkpoint path is required");
    KeyValueConfig kv = KeyValueConfig::parse_file(g.config);

    ClipModel model;
    if (!init_path.empty()) {
        model = load_clip_checkpoint(init_path);
    } else {
        model.config.vision = tower_from_kv("model.vision.", kv, TowerKind::vision);
        model.config.text = tower_from_kv("model.text.", kv, TowerKind::text);
        model.config.temperature = kv.get_double("model.temperature", 0.01);
        model.config.temperature_learnable = kv.get_bool("model.temperature_learnable", false);
        model.config.validate();
        model.vision = build_tower(model.config.vision,
                                   Rng::mix(static_cast<std::uint64_t>(g.seed), 0x76));
        model.text =
            build_tower(model.config.text, Rng::mix(static_cast<std::uint64_t>(g.seed), 0x74));
    }

    TrainStage stage;
    stage.objective = StageObjective::contrastive;
    stage.samples_to_see = kv.get_int("stage.samples");
    stage.batch_size = kv.get_int("stage.batch", 32);
    stage.patch_dropout = kv.get_double("stage.patch_dropout", 0.0);
    stage.warmup_steps = kv.get_int("stage.warmup", -1);
    stage.augment = kv.get_bool("stage.augment", true);
    stage.frames = kv.get_int("stage.frames", 0);
    stage.optim.vision_peak_lr = kv.get_double("stage.vision_peak_lr", 4e-4);
    stage.optim.text_peak_lr = kv.get_double("stage.text_peak_lr", 4e-5);
    stage.optim.vision_layer_decay = kv.get_double("stage.vision_layer_decay", 0.9);
    stage.optim.text_layer_decay = kv.get_double("stage.text_layer_decay", 0.75);
    kv.require_all_consumed();

    dump_header("train-clip", g);
    dump_stage("stage", stage);

    Corpus corpus = load_corpus(corpus_dir);
    StageResult res = run_clip_stage(model, corpus, stage, static_cast<std::uint64_t>(g.seed));

    Checkpoint ckpt;
    clip_to_kv(model.config, ckpt.config);
    ckpt.config.set("meta.role", "clip");
    ckpt.config.set_int("meta.seed", g.seed);
    for (const auto& [name, t] : model.vision) ckpt.tensors.emplace("vision." + name, t);
    for (const auto& [name, t] : model.text) ckpt.tensors.emplace("text." + name, t);
    add_opt_tensors(ckpt, res.optimizer);
    save_checkpoint(g.out, ckpt);
    std::printf("trained %lld steps, final loss %.6f, in-batch top1 %.3f -> %s\n",
                static_cast<long long>(res.steps_run), res.final_loss,
                res.trace.empty() ? 0.0 : res.trace.back().in_batch_top1, g.out.c_str());
    return 0;
}

int cmd_cycle(const GlobalOpts& g, bool seed_given) {
    if (g.config.empty()) throw ConfigError("cycle: --config plan file is required");
    CyclePlan plan = CyclePlan::load(g.config);
    if (!g.out.empty()) plan.out_dir = g.out;
    if (seed_given) plan.seed = static_cast<std::uint64_t>(g.seed);

    dump_header("cycle", g);
    KeyValueConfig kv;
    kv.set("cycle.corpus", plan.corpus_dir);
    kv.set("cycle.out", plan.out_dir);
    kv.set_int("cycle.generations", static_cast<std::int64_t>(plan.generations.size()));
    kv.set_int("cycle.seed", static_cast<std::int64_t>(plan.seed));
    std::fputs(kv.to_text().c_str(), stdout);
    if (plan.seed_checkpoint.empty()) dump_stage("seed.stage", plan.seed_stage);
    for (size_t i = 0; i < plan.generations.size(); ++i) {
        dump_stage("gen." + std::to_string(i) + ".distill", plan.generations[i].distill);
        for (size_t s = 0; s < plan.generations[i].clip_stages.size(); ++s)
            dump_stage("gen." + std::to_string(i) + ".clip." + std::to_string(s),
                       plan.generations[i].clip_stages[s]);
    }

    LineageRecord lineage = run_weak_to_strong_cycle(plan);
    for (size_t i = 0; i < lineage.generations.size(); ++i) {
        const auto& rec = lineage.generations[i];
        std::printf("gen %zu (%s): params %lld, zs top1 %.1f%%, retrieval MR %.1f%%\n", i,
                    rec.name.c_str(), static_cast<long long>(rec.vision_params),
                    rec.zs_top1 * 100.0, rec.retrieval_mr * 100.0);
    }
    std::printf("lineage -> %s/lineage.txt\n", plan.out_dir.c_str());
    return 0;
}

int cmd_eval(const GlobalOpts& g, const std::string& ckpt_path, const std::string& corpus_dir,
             const std::string& manifest_path) {
    if (g.out.empty()) throw ConfigError("eval: --out directory is required");
    EvalManifest manifest;
    if (!manifest_path.empty()) {
        manifest = EvalManifest::load(manifest_path);
        if (!corpus_dir.empty()) manifest.corpus_dir = corpus_dir;
    } else {
        if (corpus_dir.empty())
            throw ConfigError("eval: --corpus is required without a manifest");
        manifest = EvalManifest::built_in(corpus_dir);
    }
    if (manifest.corpus_dir.empty())
        throw ConfigError("eval: manifest has no corpus and --corpus was not given");

    dump_header("eval", g);
    KeyValueConfig kv;
    kv.set("eval.checkpoint", ckpt_path);
    kv.set("eval.corpus", manifest.corpus_dir);
    kv.set_int("eval.benchmarks", static_cast<std::int64_t>(manifest.benchmarks.size()));
    std::fputs(kv.to_text().c_str(), stdout);

    ClipModel model = load_clip_checkpoint(ckpt_path);
    Corpus corpus = load_corpus(manifest.corpus_dir);
    EvalReport report = run_eval(model.config, model.vision, model.text, corpus, manifest,
                                 static_cast<std::uint64_t>(g.seed));

    std::filesystem::create_directories(g.out);
    write_text_file(g.out + "/report.txt", report.to_kv_text());
    write_text_file(g.out + "/report.csv", report.to_csv());
    std::fputs(report.presentation_table().c_str(), stdout);
    std::printf("report -> %s/report.txt\n", g.out.c_str());
    return 0;
}

int cmd_report(const GlobalOpts& g, const std::string& lineage_path) {
    KeyValueConfig kv = KeyValueConfig::parse_file(lineage_path);
    const std::int64_t generations = kv.get_int("generations");
    std::string csv = "generation,name,vision_params,forward_gflops,zs_top1,zs_top5,retrieval_mr\n";
    dump_header("report", g);
    std::printf("%-4s %-10s %12s %14s %8s %8s %8s\n", "gen", "name", "params", "gflops", "top1",
                "top5", "MR");
    for (std::int64_t i = 0; i < generations; ++i) {
        const std::string p = "gen." + std::to_string(i) + ".";
        const std::string name = kv.get_string(p + "name");
        const std::int64_t params = kv.get_int(p + "vision_params");
        const double gflops = kv.get_double(p + "forward_gflops");
        const double top1 = kv.get_double(p + "zs_top1");
        const double top5 = kv.get_double(p + "zs_top5");
        const double mr = kv.get_double(p + "retrieval_mr");
        char line[256];
        std::snprintf(line, sizeof(line), "%lld,%s,%lld,%.17g,%.17g,%.17g,%.17g\n",
                      static_cast<long long>(i), name.c_str(), static_cast<long long>(params),
                      gflops, top1, top5, mr);
        csv += line;
        std::printf("%-4lld %-10s %12lld %14.6f %7.1f%% %7.1f%% %7.1f%%\n",
                    static_cast<long long>(i), name.c_str(), static_cast<long long>(params),
                    gflops, top1 * 100.0, top5 * 100.0, mr * 100.0);
    }
    if (!g.out.empty()) {
        write_text_file(g.out, csv);
        std::printf("scaling curve -> %s\n", g.out.c_str());
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"wsclip: desk-scale weak-to-strong CLIP workbench"};
    app.require_subcommand(1);
    app.fallthrough();  // global flags may follow the subcommand

    GlobalOpts g;
    app.add_option("--seed", g.seed, "master random seed")->capture_default_str();
    app.add_option("--threads", g.threads, "worker threads for the heavy kernels")
        ->capture_default_str();
    app.add_option("--config", g.config, "key-value configuration file");
    app.add_option("--out", g.out, "output path (file or directory, per subcommand)");

    auto* gen_data = app.add_subcommand("gen-data", "generate the synthetic shapes corpus");
    auto* distill = app.add_subcommand("distill", "distill a student vision tower");
    std::string teacher_path, corpus_dir, init_path, ckpt_path, manifest_path, lineage_path,
        preset;
    distill->add_option("--teacher", teacher_path, "teacher CLIP checkpoint")->required();
    distill->add_option("--corpus", corpus_dir, "corpus directory")->required();
    auto* train_clip = app.add_subcommand("train-clip", "contrastive CLIP training stage");
    train_clip->add_option("--init", init_path, "initial CLIP checkpoint (random init if absent)");
    train_clip->add_option("--corpus", corpus_dir, "corpus directory")->required();
    auto* cycle = app.add_subcommand("cycle", "run a weak-to-strong cycle plan");
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint against a manifest");
    eval->add_option("--ckpt", ckpt_path, "CLIP checkpoint")->required();
    eval->add_option("--corpus", corpus_dir, "corpus directory");
    eval->add_option("--manifest", manifest_path, "benchmark manifest file");
    auto* count = app.add_subcommand("count", "parameter and GFLOP accounting for a tower");
    count->add_option("--preset", preset, "built-in config (reference-text)");
    auto* report = app.add_subcommand("report", "lineage record to scaling-curve CSV");
    report->add_option("--lineage", lineage_path, "lineage record file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        set_num_threads(g.threads);
        if (gen_data->parsed()) return cmd_gen_data(g);
        if (distill->parsed()) return cmd_distill(g, teacher_path, corpus_dir);
        if (train_clip->parsed()) return cmd_train_clip(g, init_path, corpus_dir);
        if (cycle->parsed()) return cmd_cycle(g, app.count("--seed") > 0);
        if (eval->parsed()) return cmd_eval(g, ckpt_path, corpus_dir, manifest_path);
        if (count->parsed()) return cmd_count(g, preset);
        if (report->parsed()) return cmd_report(g, lineage_path);
    } catch (const ConfigError& e) {
        // malformed configuration is a usage-class failure
        std::fprintf(stderr, "error[%s]: %s\n", error_category(e), e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error[%s]: %s\n", error_category(e), e.what());
        return 1;
    }
    return 2;
}
