// Command-line surface: dataset generation, three-stage training,
// long-horizon inference, drift / lip-sync evaluation, attention and memory
// benchmarks, and a fast self-test battery.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

#include <CLI11.hpp>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "mcdm/harness.hpp"

namespace fs = std::filesystem;
using namespace mcdm;

namespace {

struct CliOptions {
    std::string config_path;
    std::vector<std::string> sets;
    int64_t stage = 0;
    std::string eval_kind;
    std::string bench_kind;
    std::string variant = "full";
    bool packed = false;
};

RunConfig resolve_config(const CliOptions& opt) {
    RunConfig cfg;
    if (!opt.config_path.empty()) cfg = load_config(opt.config_path);
    for (const auto& kv : opt.sets) config_set_kv(cfg, kv);
    validate_config(cfg);
    precision_mode() = cfg.precision == "f64" ? Precision::f64 : Precision::f32;
    return cfg;
}

std::ofstream open_run_log(const RunConfig& cfg, const std::string& command) {
    fs::create_directories(cfg.out_dir);
    std::ofstream log(fs::path(cfg.out_dir) / "run.log", std::ios::app);
    log << "# command: " << command << "\n";
    std::istringstream echo(echo_config(cfg));
    std::string line;
    while (std::getline(echo, line)) log << "# " << line << "\n";
    return log;
}

StepLogger step_logger(std::ofstream& log) {
    auto start = std::chrono::steady_clock::now();
    return [&log, start](int64_t step, double loss) {
        double wall =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        log << step << " " << loss << " " << wall << "\n";
        if (step % 100 == 0) {
            std::cout << "step " << step << " loss " << loss << "\n";
            std::cout.flush();
        }
    };
}

std::vector<ClipBatch> load_clips_resized(const RunConfig& cfg) {
    auto clips = read_dataset(cfg.data_dir);
    if (cfg.resolution == kFrameSize) return clips;
    for (auto& c : clips) {
        auto shrink_stack = [&](const Tensor& frames) {
            std::vector<Tensor> out;
            for (int64_t i = 0; i < frames.dim(0); ++i)
                out.push_back(downsample_to(
                    reshape(slice(frames, 0, i, 1), {frames.dim(1), frames.dim(2)}),
                    cfg.resolution));
            return stack(out);
        };
        c.ref_frame = downsample_to(c.ref_frame, cfg.resolution);
        c.archived_frames = shrink_stack(c.archived_frames);
        c.target_frames = shrink_stack(c.target_frames);
    }
    return clips;
}

int cmd_gen_data(const RunConfig& cfg) {
    auto log = open_run_log(cfg, "gen-data");
    std::vector<ClipBatch> clips;
    for (int64_t i = 0; i < cfg.clips; ++i) {
        Rng rng(Rng::mix(cfg.seed, 0xDA7AULL + static_cast<uint64_t>(i)));
        uint64_t identity = static_cast<uint64_t>(i) % static_cast<uint64_t>(cfg.identities);
        clips.push_back(make_clip(i, identity, cfg.a, cfg.T, rng));
    }
    write_dataset(clips, cfg.data_dir);
    std::cout << "wrote " << clips.size() << " clips to " << cfg.data_dir << "\n";
    log << "# wrote clips = " << clips.size() << "\n";
    return 0;
}

int cmd_train(const RunConfig& cfg0, int64_t stage) {
    RunConfig cfg = cfg0;
    cfg.stage = stage;
    auto log = open_run_log(cfg, "train --stage " + std::to_string(stage));
    auto clips = load_clips_resized(cfg);
    McdmModels models(cfg);

    if (stage == 3) {
        load_stage_checkpoint(models, 1, cfg.ckpt_dir);
        // the prior is not consumed by the stage-3 loss, but inference needs
        // it; require the checkpoint now so a stage-3 model is runnable
        load_stage_checkpoint(models, 2, cfg.ckpt_dir);
    }

    StageStats stats;
    auto logger = step_logger(log);
    if (stage == 1)
        stats = train_stage1(models, clips, logger);
    else if (stage == 2)
        stats = train_stage2(models, clips, logger);
    else
        stats = train_stage3(models, clips, logger);

    if (!stats.freezing_respected())
        throw GradError("stage " + std::to_string(stage) + ": frozen parameter group changed");
    save_stage_checkpoint(models, stage, cfg.ckpt_dir);

    std::ofstream csv(fs::path(cfg.out_dir) / ("stage" + std::to_string(stage) + "_loss.csv"));
    csv << "step,loss\n";
    for (size_t i = 0; i < stats.losses.size(); ++i) csv << i << "," << stats.losses[i] << "\n";

    std::cout << "stage " << stage << " done; frozen-group hash unchanged (" << std::hex
              << stats.frozen_after << std::dec << "); checkpoint at "
              << stage_checkpoint_path(cfg.ckpt_dir, stage) << "\n";
    return 0;
}

McdmModels load_models_for_inference(const RunConfig& cfg) {
    McdmModels models(cfg);
    if (fs::exists(stage_checkpoint_path(cfg.ckpt_dir, 3)))
        load_stage_checkpoint(models, 3, cfg.ckpt_dir);
    else
        load_stage_checkpoint(models, 1, cfg.ckpt_dir);
    load_stage_checkpoint(models, 2, cfg.ckpt_dir);
    return models;
}

int cmd_infer(const RunConfig& cfg, bool packed) {
    auto log = open_run_log(cfg, "infer");
    McdmModels models = load_models_for_inference(cfg);
    EvalWorld w = make_eval_world(cfg.seed, cfg.total_frames);
    Tensor ref = downsample_to(w.ref_frame, cfg.resolution);

    RolloutConfig rc;
    rc.total_frames = cfg.total_frames;
    rc.a = cfg.a;
    rc.alpha = cfg.alpha;
    rc.video_sched = make_schedule(cfg.sample_steps, cfg.beta_start, cfg.beta_end);
    rc.motion_sched = rc.video_sched;
    rc.seed = cfg.seed;
    Tensor frames =
        long_generate(models.den, models.prior, models.arch, ref, w.audio, std::nullopt, rc);

    fs::path dir = fs::path(cfg.out_dir) / "video";
    fs::create_directories(dir);
    std::ofstream manifest(dir / "manifest.txt");
    manifest << "frames=" << cfg.total_frames << " height=" << cfg.resolution
             << " width=" << cfg.resolution << " fps=" << cfg.fps << "\n";
    if (packed) {
        save_tensor((dir / "video.mct").string(), frames);
    } else {
        for (int64_t t = 0; t < cfg.total_frames; ++t) {
            char name[32];
            std::snprintf(name, sizeof(name), "frame_%06lld.mct", static_cast<long long>(t));
            save_tensor((dir / name).string(),
                        reshape(slice(frames, 0, t, 1), {cfg.resolution, cfg.resolution}));
        }
    }
    std::vector<int64_t> idx;
    for (int64_t i = 0; i < 6; ++i)
        idx.push_back(std::min(cfg.total_frames - 1, i * cfg.total_frames / 5));
    write_pgm((dir / "strip.pgm").string(), frame_strip(frames, idx));
    std::cout << "wrote " << (packed ? 1 : cfg.total_frames)
              << " tensor file(s) and strip.pgm to " << dir.string() << "\n";
    return 0;
}

int cmd_eval_drift(const RunConfig& cfg, const std::string& variant_name) {
    auto log = open_run_log(cfg, "eval drift");
    McdmModels models = load_models_for_inference(cfg);
    DriftVariant variant = variant_name == "no-fa"    ? DriftVariant::no_fa
                           : variant_name == "no-mta" ? DriftVariant::no_mta
                                                      : DriftVariant::full;
    DriftResult res = eval_drift(models, cfg.seed, variant, cfg.alpha);

    fs::create_directories(cfg.out_dir);
    std::ofstream csv(fs::path(cfg.out_dir) / ("drift_" + variant_name + ".csv"));
    csv << "frame,ssim\n";
    for (size_t i = 0; i < res.curve.size(); ++i) csv << i << "," << res.curve[i] << "\n";

    std::vector<int64_t> idx;
    for (int64_t i = 0; i < 6; ++i)
        idx.push_back(std::min(cfg.total_frames - 1, i * cfg.total_frames / 5));
    write_pgm((fs::path(cfg.out_dir) / ("drift_" + variant_name + "_strip.pgm")).string(),
              frame_strip(res.frames, idx));

    std::cout << "drift (" << variant_name
              << "): mean final-quarter ssim = " << res.mean_final_quarter << " over "
              << res.curve.size() << " frames\n";
    log << "# drift " << variant_name << " mean_final_quarter " << res.mean_final_quarter << "\n";
    return 0;
}

int cmd_eval_lipsync(const RunConfig& cfg) {
    auto log = open_run_log(cfg, "eval lipsync");
    McdmModels models = load_models_for_inference(cfg);
    LipsyncResult res = eval_lipsync(models, cfg.seed);

    fs::create_directories(cfg.out_dir);
    std::ofstream csv(fs::path(cfg.out_dir) / "lipsync.csv");
    csv << "frame,mouth,envelope\n";
    for (size_t i = 0; i < res.mouth.size(); ++i)
        csv << i << "," << res.mouth[i] << "," << res.envelope[i] << "\n";

    std::cout << "lipsync pearson r = " << res.r << "\n";
    log << "# lipsync r " << res.r << "\n";
    return 0;
}

int cmd_bench_attention(const RunConfig& cfg) {
    auto log = open_run_log(cfg, "bench attention");
    AttentionBench b = bench_attention(cfg.seed);
    std::cout << "r        median_rel_err\n";
    fs::create_directories(cfg.out_dir);
    std::ofstream csv(fs::path(cfg.out_dir) / "bench_attention.csv");
    csv << "r,median_rel_err\n";
    for (const auto& row : b.error_rows) {
        std::printf("%-8lld %.6f\n", static_cast<long long>(row.r), row.median_rel_err);
        csv << row.r << "," << row.median_rel_err << "\n";
    }
    std::cout << "\nL        sdpa_ms      fast_ms\n";
    for (const auto& row : b.timing_rows)
        std::printf("%-8lld %-12.3f %.3f\n", static_cast<long long>(row.L), row.sdpa_ms,
                    row.fast_ms);
    return 0;
}

int cmd_bench_memory(const RunConfig& cfg) {
    auto log = open_run_log(cfg, "bench memory");
    auto rows = bench_memory(cfg.seed);
    std::cout << "frames   memory_peak_bytes   full_history_peak_bytes\n";
    fs::create_directories(cfg.out_dir);
    std::ofstream csv(fs::path(cfg.out_dir) / "bench_memory.csv");
    csv << "frames,memory_peak_bytes,full_history_peak_bytes\n";
    for (const auto& row : rows) {
        std::printf("%-8lld %-19lld %lld\n", static_cast<long long>(row.frames),
                    static_cast<long long>(row.memory_peak_bytes),
                    static_cast<long long>(row.full_history_peak_bytes));
        csv << row.frames << "," << row.memory_peak_bytes << "," << row.full_history_peak_bytes
            << "\n";
    }
    return 0;
}

int cmd_selftest() {
    int failures = 0;
    auto check = [&](const char* name, bool ok) {
        std::cout << (ok ? "ok   " : "FAIL ") << name << "\n";
        if (!ok) ++failures;
    };

    {
        Rng a(7), b(7);
        Tensor ta = rng_tensor(a, {8}, Dist::normal);
        Tensor tb = rng_tensor(b, {8}, Dist::normal);
        bool ok = true;
        for (int i = 0; i < 8; ++i)
            ok &= ta.data()[static_cast<size_t>(i)] == tb.data()[static_cast<size_t>(i)];
        check("rng determinism", ok);
    }
    {
        PrecisionGuard pg(Precision::f64);
        Rng r(1);
        Tensor A = rng_tensor(r, {4, 4}, Dist::normal);
        Tensor I = Tensor::zeros({4, 4});
        for (int i = 0; i < 4; ++i) I.mutable_data()[static_cast<size_t>(i * 4 + i)] = 1.0;
        Tensor AI = matmul(A, I);
        bool ok = true;
        for (int64_t i = 0; i < 16; ++i)
            ok &= AI.data()[static_cast<size_t>(i)] == A.data()[static_cast<size_t>(i)];
        check("matmul identity bit-exact", ok);
    }
    {
        PrecisionGuard pg(Precision::f64);
        Rng r(2);
        Tensor x = rng_tensor(r, {5, 7}, Dist::normal);
        Tensor y = softmax(mul_scalar(x, 23.0), 1);
        bool ok = true;
        for (int64_t i = 0; i < 5; ++i) {
            double s = 0;
            for (int64_t j = 0; j < 7; ++j) s += y.at({i, j});
            ok &= std::abs(s - 1.0) < 1e-6;
        }
        check("softmax rows sum to one", ok);
    }
    {
        Rng r(3);
        Tensor W = rng_tensor(r, {3, 5}, Dist::normal);
        auto f = [&](const Tensor& x) { return sum(square(tanh(matmul(x, W)))); };
        check("grad_check tiny perceptron",
              grad_check(f, rng_tensor(r, {2, 3}, Dist::normal)) < 1e-4);
    }
    {
        auto s = make_schedule(2, 0.1, 0.2);
        check("schedule arithmetic",
              std::abs(s.alpha_bar[1] - 0.72) < 1e-12 && std::abs(s.alpha_bar[0] - 0.9) < 1e-12);
    }
    {
        PrecisionGuard pg(Precision::f64);
        Rng rt(4);
        Tensor target = rng_tensor(rt, {3, 2}, Dist::normal);
        auto s = make_schedule(50, 1e-4, 0.2);
        EpsModel oracle = [&](const Tensor& z, int64_t t) {
            double ab = s.alpha_bar[static_cast<size_t>(t)];
            return mul_scalar(sub(z, mul_scalar(target, std::sqrt(ab))),
                              1.0 / std::sqrt(1.0 - ab));
        };
        Rng rs(5);
        Tensor out = ddpm_sample(oracle, s, {3, 2}, rs);
        double worst = 0;
        for (int64_t i = 0; i < 6; ++i)
            worst = std::max(worst, std::abs(out.data()[static_cast<size_t>(i)] -
                                             target.data()[static_cast<size_t>(i)]));
        check("ddpm oracle recovery within 1e-3", worst < 1e-3);
    }
    {
        PrecisionGuard pg(Precision::f64);
        Rng r(6);
        double alpha = 0.4;
        Tensor M1 = rng_tensor(r, {2, 2, 2}, Dist::normal);
        MemoryState s = memory_init(M1, alpha);
        std::vector<Tensor> fs_list;
        for (int j = 0; j < 15; ++j) {
            fs_list.push_back(rng_tensor(r, {2, 2, 2}, Dist::normal));
            s = memory_update(s, fs_list.back());
        }
        bool ok = s.f == 16;
        for (int64_t i = 0; i < 8 && ok; ++i) {
            double expect = std::pow(alpha, 15.0) * M1.data()[static_cast<size_t>(i)];
            for (int j = 0; j < 15; ++j)
                expect += (1 - alpha) * std::pow(alpha, 14.0 - j) *
                          fs_list[static_cast<size_t>(j)].data()[static_cast<size_t>(i)];
            ok &= std::abs(s.M.data()[static_cast<size_t>(i)] - expect) < 1e-6;
        }
        check("memory closed form", ok);
    }
    {
        PrecisionGuard pg(Precision::f64);
        Rng r(7);
        Tensor Q = rng_tensor(r, {5, 4}, Dist::normal);
        Tensor K = rng_tensor(r, {5, 4}, Dist::normal);
        Tensor V = rng_tensor(r, {5, 4}, Dist::normal);
        Tensor base = sdpa(Q, K, V, true);
        std::vector<double> kd(K.data().begin(), K.data().end());
        for (int64_t c = 0; c < 4; ++c) kd[static_cast<size_t>(4 * 4 + c)] += 9.0;
        Tensor out = sdpa(Q, Tensor::from({5, 4}, kd), V, true);
        bool ok = true;
        for (int64_t i = 0; i < 4; ++i)
            for (int64_t c = 0; c < 4; ++c) ok &= out.at({i, c}) == base.at({i, c});
        check("causal attention bit-invariance", ok);
    }
    {
        PrecisionGuard pg(Precision::f64);
        Rng r(8);
        auto feats = make_favor(8, 16, 4);
        Tensor Q = rng_tensor(r, {6, 4}, Dist::normal);
        Tensor V = rng_tensor(r, {6, 4}, Dist::normal);
        Tensor taped = fast_attention(Q, Q, V, feats);
        std::vector<double> buf(24);
        fast_attention_stream(Q.data().data(), 6, Q.data().data(), V.data().data(), 6, 4, 4,
                              feats, buf.data());
        bool ok = true;
        for (int64_t i = 0; i < 24; ++i)
            ok &= buf[static_cast<size_t>(i)] == taped.data()[static_cast<size_t>(i)];
        check("streaming equals taped fast attention", ok);
    }
    {
        Rng r(9);
        Tensor t = rng_tensor(r, {4, 4}, Dist::normal);
        std::string path = (fs::temp_directory_path() / "mcdm_selftest.mct").string();
        save_tensor(path, t);
        Tensor u = load_tensor(path);
        bool ok = true;
        for (int64_t i = 0; i < 16; ++i)
            ok &= u.data()[static_cast<size_t>(i)] == t.data()[static_cast<size_t>(i)];
        fs::remove(path);
        check("tensor file round trip", ok);
    }
    {
        Tensor z = Tensor::zeros({64, 64});
        Tensor o = Tensor::full({64, 64}, 1.0);
        check("ssim constants",
              std::abs(ssim(z, o) - 9.999e-5) < 1e-6 && std::abs(ssim(o, o) - 1.0) < 1e-9);
    }
    {
        MotionState s = MotionState::neutral();
        s.mouth_open = 0.7;
        double got = extract_mouth_openness(render_avatar(s, 0));
        check("render-extract round trip", std::abs(got - 0.7) < 0.1);
    }

    std::cout << (failures == 0 ? "selftest passed\n" : "selftest FAILED\n");
    return failures == 0 ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"motion-prior conditional diffusion testbed"};
    app.require_subcommand(1);
    CliOptions opt;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", opt.config_path, "config file of key = value lines");
        sub->add_option("--set", opt.sets, "override a config key, e.g. --set alpha=0.5");
    };

    CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic avatar dataset");
    add_common(gen);
    CLI::App* train = app.add_subcommand("train", "run one training stage");
    add_common(train);
    train->add_option("--stage", opt.stage, "training stage (1, 2 or 3)")->required();
    CLI::App* infer = app.add_subcommand("infer", "long-horizon generation to tensor frames");
    add_common(infer);
    infer->add_flag("--packed", opt.packed,
                    "write one packed video.mct instead of per-frame files");
    CLI::App* eval = app.add_subcommand("eval", "evaluate drift or lipsync");
    add_common(eval);
    eval->add_option("kind", opt.eval_kind, "drift | lipsync")->required();
    eval->add_option("--variant", opt.variant, "drift variant: full | no-fa | no-mta");
    CLI::App* bench = app.add_subcommand("bench", "attention or memory benchmarks");
    add_common(bench);
    bench->add_option("kind", opt.bench_kind, "attention | memory")->required();
    CLI::App* selftest = app.add_subcommand("selftest", "run the built-in invariant battery");
    (void)selftest;

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e);  // prints help or error text
        return e.get_exit_code() == 0 ? 0 : 1;
    }

    RunConfig cfg;
    try {
        if (!app.got_subcommand("selftest")) cfg = resolve_config(opt);
        if (app.got_subcommand("train") && (opt.stage < 1 || opt.stage > 3)) {
            std::cerr << "train: --stage must be 1, 2 or 3\n";
            return 1;
        }
        if (app.got_subcommand("eval") && opt.eval_kind != "drift" && opt.eval_kind != "lipsync") {
            std::cerr << "eval: kind must be drift or lipsync\n";
            return 1;
        }
        if (app.got_subcommand("bench") && opt.bench_kind != "attention" &&
            opt.bench_kind != "memory") {
            std::cerr << "bench: kind must be attention or memory\n";
            return 1;
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    }

    try {
        if (app.got_subcommand("gen-data")) return cmd_gen_data(cfg);
        if (app.got_subcommand("train")) return cmd_train(cfg, opt.stage);
        if (app.got_subcommand("infer")) return cmd_infer(cfg, opt.packed);
        if (app.got_subcommand("eval"))
            return opt.eval_kind == "drift" ? cmd_eval_drift(cfg, opt.variant)
                                            : cmd_eval_lipsync(cfg);
        if (app.got_subcommand("bench"))
            return opt.bench_kind == "attention" ? cmd_bench_attention(cfg)
                                                 : cmd_bench_memory(cfg);
        if (app.got_subcommand("selftest")) return cmd_selftest();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
