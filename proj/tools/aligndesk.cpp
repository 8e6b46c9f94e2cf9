// Copyright (c) 2026, The aligndesk Authors
// SPDX-License-Identifier: Apache-2.0
//
// aligndesk command-line entry point. One verb per process:
//   teacher-train, train, sample, eval, diag, plot
// Exit codes: 0 ok, 1 other error, 2 config error, 3 numeric abort,
// 4 plot component missing. Every failure also prints one line
//   ERROR kind=<Kind> detail=<message>

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <unistd.h>

#include "aligndesk/trainer.hpp"

namespace fs = std::filesystem;
using namespace aligndesk;

namespace {

void say(const std::string& s) { std::cout << s << std::endl; }

std::string one_line(std::string s) {
    for (char& c : s) {
        if (c == '\n' || c == '\r') c = ' ';
    }
    return s;
}

std::vector<double> parse_times(const std::string& s) {
    std::vector<double> out;
    for (const auto& item : detail::split_list(s)) out.push_back(detail::parse_double(item, "--t"));
    if (out.empty()) throw ConfigError("--t: no timesteps given");
    return out;
}

/// A run checkpoint's teacher: explicit path, the configured one, or the
/// teacher cached in the run directory next to ckpt/.
Teacher teacher_for_checkpoint(const RunConfig& cfg, const fs::path& ckpt, const std::string& explicit_path) {
    if (!explicit_path.empty()) return load_teacher(explicit_path);
    if (!cfg.teacher.checkpoint.empty()) return load_teacher(cfg.teacher.checkpoint);
    const fs::path cached = fs::absolute(ckpt).parent_path().parent_path() / "teacher.hste";
    if (!fs::exists(cached)) throw ConfigError("no teacher found; pass --teacher");
    return load_teacher(cached);
}

void write_pgm_grid(const fs::path& path, const Array& images) {
    const std::size_t n = images.dim(0), h = images.dim(1), w = images.dim(2);
    const std::size_t cols = std::min<std::size_t>(n, 8), rows = (n + cols - 1) / cols;
    const std::size_t W = cols * (w + 1) + 1, H = rows * (h + 1) + 1;
    std::string px(W * H, '\0');
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t oy = (i / cols) * (h + 1) + 1, ox = (i % cols) * (w + 1) + 1;
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const double v = std::clamp((images[(i * h + y) * w + x] + 1.0) * 127.5, 0.0, 255.0);
                px[(oy + y) * W + ox + x] = static_cast<char>(static_cast<unsigned char>(std::lround(v)));
            }
    }
    write_file_atomic(path, "P5\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n" + px);
}

fs::path self_dir() {
    std::error_code ec;
    const fs::path p = fs::read_symlink("/proc/self/exe", ec);
    return ec ? fs::current_path() : p.parent_path();
}

std::optional<fs::path> find_plotter() {
    const char* name = "aligndesk-plot";
    if (fs::exists(self_dir() / name)) return self_dir() / name;
    if (const char* path = std::getenv("PATH")) {
        std::stringstream ss(path);
        std::string dir;
        while (std::getline(ss, dir, ':')) {
            if (!dir.empty() && ::access((fs::path(dir) / name).c_str(), X_OK) == 0) return fs::path(dir) / name;
        }
    }
    return std::nullopt;
}

std::string shell_quote(const std::string& s) {
    std::string out = "'";
    for (char c : s) out += c == '\'' ? std::string("'\\''") : std::string(1, c);
    return out + "'";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"aligndesk: desk-scale diffusion transformer alignment lab"};
    app.require_subcommand(1);

    std::string config, out, ckpt, init_from, teacher_path, times = "0.02,0.05,0.1,0.2,0.5,0.9", kind = "auto",
                                                                sampler_kind = "ode";
    bool fresh = false;
    std::size_t nfes = 32, n = 16, size = 960;
    double cfg_scale = 1.0, interval_lo = 0.0, interval_hi = 1.0;
    std::uint64_t seed = 0, data_seed = 0;
    long block = -1;
    int label = -1;

    auto* tt = app.add_subcommand("teacher-train", "pretrain and freeze the teacher encoder");
    tt->add_option("--config", config, "run configuration file")->required();
    tt->add_option("--out", out, "teacher checkpoint to write")->required();

    auto* tr = app.add_subcommand("train", "train (or resume) a run in an output directory");
    tr->add_option("--config", config, "run configuration file")->required();
    tr->add_option("--out", out, "run directory")->required();
    tr->add_option("--init-from", init_from, "branch from another run's checkpoint");
    tr->add_flag("--fresh", fresh, "ignore existing checkpoints in the run directory");

    auto* sa = app.add_subcommand("sample", "draw samples from a run checkpoint");
    sa->add_option("--ckpt", ckpt, "run checkpoint")->required();
    sa->add_option("--out", out, "output (.pgm image grid, else checkpoint format)")->required();
    sa->add_option("--nfes", nfes, "function evaluations");
    sa->add_option("--kind", sampler_kind, "ode or sde");
    sa->add_option("--cfg-scale", cfg_scale, "guidance scale (1 = none)");
    sa->add_option("--interval-lo", interval_lo, "guidance interval start");
    sa->add_option("--interval-hi", interval_hi, "guidance interval end");
    sa->add_option("--seed", seed, "sampler seed");
    sa->add_option("-n,--count", n, "number of samples");
    sa->add_option("--label", label, "class label for every sample (default: cycle classes)");

    auto* ev = app.add_subcommand("eval", "JSON metric report for a run checkpoint");
    ev->add_option("--ckpt", ckpt, "run checkpoint")->required();
    ev->add_option("--data-seed", data_seed, "seed of the reference data");
    ev->add_option("--out", out, "JSON report path")->required();
    ev->add_option("--teacher", teacher_path, "teacher checkpoint (default: the run's)");

    auto* dg = app.add_subcommand("diag", "gradient-conflict probe of a run checkpoint");
    dg->add_option("--ckpt", ckpt, "run checkpoint")->required();
    dg->add_option("--out", out, "diag.csv path")->required();
    dg->add_option("--t", times, "comma-separated timesteps");
    dg->add_option("--size", size, "probe images");
    dg->add_option("--kind", kind, "auto, repa, atta or hybrid");
    dg->add_option("--block", block, "student block (default: the feature-alignment block)");
    dg->add_option("--seed", seed, "probe noise seed");
    dg->add_option("--teacher", teacher_path, "teacher checkpoint (default: the run's)");

    std::string run_dir;
    auto* pl = app.add_subcommand("plot", "render charts from run directories (secondary component)");
    pl->add_option("run_dir", run_dir, "run directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        if (code != 0) std::cout << "ERROR kind=ConfigError detail=" << one_line(e.what()) << std::endl;
        return code == 0 ? 0 : 2;
    }

    try {
        if (*tt) {
            const RunConfig cfg = load_config(config);
            if (fs::exists(out)) fs::remove(out);
            obtain_teacher(cfg, out, say);
            say("wrote " + out);
        } else if (*tr) {
            const RunConfig cfg = load_config(config);
            fs::create_directories(out);
            if (fresh) fs::remove_all(fs::path(out) / "ckpt");
            Teacher teacher = obtain_teacher(cfg, fs::path(out) / "teacher.hste", say);
            Trainer trainer(cfg, std::move(teacher));
            RunOptions opt;
            opt.resume = !fresh;
            if (!init_from.empty()) opt.init_from = init_from;
            const auto t0 = std::chrono::steady_clock::now();
            opt.on_step = [&](std::uint64_t step, const StepMetrics& m) {
                if ((step + 1) % 100 == 0 || step == 0) {
                    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
                    say("step " + std::to_string(step) + " loss_diff " + detail::fmt_double(m.loss_diff) +
                        (m.aligned ? " (aligned)" : "") + " elapsed " + std::to_string(static_cast<int>(s)) + "s");
                }
            };
            run(trainer, out, opt);
            say("done: " + out + "/metrics.csv");
        } else if (*sa) {
            const CheckpointData c = load_checkpoint_file(ckpt);
            const RunConfig cfg = config_of(c);
            const RunState s = decode_run_state(cfg, c);
            SamplerConfig sc = cfg.sampler;
            sc.nfes = nfes;
            if (sampler_kind == "ode") sc.kind = SamplerKind::ODE;
            else if (sampler_kind == "sde") sc.kind = SamplerKind::SDE;
            else throw ConfigError("--kind must be ode or sde");
            sc.cfg_scale = cfg_scale;
            sc.interval_lo = interval_lo;
            sc.interval_hi = interval_hi;
            sc.seed = seed;
            sc.validate();
            if (label >= static_cast<int>(cfg.student.classes)) throw ConfigError("--label out of range");
            std::vector<int> labels(n);
            for (std::size_t i = 0; i < n; ++i) {
                labels[i] = label >= 0 ? label : static_cast<int>(i % cfg.student.classes);
            }
            const Shape shape{cfg.student.image_size, cfg.student.image_size, 1};
            const Array x = sample(s.student.velocity_field(), sc, labels, cfg.student.null_label(), shape);
            if (fs::path(out).extension() == ".pgm") {
                write_pgm_grid(out, x);
            } else {
                CheckpointData o;
                o.meta = {{"artifact", "samples"}, {"labels", labels}, {"nfes", nfes}, {"seed", seed}};
                o.tensors.push_back({"samples", "param", x});
                save_checkpoint_file(out, o);
            }
            say("wrote " + std::to_string(n) + " samples to " + out);
        } else if (*ev) {
            const CheckpointData c = load_checkpoint_file(ckpt);
            const RunConfig cfg = config_of(c);
            const RunState s = decode_run_state(cfg, c);
            const Teacher teacher = teacher_for_checkpoint(cfg, ckpt, teacher_path);
            DataConfig dc = cfg.data;
            dc.seed = data_seed;
            const Dataset data = make_dataset(dc, cfg.student);
            EvalConfig ec;
            ec.n_samples = cfg.train.eval_samples;
            ec.sampler = cfg.sampler;
            const auto [mmd, energy] = sample_quality(s.student, data.holdout, ec);
            std::vector<std::size_t> idx(std::min(cfg.train.progress_size, data.holdout.size()));
            for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
            const ImageBatch probe = select(data.holdout, idx);
            const TeacherOutputs tout =
                encode_for_alignment(teacher, probe.images, cfg.teacher.input_lowpass, cfg.align);
            const AlignmentProgress p =
                alignment_progress(s.student, s.proj, tout, probe, cfg.align, cfg.train.progress_t, cfg.train.seed);
            const nlohmann::json report = {{"step", s.step},
                                           {"data_seed", data_seed},
                                           {"mmd", mmd},
                                           {"energy_distance", energy},
                                           {"feat_cos", p.feat_cos},
                                           {"feat_cos_projected", p.feat_cos_projected},
                                           {"attn_ce", p.attn_ce},
                                           {"n_samples", std::min(ec.n_samples, data.holdout.size())}};
            write_file_atomic(out, report.dump(2) + "\n");
            say(report.dump());
        } else if (*dg) {
            const CheckpointData c = load_checkpoint_file(ckpt);
            RunConfig cfg = config_of(c);
            RunState s = decode_run_state(cfg, c);
            const Teacher teacher = teacher_for_checkpoint(cfg, ckpt, teacher_path);
            cfg.schedule.probe_kind = kind;
            cfg.schedule.probe_block = block;
            const AlignTerm term = cfg.probe_term();
            if (cfg.probe_block_index() >= cfg.student.depth) throw ConfigError("--block out of range");
            const Dataset data = make_dataset(cfg.data, cfg.student);
            Rng rng = Rng(seed).split("diag-set");
            std::vector<std::size_t> idx(size);
            for (auto& i : idx) i = static_cast<std::size_t>(rng.below(data.train.size()));
            const ImageBatch images = select(data.train, idx);
            const TeacherOutputs tout =
                encode_for_alignment(teacher, images.images, cfg.teacher.input_lowpass, cfg.align);
            const ConflictProbe probe(images, cfg.probe_block_index(), parse_times(times), seed);
            const auto pts = probe_conflict(s.student, s.proj, tout, probe, cfg.align, term);
            std::string csv = std::string(kDiagHeader) + "\n";
            for (const auto& p : pts) {
                csv += std::to_string(s.step) + "," + detail::fmt_double(p.t) + "," + detail::fmt_double(p.rho) + "," +
                       to_string(term) + "\n";
            }
            write_file_atomic(out, csv);
            std::cout << csv;
        } else if (*pl) {
            const auto plotter = find_plotter();
            if (!plotter) {
                std::cout << "plot component not installed" << std::endl;
                return 4;
            }
            return std::system((shell_quote(plotter->string()) + " " + shell_quote(run_dir)).c_str()) == 0 ? 0 : 1;
        }
    } catch (const Error& e) {
        std::cout << "ERROR kind=" << e.kind() << " detail=" << one_line(e.what()) << std::endl;
        if (dynamic_cast<const ConfigError*>(&e)) return 2;
        if (dynamic_cast<const NumericError*>(&e)) return 3;
        return 1;
    } catch (const std::exception& e) {
        std::cout << "ERROR kind=Internal detail=" << one_line(e.what()) << std::endl;
        return 1;
    }
    return 0;
}
