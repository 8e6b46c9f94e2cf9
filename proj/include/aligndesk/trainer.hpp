// Copyright (c) 2026, The aligndesk Authors
// SPDX-License-Identifier: Apache-2.0
//
// The training loop: denoising loss plus, while alignment is active, the
// weighted feature and attention alignment terms; adaptive-moment updates;
// periodic evaluation, conflict probes and checkpoints; metrics.csv and
// diag.csv logging. Every random draw of update n comes from
// Rng(seed).split("train", n), so a run is a pure function of its config
// and resuming from a checkpoint continues it exactly.

#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "aligndesk/checkpoint.hpp"
#include "aligndesk/config.hpp"
#include "aligndesk/evalkit.hpp"
#include "aligndesk/optim.hpp"
#include "aligndesk/schedule.hpp"

namespace aligndesk {

inline constexpr const char* kMetricsHeader =
    "step,loss_diff,loss_repa,loss_atta,rho_min_t,mmd,feat_cos,attn_ce,wall_ms";

// ---------------------------------------------------------------- data and teacher

struct Dataset {
    ImageBatch train;
    ImageBatch holdout;
};

inline Dataset make_dataset(const DataConfig& d, const StudentConfig& s) {
    const auto all = generate(d.seed, d.size, SynthConfig{s.image_size, s.classes});
    auto [tr, ho] = split(all, d.holdout_fraction, d.seed);
    if (tr.empty() || ho.size() < 2) throw ConfigError("data: split leaves an empty train or holdout set");
    return {stack(tr), stack(ho)};
}

/// What the teacher is shown: the images, or their low-pass version.
inline Array teacher_view(const Array& images, double lowpass) {
    return lowpass < 0.0 ? images : low_pass(images, lowpass);
}

/// Encodes `images` and keeps only the attention layers the pairing uses
/// (others become empty [n, 0] placeholders) to bound memory.
inline TeacherOutputs encode_for_alignment(const Teacher& teacher, const Array& images, double lowpass,
                                           const AlignConfig& align) {
    TeacherOutputs out = teacher.encode_all(teacher_view(images, lowpass));
    std::vector<bool> used(out.attn.size(), false);
    for (const auto& [ls, lt] : align.pairs) {
        if (lt < used.size()) used[lt] = true;
    }
    for (std::size_t l = 0; l < out.attn.size(); ++l) {
        if (!used[l]) out.attn[l] = Array(Shape{out.size(), 0});
    }
    return out;
}

inline CheckpointData teacher_checkpoint(const Teacher& t) {
    CheckpointData c;
    const TeacherConfig& a = t.config();
    c.meta = {{"artifact", "teacher"},
              {"depth", a.depth},
              {"width", a.width},
              {"heads", a.heads},
              {"patch", a.patch},
              {"image_size", a.image_size},
              {"classes", a.classes},
              {"mlp_ratio", a.mlp_ratio},
              {"checksum", std::to_string(t.checksum())}};
    for (const auto& [name, p] : t.params()) c.tensors.push_back({"teacher/" + name, "param", p->value});
    return c;
}

inline Teacher load_teacher(const std::filesystem::path& path) {
    const CheckpointData c = load_checkpoint_file(path);
    try {
        if (c.meta.at("artifact") != "teacher") throw FormatError("not a teacher checkpoint: " + path.string());
        TeacherConfig a;
        a.depth = c.meta.at("depth");
        a.width = c.meta.at("width");
        a.heads = c.meta.at("heads");
        a.patch = c.meta.at("patch");
        a.image_size = c.meta.at("image_size");
        a.classes = c.meta.at("classes");
        a.mlp_ratio = c.meta.at("mlp_ratio");
        ParamSet ps;
        for (const auto& t : c.tensors) {
            if (t.kind == "param" && t.name.rfind("teacher/", 0) == 0) ps.add(t.name.substr(8), t.value);
        }
        Teacher teacher(a, std::move(ps), true);
        if (std::to_string(teacher.checksum()) != c.meta.at("checksum").get<std::string>()) {
            throw FormatError("teacher checkpoint checksum mismatch: " + path.string());
        }
        return teacher;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("teacher checkpoint meta malformed: " + std::string(e.what()));
    }
}

/// Pretrains on the run's training split and freezes.
inline Teacher pretrain_for_run(const RunConfig& cfg, const Dataset& data, TeacherTrainReport* report = nullptr) {
    Teacher t(cfg.teacher_arch(), cfg.teacher.pretrain.seed);
    auto r = pretrain_teacher(t, data.train, cfg.teacher.pretrain);
    if (report) *report = std::move(r);
    return t;
}

/// The run's teacher: the configured checkpoint if any, else `cache` when it
/// exists, else pretrained on the run's training split (and saved to `cache`
/// when given).
inline Teacher obtain_teacher(const RunConfig& cfg, const std::filesystem::path& cache = {},
                              const std::function<void(const std::string&)>& log = {}) {
    if (!cfg.teacher.checkpoint.empty()) return load_teacher(cfg.teacher.checkpoint);
    if (!cache.empty() && std::filesystem::exists(cache)) {
        Teacher t = load_teacher(cache);
        if (log) log("teacher loaded from " + cache.string());
        return t;
    }
    const Dataset data = make_dataset(cfg.data, cfg.student);
    TeacherTrainReport report;
    Teacher t = pretrain_for_run(cfg, data, &report);
    if (log) {
        const auto& l = report.losses;
        log("teacher pretrained: loss " + detail::fmt_double(l.empty() ? 0.0 : l.front()) + " -> " +
            detail::fmt_double(l.empty() ? 0.0 : l.back()) +
            (report.divergence_warning ? " (WARNING: loss did not decrease)" : ""));
    }
    if (!cache.empty()) save_checkpoint_file(cache, teacher_checkpoint(t));
    return t;
}

// ---------------------------------------------------------------- state

struct StepMetrics {
    double loss_diff = 0;
    std::optional<double> loss_repa;
    std::optional<double> loss_atta;
    double total = 0;
    bool aligned = false;
};

struct EvalMetrics {
    double mmd = 0;
    double energy = 0;
    AlignmentProgress progress;
};

struct RunState {
    std::uint64_t step = 0;
    Student student;
    Projector proj;
    AdamW opt_student;
    AdamW opt_proj;
    bool terminated = false;
    std::vector<RhoRecord> rho_history;
};

inline RunState initial_state(const RunConfig& cfg) {
    return RunState{0,
                    Student(cfg.student, cfg.train.seed),
                    Projector(cfg.student.width, cfg.projector_width(), cfg.teacher_arch().width, cfg.train.seed),
                    AdamW(cfg.train.optim),
                    AdamW(cfg.train.optim),
                    false,
                    {}};
}

namespace detail {

inline std::string fmt_opt(const std::optional<double>& v) { return v ? fmt_double(*v) : std::string(); }

inline void put_params(CheckpointData& c, const std::string& prefix, const ParamSet& ps, const AdamW& opt,
                       nlohmann::json& steps) {
    for (const auto& [name, p] : ps) c.tensors.push_back({prefix + name, "param", p->value});
    for (const auto& [name, s] : opt.state()) {
        c.tensors.push_back({prefix + name, "moment1", s.m});
        c.tensors.push_back({prefix + name, "moment2", s.v});
        steps[prefix + name] = s.steps;
    }
}

inline void get_params(const CheckpointData& c, const std::string& prefix, ParamSet& ps, AdamW& opt,
                       const nlohmann::json& steps) {
    for (const auto& [name, p] : ps) {
        const Array& v = c.at(prefix + name, "param");
        if (v.shape() != p->shape()) throw FormatError("checkpoint: shape mismatch for " + prefix + name);
        p->value = v;
    }
    opt.state().clear();
    for (const auto& [key, n] : steps.items()) {
        if (key.rfind(prefix, 0) != 0) continue;
        const std::string name = key.substr(prefix.size());
        if (!ps.contains(name)) throw FormatError("checkpoint: optimizer state for unknown parameter " + key);
        opt.state()[name] = MomentState{c.at(key, "moment1"), c.at(key, "moment2"), n.get<std::uint64_t>()};
    }
}

}  // namespace detail

/// Parameters, optimizer moments, step and schedule state of a run
/// checkpoint, built against `cfg` (shapes must agree).
inline RunState decode_run_state(const RunConfig& cfg, const CheckpointData& c) {
    try {
        if (c.meta.at("artifact") != "run") throw FormatError("checkpoint: not a run checkpoint");
        RunState s = initial_state(cfg);
        const auto& steps = c.meta.at("adam_steps");
        detail::get_params(c, "student/", s.student.params(), s.opt_student, steps);
        detail::get_params(c, "projector/", s.proj.params(), s.opt_proj, steps);
        s.step = get_u64(c.at("train", "rng"), 4);
        if (s.step != c.meta.at("step").get<std::uint64_t>()) throw FormatError("checkpoint: step mismatch");
        s.terminated = c.meta.at("terminated").get<bool>();
        for (const auto& r : c.meta.at("rho_history")) s.rho_history.push_back({r.at(0), r.at(1)});
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("checkpoint meta malformed: " + std::string(e.what()));
    }
}

/// The configuration a run checkpoint was written with.
inline RunConfig config_of(const CheckpointData& c) {
    if (!c.meta.contains("config") || !c.meta["config"].is_string()) {
        throw FormatError("checkpoint: no embedded run configuration");
    }
    return parse_config(c.meta["config"].get<std::string>());
}

// ---------------------------------------------------------------- trainer

class Trainer {
public:
    Trainer(RunConfig cfg, Teacher teacher)
        : cfg_(validated(std::move(cfg))), teacher_(std::move(teacher)), state_(initial_state(cfg_)) {
        if (!teacher_.frozen()) throw ContractError("trainer: teacher must be frozen");
        const TeacherConfig want = cfg_.teacher_arch();
        const TeacherConfig& have = teacher_.config();
        if (have.depth != want.depth || have.width != want.width || have.heads != want.heads ||
            have.patch != want.patch || have.image_size != want.image_size) {
            throw ConfigError("trainer: teacher architecture does not match the [teacher] section");
        }
        data_ = make_dataset(cfg_.data, cfg_.student);
        cache_ = encode_for_alignment(teacher_, data_.train.images, cfg_.teacher.input_lowpass, cfg_.align);
        std::vector<std::size_t> idx(std::min(cfg_.train.progress_size, data_.holdout.size()));
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        progress_set_ = select(data_.holdout, idx);
        progress_teacher_ = encode_for_alignment(teacher_, progress_set_.images, cfg_.teacher.input_lowpass, cfg_.align);
        if (cfg_.schedule.probe_every > 0 || std::holds_alternative<GradAngle>(cfg_.schedule.policy)) {
            Rng rng = Rng(cfg_.train.seed).split("probe-set");
            std::vector<std::size_t> pidx(cfg_.schedule.probe_size);
            for (auto& i : pidx) i = static_cast<std::size_t>(rng.below(data_.train.size()));
            probe_.emplace(select(data_.train, pidx), cfg_.probe_block_index(), cfg_.schedule.probe_times,
                           cfg_.train.seed);
            probe_teacher_ = select(cache_, pidx);
        }
    }

    const RunConfig& config() const noexcept { return cfg_; }
    RunState& state() noexcept { return state_; }
    const RunState& state() const noexcept { return state_; }
    const Dataset& data() const noexcept { return data_; }
    const Teacher& teacher() const noexcept { return teacher_; }

    /// Whether update `n` carries the alignment term under the current
    /// state (termination is sticky).
    bool alignment_on(std::uint64_t n) const {
        return cfg_.aligning() && !state_.terminated &&
               alignment_active(n, cfg_.schedule.policy, state_.rho_history);
    }

    /// One update: batch and noise from Rng(seed).split("train", n).
    StepMetrics train_step() {
        const std::uint64_t n = state_.step;
        const bool active = alignment_on(n);
        if (cfg_.aligning() && !active) state_.terminated = true;

        Rng rng = Rng(cfg_.train.seed).split("train", n);
        std::vector<std::size_t> idx(cfg_.train.batch);
        for (auto& i : idx) i = static_cast<std::size_t>(rng.below(data_.train.size()));
        const ImageBatch batch = select(data_.train, idx);
        const std::vector<int> labels =
            apply_label_dropout(batch.labels, cfg_.student.label_dropout, cfg_.student.null_label(), rng);
        DiffusionBatch db = make_diffusion_batch(batch, rng);
        db.labels = labels;

        state_.student.params().zero_grad();
        state_.proj.params().zero_grad();
        StudentOutput<float> out = state_.student.forward(db.x_t(), db.t, db.labels);
        const Var ldiff = velocity_loss(out.velocity, db.target());
        StepMetrics m;
        m.loss_diff = ldiff->value.item();
        Var total = ldiff;
        if (active) {
            const TeacherOutputs tb = select(cache_, idx);
            const HybridLoss<float> h = hybrid_loss(out.trace, tb, state_.proj, cfg_.align);
            m.loss_repa = h.repa;
            m.loss_atta = h.atta;
            total = add(ldiff, h.total);
            m.aligned = true;
        }
        m.total = total->value.item();
        if (!std::isfinite(m.total)) throw NumericError("non-finite loss at step " + std::to_string(n));
        backward(total);
        state_.opt_student.step(state_.student.params());
        if (active && cfg_.align.lambda_repa > 0.0) state_.opt_proj.step(state_.proj.params());
        ++state_.step;
        return m;
    }

    EvalMetrics evaluate() const {
        EvalConfig ec;
        ec.n_samples = cfg_.train.eval_samples;
        ec.sampler = cfg_.sampler;
        EvalMetrics e;
        std::tie(e.mmd, e.energy) = sample_quality(state_.student, data_.holdout, ec);
        e.progress = alignment_progress(state_.student, state_.proj, progress_teacher_, progress_set_, cfg_.align,
                                        cfg_.train.progress_t, cfg_.train.seed);
        return e;
    }

    std::vector<RhoPoint> probe() {
        if (!probe_) throw ConfigError("trainer: probes are not configured");
        return probe_conflict(state_.student, state_.proj, probe_teacher_, *probe_, cfg_.align, cfg_.probe_term());
    }

    // ------------------------------------------------------------ persistence

    CheckpointData checkpoint() const {
        CheckpointData c;
        nlohmann::json steps = nlohmann::json::object();
        detail::put_params(c, "student/", state_.student.params(), state_.opt_student, steps);
        detail::put_params(c, "projector/", state_.proj.params(), state_.opt_proj, steps);
        std::vector<float> rng;
        put_u64(rng, cfg_.train.seed);
        put_u64(rng, state_.step);
        c.tensors.push_back({"train", "rng", Array(Shape{rng.size()}, rng)});
        nlohmann::json hist = nlohmann::json::array();
        for (const auto& r : state_.rho_history) hist.push_back({r.step, r.rho});
        c.meta = {{"artifact", "run"},
                  {"step", state_.step},
                  {"terminated", state_.terminated},
                  {"rho_history", hist},
                  {"adam_steps", steps},
                  {"config", serialize_config(cfg_)},
                  {"config_hash", config_hash(cfg_)},
                  {"teacher_checksum", std::to_string(teacher_.checksum())}};
        return c;
    }

    /// Restores a run state. With `same_run`, the checkpoint must come from
    /// this exact configuration; otherwise (branching) only the parameter
    /// shapes and the teacher must agree.
    void restore(const CheckpointData& c, bool same_run = true) {
        try {
            if (c.meta.at("artifact") != "run") throw FormatError("checkpoint: not a run checkpoint");
            if (same_run && c.meta.at("config_hash").get<std::string>() != config_hash(cfg_)) {
                throw ConfigError("checkpoint was written by a different configuration");
            }
            if (c.meta.at("teacher_checksum").get<std::string>() != std::to_string(teacher_.checksum())) {
                throw ConfigError("checkpoint was trained against a different teacher");
            }
            RunState s = decode_run_state(cfg_, c);
            if (same_run && get_u64(c.at("train", "rng"), 0) != cfg_.train.seed) {
                throw FormatError("checkpoint: seed mismatch");
            }
            state_ = std::move(s);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("checkpoint meta malformed: " + std::string(e.what()));
        }
    }

private:
    static RunConfig validated(RunConfig c) {
        c.validate();
        return c;
    }

    RunConfig cfg_;
    Teacher teacher_;
    RunState state_;
    Dataset data_;
    TeacherOutputs cache_;
    ImageBatch progress_set_;
    TeacherOutputs progress_teacher_;
    std::optional<ConflictProbe> probe_;
    TeacherOutputs probe_teacher_;
};

// ---------------------------------------------------------------- run driver

namespace detail {

/// Keeps the header and rows whose leading step field is < `step`.
inline void truncate_csv(const std::filesystem::path& path, const std::string& header, std::uint64_t step) {
    std::string kept = header + "\n";
    if (std::filesystem::exists(path)) {
        std::ifstream in(path);
        std::string line;
        std::getline(in, line);
        if (line != header) throw FormatError("unexpected header in " + path.string());
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            if (std::stoull(line.substr(0, line.find(','))) < step) kept += line + "\n";
        }
    }
    write_file_atomic(path, kept);
}

inline std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::uint64_t step) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "step_%08llu.hste", static_cast<unsigned long long>(step));
    return dir / "ckpt" / buf;
}

inline std::optional<std::filesystem::path> latest_checkpoint(const std::filesystem::path& dir) {
    std::optional<std::filesystem::path> best;
    if (!std::filesystem::exists(dir / "ckpt")) return best;
    for (const auto& e : std::filesystem::directory_iterator(dir / "ckpt")) {
        const std::string n = e.path().filename().string();
        if (n.rfind("step_", 0) == 0 && e.path().extension() == ".hste" && (!best || e.path() > *best)) best = e.path();
    }
    return best;
}

}  // namespace detail

struct RunOptions {
    bool resume = true;                    // continue from the newest checkpoint in out_dir
    std::optional<std::filesystem::path> init_from;  // branch from another run's checkpoint
    std::function<void(std::uint64_t, const StepMetrics&)> on_step;
};

/// Runs `trainer` to config().train.steps inside `out_dir`, writing run.lock,
/// config.cfg, metrics.csv, diag.csv and ckpt/step_*.hste.
inline void run(Trainer& trainer, const std::filesystem::path& out_dir, const RunOptions& opt = {}) {
    namespace fs = std::filesystem;
    const RunConfig& cfg = trainer.config();
    fs::create_directories(out_dir / "ckpt");
    const std::string hash = config_hash(cfg);
    const fs::path lock = out_dir / "run.lock";
    if (fs::exists(lock)) {
        const std::string held = read_file(lock);
        if (held.rfind(hash, 0) != 0) {
            throw ConfigError("run.lock in " + out_dir.string() + " holds a different configuration hash");
        }
    }
    write_file_atomic(lock, hash + "\n");
    write_file_atomic(out_dir / "config.cfg", serialize_config(cfg));

    if (opt.init_from) {
        trainer.restore(load_checkpoint_file(*opt.init_from), false);
    } else if (opt.resume) {
        if (auto latest = detail::latest_checkpoint(out_dir)) trainer.restore(load_checkpoint_file(*latest));
    }
    const std::uint64_t start = trainer.state().step;
    const fs::path metrics = out_dir / "metrics.csv", diag = out_dir / "diag.csv";
    if (opt.init_from) {
        // Carry over the source run's rows for the shared prefix.
        const fs::path src = opt.init_from->parent_path().parent_path();
        for (const auto& [name, header] : {std::pair{"metrics.csv", kMetricsHeader}, std::pair{"diag.csv", kDiagHeader}}) {
            if (fs::exists(src / name)) fs::copy_file(src / name, out_dir / name, fs::copy_options::overwrite_existing);
            detail::truncate_csv(out_dir / name, header, start);
        }
    } else {
        detail::truncate_csv(metrics, kMetricsHeader, start);
        detail::truncate_csv(diag, kDiagHeader, start);
    }
    std::ofstream mout(metrics, std::ios::app), dout(diag, std::ios::app);
    if (!mout || !dout) throw IOError("cannot append to logs in " + out_dir.string());

    const auto& policy = cfg.schedule.policy;
    const auto* ga = std::get_if<GradAngle>(&policy);
    fs::path last_ckpt;
    auto save = [&](std::uint64_t step) {
        last_ckpt = detail::checkpoint_path(out_dir, step);
        save_checkpoint_file(last_ckpt, trainer.checkpoint());
    };
    using detail::fmt_double;
    auto eval_fields = [&](std::uint64_t n) {
        if (n % cfg.train.eval_every != 0 && n != cfg.train.steps) return std::string(",,");
        const EvalMetrics e = trainer.evaluate();
        return fmt_double(e.mmd) + "," + fmt_double(e.progress.feat_cos) + "," + fmt_double(e.progress.attn_ce);
    };

    for (std::uint64_t n = start; n < cfg.train.steps; ++n) {
        const auto t0 = std::chrono::steady_clock::now();
        std::string rho_field;
        const bool probe_now = (cfg.schedule.probe_every > 0 && n % cfg.schedule.probe_every == 0) ||
                               (ga && !trainer.state().terminated && n % ga->check_every == 0);
        if (probe_now) {
            const auto pts = trainer.probe();
            for (const auto& p : pts) {
                dout << n << "," << fmt_double(p.t) << "," << fmt_double(p.rho) << "," << to_string(cfg.probe_term())
                     << "\n";
            }
            dout.flush();
            const auto lo = std::min_element(pts.begin(), pts.end(), [](auto& a, auto& b) { return a.t < b.t; });
            rho_field = fmt_double(lo->rho);
            if (ga && !trainer.state().terminated) trainer.state().rho_history.push_back({n, lo->rho});
        }
        const std::string evals = eval_fields(n);
        StepMetrics m;
        try {
            m = trainer.train_step();
        } catch (const NumericError& e) {
            throw NumericError(std::string(e.what()) + "; last good checkpoint: " +
                               (last_ckpt.empty() ? std::string("none") : last_ckpt.string()));
        }
        std::string wall;
        if (cfg.train.log_wall_ms) {
            wall = fmt_double(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
        }
        mout << n << "," << fmt_double(m.loss_diff) << "," << detail::fmt_opt(m.loss_repa) << ","
             << detail::fmt_opt(m.loss_atta) << "," << rho_field << "," << evals << "," << wall << "\n";
        mout.flush();
        if (opt.on_step) opt.on_step(n, m);
        if (trainer.state().step % cfg.train.ckpt_every == 0 || trainer.state().step == cfg.train.steps) {
            save(trainer.state().step);
        }
    }
    if (start <= cfg.train.steps) {
        const std::uint64_t n = cfg.train.steps;
        // Final row: evaluation of the last parameters only.
        if (!fs::exists(detail::checkpoint_path(out_dir, n))) save(n);
        mout << n << ",,,,," << eval_fields(n) << ",\n";
        mout.flush();
    }
}

}  // namespace aligndesk
