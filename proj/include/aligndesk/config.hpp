// Copyright (c) 2026, The aligndesk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: every knob of a training run in one struct, read from
// and written to a flat `[section]` / `key = value` text file. Unknown
// sections and keys are rejected; serialization writes every key with a
// shortest round-trip number format, so parse -> serialize -> parse is a
// fixed point.

#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "aligndesk/align.hpp"
#include "aligndesk/evalkit.hpp"
#include "aligndesk/interpolant.hpp"
#include "aligndesk/optim.hpp"
#include "aligndesk/schedule.hpp"
#include "aligndesk/student.hpp"
#include "aligndesk/teacher.hpp"

namespace aligndesk {

struct DataConfig {
    std::uint64_t seed = 0;
    std::size_t size = 8192;
    double holdout_fraction = 0.125;
};

struct TeacherSetup {
    TeacherConfig arch;
    TeacherTrainConfig pretrain;
    std::string checkpoint;       // empty: pretrain inside the run
    double input_lowpass = -1.0;  // < 0: teacher sees unfiltered images
};

struct ScheduleConfig {
    TerminationPolicy policy = never_terminate();
    std::uint64_t probe_every = 0;  // 0: no probes
    std::size_t probe_size = 64;
    std::vector<double> probe_times = default_probe_times();
    std::string probe_kind = "auto";  // auto | repa | atta | hybrid
    long probe_block = -1;            // < 0: the feature-alignment block
};

struct TrainConfig {
    std::uint64_t steps = 10000;
    std::size_t batch = 64;
    AdamWConfig optim;
    std::uint64_t seed = 0;
    std::uint64_t eval_every = 500;
    std::uint64_t ckpt_every = 1000;
    std::size_t eval_samples = 256;
    std::size_t progress_size = 64;
    double progress_t = 0.25;
    bool log_wall_ms = false;
};

struct RunConfig {
    StudentConfig student;
    TeacherSetup teacher;
    AlignConfig align;
    std::size_t projector_hidden = 0;  // 0: twice the student width
    ScheduleConfig schedule;
    TrainConfig train;
    SamplerConfig sampler = desk_eval_sampler();
    DataConfig data;

    std::size_t projector_width() const { return projector_hidden ? projector_hidden : 2 * student.width; }

    /// Teacher architecture with the student's token grid and class count.
    TeacherConfig teacher_arch() const {
        TeacherConfig t = teacher.arch;
        t.patch = student.patch;
        t.image_size = student.image_size;
        t.classes = student.classes;
        return t;
    }

    bool aligning() const { return align.lambda_repa > 0.0 || align.lambda_atta > 0.0; }

    AlignTerm probe_term() const {
        if (schedule.probe_kind != "auto") return parse_align_term(schedule.probe_kind);
        if (align.lambda_atta == 0.0) return AlignTerm::Repa;
        if (align.lambda_repa == 0.0) return AlignTerm::Atta;
        return AlignTerm::Hybrid;
    }

    std::size_t probe_block_index() const {
        return schedule.probe_block < 0 ? align.feature_depth : static_cast<std::size_t>(schedule.probe_block);
    }

    void validate() const {
        student.validate();
        const TeacherConfig t = teacher_arch();
        if (t.depth == 0 || t.width == 0 || t.heads == 0 || t.width % t.heads != 0) {
            throw ConfigError("teacher: depth, width, heads must be positive with width divisible by heads");
        }
        align.validate(student, t);
        train.optim.validate();
        sampler.validate();
        validate(schedule.policy);
        if (train.batch == 0) throw ConfigError("train: batch must be >= 1");
        if (train.eval_every == 0 || train.ckpt_every == 0) {
            throw ConfigError("train: eval_every and ckpt_every must be >= 1");
        }
        if (train.eval_samples < 2) throw ConfigError("train: eval_samples must be >= 2");
        if (train.progress_size == 0) throw ConfigError("train: progress_size must be >= 1");
        if (!(train.progress_t > 0.0 && train.progress_t <= 1.0)) {
            throw ConfigError("train: progress_t must be in (0, 1]");
        }
        if (data.size < 2) throw ConfigError("data: size must be >= 2");
        if (!(data.holdout_fraction > 0.0 && data.holdout_fraction < 1.0)) {
            throw ConfigError("data: holdout_fraction must be in (0, 1)");
        }
        if (schedule.probe_every > 0) {
            if (schedule.probe_size == 0) throw ConfigError("schedule: probe_size must be >= 1");
            if (schedule.probe_times.empty()) throw ConfigError("schedule: probe_times is empty");
            if (probe_block_index() >= student.depth) throw ConfigError("schedule: probe_block out of range");
            (void)probe_term();
        }
        if (std::holds_alternative<GradAngle>(schedule.policy) && schedule.probe_times.empty()) {
            throw ConfigError("schedule: grad_angle needs probe_times");
        }
    }

private:
    static void validate(const TerminationPolicy& p) { aligndesk::validate(p); }
};

// ---------------------------------------------------------------- text format

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::string fmt_double(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, r.ptr);
}

inline double parse_double(const std::string& s, const std::string& key) {
    double v = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size() || !std::isfinite(v)) {
        throw ConfigError("config: " + key + " expects a number, got '" + s + "'");
    }
    return v;
}

template <class I>
I parse_int(const std::string& s, const std::string& key) {
    I v = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
        throw ConfigError("config: " + key + " expects an integer, got '" + s + "'");
    }
    return v;
}

inline bool parse_bool(const std::string& s, const std::string& key) {
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw ConfigError("config: " + key + " expects true/false, got '" + s + "'");
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

struct Field {
    std::function<std::string()> get;
    std::function<void(const std::string&)> set;
};

using FieldTable = std::map<std::string, std::map<std::string, Field>>;

template <class I>
Field int_field(I& ref, const std::string& key) {
    return {[&ref] { return std::to_string(ref); }, [&ref, key](const std::string& s) { ref = parse_int<I>(s, key); }};
}

inline Field real_field(double& ref, const std::string& key) {
    return {[&ref] { return fmt_double(ref); }, [&ref, key](const std::string& s) { ref = parse_double(s, key); }};
}

inline Field bool_field(bool& ref, const std::string& key) {
    return {[&ref] { return std::string(ref ? "true" : "false"); },
            [&ref, key](const std::string& s) { ref = parse_bool(s, key); }};
}

inline Field string_field(std::string& ref) {
    return {[&ref] { return ref; }, [&ref](const std::string& s) { ref = s; }};
}

/// Every serializable key, bound to `c`. Section and key order here is the
/// output order.
inline FieldTable fields(RunConfig& c) {
    FieldTable t;
    auto& st = t["student"];
    st["depth"] = int_field(c.student.depth, "student.depth");
    st["width"] = int_field(c.student.width, "student.width");
    st["heads"] = int_field(c.student.heads, "student.heads");
    st["patch"] = int_field(c.student.patch, "student.patch");
    st["image_size"] = int_field(c.student.image_size, "student.image_size");
    st["classes"] = int_field(c.student.classes, "student.classes");
    st["time_dim"] = int_field(c.student.time_dim, "student.time_dim");
    st["mlp_ratio"] = int_field(c.student.mlp_ratio, "student.mlp_ratio");
    st["label_dropout"] = real_field(c.student.label_dropout, "student.label_dropout");

    auto& te = t["teacher"];
    te["depth"] = int_field(c.teacher.arch.depth, "teacher.depth");
    te["width"] = int_field(c.teacher.arch.width, "teacher.width");
    te["heads"] = int_field(c.teacher.arch.heads, "teacher.heads");
    te["mlp_ratio"] = int_field(c.teacher.arch.mlp_ratio, "teacher.mlp_ratio");
    te["checkpoint"] = string_field(c.teacher.checkpoint);
    te["input_lowpass"] = real_field(c.teacher.input_lowpass, "teacher.input_lowpass");
    te["pretrain_steps"] = int_field(c.teacher.pretrain.steps, "teacher.pretrain_steps");
    te["pretrain_batch"] = int_field(c.teacher.pretrain.batch, "teacher.pretrain_batch");
    te["pretrain_lr"] = real_field(c.teacher.pretrain.lr, "teacher.pretrain_lr");
    te["pretrain_weight_decay"] = real_field(c.teacher.pretrain.weight_decay, "teacher.pretrain_weight_decay");
    te["pretrain_seed"] = int_field(c.teacher.pretrain.seed, "teacher.pretrain_seed");

    auto& al = t["align"];
    al["lambda_repa"] = real_field(c.align.lambda_repa, "align.lambda_repa");
    al["lambda_atta"] = real_field(c.align.lambda_atta, "align.lambda_atta");
    al["feature_depth"] = int_field(c.align.feature_depth, "align.feature_depth");
    al["aligned_heads"] = int_field(c.align.aligned_heads, "align.aligned_heads");
    al["projector_hidden"] = int_field(c.projector_hidden, "align.projector_hidden");
    al["pairs"] = {[&c] {
                       std::string s;
                       for (const auto& [a, b] : c.align.pairs) {
                           if (!s.empty()) s += ",";
                           s += std::to_string(a) + ":" + std::to_string(b);
                       }
                       return s;
                   },
                   [&c](const std::string& s) {
                       c.align.pairs.clear();
                       for (const auto& item : split_list(s)) {
                           const auto colon = item.find(':');
                           if (colon == std::string::npos) {
                               throw ConfigError("config: align.pairs expects student:teacher items, got '" + item + "'");
                           }
                           c.align.pairs.emplace_back(
                               parse_int<std::size_t>(trim(item.substr(0, colon)), "align.pairs"),
                               parse_int<std::size_t>(trim(item.substr(colon + 1)), "align.pairs"));
                       }
                   }};

    auto& sc = t["schedule"];
    sc["policy"] = {[&c] { return std::string(std::holds_alternative<FixedIter>(c.schedule.policy) ? "fixed" : "grad_angle"); },
                    [&c](const std::string& s) {
                        if (s == "fixed") {
                            if (!std::holds_alternative<FixedIter>(c.schedule.policy)) c.schedule.policy = FixedIter{};
                        } else if (s == "grad_angle") {
                            if (!std::holds_alternative<GradAngle>(c.schedule.policy)) c.schedule.policy = GradAngle{};
                        } else {
                            throw ConfigError("config: schedule.policy must be fixed or grad_angle, got '" + s + "'");
                        }
                    }};
    // Policy parameters are kept for both variants so a file can switch
    // policy without losing them; only the active variant uses its own.
    sc["tau"] = {[&c] {
                     const auto* f = std::get_if<FixedIter>(&c.schedule.policy);
                     const std::uint64_t tau = f ? f->tau : FixedIter{}.tau;
                     return tau == FixedIter{}.tau ? std::string("never") : std::to_string(tau);
                 },
                 [&c](const std::string& s) {
                     const std::uint64_t tau = s == "never" ? FixedIter{}.tau : parse_int<std::uint64_t>(s, "schedule.tau");
                     if (auto* f = std::get_if<FixedIter>(&c.schedule.policy)) f->tau = tau;
                     else if (tau != FixedIter{}.tau) throw ConfigError("config: schedule.tau needs policy = fixed (set policy first)");
                 }};
    auto ga = [&c]() -> GradAngle* { return std::get_if<GradAngle>(&c.schedule.policy); };
    auto ga_only = [](const char* key) { return ConfigError(std::string("config: schedule.") + key + " needs policy = grad_angle (set policy first)"); };
    sc["window"] = {[ga] { return std::to_string(ga() ? ga()->window : GradAngle{}.window); },
                    [ga, ga_only](const std::string& s) {
                        const auto v = parse_int<std::size_t>(s, "schedule.window");
                        if (ga()) ga()->window = v;
                        else if (v != GradAngle{}.window) throw ga_only("window");
                    }};
    sc["threshold"] = {[ga] { return fmt_double(ga() ? ga()->threshold : GradAngle{}.threshold); },
                       [ga, ga_only](const std::string& s) {
                           const double v = parse_double(s, "schedule.threshold");
                           if (ga()) ga()->threshold = v;
                           else if (v != GradAngle{}.threshold) throw ga_only("threshold");
                       }};
    sc["check_every"] = {[ga] { return std::to_string(ga() ? ga()->check_every : GradAngle{}.check_every); },
                         [ga, ga_only](const std::string& s) {
                             const auto v = parse_int<std::uint64_t>(s, "schedule.check_every");
                             if (ga()) ga()->check_every = v;
                             else if (v != GradAngle{}.check_every) throw ga_only("check_every");
                         }};
    sc["probe_every"] = int_field(c.schedule.probe_every, "schedule.probe_every");
    sc["probe_size"] = int_field(c.schedule.probe_size, "schedule.probe_size");
    sc["probe_times"] = {[&c] {
                             std::string s;
                             for (double v : c.schedule.probe_times) s += (s.empty() ? "" : ",") + fmt_double(v);
                             return s;
                         },
                         [&c](const std::string& s) {
                             c.schedule.probe_times.clear();
                             for (const auto& item : split_list(s)) {
                                 c.schedule.probe_times.push_back(parse_double(item, "schedule.probe_times"));
                             }
                         }};
    sc["probe_kind"] = string_field(c.schedule.probe_kind);
    sc["probe_block"] = int_field(c.schedule.probe_block, "schedule.probe_block");

    auto& tr = t["train"];
    tr["steps"] = int_field(c.train.steps, "train.steps");
    tr["batch"] = int_field(c.train.batch, "train.batch");
    tr["lr"] = real_field(c.train.optim.lr, "train.lr");
    tr["beta1"] = real_field(c.train.optim.beta1, "train.beta1");
    tr["beta2"] = real_field(c.train.optim.beta2, "train.beta2");
    tr["eps"] = real_field(c.train.optim.eps, "train.eps");
    tr["weight_decay"] = real_field(c.train.optim.weight_decay, "train.weight_decay");
    tr["seed"] = int_field(c.train.seed, "train.seed");
    tr["eval_every"] = int_field(c.train.eval_every, "train.eval_every");
    tr["ckpt_every"] = int_field(c.train.ckpt_every, "train.ckpt_every");
    tr["eval_samples"] = int_field(c.train.eval_samples, "train.eval_samples");
    tr["progress_size"] = int_field(c.train.progress_size, "train.progress_size");
    tr["progress_t"] = real_field(c.train.progress_t, "train.progress_t");
    tr["log_wall_ms"] = bool_field(c.train.log_wall_ms, "train.log_wall_ms");

    auto& sa = t["sampler"];
    sa["nfes"] = int_field(c.sampler.nfes, "sampler.nfes");
    sa["kind"] = {[&c] { return std::string(c.sampler.kind == SamplerKind::ODE ? "ode" : "sde"); },
                  [&c](const std::string& s) {
                      if (s == "ode") c.sampler.kind = SamplerKind::ODE;
                      else if (s == "sde") c.sampler.kind = SamplerKind::SDE;
                      else throw ConfigError("config: sampler.kind must be ode or sde, got '" + s + "'");
                  }};
    sa["cfg_scale"] = real_field(c.sampler.cfg_scale, "sampler.cfg_scale");
    sa["interval_lo"] = real_field(c.sampler.interval_lo, "sampler.interval_lo");
    sa["interval_hi"] = real_field(c.sampler.interval_hi, "sampler.interval_hi");
    sa["t_min"] = real_field(c.sampler.t_min, "sampler.t_min");
    sa["diffusion_scale"] = real_field(c.sampler.diffusion_scale, "sampler.diffusion_scale");
    sa["seed"] = int_field(c.sampler.seed, "sampler.seed");

    auto& da = t["data"];
    da["seed"] = int_field(c.data.seed, "data.seed");
    da["size"] = int_field(c.data.size, "data.size");
    da["holdout_fraction"] = real_field(c.data.holdout_fraction, "data.holdout_fraction");
    return t;
}

inline const std::vector<std::string>& section_order() {
    static const std::vector<std::string> s = {"student", "teacher", "align", "schedule", "train", "sampler", "data"};
    return s;
}

// Keys whose setter depends on another key of the same section.
inline bool applied_first(const std::string& section, const std::string& key) {
    return section == "schedule" && key == "policy";
}

}  // namespace detail

/// Applies `key = value` lines over the defaults in `base`. `[align]`
/// accepts `preset = desk|paper-B|paper-XL`, which sets feature depth, pairs
/// and aligned heads before any explicit key of the section is applied.
inline RunConfig parse_config(const std::string& text, RunConfig base = {}) {
    struct Entry {
        std::string section, key, value;
        std::size_t line;
    };
    std::vector<Entry> entries;
    std::set<std::pair<std::string, std::string>> seen;
    std::string section;
    std::istringstream in(text);
    std::string raw;
    std::size_t lineno = 0;
    const auto& order = detail::section_order();
    while (std::getline(in, raw)) {
        ++lineno;
        const auto hash = raw.find('#');
        const std::string line = detail::trim(hash == std::string::npos ? raw : raw.substr(0, hash));
        if (line.empty()) continue;
        const std::string where = "config line " + std::to_string(lineno) + ": ";
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(where + "malformed section header");
            section = detail::trim(line.substr(1, line.size() - 2));
            if (std::find(order.begin(), order.end(), section) == order.end()) {
                throw ConfigError(where + "unknown section [" + section + "]");
            }
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
        if (section.empty()) throw ConfigError(where + "key outside any section");
        Entry e{section, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)), lineno};
        if (!seen.insert({e.section, e.key}).second) {
            throw ConfigError(where + "duplicate key " + e.section + "." + e.key);
        }
        entries.push_back(std::move(e));
    }

    RunConfig c = std::move(base);
    for (const auto& e : entries) {
        if (e.section == "align" && e.key == "preset") {
            const AlignConfig p = default_pairing(c.student, c.teacher_arch(), parse_preset(e.value));
            c.align.feature_depth = p.feature_depth;
            c.align.pairs = p.pairs;
            c.align.aligned_heads = p.aligned_heads;
        }
    }
    auto table = detail::fields(c);
    auto apply = [&](const Entry& e) {
        auto& sec = table.at(e.section);
        auto it = sec.find(e.key);
        if (it == sec.end()) {
            throw ConfigError("config line " + std::to_string(e.line) + ": unknown key " + e.section + "." + e.key);
        }
        try {
            it->second.set(e.value);
        } catch (const ConfigError& err) {
            throw ConfigError("config line " + std::to_string(e.line) + ": " + err.what());
        }
    };
    for (const auto& e : entries) {
        if (detail::applied_first(e.section, e.key)) apply(e);
    }
    for (const auto& e : entries) {
        if (!detail::applied_first(e.section, e.key) && !(e.section == "align" && e.key == "preset")) apply(e);
    }
    c.validate();
    return c;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read config file " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config(ss.str());
}

/// Canonical text: every key, fixed order.
inline std::string serialize_config(const RunConfig& config) {
    RunConfig c = config;
    auto table = detail::fields(c);
    std::string out;
    for (const auto& section : detail::section_order()) {
        out += "[" + section + "]\n";
        const auto& sec = table.at(section);
        // Policy first so a re-parse binds the variant before its parameters.
        if (section == "schedule") out += "policy = " + sec.at("policy").get() + "\n";
        for (const auto& [key, f] : sec) {
            if (detail::applied_first(section, key)) continue;
            out += key + " = " + f.get() + "\n";
        }
        out += "\n";
    }
    return out;
}

/// FNV-1a of the canonical text, as 16 hex digits.
inline std::string config_hash(const RunConfig& c) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char ch : serialize_config(c)) {
        h ^= ch;
        h *= 0x100000001B3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace aligndesk
