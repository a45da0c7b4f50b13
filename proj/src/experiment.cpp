// Copyright 2026 The PIDM Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "pidm/experiment.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "pidm/train.hpp"

namespace pidm::experiment {

namespace fs = std::filesystem;
using nlohmann::json;

void generate_dataset(const fs::path &dir, const DataSpec &spec, bool force) {
    if (spec.families.empty()) throw Error("gen-data: no task families");
    if (spec.demos_per_task < 1) throw Error("gen-data: demos per task must be >= 1");
    if (spec.play < 0 || spec.horizon < 1) throw Error("gen-data: play count must be >= 0 and horizon >= 1");
    if (fs::exists(dir) && !fs::is_empty(dir)) {
        if (!force) throw Error("gen-data: " + dir.string() + " is not empty (use --force to overwrite)");
        fs::remove_all(dir);
    }
    std::vector<Trajectory> demos;
    for (sim::Family f : spec.families) {
        auto d = sim::gen_demos(sim::make_task(f), spec.demos_per_task,
                                sim::mix_seed(spec.seed, static_cast<std::uint64_t>(f)));
        std::move(d.begin(), d.end(), std::back_inserter(demos));
    }
    const auto play = sim::gen_play(spec.play, spec.horizon, sim::mix_seed(spec.seed, 0x9A7));
    data::write_dataset(dir, demos, play);
}

std::vector<sim::TaskSpec> finetune_tasks(const data::DatasetSplit &split) {
    std::vector<sim::TaskSpec> out;
    for (sim::Family f : sim::kAllFamilies)
        for (const auto &t : split.finetune)
            if (t->task == sim::family_name(f)) {
                out.push_back(sim::make_task(f));
                break;
            }
    if (out.empty()) throw Error("dataset has no finetune demos");
    return out;
}

std::string variant_name(Variant v) {
    switch (v) {
    case Variant::scratch: return "scratch";
    case Variant::pretrained: return "pretrained";
    case Variant::detach_frs: return "detach_frs";
    }
    throw Error("unknown variant");
}

double mean_success(const rollout::EvalReport &report) {
    if (report.tasks.empty()) return 0.0;
    double s = 0;
    for (const auto &t : report.tasks) s += t.success_rate;
    return s / static_cast<double>(report.tasks.size());
}

std::optional<double> mean_sr(const std::vector<SweepRow> &rows, Variant v, double fraction) {
    double s = 0;
    int n = 0;
    for (const auto &r : rows)
        if (r.variant == v && std::abs(r.fraction - fraction) < 1e-9) {
            s += r.sr;
            ++n;
        }
    if (n == 0) return std::nullopt;
    return s / n;
}

namespace {

std::string hex64(std::uint64_t h) {
    std::ostringstream s;
    s << std::hex << std::setw(16) << std::setfill('0') << h;
    return s.str();
}

std::string file_digest(const fs::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot read " + path.string());
    std::uint64_t h = 1469598103934665603ull;
    char c;
    while (in.get(c)) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ull;
    }
    return hex64(h);
}

std::string fraction_tag(double f) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(2) << f;
    return s.str();
}

// Everything a run's outcome depends on. A stored run is reused only when
// its key matches exactly.
json run_key(const config::RunConfig &run, const std::string &data_digest, const std::string &init,
             const rollout::EvalOptions *eval, const rollout::PolicyOptions *policy) {
    json k{{"model", config::to_json(run.model)}, {"train", config::to_json(run.train)}, {"data", data_digest},
           {"init", init}};
    if (eval != nullptr) {
        k["eval"] = {{"episodes", eval->episodes}, {"chains", eval->chains}, {"seed", eval->seed}, {"cap", eval->cap}};
        k["policy"] = {{"mode", rollout::policy_mode_name(policy->mode)},
                       {"decay", policy->decay},
                       {"newest_favored", policy->newest_favored}};
    }
    return k;
}

std::optional<json> read_json(const fs::path &path) {
    std::ifstream in(path);
    if (!in) return std::nullopt;
    try {
        return json::parse(in);
    } catch (const json::exception &) {
        return std::nullopt;
    }
}

void write_json(const fs::path &path, const json &j) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp);
        if (!out) throw Error("cannot write " + tmp.string());
        out << j.dump(2) << "\n";
    }
    fs::rename(tmp, path);
}

// Trains unless a checkpoint with the same key exists.
train::Checkpoint train_or_reuse(const data::DatasetSplit &split, const config::RunConfig &run,
                                 const train::Checkpoint *init, const fs::path &stem, const json &key,
                                 std::ostream *progress) {
    const fs::path ckpt = stem.string() + ".ckpt", meta = stem.string() + ".run.json";
    if (const auto stored = read_json(meta); stored && *stored == key && fs::exists(ckpt)) {
        if (progress) *progress << "reuse " << ckpt.filename().string() << "\n";
        return train::load_checkpoint(ckpt);
    }
    if (progress) *progress << "train " << ckpt.filename().string() << "\n" << std::flush;
    std::ofstream log(stem.string() + ".log.csv");
    train::FitOptions opts;
    opts.init = init;
    opts.log = &log;
    const train::Checkpoint ck = train::fit(split, run.model, run.train, opts);
    train::save_checkpoint(ck, ckpt);
    write_json(meta, key);
    return ck;
}

} // namespace

std::vector<SweepRow> run_sweep(const SweepConfig &cfg, std::ostream *progress) {
    if (cfg.seeds < 1) throw Error("sweep: seeds must be >= 1");
    if (cfg.fractions.empty()) throw Error("sweep: no fractions");
    fs::create_directories(cfg.work);
    const data::DatasetSplit split = data::load_dataset(cfg.data);
    const std::string digest = file_digest(cfg.data / data::kManifestName);
    const auto tasks = finetune_tasks(split);

    config::RunConfig pre = cfg.pretrain;
    pre.train.mode = data::Mode::pretrain;
    const train::Checkpoint pretrained =
        train_or_reuse(split, pre, nullptr, cfg.work / "pretrain", run_key(pre, digest, "", nullptr, nullptr), progress);
    const std::string pre_fp = rollout::fingerprint(pretrained);

    std::vector<SweepRow> rows;
    auto one = [&](double fraction, int s, Variant v) {
        config::RunConfig run = cfg.finetune;
        run.train.mode = data::Mode::finetune;
        run.train.fraction = fraction;
        run.train.seed = cfg.finetune.train.seed + static_cast<std::uint64_t>(s);
        run.train.ablation.detach_frs = v == Variant::detach_frs;
        const bool warm = v == Variant::pretrained;
        const std::string stem = variant_name(v) + "_f" + fraction_tag(fraction) + "_s" + std::to_string(s);
        const json key = run_key(run, digest, warm ? pre_fp : "", &cfg.eval, &cfg.policy);
        const fs::path report_path = cfg.work / (stem + ".report.json");
        const fs::path report_key = cfg.work / (stem + ".report.key.json");

        SweepRow row;
        row.fraction = fraction;
        row.seed = s;
        row.variant = v;
        row.checkpoint = (cfg.work / (stem + ".ckpt")).string();
        const auto stored_key = read_json(report_key);
        const auto stored = read_json(report_path);
        if (stored_key && *stored_key == key && stored) {
            double sum = 0;
            for (const auto &t : stored->at("tasks")) sum += t.at("success_rate").get<double>();
            row.sr = sum / static_cast<double>(stored->at("tasks").size());
            row.avg_len = stored->contains("sequences") ? stored->at("sequences").at("avg_len").get<double>() : 0.0;
            if (progress) *progress << "reuse " << stem << " sr=" << row.sr << "\n";
            rows.push_back(row);
            return;
        }
        const train::Checkpoint ck =
            train_or_reuse(split, run, warm ? &pretrained : nullptr, cfg.work / stem,
                           run_key(run, digest, warm ? pre_fp : "", nullptr, nullptr), progress);
        const auto make = [&] { return std::make_unique<rollout::ModelController>(ck, cfg.policy); };
        const auto report = rollout::eval_benchmark(make, tasks, cfg.eval, rollout::policy_mode_name(cfg.policy.mode),
                                                    rollout::fingerprint(ck));
        rollout::write_report(report, report_path);
        write_json(report_key, key);
        row.sr = mean_success(report);
        row.avg_len = report.sequences ? report.sequences->avg_len : 0.0;
        if (progress) *progress << "done " << stem << " sr=" << row.sr << " avg_len=" << row.avg_len << "\n" << std::flush;
        rows.push_back(row);
    };

    for (double f : cfg.fractions)
        for (int s = 0; s < cfg.seeds; ++s)
            for (Variant v : {Variant::scratch, Variant::pretrained}) one(f, s, v);
    for (double f : cfg.detach_fractions)
        for (int s = 0; s < cfg.seeds; ++s) one(f, s, Variant::detach_frs);
    return rows;
}

void write_sweep_csv(const std::vector<SweepRow> &rows, const fs::path &path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << "fraction,seed,variant,sr,avg_len\n";
    for (const auto &r : rows)
        out << fraction_tag(r.fraction) << "," << r.seed << "," << variant_name(r.variant) << "," << r.sr << ","
            << r.avg_len << "\n";
}

} // namespace pidm::experiment
