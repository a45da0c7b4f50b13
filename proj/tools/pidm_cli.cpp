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

// pidm: data generation, training, evaluation, verification and sweeps.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

#include "pidm/config.hpp"
#include "pidm/experiment.hpp"
#include "pidm/rollout.hpp"
#include "pidm/train.hpp"

namespace fs = std::filesystem;
using namespace pidm;

namespace {

std::vector<double> parse_doubles(const std::string &list) {
    std::vector<double> out;
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        std::size_t used = 0;
        double v = 0;
        try {
            v = std::stod(item, &used);
        } catch (const std::exception &) {
            used = 0;
        }
        if (used != item.size()) throw Error("not a number: '" + item + "'");
        out.push_back(v);
    }
    return out;
}

std::vector<sim::TaskSpec> tasks_from(const std::string &list) {
    std::vector<sim::TaskSpec> out;
    for (sim::Family f : sim::parse_families(list)) out.push_back(sim::make_task(f));
    return out;
}

std::string all_families() {
    std::string s;
    for (sim::Family f : sim::kAllFamilies) s += (s.empty() ? "" : ",") + sim::family_name(f);
    return s;
}

struct TrainArgs {
    std::string data, config, preset = "toy", init, out, log;
    int init_epoch = 0;
    std::optional<int> epochs, steps, batch;
    std::optional<double> fraction, lr;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> ablate, overrides;
    bool freeze = false, last_only = false, save_epochs = false;
};

void add_train_options(CLI::App *cmd, TrainArgs &a, bool finetune) {
    cmd->add_option("--data", a.data, "Dataset directory")->required();
    cmd->add_option("--config", a.config, "Config file (model + pretrain/finetune sections)");
    cmd->add_option("--preset", a.preset, "Preset used when no config file is given");
    cmd->add_option("--out", a.out, "Output checkpoint")->required();
    cmd->add_option("--log", a.log, "Loss log CSV (default: <out>.log.csv)");
    cmd->add_option("--epochs", a.epochs);
    cmd->add_option("--steps", a.steps, "Fixed step budget instead of epochs");
    cmd->add_option("--batch-size", a.batch);
    cmd->add_option("--lr", a.lr);
    cmd->add_option("--seed", a.seed);
    cmd->add_option("--ablate", a.ablate, "no_fore, no_inv or detach_frs")->check(CLI::IsMember({"no_fore", "no_inv", "detach_frs"}));
    cmd->add_option("--set", a.overrides, "key=value config override");
    cmd->add_flag("--freeze-encoders", a.freeze);
    cmd->add_flag("--loss-last-only", a.last_only);
    cmd->add_flag("--save-epochs", a.save_epochs, "Also write <out>.epochN.ckpt after every epoch");
    if (finetune) {
        cmd->add_option("--init", a.init, "Checkpoint to start from");
        cmd->add_option("--init-epoch", a.init_epoch, "Use the epoch-N sibling of --init");
        cmd->add_option("--fraction", a.fraction, "Fraction of finetune demos to keep");
    }
}

config::RunConfig run_config(const std::string &config, const std::string &preset, data::Mode mode) {
    return config.empty() ? config::preset_run_config(preset, mode) : config::load_run_config(config, mode);
}

int cmd_train(const TrainArgs &a, data::Mode mode) {
    config::RunConfig run = run_config(a.config, a.preset, mode);
    config::apply_overrides(run, a.overrides);
    if (a.epochs) run.train.epochs = *a.epochs;
    if (a.steps) run.train.steps = *a.steps;
    if (a.batch) run.train.batch_size = *a.batch;
    if (a.lr) run.train.lr = *a.lr;
    if (a.seed) run.train.seed = *a.seed;
    if (a.fraction) run.train.fraction = *a.fraction;
    if (a.freeze) run.train.freeze_encoders = true;
    if (a.last_only) run.train.loss_last_only = true;
    for (const auto &x : a.ablate) {
        if (x == "no_fore") run.train.ablation.no_fore = true;
        if (x == "no_inv") run.train.ablation.no_inv = true;
        if (x == "detach_frs") run.train.ablation.detach_frs = true;
    }
    train::validate(run.train);

    const data::DatasetSplit split = data::load_dataset(a.data);
    if (mode == data::Mode::pretrain && split.pretrain.empty()) throw Error(a.data + " has no pretrain trajectories");
    if (mode == data::Mode::finetune && split.finetune.empty()) throw Error(a.data + " has no finetune demos");

    std::optional<train::Checkpoint> init;
    if (!a.init.empty()) {
        const fs::path path = a.init_epoch > 0 ? train::epoch_checkpoint_path(a.init, a.init_epoch) : fs::path(a.init);
        init = train::load_checkpoint(path);
    } else if (a.init_epoch > 0) {
        throw Error("--init-epoch needs --init");
    }

    const fs::path out(a.out);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    std::ofstream log(a.log.empty() ? out.string() + ".log.csv" : a.log);
    if (!log) throw Error("cannot write loss log");
    train::FitOptions opts;
    opts.init = init ? &*init : nullptr;
    opts.log = &log;
    if (a.save_epochs) {
        fs::path pattern = out;
        pattern.replace_filename(out.stem().string() + ".epoch{epoch}" + out.extension().string());
        opts.checkpoint_every_epoch = pattern;
    }
    const train::Checkpoint ck = train::fit(split, run.model, run.train, opts);
    train::save_checkpoint(ck, out);
    std::cout << "wrote " << out.string() << " after " << ck.step << " steps\n";
    return 0;
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"pidm: predictive inverse dynamics policies on a 2D tabletop"};
    app.require_subcommand(1);

    // gen-data
    experiment::DataSpec spec;
    std::string gen_out, gen_tasks = "pick-place,press-button,open-drawer";
    bool force = false;
    auto *gen = app.add_subcommand("gen-data", "Generate demos and play data");
    gen->add_option("--out", gen_out)->required();
    gen->add_option("--tasks", gen_tasks, "Comma-separated task families");
    gen->add_option("--demos-per-task", spec.demos_per_task);
    gen->add_option("--play", spec.play);
    gen->add_option("--horizon", spec.horizon);
    gen->add_option("--seed", spec.seed);
    gen->add_flag("--force", force, "Replace a non-empty output directory");

    TrainArgs pre_args, ft_args;
    auto *pre = app.add_subcommand("pretrain", "Pretrain on play data");
    add_train_options(pre, pre_args, false);
    auto *ft = app.add_subcommand("finetune", "Finetune on language-annotated demos");
    add_train_options(ft, ft_args, true);

    // eval
    std::string ckpt, eval_tasks, report, frames, policy = "ensemble";
    bool oracle = false, oldest = false;
    rollout::EvalOptions eo;
    double decay = rollout::kEnsembleDecay;
    auto *ev = app.add_subcommand("eval", "Closed-loop evaluation");
    ev->add_option("--ckpt", ckpt);
    ev->add_flag("--oracle", oracle, "Evaluate the scripted expert instead of a checkpoint");
    ev->add_option("--tasks", eval_tasks, "Comma-separated task families (default: all)");
    ev->add_option("--episodes", eo.episodes);
    ev->add_option("--chains", eo.chains, "Five-task chains to run");
    ev->add_option("--seed", eo.seed);
    ev->add_option("--cap", eo.cap, "Step cap per task");
    ev->add_option("--threads", eo.threads, "Parallel episodes (default: PIDM_THREADS or 1)");
    ev->add_option("--report", report)->required();
    ev->add_option("--frames", frames, "Write PPM frames of the first episode per task");
    ev->add_option("--policy", policy)->check(CLI::IsMember({"first-only", "ensemble"}));
    ev->add_option("--decay", decay, "Temporal ensemble decay");
    ev->add_flag("--oldest-favored", oldest);

    // gradcheck
    std::string gc_preset = "tiny";
    double tolerance = 1e-4, eps = 1e-4;
    std::uint64_t gc_seed = 0;
    auto *gc = app.add_subcommand("gradcheck", "Finite-difference check of the full pipeline");
    gc->add_option("--preset", gc_preset);
    gc->add_option("--tolerance", tolerance);
    gc->add_option("--eps", eps);
    gc->add_option("--seed", gc_seed);

    // sweep
    experiment::SweepConfig sw;
    std::string sw_data, sw_work, sw_config, sw_preset = "toy", sw_out, fractions = "0.1,0.2,0.4,0.7,1.0", detach;
    std::string sw_policy = "ensemble";
    std::vector<std::string> sw_set, pre_set, ft_set;
    auto *sweep = app.add_subcommand("sweep", "Data-efficiency sweep: scratch vs pretrained (and detach_frs)");
    sweep->add_option("--data", sw_data)->required();
    sweep->add_option("--work", sw_work, "Run directory (default: <out> without extension + .runs)");
    sweep->add_option("--config", sw_config);
    sweep->add_option("--preset", sw_preset);
    sweep->add_option("--fractions", fractions);
    sweep->add_option("--seeds", sw.seeds);
    sweep->add_option("--detach-fractions", detach, "Also run the detach_frs ablation at these fractions");
    sweep->add_option("--episodes", sw.eval.episodes);
    sweep->add_option("--chains", sw.eval.chains);
    sweep->add_option("--eval-seed", sw.eval.seed);
    sweep->add_option("--policy", sw_policy)->check(CLI::IsMember({"first-only", "ensemble"}));
    sweep->add_option("--set", sw_set, "Override for both stages");
    sweep->add_option("--pretrain-set", pre_set);
    sweep->add_option("--finetune-set", ft_set);
    sweep->add_option("--out", sw_out)->required();

    auto *show = app.add_subcommand("print-config", "Print a preset as a config file");
    std::string show_preset = "toy";
    show->add_option("--preset", show_preset);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError &e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }

    try {
        if (*gen) {
            spec.families = sim::parse_families(gen_tasks);
            experiment::generate_dataset(gen_out, spec, force);
            const auto split = data::load_dataset(gen_out);
            std::cout << "wrote " << split.finetune.size() << " demos and " << split.pretrain.size() << " play trajectories to "
                      << gen_out << "\n";
            return 0;
        }
        if (*pre) return cmd_train(pre_args, data::Mode::pretrain);
        if (*ft) return cmd_train(ft_args, data::Mode::finetune);
        if (*ev) {
            if (oracle == !ckpt.empty()) throw Error("eval needs exactly one of --ckpt and --oracle");
            const auto tasks = tasks_from(eval_tasks.empty() ? all_families() : eval_tasks);
            if (!frames.empty()) eo.frames = fs::path(frames);
            rollout::EvalReport rep;
            if (oracle) {
                rep = rollout::eval_benchmark([] { return std::make_unique<rollout::ExpertController>(); }, tasks, eo,
                                              "oracle", "expert");
            } else {
                const train::Checkpoint ck = train::load_checkpoint(ckpt);
                const rollout::PolicyOptions po{rollout::parse_policy_mode(policy), decay, !oldest};
                // Fail before spawning workers.
                rollout::ModelController probe(ck, po);
                rep = rollout::eval_benchmark([&] { return std::make_unique<rollout::ModelController>(ck, po); }, tasks, eo,
                                              policy, rollout::fingerprint(ck));
            }
            rollout::write_report(rep, report);
            for (const auto &t : rep.tasks)
                std::cout << t.task << " sr=" << t.success_rate << " score=" << t.mean_score << "/" << t.full_score << "\n";
            if (rep.sequences) std::cout << "avg_len=" << rep.sequences->avg_len << "\n";
            return 0;
        }
        if (*gc) {
            const auto r = train::pipeline_gradcheck(model::preset(gc_preset), gc_seed, eps);
            std::cout << "max_relative_error=" << r.max_relative_error << " worst=" << r.worst_parameter << "["
                      << r.worst_index << "] analytic=" << r.worst_analytic
                      << " numeric=" << r.worst_numeric << " entries=" << r.entries << "\n";
            if (!(r.max_relative_error <= tolerance)) {
                std::cerr << "error: gradcheck failed: " << r.max_relative_error << " > " << tolerance << "\n";
                return 1;
            }
            return 0;
        }
        if (*sweep) {
            sw.data = sw_data;
            sw.work = sw_work.empty() ? fs::path(sw_out).replace_extension(".runs") : fs::path(sw_work);
            sw.pretrain = run_config(sw_config, sw_preset, data::Mode::pretrain);
            sw.finetune = run_config(sw_config, sw_preset, data::Mode::finetune);
            config::apply_overrides(sw.pretrain, sw_set);
            config::apply_overrides(sw.finetune, sw_set);
            config::apply_overrides(sw.pretrain, pre_set);
            config::apply_overrides(sw.finetune, ft_set);
            sw.fractions = parse_doubles(fractions);
            sw.detach_fractions = parse_doubles(detach);
            sw.policy.mode = rollout::parse_policy_mode(sw_policy);
            const auto rows = experiment::run_sweep(sw, &std::cerr);
            experiment::write_sweep_csv(rows, sw_out);
            for (double f : sw.fractions) {
                const auto s = experiment::mean_sr(rows, experiment::Variant::scratch, f);
                const auto p = experiment::mean_sr(rows, experiment::Variant::pretrained, f);
                std::cout << "fraction=" << f << " scratch=" << *s << " pretrained=" << *p << "\n";
            }
            return 0;
        }
        if (*show) {
            std::cout << config::preset_file(show_preset).dump(2) << "\n";
            return 0;
        }
    } catch (const std::exception &e) {
        std::string msg = e.what();
        for (char &c : msg)
            if (c == '\n') c = ' ';
        std::cerr << "error: " << msg << "\n";
        return 1;
    }
    return 0;
}
