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

#include "pidm/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <random>

#include <json.hpp>

#include "pidm/sim.hpp"
#include "pidm/tensor.hpp"

namespace pidm::data {

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

template <typename T>
void put(std::vector<std::uint8_t> &out, T v) {
    const auto *p = reinterpret_cast<const std::uint8_t *>(&v);
    out.insert(out.end(), p, p + sizeof(T));
}

class Reader {
public:
    Reader(std::span<const std::uint8_t> bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

    std::span<const std::uint8_t> take(std::size_t count, const char *section) {
        if (bytes_.size() - pos_ < count)
            throw Error(source_ + ": truncated " + section + " section at byte offset " + std::to_string(pos_) +
                        " (need " + std::to_string(count) + " bytes, " + std::to_string(bytes_.size() - pos_) +
                        " available)");
        auto s = bytes_.subspan(pos_, count);
        pos_ += count;
        return s;
    }

    template <typename T>
    T get(const char *section) {
        T v;
        std::memcpy(&v, take(sizeof(T), section).data(), sizeof(T));
        return v;
    }

    std::size_t pos() const { return pos_; }
    std::size_t remaining() const { return bytes_.size() - pos_; }
    const std::string &source() const { return source_; }

private:
    std::span<const std::uint8_t> bytes_;
    std::string source_;
    std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const fs::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path &path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed for " + path.string());
}

void check_consistent(const Trajectory &t, const std::string &source) {
    if (t.length <= 0) throw Error(source + ": trajectory length T must be positive");
    if (t.views <= 0 || t.height <= 0 || t.width <= 0 || t.state_dim <= 0 || t.action_dim <= 0)
        throw Error(source + ": non-positive dimension in header");
    const auto T = static_cast<std::size_t>(t.length);
    if (t.images.size() != T * t.views * t.image_bytes() || t.states.size() != T * t.state_dim ||
        t.actions.size() != T * t.action_dim)
        throw Error(source + ": array sizes disagree with header");
}

} // namespace

std::vector<std::uint8_t> encode_trajectory(const Trajectory &t) {
    check_consistent(t, "encode_trajectory");
    json header;
    header["task"] = t.task;
    header["instruction"] = t.instruction ? json(*t.instruction) : json(nullptr);
    header["T"] = t.length;
    header["views"] = t.views;
    header["H"] = t.height;
    header["W"] = t.width;
    header["state_dim"] = t.state_dim;
    header["action_dim"] = t.action_dim;
    header["seed"] = t.seed;
    json stages = json::array();
    for (const auto &e : t.stages) stages.push_back({{"step", e.step}, {"stage", e.stage}});
    header["stages"] = stages;
    const std::string text = header.dump();

    std::vector<std::uint8_t> out;
    out.reserve(12 + text.size() + t.images.size() + 4 * (t.states.size() + t.actions.size()));
    out.insert(out.end(), kTrajMagic, kTrajMagic + 4);
    put<std::uint32_t>(out, kTrajVersion);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
    out.insert(out.end(), text.begin(), text.end());
    out.insert(out.end(), t.images.begin(), t.images.end());
    for (float v : t.states) put(out, v);
    for (float v : t.actions) put(out, v);
    return out;
}

Trajectory decode_trajectory(std::span<const std::uint8_t> bytes, const std::string &source) {
    Reader r(bytes, source);
    const auto magic = r.take(4, "magic");
    if (!std::equal(magic.begin(), magic.end(), kTrajMagic))
        throw Error(source + ": bad magic at byte offset 0 (expected \"PIDM\")");
    const auto version = r.get<std::uint32_t>("version");
    if (version != kTrajVersion)
        throw Error(source + ": unsupported version " + std::to_string(version) + " at byte offset 4");
    const auto header_len = r.get<std::uint32_t>("header length");
    const std::size_t header_at = r.pos();
    const auto header_bytes = r.take(header_len, "header");

    Trajectory t;
    try {
        const json h = json::parse(header_bytes.begin(), header_bytes.end());
        t.task = h.at("task").get<std::string>();
        if (!h.at("instruction").is_null()) t.instruction = h.at("instruction").get<std::string>();
        t.length = h.at("T").get<int>();
        t.views = h.at("views").get<int>();
        t.height = h.at("H").get<int>();
        t.width = h.at("W").get<int>();
        t.state_dim = h.at("state_dim").get<int>();
        t.action_dim = h.at("action_dim").get<int>();
        t.seed = h.at("seed").get<std::uint64_t>();
        for (const auto &e : h.at("stages")) t.stages.push_back({e.at("step").get<int>(), e.at("stage").get<int>()});
    } catch (const json::exception &e) {
        throw Error(source + ": malformed header at byte offset " + std::to_string(header_at) + ": " + e.what());
    }
    if (t.length <= 0) throw Error(source + ": header T=" + std::to_string(t.length) + " rejected (must be >= 1)");
    if (t.views <= 0 || t.height <= 0 || t.width <= 0 || t.state_dim <= 0 || t.action_dim <= 0)
        throw Error(source + ": non-positive dimension in header");

    const auto T = static_cast<std::size_t>(t.length);
    const auto images = r.take(T * t.views * t.image_bytes(), "images");
    t.images.assign(images.begin(), images.end());
    const auto states = r.take(T * t.state_dim * sizeof(float), "states");
    t.states.resize(T * t.state_dim);
    std::memcpy(t.states.data(), states.data(), states.size());
    const auto actions = r.take(T * t.action_dim * sizeof(float), "actions");
    t.actions.resize(T * t.action_dim);
    std::memcpy(t.actions.data(), actions.data(), actions.size());
    if (r.remaining() != 0)
        throw Error(source + ": " + std::to_string(r.remaining()) + " trailing bytes at byte offset " +
                    std::to_string(r.pos()));
    return t;
}

void write_trajectory(const Trajectory &traj, const fs::path &path) { write_file(path, encode_trajectory(traj)); }

Trajectory read_trajectory(const fs::path &path) {
    const auto bytes = read_file(path);
    return decode_trajectory(bytes, path.string());
}

void write_manifest(const fs::path &dir, const std::vector<ManifestEntry> &entries) {
    json list = json::array();
    for (const auto &e : entries) list.push_back({{"path", e.path}, {"split", e.split}, {"task", e.task}});
    const std::string text = json{{"trajectories", list}}.dump(2) + "\n";
    write_file(dir / kManifestName, std::span(reinterpret_cast<const std::uint8_t *>(text.data()), text.size()));
}

std::vector<ManifestEntry> read_manifest(const fs::path &dir) {
    const auto bytes = read_file(dir / kManifestName);
    std::vector<ManifestEntry> out;
    try {
        const json doc = json::parse(bytes.begin(), bytes.end());
        for (const auto &e : doc.at("trajectories")) {
            ManifestEntry m{e.at("path").get<std::string>(), e.at("split").get<std::string>(),
                            e.at("task").get<std::string>()};
            if (m.split != "pretrain" && m.split != "finetune")
                throw Error("manifest entry " + m.path + ": unknown split '" + m.split + "'");
            out.push_back(std::move(m));
        }
    } catch (const json::exception &e) {
        throw Error((dir / kManifestName).string() + ": malformed manifest: " + e.what());
    }
    return out;
}

void write_dataset(const fs::path &dir, const std::vector<Trajectory> &demos, const std::vector<Trajectory> &play) {
    fs::create_directories(dir / "demos");
    fs::create_directories(dir / "play");
    std::vector<ManifestEntry> entries;
    std::map<std::string, int> per_task;
    char name[64];
    for (const auto &d : demos) {
        std::snprintf(name, sizeof(name), "demos/%s_%05d.traj", d.task.c_str(), per_task[d.task]++);
        write_trajectory(d, dir / name);
        entries.push_back({name, "finetune", d.task});
    }
    for (std::size_t i = 0; i < play.size(); ++i) {
        std::snprintf(name, sizeof(name), "play/play_%05zu.traj", i);
        write_trajectory(play[i], dir / name);
        entries.push_back({name, "pretrain", play[i].task});
    }
    write_manifest(dir, entries);
}

DatasetSplit load_dataset(const fs::path &dir) {
    DatasetSplit split;
    for (const auto &e : read_manifest(dir)) {
        auto traj = std::make_shared<const Trajectory>(read_trajectory(dir / e.path));
        if (e.split == "pretrain") {
            split.pretrain.push_back(std::move(traj));
            split.pretrain_files.push_back(e.path);
        } else {
            split.finetune.push_back(std::move(traj));
            split.finetune_files.push_back(e.path);
        }
    }
    for (const auto &f : split.pretrain_files)
        if (std::find(split.finetune_files.begin(), split.finetune_files.end(), f) != split.finetune_files.end())
            throw Error("manifest lists " + f + " in both splits");
    return split;
}

std::vector<std::size_t> stratified_subsample(const std::vector<std::string> &groups, double fraction,
                                              std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw Error("fraction must lie in (0, 1]");
    std::map<std::string, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < groups.size(); ++i) members[groups[i]].push_back(i);
    // The tolerance keeps products such as 0.3 * 10 from flooring to 2.
    const auto floor_frac = [&](double n) { return static_cast<std::size_t>(std::floor(fraction * n + 1e-9)); };
    const std::size_t total = floor_frac(static_cast<double>(groups.size()));

    struct Quota {
        std::string group;
        std::size_t take;
        double remainder;
    };
    std::vector<Quota> quotas;
    std::size_t assigned = 0;
    for (const auto &[g, idx] : members) {
        const double exact = fraction * static_cast<double>(idx.size());
        const std::size_t base = std::min(floor_frac(static_cast<double>(idx.size())), idx.size());
        quotas.push_back({g, base, exact - static_cast<double>(base)});
        assigned += base;
    }
    std::vector<std::size_t> order(quotas.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return quotas[a].remainder > quotas[b].remainder; });
    for (std::size_t k = 0; assigned < total && k < order.size(); ++k) {
        auto &q = quotas[order[k]];
        if (q.take < members[q.group].size()) {
            ++q.take;
            ++assigned;
        }
    }

    std::vector<std::size_t> out;
    std::uint64_t g_index = 0;
    for (const auto &q : quotas) {
        std::vector<std::size_t> idx = members[q.group];
        std::mt19937_64 rng(sim::mix_seed(seed, g_index++));
        std::shuffle(idx.begin(), idx.end(), rng);
        out.insert(out.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(q.take));
    }
    std::sort(out.begin(), out.end());
    return out;
}

DatasetSplit apply_fraction(const DatasetSplit &split, double fraction, std::uint64_t seed) {
    std::vector<std::string> tasks;
    for (const auto &t : split.finetune) tasks.push_back(t->task);
    const auto keep = stratified_subsample(tasks, fraction, seed);
    if (keep.empty()) throw Error("fraction " + std::to_string(fraction) + " selects no finetune trajectories");
    DatasetSplit out;
    out.pretrain = split.pretrain;
    out.pretrain_files = split.pretrain_files;
    for (std::size_t i : keep) {
        out.finetune.push_back(split.finetune[i]);
        out.finetune_files.push_back(split.finetune_files[i]);
    }
    out.fraction = fraction;
    return out;
}

std::string mode_name(Mode mode) { return mode == Mode::pretrain ? "pretrain" : "finetune"; }

Mode parse_mode(const std::string &name) {
    if (name == "pretrain") return Mode::pretrain;
    if (name == "finetune") return Mode::finetune;
    throw Error("unknown mode '" + name + "'");
}

std::pair<int, int> valid_focus_range(const Trajectory &traj, int n, Mode mode) {
    return {0, traj.length - 1 - n - (mode == Mode::pretrain ? 1 : 0)};
}

TrainingWindow sample_window(const Trajectory &traj, int t, int m, int n, Mode mode) {
    if (m < 1 || n < 1) throw Error("sample_window: m and n must be >= 1");
    const auto [lo, hi] = valid_focus_range(traj, n, mode);
    if (t < lo || t > hi)
        throw Error("sample_window: focus step " + std::to_string(t) + " outside valid range [" + std::to_string(lo) +
                    ", " + std::to_string(hi) + "] for T=" + std::to_string(traj.length));
    if (mode == Mode::finetune && !traj.instruction) throw Error("sample_window: finetune window needs an instruction");

    TrainingWindow w;
    w.traj = &traj;
    w.mode = mode;
    w.t = t;
    w.m = m;
    w.n = n;
    for (int j = 0; j < m; ++j) w.history.push_back(std::max(0, t - m + 1 + j));
    const int limit = traj.length - 1 - (mode == Mode::pretrain ? 1 : 0);
    for (int tau : w.history) w.valid.push_back(tau + n <= limit ? 1 : 0);
    if (mode == Mode::finetune) {
        w.instruction = traj.instruction;
    } else {
        const float *g = traj.state(t + n + 1);
        w.goal_state.assign(g, g + traj.state_dim);
    }
    return w;
}

std::vector<WindowRef> enumerate_windows(const TrajectoryList &trajs, int n, Mode mode) {
    std::vector<WindowRef> out;
    for (std::size_t i = 0; i < trajs.size(); ++i) {
        const auto &traj = *trajs[i];
        if (mode == Mode::finetune && !traj.instruction) continue;
        // Trajectories shorter than n + 2 steps are not admitted.
        if (traj.length < n + 2) continue;
        const auto [lo, hi] = valid_focus_range(traj, n, mode);
        for (int t = lo; t <= hi; ++t) out.push_back({i, t});
    }
    return out;
}

BatchIter::BatchIter(TrajectoryList trajs, Mode mode, int m, int n, int batch_size, std::uint64_t seed)
    : trajs_(std::move(trajs)), mode_(mode), m_(m), n_(n), batch_size_(batch_size), seed_(seed) {
    if (batch_size < 1) throw Error("batch_size must be >= 1");
    windows_ = enumerate_windows(trajs_, n_, mode_);
    if (windows_.empty()) throw Error("no valid " + mode_name(mode) + " windows in split");
    reshuffle();
}

void BatchIter::reshuffle() {
    order_ = windows_;
    std::mt19937_64 rng(sim::mix_seed(seed_, static_cast<std::uint64_t>(epoch_)));
    std::shuffle(order_.begin(), order_.end(), rng);
    cursor_ = 0;
}

std::vector<WindowRef> BatchIter::next_refs() {
    if (cursor_ >= order_.size()) {
        ++epoch_;
        reshuffle();
    }
    const std::size_t end = std::min(order_.size(), cursor_ + static_cast<std::size_t>(batch_size_));
    std::vector<WindowRef> out(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                               order_.begin() + static_cast<std::ptrdiff_t>(end));
    cursor_ = end;
    return out;
}

std::vector<TrainingWindow> BatchIter::next() {
    std::vector<TrainingWindow> out;
    for (const auto &r : next_refs()) out.push_back(window(r));
    return out;
}

TrainingWindow BatchIter::window(const WindowRef &ref) const {
    return sample_window(*trajs_.at(ref.traj), ref.t, m_, n_, mode_);
}

std::size_t BatchIter::batches_per_epoch() const {
    return (windows_.size() + static_cast<std::size_t>(batch_size_) - 1) / static_cast<std::size_t>(batch_size_);
}

} // namespace pidm::data
