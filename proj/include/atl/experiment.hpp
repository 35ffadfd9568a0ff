#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "atl/checkpoint.hpp"
#include "atl/train.hpp"

namespace atl {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Experiment config: flat "key = value" text, one file per experiment
// ---------------------------------------------------------------------------

inline std::map<std::string, std::string> parse_kv_file_text(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        size_t h = line.find('#');
        if (h != std::string::npos) line.erase(h);
        // trim
        auto trim = [](std::string s) {
            size_t a = s.find_first_not_of(" \t\r");
            if (a == std::string::npos) return std::string();
            size_t b = s.find_last_not_of(" \t\r");
            return s.substr(a, b - a + 1);
        };
        std::string t = trim(line);
        if (t.empty()) continue;
        size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw config_error("config line " + std::to_string(lineno) + ": expected key = value");
        std::string key = trim(t.substr(0, eq));
        std::string val = trim(t.substr(eq + 1));
        if (key.empty()) throw config_error("config line " + std::to_string(lineno) + ": empty key");
        kv[key] = val;
    }
    return kv;
}

struct ExperimentConfig {
    std::string name;
    ArchSpec student_arch;
    std::optional<std::string> teacher_ref;  // checkpoint path
    TransferPlan plan;
    TrainRecipe recipe;
    std::string recipe_name = "custom";
    std::string dataset = "synthetic-shapes";
    size_t train_size = 2048, eval_size = 512;
    uint64_t dataset_seed = 42;
    std::vector<uint64_t> seeds{0, 1, 2};
    std::string diagnostics = "none";  // none | kl | js | both
    long diagnostics_samples = 1024;
    std::map<std::string, std::string> raw;  // canonical source of truth

    void validate() const {
        if (name.empty()) throw config_error("schema error at field `name`: must be nonempty");
        student_arch.validate();
        plan.validate(student_arch.depth);
        recipe.validate();
        if (seeds.empty()) throw config_error("schema error at field `seeds`: must be nonempty");
        std::set<uint64_t> uniq(seeds.begin(), seeds.end());
        if (uniq.size() != seeds.size())
            throw config_error("schema error at field `seeds`: must be distinct");
        if (plan.method != TransferMethod::none && !teacher_ref)
            throw config_error("schema error at field `teacher_ref`: required when plan.method=" +
                               to_string(plan.method));
        if (diagnostics != "none" && diagnostics != "kl" && diagnostics != "js" &&
            diagnostics != "both")
            throw config_error("schema error at field `diagnostics`: expected none|kl|js|both");
    }
};

inline LossKind parse_loss_kind(const std::string& s) {
    if (s == "CE" || s == "ce") return LossKind::CE;
    if (s == "MSE" || s == "mse") return LossKind::MSE;
    if (s == "JSD" || s == "jsd") return LossKind::JSD;
    if (s == "L1" || s == "l1") return LossKind::L1;
    throw config_error("schema error at field `plan.loss`: unknown loss kind '" + s + "'");
}

inline Subset parse_subset(const std::string& s) {
    if (s == "Q" || s == "q") return Subset::Q;
    if (s == "K" || s == "k") return Subset::K;
    if (s == "V" || s == "v") return Subset::V;
    if (s == "full" || s == "attn") return Subset::full;
    throw config_error("schema error at field `plan.subset`: unknown subset '" + s + "'");
}

inline TrainRecipe recipe_from_preset(const std::string& preset) {
    RecipeScale scale = preset.ends_with("-paper") ? RecipeScale::paper : RecipeScale::desk;
    if (preset.starts_with("baseline")) return make_recipe(RecipeMethod::baseline, scale);
    if (preset.starts_with("copy")) return make_recipe(RecipeMethod::copy, scale);
    if (preset.starts_with("distill")) return make_recipe(RecipeMethod::distill, scale);
    throw config_error("schema error at field `recipe`: unknown preset '" + preset + "'");
}

inline ExperimentConfig config_from_kv(std::map<std::string, std::string> kv) {
    ExperimentConfig c;
    c.raw = kv;
    auto get = [&](const std::string& k) -> const std::string* {
        auto it = kv.find(k);
        return it == kv.end() ? nullptr : &it->second;
    };
    if (auto* v = get("name")) c.name = *v;
    c.student_arch = arch_from_kv(kv, "student.");
    if (auto* v = get("teacher")) c.teacher_ref = *v;

    if (auto* v = get("plan.method")) {
        if (*v == "none") c.plan.method = TransferMethod::none;
        else if (*v == "copy") c.plan.method = TransferMethod::copy;
        else if (*v == "distill") c.plan.method = TransferMethod::distill;
        else throw config_error("schema error at field `plan.method`: '" + *v + "'");
    }
    if (auto* v = get("plan.subset")) c.plan.subset = parse_subset(*v);
    if (auto* v = get("plan.layers")) c.plan.layers = parse_layers(*v, c.student_arch.depth);
    if (auto* v = get("plan.loss")) c.plan.loss_kind = parse_loss_kind(*v);
    if (auto* v = get("plan.lambda")) c.plan.lambda = std::stod(*v);
    if (auto* v = get("plan.copy_output_projection"))
        c.plan.copy_output_projection = (*v == "1" || *v == "true");

    if (auto* v = get("recipe")) {
        c.recipe = recipe_from_preset(*v);
        c.recipe_name = *v;
    } else {
        // default preset tracks the method
        c.recipe = make_recipe(c.plan.method == TransferMethod::copy      ? RecipeMethod::copy
                               : c.plan.method == TransferMethod::distill ? RecipeMethod::distill
                                                                          : RecipeMethod::baseline,
                               RecipeScale::desk);
        c.recipe_name = recipe_preset_name(
            c.plan.method == TransferMethod::copy      ? RecipeMethod::copy
            : c.plan.method == TransferMethod::distill ? RecipeMethod::distill
                                                       : RecipeMethod::baseline,
            RecipeScale::desk);
    }
    // field-level recipe overrides
    if (auto* v = get("recipe.base_lr")) c.recipe.base_lr = std::stod(*v);
    if (auto* v = get("recipe.weight_decay")) c.recipe.weight_decay = std::stod(*v);
    if (auto* v = get("recipe.beta1")) c.recipe.betas.first = std::stod(*v);
    if (auto* v = get("recipe.beta2")) c.recipe.betas.second = std::stod(*v);
    if (auto* v = get("recipe.layerwise_lr_decay")) c.recipe.layerwise_lr_decay = std::stod(*v);
    if (auto* v = get("recipe.batch_size")) c.recipe.batch_size = std::stoi(*v);
    if (auto* v = get("recipe.warmup_epochs")) c.recipe.warmup_epochs = std::stoi(*v);
    if (auto* v = get("recipe.epochs")) c.recipe.epochs = std::stoi(*v);
    if (auto* v = get("recipe.label_smoothing")) c.recipe.label_smoothing = std::stod(*v);
    if (auto* v = get("recipe.mixup_alpha")) c.recipe.mixup_alpha = std::stod(*v);
    if (auto* v = get("recipe.cutmix_alpha")) c.recipe.cutmix_alpha = std::stod(*v);
    if (auto* v = get("recipe.randaug_magnitude")) c.recipe.randaug_magnitude = std::stoi(*v);
    if (auto* v = get("recipe.randaug_prob")) c.recipe.randaug_prob = std::stod(*v);
    if (auto* v = get("recipe.drop_path")) c.recipe.drop_path = std::stod(*v);
    if (auto* v = get("recipe.ema_decay")) {
        if (*v == "off") c.recipe.ema_decay.reset();
        else c.recipe.ema_decay = std::stod(*v);
    }
    if (auto* v = get("recipe.loss")) c.recipe.loss_kind = parse_loss_kind(*v);
    if (auto* v = get("recipe.lambda")) c.recipe.lambda = std::stod(*v);

    if (auto* v = get("dataset")) c.dataset = *v;
    if (auto* v = get("dataset.train_size")) c.train_size = std::stoul(*v);
    if (auto* v = get("dataset.eval_size")) c.eval_size = std::stoul(*v);
    if (auto* v = get("dataset.seed")) c.dataset_seed = std::stoull(*v);
    if (auto* v = get("seeds")) {
        c.seeds.clear();
        std::string cur;
        for (char ch : *v + ",") {
            if (ch == ',') {
                if (!cur.empty()) c.seeds.push_back(std::stoull(cur));
                cur.clear();
            } else if (!isspace(static_cast<unsigned char>(ch))) {
                cur += ch;
            }
        }
    }
    if (auto* v = get("diagnostics")) c.diagnostics = *v;
    if (auto* v = get("diagnostics.samples")) c.diagnostics_samples = std::stol(*v);
    return c;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw config_error("cannot open config: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return config_from_kv(parse_kv_file_text(ss.str()));
}

// ---------------------------------------------------------------------------
// Fingerprint: stable hash of the canonicalized config text, seeds excluded
// so all seeds of one experiment group together
// ---------------------------------------------------------------------------

inline std::string canonical_config_text(const ExperimentConfig& c) {
    std::ostringstream os;
    for (const auto& [k, v] : c.raw) {
        if (k == "seeds") continue;
        os << k << "=" << v << "\n";
    }
    return os.str();
}

inline std::string fnv1a_hex(const std::string& s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline std::string config_fingerprint(const ExperimentConfig& c) {
    return fnv1a_hex(canonical_config_text(c));
}

// ---------------------------------------------------------------------------
// Run records and the append-only store
// ---------------------------------------------------------------------------

struct RunRecord {
    std::string fingerprint;
    std::string name;
    std::string dataset;
    uint64_t seed = 0;
    std::string axis_key, axis_value;  // set for sweep points
    double final_top1 = 0.0;
    std::vector<double> per_epoch_top1;
    std::string recipe_name;
    std::string plan_method, plan_subset, plan_layers, plan_loss;
    double plan_lambda = 0.0;
    std::map<std::string, std::vector<double>> divergence;  // kind -> per-layer
    double wall_time_s = 0.0;
    std::string canonical_config;
    std::string timestamp;
    std::optional<std::string> baseline_ref;
};

inline json record_to_json(const RunRecord& r) {
    json j;
    j["fingerprint"] = r.fingerprint;
    j["name"] = r.name;
    j["dataset"] = r.dataset;
    j["seed"] = r.seed;
    j["axis_key"] = r.axis_key;
    j["axis_value"] = r.axis_value;
    j["final_top1"] = r.final_top1;
    j["per_epoch_top1"] = r.per_epoch_top1;
    j["recipe_name"] = r.recipe_name;
    j["plan"] = {{"method", r.plan_method},
                 {"subset", r.plan_subset},
                 {"layers", r.plan_layers},
                 {"loss", r.plan_loss},
                 {"lambda", r.plan_lambda}};
    j["divergence"] = r.divergence;
    j["wall_time_s"] = r.wall_time_s;
    j["canonical_config"] = r.canonical_config;
    j["timestamp"] = r.timestamp;
    if (r.baseline_ref) j["baseline_ref"] = *r.baseline_ref;
    return j;
}

inline RunRecord record_from_json(const json& j) {
    RunRecord r;
    r.fingerprint = j.at("fingerprint");
    r.name = j.at("name");
    r.dataset = j.at("dataset");
    r.seed = j.at("seed");
    r.axis_key = j.value("axis_key", "");
    r.axis_value = j.value("axis_value", "");
    r.final_top1 = j.at("final_top1");
    r.per_epoch_top1 = j.at("per_epoch_top1").get<std::vector<double>>();
    r.recipe_name = j.value("recipe_name", "");
    if (j.contains("plan")) {
        r.plan_method = j["plan"].value("method", "");
        r.plan_subset = j["plan"].value("subset", "");
        r.plan_layers = j["plan"].value("layers", "");
        r.plan_loss = j["plan"].value("loss", "");
        r.plan_lambda = j["plan"].value("lambda", 0.0);
    }
    if (j.contains("divergence"))
        r.divergence = j["divergence"].get<std::map<std::string, std::vector<double>>>();
    r.wall_time_s = j.value("wall_time_s", 0.0);
    r.canonical_config = j.value("canonical_config", "");
    r.timestamp = j.value("timestamp", "");
    if (j.contains("baseline_ref")) r.baseline_ref = j["baseline_ref"].get<std::string>();
    return r;
}

class RunStore {
public:
    explicit RunStore(std::string dir) : dir_(std::move(dir)) {
        fs::create_directories(fs::path(dir_) / "records");
    }

    std::string record_path(const RunRecord& r) const {
        std::string axis = r.axis_key.empty() ? "" : "-" + sanitize(r.axis_key + "_" + r.axis_value);
        return (fs::path(dir_) / "records" /
                (r.fingerprint + axis + "-seed" + std::to_string(r.seed) + ".json"))
            .string();
    }

    // Append-only write: an existing identical record is left untouched; a
    // fingerprint collision with different config content is an error.
    void append(const RunRecord& r) {
        std::string path = record_path(r);
        if (fs::exists(path)) {
            RunRecord old = record_from_json(json::parse(std::ifstream(path)));
            if (old.canonical_config != r.canonical_config)
                throw config_error("run store: fingerprint collision at " + path +
                                   " with differing config content");
            return;  // re-run of an identical config; keep the original
        }
        std::string tmp = path + ".tmp";
        {
            std::ofstream f(tmp);
            f << record_to_json(r).dump(2) << "\n";
        }
        fs::rename(tmp, path);
        rebuild_index();
    }

    std::vector<RunRecord> load_all() const {
        std::vector<RunRecord> out;
        fs::path rec = fs::path(dir_) / "records";
        if (!fs::exists(rec)) return out;
        std::vector<std::string> files;
        for (const auto& e : fs::directory_iterator(rec))
            if (e.path().extension() == ".json") files.push_back(e.path().string());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) out.push_back(record_from_json(json::parse(std::ifstream(f))));
        return out;
    }

    // `query` matches a record name or a fingerprint prefix.
    std::vector<RunRecord> query(const std::string& q) const {
        std::vector<RunRecord> out;
        for (auto& r : load_all())
            if (r.name == q || r.fingerprint.starts_with(q)) out.push_back(r);
        return out;
    }

    void rebuild_index() const {
        std::string tmp = (fs::path(dir_) / "index.txt.tmp").string();
        {
            std::ofstream f(tmp);
            for (const auto& r : load_all())
                f << r.fingerprint << " " << r.name << " seed=" << r.seed
                  << (r.axis_key.empty() ? "" : " " + r.axis_key + "=" + r.axis_value)
                  << " top1=" << r.final_top1 << "\n";
        }
        fs::rename(tmp, (fs::path(dir_) / "index.txt").string());
    }

    const std::string& dir() const { return dir_; }

private:
    static std::string sanitize(std::string s) {
        for (char& c : s)
            if (!isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '.' && c != '-')
                c = '_';
        return s;
    }
    std::string dir_;
};

// ---------------------------------------------------------------------------
// Aggregation and deltas
// ---------------------------------------------------------------------------

struct SeedStats {
    double mean = 0.0, std = 0.0;
    int n = 0;
};

inline SeedStats aggregate_seeds(const std::vector<RunRecord>& records) {
    if (records.empty()) throw config_error("aggregate_seeds: no records");
    const std::string& fp = records.front().fingerprint;
    const std::string& ax = records.front().axis_value;
    for (const auto& r : records)
        if (r.fingerprint != fp || r.axis_value != ax)
            throw config_error("aggregate_seeds: mixed fingerprints in group");
    SeedStats s;
    s.n = static_cast<int>(records.size());
    for (const auto& r : records) s.mean += r.final_top1;
    s.mean /= s.n;
    if (s.n > 1) {
        double acc = 0.0;
        for (const auto& r : records) acc += (r.final_top1 - s.mean) * (r.final_top1 - s.mean);
        s.std = std::sqrt(acc / (s.n - 1));
    }
    return s;
}

// mean(group) - mean(baseline); positive means transfer helps
inline double compute_delta(const std::vector<RunRecord>& group,
                            const std::vector<RunRecord>& baseline) {
    if (group.empty() || baseline.empty()) throw config_error("compute_delta: empty group");
    if (group.front().dataset != baseline.front().dataset)
        throw config_error("compute_delta: groups come from different datasets (" +
                           group.front().dataset + " vs " + baseline.front().dataset + ")");
    return aggregate_seeds(group).mean - aggregate_seeds(baseline).mean;
}

// ---------------------------------------------------------------------------
// Running experiments
// ---------------------------------------------------------------------------

inline std::string iso_timestamp() {
    std::time_t t = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

inline std::string layers_to_string(const std::vector<int>& layers) {
    if (layers.empty()) return "all";
    std::string s;
    for (size_t i = 0; i < layers.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(layers[i]);
    }
    return s;
}

struct RunContext {
    DataSplits data;
    std::optional<Checkpoint> teacher_ckpt;
    std::optional<Model> teacher_model;
};

inline RunContext prepare_run(const ExperimentConfig& c) {
    c.validate();
    RunContext ctx;
    ctx.data = load_dataset(c.dataset, c.train_size, c.eval_size, c.dataset_seed);
    if (c.plan.method != TransferMethod::none) {
        ctx.teacher_ckpt = load_checkpoint(*c.teacher_ref);
        check_block_compat(ctx.teacher_ckpt->arch, c.student_arch);
        ctx.teacher_model = model_from_checkpoint(*ctx.teacher_ckpt);
    }
    return ctx;
}

inline DivergenceProfile run_diagnostics(const Model& teacher, const Model& student,
                                         const Dataset& eval, DivKind kind, long max_samples) {
    long off = 0;
    const int S = student.spec.image_size;
    auto next = [&]() -> Tensor {
        if (off >= static_cast<long>(eval.size()) || off >= max_samples) return Tensor();
        long n = std::min<long>({64, static_cast<long>(eval.size()) - off, max_samples - off});
        Tensor batch({static_cast<int>(n), 3, S, S});
        std::copy(eval.image(off), eval.image(off) + n * eval.image_floats(), batch.ptr());
        off += n;
        return batch;
    };
    return divergence_profile(teacher, student, next, kind, max_samples);
}

// One full train+evaluate(+diagnose) cycle per seed.
inline std::vector<RunRecord> run_experiment(const ExperimentConfig& c, RunStore& store,
                                             const std::string& axis_key = "",
                                             const std::string& axis_value = "") {
    RunContext ctx = prepare_run(c);
    std::string fp = config_fingerprint(c);
    std::vector<RunRecord> out;
    for (uint64_t seed : c.seeds) {
        RunRecord rec;
        rec.fingerprint = fp;
        rec.name = c.name;
        rec.dataset = c.dataset;
        rec.seed = seed;
        rec.axis_key = axis_key;
        rec.axis_value = axis_value;
        rec.canonical_config =
            axis_key.empty() ? canonical_config_text(c)
                             : canonical_config_text(c) + axis_key + ":" + axis_value + "\n";

        // skip training when an identical record already exists
        std::string existing = store.record_path(rec);
        if (fs::exists(existing)) {
            RunRecord old = record_from_json(json::parse(std::ifstream(existing)));
            if (old.canonical_config == rec.canonical_config) {
                out.push_back(old);
                continue;
            }
        }

        Model student = build_model(c.student_arch, seed);
        if (c.plan.method == TransferMethod::copy)
            student = apply_attention_copy(std::move(student), *ctx.teacher_ckpt, c.plan);

        RunResult res = train(student,
                              ctx.teacher_model ? &*ctx.teacher_model : nullptr, c.plan,
                              c.recipe, ctx.data, seed);
        rec.final_top1 = res.final_top1;
        rec.per_epoch_top1 = res.per_epoch_top1;
        rec.recipe_name = c.recipe_name;
        rec.plan_method = to_string(c.plan.method);
        rec.plan_subset = to_string(c.plan.subset);
        rec.plan_layers = layers_to_string(c.plan.layers);
        rec.plan_loss = to_string(c.plan.loss_kind);
        rec.plan_lambda = c.plan.lambda;
        rec.wall_time_s = res.wall_time_s;
        rec.timestamp = iso_timestamp();

        if (ctx.teacher_model && c.diagnostics != "none") {
            Model eval_student = student;
            eval_student.spec.drop_path_rate = 0.0;
            if (c.diagnostics == "kl" || c.diagnostics == "both")
                rec.divergence["KL"] = run_diagnostics(*ctx.teacher_model, eval_student,
                                                       ctx.data.eval, DivKind::KL,
                                                       c.diagnostics_samples)
                                           .per_layer;
            if (c.diagnostics == "js" || c.diagnostics == "both")
                rec.divergence["JS"] = run_diagnostics(*ctx.teacher_model, eval_student,
                                                       ctx.data.eval, DivKind::JS,
                                                       c.diagnostics_samples)
                                           .per_layer;
        }
        store.append(rec);
        out.push_back(rec);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Sweeps: single-axis cartesian expansion, all seeds per point
// ---------------------------------------------------------------------------

inline std::vector<RunRecord> sweep(const ExperimentConfig& base, RunStore& store,
                                    const std::string& axis,
                                    const std::vector<std::string>& values) {
    if (values.empty()) throw config_error("sweep: empty axis value list");
    std::vector<RunRecord> out;
    for (const auto& v : values) {
        ExperimentConfig c = base;
        if (axis == "lambda") {
            c.plan.lambda = std::stod(v);
        } else if (axis == "layers") {
            c.plan.layers = parse_layers(v, c.student_arch.depth);
        } else if (axis == "qkv") {
            c.plan.subset = parse_subset(v);
        } else if (axis == "loss" || axis == "loss_kind") {
            c.plan.loss_kind = parse_loss_kind(v);
            c.recipe.loss_kind = c.plan.loss_kind;
        } else {
            throw config_error("sweep: unknown axis '" + axis +
                               "' (single-axis sweeps over lambda|layers|qkv|loss only)");
        }
        auto recs = run_experiment(c, store, axis, v);
        out.insert(out.end(), recs.begin(), recs.end());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

// Groups records by (fingerprint, axis value) in deterministic order.
inline std::vector<std::vector<RunRecord>> group_records(std::vector<RunRecord> records) {
    std::sort(records.begin(), records.end(), [](const RunRecord& a, const RunRecord& b) {
        if (a.name != b.name) return a.name < b.name;
        if (a.axis_value != b.axis_value) {
            // numeric axis values sort numerically
            try {
                return std::stod(a.axis_value) < std::stod(b.axis_value);
            } catch (...) {
                return a.axis_value < b.axis_value;
            }
        }
        return a.seed < b.seed;
    });
    std::vector<std::vector<RunRecord>> groups;
    for (auto& r : records) {
        if (!groups.empty() && groups.back().front().fingerprint == r.fingerprint &&
            groups.back().front().axis_value == r.axis_value)
            groups.back().push_back(r);
        else
            groups.push_back({r});
    }
    return groups;
}

inline std::string format_group_label(const std::vector<RunRecord>& g) {
    const RunRecord& r = g.front();
    return r.axis_key.empty() ? r.name : r.name + "[" + r.axis_key + "=" + r.axis_value + "]";
}

// table | csv | plotdata. `baseline` may be empty; when present, each row
// carries its delta vs that group, and a FAIL tag when the mean delta is
// negative.
inline std::string emit_report(const RunStore& store, const std::string& query,
                               const std::string& format, const std::string& baseline_query = "") {
    auto records = store.query(query);
    if (records.empty()) throw config_error("report: no records match query '" + query + "'");
    auto groups = group_records(std::move(records));

    std::optional<SeedStats> base_stats;
    std::vector<RunRecord> base_group;
    if (!baseline_query.empty()) {
        base_group = store.query(baseline_query);
        if (base_group.empty())
            throw config_error("report: no records match baseline query '" + baseline_query + "'");
        base_stats = aggregate_seeds(base_group);
    }

    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(4);
    if (format == "table") {
        os << "group\tn\tmean\tstd\tdelta\tstatus\n";
        for (const auto& g : groups) {
            SeedStats st = aggregate_seeds(g);
            os << format_group_label(g) << "\t" << st.n << "\t" << st.mean << "\t" << st.std;
            if (base_stats) {
                double delta = compute_delta(g, base_group);
                os << "\t" << (delta >= 0 ? "+" : "") << delta << "\t"
                   << (delta < 0 ? "FAIL" : "ok");
            } else {
                os << "\t-\t-";
            }
            os << "\n";
        }
    } else if (format == "csv") {
        // divergence queries emit (layer,value); accuracy queries emit rows
        bool has_div = !groups.front().front().divergence.empty();
        if (has_div) {
            os << "layer,value\n";
            // mean profile over all matched records, first divergence kind
            const auto& kind = groups.front().front().divergence.begin()->first;
            size_t depth = groups.front().front().divergence.begin()->second.size();
            std::vector<double> acc(depth, 0.0);
            size_t n = 0;
            for (const auto& g : groups)
                for (const auto& r : g) {
                    auto it = r.divergence.find(kind);
                    if (it == r.divergence.end()) continue;
                    for (size_t i = 0; i < depth; ++i) acc[i] += it->second[i];
                    ++n;
                }
            for (size_t i = 0; i < depth; ++i) os << i << "," << acc[i] / n << "\n";
        } else {
            os << "group,axis,seed,final_top1\n";
            for (const auto& g : groups)
                for (const auto& r : g)
                    os << r.name << "," << r.axis_value << "," << r.seed << "," << r.final_top1
                       << "\n";
        }
    } else if (format == "plotdata") {
        os << "x,mean,std\n";
        for (const auto& g : groups) {
            SeedStats st = aggregate_seeds(g);
            std::string x = g.front().axis_value.empty() ? g.front().name : g.front().axis_value;
            os << x << "," << st.mean << "," << st.std << "\n";
        }
    } else {
        throw config_error("report: unknown format '" + format + "'");
    }
    return os.str();
}

}  // namespace atl
