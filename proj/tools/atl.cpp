// Experiment runner for desk-scale attention-transfer studies.

#include <CLI11.hpp>
#include <cstdlib>
#include <iostream>

#include "atl/experiment.hpp"

namespace {

void print_records(const std::vector<atl::RunRecord>& recs) {
    for (const auto& r : recs)
        std::cout << r.fingerprint << " " << r.name << " seed=" << r.seed
                  << (r.axis_key.empty() ? "" : " " + r.axis_key + "=" + r.axis_value)
                  << " top1=" << r.final_top1 << "% (" << r.wall_time_s << "s)\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"attention-transfer lab"};
    app.require_subcommand(1);

    // deterministic mode is the default and the only mode; the env var is
    // honored for interface compatibility
    (void)std::getenv("ATL_DETERMINISTIC");

    std::string config_path, store_dir = "runs", save_ckpt;
    std::string axis, axis_values;
    std::string kind = "kl", teacher_path, student_path, dataset = "synthetic-shapes";
    long samples = 1024;
    std::string query, format = "table", baseline_query;
    bool no_ema_eval = false;

    auto* cmd_baseline = app.add_subcommand("baseline", "train the no-transfer baseline");
    cmd_baseline->add_option("config", config_path)->required();
    cmd_baseline->add_option("--store", store_dir);
    cmd_baseline->add_option("--save-checkpoint", save_ckpt,
                             "save the first seed's trained weights");

    auto* cmd_transfer = app.add_subcommand("transfer", "run attention copy or distillation");
    cmd_transfer->add_option("config", config_path)->required();
    cmd_transfer->add_option("--store", store_dir);
    cmd_transfer->add_option("--save-checkpoint", save_ckpt);

    auto* cmd_sweep = app.add_subcommand("sweep", "single-axis sweep over a base config");
    cmd_sweep->add_option("config", config_path)->required();
    cmd_sweep->add_option("--axis", axis, "lambda|layers|qkv|loss")->required();
    cmd_sweep->add_option("--values", axis_values, "comma-separated axis values")->required();
    cmd_sweep->add_option("--store", store_dir);

    auto* cmd_diag = app.add_subcommand("diagnose", "per-layer divergence between checkpoints");
    cmd_diag->add_option("--kind", kind, "kl|js");
    cmd_diag->add_option("--teacher", teacher_path)->required();
    cmd_diag->add_option("--student", student_path)->required();
    cmd_diag->add_option("--dataset", dataset);
    cmd_diag->add_option("--samples", samples);

    auto* cmd_report = app.add_subcommand("report", "render stored results");
    cmd_report->add_option("--store", store_dir);
    cmd_report->add_option("--query", query)->required();
    cmd_report->add_option("--format", format, "table|csv|plotdata");
    cmd_report->add_option("--baseline", baseline_query, "baseline group query for deltas");

    auto* cmd_validate = app.add_subcommand("validate-config", "parse and validate a config");
    cmd_validate->add_option("config", config_path)->required();

    app.add_flag("--no-ema-eval", no_ema_eval, "evaluate raw weights even when EMA is on");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*cmd_baseline || *cmd_transfer) {
            atl::ExperimentConfig cfg = atl::load_config(config_path);
            if (*cmd_baseline) cfg.plan.method = atl::TransferMethod::none;
            atl::RunStore store(store_dir);
            auto recs = atl::run_experiment(cfg, store);
            print_records(recs);
            if (!save_ckpt.empty()) {
                // retrain seed 0 deterministically and persist the weights
                auto ctx = atl::prepare_run(cfg);
                atl::Model m = atl::build_model(cfg.student_arch, cfg.seeds.front());
                if (cfg.plan.method == atl::TransferMethod::copy)
                    m = atl::apply_attention_copy(std::move(m), *ctx.teacher_ckpt, cfg.plan);
                atl::train(m, ctx.teacher_model ? &*ctx.teacher_model : nullptr, cfg.plan,
                           cfg.recipe, ctx.data, cfg.seeds.front(), !no_ema_eval);
                m.spec.drop_path_rate = 0.0;
                atl::CkptMeta meta;
                meta.seed = cfg.seeds.front();
                meta.family = cfg.name;
                atl::save_checkpoint(m, save_ckpt, meta);
                std::cout << "checkpoint saved to " << save_ckpt << "\n";
            }
        } else if (*cmd_sweep) {
            atl::ExperimentConfig cfg = atl::load_config(config_path);
            atl::RunStore store(store_dir);
            std::vector<std::string> values;
            std::string cur;
            for (char c : axis_values + ",") {
                if (c == ',') {
                    if (!cur.empty()) values.push_back(cur);
                    cur.clear();
                } else {
                    cur += c;
                }
            }
            auto recs = atl::sweep(cfg, store, axis, values);
            print_records(recs);
        } else if (*cmd_diag) {
            atl::Model teacher = atl::model_from_checkpoint(atl::load_checkpoint(teacher_path));
            atl::Model student = atl::model_from_checkpoint(atl::load_checkpoint(student_path));
            auto splits = atl::load_dataset(dataset, 0, static_cast<size_t>(samples), 42);
            atl::DivKind k = (kind == "js" || kind == "JS") ? atl::DivKind::JS : atl::DivKind::KL;
            auto prof = atl::run_diagnostics(teacher, student, splits.eval, k, samples);
            std::cout << atl::profile_to_csv(prof);
        } else if (*cmd_report) {
            atl::RunStore store(store_dir);
            std::cout << atl::emit_report(store, query, format, baseline_query);
        } else if (*cmd_validate) {
            atl::ExperimentConfig cfg = atl::load_config(config_path);
            cfg.validate();
            std::cout << "ok: " << cfg.name << " fingerprint=" << atl::config_fingerprint(cfg)
                      << "\n";
        }
    } catch (const atl::diverged_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const atl::incompat_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const atl::config_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
