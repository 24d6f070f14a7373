// SPDX-License-Identifier: Apache-2.0
//
// samkit: command-line front end for the select-and-merge NER toolkit.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "samkit/cost.hpp"
#include "samkit/pipeline.hpp"
#include "samkit/toylab.hpp"

namespace {

struct SharedFlags {
    std::string config_path;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::string output_dir;
    std::string registry;
    std::string endpoint;
    bool mock = false;
};

/// Loads the JSON config and layers any explicitly given flags on top.
samkit::PipelineConfig resolve_pipeline_config(const SharedFlags& flags) {
    if (flags.config_path.empty()) {
        throw samkit::ConfigError("this command needs --config <file>");
    }
    samkit::PipelineConfig cfg = samkit::load_pipeline_config(flags.config_path);
    if (flags.seed_set) cfg.seed = flags.seed;
    if (!flags.output_dir.empty()) cfg.output_dir = flags.output_dir;
    if (!flags.registry.empty()) cfg.registry_path = flags.registry;
    if (flags.mock && !flags.endpoint.empty()) {
        throw samkit::ConfigError("--mock and --endpoint are mutually exclusive");
    }
    if (!flags.endpoint.empty()) {
        cfg.endpoint.base_url = flags.endpoint;
        cfg.mock = false;
    }
    if (flags.mock) {
        cfg.mock = true;
        cfg.endpoint.base_url.clear();
    }
    cfg.validate();
    return cfg;
}

void print_warnings(const std::vector<std::string>& warnings) {
    for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
}

void run_select(const SharedFlags& flags) {
    const auto cfg = resolve_pipeline_config(flags);
    const auto outcome = samkit::cmd_select(cfg);
    print_warnings(outcome.warnings);
    for (const auto& cluster : outcome.clusters) {
        auto expert_list = [](const std::vector<std::string>& ids) {
            std::string joined;
            for (const auto& id : ids) {
                if (!joined.empty()) joined += ", ";
                joined += id;
            }
            return joined;
        };
        std::cout << "wrote " << cluster.ds_path << " (selected "
                  << expert_list(cluster.ds.selected) << ")\n";
        std::cout << "wrote " << cluster.se_path << " (selected "
                  << expert_list(cluster.se.selected) << ")\n";
    }
}

void run_merge(const SharedFlags& flags) {
    const auto cfg = resolve_pipeline_config(flags);
    const auto outcome = samkit::cmd_merge(cfg);
    for (const auto& cluster : outcome.clusters) {
        for (const auto& model : cluster.models) {
            std::cout << "wrote " << model.archive_path << " ("
                      << samkit::to_string(cfg.merge.method) << " over "
                      << model.experts.size() << " experts)\n";
            if (!model.model_path.empty()) {
                std::cout << "wrote " << model.model_path << "\n";
            }
        }
    }
    std::cout << "wrote " << outcome.report_path << "\n";
}

void run_pipeline(const SharedFlags& flags) {
    const auto cfg = resolve_pipeline_config(flags);
    const auto outcome = samkit::cmd_run(cfg);
    print_warnings(outcome.selection.warnings);
    std::cout << "wrote " << outcome.predictions_path << "\n";
    std::cout << "wrote " << outcome.merge.report_path << "\n";
    if (!outcome.eval.empty()) {
        std::cout << "wrote " << outcome.eval_path << "\n\n";
        std::cout << samkit::format_eval_table(outcome.eval);
    }
    std::cout << "wrote " << outcome.manifest_path << "\n";
}

void run_evaluate(const std::string& predictions, const std::string& gold,
                  const std::string& json_out) {
    const auto report = samkit::evaluate_files(predictions, gold);
    std::map<std::string, samkit::EvalReport> rows{{"predictions", report}};
    std::cout << samkit::format_eval_table(rows);
    if (!json_out.empty()) {
        samkit::detail::write_json_file(json_out, report.to_json());
        std::cout << "wrote " << json_out << "\n";
    }
}

void run_ensemble(const std::vector<std::string>& inputs, const std::string& mode,
                  std::size_t threshold, const std::string& out_path) {
    const auto folded = samkit::ensemble_files(inputs, mode, threshold);
    samkit::write_predictions(folded, out_path);
    std::cout << "wrote " << out_path << " (" << folded.size() << " instances, "
              << mode << ")\n";
}

void run_cost(const samkit::CostQuery& query, bool as_json) {
    const auto report = samkit::compute_cost(query);
    if (as_json) {
        std::cout << report.to_json().dump(2) << "\n";
    } else {
        std::cout << samkit::format_cost_report(report);
    }
}

void run_toylab(const SharedFlags& flags, const std::string& spec_path) {
    samkit::StudySpec spec = spec_path.empty() ? samkit::make_default_study()
                                               : samkit::load_study_spec(spec_path);
    if (flags.seed_set) spec.config.seeds = {flags.seed};
    const auto report =
        samkit::run_domain_study(spec.sources, spec.held_out, spec.config);
    const std::string table = samkit::format_study_table(report);
    std::cout << table;
    const std::string out_dir = flags.output_dir.empty() ? "out" : flags.output_dir;
    samkit::detail::ensure_dir(out_dir);
    const auto base = std::filesystem::path(out_dir);
    samkit::detail::write_json_file((base / "study_report.json").string(),
                                    report.to_json());
    samkit::detail::write_text_file((base / "study_table.txt").string(), table);
    std::cout << "wrote " << (base / "study_report.json").string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"samkit: select and merge domain-expert model deltas for NER"};
    app.require_subcommand(1);
    app.fallthrough();

    SharedFlags flags;
    app.add_option("--config", flags.config_path, "pipeline config JSON");
    app.add_option("--seed", flags.seed, "root seed override")
        ->each([&flags](const std::string&) { flags.seed_set = true; });
    app.add_option("--output-dir", flags.output_dir, "artifact directory override");
    app.add_option("--registry", flags.registry, "expert registry override");
    app.add_option("--endpoint", flags.endpoint, "inference endpoint base URL");
    app.add_flag("--mock", flags.mock, "use the deterministic mock backend");

    auto* select = app.add_subcommand(
        "select", "rank experts for a target corpus (both strategies)");
    select->callback([&] { run_select(flags); });

    auto* merge =
        app.add_subcommand("merge", "merge the selected experts' delta archives");
    merge->callback([&] { run_merge(flags); });

    auto* run = app.add_subcommand(
        "run", "full pipeline: select, merge, infer, ensemble, evaluate");
    run->callback([&] { run_pipeline(flags); });

    auto* evaluate =
        app.add_subcommand("evaluate", "score a predictions file against gold");
    std::string eval_predictions, eval_gold, eval_json;
    evaluate->add_option("--predictions", eval_predictions, "predictions JSONL")
        ->required();
    evaluate->add_option("--gold", eval_gold, "gold dataset JSONL")->required();
    evaluate->add_option("--json", eval_json, "also write the report as JSON");
    evaluate->callback([&] { run_evaluate(eval_predictions, eval_gold, eval_json); });

    auto* ensemble =
        app.add_subcommand("ensemble", "fold several prediction files into one");
    std::vector<std::string> ens_inputs;
    std::string ens_mode = "union";
    std::size_t ens_threshold = 0;
    std::string ens_out;
    ensemble->add_option("--inputs", ens_inputs, "prediction JSONL files")
        ->required()
        ->expected(2, -1);
    ensemble->add_option("--mode", ens_mode, "union, intersection, or vote");
    ensemble->add_option("--threshold", ens_threshold, "votes needed (mode=vote)");
    ensemble->add_option("--out", ens_out, "output predictions JSONL")->required();
    ensemble->callback(
        [&] { run_ensemble(ens_inputs, ens_mode, ens_threshold, ens_out); });

    auto* cost =
        app.add_subcommand("cost", "adapter parameter-storage cost report");
    samkit::CostQuery query;
    bool cost_json = false;
    cost->add_option("-H,--hidden-dim", query.hidden_dim, "model hidden dimension");
    cost->add_option("-r,--rank", query.lora_rank, "adapter rank");
    cost->add_option("-L,--layers", query.layers, "transformer layer count");
    cost->add_option("-V,--vocab-size", query.vocab_size, "vocabulary size");
    cost->add_option("-n,--num-experts", query.num_experts, "number of experts");
    cost->add_flag("--json", cost_json, "emit the report as JSON");
    cost->callback([&] { run_cost(query, cost_json); });

    auto* toylab =
        app.add_subcommand("toylab", "desk-scale synthetic domain study");
    std::string toylab_spec;
    toylab->add_option("--spec", toylab_spec, "study spec JSON (default: built-in)");
    toylab->callback([&] { run_toylab(flags, toylab_spec); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const samkit::Error& e) {
        std::cerr << "samkit: " << e.what() << "\n";
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "samkit: internal error: " << e.what() << "\n";
        return 5;
    }
    return 0;
}
