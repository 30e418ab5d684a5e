// Trains both models, evaluates edge/cloud/hybrid on the full test grid
// under a simulated network, and writes the report bundle.

#include "cjade/bench.hpp"

#include "CLI11.hpp"
#include "tool_common.hpp"

#include <fstream>
#include <iostream>

int main(int argc, char** argv) {
    using namespace cjade;

    CLI::App app{"cascade benchmark"};
    app.require_subcommand(1);
    CLI::App* run = app.add_subcommand("run", "run the full benchmark");

    std::string manifest_path, profile_path, out_dir, cache_dir, payload = "full_image";
    bench::BenchOptions opt;
    float tau = opt.policy.tau;
    bool verbose = false;
    run->add_option("--manifest", manifest_path, "dataset manifest JSON (defaults when omitted)");
    run->add_option("--profile", profile_path, "network profile JSON (defaults when omitted)");
    run->add_option("--seed", opt.seed, "training seed")->capture_default_str();
    run->add_option("--out", out_dir, "directory for report.txt/report.json/raw.jsonl/sweep.csv")
        ->required();
    run->add_option("--cache-dir", cache_dir, "reuse trained weights across runs");
    run->add_option("--tau", tau, "headline escalation threshold")->capture_default_str();
    run->add_option("--payload", payload, "headline payload: full_image, roi, or features")
        ->capture_default_str();
    run->add_option("--light-epochs", opt.light_epochs)->capture_default_str();
    run->add_option("--large-epochs", opt.large_epochs)->capture_default_str();
    run->add_option("--head-epochs", opt.head_epochs)->capture_default_str();
    run->add_flag("--verbose", verbose, "progress to stderr");
    CLI11_PARSE(app, argc, argv);

    try {
        if (!manifest_path.empty()) {
            std::ifstream f(manifest_path);
            if (!f) throw ValueError("cannot read " + manifest_path);
            opt.manifest = data::manifest_from_json(nlohmann::json::parse(f));
        }
        if (!profile_path.empty()) {
            std::ifstream f(profile_path);
            if (!f) throw ValueError("cannot read " + profile_path);
            opt.profile = bench::profile_from_json(nlohmann::json::parse(f));
        }
        opt.policy.tau = tau;
        opt.policy.payload = tool::payload_from_flag(payload);
        opt.out_dir = out_dir;
        opt.cache_dir = cache_dir;
        opt.verbose = verbose;

        bench::BenchReport rep = bench::run_benchmark(opt);
        std::cout << rep.to_text() << "\nreports written to " << out_dir << std::endl;
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    }
}
