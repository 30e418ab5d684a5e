// Edge-side client: classifies one image or a whole dataset split through
// the cascade, escalating to a remote server when the gate is unsure.

#include "cjade/net.hpp"

#include "CLI11.hpp"
#include "tool_common.hpp"

#include <atomic>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>

namespace {

using namespace cjade;

struct PolicyFlags {
    float threshold = 0.85f;
    std::string payload = "image";
    std::string fusion = "cloud-wins";
    std::string fallback = "edge";
    double timeout_ms = 1000.0;

    void attach(CLI::App& cmd) {
        cmd.add_option("--threshold", threshold, "escalate when edge confidence is below this")
            ->capture_default_str();
        cmd.add_option("--payload", payload, "image, roi, or features")->capture_default_str();
        cmd.add_option("--fusion", fusion, "cloud-wins or weighted:ALPHA")->capture_default_str();
        cmd.add_option("--fallback", fallback, "edge or error when escalation fails")
            ->capture_default_str();
        cmd.add_option("--timeout-ms", timeout_ms, "escalation round-trip budget")
            ->capture_default_str();
    }

    cascade::CascadePolicy to_policy() const {
        cascade::CascadePolicy p;
        p.tau = threshold;
        p.payload = tool::payload_from_flag(payload);
        tool::apply_fusion_flag(p, fusion);
        tool::apply_fallback_flag(p, fallback);
        p.timeout_ms = timeout_ms;
        cascade::validate_policy(p);
        return p;
    }
};

// one transport per thread; Features payloads are pinned to the edge hash
std::unique_ptr<net::RemoteCloud> make_transport(const std::string& server,
                                                 const models::ModelArtifact& edge) {
    if (server.empty()) return nullptr;
    const tool::HostPort hp = tool::parse_host_port(server);
    auto t = std::make_unique<net::RemoteCloud>(hp.host, static_cast<std::uint16_t>(hp.port));
    t->set_expected_edge_hash(edge.meta_hash());
    return t;
}

int run_classify(const std::string& input, const std::string& edge_weights,
                 const std::string& server, const PolicyFlags& flags, bool offline, bool json_out) {
    Tensor image;
    try {
        image = tool::load_input(input);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    }

    models::ModelArtifact edge = models::load_model(edge_weights);
    const cascade::CascadePolicy policy = flags.to_policy();
    std::unique_ptr<net::RemoteCloud> transport;
    if (!offline) transport = make_transport(server, edge);

    cascade::ClassificationResult r;
    try {
        r = cascade::classify_cascaded(image, policy, edge, transport.get());
    } catch (const cascade::EscalationError& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 2;
    }

    if (json_out) {
        std::cout << tool::result_json(r, true).dump() << std::endl;
    } else {
        std::cout << "label: " << r.label << " (confidence " << r.confidence << ")\n"
                  << "provenance: " << cascade::provenance_name(r.provenance) << "\n";
        std::printf("timing ms: edge %.2f network %.2f cloud %.2f total %.2f\n", r.timing.edge_ms,
                    r.timing.network_ms, r.timing.cloud_ms, r.timing.total_ms);
        std::cout << "bytes: sent " << r.bytes_sent << " received " << r.bytes_received
                  << std::endl;
    }
    return 0;
}

int run_batch(const std::string& manifest_path, const std::string& split_name,
              const std::string& out_path, const std::string& edge_weights,
              const std::string& server, const PolicyFlags& flags, bool offline, int parallel) {
    data::DatasetManifest manifest;
    if (!manifest_path.empty()) {
        std::ifstream mf(manifest_path);
        if (!mf) throw ValueError("cannot read " + manifest_path);
        manifest = data::manifest_from_json(nlohmann::json::parse(mf));
    }
    data::DatasetSplits splits = data::build_dataset(manifest);
    const std::vector<data::SampleRecord>* split = &splits.test;
    if (split_name == "train") split = &splits.train;
    else if (split_name == "val") split = &splits.val;
    else if (split_name != "test") throw ValueError("split must be train, val, or test");

    models::ModelArtifact edge = models::load_model(edge_weights);
    const cascade::CascadePolicy policy = flags.to_policy();

    const std::size_t n = split->size();
    std::vector<nlohmann::json> lines(n);
    std::atomic<std::size_t> next{0};
    std::atomic<std::size_t> correct{0}, escalated{0};

    // each worker owns a model copy (forward caches activations) and its own
    // connection; results land in index order regardless of scheduling
    auto drive = [&](models::ModelArtifact& my_edge) {
        std::unique_ptr<net::RemoteCloud> transport;
        if (!offline) transport = make_transport(server, my_edge);
        for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
            const auto& rec = (*split)[i];
            cascade::ClassificationResult r;
            try {
                r = cascade::classify_cascaded(rec.image, policy, my_edge, transport.get());
            } catch (const cascade::EscalationError& e) {
                r = e.partial; // fallback recorded, batch completes
            }
            // wall-clock timing is omitted so reruns are byte-identical
            nlohmann::json j = tool::result_json(r, false);
            j["index"] = i;
            j["truth"] = rec.label;
            j["condition"] = data::condition_name(rec.condition);
            j["correct"] = r.label == rec.label;
            lines[i] = std::move(j);
            if (r.label == rec.label) correct.fetch_add(1);
            if (r.provenance != cascade::Provenance::Edge) escalated.fetch_add(1);
        }
    };

    const int workers = std::clamp<int>(parallel, 1, std::max<int>(1, static_cast<int>(n)));
    std::exception_ptr worker_error;
    std::mutex err_mu;
    std::vector<std::thread> ts;
    for (int w = 0; w < workers - 1; ++w)
        ts.emplace_back([&] {
            try {
                models::ModelArtifact my_edge = models::load_model(edge_weights);
                drive(my_edge);
            } catch (...) {
                std::lock_guard<std::mutex> lk(err_mu);
                if (!worker_error) worker_error = std::current_exception();
                next.store(n); // stop handing out work
            }
        });
    drive(edge);
    for (auto& t : ts) t.join();
    if (worker_error) std::rethrow_exception(worker_error);

    std::ostream* out = &std::cout;
    std::ofstream file;
    if (!out_path.empty()) {
        file.open(out_path, std::ios::binary);
        if (!file) throw ValueError("cannot write " + out_path);
        out = &file;
    }
    for (const auto& j : lines) *out << j.dump() << "\n";
    nlohmann::json summary;
    summary["summary"] = {
        {"samples", n},
        {"accuracy_pct", n ? 100.0 * static_cast<double>(correct) / static_cast<double>(n) : 0.0},
        {"escalation_rate", n ? static_cast<double>(escalated) / static_cast<double>(n) : 0.0}};
    *out << summary.dump() << "\n";
    if (!out_path.empty())
        std::cout << "wrote " << n << " results to " << out_path << std::endl;
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"jade cascade client"};
    app.require_subcommand(1);

    std::string edge_weights, server, input;
    bool offline = false, json_out = false;
    PolicyFlags flags;

    CLI::App* classify = app.add_subcommand("classify", "classify one image or dataset sample");
    classify->add_option("input", input, "PPM path or sample:class=C,index=I[,seed=S][,size=N]")
        ->required();
    classify->add_option("--edge-weights", edge_weights, "lightweight model weight file")
        ->envname("CJADE_EDGE_WEIGHTS")
        ->required();
    classify->add_option("--server", server, "HOST:PORT of the classification server")
        ->envname("CJADE_SERVER");
    classify->add_flag("--offline", offline, "never contact a server");
    classify->add_flag("--json", json_out, "emit one machine-readable JSON line");
    flags.attach(*classify);

    std::string manifest_path, split_name = "test", out_path;
    int parallel = 1;
    CLI::App* batch = app.add_subcommand("batch", "classify a dataset split to JSON lines");
    batch->add_option("--manifest", manifest_path, "dataset manifest JSON (defaults when omitted)");
    batch->add_option("--split", split_name, "train, val, or test")->capture_default_str();
    batch->add_option("--out", out_path, "output file (stdout when omitted)");
    batch->add_option("--edge-weights", edge_weights, "lightweight model weight file")
        ->envname("CJADE_EDGE_WEIGHTS")
        ->required();
    batch->add_option("--server", server, "HOST:PORT of the classification server")
        ->envname("CJADE_SERVER");
    batch->add_option("--parallel", parallel, "worker connections")->capture_default_str();
    batch->add_flag("--offline", offline, "never contact a server");
    flags.attach(*batch);

    CLI11_PARSE(app, argc, argv);

    try {
        if (classify->parsed())
            return run_classify(input, edge_weights, server, flags, offline, json_out);
        return run_batch(manifest_path, split_name, out_path, edge_weights, server, flags, offline,
                         parallel);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    }
}
