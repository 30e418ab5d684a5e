// Dataset inspection: write canonical manifests, report split sizes and
// hashes, and export samples as binary PPM images.

#include "cjade/dataset.hpp"

#include "CLI11.hpp"
#include "tool_common.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>

namespace {

using namespace cjade;

data::DatasetManifest load_manifest(const std::string& path) {
    if (path.empty()) return {};
    std::ifstream f(path);
    if (!f) throw ValueError("cannot read " + path);
    return data::manifest_from_json(nlohmann::json::parse(f));
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"jade dataset tool"};
    app.require_subcommand(1);

    std::string manifest_path, out;
    data::DatasetManifest edit;

    CLI::App* manifest = app.add_subcommand("manifest", "write a canonical manifest JSON");
    manifest->add_option("--out", out, "output path")->required();
    manifest->add_option("--classes", edit.class_count)->capture_default_str();
    manifest->add_option("--samples-per-class", edit.samples_per_class)->capture_default_str();
    manifest->add_option("--size", edit.image_size)->capture_default_str();
    manifest->add_option("--seed", edit.master_seed)->capture_default_str();

    CLI::App* info = app.add_subcommand("info", "print manifest, hash, and split sizes");
    info->add_option("--manifest", manifest_path, "manifest JSON (defaults when omitted)");

    std::string split_name = "test";
    int limit = 16;
    CLI::App* exp = app.add_subcommand("export", "dump split samples as PPM images");
    exp->add_option("--manifest", manifest_path, "manifest JSON (defaults when omitted)");
    exp->add_option("--split", split_name, "train, val, or test")->capture_default_str();
    exp->add_option("--limit", limit, "samples to export, 0 for all")->capture_default_str();
    exp->add_option("--out", out, "output directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (manifest->parsed()) {
            data::validate_manifest(edit);
            std::ofstream f(out, std::ios::binary);
            if (!f) throw ValueError("cannot write " + out);
            f << data::manifest_to_json(edit).dump(2) << "\n";
            std::cout << "wrote " << out << " (content hash " << data::manifest_hash(edit) << ")"
                      << std::endl;
            return 0;
        }

        const data::DatasetManifest m = load_manifest(manifest_path);
        data::DatasetSplits splits = data::build_dataset(m);

        if (info->parsed()) {
            nlohmann::json j = data::manifest_to_json(m);
            j["split_sizes"] = {{"train", splits.train.size()},
                                {"val", splits.val.size()},
                                {"test", splits.test.size()}};
            j["split_hashes"] = {{"train", data::split_content_hash(splits.train)},
                                 {"val", data::split_content_hash(splits.val)},
                                 {"test", data::split_content_hash(splits.test)}};
            std::cout << j.dump(2) << std::endl;
            return 0;
        }

        const std::vector<data::SampleRecord>* split = &splits.test;
        if (split_name == "train") split = &splits.train;
        else if (split_name == "val") split = &splits.val;
        else if (split_name != "test") throw ValueError("split must be train, val, or test");

        std::filesystem::create_directories(out);
        const std::size_t n =
            limit > 0 ? std::min<std::size_t>(split->size(), static_cast<std::size_t>(limit))
                      : split->size();
        std::ofstream index(out + "/index.jsonl", std::ios::binary);
        for (std::size_t i = 0; i < n; ++i) {
            const auto& rec = (*split)[i];
            char name[64];
            std::snprintf(name, sizeof(name), "%s_%04zu_c%d_%s.ppm", split_name.c_str(), i,
                          rec.label, data::condition_name(rec.condition));
            tool::write_ppm(out + "/" + name, rec.image);
            index << nlohmann::json{{"file", name},
                                    {"label", rec.label},
                                    {"condition", data::condition_name(rec.condition)},
                                    {"seed", rec.seed}}
                         .dump()
                  << "\n";
        }
        std::cout << "exported " << n << " samples to " << out << std::endl;
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    }
}
