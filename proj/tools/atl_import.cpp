// Imports an externally converted weight container into the native
// checkpoint format via a rename manifest.

#include <CLI11.hpp>
#include <iostream>

#include "atl/checkpoint.hpp"
#include "atl/experiment.hpp"

int main(int argc, char** argv) {
    CLI::App app{"checkpoint importer"};
    std::string input, manifest, output, arch_path;
    uint64_t seed = 0;
    app.add_option("--input", input, "external container file")->required();
    app.add_option("--manifest", manifest, "rename manifest: external_name internal_name")
        ->required();
    app.add_option("--arch", arch_path, "config file holding the target student.* arch")
        ->required();
    app.add_option("--output", output, "destination checkpoint")->required();
    app.add_option("--seed", seed, "init seed for parameters the import does not cover");
    CLI11_PARSE(app, argc, argv);

    try {
        atl::ExperimentConfig cfg = atl::load_config(arch_path);
        atl::Checkpoint ck = atl::import_checkpoint(input, manifest, cfg.student_arch, seed);
        atl::detail::write_container(output, ck.arch, ck.parameters, ck.metadata);
        std::cout << "imported " << ck.parameters.size() << " tensors to " << output << "\n";
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
