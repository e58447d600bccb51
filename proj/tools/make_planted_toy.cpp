#include "planted/planted_toy.hpp"

#include "pertrace/errors.hpp"

#include <CLI11.hpp>
#include <fmt/core.h>

int main(int argc, char** argv) {
    CLI::App app{"Writes the planted-circuit toy model and its fixture corpus"};
    std::string out = "tests/fixtures/planted_toy";
    app.add_option("--out", out, "Output directory")->capture_default_str();
    CLI11_PARSE(app, argc, argv);
    try {
        pertrace::planted::write_fixture(out);
    } catch (const pertrace::Error& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return 3;
    }
    fmt::print("wrote {}\n", out);
    return 0;
}
