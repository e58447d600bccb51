#include "pertrace/errors.hpp"
#include "pertrace/hash.hpp"
#include "pertrace/report.hpp"

#include "support/test_models.hpp"

#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <random>
#include <sstream>

using namespace pertrace;

namespace {

std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::uint8_t> bytes(const std::string& s) { return {s.begin(), s.end()}; }

} // namespace

TEST_CASE("base64 known vectors and round trip") {
    const std::pair<const char*, const char*> cases[] = {
        {"", ""}, {"f", "Zg=="}, {"fo", "Zm8="}, {"foo", "Zm9v"}, {"foob", "Zm9vYg=="}, {"fooba", "Zm9vYmE="},
        {"foobar", "Zm9vYmFy"}};
    for (const auto& [plain, enc] : cases) {
        const auto b = bytes(plain);
        CHECK(base64_encode(b.data(), b.size()) == enc);
        CHECK(base64_decode(enc) == b);
    }
    std::mt19937_64 rng(5);
    for (int i = 0; i < 100; ++i) {
        std::vector<std::uint8_t> b(rng() % 50);
        for (auto& x : b) x = static_cast<std::uint8_t>(rng());
        CHECK(base64_decode(base64_encode(b.data(), b.size())) == b);
    }
    CHECK_THROWS_AS(base64_decode("Zm9"), DataError);
    CHECK_THROWS_AS(base64_decode("Zm9*"), DataError);
}

TEST_CASE("matrix and vector blobs") {
    const Matrix m{{1.5f, -2.0f, 3.25f}, {0.0f, 1e-30f, 7.0f}};
    const auto j = matrix_blob(m);
    CHECK(j["dtype"] == "F32");
    CHECK(j["shape"] == nlohmann::json::array({2, 3}));
    CHECK(matrix_from_blob(nlohmann::json::parse(j.dump())) == m);
    const Vector v = {1.0f, -0.5f};
    CHECK(vector_from_blob(nlohmann::json::parse(vector_blob(v).dump())) == v);
    nlohmann::json bad = nlohmann::json::parse(j.dump());
    bad["shape"] = {4, 4};
    CHECK_THROWS_AS(matrix_from_blob(bad), DataError);
}

TEST_CASE("csv quoting and metadata line") {
    const auto dir = testing::temp_dir("csv");
    RunMetadata meta;
    meta.command = "localize";
    meta.config_hash = "abc";
    meta.seed = 3;
    meta.model_checksum = "0011";
    meta.generated_at = "T";
    {
        CsvWriter w(dir / "x.csv", meta, {"a", "b"});
        w.row({"plain", "with,comma"});
        w.row({"say \"hi\"", "line\nbreak"});
        CHECK_THROWS_AS(w.row({"one"}), DataError);
    }
    const std::string text = read_file(dir / "x.csv");
    CHECK(text ==
          "# localize version=" + std::string(kVersion) +
              " config_hash=abc seed=3 model_checksum=0011 generated_at=T\n"
              "a,b\nplain,\"with,comma\"\n\"say \"\"hi\"\"\",\"line\nbreak\"\n");
    std::filesystem::remove_all(dir);
}

TEST_CASE("numbers and timestamps") {
    for (double v : {0.1, 1.0 / 3.0, 1e-30, -2.5, 123456789.0}) CHECK(std::stod(num(v)) == v);
    CHECK(num(std::nan("")) == "nan");
    ::setenv("PERTRACE_FIXED_TIMESTAMP", "2000-01-01T00:00:00Z", 1);
    CHECK(utc_timestamp() == "2000-01-01T00:00:00Z");
    ::unsetenv("PERTRACE_FIXED_TIMESTAMP");
    const std::string now = utc_timestamp();
    CHECK(now.size() == 20);
    CHECK(now.back() == 'Z');
}

TEST_CASE("hashing") {
    CHECK(fnv1a64("") == 0xcbf29ce484222325ull);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cull);
    CHECK(hex64(0xabcull) == "0000000000000abc");
}

TEST_CASE("routing features and subspaces survive JSON") {
    RoutingFeature f;
    f.u_q = {0.6f, 0.8f, 0.0f};
    f.u_k = {0.0f, 0.0f, 1.0f};
    f.coupling = 2.5;
    f.train_objective = 1e-9;
    f.cv_mean = 2e-9;
    f.fold_objectives = {1e-9, 3e-9};
    f.folds = 2;
    f.converged = false;
    const RoutingFeature g = feature_from_json(nlohmann::json::parse(to_json(f).dump()));
    CHECK(g.u_q == f.u_q);
    CHECK(g.u_k == f.u_k);
    CHECK(g.coupling == f.coupling);
    CHECK(g.cv_mean == f.cv_mean);
    CHECK(g.converged == f.converged);

    DecisionSubspace s;
    s.head = ComponentId::attention(1, 2);
    s.mean = {1, 2, 3, 4};
    s.basis = Matrix{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {0, 0, 0}};
    s.explained_variance_ratio = {0.5f, 0.3f, 0.2f};
    s.centroids = {Vector{1, 0, 0}, Vector{0, 1, 0}, Vector{}, Vector{0, 0, 1}};
    s.counts = {2, 3, 0, 1};
    s.centroids_partial = true;
    const DecisionSubspace t = subspace_from_json(nlohmann::json::parse(to_json(s).dump()));
    CHECK(t.head == s.head);
    CHECK(t.basis == s.basis);
    CHECK(t.mean == s.mean);
    CHECK(t.centroids[2].empty());
    CHECK(t.centroids[3] == s.centroids[3]);
    CHECK(t.counts == s.counts);
    CHECK(t.centroids_partial);
}

TEST_CASE("report serializers expose their key fields") {
    RestorationReport r;
    r.example_ids = {"a"};
    r.entries.push_back({ComponentId::attention(0, 1), 0.5, -0.1, {0.5}, {-0.1}});
    const auto j = to_json(r);
    CHECK(j["n_examples"] == 1);
    CHECK(j["probability"] == "raw");
    SteeringReport s;
    s.alphas = {0.0, 1.0};
    s.selection_rate = {0.0, 1.0};
    s.mean_p_target = {0.25, 0.9};
    const auto js = to_json(s);
    CHECK(js.dump().find("selection_rate") != std::string::npos);
    WindowPatchReport w;
    w.best_denoise = LayerWindow{0, 1};
    CHECK(to_json(w).dump().find("best") != std::string::npos);
}
