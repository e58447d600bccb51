#include "planted/planted_toy.hpp"

#include "pertrace/circuits.hpp"
#include "pertrace/engine.hpp"
#include "pertrace/interventions.hpp"
#include "pertrace/prompts.hpp"

#include <benchmark/benchmark.h>

using namespace pertrace;

namespace {

struct Planted {
    ModelBundle model;
    std::vector<PromptPair> pairs;
};

const Planted& planted_setup() {
    static const Planted p = [] {
        Planted out;
        out.model = expand_vocab_with_pad(planted::build_model());
        const PromptTemplate tpl = planted::toy_template();
        for (const QAExample& ex : planted::build_corpus())
            out.pairs.push_back(build_pair(ex, out.model.tokenizer, identity_permutation(), tpl,
                                           out.model.arch.pad_token_id));
        out.pairs = filter_clean_correct(out.model, out.pairs);
        return out;
    }();
    return p;
}

void BM_Forward(benchmark::State& state) {
    const Planted& p = planted_setup();
    const auto& ids = p.pairs.front().persuasive_ids;
    const RecordOptions rec = state.range(0) ? RecordOptions::all() : RecordOptions{};
    for (auto _ : state) benchmark::DoNotOptimize(run(p.model, ids, {}, rec));
    state.SetLabel(state.range(0) ? "all hooks" : "no hooks");
}
BENCHMARK(BM_Forward)->Arg(0)->Arg(1);

void BM_RestorationSweep(benchmark::State& state) {
    const Planted& p = planted_setup();
    const auto comps = all_components(p.model.arch);
    for (auto _ : state)
        benchmark::DoNotOptimize(restoration_sweep(p.model, p.pairs, comps, PatchPositions::all, false,
                                                   static_cast<int>(state.range(0))));
}
BENCHMARK(BM_RestorationSweep)->Arg(1)->Arg(4)->Unit(benchmark::kMillisecond);

void BM_SteeringSweep(benchmark::State& state) {
    const Planted& p = planted_setup();
    const SteeringConfig cfg{planted::routing_direction(), SteeringConfig::default_alphas(),
                             planted::decision_head().layer};
    for (auto _ : state) benchmark::DoNotOptimize(steering_sweep(p.model, p.pairs, cfg));
}
BENCHMARK(BM_SteeringSweep)->Unit(benchmark::kMillisecond);

void BM_Rank1Fit(benchmark::State& state) {
    const Planted& p = planted_setup();
    const ComponentId head = planted::decision_head();
    const QKDataset ds = build_qk_dataset(p.model, p.pairs, head);
    const Matrix w = circuit_matrices(p.model, head.layer, head.head).w_qk;
    Rank1Options opt;
    for (auto _ : state) benchmark::DoNotOptimize(fit_rank1_qk(ds, w, opt));
}
BENCHMARK(BM_Rank1Fit)->Unit(benchmark::kMillisecond);

} // namespace

BENCHMARK_MAIN();
