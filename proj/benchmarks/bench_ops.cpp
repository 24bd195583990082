#include <benchmark/benchmark.h>

#include "segkit/dcn.hpp"
#include "segkit/segmentation.hpp"
#include "segkit/vqkd.hpp"

using namespace segkit;

namespace {

Tensor random_tensor(const Shape& shape, std::uint64_t seed) {
  Rng rng(seed);
  return make_tensor(shape, Init::trunc_normal(1.0), rng);
}

void BM_Quantize(benchmark::State& state) {
  Rng rng(1);
  const auto k = state.range(0);
  const Codebook cb = Codebook::random(k, 32, rng);
  const Tensor x = random_tensor({196, 32}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(quantize(x, cb));
  state.SetItemsProcessed(state.iterations() * 196);
}
BENCHMARK(BM_Quantize)->Arg(64)->Arg(1024)->Arg(8192);

void BM_AttentionForwardBackward(benchmark::State& state) {
  const auto n = state.range(0);
  ParameterSet ps(1);
  const auto w = make_attention(ps, "attn", 64);
  const Var x(random_tensor({n, 64}, 3), true);
  for (auto _ : state) {
    ops::sum(multi_head_attention(x, w, 4)).backward();
  }
}
BENCHMARK(BM_AttentionForwardBackward)->Arg(64)->Arg(256);

void BM_DcnV3(benchmark::State& state) {
  const auto s = state.range(0);
  ParameterSet ps(1);
  const auto w = make_dcn_v3(ps, "dcn", 64, 4);
  const Var x(random_tensor({s, s, 64}, 4), true);
  for (auto _ : state) ops::sum(dcn_v3(x, w)).backward();
}
BENCHMARK(BM_DcnV3)->Arg(16)->Arg(32);

void BM_Conv3x3(benchmark::State& state) {
  const auto s = state.range(0);
  ParameterSet ps(1);
  const auto conv = make_conv(ps, "conv", 64, 64, 3, 1, 1);
  const Var x(random_tensor({s, s, 64}, 5), true);
  for (auto _ : state) ops::sum(conv(x)).backward();
}
BENCHMARK(BM_Conv3x3)->Arg(16)->Arg(32);

void BM_ToySegmentationStep(benchmark::State& state) {
  const auto kind = state.range(0) == 0 ? BackboneKind::ViT : BackboneKind::DCN;
  SegmentationModel model(SegModelConfig::toy(kind, 5), 1);
  const Tensor img = random_tensor({64, 64, 3}, 6);
  Mask mask(64, 64, 1);
  for (auto _ : state) {
    const auto out = model.forward(img);
    seg_loss(out.logits, mask, out.aux).backward();
  }
  state.SetLabel(backbone_name(kind));
}
BENCHMARK(BM_ToySegmentationStep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
