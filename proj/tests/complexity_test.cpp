#include <gtest/gtest.h>

#include <cmath>

#include "fnk/complexity.hpp"
#include "fnk/network.hpp"
#include "oracles.hpp"

using namespace fnk;

namespace {

ModelSpec single(InputShape in, std::vector<LayerSpec> layers) { return ModelSpec{"t", in, std::move(layers)}; }

// MACs measured by running the brute-force kernels layer by layer on zeros.
std::uint64_t measured_macs(const ModelSpec& m) {
  Tensor x = zeros(Shape{1, m.input.c, m.input.h, m.input.w});
  std::uint64_t total = 0;
  for (const auto& l : m.layers) {
    std::size_t macs = 0;
    if (l.kind == LayerKind::Conv) {
      x = oracle::naive_conv(x, zeros(Shape{l.c_out, l.c_in, l.kh, l.kw}), {}, l.pad, l.stride, &macs);
    } else if (l.is_funnel()) {
      for (auto [kh, kw] : l.funnel.branch_windows()) {
        oracle::naive_depthwise(x, zeros(Shape{1, l.channels, kh, kw}), &macs);
        total += macs;
      }
      macs = 0;
    } else if (l.kind == LayerKind::Pool && l.pool == PoolKind::Global) {
      x = zeros(Shape{1, x.shape().c, 1, 1});
    } else if (l.kind == LayerKind::Linear) {
      macs = l.c_in * l.c_out;
      x = zeros(Shape{1, l.c_out, 1, 1});
    }
    total += macs;
  }
  return total;
}

double round_to(double v, double step) { return std::round(v / step) * step; }

}  // namespace

TEST(Count, SingleConv) {
  const auto m = single({64, 4, 4}, {LayerSpec::conv("c", 64, 64, 3, 1, 1)});
  EXPECT_EQ(count_params(m), 36864u);
  Tensor w(Shape{64, 64, 3, 3});
  EXPECT_EQ(count_params(m), w.size());
}

TEST(Count, ConvFlopsMatchNaiveLoop) {
  const auto m = single({2, 4, 4}, {LayerSpec::conv("c", 2, 2, 3, 1, 1)});
  EXPECT_EQ(count_flops(m), 576u);
  EXPECT_EQ(count_flops(m), measured_macs(m));
}

TEST(Count, FunnelAddOn) {
  const auto relu = single({64, 56, 56}, {LayerSpec::activation("a", ActivationKind::ReLU, 64)});
  const auto frelu = single({64, 56, 56}, {make_activation("a", frelu_choice(3), 64)});
  const auto r = complexity(frelu);
  EXPECT_EQ(r.params, 576u);
  EXPECT_EQ(r.norm_params, 128u);
  Rng rng(1);
  EXPECT_EQ(r.params, make_funnel_params(FunnelConfig{}, 64, rng).branches[0].conv.weights.size());
  EXPECT_EQ(count_flops(frelu) - count_flops(relu), 1806336u);
  EXPECT_EQ(count_flops(frelu), measured_macs(frelu));
}

TEST(Count, ParameterFreeConditionsAddNothing) {
  for (auto cond : {ConditionKind::MaxPool, ConditionKind::AvgPool}) {
    ActivationChoice a = frelu_choice(3);
    a.funnel.condition = cond;
    const auto r = complexity(single({32, 8, 8}, {make_activation("a", a, 32)}));
    EXPECT_EQ(r.params, 0u);
    EXPECT_EQ(r.norm_params, 0u);
    EXPECT_EQ(r.flops, 0u);
  }
}

TEST(Count, PairWindowAndPrelu) {
  ActivationChoice pair = frelu_choice(3);
  pair.funnel.window = WindowKind::Pair1x3_3x1;
  const auto r = complexity(single({16, 8, 8}, {make_activation("a", pair, 16)}));
  EXPECT_EQ(r.params, 16u * 3 + 16u * 3);
  EXPECT_EQ(r.norm_params, 2u * 2 * 16);
  pair.funnel.shared_pair_norm = true;
  EXPECT_EQ(complexity(single({16, 8, 8}, {make_activation("a", pair, 16)})).norm_params, 2u * 16);
  EXPECT_EQ(count_params(single({16, 8, 8}, {LayerSpec::activation("p", ActivationKind::PReLU, 16)})), 16u);
}

TEST(Count, ResNet50MatchesTable) {
  const auto relu = *builtin_model("resnet50-relu");
  const auto frelu = *builtin_model("resnet50-frelu");
  const auto r = complexity(relu);
  const auto f = complexity(frelu);
  EXPECT_NEAR(round_to(r.params / 1e6, 0.1), 25.5, 1e-9);
  EXPECT_NEAR(round_to(r.flops / 1e9, 0.01), 3.86, 1e-9);
  EXPECT_NEAR(round_to(f.params / 1e6, 0.1), 25.5, 1e-9);
  EXPECT_NEAR(round_to(f.flops / 1e9, 0.01), 3.87, 1e-9);
  EXPECT_EQ(format_params(r.params), "25.5M");
  EXPECT_EQ(format_flops(r.flops), "3.86G");
  EXPECT_EQ(format_flops(f.flops), "3.87G");
  // Prelu and swish leave the headline FLOPs unchanged.
  EXPECT_EQ(count_flops(*builtin_model("resnet50-prelu")), r.flops);
  EXPECT_EQ(count_flops(*builtin_model("resnet50-swish")), r.flops);
}

TEST(Count, ResNet101MatchesTable) {
  const auto r = complexity(*builtin_model("resnet101-relu"));
  EXPECT_EQ(format_params(r.params), "44.4M");
  EXPECT_EQ(format_flops(r.flops, 1), "7.6G");
}

TEST(Count, FunnelDeltaIsSumOverReplacedSites) {
  // Stages conv2_x..conv4_x: (blocks, width, spatial) = (3, 64, 56), (4, 128, 28), (6, 256, 14).
  std::uint64_t flops = 0, params = 0;
  for (auto [blocks, c, hw] : {std::tuple{3u, 64u, 56u}, std::tuple{4u, 128u, 28u}, std::tuple{6u, 256u, 14u}}) {
    flops += std::uint64_t{blocks} * c * 9 * hw * hw;
    params += std::uint64_t{blocks} * c * 9;
  }
  const auto r = complexity(*builtin_model("resnet50-relu"));
  const auto f = complexity(*builtin_model("resnet50-frelu"));
  EXPECT_EQ(f.flops - r.flops, flops);
  EXPECT_EQ(f.params - r.params, params);
  EXPECT_LE(static_cast<double>(f.flops - r.flops) / static_cast<double>(r.flops), 0.005);
}

TEST(Count, ToyModelsMatchMeasuredMacs) {
  for (const std::string v : {"relu", "prelu", "frelu"}) {
    const auto m = *builtin_model("toy-cnn-" + v);
    EXPECT_EQ(count_flops(m), measured_macs(m)) << v;
  }
}

TEST(Count, CounterAgreesWithConstructedTensors) {
  auto check = [](const ModelSpec& m) {
    Rng rng(3);
    Network net = Network::build(m, rng);
    std::size_t elems = 0;
    for (const auto& p : net.parameters()) elems += p.value->size();
    EXPECT_EQ(complexity(m).total_params(), elems) << m.name;
  };
  for (const auto& [name, m] : builtin_models())
    if (name.starts_with("toy-cnn")) check(m);
  ActivationChoice pair = frelu_choice(3);
  pair.funnel.window = WindowKind::Pair1x3_3x1;
  check(toy_cnn("toy-pair", pair));
  ActivationChoice gn = frelu_choice(5);
  gn.funnel.norm = NormKind::GroupNorm;
  gn.funnel.norm_groups = 4;
  check(toy_cnn("toy-gn", gn));
  auto mini = resnet("resnet-mini", {1, 1, 1, 1}, frelu_choice(3), false, 10);
  mini.input = InputShape{3, 32, 32};
  check(mini);
}

TEST(Validate, GoodAndBadSpecs) {
  EXPECT_TRUE(validate(single({3, 8, 8}, {LayerSpec::conv("c", 3, 64, 3, 1, 1)})).ok());
  const auto empty = validate(ModelSpec{});
  ASSERT_EQ(empty.diagnostics.size(), 1u);
  EXPECT_EQ(empty.diagnostics[0], "empty model");

  const auto dw = validate(single({8, 4, 4}, {LayerSpec::dwconv("dw7", 16, 3, 3)}));
  ASSERT_FALSE(dw.ok());
  EXPECT_NE(dw.diagnostics[0].find("dw7"), std::string::npos);

  const auto lin = validate(single({8, 4, 4}, {LayerSpec::linear("head", 8, 2)}));
  EXPECT_FALSE(lin.ok());

  ModelSpec res = single({8, 4, 4}, {LayerSpec::marker("b", LayerKind::Block), LayerSpec::conv("c", 8, 16, 1),
                                     LayerSpec::marker("b", LayerKind::End)});
  EXPECT_FALSE(validate(res).ok());
  res.layers.insert(res.layers.begin() + 2, LayerSpec::marker("b.sc", LayerKind::Shortcut));
  res.layers.insert(res.layers.begin() + 3, LayerSpec::conv("proj", 8, 16, 1));
  EXPECT_TRUE(validate(res).ok());

  EXPECT_FALSE(validate(single({8, 4, 4}, {LayerSpec::marker("open", LayerKind::Block)})).ok());
  try {
    count_params(ModelSpec{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Validation);
  }
}

TEST(Format, RoundTripsBuiltins) {
  for (const auto& [name, m] : builtin_models()) {
    const ModelSpec back = parse_model(to_text(m), name);
    EXPECT_EQ(back, m) << name;
  }
}

TEST(Format, ParsesHandWrittenModel) {
  const auto m = parse_model(R"(# tiny
input c=1 h=8 w=8
c1 conv in=1 out=4 k=3 pad=1
n1 norm kind=bn c=4
a1 act kind=frelu c=4 window=pair combine=sum norm=gn groups=2
b block
c2 conv in=4 out=4 k=3 pad=1
b end
gap pool kind=global
fc linear in=4 out=3
)");
  ASSERT_EQ(m.layers.size(), 8u);
  EXPECT_EQ(m.layers[2].funnel.window, WindowKind::Pair1x3_3x1);
  EXPECT_EQ(m.layers[2].funnel.pair_combine, PairCombine::Sum);
  EXPECT_EQ(m.layers[2].funnel.norm_groups, 2u);
  EXPECT_TRUE(validate(m).ok());
  EXPECT_EQ(count_params(m), 4u * 9 + 4u * 3 * 2 + 4u * 4 * 9 + 4u * 3 + 3u);
}

TEST(Format, RejectsMalformedLines) {
  for (const char* text : {"input c=1 h=8 w=8\nx wibble", "input c=1 h=8 w=8\nx conv in=1 out=2 k=3 colour=red",
                           "input c=1 h=8 w=8\nx conv in=one out=2 k=3", "x conv in=1 out=2 k=3",
                           "input c=1 h=8 w=8\nx conv in=1 in=2 out=2 k=3"}) {
    try {
      parse_model(text);
      FAIL() << text;
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::Format) << text;
    }
  }
}

TEST(Format, InputShapeParsing) {
  EXPECT_EQ(parse_input_shape("3x224x224"), (InputShape{3, 224, 224}));
  EXPECT_THROW(parse_input_shape("3x224"), Error);
  EXPECT_THROW(parse_input_shape("0x2x2"), Error);
}

TEST(Count, BreakdownCsvHasOneRowPerLayer) {
  const auto m = *builtin_model("toy-cnn-frelu");
  std::ostringstream os;
  write_breakdown_csv(os, complexity(m));
  std::size_t lines = 0;
  for (char ch : os.str()) lines += ch == '\n';
  EXPECT_EQ(lines, m.layers.size() + 1);
}
