#include <gtest/gtest.h>

#include <fstream>
#include <random>
#include <sstream>

#include "oracles.hpp"
#include "shiftcnn/analyzer.hpp"
#include "shiftcnn/engine.hpp"
#include "shiftcnn/synthetic.hpp"
#include "test_support.hpp"

namespace shiftcnn {
namespace {

const CodebookConfig kN2B4(2, 4);

std::vector<LayerRecord> load_layers(const std::string& name) {
  std::ifstream in(std::string(SHIFTCNN_DATA_DIR) + "/layers/" + name);
  EXPECT_TRUE(in) << name;
  return parse_layer_file(in);
}

std::string parse_error_of(const std::string& text) {
  std::istringstream in(text);
  try {
    parse_layer_file(in);
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::parse_error);
    return e.what();
  }
  ADD_FAILURE() << "parsed: " << text;
  return {};
}

TEST(LayerCost, WorkedExample) {
  const LayerSpec spec{"conv", 64, 128, 3, 3, 56, 56, 1, 1, true};
  const auto cost = layer_cost(spec, kN2B4);
  EXPECT_EQ(cost.conv_mult_cycles, 231'211'008u);
  EXPECT_EQ(cost.shift_alu_cycles, 200'704u);
  EXPECT_EQ(cost.shift_product_ops, 17u * 200'704u);
  EXPECT_EQ(cost.speedup, 1152.0);
}

TEST(LayerCost, PointwiseSingleOutputHasNoAdvantage) {
  const LayerSpec spec{"pw", 16, 1, 1, 1, 9, 9, 1, 0, true};
  EXPECT_EQ(layer_cost(spec, kN2B4).speedup, 1.0);
}

TEST(LayerCost, StridedLayerUsesOutputExtentsForMultiplies) {
  const LayerSpec spec{"s2", 3, 64, 7, 7, 224, 224, 2, 3, true};
  const auto cost = layer_cost(spec, kN2B4);
  EXPECT_EQ(cost.conv_mult_cycles, 64u * 112 * 112 * 3 * 49);
  EXPECT_EQ(cost.shift_alu_cycles, 3u * 224 * 224);
}

TEST(LayerCost, SpeedupAndProductFactorSweep) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 10'000; ++trial) {
    LayerSpec s;
    s.in_channels = testing::uniform_size(rng, 1, 512);
    s.out_channels = testing::uniform_size(rng, 1, 512);
    const std::size_t k = 2 * testing::uniform_size(rng, 0, 3) + 1;
    s.kernel_h = s.kernel_w = k;
    s.padding = k / 2;
    s.in_h = testing::uniform_size(rng, k, 64);
    s.in_w = testing::uniform_size(rng, k, 64);
    const CodebookConfig config(static_cast<int>(testing::uniform_size(rng, 1, 8)),
                                static_cast<int>(testing::uniform_size(rng, 2, 8)));
    const auto cost = layer_cost(s, config);
    ASSERT_EQ(cost.speedup, static_cast<double>(s.out_channels * k * k));
    ASSERT_EQ(cost.shift_product_ops,
              static_cast<std::uint64_t>(config.combinations()) * cost.shift_alu_cycles);
  }
}

TEST(ModelCost, SingleLayerEqualsLayerCost) {
  const LayerSpec spec{"conv", 64, 128, 3, 3, 56, 56, 1, 1, true};
  const auto total = model_cost({{spec, ""}}, kN2B4);
  const auto one = layer_cost(spec, kN2B4);
  EXPECT_EQ(total.conv_mult_cycles, one.conv_mult_cycles);
  EXPECT_EQ(total.shift_alu_cycles, one.shift_alu_cycles);
  EXPECT_EQ(total.shift_product_ops, one.shift_product_ops);
  EXPECT_EQ(total.speedup, one.speedup);
}

TEST(ModelCost, AdditiveOverConcatenation) {
  std::mt19937_64 rng(22);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<LayerRecord> a, b;
    for (std::size_t i = testing::uniform_size(rng, 1, 5); i > 0; --i)
      a.push_back({testing::random_spec(rng, 32), ""});
    for (std::size_t i = testing::uniform_size(rng, 1, 5); i > 0; --i)
      b.push_back({testing::random_spec(rng, 32), ""});
    auto ab = a;
    ab.insert(ab.end(), b.begin(), b.end());
    const auto ca = model_cost(a, kN2B4), cb = model_cost(b, kN2B4), cab = model_cost(ab, kN2B4);
    ASSERT_EQ(cab.conv_mult_cycles, ca.conv_mult_cycles + cb.conv_mult_cycles);
    ASSERT_EQ(cab.shift_alu_cycles, ca.shift_alu_cycles + cb.shift_alu_cycles);
    ASSERT_EQ(cab.shift_product_ops, ca.shift_product_ops + cb.shift_product_ops);
  }
}

TEST(ModelCost, SharedInputIsPrecomputedOnce) {
  const LayerSpec e1{"e1", 16, 64, 1, 1, 56, 56, 1, 0, true};
  const LayerSpec e3{"e3", 16, 64, 3, 3, 56, 56, 1, 1, true};
  const auto shared = model_cost({{e1, "sq"}, {e3, "sq"}}, kN2B4);
  const auto separate = model_cost({{e1, ""}, {e3, ""}}, kN2B4);
  EXPECT_EQ(shared.shift_alu_cycles, 16u * 56 * 56);
  EXPECT_EQ(separate.shift_alu_cycles, 2u * 16 * 56 * 56);
  EXPECT_EQ(shared.conv_mult_cycles, separate.conv_mult_cycles);
}

TEST(ModelCost, ShippedInventories) {
  // Exact totals of the shipped files; closeness to the published table is
  // judged by the acceptance binary.
  const auto sq = model_cost(load_layers("squeezenet_v1.1.layers"), kN2B4);
  EXPECT_EQ(sq.conv_mult_cycles, 387'747'520u);
  EXPECT_EQ(sq.shift_alu_cycles, 1'653'595u);
  const auto rn = model_cost(load_layers("resnet18.layers"), kN2B4);
  EXPECT_EQ(rn.conv_mult_cycles, 1'813'561'344u);
  EXPECT_EQ(rn.shift_alu_cycles, 1'831'424u);
  const auto gn = model_cost(load_layers("googlenet.layers"), kN2B4);
  EXPECT_EQ(gn.conv_mult_cycles, 1'581'647'872u);
  EXPECT_EQ(gn.shift_alu_cycles, 2'799'664u);
  const auto ex = model_cost(load_layers("worked_example.layers"), kN2B4);
  EXPECT_EQ(ex.speedup, 1152.0);
}

TEST(LayerFile, ParsesCommentsAndOptionalInput) {
  std::istringstream in(
      "# header\n\n"
      "a 3 8 3 3 10 10 1 1   # trailing comment\n"
      "b 8 8 1 1 10 10 2 0 shared\n");
  const auto records = parse_layer_file(in);
  ASSERT_EQ(records.size(), 2u);
  EXPECT_EQ(records[0].spec.name, "a");
  EXPECT_EQ(records[0].spec.kernel_w, 3u);
  EXPECT_EQ(records[0].input, "");
  EXPECT_EQ(records[1].spec.stride, 2u);
  EXPECT_EQ(records[1].input, "shared");
}

TEST(LayerFile, ErrorsCarryLineNumbers) {
  EXPECT_EQ(parse_error_of("a 3 8 3 3 10 10 1\n"),
            "parse-error: line 1: expected 9 or 10 fields (name C C~ Hf Wf H W stride pad "
            "[input]), got 8");
  EXPECT_NE(parse_error_of("# c\na 3 8 3 3 10 10 1 1\nb 3 x 3 3 10 10 1 1\n").find("line 3: field 3"),
            std::string::npos);
  EXPECT_NE(parse_error_of("a 3 8 3 3 10 10 1 -1\n").find("line 1"), std::string::npos);
  EXPECT_NE(parse_error_of("a 3 8 9 9 4 4 1 0\n").find("line 1"), std::string::npos);
  EXPECT_NE(parse_error_of("a 0 8 3 3 4 4 1 0\n").find("line 1"), std::string::npos);
  EXPECT_EQ(parse_error_of("# nothing\n"), "parse-error: no layer records");
}

TEST(Histogram, Examples) {
  const std::vector<double> w{0.5, 0.5, -0.5};
  const auto h = weight_histogram(w, 2);
  EXPECT_EQ(h.counts, (std::vector<std::uint64_t>{1, 2}));
  EXPECT_EQ(h.total, 3u);

  const std::vector<double> zeros(7, 0.0);
  const auto z = weight_histogram(zeros);
  ASSERT_EQ(z.bins(), 101u);
  EXPECT_EQ(z.counts[50], 7u);
  EXPECT_EQ(z.center(50), 0.0);
  EXPECT_EQ(z.total, 7u);
}

TEST(Histogram, EdgesAndErrors) {
  const auto h = make_histogram(4, -1.0, 1.0);
  EXPECT_EQ(h.edges, (std::vector<double>{-1.0, -0.5, 0.0, 0.5, 1.0}));
  EXPECT_THROW(make_histogram(1, -1.0, 1.0), Error);
  EXPECT_THROW(make_histogram(4, 1.0, 1.0), Error);
  try {
    weight_histogram(std::vector<double>{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::empty_tensor);
  }
}

TEST(Histogram, MatchesBinningOracle) {
  std::mt19937_64 rng(23);
  std::normal_distribution<double> dist(0.0, 0.1);
  std::vector<double> w(100'000);
  for (double& v : w) v = dist(rng);
  const auto h = weight_histogram(w);
  double scale = 0.0;
  for (double v : w) scale = std::max(scale, std::abs(v));
  std::vector<double> normalized;
  for (double v : w) normalized.push_back(v / scale);
  EXPECT_EQ(h.counts, oracle::bin_counts(normalized, h.edges));
}

TEST(Histogram, MassConservationAndEdgeAgreement) {
  std::mt19937_64 rng(24);
  std::uniform_real_distribution<double> dist(-3.0, 3.0);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t bins = testing::uniform_size(rng, 2, 257);
    auto h = make_histogram(bins, -1.0 - 0.01 * trial, 0.5 + 0.003 * trial);
    std::vector<double> values;
    for (std::size_t i = 0; i < 500; ++i) values.push_back(dist(rng));
    // Values landing exactly on edges are the interesting case.
    for (std::size_t i = 0; i < h.edges.size(); i += 3) values.push_back(h.edges[i]);
    values.push_back(std::numeric_limits<double>::quiet_NaN());
    values.push_back(std::numeric_limits<double>::infinity());
    for (double v : values) histogram_add(h, v);
    std::uint64_t sum = 0;
    for (auto c : h.counts) sum += c;
    ASSERT_EQ(sum, h.total);
    ASSERT_EQ(h.total, values.size() - 2);
    ASSERT_EQ(h.counts, oracle::bin_counts(values, h.edges));
  }
}

TEST(Histogram, FormatHasOneLinePerBin) {
  const auto text = format_histogram(weight_histogram(std::vector<double>{0.5, 0.5, -0.5}, 2));
  EXPECT_EQ(text, "-0.5 1\n0.5 2\n");
}

TEST(Divergence, IdenticalModelsPutAllMassAtZero) {
  std::mt19937_64 rng(25);
  const FloatModel m = random_float_model({}, rng);
  std::vector<FloatTensor> inputs;
  for (int i = 0; i < 4; ++i) inputs.push_back(random_uniform_tensor({3, 8, 8}, -1, 1, rng));
  auto net = [&](const FloatTensor& x) { return run_float_network(m, x); };
  const auto d = output_divergence(net, net, inputs);
  EXPECT_EQ(d.mean, 0.0);
  EXPECT_EQ(d.variance, 0.0);
  EXPECT_EQ(d.histogram.counts[50], d.count);
  EXPECT_EQ(d.count, 4u * 4 * 8 * 8);
}

TEST(Divergence, KnownDifferences) {
  const std::vector<FloatTensor> a{FloatTensor({4}, {1.0, 2.0, 3.0, 4.0})};
  const std::vector<FloatTensor> b{FloatTensor({4}, {1.0, 1.0, 3.0, 5.0})};
  const auto d = divergence(a, b, 3);
  EXPECT_EQ(d.mean, 0.0);
  EXPECT_EQ(d.variance, 0.5);
  EXPECT_EQ(d.max_abs, 1.0);
  EXPECT_EQ(d.histogram.counts, (std::vector<std::uint64_t>{1, 2, 1}));
  EXPECT_THROW(divergence(a, {FloatTensor({3}, 0.0)}), Error);
  EXPECT_THROW(output_divergence([](const FloatTensor& x) { return x; },
                                 [](const FloatTensor& x) { return x; },
                                 std::vector<FloatTensor>{}),
               Error);
}

TEST(Divergence, MoreStagesDoNotIncreaseVariance) {
  std::mt19937_64 rng(26);
  const FloatModel m = random_float_model({}, rng);
  std::vector<FloatTensor> inputs;
  for (int i = 0; i < 16; ++i) inputs.push_back(random_uniform_tensor({3, 8, 8}, -1, 1, rng));
  NetworkOptions oracle;
  oracle.float_oracle = true;
  oracle.requantize = false;
  auto reference = [&](const FloatTensor& x) { return run_float_network(m, x); };
  auto quantized = [&](const CodebookConfig& config) {
    const Model q = quantize_model(m, config);
    return output_divergence(
        [&](const FloatTensor& x) { return run_network(q, x, oracle); }, reference, inputs);
  };
  const auto one = quantized(CodebookConfig(1, 4));
  const auto two = quantized(CodebookConfig(2, 4));
  const auto three = quantized(CodebookConfig(3, 4));
  EXPECT_LE(three.variance, one.variance);
  EXPECT_LT(std::abs(two.mean), two.stddev());
}

}  // namespace
}  // namespace shiftcnn
